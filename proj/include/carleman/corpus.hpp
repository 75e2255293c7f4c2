#pragma once

#include <carleman/field.hpp>

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace carleman {

/** @brief Value, first and second derivative of a function of one variable. */
using Jet1 = std::array<double, 3>;
using Factor = std::function<Jet1(double)>;

/**
 * @brief Smooth space-time function of product form time(t) * space_0(x_1) * ... with analytic
 * derivatives, used as an independent reference for differenced quantities.
 */
struct SmoothFunction {
    std::string name;
    Factor time;
    std::vector<Factor> space;

    double operator()(const Point& x, double t) const
    {
        double v = time(t)[0];
        for (std::size_t i = 0; i < space.size(); ++i) v *= space[i](x[long(i)])[0];
        return v;
    }
    SpaceTimeFn fn() const
    {
        return [f = *this](const Point& x, double t) { return f(x, t); };
    }

    double dt(const Point& x, double t) const
    {
        double v = time(t)[1];
        for (std::size_t i = 0; i < space.size(); ++i) v *= space[i](x[long(i)])[0];
        return v;
    }

    /** @brief d^2 u / dx_i dx_j. */
    double dxx(const Point& x, double t, int i, int j) const
    {
        double v = time(t)[0];
        for (int k = 0; k < int(space.size()); ++k) {
            const Jet1 s = space[k](x[k]);
            v *= s[(k == i) + (k == j)];
        }
        return v;
    }

    double dx(const Point& x, double t, int i) const
    {
        double v = time(t)[0];
        for (int k = 0; k < int(space.size()); ++k) v *= space[k](x[k])[k == i ? 1 : 0];
        return v;
    }
};

/** @brief Fixed polynomial and trigonometric fields for the identity and decomposition checks. */
inline std::vector<SmoothFunction> smooth_corpus(int n)
{
    auto poly = [](double c0, double c1, double c2, double c3) {
        return Factor([=](double s) {
            return Jet1{c0 + s * (c1 + s * (c2 + s * c3)), c1 + s * (2 * c2 + 3 * c3 * s), 2 * c2 + 6 * c3 * s};
        });
    };
    auto trig = [](double shift, double amp, double freq, double phase) {
        return Factor([=](double s) {
            const double a = freq * s + phase;
            return Jet1{shift + amp * std::sin(a), amp * freq * std::cos(a), -amp * freq * freq * std::sin(a)};
        });
    };
    SmoothFunction p{"tensor_polynomial", poly(1.0, 1.0, 0.5, 0.0), {poly(1.0, 2.0, -1.0, 1.0)}};
    SmoothFunction q{"trigonometric", trig(2.0, 1.0, 1.5, 0.3), {trig(2.0, 1.0, 3.0, 0.0)}};
    for (int i = 1; i < n; ++i) {
        p.space.push_back(poly(1.0, 0.5, -1.0, 0.0));
        q.space.push_back(trig(0.0, 1.0, 2.0, 1.0 + 0.3 * i));
    }
    return {p, q};
}

/** @brief exp(-1/(1 - s^2)) on |s| < 1, zero elsewhere. */
inline double bump(double s)
{
    const double q = 1.0 - s * s;
    return q > 0.0 ? std::exp(-1.0 / q) : 0.0;
}

/**
 * @brief Product of bumps in every spatial axis and in time, supported strictly inside the domain.
 *
 * `shift` in [-1, 1] moves the centre along x1 within the admissible range.
 */
inline SpaceTimeFn space_time_bump(const Domain& d, double T, double shift = 0.0)
{
    const int n = d.dim;
    double c1, r1, rt;
    if (d.kind == DomainKind::Interval1D) {
        c1 = 0.5 * (d.a + d.b);
        r1 = 0.35 * (d.b - d.a);
    } else if (d.is_box()) {
        c1 = 0.125;
        r1 = 0.09;
    } else {
        const double top = d.psi_cap() - 0.25;
        c1 = 0.45 * top;
        r1 = 0.3 * top;
    }
    c1 += 0.4 * shift * r1;
    r1 *= 0.75;
    double rx = d.is_box() ? 0.8 * d.prism_halfwidth() : 0.5 * std::sqrt(2.0 * (d.psi_cap() - 0.25 - c1 - r1));
    rt = 0.4 * T;
    return [=](const Point& x, double t) {
        double v = bump((x[0] - c1) / r1) * bump((t - 0.5 * T) / rt);
        for (int i = 1; i < n && v != 0.0; ++i) v *= bump(x[i] / rx);
        return v;
    };
}

}  // namespace carleman
