#include <carleman/differences.hpp>

#include <gtest/gtest.h>

#include <cmath>

using namespace carleman;

namespace {

std::vector<double> samples(int m, double h, const std::function<double(double)>& f)
{
    std::vector<double> v(m);
    for (int i = 0; i < m; ++i) v[i] = f(i * h);
    return v;
}

double max_err(const std::vector<double>& a, int m, double h, const std::function<double(double)>& f)
{
    double e = 0.0;
    for (int i = 0; i < m; ++i) e = std::max(e, std::abs(a[i] - f(i * h)));
    return e;
}

}  // namespace

TEST(Stencil, ExactOnPolynomials)
{
    const int m = 9;
    const double h = 0.1;
    fd::Shape s({m});
    // Second-order stencils are exact through degree 2, fourth-order through degree 4 (degree 5 for
    // the one-sided second derivative, which uses six points).
    auto p2 = samples(m, h, [](double x) { return 1 + 2 * x - 3 * x * x; });
    EXPECT_LT(max_err(fd::diff(p2, s, 0, 1, h), m, h, [](double x) { return 2 - 6 * x; }), 1e-12);
    EXPECT_LT(max_err(fd::diff(p2, s, 0, 2, h), m, h, [](double) { return -6.0; }), 1e-10);

    fd::DiffOptions o4;
    o4.accuracy = 4;
    auto p4 = samples(m, h, [](double x) { return std::pow(x, 4) - x * x * x + x; });
    EXPECT_LT(max_err(fd::diff(p4, s, 0, 1, h, o4), m, h,
                      [](double x) { return 4 * std::pow(x, 3) - 3 * x * x + 1; }),
              1e-11);
    EXPECT_LT(max_err(fd::diff(p4, s, 0, 2, h, o4), m, h, [](double x) { return 12 * x * x - 6 * x; }), 1e-9);
}

TEST(Stencil, ConvergenceOrders)
{
    auto f = [](double x) { return std::sin(3 * x) + std::exp(x); };
    auto f1 = [](double x) { return 3 * std::cos(3 * x) + std::exp(x); };
    auto f2 = [](double x) { return -9 * std::sin(3 * x) + std::exp(x); };
    for (int acc : {2, 4}) {
        fd::DiffOptions o;
        o.accuracy = acc;
        std::vector<double> e1, e2;
        for (int m : {17, 33, 65}) {
            double h = 1.0 / (m - 1);
            fd::Shape s({m});
            auto v = samples(m, h, f);
            e1.push_back(max_err(fd::diff(v, s, 0, 1, h, o), m, h, f1));
            e2.push_back(max_err(fd::diff(v, s, 0, 2, h, o), m, h, f2));
        }
        // Observed order at least the nominal one (one-sided edge terms may converge faster early on).
        const double target = acc == 2 ? 4.0 : 16.0;
        for (int i = 0; i < 2; ++i) {
            EXPECT_GT(e1[i] / e1[i + 1], 0.85 * target) << "acc " << acc;
            EXPECT_GT(e2[i] / e2[i + 1], 0.85 * target) << "acc " << acc;
            EXPECT_LT(e1[i] / e1[i + 1], 2.0 * target) << "acc " << acc;
            EXPECT_LT(e2[i] / e2[i + 1], 2.0 * target) << "acc " << acc;
        }
    }
}

TEST(Stencil, MaskedRuns)
{
    const int m = 12;
    const double h = 0.1;
    fd::Shape s({m});
    std::vector<std::uint8_t> mask(m, 1);
    mask[5] = 0;
    auto v = samples(m, h, [](double x) { return x * x; });
    fd::DiffOptions o;
    o.mask = &mask;
    auto d = fd::diff(v, s, 0, 2, h, o);
    for (int i = 0; i < m; ++i) {
        if (i == 5) EXPECT_EQ(d[i], 0.0);
        else EXPECT_NEAR(d[i], 2.0, 1e-10);
    }
    mask.assign(m, 1);
    mask[2] = 0;
    EXPECT_THROW(fd::diff(v, s, 0, 2, h, o), StencilError);
    o.strict = false;
    auto lenient = fd::diff(v, s, 0, 2, h, o);
    EXPECT_EQ(lenient[0], 0.0);
    EXPECT_NEAR(lenient[7], 2.0, 1e-10);
}

TEST(Stencil, TooShortForFourthOrder)
{
    fd::Shape s({5});
    std::vector<double> v(5, 1.0);
    fd::DiffOptions o;
    o.accuracy = 4;
    EXPECT_THROW(fd::diff(v, s, 0, 2, 0.1, o), StencilError);
    EXPECT_NO_THROW(fd::diff(v, s, 0, 1, 0.1, o));
}

TEST(Stencil, MixedDerivativeCommutes)
{
    auto g = make_grid(Domain::prism(2), 9, 1.0, 3);
    Field u = sample(g, [](const Point& x, double t) { return std::sin(x[0] * 3 + t) * std::cos(2 * x[1]); });
    Field a = fd::dxx(u, 0, 1), b = fd::dxx(u, 1, 0);
    for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-12);
}

TEST(Stencil, DerivativesOfField)
{
    auto g = make_grid(Domain::prism(2), 9, 1.0, 5);
    Field u = sample(g, [](const Point& x, double t) { return x[0] * x[1] + t * t + x[1] * x[1]; });
    auto d = fd::Derivatives::of(u);
    for (int k = 0; k < g->nt; ++k)
        for (std::size_t i = 0; i < g->num_nodes(); ++i) {
            Point x = g->coords(i);
            EXPECT_NEAR(d.ut.at(i, k), 2 * g->time(k), 1e-10);
            EXPECT_NEAR(d.grad[0].at(i, k), x[1], 1e-10);
            EXPECT_NEAR(d.grad[1].at(i, k), x[0] + 2 * x[1], 1e-10);
            EXPECT_NEAR(d.hess[0][1].at(i, k), 1.0, 1e-9);
            EXPECT_NEAR(d.hess[1][1].at(i, k), 2.0, 1e-9);
            EXPECT_NEAR(d.hess[0][0].at(i, k), 0.0, 1e-9);
        }
}

TEST(Stencil, NormalDerivative)
{
    auto g = make_grid(Domain::prism(2), 9, 1.0, 2);
    Field u = sample(g, [](const Point& x, double) { return x[0] * x[0] + 3 * x[0] - x[1] * x[1]; });
    auto s = u.slice(0);
    for (std::size_t k : g->active_nodes()) {
        BoundaryTag t = g->tag(k);
        if (t.kind == TagKind::Interior) continue;
        auto [axis, sign] = fd::outward_normal(t);
        Point x = g->coords(k);
        double expect = axis == 0 ? sign * (2 * x[0] + 3) : sign * (-2 * x[1]);
        EXPECT_NEAR(fd::normal_derivative(s, *g, k, axis, sign), expect, 1e-10) << t.str();
    }
}
