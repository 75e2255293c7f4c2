#pragma once

#include <carleman/geometry.hpp>

#include <cmath>
#include <limits>

namespace carleman {

/** @brief Parameters of the weight Phi(x) = exp(lambda * psi(x)^-mu). */
struct CarlemanWeight {
    double lambda = 1.0;
    double mu = 2.0;

    CarlemanWeight() = default;
    CarlemanWeight(double lambda_, double mu_) : lambda(lambda_), mu(mu_)
    {
        if (!(lambda >= 1.0)) throw ValidationError("lambda must be >= 1", "carleman.lambda");
        if (!(mu >= 1.0)) throw ValidationError("mu must be >= 1", "carleman.mu");
    }
};

// Largest log value whose exponential is still finite.
inline constexpr double kMaxLog = 709.0;

/** @brief log Phi = lambda psi^-mu. */
inline double log_weight(const CarlemanWeight& cw, double psi)
{
    if (!(psi > 0.0)) throw DomainError("weight needs psi > 0");
    return cw.lambda * std::pow(psi, -cw.mu);
}

inline double eval_weight(const CarlemanWeight& cw, const Point& x)
{
    double lw = log_weight(cw, eval_level(x));
    if (lw > kMaxLog)
        throw OverflowError("weight exceeds double range; evaluate log_weight and work in log space");
    return std::exp(lw);
}

struct WeightDerivs {
    double psi = 0.0;
    Point grad_psi;
    Matrix hess_psi;
    Point grad_log_phi;
};

inline WeightDerivs weight_log_derivs(const CarlemanWeight& cw, const Point& x)
{
    const int n = int(x.size());
    WeightDerivs d;
    d.psi = eval_level(x);
    if (!(d.psi > 0.0)) throw DomainError("weight needs psi > 0");
    d.grad_psi = x;
    d.grad_psi[0] = 1.0;
    d.hess_psi = Matrix::Identity(n, n);
    d.hess_psi(0, 0) = 0.0;
    d.grad_log_phi = -cw.lambda * cw.mu * std::pow(d.psi, -cw.mu - 1.0) * d.grad_psi;
    return d;
}

/** @brief Extremes of Phi^2 over the closure of a domain, kept as logs. */
struct WeightExtrema {
    double log_max_sq = 0.0;
    double log_min_sq = 0.0;
    double max_sq() const { return checked_exp(log_max_sq); }
    double min_sq() const { return checked_exp(log_min_sq); }

private:
    static double checked_exp(double v)
    {
        if (v > kMaxLog) throw OverflowError("squared weight exceeds double range; use the log fields");
        return std::exp(v);
    }
};

/** @brief Range of psi over the closure of a domain. */
inline std::pair<double, double> level_range(const Domain& d)
{
    switch (d.kind) {
    case DomainKind::ParaboloidG:
    case DomainKind::ParaboloidGEps: return {0.25, d.psi_cap()};
    case DomainKind::PrismOmega: {
        // Far corner: x1 = 1/4 and |x_i| = c for i >= 2.
        double c = d.prism_halfwidth();
        return {0.25, 0.5 + 0.5 * (d.dim - 1) * c * c};
    }
    case DomainKind::Interval1D: return {d.a + 0.25, d.b + 0.25};
    }
    throw DomainError("unsupported domain");
}

inline WeightExtrema weight_extrema(const CarlemanWeight& cw, const Domain& d)
{
    auto [pmin, pmax] = level_range(d);
    return {2.0 * log_weight(cw, pmin), 2.0 * log_weight(cw, pmax)};
}

}  // namespace carleman
