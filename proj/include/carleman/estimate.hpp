#pragma once

#include <carleman/operators.hpp>
#include <carleman/weights.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace carleman {

/**
 * @brief How weights enter the Carleman quantities.
 *
 * Absolute uses Phi itself and throws OverflowError when it leaves double range. Normalized divides
 * Phi by exp(max log Phi) over the grid; every reported quantity is then scaled by that factor (once
 * for linear terms, twice for quadratic ones) and the shift is returned alongside.
 */
enum class WeightScaling { Absolute, Normalized };

/** @brief Per-node weight data on a grid. */
struct WeightTable {
    int n = 1;
    CarlemanWeight cw;
    double log_shift = 0.0;
    std::vector<double> psi;   // node
    std::vector<double> logphi;  // node, unshifted
    std::vector<double> phi;   // node, exp(logphi - log_shift)
    std::vector<double> dpsi;  // node*n
    std::vector<double> g;     // node*n, grad log Phi
    std::vector<double> gg;    // node*n*n, (log Phi)_ij + (log Phi)_i (log Phi)_j

    // psi_ij = diag(0, 1, ..., 1)
    static double hpsi(int i, int j) { return i == j && i > 0 ? 1.0 : 0.0; }
};

/**
 * @brief Tabulate psi, Phi and the log-derivatives of Phi at every node.
 *
 * `power` is the highest power of Phi the caller forms; Absolute scaling checks it stays finite.
 * Normalized scaling subtracts `shift` from log Phi when given, else the grid maximum.
 */
inline WeightTable weight_table(const SpaceTimeGrid& g, const CarlemanWeight& cw, WeightScaling scaling,
                                int power = 2, std::optional<double> shift = std::nullopt)
{
    const int n = g.dim();
    const std::size_t N = g.num_nodes();
    WeightTable t;
    t.n = n;
    t.cw = cw;
    t.psi.resize(N);
    t.logphi.resize(N);
    t.phi.resize(N);
    t.dpsi.resize(N * n);
    t.g.resize(N * n);
    t.gg.resize(N * n * n);
    const double lm = cw.lambda * cw.mu;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < N; ++k) {
        const double p = g.psi(k);
        if (!(p > 0.0)) throw DomainError("grid node with psi <= 0");
        t.psi[k] = p;
        t.logphi[k] = log_weight(cw, p);
        mx = std::max(mx, t.logphi[k]);
        const double* x = g.coords_ptr(k);
        for (int i = 0; i < n; ++i) t.dpsi[k * n + i] = i == 0 ? 1.0 : x[i];
        const double c1 = -lm * std::pow(p, -cw.mu - 1.0);
        const double c2 = lm * (cw.mu + 1.0) * std::pow(p, -cw.mu - 2.0);
        for (int i = 0; i < n; ++i) t.g[k * n + i] = c1 * t.dpsi[k * n + i];
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double gij = c2 * t.dpsi[k * n + i] * t.dpsi[k * n + j] + c1 * WeightTable::hpsi(i, j);
                t.gg[(k * n + i) * n + j] = gij + t.g[k * n + i] * t.g[k * n + j];
            }
    }
    if (scaling == WeightScaling::Normalized) {
        t.log_shift = shift.value_or(mx);
    } else if (power * mx > kMaxLog) {
        throw OverflowError("Phi^" + std::to_string(power) +
                            " overflows at this lambda; use WeightScaling::Normalized (log-space path)");
    }
    for (std::size_t k = 0; k < N; ++k) t.phi[k] = std::exp(t.logphi[k] - t.log_shift);
    return t;
}

namespace detail {

// sum a^{ij} [psi_i psi_j (1 - (1 + 1/mu) psi^mu / lambda) + psi^{mu+1} psi_ij / (lambda mu)]
inline double s_factor(const SampledCoefficients& co, const WeightTable& wt, std::size_t m)
{
    const int n = co.n;
    const double lam = wt.cw.lambda, mu = wt.cw.mu, p = wt.psi[m];
    const double f = 1.0 - (1.0 + 1.0 / mu) * std::pow(p, mu) / lam;
    const double h = std::pow(p, mu + 1.0) / (lam * mu);
    double s = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            s += co.A(m, i, j) * (wt.dpsi[m * n + i] * wt.dpsi[m * n + j] * f + h * WeightTable::hpsi(i, j));
    return s;
}

inline void require_same_grid(const SampledCoefficients& co, const Field& u)
{
    if (co.grid.get() != u.grid.get() && co.grid->num_nodes() != u.grid->num_nodes())
        throw DimensionError("coefficients sampled on a different grid");
}

// Nodes of the inner box that keeps a fixed fraction `margin` of each axis (and of [0, T]) away
// from the faces, and at least two cells. The set is nested under refinement of a dyadic grid.
inline std::vector<std::pair<std::size_t, int>> deep_nodes(const SpaceTimeGrid& g, double margin)
{
    auto inner = [margin](int i, int m) {
        const int lo = std::max(2, int(std::ceil(margin * (m - 1) - 1e-9)));
        return i >= lo && i <= m - 1 - lo;
    };
    std::vector<std::pair<std::size_t, int>> out;
    for (int k = 0; k < g.nt; ++k) {
        if (!inner(k, g.nt)) continue;
        for (std::size_t m : g.active_nodes()) {
            bool ok = true;
            for (int a = 0; a < g.dim() && ok; ++a) ok = inner(g.index(m, a), g.shape[a]);
            if (ok) out.emplace_back(m, k);
        }
    }
    return out;
}

}  // namespace detail

/** @brief The four pieces s1..s4 of (u_t - L0 u) Phi, built from w = u Phi. */
struct CarlemanTerms {
    Field s1, s2, s3, s4;
    double log_shift = 0.0;  // every term is multiplied by exp(-log_shift)
};

/**
 * @brief Split (u_t - L0 u) Phi into s1 = w_t, s2 = -sum a w_ij, the first-order weight term s3 and
 * the zeroth-order term s4.
 *
 * Derivatives of w come from the chain rule applied to differences of u.
 */
inline CarlemanTerms decompose_terms(const Field& u, const SampledCoefficients& co, const CarlemanWeight& cw,
                                     WeightScaling scaling = WeightScaling::Absolute)
{
    detail::require_same_grid(co, u);
    const auto& g = *u.grid;
    const int n = g.dim();
    const std::size_t N = g.num_nodes();
    WeightTable wt = weight_table(g, cw, scaling, 1);
    auto d = fd::Derivatives::of(u);
    const double lm = cw.lambda * cw.mu;

    CarlemanTerms t{Field(u.grid), Field(u.grid), Field(u.grid), Field(u.grid), wt.log_shift};
    std::vector<double> wi(n);
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t m = 0; m < N; ++m) {
            const std::size_t f = std::size_t(k) * N + m;
            const double ph = wt.phi[m], p = wt.psi[m], uu = u.values[f];
            for (int i = 0; i < n; ++i) wi[i] = (d.grad[i].values[f] + wt.g[m * n + i] * uu) * ph;
            double s2 = 0.0, s3 = 0.0;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    const double a = co.A(m, i, j);
                    const double wij = ph * (d.hess[i][j].values[f] + wt.g[m * n + i] * d.grad[j].values[f] +
                                             wt.g[m * n + j] * d.grad[i].values[f] + wt.gg[(m * n + i) * n + j] * uu);
                    s2 -= a * wij;
                    s3 += a * (wt.dpsi[m * n + j] * wi[i] + wt.dpsi[m * n + i] * wi[j]);
                }
            t.s1.values[f] = d.ut.values[f] * ph;
            t.s2.values[f] = s2;
            t.s3.values[f] = -lm * std::pow(p, -cw.mu - 1.0) * s3;
            t.s4.values[f] = -lm * lm * std::pow(p, -2.0 * cw.mu - 2.0) * detail::s_factor(co, wt, m) * uu * ph;
        }
    return t;
}

/** @brief Constant in front of the second-order energy block. */
inline double second_order_factor(const CarlemanWeight& cw)
{
    return 1.0 / (std::pow(4.0, 2.0 * cw.mu + 2.0) * cw.lambda * cw.mu);
}

/**
 * @brief The time-potential V on one time level.
 *
 * Reads only u(., level) and its spatial differences on that level.
 */
inline SpatialField eval_V(const Field& u, const SampledCoefficients& co, const CarlemanWeight& cw, int level,
                           const WeightTable& wt)
{
    detail::require_same_grid(co, u);
    if (level < 0 || level >= u.levels()) throw DomainError("time level outside grid");
    const auto& g = *u.grid;
    const int n = g.dim();
    SpatialField s = u.slice_field(level);
    std::vector<SpatialField> grad;
    for (int i = 0; i < n; ++i) grad.push_back(fd::dx(s, i));
    const double lam = cw.lambda, mu = cw.mu, lm = lam * mu, kap = second_order_factor(cw);

    SpatialField V(u.grid);
    std::vector<double> wh(n);
    for (std::size_t m = 0; m < g.num_nodes(); ++m) {
        const double p = wt.psi[m], ph2 = wt.phi[m] * wt.phi[m], uu = s[m];
        bool zero = uu == 0.0;
        for (int i = 0; i < n; ++i) zero = zero && grad[i][m] == 0.0;
        if (zero) continue;  // V is quadratic in (u, grad u); skip so a large Phi never meets 0
        for (int i = 0; i < n; ++i) wh[i] = grad[i][m] + wt.g[m * n + i] * uu;
        const double f = 1.0 - (1.0 + 1.0 / mu) * std::pow(p, mu) / lam;
        double q1 = 0.0, q2 = 0.0, q3 = 0.0, q5 = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const double a = co.A(m, i, j);
                q1 += a * wh[i] * wh[j];
                q2 += a * wt.dpsi[m * n + i] * wt.dpsi[m * n + j] * f;
                q3 += a * WeightTable::hpsi(i, j);
                q5 += a * grad[i][m] * grad[j][m];
            }
        V[m] = ph2 * (0.5 * std::pow(p, mu + 2.0) * q1 - 0.5 * lm * lm * std::pow(p, -mu) * q2 * uu * uu -
                      0.5 * lm * p * q3 * uu * uu + 0.5 * lm * uu * uu + kap * q5);
    }
    return V;
}

inline SpatialField eval_V(const Field& u, const SampledCoefficients& co, const CarlemanWeight& cw, int level,
                           WeightScaling scaling = WeightScaling::Absolute)
{
    return eval_V(u, co, cw, level, weight_table(*u.grid, cw, scaling, 2));
}

/** @brief V on every time level. */
inline Field eval_V(const Field& u, const SampledCoefficients& co, const CarlemanWeight& cw,
                    WeightScaling scaling = WeightScaling::Absolute)
{
    const WeightTable wt = weight_table(*u.grid, cw, scaling, 2);
    Field V(u.grid);
    for (int k = 0; k < u.levels(); ++k) V.set_slice(k, eval_V(u, co, cw, k, wt));
    return V;
}

/**
 * @brief The flux families whose divergences appear in the estimate, each with n components.
 *
 * U1: s1 s2 product, U2: s2 s3 product, U3: s3 s4 product, U4: zeroth-order energy,
 * U5: u_t L0 u cross term, U6: second-order block.
 *
 * Every flux carries the factor Phi^2. The fields hold the reduced flux U / Phi^2; divergence()
 * differences the reduced flux and applies the analytic weight derivative, so Phi is never
 * differenced numerically.
 */
struct FluxParts {
    std::vector<Field> U1, U2, U3, U4, U5, U6;
    std::vector<double> phi2;  // node, scaled Phi^2
    std::vector<double> g;     // node*n, grad log Phi
    double log_shift = 0.0;    // weighted fluxes are multiplied by exp(-2 log_shift)

    /** @brief div(Phi^2 R) for a reduced flux R. */
    Field divergence(const std::vector<Field>& R) const
    {
        const int n = int(R.size());
        Field out(R[0].grid);
        const std::size_t N = out.nodes();
        for (int c = 0; c < n; ++c) {
            Field d = fd::dx(R[c], c);
            for (int k = 0; k < out.levels(); ++k)
                for (std::size_t m = 0; m < N; ++m) {
                    const std::size_t f = std::size_t(k) * N + m;
                    out.values[f] += phi2[m] * (d.values[f] + 2.0 * g[m * n + c] * R[c].values[f]);
                }
        }
        return out;
    }

    /** @brief Phi^2 R. */
    std::vector<Field> weighted(std::vector<Field> R) const
    {
        for (auto& F : R)
            for (int k = 0; k < F.levels(); ++k)
                for (std::size_t m = 0; m < F.nodes(); ++m) F.at(m, k) *= phi2[m];
        return R;
    }
};

inline FluxParts flux_parts(const Field& u, const SampledCoefficients& co, const CarlemanWeight& cw,
                            WeightScaling scaling = WeightScaling::Absolute)
{
    detail::require_same_grid(co, u);
    const auto& g = *u.grid;
    const int n = g.dim();
    const std::size_t N = g.num_nodes();
    WeightTable wt = weight_table(g, cw, scaling, 2);
    auto d = fd::Derivatives::of(u);
    const double lam = cw.lambda, mu = cw.mu, lm = lam * mu;

    FluxParts fp;
    fp.log_shift = wt.log_shift;
    fp.g = wt.g;
    fp.phi2.resize(N);
    for (std::size_t m = 0; m < N; ++m) fp.phi2[m] = wt.phi[m] * wt.phi[m];
    for (auto* U : {&fp.U1, &fp.U2, &fp.U3, &fp.U4, &fp.U5, &fp.U6}) U->assign(n, Field(u.grid));

    std::vector<double> wi(n), aw(n), apsi(n), au(n), hau(n);
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t m = 0; m < N; ++m) {
            const std::size_t f = std::size_t(k) * N + m;
            // Reduced quantities: w and its derivatives divided by Phi.
            const double ph = 1.0, ph2 = 1.0, p = wt.psi[m], uu = u.values[f], ut = d.ut.values[f];
            const double wt_ = ut * ph;
            for (int i = 0; i < n; ++i) wi[i] = (d.grad[i].values[f] + wt.g[m * n + i] * uu) * ph;
            double L0 = 0.0;
            for (int i = 0; i < n; ++i) {
                aw[i] = apsi[i] = au[i] = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double a = co.A(m, i, j);
                    aw[i] += a * wi[j];
                    apsi[i] += a * wt.dpsi[m * n + j];
                    au[i] += a * d.grad[j].values[f];
                    L0 += a * d.hess[i][j].values[f];
                }
            }
            // (H a grad u)_s, then a applied once more
            for (int s = 0; s < n; ++s) {
                hau[s] = 0.0;
                for (int j = 0; j < n; ++j) hau[s] += d.hess[s][j].values[f] * au[j];
            }
            double apsi_w = 0.0, w_aw = 0.0;
            for (int i = 0; i < n; ++i) {
                apsi_w += apsi[i] * wi[i];
                w_aw += wi[i] * aw[i];
            }
            const double S = detail::s_factor(co, wt, m);
            const double w2 = uu * uu * ph2;
            for (int c = 0; c < n; ++c) {
                double sym = 0.0, ahau = 0.0;
                for (int i = 0; i < n; ++i) {
                    sym += (co.A(m, i, c) + co.A(m, c, i)) * wi[i];
                    ahau += co.A(m, c, i) * hau[i];
                }
                fp.U1[c].values[f] = -sym * wt_ * std::pow(p, mu + 2.0);
                fp.U2[c].values[f] = 4.0 * lm * p * (aw[c] * apsi_w - 0.5 * apsi[c] * w_aw);
                fp.U3[c].values[f] = 2.0 * lm * lm * lm * std::pow(p, -2.0 * mu - 1.0) * S * apsi[c] * w2;
                fp.U4[c].values[f] = -au[c] * uu * ph2;
                fp.U5[c].values[f] = -2.0 * au[c] * ut * ph2;
                fp.U6[c].values[f] = (au[c] * L0 - ahau) * ph2;
            }
        }
    return fp;
}

/** @brief Reduced total flux (U1 + U2 + U3)/2 + lambda mu U4 + kappa'(U5 + U6). */
inline std::vector<Field> total_flux(const FluxParts& fp, const CarlemanWeight& cw)
{
    const double lm = cw.lambda * cw.mu, kap = second_order_factor(cw);
    std::vector<Field> U = fp.U1;
    for (std::size_t c = 0; c < U.size(); ++c)
        for (std::size_t i = 0; i < U[c].values.size(); ++i)
            U[c].values[i] = 0.5 * (fp.U1[c].values[i] + fp.U2[c].values[i] + fp.U3[c].values[i]) +
                             lm * fp.U4[c].values[i] + kap * (fp.U5[c].values[i] + fp.U6[c].values[i]);
    return U;
}

/** @brief V on all levels together with the flux U and its discrete divergence. */
struct DivergenceBundle {
    Field V;
    std::vector<Field> U;
    Field divU;
    double log_shift = 0.0;  // V, U, divU are multiplied by exp(-2 log_shift)
};

inline DivergenceBundle divergence_bundle(const Field& u, const SampledCoefficients& co, const CarlemanWeight& cw,
                                          WeightScaling scaling = WeightScaling::Absolute)
{
    DivergenceBundle b;
    FluxParts fp = flux_parts(u, co, cw, scaling);
    b.log_shift = fp.log_shift;
    b.V = eval_V(u, co, cw, scaling);
    const auto R = total_flux(fp, cw);
    b.divU = fp.divergence(R);
    b.U = fp.weighted(R);
    return b;
}

inline Field eval_divU(const Field& u, const SampledCoefficients& co, const CarlemanWeight& cw,
                       WeightScaling scaling = WeightScaling::Absolute)
{
    FluxParts fp = flux_parts(u, co, cw, scaling);
    return fp.divergence(total_flux(fp, cw));
}

/**
 * @brief x1-flux of the second-order block on the face x1 = 0.
 *
 * pair11 holds the j = k = 1 part of the block, sum_{i,s} a^{i1} a^{1s} u_i (u_{1s} - u_{s1}) Phi^2,
 * with the mixed derivatives differenced in both orders; it vanishes identically. full holds the
 * whole x1 component of the block for reference.
 */
struct GammaFlux {
    Trace pair11;
    Trace full;
    double scale = 0.0;  // max |a^{i1} a^{1s} u_i u_{1s} Phi^2| over the face
    double log_shift = 0.0;
};

inline GammaFlux gamma_flux(const Field& u, const SampledCoefficients& co, const CarlemanWeight& cw,
                            WeightScaling scaling = WeightScaling::Absolute)
{
    const auto& g = *u.grid;
    const int n = g.dim();
    const std::size_t N = g.num_nodes();
    WeightTable wt = weight_table(g, cw, scaling, 2);
    std::vector<std::size_t> face;
    for (std::size_t m = 0; m < N; ++m)
        if (g.index(m, 0) == 0 && g.active(m)) face.push_back(m);
    const auto shape = fd::spacetime_shape(g);
    auto d = fd::Derivatives::of(u);
    // u_{1s} = D_1 (D_s u) and u_{s1} = D_s (D_1 u)
    std::vector<Field> u1s(n, Field(u.grid)), us1(n, Field(u.grid));
    for (int s = 0; s < n; ++s) {
        if (s == 0) {
            u1s[0] = us1[0] = d.hess[0][0];
            continue;
        }
        u1s[s].values = fd::diff(d.grad[s].values, shape, 0, 1, g.h[0]);
        us1[s].values = fd::diff(d.grad[0].values, shape, s, 1, g.h[s]);
    }
    FluxParts fp = flux_parts(u, co, cw, scaling);
    GammaFlux out{Trace(face, g.nt), Trace(face, g.nt), 0.0, wt.log_shift};
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t j = 0; j < face.size(); ++j) {
            const std::size_t m = face[j], f = std::size_t(k) * N + m;
            const double ph2 = wt.phi[m] * wt.phi[m];
            double acc = 0.0;
            for (int i = 0; i < n; ++i)
                for (int s = 0; s < n; ++s) {
                    const double c = co.A(m, i, 0) * co.A(m, 0, s) * d.grad[i].values[f] * ph2;
                    const double plus = c * u1s[s].values[f], minus = c * us1[s].values[f];
                    acc += plus - minus;
                    out.scale = std::max(out.scale, std::abs(plus));
                }
            out.pair11.at(j, k) = acc;
            out.full.at(j, k) = fp.U6[0].values[f] * ph2;
        }
    return out;
}

/** @brief Both sides of the discrete divergence theorem on one time level of a box grid. */
struct GaussCheck {
    double volume = 0.0;  // trapezoid integral of div U
    double faces = 0.0;   // trapezoid face integrals of U . n
};

namespace detail {

// Tensor trapezoid weight of a node, skipping axis `skip` (or none when skip < 0).
inline double trapezoid_weight(const SpaceTimeGrid& g, std::size_t m, int skip)
{
    double w = 1.0;
    for (int a = 0; a < g.dim(); ++a) {
        if (a == skip) continue;
        const int i = g.index(m, a);
        w *= g.h[a] * (i == 0 || i == g.shape[a] - 1 ? 0.5 : 1.0);
    }
    return w;
}

}  // namespace detail

inline GaussCheck gauss_check(const DivergenceBundle& b, int level)
{
    const auto& U = b.U;
    const auto& g = *U[0].grid;
    if (!g.domain.is_box()) throw ValidationError("Gauss check needs a box domain");
    const Field& div = b.divU;
    GaussCheck r;
    for (std::size_t m = 0; m < g.num_nodes(); ++m) {
        r.volume += detail::trapezoid_weight(g, m, -1) * div.at(m, level);
        for (int a = 0; a < g.dim(); ++a) {
            const int i = g.index(m, a);
            const double sign = i == g.shape[a] - 1 ? 1.0 : i == 0 ? -1.0 : 0.0;
            if (sign != 0.0) r.faces += sign * detail::trapezoid_weight(g, m, a) * U[a].at(m, level);
        }
    }
    return r;
}

namespace detail {

inline double integrate_active(std::span<const double> v, const SpaceTimeGrid& g)
{
    double s = 0.0;
    for (std::size_t m : g.active_nodes()) s += v[m];
    return s * g.cell_volume();
}

}  // namespace detail

/**
 * @brief |int V(T) - int V(0)| / (|int V(0)| + 1) without checking the slices.
 *
 * Under Normalized scaling the constant 1 is rescaled with the weights, so the value is that of the
 * unscaled formula.
 */
inline double cancellation_defect(const Field& w, const SampledCoefficients& co, const CarlemanWeight& cw,
                                  WeightScaling scaling = WeightScaling::Absolute)
{
    const auto& g = *w.grid;
    // Normalize by the largest weight on the support of the two slices so V does not underflow.
    std::optional<double> shift;
    for (int k : {0, g.nt - 1})
        for (std::size_t m = 0; m < g.num_nodes(); ++m)
            if (w.at(m, k) != 0.0) shift = std::max(shift.value_or(-1e300), log_weight(cw, g.psi(m)));
    if (!shift) return 0.0;
    WeightTable wt = weight_table(g, cw, scaling, 2, shift);
    SpatialField v0 = eval_V(w, co, cw, 0, wt), vT = eval_V(w, co, cw, g.nt - 1, wt);
    const double i0 = detail::integrate_active(v0.values, g), iT = detail::integrate_active(vT.values, g);
    return std::abs(iT - i0) / (std::abs(i0) + std::exp(-2.0 * wt.log_shift));
}

/** @brief Cancellation defect of a field whose first and last time slices agree. */
inline double check_cancellation(const Field& w, const SampledCoefficients& co, const CarlemanWeight& cw,
                                 WeightScaling scaling = WeightScaling::Absolute)
{
    auto a = w.slice(0), b = w.slice(w.levels() - 1);
    double scale = 0.0, diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        scale = std::max(scale, std::abs(a[i]));
        diff = std::max(diff, std::abs(a[i] - b[i]));
    }
    if (diff > 1e-14 * scale)
        throw PreconditionError("first and last time slices differ by " + std::to_string(diff));
    return cancellation_defect(w, co, cw, scaling);
}

/** @brief One lambda of the integrated-estimate sweep. */
struct EstimateReport {
    double lambda = 0.0;
    double lhs_integral = 0.0;    // divided by exp(log_scale)
    double energy_bracket = 0.0;  // divided by exp(log_scale)
    double margin_ratio = 0.0;
    double cancellation_defect = 0.0;
    double log_scale = 0.0;  // 2 max log Phi over the support of the integrands
};

namespace detail {

// Reject zero fields and fields that do not vanish near the lateral boundary and the end slices.
inline void require_compact_support(const Field& u)
{
    const auto& g = *u.grid;
    double mx = 0.0;
    for (double v : u.values) mx = std::max(mx, std::abs(v));
    if (mx == 0.0) throw PreconditionError("field is identically zero");
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t m = 0; m < g.num_nodes(); ++m) {
            const bool edge = k == 0 || k == g.nt - 1 || !g.interior(m);
            if (edge && std::abs(u.at(m, k)) > 1e-12 * mx)
                throw PreconditionError("field is not compactly supported: |u| = " +
                                        std::to_string(std::abs(u.at(m, k))) + " at node " + std::to_string(m) +
                                        ", level " + std::to_string(k));
        }
}

// log(sum exp(l_i) q_i) for q_i >= 0, returned as (shift, sum exp(l_i - shift) q_i).
struct LogSum {
    double shift = -std::numeric_limits<double>::infinity();
    double sum = 0.0;
};

inline LogSum log_sum(const std::vector<double>& logw, const std::vector<double>& q)
{
    LogSum r;
    for (std::size_t i = 0; i < q.size(); ++i)
        if (q[i] > 0.0) r.shift = std::max(r.shift, logw[i]);
    if (!std::isfinite(r.shift)) {
        r.shift = 0.0;
        return r;
    }
    for (std::size_t i = 0; i < q.size(); ++i)
        if (q[i] > 0.0) r.sum += q[i] * std::exp(logw[i] - r.shift);
    return r;
}

}  // namespace detail

/** @brief Field w(x,t) = B(x)(1 + 4 t (T - t) / T^2) whose end slices coincide exactly. */
inline Field periodic_profile(const Field& u)
{
    const auto& g = *u.grid;
    int best = 0;
    double mx = -1.0;
    for (int k = 0; k < g.nt; ++k) {
        double s = 0.0;
        for (double v : u.slice(k)) s = std::max(s, std::abs(v));
        if (s > mx) {
            mx = s;
            best = k;
        }
    }
    Field w(u.grid);
    for (int k = 0; k < g.nt; ++k) {
        const double t = g.time(k);
        const double c = k == g.nt - 1 ? 1.0 : 1.0 + 4.0 * t * (g.T - t) / (g.T * g.T);
        for (std::size_t m = 0; m < g.num_nodes(); ++m) w.at(m, k) = u.at(m, best) * c;
    }
    return w;
}

/**
 * @brief Integrated estimate for each lambda:
 * int (u_t - L0 u)^2 Phi^2 / [int (u_t^2 + sum u_ij^2) Phi^2 / lambda + lambda int |grad u|^2 Phi^2 +
 * lambda^3 int u^2 Phi^2].
 *
 * Sums run in log space. The cancellation column uses periodic_profile(u).
 */
inline std::vector<EstimateReport> check_integrated_estimate(const Field& u, const SampledCoefficients& co, double mu,
                                                             const std::vector<double>& lambdas)
{
    detail::require_same_grid(co, u);
    detail::require_compact_support(u);
    const auto& g = *u.grid;
    const int n = g.dim();
    const std::size_t N = g.num_nodes();
    auto d = fd::Derivatives::of(u);
    Field L0u = apply_L0(co, u);
    const Field periodic = periodic_profile(u);

    // Pointwise integrands independent of lambda.
    std::vector<double> res2, high, grad2, u2;
    std::vector<std::size_t> at;
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t m : g.active_nodes()) {
            if (!g.interior(m)) continue;
            const std::size_t f = std::size_t(k) * N + m;
            const double r = d.ut.values[f] - L0u.values[f];
            double h2 = d.ut.values[f] * d.ut.values[f], gr = 0.0;
            for (int i = 0; i < n; ++i) {
                gr += d.grad[i].values[f] * d.grad[i].values[f];
                for (int j = 0; j < n; ++j) h2 += d.hess[i][j].values[f] * d.hess[i][j].values[f];
            }
            res2.push_back(r * r);
            high.push_back(h2);
            grad2.push_back(gr);
            u2.push_back(u.values[f] * u.values[f]);
            at.push_back(m);
        }
    const double dv = g.cell_volume() * g.dt;

    std::vector<EstimateReport> out;
    for (double lam : lambdas) {
        CarlemanWeight cw(lam, mu);
        std::vector<double> lw(at.size()), bracket(at.size());
        for (std::size_t i = 0; i < at.size(); ++i) {
            lw[i] = 2.0 * log_weight(cw, g.psi(at[i]));
            bracket[i] = high[i] / lam + lam * grad2[i] + lam * lam * lam * u2[i];
        }
        auto num = detail::log_sum(lw, res2), den = detail::log_sum(lw, bracket);
        if (den.sum == 0.0) throw PreconditionError("energy bracket vanishes");
        EstimateReport r;
        r.lambda = lam;
        r.log_scale = den.shift;
        r.lhs_integral = num.sum * std::exp(num.shift - den.shift) * dv;
        r.energy_bracket = den.sum * dv;
        r.margin_ratio = r.lhs_integral / r.energy_bracket;
        r.cancellation_defect = check_cancellation(periodic, co, cw, WeightScaling::Normalized);
        out.push_back(r);
    }
    return out;
}

/** @brief Smallest swept lambda whose margin exceeds the floor, or NaN. */
inline double smallest_lambda_above(const std::vector<EstimateReport>& reports, double floor)
{
    double best = std::numeric_limits<double>::quiet_NaN();
    for (const auto& r : reports)
        if (r.margin_ratio > floor && !(r.lambda >= best)) best = r.lambda;
    return best;
}

/** @brief One row of the identity-chain table. */
struct IdentityResidual {
    std::string name;
    bool exact = false;
    double residual = 0.0;          // exact rows: max |lhs - rhs| / max |lhs| on deep interior nodes
    double fitted_constant = 0.0;   // inequality rows
    double worst_violation = 0.0;   // inequality rows: largest shortfall beyond the tolerance, relative
    bool holds = true;
};

/**
 * @brief Check the pointwise steps behind the estimate on one field.
 *
 * Exact identities report a relative residual that should fall as O(h^2 + dt^2). Inequalities report
 * the fitted constant and hold when their defect stays within 10 h^2 of the local scale.
 */
inline std::vector<IdentityResidual> check_identity_chain(const Field& u, const SampledCoefficients& co,
                                                          const CarlemanWeight& cw,
                                                          WeightScaling scaling = WeightScaling::Normalized,
                                                          double margin = 0.25)
{
    detail::require_same_grid(co, u);
    const auto& g = *u.grid;
    const int n = g.dim();
    const std::size_t N = g.num_nodes();
    const double lam = cw.lambda, mu = cw.mu, lm = lam * mu;
    WeightTable wt = weight_table(g, cw, scaling, 2);
    CarlemanTerms st = decompose_terms(u, co, cw, scaling);
    FluxParts fp = flux_parts(u, co, cw, scaling);
    auto d = fd::Derivatives::of(u);
    Field L0u = apply_L0(co, u);
    const auto deep = detail::deep_nodes(g, margin);
    double hmax = g.dt;
    for (double h : g.h) hmax = std::max(hmax, h);
    const double tol = 10.0 * hmax * hmax;

    double nu = std::numeric_limits<double>::infinity();
    try {
        nu = validate_coefficients(co).nu_est;
    } catch (const EllipticityViolation&) {
        nu = 0.0;
    }

    // Potentials V1 = sum a psi^{mu+2} w_i w_j, V2 = -lambda^2 mu^2 psi^{-mu} S w^2,
    // V5 = sum a u_i u_j Phi^2 and the weighted first derivatives w_i.
    Field V1(u.grid), V2(u.grid), V5(u.grid);
    std::vector<Field> W(n, Field(u.grid));
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t m = 0; m < N; ++m) {
            const std::size_t f = std::size_t(k) * N + m;
            const double ph = wt.phi[m], p = wt.psi[m], uu = u.values[f];
            for (int i = 0; i < n; ++i) W[i].values[f] = (d.grad[i].values[f] + wt.g[m * n + i] * uu) * ph;
            double q1 = 0.0, q5 = 0.0;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    q1 += co.A(m, i, j) * W[i].values[f] * W[j].values[f];
                    q5 += co.A(m, i, j) * d.grad[i].values[f] * d.grad[j].values[f];
                }
            V1.values[f] = std::pow(p, mu + 2.0) * q1;
            V2.values[f] = -lm * lm * std::pow(p, -mu) * detail::s_factor(co, wt, m) * uu * uu * ph * ph;
            V5.values[f] = q5 * ph * ph;
        }
    Field dV1 = fd::dt(V1), dV2 = fd::dt(V2), dV5 = fd::dt(V5);
    Field div1 = fp.divergence(fp.U1), div2 = fp.divergence(fp.U2), div3 = fp.divergence(fp.U3),
          div5 = fp.divergence(fp.U5), div6 = fp.divergence(fp.U6);

    std::vector<IdentityResidual> table;

    auto exact_row = [&](const std::string& name, auto lhs_rhs) {
        IdentityResidual r;
        r.name = name;
        r.exact = true;
        double mx = 0.0, err = 0.0;
        for (auto [m, k] : deep) {
            auto [l, rr] = lhs_rhs(m, k);
            mx = std::max(mx, std::abs(l));
            err = std::max(err, std::abs(l - rr));
        }
        r.residual = mx > 0.0 ? err / mx : err;
        r.holds = std::isfinite(r.residual);
        table.push_back(r);
    };

    exact_row("s1s2_divergence_identity", [&](std::size_t m, int k) {
        const std::size_t f = std::size_t(k) * N + m;
        const double p = wt.psi[m], s1 = st.s1.values[f];
        double q = 0.0, qa = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                q += co.A(m, i, j) * (wt.dpsi[m * n + j] * W[i].values[f] + wt.dpsi[m * n + i] * W[j].values[f]);
                qa += co.dA(m, j, i, j) * W[i].values[f] + co.dA(m, i, i, j) * W[j].values[f];
            }
        const double lhs = 2.0 * s1 * st.s2.values[f] * std::pow(p, mu + 2.0);
        const double rhs = (mu + 2.0) * std::pow(p, mu + 1.0) * s1 * (q + p / (mu + 2.0) * qa) + dV1.values[f] +
                           div1.values[f];
        return std::pair{lhs, rhs};
    });
    exact_row("s1s4_time_derivative_identity", [&](std::size_t m, int k) {
        const std::size_t f = std::size_t(k) * N + m;
        const double lhs = 2.0 * st.s1.values[f] * st.s4.values[f] * std::pow(wt.psi[m], mu + 2.0);
        return std::pair{lhs, dV2.values[f]};
    });

    // Inequality rows. kind = +1: E >= C D with C > 0 required; kind = -1: E >= -C D, C fitted.
    auto inequality_row = [&](const std::string& name, int kind, auto terms) {
        IdentityResidual r;
        r.name = name;
        double cmin = std::numeric_limits<double>::infinity(), cmax = 0.0;
        bool ok = true;
        double worst = 0.0;
        for (auto [m, k] : deep) {
            auto [E, D, scale] = terms(m, k);
            const double slack = E + tol * scale;
            if (D > 1e-12 * scale) {
                cmin = std::min(cmin, E / D);
                cmax = std::max(cmax, std::max(0.0, -E) / D);
            } else if (slack < 0.0 && kind < 0) {
                ok = false;
                worst = std::max(worst, -slack / std::max(scale, 1e-300));
            }
            if (kind > 0 && slack < 0.0) {
                ok = false;
                worst = std::max(worst, -slack / std::max(scale, 1e-300));
            }
        }
        r.fitted_constant = kind > 0 ? (std::isfinite(cmin) ? cmin : 0.0) : cmax;
        r.worst_violation = worst;
        r.holds = ok && std::isfinite(r.fitted_constant);
        table.push_back(r);
    };

    auto grad2 = [&](std::size_t f) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += d.grad[i].values[f] * d.grad[i].values[f];
        return s;
    };

    inequality_row("s2s3_lower_bound", -1, [&](std::size_t m, int k) {
        const std::size_t f = std::size_t(k) * N + m;
        const double ph2 = wt.phi[m] * wt.phi[m], uu = u.values[f];
        const double prod = 2.0 * st.s2.values[f] * st.s3.values[f] * std::pow(wt.psi[m], mu + 2.0);
        const double E = prod - div2.values[f];
        const double D = lm * ph2 * grad2(f) + lm * lm * lm * ph2 * uu * uu;
        return std::tuple{E, D, std::abs(prod) + std::abs(div2.values[f])};
    });
    inequality_row("s3s4_lower_bound", +1, [&](std::size_t m, int k) {
        const std::size_t f = std::size_t(k) * N + m;
        const double p = wt.psi[m], ph2 = wt.phi[m] * wt.phi[m], uu = u.values[f];
        const double prod = 2.0 * st.s3.values[f] * st.s4.values[f] * std::pow(p, mu + 2.0);
        const double E = prod - div3.values[f];
        const double D = lam * lam * lam * std::pow(mu, 4.0) * std::pow(p, -2.0 * mu - 2.0) * ph2 * uu * uu;
        return std::tuple{E, D, std::abs(prod) + std::abs(div3.values[f])};
    });
    inequality_row("time_cross_term_bound", -1, [&](std::size_t m, int k) {
        const std::size_t f = std::size_t(k) * N + m;
        const double p = wt.psi[m], ph2 = wt.phi[m] * wt.phi[m], ut = d.ut.values[f];
        const double lhs = ut * ut * ph2 - 2.0 * ut * L0u.values[f] * ph2;
        const double E = lhs - div5.values[f] - dV5.values[f] - 0.5 * ut * ut * ph2;
        const double D = lm * lm * std::pow(p, -2.0 * mu - 2.0) * ph2 * grad2(f);
        return std::tuple{E, D, std::abs(lhs) + std::abs(div5.values[f]) + std::abs(dV5.values[f])};
    });
    inequality_row("second_order_bound", -1, [&](std::size_t m, int k) {
        const std::size_t f = std::size_t(k) * N + m;
        const double p = wt.psi[m], ph2 = wt.phi[m] * wt.phi[m];
        double hs = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) hs += d.hess[i][j].values[f] * d.hess[i][j].values[f];
        const double lhs = L0u.values[f] * L0u.values[f] * ph2;
        const double E = lhs - div6.values[f] - 0.5 * nu * nu * hs * ph2;
        const double D = lm * lm * std::pow(p, -2.0 * mu - 2.0) * ph2 * grad2(f);
        return std::tuple{E, D, std::abs(lhs) + std::abs(div6.values[f])};
    });

    // sum a^{ij} a^{ks} u_ik u_sj >= nu^2 sum u_ij^2, pointwise on every node.
    {
        IdentityResidual r;
        r.name = "hessian_positivity";
        double worst = 0.0, cmin = std::numeric_limits<double>::infinity();
        for (int k = 0; k < g.nt; ++k)
            for (std::size_t m : g.active_nodes()) {
                const std::size_t f = std::size_t(k) * N + m;
                double lhs = 0.0, hs = 0.0;
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) {
                        hs += d.hess[i][j].values[f] * d.hess[i][j].values[f];
                        for (int kk = 0; kk < n; ++kk)
                            for (int s = 0; s < n; ++s)
                                lhs += co.A(m, i, j) * co.A(m, kk, s) * d.hess[i][kk].values[f] *
                                       d.hess[s][j].values[f];
                    }
                const double E = lhs - nu * nu * hs;
                if (hs > 0.0) cmin = std::min(cmin, lhs / hs);
                if (E < -1e-12 * std::max(lhs, nu * nu * hs)) worst = std::max(worst, -E / (nu * nu * hs));
            }
        r.fitted_constant = std::isfinite(cmin) ? cmin : 0.0;
        r.worst_violation = worst;
        r.holds = worst == 0.0;
        table.push_back(r);
    }
    return table;
}

}  // namespace carleman
