#pragma once

#include <carleman/linalg.hpp>
#include <carleman/operators.hpp>
#include <carleman/weights.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace carleman {

/** @brief Measurements of the inverse source problem u_t = L u + b(x) R(x,t). */
struct ISPData {
    GridPtr grid;
    SpatialField f;  // u(., 0)
    SpatialField F;  // u(., T)
    Trace p;         // u on the data boundary
    Trace q;         // outward normal derivative on the data boundary
    Field R;
    double sigma = 1e-3;
    DataBoundary data_boundary = DataBoundary::FullLateral;
};

/** @brief Options for differencing measured data. */
struct DataDiffOptions {
    int accuracy = 4;
    bool strict = true;
};

namespace detail {

inline fd::DiffOptions data_opts(const SpaceTimeGrid& g, const DataDiffOptions& o)
{
    fd::DiffOptions d;
    d.accuracy = o.accuracy;
    d.strict = o.strict;
    d.mask = &g.active_mask();
    return d;
}

inline void require_traces_match(const ISPData& d)
{
    if (d.p.nodes != d.q.nodes || d.p.nt != d.q.nt) throw DimensionError("p and q must share nodes and levels");
    if (d.p.nt != d.grid->nt) throw DimensionError("traces must cover every time level");
}

}  // namespace detail

/** @brief The v = u / R data: f~, F~, p~, q~. */
struct NormalizedData {
    SpatialField f, F;
    Trace p, q;
};

/**
 * @brief Divide the data by R. The Neumann trace picks up -p dR/dn / R^2, with dR/dn from the same
 * one-sided stencil used for measured traces.
 */
inline NormalizedData normalize_by_R(const ISPData& data)
{
    detail::require_traces_match(data);
    check_positivity(data.R, data.sigma);
    const auto& g = *data.grid;
    NormalizedData out{data.f, data.F, data.p, data.q};
    for (std::size_t m : g.active_nodes()) {
        out.f[m] = data.f[m] / data.R.at(m, 0);
        out.F[m] = data.F[m] / data.R.at(m, g.nt - 1);
    }
    const Trace dR = normal_trace(data.R, data.p.nodes);
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t j = 0; j < data.p.count(); ++j) {
            const double R = data.R.at(data.p.nodes[j], k);
            out.p.at(j, k) = data.p.at(j, k) / R;
            out.q.at(j, k) = data.q.at(j, k) / R - data.p.at(j, k) * dR.at(j, k) / (R * R);
        }
    return out;
}

namespace detail {

// L s on one time slice with masked data differences; mixed terms are compositions of first differences.
inline SpatialField apply_L_slice(const SampledCoefficients& co, const SpatialField& s, const fd::DiffOptions& opt)
{
    const auto& g = *s.grid;
    const int n = g.dim();
    SpatialField out(s.grid);
    std::vector<SpatialField> d1;
    for (int i = 0; i < n; ++i) d1.push_back(fd::dx(s, i, opt));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const SpatialField dij = i == j ? fd::dxx(s, i, i, opt) : fd::dx(d1[j], i, opt);
            for (std::size_t m : g.active_nodes()) out[m] += co.A(m, i, j) * dij[m];
        }
    for (std::size_t m : g.active_nodes()) {
        double v = co.C(m) * s[m];
        for (int j = 0; j < n; ++j) v += co.B(m, j) * d1[j][m];
        out[m] += v;
    }
    return out;
}

}  // namespace detail

/**
 * @brief L~ v = L(vR)/R - (R_t/R) v: same principal part, time-dependent lower-order terms
 * b~_j = b_j + (2/R) sum_i a^{ij} R_i and c~ = (L R)/R - R_t/R, where L R includes c R.
 *
 * The coefficient fields are reported for inspection. Applying the operator and assembling its
 * stencil go through the conjugated form L(vR)/R, which is the same operator but keeps
 * differences on vR instead of on R alone; when R varies on the scale of the grid the expanded
 * coefficients are large and cancel.
 */
struct TransformedOperator {
    SampledCoefficients base;
    Field R, Rt;
    std::vector<Field> b;   // b~_j
    Field c;                // c~
    std::vector<Field> db;  // d/dt b~_j
    Field dc;               // d/dt c~

    /** @brief L~ at time level `level` applied to a spatial field, with masked data differences. */
    SpatialField apply(const SpatialField& s, int level, const DataDiffOptions& o = {}) const
    {
        const auto& g = *s.grid;
        SpatialField sR(s.grid);
        for (std::size_t m : g.active_nodes()) sR[m] = s[m] * R.at(m, level);
        SpatialField out = detail::apply_L_slice(base, sR, detail::data_opts(g, o));
        for (std::size_t m : g.active_nodes()) out[m] = (out[m] - Rt.at(m, level) * s[m]) / R.at(m, level);
        return out;
    }

    /** @brief Matrix row of L~ at an interior node and level: second-order central differences. */
    Stencil stencil(std::size_t node, int level) const
    {
        const auto& g = *R.grid;
        Stencil st = operator_stencil(g, node, base.a_ptr(node), base.b_ptr(node), base.C(node));
        const double r = R.at(node, level);
        for (auto& [q, w] : st) w *= R.at(q, level) / r;
        st.emplace_back(node, -Rt.at(node, level) / r);
        return st;
    }

    bool time_dependent() const
    {
        for (double v : dc.values)
            if (v != 0.0) return true;
        for (const auto& f : db)
            for (double v : f.values)
                if (v != 0.0) return true;
        return false;
    }
};

inline TransformedOperator transformed_operator(const SampledCoefficients& co, const Field& R, double sigma,
                                                const DataDiffOptions& o = {})
{
    check_positivity(R, sigma);
    const auto& g = *R.grid;
    const int n = g.dim();
    const std::size_t N = g.num_nodes();
    const auto opt = detail::data_opts(g, o);
    fd::DiffOptions topt;
    topt.accuracy = std::min(o.accuracy, g.nt >= 6 ? 4 : 2);
    TransformedOperator op;
    op.base = co;
    op.R = R;
    op.Rt = fd::dt(R, topt);
    op.b.assign(n, Field(R.grid));
    op.c = Field(R.grid);

    std::vector<Field> dR;
    for (int i = 0; i < n; ++i) dR.push_back(fd::dx(R, i, opt));
    Field LR(R.grid);
    const auto shape = fd::spacetime_shape(g);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const auto dij = i == j ? fd::diff(R.values, shape, i, 2, g.h[i], opt)
                                    : fd::diff(dR[j].values, shape, i, 1, g.h[i], opt);
            for (int k = 0; k < g.nt; ++k)
                for (std::size_t m : g.active_nodes()) LR.at(m, k) += co.A(m, i, j) * dij[std::size_t(k) * N + m];
        }
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t m : g.active_nodes()) {
            const std::size_t f = std::size_t(k) * N + m;
            const double r = R.values[f];
            double lr = LR.values[f] + co.C(m) * r;
            for (int j = 0; j < n; ++j) {
                lr += co.B(m, j) * dR[j].values[f];
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += co.A(m, i, j) * dR[i].values[f];
                op.b[j].values[f] = co.B(m, j) + 2.0 * s / r;
            }
            op.c.values[f] = lr / r - op.Rt.values[f] / r;
        }
    for (int j = 0; j < n; ++j) op.db.push_back(fd::dt(op.b[j], topt));
    op.dc = fd::dt(op.c, topt);
    return op;
}

/** @brief Time-interpolation factors (t/T, (T - t)/T) of the terminal and initial data. */
inline std::pair<double, double> interp_weights(double t, double T) { return {t / T, (T - t) / T}; }

/**
 * @brief Data of the problem for w = v_t - I.
 *
 * I = (t/T) A + ((T - t)/T) B with A = L~(T) F~ and B = L~(0) f~, so w(., 0) = w(., T) = b.
 * w solves w_t = L~ w + (d/dt L~_1) v + P with Dirichlet p_bar and Neumann q_bar on the data boundary.
 */
struct TransformedProblem {
    GridPtr grid;
    DataBoundary data_boundary = DataBoundary::FullLateral;
    NormalizedData data;
    TransformedOperator op;
    SpatialField A, B;
    Field I, P;
    Trace p_bar, q_bar;
    Field R;
};

inline TransformedProblem build_w_problem(const ISPData& data, const SampledCoefficients& co,
                                          const DataDiffOptions& o = {})
{
    const auto& g = *data.grid;
    const std::size_t N = g.num_nodes();
    TransformedProblem tp;
    tp.grid = data.grid;
    tp.data_boundary = data.data_boundary;
    tp.R = data.R;
    tp.data = normalize_by_R(data);
    tp.op = transformed_operator(co, data.R, data.sigma, o);
    tp.A = tp.op.apply(tp.data.F, g.nt - 1, o);
    tp.B = tp.op.apply(tp.data.f, 0, o);
    tp.I = Field(data.grid);
    tp.P = Field(data.grid);
    for (int k = 0; k < g.nt; ++k) {
        auto [wa, wb] = interp_weights(g.time(k), g.T);
        SpatialField LA = tp.op.apply(tp.A, k, o), LB = tp.op.apply(tp.B, k, o);
        for (std::size_t m : g.active_nodes()) {
            tp.I.at(m, k) = wa * tp.A[m] + wb * tp.B[m];
            tp.P.at(m, k) = wa * LA[m] + wb * LB[m] + (tp.B[m] - tp.A[m]) / g.T;
        }
    }

    const auto& nodes = tp.data.p.nodes;
    const fd::Shape tshape({int(nodes.size()), g.nt});
    tp.p_bar = tp.data.p;
    tp.q_bar = tp.data.q;
    if (!nodes.empty()) {
        tp.p_bar.values = fd::diff(tp.data.p.values, tshape, 1, 1, g.dt);
        tp.q_bar.values = fd::diff(tp.data.q.values, tshape, 1, 1, g.dt);
    }
    const Trace In = normal_trace(tp.I, nodes);
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t j = 0; j < nodes.size(); ++j) {
            tp.p_bar.at(j, k) -= tp.I.values[std::size_t(k) * N + nodes[j]];
            tp.q_bar.at(j, k) -= In.at(j, k);
        }
    return tp;
}

/**
 * @brief v(t) = f~ + int_0^t w + (t^2 / 2T) A + (t - t^2 / 2T) B, so that v_t = w + I and v(0) = f~.
 *
 * The time integral is the cumulative trapezoid rule.
 */
inline Field recover_v(const Field& w, const TransformedProblem& tp)
{
    const auto& g = *w.grid;
    Field v(w.grid);
    std::vector<double> acc(g.num_nodes(), 0.0);
    for (int k = 0; k < g.nt; ++k) {
        if (k > 0)
            for (std::size_t m = 0; m < g.num_nodes(); ++m) acc[m] += 0.5 * g.dt * (w.at(m, k - 1) + w.at(m, k));
        const double t = g.time(k), s = t * t / (2.0 * g.T);
        for (std::size_t m : g.active_nodes()) v.at(m, k) = tp.data.f[m] + acc[m] + s * tp.A[m] + (t - s) * tp.B[m];
    }
    return v;
}

/** @brief Settings of one quasi-reversibility solve. */
struct QROptions {
    double alpha = 1e-6;
    double lambda = 2.0;
    double mu = 1.0;
    double neumann_weight = 1.0;
    Preconditioner preconditioner = Preconditioner::Cholesky;
    PCGOptions pcg;
};

struct Reconstruction {
    SpatialField b_hat;
    Field w_hat, v_hat, u_hat;
    double residual_norm = 0.0;
    double regularization = 0.0;
    double lambda_used = 0.0;
    int iterations = 0;
    std::vector<double> pcg_trace;
    std::vector<std::string> warnings;
};

namespace detail {

// Index of an unknown w(node, level) with level nt-1 identified with level 0.
struct WLayout {
    std::vector<long> pos;  // node -> active index, -1 if inactive
    std::size_t active = 0;
    int levels = 0;  // nt - 1

    long at(std::size_t node, int k) const { return long(k % levels) * long(active) + pos[node]; }
    std::size_t size() const { return active * std::size_t(levels); }
};

}  // namespace detail

/**
 * @brief Minimize the Phi^2-weighted residual of the w equation plus alpha times a discrete H^2 norm.
 *
 * Dirichlet data are eliminated, Neumann data enter as weighted penalty rows, and w(., T) = w(., 0)
 * holds by sharing unknowns. The normal equations are solved by preconditioned conjugate gradients.
 */
inline Reconstruction qr_solve(const TransformedProblem& tp, const QROptions& opt)
{
    if (!(opt.alpha >= 0.0)) throw ValidationError("alpha must be non-negative", "isp.alpha");
    const GridPtr gp = tp.grid;
    const auto& g = *gp;
    const int n = g.dim();
    const CarlemanWeight cw(opt.lambda, opt.mu);
    Reconstruction rec;
    rec.regularization = opt.alpha;
    rec.lambda_used = opt.lambda;
    if (opt.alpha == 0.0 && tp.data_boundary == DataBoundary::GammaOnly)
        rec.warnings.push_back("alpha = 0 with Gamma-only data: the far side is not determined by the data");

    detail::WLayout L;
    L.pos.assign(g.num_nodes(), -1);
    for (std::size_t m : g.active_nodes()) L.pos[m] = long(L.active++);
    L.levels = g.nt - 1;

    // Normalized Phi^2 on active nodes.
    std::vector<double> phi2(g.num_nodes(), 0.0);
    double lmax = -std::numeric_limits<double>::infinity();
    for (std::size_t m : g.active_nodes()) lmax = std::max(lmax, log_weight(cw, g.psi(m)));
    for (std::size_t m : g.active_nodes()) phi2[m] = std::exp(2.0 * (log_weight(cw, g.psi(m)) - lmax));

    // Known values from the Dirichlet data.
    const auto& nodes = tp.p_bar.nodes;
    std::vector<double> known(L.size(), 0.0);
    std::vector<char> is_known(L.size(), 0);
    for (std::size_t j = 0; j < nodes.size(); ++j) {
        for (int k = 1; k < g.nt - 1; ++k) {
            known[L.at(nodes[j], k)] = tp.p_bar.at(j, k);
            is_known[L.at(nodes[j], k)] = 1;
        }
        known[L.at(nodes[j], 0)] = 0.5 * (tp.p_bar.at(j, 0) + tp.p_bar.at(j, g.nt - 1));
        is_known[L.at(nodes[j], 0)] = 1;
    }

    std::vector<Eigen::Triplet<double>> full, local;
    std::vector<double> rhs;
    long row = 0;
    auto add = [&](long c, double v, bool is_local) {
        full.emplace_back(row, c, v);
        if (is_local) local.emplace_back(row, c, v);
    };

    const double vol = g.cell_volume();
    const Field vconst = recover_v(Field(gp), tp);
    bool coupled = false;

    // Crank-Nicolson rows at t_{k+1/2}:
    //   (w_{k+1} - w_k)/dt - (L~_{k+1} w_{k+1} + L~_k w_k)/2 - D_k (v_k + v_{k+1})/2 = (P_k + P_{k+1})/2
    // with D_k = (L~_{k+1} - L~_k)/dt and v[w] the cumulative trapezoid rule of recover_v.
    for (int k = 0; k + 1 < g.nt; ++k)
        for (std::size_t m : g.active_nodes()) {
            if (!g.interior(m)) continue;
            const double s = std::sqrt(phi2[m] * vol * g.dt);
            add(L.at(m, k + 1), s / g.dt, true);
            add(L.at(m, k), -s / g.dt, true);
            const Stencil s0 = tp.op.stencil(m, k), s1 = tp.op.stencil(m, k + 1);
            for (auto [q, w] : s0) add(L.at(q, k), -0.5 * s * w, true);
            for (auto [q, w] : s1) add(L.at(q, k + 1), -0.5 * s * w, true);
            double r = 0.5 * (tp.P.at(m, k) + tp.P.at(m, k + 1));
            // s0 and s1 list the same nodes in the same order.
            for (std::size_t e = 0; e < s0.size(); ++e) {
                const std::size_t q = s0[e].first;
                const double c = (s1[e].second - s0[e].second) / g.dt;
                if (c == 0.0) continue;
                coupled = true;
                r += c * 0.5 * (vconst.at(q, k) + vconst.at(q, k + 1));
                // v_k + v_{k+1} = 2 vconst-part + dt * (sum_{l<=k} tau^k_l + sum_{l<=k+1} tau^{k+1}_l) w_l
                for (int l = 0; l <= k + 1; ++l) {
                    double tau = 0.0;
                    if (k >= 1 && l <= k) tau += (l == 0 || l == k) ? 0.5 : 1.0;
                    if (l <= k + 1) tau += (l == 0 || l == k + 1) ? 0.5 : 1.0;
                    add(L.at(q, l), -s * c * 0.5 * g.dt * tau, false);
                }
            }
            rhs.push_back(s * r);
            ++row;
        }

    // Neumann penalty rows.
    for (std::size_t j = 0; j < nodes.size(); ++j) {
        auto [axis, sign] = fd::outward_normal(g.tag(nodes[j]));
        const long n1 = g.neighbor(nodes[j], axis, -sign), n2 = g.neighbor(nodes[j], axis, -2 * sign);
        if (n1 < 0 || n2 < 0 || L.pos[std::size_t(n1)] < 0 || L.pos[std::size_t(n2)] < 0)
            throw StencilError("normal stencil leaves the active set");
        const double dS = vol / g.h[axis];
        for (int k = 0; k < g.nt; ++k) {
            const double s = std::sqrt(opt.neumann_weight * phi2[nodes[j]] * dS * g.dt) / (2.0 * g.h[axis]);
            add(L.at(nodes[j], k), 3.0 * s, true);
            add(L.at(std::size_t(n1), k), -4.0 * s, true);
            add(L.at(std::size_t(n2), k), s, true);
            rhs.push_back(s * 2.0 * g.h[axis] * tp.q_bar.at(j, k));
            ++row;
        }
    }

    // alpha times a discrete H^2 norm in space plus the first time difference.
    if (opt.alpha > 0.0) {
        const double s = std::sqrt(opt.alpha * vol * g.dt);
        auto act = [&](long q) { return q >= 0 && L.pos[std::size_t(q)] >= 0; };
        for (int k = 0; k < L.levels; ++k)
            for (std::size_t m : g.active_nodes()) {
                add(L.at(m, k), s, true);
                rhs.push_back(0.0);
                ++row;
                add(L.at(m, k + 1), s / g.dt, true);
                add(L.at(m, k), -s / g.dt, true);
                rhs.push_back(0.0);
                ++row;
                for (int i = 0; i < n; ++i) {
                    const long p = g.neighbor(m, i, 1), q = g.neighbor(m, i, -1);
                    if (act(p)) {
                        add(L.at(std::size_t(p), k), s / g.h[i], true);
                        add(L.at(m, k), -s / g.h[i], true);
                        rhs.push_back(0.0);
                        ++row;
                    }
                    if (act(p) && act(q)) {
                        const double c = s / (g.h[i] * g.h[i]);
                        add(L.at(std::size_t(p), k), c, true);
                        add(L.at(m, k), -2.0 * c, true);
                        add(L.at(std::size_t(q), k), c, true);
                        rhs.push_back(0.0);
                        ++row;
                    }
                    for (int j = i + 1; j < n; ++j) {
                        const long pj = g.neighbor(m, j, 1);
                        const long pij = act(p) ? g.neighbor(std::size_t(p), j, 1) : -1;
                        if (!(act(p) && act(pj) && act(pij))) continue;
                        const double c = s / (g.h[i] * g.h[j]);
                        add(L.at(std::size_t(pij), k), c, true);
                        add(L.at(std::size_t(p), k), -c, true);
                        add(L.at(std::size_t(pj), k), -c, true);
                        add(L.at(m, k), c, true);
                        rhs.push_back(0.0);
                        ++row;
                    }
                }
            }
    }

    // Split columns into unknown and eliminated ones.
    std::vector<long> col(L.size(), -1);
    long nfree = 0;
    for (std::size_t c = 0; c < L.size(); ++c)
        if (!is_known[c]) col[c] = nfree++;
    Eigen::VectorXd d = Eigen::Map<Eigen::VectorXd>(rhs.data(), long(rhs.size()));
    auto split = [&](const std::vector<Eigen::Triplet<double>>& trip, bool move_known) {
        std::vector<Eigen::Triplet<double>> kept;
        kept.reserve(trip.size());
        for (const auto& t : trip) {
            if (col[t.col()] >= 0) kept.emplace_back(t.row(), col[t.col()], t.value());
            else if (move_known) d[t.row()] -= t.value() * known[t.col()];
        }
        SparseMatrix M(row, nfree);
        M.setFromTriplets(kept.begin(), kept.end());
        M.makeCompressed();
        return M;
    };
    const SparseMatrix M = split(full, true);
    const SparseMatrix S = coupled ? split(local, false) : SparseMatrix();
    (void)n;

    PCGResult sol;
    {
        NormalEquations ne(M, coupled ? S : M, opt.preconditioner);
        sol = ne.solve(d, opt.pcg);
    }
    rec.iterations = sol.iterations;
    rec.pcg_trace = sol.trace;
    rec.residual_norm = (M * sol.x - d).norm();

    rec.w_hat = Field(gp);
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t m : g.active_nodes()) {
            const long c = L.at(m, k);
            rec.w_hat.at(m, k) = col[c] >= 0 ? sol.x[col[c]] : known[c];
        }
    rec.b_hat = rec.w_hat.slice_field(0);
    rec.v_hat = recover_v(rec.w_hat, tp);
    rec.u_hat = rec.v_hat;
    for (std::size_t i = 0; i < rec.u_hat.values.size(); ++i) rec.u_hat.values[i] *= tp.R.values[i];
    return rec;
}

/** @brief L2 norm of a trace, face measure times dt. */
inline double trace_l2_norm(const Trace& t, const SpaceTimeGrid& g)
{
    double s = 0.0;
    for (int k = 0; k < t.nt; ++k)
        for (std::size_t j = 0; j < t.count(); ++j) {
            auto [axis, sign] = fd::outward_normal(g.tag(t.nodes[j]));
            (void)sign;
            s += t.at(j, k) * t.at(j, k) * g.cell_volume() / g.h[axis] * g.dt;
        }
    return std::sqrt(s);
}

/**
 * @brief H^1 norm on the lateral boundary, summed face by face: values, time derivative and
 * derivatives along the face.
 */
inline double trace_h1_norm(const Trace& t, const SpaceTimeGrid& g)
{
    if (t.count() == 0) return 0.0;
    double s = trace_l2_norm(t, g);
    s *= s;
    const fd::Shape tshape({int(t.count()), t.nt});
    const auto dt = fd::diff(t.values, tshape, 1, 1, g.dt);
    std::vector<long> slot(g.num_nodes(), -1);
    for (std::size_t j = 0; j < t.count(); ++j) slot[t.nodes[j]] = long(j);
    for (std::size_t j = 0; j < t.count(); ++j) {
        const BoundaryTag tag = g.tag(t.nodes[j]);
        const int axis = fd::outward_normal(tag).first;
        const double w = g.cell_volume() / g.h[axis] * g.dt;
        for (int k = 0; k < t.nt; ++k) s += dt[std::size_t(k) * t.count() + j] * dt[std::size_t(k) * t.count() + j] * w;
        // Forward differences to neighbours on the same face.
        for (int a = 0; a < g.dim(); ++a) {
            if (a == axis) continue;
            const long nb = g.neighbor(t.nodes[j], a, 1);
            if (nb < 0 || slot[std::size_t(nb)] < 0 || g.tag(std::size_t(nb)) != tag) continue;
            for (int k = 0; k < t.nt; ++k) {
                const double d = (t.at(std::size_t(slot[std::size_t(nb)]), k) - t.at(j, k)) / g.h[a];
                s += d * d * w;
            }
        }
    }
    return std::sqrt(s);
}

/** @brief Discrete Sobolev norm with pure differences of order 0..4 along every axis. */
inline double h4_norm(const SpatialField& f)
{
    const auto& g = *f.grid;
    fd::DiffOptions o;
    o.mask = &g.active_mask();
    o.strict = false;
    double s = 0.0;
    for (std::size_t m : g.active_nodes()) s += f[m] * f[m];
    for (int a = 0; a < g.dim(); ++a) {
        SpatialField d = f;
        for (int order = 1; order <= 4; ++order) {
            d = fd::dx(d, a, o);
            for (std::size_t m : g.active_nodes()) s += d[m] * d[m];
        }
    }
    return std::sqrt(s * g.cell_volume());
}

namespace detail {

// Uniform double in [0, 1) from the top 53 bits; fixed across standard libraries.
inline double unit(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

// Low-order random trigonometric series in normalized coordinates (and time when with_time).
struct TrigSeries {
    struct Mode {
        std::vector<int> k;
        double amp, phase;
    };
    std::vector<Mode> modes;
    std::vector<double> lo, span;
    double T = 1.0;

    TrigSeries(const SpaceTimeGrid& g, std::uint64_t seed, bool with_time, int count = 6)
    {
        std::mt19937_64 rng(seed);
        const int n = g.dim();
        for (int a = 0; a < n; ++a) {
            lo.push_back(g.lo[a]);
            span.push_back(std::max(g.h[a] * (g.shape[a] - 1), 1e-300));
        }
        T = g.T;
        for (int c = 0; c < count; ++c) {
            Mode md;
            for (int a = 0; a < n + 1; ++a) md.k.push_back(a == n && !with_time ? 0 : int(rng() % 4));
            md.amp = 2.0 * unit(rng) - 1.0;
            md.phase = 2.0 * std::acos(-1.0) * unit(rng);
            modes.push_back(md);
        }
    }

    double operator()(const Point& x, double t) const
    {
        const double pi = std::acos(-1.0);
        double v = 0.0;
        for (const auto& md : modes) {
            double arg = md.phase + pi * md.k.back() * t / T;
            for (std::size_t a = 0; a + 1 < md.k.size(); ++a) arg += pi * md.k[a] * (x[long(a)] - lo[a]) / span[a];
            v += md.amp * std::cos(arg);
        }
        return v;
    }
};

}  // namespace detail

/** @brief Seeded perturbations of the four data, each of norm delta in its own norm. */
struct NoisePerturbation {
    Trace p, q;
    SpatialField f, F;
};

/**
 * @brief Smooth perturbations for p, q, f and F scaled to norm delta: H^1 on the boundary for p,
 * L2 for q, the four-difference Sobolev norm for f and F.
 */
inline NoisePerturbation noise_perturbation(const ISPData& data, double delta, std::uint64_t seed)
{
    if (!(delta >= 0.0)) throw ValidationError("noise level must be non-negative", "noise.delta");
    const auto& g = *data.grid;
    NoisePerturbation e{data.p, data.q, SpatialField(data.grid), SpatialField(data.grid)};
    auto scale = [delta](std::vector<double>& v, double norm) {
        for (double& x : v) x *= norm > 0.0 ? delta / norm : 0.0;
    };
    auto fill_trace = [&](Trace& t, std::uint64_t id) {
        detail::TrigSeries s(g, seed * 4 + id, true);
        for (int k = 0; k < t.nt; ++k)
            for (std::size_t j = 0; j < t.count(); ++j) t.at(j, k) = s(g.coords(t.nodes[j]), g.time(k));
    };
    auto fill_field = [&](SpatialField& f, std::uint64_t id) {
        detail::TrigSeries s(g, seed * 4 + id, false);
        for (std::size_t m : g.active_nodes()) f[m] = s(g.coords(m), 0.0);
    };
    fill_trace(e.p, 0);
    fill_trace(e.q, 1);
    fill_field(e.f, 2);
    fill_field(e.F, 3);
    scale(e.p.values, trace_h1_norm(e.p, g));
    scale(e.q.values, trace_l2_norm(e.q, g));
    scale(e.f.values, h4_norm(e.f));
    scale(e.F.values, h4_norm(e.F));
    return e;
}

/** @brief Data plus noise_perturbation(data, delta, seed); delta = 0 returns the data unchanged. */
inline ISPData add_noise(const ISPData& data, double delta, std::uint64_t seed)
{
    const NoisePerturbation e = noise_perturbation(data, delta, seed);
    if (delta == 0.0) return data;
    ISPData out = data;
    for (std::size_t i = 0; i < e.p.values.size(); ++i) {
        out.p.values[i] += e.p.values[i];
        out.q.values[i] += e.q.values[i];
    }
    for (std::size_t m = 0; m < e.f.values.size(); ++m) {
        out.f.values[m] += e.f.values[m];
        out.F.values[m] += e.F.values[m];
    }
    return out;
}

/** @brief Outward normal derivative misfit of u_hat against the measured q, in the trace L2 norm. */
inline double neumann_misfit(const Reconstruction& rec, const ISPData& data)
{
    Trace qh = normal_trace(rec.u_hat, data.q.nodes);
    for (std::size_t i = 0; i < qh.values.size(); ++i) qh.values[i] -= data.q.values[i];
    return trace_l2_norm(qh, *data.grid);
}

/** @brief How the regularization parameter is chosen. */
struct AlphaRule {
    bool discrepancy = true;
    double fixed = 1e-6;
    std::vector<double> grid{1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10};
    double tau = 1.5;
};

struct InversionResult {
    Reconstruction rec;
    double alpha = 0.0;
    double misfit = 0.0;
    std::vector<std::pair<double, double>> alpha_table;  // (alpha, misfit)
};

/**
 * @brief Full pipeline: transform, then one solve at a fixed alpha or the discrepancy choice: the
 * largest alpha on the grid whose Neumann misfit is within tau * max(delta, smallest misfit).
 */
inline InversionResult invert(const ISPData& data, const SampledCoefficients& co, const QROptions& base,
                              const AlphaRule& rule, double delta, const DataDiffOptions& dopt = {})
{
    const TransformedProblem tp = build_w_problem(data, co, dopt);
    InversionResult out;
    if (!rule.discrepancy) {
        QROptions o = base;
        o.alpha = rule.fixed;
        out.rec = qr_solve(tp, o);
        out.alpha = o.alpha;
        out.misfit = neumann_misfit(out.rec, data);
        out.alpha_table.emplace_back(out.alpha, out.misfit);
        return out;
    }
    if (rule.grid.empty()) throw ConfigError("empty alpha grid", "isp.alpha_grid");
    std::vector<double> alphas = rule.grid;
    std::sort(alphas.begin(), alphas.end(), std::greater<>());
    std::vector<Reconstruction> recs;
    double dmin = std::numeric_limits<double>::infinity();
    for (double a : alphas) {
        QROptions o = base;
        o.alpha = a;
        recs.push_back(qr_solve(tp, o));
        const double m = neumann_misfit(recs.back(), data);
        out.alpha_table.emplace_back(a, m);
        dmin = std::min(dmin, m);
    }
    const double target = rule.tau * std::max(delta, dmin);
    for (std::size_t i = 0; i < alphas.size(); ++i)
        if (out.alpha_table[i].second <= target) {
            out.rec = std::move(recs[i]);
            out.alpha = alphas[i];
            out.misfit = out.alpha_table[i].second;
            return out;
        }
    throw SolverError("discrepancy rule found no admissible alpha", dmin);
}

/** @brief Nodes of the grid lying in the staircase region of a subdomain. */
inline std::vector<std::size_t> region_nodes(const SpaceTimeGrid& g, const Domain& d)
{
    std::vector<std::size_t> out;
    for (std::size_t m : g.active_nodes()) {
        const Point x = g.coords(m);
        if (in_domain(d, x) || (g.index(m, 0) == 0 && g.psi(m) < d.psi_cap())) out.push_back(m);
    }
    return out;
}

inline double l2_error(const SpatialField& a, const SpatialField& b, const std::vector<std::size_t>& nodes)
{
    double s = 0.0;
    for (std::size_t m : nodes) s += (a[m] - b[m]) * (a[m] - b[m]);
    return std::sqrt(s * a.grid->cell_volume());
}

inline double l2_norm(const SpatialField& a, const std::vector<std::size_t>& nodes)
{
    double s = 0.0;
    for (std::size_t m : nodes) s += a[m] * a[m];
    return std::sqrt(s * a.grid->cell_volume());
}

inline double rms_error(const SpatialField& a, const SpatialField& b, const std::vector<std::size_t>& nodes)
{
    if (nodes.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t m : nodes) s += (a[m] - b[m]) * (a[m] - b[m]);
    return std::sqrt(s / double(nodes.size()));
}

/** @brief Worker count: CARLEMAN_THREADS if set and positive, else the hardware concurrency. */
inline unsigned thread_count()
{
    unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* s = std::getenv("CARLEMAN_THREADS")) {
        const long v = std::strtol(s, nullptr, 10);
        if (v > 0) return unsigned(std::min<long>(v, 1024));
    }
    return hw;
}

/** @brief Run body(i) for i in [0, count) on up to thread_count() threads. */
template <class Body>
void parallel_for(std::size_t count, Body body)
{
    const unsigned nt = unsigned(std::min<std::size_t>(thread_count(), count));
    if (nt <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(count);
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < nt; ++t)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < count;) {
                try {
                    body(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

/** @brief Least-squares line through (log x, log y). */
inline std::pair<double, double> loglog_fit(const std::vector<double>& x, const std::vector<double>& y)
{
    const std::size_t n = x.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    return {slope, (sy - slope * sx) / double(n)};
}

struct SweepResult {
    std::vector<double> deltas;
    std::vector<double> errors;                    // mean over seeds
    std::vector<std::vector<double>> seed_errors;  // [delta][seed]
    std::vector<double> alphas;                    // chosen alpha for the first seed
    double fitted_slope = 0.0;
    double fitted_intercept = 0.0;
};

/**
 * @brief Noise sweep: for each delta and seed, perturb, invert and record ||b_hat - b||_L2 over
 * `region`; fit log error against log delta.
 */
inline SweepResult stability_sweep(const ISPData& base, const SampledCoefficients& co, const SpatialField& truth,
                                   const std::vector<double>& deltas, const std::vector<std::uint64_t>& seeds,
                                   const std::vector<std::size_t>& region, const QROptions& qopt,
                                   const AlphaRule& rule, const DataDiffOptions& dopt = {})
{
    if (deltas.empty() || seeds.empty()) throw ValidationError("sweep needs deltas and seeds", "sweep.deltas");
    for (std::size_t i = 0; i < deltas.size(); ++i)
        if (!(deltas[i] > 0.0) || (i > 0 && !(deltas[i] > deltas[i - 1])))
            throw ValidationError("deltas must be positive and increasing", "sweep.deltas");
    SweepResult res;
    res.deltas = deltas;
    res.seed_errors.assign(deltas.size(), std::vector<double>(seeds.size()));
    std::vector<double> alpha(deltas.size() * seeds.size());
    parallel_for(deltas.size() * seeds.size(), [&](std::size_t task) {
        const std::size_t i = task / seeds.size(), s = task % seeds.size();
        try {
            auto inv = invert(add_noise(base, deltas[i], seeds[s]), co, qopt, rule, deltas[i], dopt);
            res.seed_errors[i][s] = l2_error(inv.rec.b_hat, truth, region);
            alpha[task] = inv.alpha;
        } catch (const SolverError& e) {
            throw SolverError("sweep failed at delta = " + std::to_string(deltas[i]) + ": " + e.what(),
                              e.residual(), e.trace());
        }
    });
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        double m = 0.0;
        for (double e : res.seed_errors[i]) m += e;
        res.errors.push_back(m / double(seeds.size()));
        res.alphas.push_back(alpha[i * seeds.size()]);
    }
    std::tie(res.fitted_slope, res.fitted_intercept) = loglog_fit(res.deltas, res.errors);
    return res;
}

/**
 * @brief ||P||_L2 / (||f||_H4 + ||F||_H4): the forcing of the w problem against the size of the
 * initial and terminal data.
 */
inline double k_bound_ratio(const TransformedProblem& tp, const ISPData& data)
{
    const auto& g = *tp.grid;
    double s = 0.0;
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t m : g.active_nodes()) s += tp.P.at(m, k) * tp.P.at(m, k);
    const double denom = h4_norm(data.f) + h4_norm(data.F);
    if (denom == 0.0) return 0.0;
    return std::sqrt(s * g.cell_volume() * g.dt) / denom;
}

/** @brief A synthetic problem with known source and solution. */
struct ManufacturedISP {
    SampledCoefficients co;
    ISPData data;
    SpatialField b;
    Field u;
};

/**
 * @brief Manufactured problem for a given source b: u*(x,t) = e^{t/2} g(x) + 0.3 t x1 with
 * g = 2 + x1 - x1^2/4 + (1/4) sum_{i>1} cos(2 x_i), and R = (u*_t - L u*) / b.
 *
 * R depends on t through more than a common factor, so the transformed operator is time dependent.
 * Traces are taken from the sampled u* with the solver's one-sided normal stencil.
 */
inline ManufacturedISP manufactured_problem(const GridPtr& g, const EllipticCoefficients& coeffs, const SpaceFn& b,
                                            DataBoundary boundary, double sigma)
{
    const int n = g->dim();
    ManufacturedISP out;
    out.co = sample_coefficients(coeffs, g);
    out.b = sample(g, b);
    mask_inactive(out.b);
    auto gfun = [n](const Point& x) {
        double v = 2.0 + x[0] - 0.25 * x[0] * x[0];
        for (int i = 1; i < n; ++i) v += 0.25 * std::cos(2.0 * x[i]);
        return v;
    };
    out.u = sample(g, [&](const Point& x, double t) { return std::exp(0.5 * t) * gfun(x) + 0.3 * t * x[0]; });
    mask_inactive(out.u);
    Field R(g);
    for (int k = 0; k < g->nt; ++k)
        for (std::size_t m : g->active_nodes()) {
            const Point x = g->coords(m);
            const double t = g->time(k), e = std::exp(0.5 * t);
            const double ut = 0.5 * e * gfun(x) + 0.3 * x[0];
            std::vector<double> grad(n), hess(n);
            grad[0] = e * (1.0 - 0.5 * x[0]) + 0.3 * t;
            hess[0] = -0.5 * e;
            for (int i = 1; i < n; ++i) {
                grad[i] = -0.5 * e * std::sin(2.0 * x[i]);
                hess[i] = -e * std::cos(2.0 * x[i]);
            }
            double Lu = out.co.C(m) * out.u.at(m, k);
            for (int i = 0; i < n; ++i) Lu += out.co.A(m, i, i) * hess[i] + out.co.B(m, i) * grad[i];
            if (out.b[m] == 0.0) throw PositivityError("source vanishes at a node", "isp.b");
            R.at(m, k) = (ut - Lu) / out.b[m];
        }
    check_positivity(R, sigma);
    out.data.grid = g;
    out.data.f = out.u.slice_field(0);
    out.data.F = out.u.slice_field(g->nt - 1);
    const auto nodes = data_boundary_nodes(*g, boundary);
    out.data.p = restrict_trace(out.u, nodes);
    out.data.q = normal_trace(out.u, nodes);
    out.data.R = R;
    out.data.sigma = sigma;
    out.data.data_boundary = boundary;
    return out;
}

}  // namespace carleman
