#pragma once

#include <carleman/differences.hpp>

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace carleman {

/**
 * @brief Coefficients of L u = sum a^{ij} u_ij + sum b_j u_j + c u as functions of x.
 *
 * Empty b or c mean zero. When da is empty the derivatives of a are taken by central differences.
 */
struct EllipticCoefficients {
    int dim = 1;
    std::string name = "custom";
    std::function<Matrix(const Point&)> a;
    std::function<Point(const Point&)> b;
    std::function<double(const Point&)> c;
    std::function<Matrix(const Point&, int)> da;

    static EllipticCoefficients laplacian(int n, double kappa = 1.0)
    {
        EllipticCoefficients co;
        co.dim = n;
        co.name = "laplacian";
        co.a = [n, kappa](const Point&) { return Matrix(kappa * Matrix::Identity(n, n)); };
        co.da = [n](const Point&, int) { return Matrix(Matrix::Zero(n, n)); };
        return co;
    }

    /** @brief a^{ij} = kappa[(1 + gamma x1) delta_ij + beta (1 - delta_ij)]. */
    static EllipticCoefficients variable_a(int n, double kappa = 1.0, double gamma = 0.5, double beta = 0.1)
    {
        EllipticCoefficients co;
        co.dim = n;
        co.name = "variable_a";
        co.a = [=](const Point& x) {
            Matrix m = Matrix::Constant(n, n, kappa * beta);
            for (int i = 0; i < n; ++i) m(i, i) = kappa * (1.0 + gamma * x[0]);
            return m;
        };
        co.da = [=](const Point&, int k) {
            Matrix m = Matrix::Zero(n, n);
            if (k == 0)
                for (int i = 0; i < n; ++i) m(i, i) = kappa * gamma;
            return m;
        };
        return co;
    }

    /** @brief variable_a plus constant drift b_j = b0 and reaction c = c0. */
    static EllipticCoefficients full_lower_order(int n, double kappa = 1.0, double gamma = 0.5, double beta = 0.1,
                                                 double b0 = 0.5, double c0 = -1.0)
    {
        EllipticCoefficients co = variable_a(n, kappa, gamma, beta);
        co.name = "full_lower_order";
        co.b = [n, b0](const Point&) { return Point(Point::Constant(n, b0)); };
        co.c = [c0](const Point&) { return c0; };
        return co;
    }
};

/** @brief Coefficients evaluated at every node of a grid, including first derivatives of a. */
struct SampledCoefficients {
    GridPtr grid;
    int n = 1;
    std::vector<double> a;   // node*n*n + i*n + j
    std::vector<double> da;  // node*n*n*n + k*n*n + i*n + j
    std::vector<double> b;   // node*n + j
    std::vector<double> c;   // node

    double A(std::size_t node, int i, int j) const { return a[(node * n + i) * n + j]; }
    double dA(std::size_t node, int k, int i, int j) const { return da[((node * n + k) * n + i) * n + j]; }
    double B(std::size_t node, int j) const { return b[node * n + j]; }
    double C(std::size_t node) const { return c[node]; }
    const double* a_ptr(std::size_t node) const { return &a[node * n * n]; }
    const double* b_ptr(std::size_t node) const { return &b[node * n]; }
};

inline SampledCoefficients sample_coefficients(const EllipticCoefficients& co, const GridPtr& g)
{
    if (co.dim != g->dim()) throw DimensionError("coefficient dimension does not match grid");
    const int n = co.dim;
    const std::size_t N = g->num_nodes();
    SampledCoefficients s;
    s.grid = g;
    s.n = n;
    s.a.resize(N * n * n);
    s.da.resize(N * n * n * n);
    s.b.assign(N * n, 0.0);
    s.c.assign(N, 0.0);
    for (std::size_t k = 0; k < N; ++k) {
        Point x = g->coords(k);
        Matrix m = co.a(x);
        if (m.rows() != n || m.cols() != n) throw DimensionError("a(x) has wrong shape");
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) s.a[(k * n + i) * n + j] = m(i, j);
        for (int q = 0; q < n; ++q) {
            Matrix d;
            if (co.da) {
                d = co.da(x, q);
            } else {
                const double step = 1e-5;
                Point xp = x, xm = x;
                xp[q] += step;
                xm[q] -= step;
                d = (co.a(xp) - co.a(xm)) / (2.0 * step);
            }
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) s.da[((k * n + q) * n + i) * n + j] = d(i, j);
        }
        if (co.b) {
            Point bv = co.b(x);
            for (int j = 0; j < n; ++j) s.b[k * n + j] = bv[j];
        }
        if (co.c) s.c[k] = co.c(x);
    }
    return s;
}

/**
 * @brief Read coefficients from CSV rows "i_1..i_n, a^{11}..a^{nn} (row-major), b_1..b_n, c".
 *
 * Lines starting with '#' and a non-numeric header line are skipped. Nodes not listed keep a = I.
 * Derivatives of a are taken by second-order differences on the grid.
 */
inline SampledCoefficients load_coefficients_csv(const std::string& path, const GridPtr& g)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open coefficient table " + path, "coefficients.csv");
    const int n = g->dim();
    const std::size_t N = g->num_nodes();
    SampledCoefficients s;
    s.grid = g;
    s.n = n;
    s.a.assign(N * n * n, 0.0);
    for (std::size_t k = 0; k < N; ++k)
        for (int i = 0; i < n; ++i) s.a[(k * n + i) * n + i] = 1.0;
    s.da.assign(N * n * n * n, 0.0);
    s.b.assign(N * n, 0.0);
    s.c.assign(N, 0.0);

    std::string line;
    const std::size_t expect = std::size_t(n + n * n + n + 1);
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::vector<double> vals;
        std::stringstream ss(line);
        std::string cell;
        bool numeric = true;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                vals.push_back(std::stod(cell, &used));
            } catch (const std::exception&) {
                numeric = false;
                break;
            }
        }
        if (!numeric) {
            if (lineno == 1) continue;
            throw ConfigError("non-numeric entry in coefficient table line " + std::to_string(lineno),
                              "coefficients.csv");
        }
        if (vals.size() != expect)
            throw ConfigError("coefficient table line " + std::to_string(lineno) + " has " +
                                  std::to_string(vals.size()) + " columns, expected " + std::to_string(expect),
                              "coefficients.csv");
        std::size_t node = 0;
        for (int i = 0; i < n; ++i) {
            int idx = int(vals[i]);
            if (idx < 0 || idx >= g->shape[i])
                throw ConfigError("node index out of range in coefficient table", "coefficients.csv");
            node += std::size_t(idx) * g->stride(i);
        }
        std::size_t p = std::size_t(n);
        for (int i = 0; i < n * n; ++i) s.a[node * n * n + i] = vals[p++];
        for (int j = 0; j < n; ++j) s.b[node * n + j] = vals[p++];
        s.c[node] = vals[p];
    }

    const auto shape = fd::spatial_shape(*g);
    std::vector<double> comp(N);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            for (std::size_t k = 0; k < N; ++k) comp[k] = s.a[(k * n + i) * n + j];
            for (int q = 0; q < n; ++q) {
                auto d = fd::diff(comp, shape, q, 1, g->h[q]);
                for (std::size_t k = 0; k < N; ++k) s.da[((k * n + q) * n + i) * n + j] = d[k];
            }
        }
    return s;
}

struct CoefficientCertificate {
    double nu_est = 0.0;
    double A_est = 0.0;
};

/** @brief Check symmetry and ellipticity at every active node; report nu and the C^1 bound of a. */
inline CoefficientCertificate validate_coefficients(const SampledCoefficients& s)
{
    const int n = s.n;
    CoefficientCertificate cert;
    cert.nu_est = std::numeric_limits<double>::infinity();
    Matrix m(n, n);
    for (std::size_t k : s.grid->active_nodes()) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                m(i, j) = s.A(k, i, j);
                cert.A_est = std::max(cert.A_est, std::abs(m(i, j)));
                for (int q = 0; q < n; ++q) cert.A_est = std::max(cert.A_est, std::abs(s.dA(k, q, i, j)));
            }
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j)
                if (std::abs(m(i, j) - m(j, i)) > 1e-12)
                    throw SymmetryViolation("a is not symmetric at node " + std::to_string(k), "coefficients");
        Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
        cert.nu_est = std::min(cert.nu_est, es.eigenvalues()[0]);
    }
    if (!(cert.nu_est > 0.0))
        throw EllipticityViolation("smallest eigenvalue of a is " + std::to_string(cert.nu_est), "coefficients");
    return cert;
}

inline CoefficientCertificate validate_coefficients(const EllipticCoefficients& co, const GridPtr& g)
{
    return validate_coefficients(sample_coefficients(co, g));
}

/** @brief L0 u = sum a^{ij} u_ij on every node (one-sided stencils at box edges). */
inline Field apply_L0(const SampledCoefficients& co, const Field& u, const fd::DiffOptions& opt = {})
{
    const int n = co.n;
    const auto shape = fd::spacetime_shape(*u.grid);
    Field out(u.grid);
    for (int i = 0; i < n; ++i) {
        auto grad_i = fd::diff(u.values, shape, i, 1, u.grid->h[i], opt);
        for (int j = 0; j < n; ++j) {
            std::vector<double> d = i == j ? fd::diff(u.values, shape, i, 2, u.grid->h[i], opt)
                                           : fd::diff(grad_i, shape, j, 1, u.grid->h[j], opt);
            for (int k = 0; k < u.levels(); ++k)
                for (std::size_t m = 0; m < u.nodes(); ++m) {
                    std::size_t f = std::size_t(k) * u.nodes() + m;
                    out.values[f] += co.A(m, i, j) * d[f];
                }
        }
    }
    return out;
}

inline Field apply_L(const SampledCoefficients& co, const Field& u, const fd::DiffOptions& opt = {})
{
    Field out = apply_L0(co, u, opt);
    const auto shape = fd::spacetime_shape(*u.grid);
    for (int j = 0; j < co.n; ++j) {
        auto d = fd::diff(u.values, shape, j, 1, u.grid->h[j], opt);
        for (int k = 0; k < u.levels(); ++k)
            for (std::size_t m = 0; m < u.nodes(); ++m) {
                std::size_t f = std::size_t(k) * u.nodes() + m;
                out.values[f] += co.B(m, j) * d[f];
            }
    }
    for (int k = 0; k < u.levels(); ++k)
        for (std::size_t m = 0; m < u.nodes(); ++m) out.at(m, k) += co.C(m) * u.at(m, k);
    return out;
}

inline Field apply_L0(const EllipticCoefficients& co, const Field& u)
{
    return apply_L0(sample_coefficients(co, u.grid), u);
}

inline Field apply_L(const EllipticCoefficients& co, const Field& u)
{
    return apply_L(sample_coefficients(co, u.grid), u);
}

/** @brief Weighted neighbors of a node: the entries of one matrix row. */
using Stencil = std::vector<std::pair<std::size_t, double>>;

/**
 * @brief Central second-order stencil of sum a^{ij} D_ij + sum b_j D_j + c at an interior node.
 *
 * a is n*n row-major, b has n entries. Mixed terms use the 4-point cross.
 */
inline Stencil operator_stencil(const SpaceTimeGrid& g, std::size_t node, const double* a, const double* b, double c)
{
    const int n = g.dim();
    Stencil st;
    st.reserve(std::size_t(1 + 2 * n + 4 * n * (n - 1) / 2));
    double diag = c;
    for (int i = 0; i < n; ++i) {
        const double hi = g.h[i];
        const double aii = a[i * n + i] / (hi * hi);
        const double bi = b ? b[i] / (2.0 * hi) : 0.0;
        long p = g.neighbor(node, i, 1), m = g.neighbor(node, i, -1);
        if (p < 0 || m < 0) throw StencilError("operator stencil at a box edge");
        st.emplace_back(std::size_t(p), aii + bi);
        st.emplace_back(std::size_t(m), aii - bi);
        diag -= 2.0 * aii;
        for (int j = i + 1; j < n; ++j) {
            const double w = (a[i * n + j] + a[j * n + i]) / (4.0 * hi * g.h[j]);
            if (w == 0.0) continue;
            for (int si : {1, -1})
                for (int sj : {1, -1}) {
                    long q = g.neighbor(node, i, si);
                    q = q < 0 ? -1 : g.neighbor(std::size_t(q), j, sj);
                    if (q < 0) throw StencilError("operator stencil at a box edge");
                    st.emplace_back(std::size_t(q), si * sj * w);
                }
        }
    }
    st.emplace_back(node, diag);
    return st;
}

enum class DataBoundary { GammaOnly, FullLateral };

inline std::string to_string(DataBoundary b) { return b == DataBoundary::GammaOnly ? "GammaOnly" : "FullLateral"; }

/** @brief Nodes carrying lateral Cauchy data, in ascending order. */
inline std::vector<std::size_t> data_boundary_nodes(const SpaceTimeGrid& g, DataBoundary mode)
{
    std::vector<std::size_t> out;
    if (mode == DataBoundary::FullLateral && !g.domain.is_box())
        throw ValidationError("FullLateral data needs a prism or interval domain", "isp.boundary");
    for (std::size_t k : g.active_nodes()) {
        TagKind t = g.tag(k).kind;
        if (t == TagKind::Gamma || (mode == DataBoundary::FullLateral && t != TagKind::Interior)) out.push_back(k);
    }
    return out;
}

/** @brief Outward normal derivative on every trace node and level. */
inline Trace normal_trace(const Field& u, const std::vector<std::size_t>& nodes)
{
    const auto& g = *u.grid;
    Trace q(nodes, g.nt);
    for (int k = 0; k < g.nt; ++k) {
        auto s = u.slice(k);
        for (std::size_t j = 0; j < nodes.size(); ++j) {
            auto [axis, sign] = fd::outward_normal(g.tag(nodes[j]));
            q.at(j, k) = fd::normal_derivative(s, g, nodes[j], axis, sign);
        }
    }
    return q;
}

inline Trace restrict_trace(const Field& u, const std::vector<std::size_t>& nodes)
{
    Trace p(nodes, u.levels());
    for (int k = 0; k < u.levels(); ++k)
        for (std::size_t j = 0; j < nodes.size(); ++j) p.at(j, k) = u.at(nodes[j], k);
    return p;
}

inline void check_positivity(const Field& R, double sigma)
{
    if (!(sigma > 0.0)) throw ValidationError("sigma must be positive", "isp.sigma");
    for (int k = 0; k < R.levels(); ++k)
        for (std::size_t m : R.grid->active_nodes())
            if (!(std::abs(R.at(m, k)) >= sigma))
                throw PositivityError("|R| = " + std::to_string(std::abs(R.at(m, k))) + " below sigma at node " +
                                          std::to_string(m) + ", level " + std::to_string(k),
                                      "isp.sigma");
}

struct ForwardOptions {
    DataBoundary data_boundary = DataBoundary::GammaOnly;
    double sigma = 1e-3;
    // Backward Euler steps per grid time step; R is interpolated linearly in between.
    int substeps = 1;
};

struct ForwardResult {
    Field u;
    SpatialField F;
    Trace p, q;
};

/**
 * @brief Solve u_t = L u + b R with u(.,0) = f and Dirichlet data on the lateral boundary.
 *
 * Backward Euler in time, central differences in space, one sparse LU factorization reused for
 * every step. Returns u, F = u(.,T) and the Cauchy traces on the data boundary.
 */
inline ForwardResult forward_solve(const SampledCoefficients& co, const SpatialField& b, const Field& R,
                                   const SpatialField& f, const SpaceTimeFn& dirichlet,
                                   const ForwardOptions& opt = {})
{
    const GridPtr gp = R.grid;
    const auto& g = *gp;
    check_positivity(R, opt.sigma);
    if (opt.substeps < 1) throw ValidationError("substeps must be >= 1", "isp.forward_substeps");

    std::vector<long> col(g.num_nodes(), -1);
    std::vector<std::size_t> unknowns;
    for (std::size_t k : g.active_nodes())
        if (g.interior(k)) {
            col[k] = long(unknowns.size());
            unknowns.push_back(k);
        }
    const double tau = g.dt / opt.substeps;

    // Rows hold (I/tau - L_h) restricted to interior nodes; boundary columns go to the rhs.
    std::vector<Eigen::Triplet<double>> trip;
    std::vector<Stencil> boundary_part(unknowns.size());
    for (std::size_t r = 0; r < unknowns.size(); ++r) {
        std::size_t m = unknowns[r];
        Stencil st = operator_stencil(g, m, co.a_ptr(m), co.b_ptr(m), co.C(m));
        trip.emplace_back(long(r), long(r), 1.0 / tau);
        for (auto [node, w] : st) {
            if (col[node] >= 0) trip.emplace_back(long(r), col[node], -w);
            else boundary_part[r].emplace_back(node, w);
        }
    }
    Eigen::SparseMatrix<double> A(long(unknowns.size()), long(unknowns.size()));
    A.setFromTriplets(trip.begin(), trip.end());
    A.makeCompressed();
    Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
    lu.compute(A);
    if (lu.info() != Eigen::Success) throw SolverError("sparse LU factorization failed", NAN);

    ForwardResult res;
    res.u = Field(gp);
    std::vector<double> cur(g.num_nodes(), 0.0);
    for (std::size_t k : g.active_nodes()) cur[k] = f[k];
    std::copy(cur.begin(), cur.end(), res.u.slice(0).begin());

    Eigen::VectorXd rhs(long(unknowns.size())), x;
    for (int k = 0; k + 1 < g.nt; ++k) {
        for (int s = 1; s <= opt.substeps; ++s) {
            const double theta = double(s) / opt.substeps;
            const double t = g.time(k) + theta * g.dt;
            for (std::size_t m : g.active_nodes())
                if (!g.interior(m)) cur[m] = dirichlet(g.coords(m), t);
            for (std::size_t r = 0; r < unknowns.size(); ++r) {
                std::size_t m = unknowns[r];
                double Rm = (1.0 - theta) * R.at(m, k) + theta * R.at(m, k + 1);
                double v = cur[m] / tau + b[m] * Rm;
                for (auto [node, w] : boundary_part[r]) v += w * cur[node];
                rhs[long(r)] = v;
            }
            x = lu.solve(rhs);
            double rel = (A * x - rhs).norm() / std::max(rhs.norm(), 1e-300);
            if (lu.info() != Eigen::Success || !(rel < 1e-8))
                throw SolverError("implicit step did not converge", rel);
            for (std::size_t r = 0; r < unknowns.size(); ++r) cur[unknowns[r]] = x[long(r)];
        }
        std::copy(cur.begin(), cur.end(), res.u.slice(k + 1).begin());
    }

    res.F = res.u.slice_field(g.nt - 1);
    auto nodes = data_boundary_nodes(g, opt.data_boundary);
    res.p = restrict_trace(res.u, nodes);
    res.q = normal_trace(res.u, nodes);
    return res;
}

}  // namespace carleman
