#pragma once

#include <carleman/isp.hpp>

#include <json.hpp>

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace carleman {

using Json = nlohmann::json;

struct DomainConfig {
    std::string kind = "interval";  // interval, prism, paraboloid, paraboloid_eps
    int dim = 1;
    double a = 0.0, b = 1.0;
    double eps = 0.1;

    Domain build() const
    {
        if (kind == "interval") return Domain::interval(a, b);
        if (kind == "prism") return Domain::prism(dim);
        if (kind == "paraboloid") return Domain::paraboloid(dim);
        return Domain::paraboloid_eps(dim, eps);
    }
};

struct GridConfig {
    int resolution = 33;
    double T = 1.0;
    int nt = 33;
};

struct CoefficientConfig {
    std::string preset = "variable_a";  // laplacian, variable_a, full_lower_order
    double kappa = 1.0, gamma = 0.5, beta = 0.1, b0 = 0.5, c0 = -1.0;
    std::string csv;  // optional table, overrides the preset

    EllipticCoefficients build(int n) const
    {
        if (preset == "laplacian") return EllipticCoefficients::laplacian(n, kappa);
        if (preset == "variable_a") return EllipticCoefficients::variable_a(n, kappa, gamma, beta);
        return EllipticCoefficients::full_lower_order(n, kappa, gamma, beta, b0, c0);
    }

    SampledCoefficients sample(const GridPtr& g) const
    {
        return csv.empty() ? sample_coefficients(build(g->dim()), g) : load_coefficients_csv(csv, g);
    }
};

struct CarlemanConfig {
    std::vector<double> lambdas{1, 2, 4, 8, 16, 32, 64};
    double mu = 2.0;
    double margin_floor = 0.5;
    double bump_shift = 0.0;
};

/** @brief Source truth b(x): shift + amplitude * sin(2 pi frequency (x1 - lo) / L), a constant or a Gaussian. */
struct SourceConfig {
    std::string preset = "sine";  // sine, constant, gaussian
    double shift = 2.0, amplitude = 1.0, frequency = 1.0;
    double center = 0.5, width = 0.2;  // gaussian, as fractions of the x1 extent

    SpaceFn build(const SpaceTimeGrid& g) const
    {
        const double lo = g.lo[0], len = g.h[0] * (g.shape[0] - 1);
        const double pi = std::acos(-1.0);
        const SourceConfig s = *this;
        if (preset == "constant") return [s](const Point&) { return s.shift; };
        if (preset == "gaussian")
            return [s, lo, len](const Point& x) {
                const double z = ((x[0] - lo) / len - s.center) / s.width;
                return s.shift + s.amplitude * std::exp(-z * z);
            };
        return [s, lo, len, pi](const Point& x) {
            return s.shift + s.amplitude * std::sin(2.0 * pi * s.frequency * (x[0] - lo) / len);
        };
    }
};

/**
 * @brief R(x,t). "manufactured" derives R from a fixed analytic solution so that the data are
 * exact; the other presets prescribe R and generate data with the forward solver.
 */
struct RConfig {
    std::string preset = "manufactured";  // manufactured, constant, exp_decay, smooth
    double value = 1.0, rate = 1.0;

    SpaceTimeFn build() const
    {
        const RConfig r = *this;
        if (preset == "constant") return [r](const Point&, double) { return r.value; };
        if (preset == "exp_decay") return [r](const Point&, double t) { return r.value * std::exp(-r.rate * t); };
        return [r](const Point& x, double t) {
            return r.value * (1.0 + 0.25 * std::sin(3.0 * x[0]) * std::exp(-r.rate * t));
        };
    }
};

struct ISPConfig {
    RConfig R;
    SourceConfig b;
    double sigma = 1e-3;
    DataBoundary boundary = DataBoundary::FullLateral;
    bool discrepancy = true;
    double alpha = 1e-6;
    double tau = 1.5;
    std::vector<double> alpha_grid{1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10};
    double lambda = 2.0, mu = 1.0;
    double neumann_weight = 1.0;
    double delta = 0.0;
    std::vector<double> deltas{1e-4, 3e-4, 1e-3, 3e-3, 1e-2};
    std::uint64_t seed = 1;
    int seeds = 5;
    double eps = 0.1;  // G_eps for errors with Gamma-only data
    int forward_substeps = 4;
    Preconditioner preconditioner = Preconditioner::Cholesky;
    double pcg_tol = 1e-10;
    int pcg_max_iter = 5000;

    QROptions qr_options() const
    {
        QROptions o;
        o.alpha = alpha;
        o.lambda = lambda;
        o.mu = mu;
        o.neumann_weight = neumann_weight;
        o.preconditioner = preconditioner;
        o.pcg.tol = pcg_tol;
        o.pcg.max_iter = pcg_max_iter;
        return o;
    }

    AlphaRule alpha_rule() const
    {
        AlphaRule r;
        r.discrepancy = discrepancy;
        r.fixed = alpha;
        r.grid = alpha_grid;
        r.tau = tau;
        return r;
    }
};

struct ExperimentConfig {
    DomainConfig domain;
    GridConfig grid;
    CoefficientConfig coefficients;
    CarlemanConfig carleman;
    ISPConfig isp;
    std::string output = "out";
    Json source;  // effective configuration, used for the hash

    GridPtr make_grid() const { return carleman::make_grid(domain.build(), grid.resolution, grid.T, grid.nt); }
};

namespace detail {

// Typed access to one JSON object; remembers the keys read so unknown keys can be rejected.
class Section {
public:
    Section(const Json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) throw ConfigError("expected an object", path_.empty() ? "<root>" : path_);
    }

    std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
    bool has(const std::string& k) const { return j_.contains(k); }

    template <class T>
    void get(const std::string& k, T& out)
    {
        seen_.insert(k);
        if (!j_.contains(k)) return;
        const Json& v = j_.at(k);
        if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError("expected a string", key(k));
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError("expected a boolean", key(k));
        } else if constexpr (std::is_unsigned_v<T>) {
            if (!v.is_number_unsigned()) throw ConfigError("expected a non-negative integer", key(k));
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError("expected an integer", key(k));
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError("expected a number", key(k));
        } else {
            if (!v.is_array()) throw ConfigError("expected an array of numbers", key(k));
            for (const auto& e : v)
                if (!e.is_number()) throw ConfigError("expected an array of numbers", key(k));
        }
        out = v.get<T>();
    }

    Section sub(const std::string& k)
    {
        seen_.insert(k);
        static const Json empty = Json::object();
        return Section(j_.contains(k) ? j_.at(k) : empty, key(k));
    }

    void reject_unknown() const
    {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("unknown key", key(it.key()));
    }

private:
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& what, const std::string& key)
{
    if (!ok) throw ValidationError(what, key);
}

inline void require_one_of(const std::string& v, std::initializer_list<const char*> allowed, const std::string& key)
{
    std::string list;
    for (const char* a : allowed) {
        if (v == a) return;
        list += list.empty() ? a : std::string(", ") + a;
    }
    throw ValidationError("'" + v + "' is not one of " + list, key);
}

}  // namespace detail

/**
 * @brief Read an experiment from JSON. Type errors and unknown keys throw ConfigError; values
 * out of range throw ValidationError. Both name the offending key.
 */
inline ExperimentConfig parse_config(const Json& j)
{
    using detail::require;
    ExperimentConfig c;
    detail::Section root(j, "");

    auto d = root.sub("domain");
    d.get("kind", c.domain.kind);
    d.get("dim", c.domain.dim);
    d.get("a", c.domain.a);
    d.get("b", c.domain.b);
    d.get("eps", c.domain.eps);
    d.reject_unknown();

    auto g = root.sub("grid");
    g.get("resolution", c.grid.resolution);
    g.get("T", c.grid.T);
    g.get("nt", c.grid.nt);
    g.reject_unknown();

    auto co = root.sub("coefficients");
    co.get("preset", c.coefficients.preset);
    co.get("kappa", c.coefficients.kappa);
    co.get("gamma", c.coefficients.gamma);
    co.get("beta", c.coefficients.beta);
    co.get("b0", c.coefficients.b0);
    co.get("c0", c.coefficients.c0);
    co.get("csv", c.coefficients.csv);
    co.reject_unknown();

    auto cw = root.sub("carleman");
    if (cw.has("lambda") && cw.has("lambda_sweep"))
        throw ConfigError("give either lambda or lambda_sweep", "carleman.lambda");
    if (cw.has("lambda")) {
        double l = 0.0;
        cw.get("lambda", l);
        c.carleman.lambdas = {l};
    }
    cw.get("lambda_sweep", c.carleman.lambdas);
    cw.get("mu", c.carleman.mu);
    cw.get("margin_floor", c.carleman.margin_floor);
    cw.get("bump_shift", c.carleman.bump_shift);
    cw.reject_unknown();

    auto isp = root.sub("isp");
    auto r = isp.sub("R");
    r.get("preset", c.isp.R.preset);
    r.get("value", c.isp.R.value);
    r.get("rate", c.isp.R.rate);
    r.reject_unknown();
    auto b = isp.sub("b");
    b.get("preset", c.isp.b.preset);
    b.get("shift", c.isp.b.shift);
    b.get("amplitude", c.isp.b.amplitude);
    b.get("frequency", c.isp.b.frequency);
    b.get("center", c.isp.b.center);
    b.get("width", c.isp.b.width);
    b.reject_unknown();
    isp.get("sigma", c.isp.sigma);
    std::string boundary = to_string(c.isp.boundary);
    isp.get("boundary", boundary);
    detail::require_one_of(boundary, {"GammaOnly", "FullLateral"}, "isp.boundary");
    c.isp.boundary = boundary == "GammaOnly" ? DataBoundary::GammaOnly : DataBoundary::FullLateral;
    std::string rule = "discrepancy";
    if (isp.has("alpha") && !isp.has("alpha_rule")) rule = "fixed";
    isp.get("alpha_rule", rule);
    detail::require_one_of(rule, {"discrepancy", "fixed"}, "isp.alpha_rule");
    c.isp.discrepancy = rule == "discrepancy";
    isp.get("alpha", c.isp.alpha);
    isp.get("alpha_grid", c.isp.alpha_grid);
    isp.get("tau", c.isp.tau);
    isp.get("lambda", c.isp.lambda);
    isp.get("mu", c.isp.mu);
    isp.get("neumann_weight", c.isp.neumann_weight);
    isp.get("delta", c.isp.delta);
    isp.get("deltas", c.isp.deltas);
    isp.get("seed", c.isp.seed);
    isp.get("seeds", c.isp.seeds);
    isp.get("eps", c.isp.eps);
    isp.get("forward_substeps", c.isp.forward_substeps);
    std::string pre = to_string(c.isp.preconditioner);
    isp.get("preconditioner", pre);
    c.isp.preconditioner = parse_preconditioner(pre);
    isp.get("pcg_tol", c.isp.pcg_tol);
    isp.get("pcg_max_iter", c.isp.pcg_max_iter);
    isp.reject_unknown();

    root.get("output", c.output);
    root.reject_unknown();

    // Ranges and presets.
    detail::require_one_of(c.domain.kind, {"interval", "prism", "paraboloid", "paraboloid_eps"}, "domain.kind");
    require(c.domain.dim >= 1 && c.domain.dim <= 3, "dim must be 1, 2 or 3", "domain.dim");
    require(c.domain.kind != "interval" || c.domain.dim == 1, "an interval is one-dimensional", "domain.dim");
    require(c.grid.resolution >= 5, "resolution must be >= 5", "grid.resolution");
    require(c.grid.nt >= 2, "nt must be >= 2", "grid.nt");
    require(c.grid.T > 0.0, "T must be positive", "grid.T");
    detail::require_one_of(c.coefficients.preset, {"laplacian", "variable_a", "full_lower_order"},
                           "coefficients.preset");
    require(c.coefficients.kappa > 0.0, "kappa must be positive", "coefficients.kappa");
    require(!c.carleman.lambdas.empty(), "lambda sweep is empty", "carleman.lambda_sweep");
    for (double l : c.carleman.lambdas) require(l >= 1.0, "lambda must be >= 1", "carleman.lambda");
    require(c.carleman.mu >= 1.0, "mu must be >= 1", "carleman.mu");
    require(c.carleman.bump_shift >= -1.0 && c.carleman.bump_shift <= 1.0, "bump_shift must lie in [-1, 1]",
            "carleman.bump_shift");
    detail::require_one_of(c.isp.R.preset, {"manufactured", "constant", "exp_decay", "smooth"}, "isp.R.preset");
    detail::require_one_of(c.isp.b.preset, {"sine", "constant", "gaussian"}, "isp.b.preset");
    require(c.isp.b.width > 0.0, "width must be positive", "isp.b.width");
    require(c.isp.sigma > 0.0, "sigma must be positive", "isp.sigma");
    require(c.isp.alpha >= 0.0, "alpha must be non-negative", "isp.alpha");
    require(!c.isp.alpha_grid.empty(), "alpha grid is empty", "isp.alpha_grid");
    for (double a : c.isp.alpha_grid) require(a > 0.0, "alpha grid entries must be positive", "isp.alpha_grid");
    require(c.isp.tau >= 1.0, "tau must be >= 1", "isp.tau");
    require(c.isp.lambda >= 1.0, "lambda must be >= 1", "isp.lambda");
    require(c.isp.mu >= 1.0, "mu must be >= 1", "isp.mu");
    require(c.isp.neumann_weight > 0.0, "neumann_weight must be positive", "isp.neumann_weight");
    require(c.isp.delta >= 0.0, "delta must be non-negative", "isp.delta");
    require(!c.isp.deltas.empty(), "deltas are empty", "isp.deltas");
    for (std::size_t i = 0; i < c.isp.deltas.size(); ++i)
        require(c.isp.deltas[i] > 0.0 && (i == 0 || c.isp.deltas[i] > c.isp.deltas[i - 1]),
                "deltas must be positive and increasing", "isp.deltas");
    require(c.isp.seeds >= 1, "seeds must be >= 1", "isp.seeds");
    require(c.isp.eps > 0.0 && c.isp.eps < 0.5, "eps must lie in (0, 1/2)", "isp.eps");
    require(c.isp.forward_substeps >= 1, "forward_substeps must be >= 1", "isp.forward_substeps");
    require(c.isp.pcg_tol > 0.0, "pcg_tol must be positive", "isp.pcg_tol");
    require(c.isp.pcg_max_iter >= 1, "pcg_max_iter must be >= 1", "isp.pcg_max_iter");
    require(!c.output.empty(), "output directory is empty", "output");

    c.source = j;
    return c;
}

/** @brief Parse JSON text; syntax errors become ConfigError. */
inline ExperimentConfig parse_config_text(const std::string& text)
{
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw ConfigError(std::string("invalid JSON: ") + e.what(), "<root>");
    }
    return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path, "--config");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

/** @brief Replace the seed in both the parsed config and the hashed source. */
inline void override_seed(ExperimentConfig& c, std::uint64_t seed)
{
    c.isp.seed = seed;
    c.source["isp"]["seed"] = seed;
}

/** @brief The synthetic inverse problem described by a config. */
struct Problem {
    GridPtr grid;
    SampledCoefficients co;
    ISPData data;
    SpatialField b;
    Field u;
};

/**
 * @brief Build coefficients, truth and data. The manufactured preset samples an analytic
 * solution; the others run the forward solver from f = 1 + cos(pi x1)/4 with matching Dirichlet
 * values.
 */
inline Problem make_problem(const ExperimentConfig& c)
{
    Problem p;
    p.grid = c.make_grid();
    const SpaceFn b = c.isp.b.build(*p.grid);
    if (c.isp.R.preset == "manufactured") {
        if (!c.coefficients.csv.empty())
            throw ValidationError("the manufactured preset needs analytic coefficients", "coefficients.csv");
        auto mp = manufactured_problem(p.grid, c.coefficients.build(p.grid->dim()), b, c.isp.boundary, c.isp.sigma);
        p.co = std::move(mp.co);
        p.data = std::move(mp.data);
        p.b = std::move(mp.b);
        p.u = std::move(mp.u);
        return p;
    }
    p.co = c.coefficients.sample(p.grid);
    p.b = sample(p.grid, b);
    mask_inactive(p.b);
    Field R = sample(p.grid, c.isp.R.build());
    const double pi = std::acos(-1.0);
    auto f0 = [pi](const Point& x, double) { return 1.0 + 0.25 * std::cos(pi * x[0]); };
    SpatialField f = sample(p.grid, SpaceFn([&](const Point& x) { return f0(x, 0.0); }));
    mask_inactive(f);
    ForwardOptions fo;
    fo.data_boundary = c.isp.boundary;
    fo.sigma = c.isp.sigma;
    fo.substeps = c.isp.forward_substeps;
    ForwardResult fr = forward_solve(p.co, p.b, R, f, f0, fo);
    p.u = fr.u;
    p.data.grid = p.grid;
    p.data.f = f;
    p.data.F = fr.F;
    p.data.p = fr.p;
    p.data.q = fr.q;
    p.data.R = R;
    p.data.sigma = c.isp.sigma;
    p.data.data_boundary = c.isp.boundary;
    return p;
}

/** @brief Nodes where reconstruction errors are measured: all of G, or G_eps for Gamma-only data. */
inline std::vector<std::size_t> error_region(const ExperimentConfig& c, const SpaceTimeGrid& g)
{
    if (c.isp.boundary == DataBoundary::FullLateral || g.domain.is_box()) return g.active_nodes();
    return region_nodes(g, Domain::paraboloid_eps(g.dim(), c.isp.eps));
}

/** @brief 64-bit FNV-1a of the canonical (sorted-key, compact) JSON text, as 16 hex digits. */
inline std::string config_hash(const Json& j)
{
    const std::string s = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
}

/** @brief Shortest round-trip form is not required; 17 significant digits always round-trip. */
inline std::string format_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/** @brief CSV with a leading "# config_hash=..." line and a header row. */
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::string& hash, const std::vector<std::string>& columns)
        : out_(path), columns_(columns.size())
    {
        if (!out_) throw Error("cannot write " + path, path);
        out_ << "# config_hash=" << hash << "\n";
        for (std::size_t i = 0; i < columns.size(); ++i) out_ << (i ? "," : "") << columns[i];
        out_ << "\n";
    }

    void row(const std::vector<double>& values)
    {
        if (values.size() != columns_) throw DimensionError("CSV row has the wrong number of columns");
        for (std::size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << format_double(values[i]);
        out_ << "\n";
    }

private:
    std::ofstream out_;
    std::size_t columns_;
};

}  // namespace carleman
