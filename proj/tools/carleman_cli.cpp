// Batch runner for the estimate checks and the inverse source problem.
//
//   carleman_cli <verify-carleman|forward|invert|sweep> --config exp.json [--out dir] [--seed n] [--quiet]
//
// Exit codes: 0 success, 1 unexpected failure, 2 config parse error, 3 validation error,
// 4 solver or overflow error. Failures print one JSON object on stdout.

#include <carleman/config.hpp>
#include <carleman/corpus.hpp>
#include <carleman/estimate.hpp>

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

using namespace carleman;
namespace fs = std::filesystem;

namespace {

struct Run {
    ExperimentConfig cfg;
    std::string hash;
    fs::path out;
    bool quiet = false;

    void log(const std::string& s) const
    {
        if (!quiet) std::cerr << s << "\n";
    }

    void write_json(const std::string& name, Json j) const
    {
        j["config_hash"] = hash;
        std::ofstream f(out / name);
        if (!f) throw Error("cannot write " + (out / name).string(), "--out");
        f << j.dump(2) << "\n";
        log("wrote " + (out / name).string());
    }

    fs::path file(const std::string& name) const { return out / name; }
};

std::vector<std::string> coordinate_columns(int n)
{
    if (n == 1) return {"x"};
    std::vector<std::string> c;
    for (int i = 1; i <= n; ++i) c.push_back("x" + std::to_string(i));
    return c;
}

Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

int verify_carleman(const Run& r)
{
    const auto& c = r.cfg;
    const GridPtr g = c.make_grid();
    const SampledCoefficients co = c.coefficients.sample(g);
    Field u = sample(g, space_time_bump(g->domain, g->T, c.carleman.bump_shift));
    mask_inactive(u);
    const auto reports = check_integrated_estimate(u, co, c.carleman.mu, c.carleman.lambdas);

    CsvWriter csv(r.file("carleman.csv").string(), r.hash,
                  {"lambda", "lhs_integral", "energy_bracket", "margin_ratio", "cancellation_defect"});
    Json rows = Json::array();
    double min_margin = std::numeric_limits<double>::infinity();
    for (const auto& e : reports) {
        csv.row({e.lambda, e.lhs_integral, e.energy_bracket, e.margin_ratio, e.cancellation_defect});
        rows.push_back({{"lambda", e.lambda}, {"log_scale", e.log_scale}});
        min_margin = std::min(min_margin, e.margin_ratio);
    }
    r.log("wrote " + r.file("carleman.csv").string());

    // Pointwise identity chain on a smooth corpus field at the first lambda.
    const auto corpus = smooth_corpus(g->dim());
    Field smooth = sample(g, corpus.back().fn());
    Json chain = Json::array();
    for (const auto& row : check_identity_chain(smooth, co, CarlemanWeight(c.carleman.lambdas.front(), c.carleman.mu)))
        chain.push_back({{"name", row.name},
                         {"exact", row.exact},
                         {"residual", row.residual},
                         {"fitted_constant", row.fitted_constant},
                         {"holds", row.holds}});

    const double floor = c.carleman.margin_floor;
    r.write_json("carleman.json", {{"mu", c.carleman.mu},
                                   {"margin_at_first_lambda", reports.front().margin_ratio},
                                   {"min_margin", min_margin},
                                   {"margin_floor", floor},
                                   {"smallest_lambda_above_floor", finite_or_null(smallest_lambda_above(reports, floor))},
                                   {"scales", rows},
                                   {"identity_chain", chain}});
    return 0;
}

int forward(const Run& r)
{
    const Problem p = make_problem(r.cfg);
    const auto& g = *p.grid;
    const int n = g.dim();
    auto cols = coordinate_columns(n);
    cols.insert(cols.end(), {"b", "f", "F"});
    CsvWriter fields(r.file("forward.csv").string(), r.hash, cols);
    for (std::size_t m : g.active_nodes()) {
        std::vector<double> row(g.coords_ptr(m), g.coords_ptr(m) + n);
        row.insert(row.end(), {p.b[m], p.data.f[m], p.data.F[m]});
        fields.row(row);
    }
    cols = coordinate_columns(n);
    cols.insert(cols.end(), {"t", "p", "q"});
    CsvWriter traces(r.file("traces.csv").string(), r.hash, cols);
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t j = 0; j < p.data.p.count(); ++j) {
            const std::size_t m = p.data.p.nodes[j];
            std::vector<double> row(g.coords_ptr(m), g.coords_ptr(m) + n);
            row.insert(row.end(), {g.time(k), p.data.p.at(j, k), p.data.q.at(j, k)});
            traces.row(row);
        }
    r.log("wrote " + r.file("forward.csv").string() + ", " + r.file("traces.csv").string());
    double umin = std::numeric_limits<double>::infinity(), umax = -umin;
    for (int k = 0; k < g.nt; ++k)
        for (std::size_t m : g.active_nodes()) {
            umin = std::min(umin, p.u.at(m, k));
            umax = std::max(umax, p.u.at(m, k));
        }
    r.write_json("forward.json", {{"R_preset", r.cfg.isp.R.preset},
                                  {"boundary", to_string(r.cfg.isp.boundary)},
                                  {"trace_nodes", p.data.p.count()},
                                  {"u_min", umin},
                                  {"u_max", umax}});
    return 0;
}

Json alpha_table(const InversionResult& inv)
{
    Json t = Json::array();
    for (auto [a, m] : inv.alpha_table) t.push_back({{"alpha", a}, {"misfit", m}});
    return t;
}

int invert_cmd(const Run& r)
{
    const auto& c = r.cfg;
    const Problem p = make_problem(c);
    const auto& g = *p.grid;
    const ISPData data = add_noise(p.data, c.isp.delta, c.isp.seed);
    const auto inv = invert(data, p.co, c.isp.qr_options(), c.isp.alpha_rule(), c.isp.delta);
    auto cols = coordinate_columns(g.dim());
    cols.insert(cols.end(), {"b_true", "b_hat"});
    CsvWriter csv(r.file("reconstruction.csv").string(), r.hash, cols);
    for (std::size_t m : g.active_nodes()) {
        std::vector<double> row(g.coords_ptr(m), g.coords_ptr(m) + g.dim());
        row.insert(row.end(), {p.b[m], inv.rec.b_hat[m]});
        csv.row(row);
    }
    r.log("wrote " + r.file("reconstruction.csv").string());
    const auto region = error_region(c, g);
    for (const auto& w : inv.rec.warnings) r.log("warning: " + w);
    r.write_json("reconstruction.json",
                 {{"alpha", inv.alpha},
                  {"alpha_rule", c.isp.discrepancy ? "discrepancy" : "fixed"},
                  {"alpha_table", alpha_table(inv)},
                  {"lambda", inv.rec.lambda_used},
                  {"mu", c.isp.mu},
                  {"delta", c.isp.delta},
                  {"seed", c.isp.seed},
                  {"boundary", to_string(c.isp.boundary)},
                  {"misfit", inv.misfit},
                  {"residual_norm", inv.rec.residual_norm},
                  {"pcg_iterations", inv.rec.iterations},
                  {"l2_error", l2_error(inv.rec.b_hat, p.b, region)},
                  {"relative_l2_error", l2_error(inv.rec.b_hat, p.b, region) / l2_norm(p.b, region)},
                  {"warnings", inv.rec.warnings}});
    return 0;
}

int sweep_cmd(const Run& r)
{
    const auto& c = r.cfg;
    const Problem p = make_problem(c);
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < c.isp.seeds; ++i) seeds.push_back(c.isp.seed + std::uint64_t(i));
    const auto sw = stability_sweep(p.data, p.co, p.b, c.isp.deltas, seeds, error_region(c, *p.grid),
                                    c.isp.qr_options(), c.isp.alpha_rule());
    CsvWriter csv(r.file("sweep.csv").string(), r.hash, {"delta", "error"});
    for (std::size_t i = 0; i < sw.deltas.size(); ++i) csv.row({sw.deltas[i], sw.errors[i]});
    r.log("wrote " + r.file("sweep.csv").string());
    r.write_json("sweep.json", {{"fitted_slope", sw.fitted_slope},
                                {"fitted_intercept", sw.fitted_intercept},
                                {"boundary", to_string(c.isp.boundary)},
                                {"lambda", c.isp.lambda},
                                {"mu", c.isp.mu},
                                {"seeds", seeds},
                                {"alphas", sw.alphas},
                                {"seed_errors", sw.seed_errors}});
    return 0;
}

int fail(int code, const char* category, const std::string& key, const std::string& message, Json extra = {})
{
    Json e = {{"category", category}, {"key", key}, {"message", message}, {"exit_code", code}};
    if (extra.is_object()) e.update(extra);
    std::cout << Json{{"error", e}}.dump() << std::endl;
    return code;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Carleman estimate checks and inverse source reconstruction"};
    app.require_subcommand(1);
    std::string config_path, out_dir;
    std::int64_t seed = -1;
    bool quiet = false;
    std::vector<CLI::App*> subs;
    for (const char* name : {"verify-carleman", "forward", "invert", "sweep"}) {
        auto* s = app.add_subcommand(name);
        s->add_option("--config", config_path, "experiment JSON")->required();
        s->add_option("--out", out_dir, "output directory (overrides the config)");
        s->add_option("--seed", seed, "noise seed (overrides isp.seed)")->check(CLI::NonNegativeNumber);
        s->add_flag("--quiet", quiet, "no progress output");
        subs.push_back(s);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return fail(2, "usage", "", e.what());
    }

    try {
        Run r;
        r.cfg = load_config(config_path);
        if (seed >= 0) override_seed(r.cfg, std::uint64_t(seed));
        r.hash = config_hash(r.cfg.source);
        r.out = out_dir.empty() ? fs::path(r.cfg.output) : fs::path(out_dir);
        r.quiet = quiet;
        fs::create_directories(r.out);
        const std::string cmd = app.get_subcommands().front()->get_name();
        r.log(cmd + ": config " + config_path + " (hash " + r.hash + ")");
        if (cmd == "verify-carleman") return verify_carleman(r);
        if (cmd == "forward") return forward(r);
        if (cmd == "invert") return invert_cmd(r);
        return sweep_cmd(r);
    } catch (const ConfigError& e) {
        return fail(2, e.category(), e.key(), e.what());
    } catch (const ValidationError& e) {
        return fail(3, e.category(), e.key(), e.what());
    } catch (const SolverError& e) {
        return fail(4, e.category(), e.key(), e.what(),
                    {{"residual", finite_or_null(e.residual())}, {"iterations", e.trace().size()}});
    } catch (const OverflowError& e) {
        return fail(4, e.category(), e.key(), e.what());
    } catch (const Error& e) {
        return fail(1, e.category(), e.key(), e.what());
    } catch (const std::exception& e) {
        return fail(1, "error", "", e.what());
    }
}
