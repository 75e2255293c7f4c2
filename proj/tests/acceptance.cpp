// End-to-end acceptance run. Prints one PASS/FAIL line per criterion with the measured values and
// exits nonzero if any criterion fails.

#include <carleman/config.hpp>
#include <carleman/corpus.hpp>
#include <carleman/estimate.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace carleman;

namespace {

const double kPi = std::acos(-1.0);
int failures = 0;

void report(int id, bool ok, const std::string& detail)
{
    std::printf("criterion %2d: %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Setup {
    GridPtr g;
    SampledCoefficients co;
};

Setup setup(int n, int res, double T = 0.1)
{
    Domain d = n == 1 ? Domain::interval(0.0, 0.25) : Domain::prism(n);
    auto g = make_grid(d, res, T, res);
    return {g, sample_coefficients(EllipticCoefficients::variable_a(n, 1.0, 0.5, 0.1), g)};
}

std::vector<int> ladder(int n) { return n == 1 ? std::vector<int>{17, 33, 65} : std::vector<int>{9, 17, 33}; }

void identity_chain()
{
    const auto t0 = std::chrono::steady_clock::now();
    double lo = 1e300, hi = 0.0;
    bool holds = true;
    for (int n : {1, 2})
        for (const auto& f : smooth_corpus(n)) {
            std::vector<std::vector<IdentityResidual>> tabs;
            for (int res : ladder(n)) {
                auto s = setup(n, res);
                tabs.push_back(check_identity_chain(sample(s.g, f.fn()), s.co, CarlemanWeight(2.0, 2.0)));
            }
            for (std::size_t r = 0; r < tabs[0].size(); ++r) {
                if (!tabs[0][r].exact) continue;
                for (int i = 0; i < 2; ++i) {
                    const double ratio = tabs[i][r].residual / tabs[i + 1][r].residual;
                    lo = std::min(lo, ratio);
                    hi = std::max(hi, ratio);
                }
            }
            for (const auto& r : tabs.back()) holds = holds && r.holds;
        }
    const double secs = seconds_since(t0);
    report(1, lo >= 3.4 && hi <= 4.6 && holds && secs < 30.0,
           "exact-row ratios in [" + fmt("%.3f", lo) + ", " + fmt("%.3f", hi) + "], inequality rows " +
               (holds ? "hold" : "violated") + ", " + fmt("%.1f s", secs));
}

void decomposition()
{
    double worst_fine = 0.0, worst_ratio = 1e300;
    for (int n : {1, 2})
        for (const auto& f : smooth_corpus(n)) {
            std::vector<double> err;
            for (int res : ladder(n)) {
                auto s = setup(n, res);
                CarlemanWeight cw(2.0, 2.0);
                Field u = sample(s.g, f.fn());
                auto t = decompose_terms(u, s.co, cw, WeightScaling::Normalized);
                auto wt = weight_table(*s.g, cw, WeightScaling::Normalized, 1);
                double e = 0.0, mx = 0.0;
                for (int k = 0; k < s.g->nt; ++k)
                    for (std::size_t m = 0; m < s.g->num_nodes(); ++m) {
                        const Point x = s.g->coords(m);
                        const double tt = s.g->time(k);
                        double L = 0.0;
                        for (int i = 0; i < n; ++i)
                            for (int j = 0; j < n; ++j) L += s.co.A(m, i, j) * f.dxx(x, tt, i, j);
                        const double ref = (f.dt(x, tt) - L) * wt.phi[m];
                        const double sum = t.s1.at(m, k) + t.s2.at(m, k) + t.s3.at(m, k) + t.s4.at(m, k);
                        e = std::max(e, std::abs(sum - ref));
                        mx = std::max(mx, std::abs(ref));
                    }
                err.push_back(e / mx);
            }
            worst_fine = std::max(worst_fine, err.back());
            if (err[0] < 1e-10) continue;  // differenced exactly
            for (int i = 0; i < 2; ++i) worst_ratio = std::min(worst_ratio, err[i] / err[i + 1]);
        }
    report(2, worst_fine <= 1e-3 && worst_ratio > 3.4,
           "finest relative residual " + fmt("%.2e", worst_fine) + ", smallest refinement ratio " +
               fmt("%.2f", worst_ratio));
}

void cancellation()
{
    auto s = setup(2, 17);
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> c(-1.0, 1.0);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const double a = c(rng), b = c(rng), d = c(rng), e = 1.0 + 4.0 * std::abs(c(rng));
        auto B = sample(s.g, [&](const Point& x) { return a + b * std::sin(e * x[0] + d) * std::cos(x[1] - d); });
        Field w(s.g);
        for (int k = 0; k < s.g->nt; ++k) {
            SpatialField sl = B;
            const double scale = k == 0 || k == s.g->nt - 1 ? 1.0 : 1.0 + c(rng);
            for (double& v : sl.values) v *= scale;
            w.set_slice(k, sl);
        }
        for (double lam : {1.0, 2.0, 8.0, 64.0})
            worst = std::max(worst, cancellation_defect(w, s.co, CarlemanWeight(lam, 2.0), WeightScaling::Normalized));
    }
    auto m = setup(2, 17, 0.5);
    const auto bump = space_time_bump(m.g->domain, 1.0);
    SpatialField B = sample(m.g, [&](const Point& x) { return bump(x, 0.5); });
    Field w = constant_in_time(B);
    SpatialField twice = B;
    for (double& v : twice.values) v *= 2.0;
    w.set_slice(m.g->nt - 1, twice);
    const double mismatch = cancellation_defect(w, m.co, CarlemanWeight(2.0, 2.0));
    report(3, worst <= 1e-12 && mismatch > 1e-6,
           "matching slices " + fmt("%.2e", worst) + ", mismatched slices " + fmt("%.2e", mismatch));
}

void gamma_pair()
{
    double worst = 0.0;
    for (int n : {1, 2, 3}) {
        auto s = setup(n, n == 3 ? 9 : 17);
        for (const auto& f : smooth_corpus(n)) {
            auto gf = gamma_flux(sample(s.g, f.fn()), s.co, CarlemanWeight(2.0, 2.0), WeightScaling::Normalized);
            for (double v : gf.pair11.values) worst = std::max(worst, std::abs(v) / gf.scale);
        }
    }
    report(4, worst <= 1e-12, "largest Gamma flux over scale " + fmt("%.2e", worst));
}

void margins()
{
    auto s = setup(2, 17, 0.5);
    Field u = sample(s.g, space_time_bump(s.g->domain, 0.5));
    auto reps = check_integrated_estimate(u, s.co, 2.0, {4, 8, 16, 32, 64});
    const double c4 = reps.front().margin_ratio;
    double lo = 1e300;
    for (const auto& r : reps) lo = std::min(lo, r.margin_ratio);
    report(5, c4 > 0.0 && lo >= 0.5 * c4,
           "margin(4) " + fmt("%.4f", c4) + ", min margin over lambda 4..64 " + fmt("%.4f", lo));
}

void forward()
{
    auto exact = [](const Point& x, double t) { return std::exp(t) * (std::sin(kPi * x[0]) + 1.0); };
    std::vector<double> err;
    for (int res : {17, 33, 65}) {
        const double h = 1.0 / (res - 1), T = 0.25;
        auto g = make_grid(Domain::interval(0.0, 1.0), res, T, int(std::lround(T / (h * h))) + 1);
        auto co = sample_coefficients(EllipticCoefficients::laplacian(1), g);
        Field R = sample(g, [](const Point& x, double t) {
            return std::exp(t) * ((1.0 + kPi * kPi) * std::sin(kPi * x[0]) + 1.0);
        });
        ForwardOptions opt;
        opt.data_boundary = DataBoundary::FullLateral;
        opt.sigma = 1.0;
        auto out = forward_solve(co, SpatialField(g, 1.0), R, sample(g, [&](const Point& x) { return exact(x, 0.0); }),
                                 exact, opt);
        double e = 0.0;
        for (int k = 0; k < g->nt; ++k)
            for (std::size_t m = 0; m < g->num_nodes(); ++m)
                e = std::max(e, std::abs(out.u.at(m, k) - exact(g->coords(m), g->time(k))));
        err.push_back(e);
    }
    const double r1 = err[0] / err[1], r2 = err[1] / err[2];

    const double sigma = 0.2;
    auto g = make_grid(Domain::prism(2), 17, 0.5, 21);
    auto lap = EllipticCoefficients::laplacian(2);
    lap.c = [](const Point& x) { return -1.0 - x[0]; };
    auto co = sample_coefficients(lap, g);
    SpatialField b = sample(g, [](const Point& x) { return 1.0 + 0.5 * std::sin(5 * x[1]); });
    Field R = sample(g, [](const Point& x, double t) { return 0.5 + x[0] + t; });
    SpatialField f = sample(g, [sigma](const Point& x) { return sigma + 3 * x[0] * std::abs(x[1]); });
    auto bc = [sigma](const Point& x, double t) { return sigma + 3 * x[0] * std::abs(x[1]) + t * x[0]; };
    ForwardOptions opt;
    opt.sigma = 0.1;
    auto out = forward_solve(co, b, R, f, bc, opt);
    double mn = 1e300;
    for (double v : out.u.values) mn = std::min(mn, v);
    report(6, r1 > 3.4 && r1 < 4.6 && r2 > 3.4 && r2 < 4.6 && mn >= sigma * (1 - 1e-8),
           "refinement ratios " + fmt("%.3f", r1) + ", " + fmt("%.3f", r2) + "; min u " + fmt("%.6f", mn) +
               " vs sigma " + fmt("%.2f", sigma));
}

ExperimentConfig interval_config(int res)
{
    std::ostringstream s;
    s << R"({"domain": {"kind": "interval", "a": 0, "b": 1},
             "grid": {"resolution": )"
      << res << R"(, "T": 1, "nt": )" << res << R"(},
             "coefficients": {"preset": "variable_a", "kappa": 1, "gamma": 0.5, "beta": 0.1},
             "isp": {"R": {"preset": "manufactured"}, "b": {"preset": "sine", "frequency": 1},
                     "boundary": "FullLateral", "alpha_rule": "discrepancy", "lambda": 2, "mu": 1}})";
    return parse_config_text(s.str());
}

void reconstruction()
{
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> rel;
    double t65 = 0.0;
    for (int res : {17, 33, 65}) {
        const auto t1 = std::chrono::steady_clock::now();
        const auto c = interval_config(res);
        const Problem p = make_problem(c);
        const auto inv = invert(p.data, p.co, c.isp.qr_options(), c.isp.alpha_rule(), 0.0);
        const auto region = error_region(c, *p.grid);
        rel.push_back(l2_error(inv.rec.b_hat, p.b, region) / l2_norm(p.b, region));
        if (res == 65) t65 = seconds_since(t1);
    }
    const double total = seconds_since(t0);
    report(7, rel[2] <= 0.05 && rel[0] > rel[1] && rel[1] > rel[2] && t65 < 120.0,
           "relative L2 error " + fmt("%.2e", rel[0]) + " / " + fmt("%.2e", rel[1]) + " / " + fmt("%.2e", rel[2]) +
               " at 17/33/65, 65x65 in " + fmt("%.1f s", t65) + " (all " + fmt("%.1f s", total) + ")");
}

std::vector<std::uint64_t> seeds_of(const ExperimentConfig& c)
{
    std::vector<std::uint64_t> s;
    for (int i = 0; i < c.isp.seeds; ++i) s.push_back(c.isp.seed + std::uint64_t(i));
    return s;
}

void sweep_full_lateral()
{
    const auto c = parse_config_text(R"({
        "domain": {"kind": "interval", "a": 0, "b": 1},
        "grid": {"resolution": 129, "T": 1, "nt": 33},
        "coefficients": {"preset": "variable_a"},
        "isp": {"R": {"preset": "manufactured"}, "b": {"preset": "sine"}, "boundary": "FullLateral",
                "alpha_rule": "discrepancy", "deltas": [1e-4, 3e-4, 1e-3, 3e-3, 1e-2], "seed": 1, "seeds": 5}})");
    const Problem p = make_problem(c);
    const auto t0 = std::chrono::steady_clock::now();
    const auto sw = stability_sweep(p.data, p.co, p.b, c.isp.deltas, seeds_of(c), error_region(c, *p.grid),
                                    c.isp.qr_options(), c.isp.alpha_rule());
    report(8, sw.fitted_slope >= 0.8 && sw.fitted_slope <= 1.2,
           "log-log slope " + fmt("%.4f", sw.fitted_slope) + " over 5 seeds, " + fmt("%.1f s", seconds_since(t0)));
}

void sweep_gamma_only()
{
    const auto c = parse_config_text(R"({
        "domain": {"kind": "paraboloid", "dim": 1},
        "grid": {"resolution": 129, "T": 1, "nt": 33},
        "coefficients": {"preset": "variable_a"},
        "isp": {"R": {"preset": "manufactured"}, "b": {"preset": "sine"}, "boundary": "GammaOnly", "eps": 0.1,
                "alpha_rule": "discrepancy", "lambda": 2, "deltas": [1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
                "seed": 1, "seeds": 5}})");
    const Problem p = make_problem(c);
    const auto& g = *p.grid;
    const auto near = error_region(c, g);
    auto sorted = near;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> far;
    for (std::size_t m : g.active_nodes())
        if (!std::binary_search(sorted.begin(), sorted.end(), m)) far.push_back(m);
    const auto t0 = std::chrono::steady_clock::now();
    const auto seeds = seeds_of(c);
    const auto sw = stability_sweep(p.data, p.co, p.b, c.isp.deltas, seeds, near, c.isp.qr_options(),
                                    c.isp.alpha_rule());
    double rn = 0.0, rf = 0.0;
    for (std::uint64_t s : seeds) {
        const auto inv = invert(add_noise(p.data, 1e-3, s), p.co, c.isp.qr_options(), c.isp.alpha_rule(), 1e-3);
        rn += rms_error(inv.rec.b_hat, p.b, near) / double(seeds.size());
        rf += rms_error(inv.rec.b_hat, p.b, far) / double(seeds.size());
    }
    report(9, sw.fitted_slope > 0.0 && sw.fitted_slope <= 1.0 && rn <= 0.5 * rf,
           "near-region slope " + fmt("%.4f", sw.fitted_slope) + "; at delta 1e-3 near RMS " + fmt("%.3e", rn) +
               ", far RMS " + fmt("%.3e", rf) + " (ratio " + fmt("%.3f", rn / rf) + "), " +
               fmt("%.1f s", seconds_since(t0)));
}

std::string slurp(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

void linearity_and_reproducibility()
{
    const auto c = interval_config(17);
    const Problem p = make_problem(c);
    auto d1 = add_noise(p.data, 0.01, 3), d2 = add_noise(p.data, 0.02, 4);
    ISPData sum = d1;
    auto combine = [](std::vector<double>& out, const std::vector<double>& a, const std::vector<double>& b) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2 * a[i] - 3 * b[i];
    };
    combine(sum.f.values, d1.f.values, d2.f.values);
    combine(sum.F.values, d1.F.values, d2.F.values);
    combine(sum.p.values, d1.p.values, d2.p.values);
    combine(sum.q.values, d1.q.values, d2.q.values);
    QROptions o = c.isp.qr_options();
    o.pcg.tol = 1e-13;
    const auto b1 = qr_solve(build_w_problem(d1, p.co), o).b_hat;
    const auto b2 = qr_solve(build_w_problem(d2, p.co), o).b_hat;
    const auto bs = qr_solve(build_w_problem(sum, p.co), o).b_hat;
    double lin = 0.0;
    for (std::size_t m = 0; m < bs.values.size(); ++m) lin = std::max(lin, std::abs(bs[m] - (2 * b1[m] - 3 * b2[m])));

    // Two identical sweeps written to CSV must agree byte for byte.
    const auto dir = std::filesystem::temp_directory_path();
    std::vector<std::string> files;
    for (int run = 0; run < 2; ++run) {
        const auto sw = stability_sweep(p.data, p.co, p.b, {1e-3, 1e-2}, {1, 2}, error_region(c, *p.grid),
                                        c.isp.qr_options(), c.isp.alpha_rule());
        const std::string path = (dir / ("carleman_acceptance_" + std::to_string(run) + ".csv")).string();
        {
            CsvWriter w(path, config_hash(c.source), {"delta", "error"});
            for (std::size_t i = 0; i < sw.deltas.size(); ++i) w.row({sw.deltas[i], sw.errors[i]});
        }
        files.push_back(slurp(path));
        std::filesystem::remove(path);
    }
    const bool same = !files[0].empty() && files[0] == files[1];
    report(10, lin <= 1e-8 && same,
           "superposition defect " + fmt("%.2e", lin) + ", rerun output " + (same ? "identical" : "differs"));
}

}  // namespace

int main()
{
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<void (*)()> checks{identity_chain, decomposition,   cancellation,       gamma_pair,
                                         margins,        forward,         reconstruction,     sweep_full_lateral,
                                         sweep_gamma_only, linearity_and_reproducibility};
    for (std::size_t i = 0; i < checks.size(); ++i) {
        try {
            checks[i]();
        } catch (const std::exception& e) {
            report(int(i) + 1, false, std::string("threw: ") + e.what());
        }
    }
    std::printf("%d of %zu criteria passed in %.1f s\n", int(checks.size()) - failures, checks.size(),
                seconds_since(t0));
    return failures == 0 ? 0 : 1;
}
