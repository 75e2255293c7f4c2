#include <carleman/config.hpp>

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

using namespace carleman;

namespace {

template <class E>
std::string error_key(const std::string& text)
{
    try {
        parse_config_text(text);
    } catch (const E& e) {
        return e.key();
    }
    return "<no error>";
}

}  // namespace

TEST(Config, Defaults)
{
    auto c = parse_config_text("{}");
    EXPECT_EQ(c.domain.kind, "interval");
    EXPECT_EQ(c.grid.resolution, 33);
    EXPECT_EQ(c.carleman.lambdas.size(), 7u);
    EXPECT_EQ(c.isp.boundary, DataBoundary::FullLateral);
    EXPECT_TRUE(c.isp.discrepancy);
    EXPECT_EQ(c.isp.qr_options().lambda, 2.0);
    EXPECT_EQ(c.isp.deltas.size(), 5u);
}

TEST(Config, ReadsEverySection)
{
    auto c = parse_config_text(R"({
        "domain": {"kind": "paraboloid_eps", "dim": 2, "eps": 0.2},
        "grid": {"resolution": 9, "T": 0.5, "nt": 5},
        "coefficients": {"preset": "full_lower_order", "c0": -2.0},
        "carleman": {"lambda": 3, "mu": 1.5},
        "isp": {"boundary": "GammaOnly", "alpha": 1e-4, "seed": 9, "preconditioner": "jacobi",
                "b": {"preset": "gaussian", "width": 0.1}, "R": {"preset": "exp_decay", "rate": 2}},
        "output": "runs/a"
    })");
    EXPECT_EQ(c.domain.build().kind, DomainKind::ParaboloidGEps);
    EXPECT_DOUBLE_EQ(c.domain.build().eps, 0.2);
    EXPECT_EQ(c.carleman.lambdas, std::vector<double>{3.0});
    EXPECT_FALSE(c.isp.discrepancy);  // a bare alpha means a fixed alpha
    EXPECT_EQ(c.isp.alpha_rule().fixed, 1e-4);
    EXPECT_EQ(c.isp.preconditioner, Preconditioner::Jacobi);
    EXPECT_EQ(c.isp.seed, 9u);
    EXPECT_EQ(c.coefficients.build(2).name, "full_lower_order");
    auto R = c.isp.R.build();
    EXPECT_NEAR(R(Point::Zero(2), 1.0), std::exp(-2.0), 1e-15);
}

TEST(Config, ParseErrorsNameTheKey)
{
    EXPECT_EQ(error_key<ConfigError>(R"({"grid": {"resolution": "many"}})"), "grid.resolution");
    EXPECT_EQ(error_key<ConfigError>(R"({"isp": {"sigmaa": 1}})"), "isp.sigmaa");
    EXPECT_EQ(error_key<ConfigError>(R"({"isp": {"seed": -1}})"), "isp.seed");
    EXPECT_EQ(error_key<ConfigError>(R"({"isp": {"deltas": [1, "x"]}})"), "isp.deltas");
    EXPECT_EQ(error_key<ConfigError>(R"({"carleman": {"lambda": 2, "lambda_sweep": [1]}})"), "carleman.lambda");
    EXPECT_EQ(error_key<ConfigError>(R"({"isp": {"preconditioner": "ilu"}})"), "solver.preconditioner");
    EXPECT_EQ(error_key<ConfigError>("{\"grid\": "), "<root>");
    EXPECT_EQ(error_key<ConfigError>("[1, 2]"), "<root>");
}

TEST(Config, ValidationErrorsNameTheKey)
{
    EXPECT_EQ(error_key<ValidationError>(R"({"isp": {"sigma": 0}})"), "isp.sigma");
    EXPECT_EQ(error_key<ValidationError>(R"({"grid": {"T": -1}})"), "grid.T");
    EXPECT_EQ(error_key<ValidationError>(R"({"carleman": {"mu": 0.5}})"), "carleman.mu");
    EXPECT_EQ(error_key<ValidationError>(R"({"carleman": {"lambda_sweep": [4, 0.5]}})"), "carleman.lambda");
    EXPECT_EQ(error_key<ValidationError>(R"({"isp": {"deltas": [1e-3, 1e-4]}})"), "isp.deltas");
    EXPECT_EQ(error_key<ValidationError>(R"({"isp": {"boundary": "Everywhere"}})"), "isp.boundary");
    EXPECT_EQ(error_key<ValidationError>(R"({"coefficients": {"preset": "heat"}})"), "coefficients.preset");
    EXPECT_EQ(error_key<ValidationError>(R"({"domain": {"kind": "interval", "dim": 2}})"), "domain.dim");
}

TEST(Config, HashIsCanonical)
{
    auto a = parse_config_text(R"({"grid": {"nt": 9, "resolution": 17}, "isp": {"seed": 3}})");
    auto b = parse_config_text(R"({"isp": {"seed": 3}, "grid": {"resolution": 17, "nt": 9}})");
    EXPECT_EQ(config_hash(a.source), config_hash(b.source));
    EXPECT_EQ(config_hash(a.source).size(), 16u);
    override_seed(b, 4);
    EXPECT_EQ(b.isp.seed, 4u);
    EXPECT_NE(config_hash(a.source), config_hash(b.source));
    // FNV-1a 64 of the compact dump.
    EXPECT_EQ(config_hash(Json::object()), "08f44b07b5901a25");
    EXPECT_EQ(config_hash(Json::parse(R"({"isp": {"seed": 3}})")), "32f8b2dcd389e6bb");
}

TEST(Config, SeventeenDigitFloats)
{
    for (double v : {0.1, 1.0 / 3.0, 3e-4, -2.5e-300, 6.02214076e23}) EXPECT_EQ(std::stod(format_double(v)), v);
    EXPECT_EQ(format_double(0.1), "0.10000000000000001");
}

TEST(Config, CsvWriter)
{
    const auto path = (std::filesystem::temp_directory_path() / "carleman_config_test.csv").string();
    {
        CsvWriter w(path, "abc", {"delta", "error"});
        w.row({1e-3, 0.5});
        EXPECT_THROW(w.row({1.0}), DimensionError);
    }
    std::ifstream in(path);
    std::string l1, l2, l3;
    std::getline(in, l1);
    std::getline(in, l2);
    std::getline(in, l3);
    EXPECT_EQ(l1, "# config_hash=abc");
    EXPECT_EQ(l2, "delta,error");
    EXPECT_EQ(l3, "0.001,0.5");
    std::filesystem::remove(path);
}

TEST(Config, ProblemPresets)
{
    auto c = parse_config_text(R"({"grid": {"resolution": 17, "nt": 9}})");
    auto p = make_problem(c);
    EXPECT_EQ(p.data.p.count(), 2u);
    EXPECT_NEAR(p.b[8], 2.0, 1e-12);  // sin(pi) + 2 at the midpoint

    auto f = parse_config_text(R"({"grid": {"resolution": 17, "nt": 9}, "isp": {"R": {"preset": "smooth"}}})");
    auto q = make_problem(f);
    EXPECT_EQ(q.data.p.count(), 2u);
    for (std::size_t m = 0; m < q.grid->num_nodes(); ++m) EXPECT_EQ(q.data.f[m], q.u.at(m, 0));

    auto gamma = parse_config_text(
        R"({"domain": {"kind": "paraboloid"}, "grid": {"resolution": 21, "nt": 5}, "isp": {"boundary": "GammaOnly"}})");
    auto gp = gamma.make_grid();
    auto region = error_region(gamma, *gp);
    EXPECT_LT(region.size(), gp->active_nodes().size());
    for (std::size_t m : region) EXPECT_LT(gp->coords(m)[0], 0.4 + 1e-12);
}
