#include <carleman/weights.hpp>

#include <gtest/gtest.h>

#include <random>

using namespace carleman;

namespace {

Point pt(std::initializer_list<double> v)
{
    Point p(long(v.size()));
    long i = 0;
    for (double x : v) p[i++] = x;
    return p;
}

}  // namespace

TEST(Weight, ParameterFloor)
{
    EXPECT_THROW(CarlemanWeight(0.5, 2.0), ValidationError);
    EXPECT_THROW(CarlemanWeight(2.0, 0.9), ValidationError);
    EXPECT_NO_THROW(CarlemanWeight(1.0, 1.0));
}

TEST(Weight, KnownValues)
{
    CarlemanWeight cw(1.0, 1.0);
    EXPECT_NEAR(eval_weight(cw, pt({0.5})), std::exp(4.0 / 3.0), 1e-12);
    EXPECT_NEAR(eval_weight(cw, pt({0.5})), 3.79367, 1e-5);
    EXPECT_NEAR(eval_weight(cw, pt({0.0, 0.0})), std::exp(4.0), 1e-10);
    EXPECT_NEAR(eval_weight(cw, pt({0.0})), 54.5982, 1e-4);
}

TEST(Weight, LambdaScalesLog)
{
    CarlemanWeight one(1.0, 2.0), two(2.0, 2.0);
    for (double x : {0.0, 0.1, 0.3, 0.49})
        EXPECT_NEAR(std::log(eval_weight(two, pt({x, 0.2}))), 2.0 * std::log(eval_weight(one, pt({x, 0.2}))),
                    1e-12);
}

TEST(Weight, Errors)
{
    CarlemanWeight cw(1.0, 1.0);
    EXPECT_THROW(eval_weight(cw, pt({-0.25})), DomainError);
    EXPECT_THROW(eval_weight(CarlemanWeight(50.0, 2.0), pt({0.0})), OverflowError);
    EXPECT_NO_THROW(log_weight(CarlemanWeight(64.0, 2.0), 0.25));
}

TEST(Weight, LogDerivs)
{
    CarlemanWeight cw(1.0, 1.0);
    auto d = weight_log_derivs(cw, pt({0.1, 0.3}));
    EXPECT_DOUBLE_EQ(d.grad_psi[0], 1.0);
    EXPECT_DOUBLE_EQ(d.grad_psi[1], 0.3);
    EXPECT_EQ(d.hess_psi(0, 0), 0.0);
    EXPECT_EQ(d.hess_psi(0, 1), 0.0);
    EXPECT_EQ(d.hess_psi(1, 1), 1.0);
    auto z = weight_log_derivs(cw, pt({0.0, 0.0}));
    EXPECT_NEAR(z.grad_log_phi[0], -16.0, 1e-12);
    EXPECT_EQ(z.grad_log_phi[1], 0.0);
}

TEST(Weight, Monotone)
{
    CarlemanWeight cw(3.0, 2.0);
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> x1(0.0, 0.5), x2(-1.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        Point a = pt({x1(rng), x2(rng)}), b = pt({x1(rng), x2(rng)});
        if (eval_level(a) < eval_level(b)) {
            EXPECT_GT(eval_weight(cw, a), eval_weight(cw, b));
        } else if (eval_level(a) > eval_level(b)) {
            EXPECT_LT(eval_weight(cw, a), eval_weight(cw, b));
        }
    }
}

TEST(Weight, DerivativeConvergesAtOrderTwo)
{
    CarlemanWeight cw(2.0, 2.0);
    Point x = pt({0.2, 0.3});
    auto d = weight_log_derivs(cw, x);
    Point exact = eval_weight(cw, x) * d.grad_log_phi;
    std::vector<double> err;
    for (double h : {1e-2, 5e-3, 2.5e-3}) {
        double e = 0.0;
        for (int i = 0; i < 2; ++i) {
            Point xp = x, xm = x;
            xp[i] += h;
            xm[i] -= h;
            double fdv = (eval_weight(cw, xp) - eval_weight(cw, xm)) / (2 * h);
            e = std::max(e, std::abs(fdv - exact[i]));
        }
        err.push_back(e);
    }
    for (int i = 0; i + 1 < 3; ++i) {
        double r = err[i] / err[i + 1];
        EXPECT_GT(r, 3.4);
        EXPECT_LT(r, 4.6);
    }
}

TEST(Extrema, Paraboloid)
{
    CarlemanWeight cw(1.0, 1.0);
    auto e = weight_extrema(cw, Domain::paraboloid(2));
    EXPECT_NEAR(e.max_sq(), std::exp(8.0), 1e-9 * std::exp(8.0));
    EXPECT_NEAR(e.min_sq(), std::exp(8.0 / 3.0), 1e-12 * std::exp(8.0 / 3.0));
    EXPECT_NEAR(e.log_max_sq - e.log_min_sq, 2.0 * (4.0 - 4.0 / 3.0), 1e-12);
    auto f = weight_extrema(cw, Domain::paraboloid_eps(2, 0.1));
    EXPECT_NEAR(f.log_min_sq, 2.0 / 0.65, 1e-12);
}

TEST(Extrema, Prism)
{
    CarlemanWeight cw(1.0, 2.0);
    for (int n : {2, 3, 4}) {
        auto e = weight_extrema(cw, Domain::prism(n));
        EXPECT_NEAR(e.log_min_sq, 2.0 * std::pow(5.0 / 8.0, -2.0), 1e-12);
    }
    EXPECT_NEAR(weight_extrema(cw, Domain::prism(1)).log_min_sq, 2.0 * std::pow(0.5, -2.0), 1e-12);
    EXPECT_THROW(weight_extrema(CarlemanWeight(400.0, 1.0), Domain::paraboloid(1)).max_sq(), OverflowError);
}

TEST(Extrema, EpsSubdomainAboveCapLevel)
{
    CarlemanWeight cw(2.0, 2.0);
    auto g = build_grid(Domain::paraboloid_eps(2, 0.1), 17, 1.0, 2);
    double mn = 1e300;
    for (std::size_t k : g.active_nodes()) mn = std::min(mn, std::pow(eval_weight(cw, g.coords(k)), 2));
    EXPECT_GT(mn, std::exp(2.0 * cw.lambda * std::pow(0.75, -cw.mu)));
    EXPECT_GE(mn, weight_extrema(cw, g.domain).min_sq());
}
