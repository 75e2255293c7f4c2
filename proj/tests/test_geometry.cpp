#include <carleman/field.hpp>

#include <gtest/gtest.h>

#include <map>

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

TEST(Level, KnownValues)
{
    EXPECT_DOUBLE_EQ(eval_level(pt({0.0, 0.0, 0.0})), 0.25);
    EXPECT_DOUBLE_EQ(eval_level(pt({0.5, 0.0})), 0.75);
    EXPECT_DOUBLE_EQ(eval_level(pt({0.25, 0.5})), 0.625);
    EXPECT_DOUBLE_EQ(eval_level(pt({0.1})), 0.35);
}

TEST(InDomain, Membership)
{
    EXPECT_TRUE(in_domain(Domain::paraboloid(2), pt({0.1, 0.0})));
    EXPECT_FALSE(in_domain(Domain::paraboloid(2), pt({0.5, 0.8})));
    EXPECT_FALSE(in_domain(Domain::paraboloid(2), pt({0.0, 0.1})));
    EXPECT_TRUE(in_domain(Domain::prism(2), pt({0.2, 0.4})));
    EXPECT_FALSE(in_domain(Domain::prism(2), pt({0.2, 0.5})));
    EXPECT_TRUE(in_domain(Domain::paraboloid_eps(1, 0.1), pt({0.3})));
    EXPECT_FALSE(in_domain(Domain::paraboloid_eps(1, 0.1), pt({0.45})));
    EXPECT_THROW(in_domain(Domain::paraboloid(2), pt({0.1})), DimensionError);
}

TEST(InDomain, EpsRange)
{
    EXPECT_THROW(Domain::paraboloid_eps(2, 0.0), DomainError);
    EXPECT_THROW(Domain::paraboloid_eps(2, 0.5), DomainError);
    EXPECT_NO_THROW(Domain::paraboloid_eps(2, 0.25));
}

TEST(Grid, IntervalSpacing)
{
    auto g = build_grid(Domain::interval(0.0, 0.25), 9, 1.0, 11);
    EXPECT_DOUBLE_EQ(g.h[0], 1.0 / 32.0);
    EXPECT_DOUBLE_EQ(g.dt, 0.1);
    EXPECT_EQ(g.num_nodes(), 9u);
    EXPECT_EQ(g.tag(0).kind, TagKind::Gamma);
    EXPECT_EQ(g.tag(8), (BoundaryTag{TagKind::PrismFacePlus, 1}));
    EXPECT_THROW(build_grid(Domain::interval(0.0, 0.25), 4, 1.0, 11), ValidationError);
    EXPECT_THROW(build_grid(Domain::interval(0.0, 0.25), 9, 1.0, 1), ValidationError);
    EXPECT_THROW(build_grid(Domain::interval(0.0, 0.25), 9, 0.0, 5), ValidationError);
}

TEST(Grid, PrismFaces)
{
    auto g = build_grid(Domain::prism(2), 9, 1.0, 5);
    EXPECT_EQ(g.num_nodes(), 81u);
    const double c = 0.5;
    std::map<std::string, int> count;
    for (std::size_t k = 0; k < g.num_nodes(); ++k) {
        ASSERT_TRUE(g.active(k));
        BoundaryTag t = g.tag(k);
        ++count[t.str()];
        double x1 = g.coord(k, 0), x2 = g.coord(k, 1);
        switch (t.kind) {
        case TagKind::Gamma: EXPECT_EQ(x1, 0.0); break;
        case TagKind::PrismFacePlus:
            if (t.axis == 2) EXPECT_DOUBLE_EQ(x2, c);
            else EXPECT_DOUBLE_EQ(x1, 0.25);
            break;
        case TagKind::PrismFaceMinus: EXPECT_DOUBLE_EQ(x2, -c); break;
        case TagKind::Interior: {
            Point x = g.coords(k);
            EXPECT_TRUE(in_domain(g.domain, x));
            break;
        }
        default: ADD_FAILURE() << t.str();
        }
    }
    // Gamma wins the corners x1 = 0; transverse faces win over the far face.
    EXPECT_EQ(count["Gamma"], 9);
    EXPECT_EQ(count["PrismFacePlus(2)"], 8);
    EXPECT_EQ(count["PrismFaceMinus(2)"], 8);
    EXPECT_EQ(count["PrismFacePlus(1)"], 7);
    EXPECT_EQ(count["Interior"], 49);

    // Node (0, +c) is a corner of Gamma and face +2.
    std::size_t corner = g.stride(1) * 8;
    EXPECT_EQ(g.tag(corner).kind, TagKind::Gamma);
    std::size_t face = g.stride(1) * 8 + 3;
    EXPECT_EQ(g.tag(face), (BoundaryTag{TagKind::PrismFacePlus, 2}));
}

TEST(Grid, TimeSlicesTakePrecedence)
{
    auto g = build_grid(Domain::prism(2), 9, 1.0, 5);
    for (std::size_t k = 0; k < g.num_nodes(); ++k) {
        EXPECT_EQ(classify_boundary(g, k, 0).kind, TagKind::Initial);
        EXPECT_EQ(classify_boundary(g, k, 4).kind, TagKind::Terminal);
        EXPECT_EQ(classify_boundary(g, k, 2), g.tag(k));
    }
    EXPECT_THROW(classify_boundary(g, 81, 1), DomainError);
    EXPECT_THROW(classify_boundary(g, 0, 5), DomainError);
}

TEST(Grid, ParaboloidStaircase)
{
    for (int n : {1, 2, 3}) {
        const int res = n == 3 ? 9 : 17;
        auto g = build_grid(Domain::paraboloid(n), res, 1.0, 3);
        int gamma = 0, curved = 0, interior = 0;
        double tol = g.h[0];
        for (int i = 1; i < n; ++i) tol += g.h[i] * std::sqrt(2.0 * 0.5) + 0.5 * g.h[i] * g.h[i];
        for (std::size_t k = 0; k < g.num_nodes(); ++k) {
            if (!g.active(k)) {
                EXPECT_EQ(g.tag(k).kind, TagKind::Outside);
                continue;
            }
            Point x = g.coords(k);
            double p = g.psi(k);
            EXPECT_LT(p, 0.75);
            switch (g.tag(k).kind) {
            case TagKind::Gamma:
                ++gamma;
                EXPECT_EQ(x[0], 0.0);
                break;
            case TagKind::LateralCurved:
                ++curved;
                EXPECT_TRUE(in_domain(g.domain, x));
                EXPECT_GE(p, 0.75 - tol);
                break;
            case TagKind::Interior:
                ++interior;
                EXPECT_TRUE(in_domain(g.domain, x));
                EXPECT_GT(p, 0.25);
                break;
            default: ADD_FAILURE() << g.tag(k).str();
            }
        }
        EXPECT_GT(gamma, 0);
        EXPECT_GT(curved, 0);
        EXPECT_GT(interior, 0);
        EXPECT_EQ(std::size_t(gamma + curved + interior), g.active_nodes().size());
    }
}

TEST(Grid, EpsCapIsLower)
{
    auto g = build_grid(Domain::paraboloid_eps(1, 0.1), 33, 1.0, 3);
    for (std::size_t k : g.active_nodes()) EXPECT_LT(g.psi(k), 0.65);
    EXPECT_DOUBLE_EQ(g.coord(g.num_nodes() - 1, 0), 0.4);
}

TEST(Grid, PrismInsideParaboloid)
{
    for (int n : {1, 2, 3}) {
        auto g = build_grid(Domain::prism(n), n == 3 ? 9 : 17, 1.0, 2);
        auto G = Domain::paraboloid(n);
        for (std::size_t k = 0; k < g.num_nodes(); ++k) {
            Point x = g.coords(k);
            EXPECT_LT(g.psi(k), 0.75);
            if (x[0] > 0.0) {
                EXPECT_TRUE(in_domain(G, x));
            }
        }
    }
}

TEST(Grid, NeighborsStayInBox)
{
    auto g = build_grid(Domain::prism(2), 5, 1.0, 2);
    EXPECT_EQ(g.neighbor(0, 0, -1), -1);
    EXPECT_EQ(g.neighbor(0, 0, 1), 1);
    EXPECT_EQ(g.neighbor(0, 1, 1), 5);
    EXPECT_EQ(g.neighbor(4, 0, 1), -1);
}
