#pragma once

#include <carleman/core.hpp>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace carleman {

enum class DomainKind { ParaboloidG, ParaboloidGEps, PrismOmega, Interval1D };

/**
 * @brief One of the supported spatial domains.
 *
 * ParaboloidG is {1/4 < psi < 3/4, x1 > 0}, ParaboloidGEps lowers the cap to 3/4 - eps,
 * PrismOmega is (0,1/4) x (-c,c)^{n-1} with c = 1/(2 sqrt(n-1)), Interval1D is (a,b).
 */
struct Domain {
    DomainKind kind = DomainKind::ParaboloidG;
    int dim = 1;
    double eps = 0.0;
    double a = 0.0;
    double b = 1.0;

    static Domain paraboloid(int n) { return make(DomainKind::ParaboloidG, n); }

    static Domain paraboloid_eps(int n, double eps)
    {
        if (!(eps > 0.0 && eps < 0.5)) throw DomainError("eps must lie in (0, 1/2)", "eps");
        Domain d = make(DomainKind::ParaboloidGEps, n);
        d.eps = eps;
        return d;
    }

    static Domain prism(int n) { return make(DomainKind::PrismOmega, n); }

    static Domain interval(double a, double b)
    {
        if (!(b > a)) throw DomainError("interval requires a < b", "b");
        Domain d = make(DomainKind::Interval1D, 1);
        d.a = a;
        d.b = b;
        return d;
    }

    // Upper level of psi on the curved cap.
    double psi_cap() const { return kind == DomainKind::ParaboloidGEps ? 0.75 - eps : 0.75; }

    // Half-width of the prism in the transverse directions.
    double prism_halfwidth() const { return dim > 1 ? 0.5 / std::sqrt(double(dim - 1)) : 0.0; }

    bool is_box() const { return kind == DomainKind::PrismOmega || kind == DomainKind::Interval1D; }

    std::string name() const
    {
        switch (kind) {
        case DomainKind::ParaboloidG: return "ParaboloidG";
        case DomainKind::ParaboloidGEps: return "ParaboloidGEps";
        case DomainKind::PrismOmega: return "PrismOmega";
        case DomainKind::Interval1D: return "Interval1D";
        }
        return "?";
    }

private:
    static Domain make(DomainKind k, int n)
    {
        if (n < 1) throw DimensionError("dimension must be >= 1", "dim");
        Domain d;
        d.kind = k;
        d.dim = n;
        return d;
    }
};

/** @brief The level function psi(x) = x1 + |x'|^2/2 + 1/4. */
inline double eval_level(const double* x, int n)
{
    double s = 0.0;
    for (int i = 1; i < n; ++i) s += x[i] * x[i];
    return x[0] + 0.5 * s + 0.25;
}

inline double eval_level(const Point& x) { return eval_level(x.data(), int(x.size())); }

inline bool in_domain(const Domain& d, const Point& x)
{
    if (x.size() != d.dim) throw DimensionError("point dimension does not match domain");
    switch (d.kind) {
    case DomainKind::ParaboloidG:
    case DomainKind::ParaboloidGEps: {
        double p = eval_level(x);
        return x[0] > 0.0 && p > 0.25 && p < d.psi_cap();
    }
    case DomainKind::PrismOmega: {
        if (!(x[0] > 0.0 && x[0] < 0.25)) return false;
        double c = d.prism_halfwidth();
        for (int i = 1; i < d.dim; ++i)
            if (!(std::abs(x[i]) < c)) return false;
        return true;
    }
    case DomainKind::Interval1D: return x[0] > d.a && x[0] < d.b;
    }
    return false;
}

struct BoundingBox {
    std::vector<double> lo, hi;
};

inline BoundingBox bounding_box(const Domain& d)
{
    BoundingBox box{std::vector<double>(d.dim), std::vector<double>(d.dim)};
    switch (d.kind) {
    case DomainKind::ParaboloidG:
    case DomainKind::ParaboloidGEps: {
        double top = d.psi_cap() - 0.25;
        double r = std::sqrt(2.0 * top);
        box.lo[0] = 0.0;
        box.hi[0] = top;
        for (int i = 1; i < d.dim; ++i) {
            box.lo[i] = -r;
            box.hi[i] = r;
        }
        break;
    }
    case DomainKind::PrismOmega: {
        double c = d.prism_halfwidth();
        box.lo[0] = 0.0;
        box.hi[0] = 0.25;
        for (int i = 1; i < d.dim; ++i) {
            box.lo[i] = -c;
            box.hi[i] = c;
        }
        break;
    }
    case DomainKind::Interval1D:
        box.lo[0] = d.a;
        box.hi[0] = d.b;
        break;
    }
    return box;
}

enum class TagKind : std::uint8_t {
    Interior,
    Gamma,
    LateralCurved,
    PrismFacePlus,
    PrismFaceMinus,
    Initial,
    Terminal,
    Outside
};

/**
 * @brief Boundary label of a node. Faces carry a 1-based axis index.
 *
 * The far face x1 = const of a box domain is reported as PrismFacePlus(1).
 */
struct BoundaryTag {
    TagKind kind = TagKind::Interior;
    int axis = 0;

    bool operator==(const BoundaryTag& o) const { return kind == o.kind && axis == o.axis; }
    bool operator!=(const BoundaryTag& o) const { return !(*this == o); }
    bool is_face() const { return kind == TagKind::PrismFacePlus || kind == TagKind::PrismFaceMinus; }

    std::string str() const
    {
        switch (kind) {
        case TagKind::Interior: return "Interior";
        case TagKind::Gamma: return "Gamma";
        case TagKind::LateralCurved: return "LateralCurved";
        case TagKind::PrismFacePlus: return "PrismFacePlus(" + std::to_string(axis) + ")";
        case TagKind::PrismFaceMinus: return "PrismFaceMinus(" + std::to_string(axis) + ")";
        case TagKind::Initial: return "Initial";
        case TagKind::Terminal: return "Terminal";
        case TagKind::Outside: return "Outside";
        }
        return "?";
    }
};

/**
 * @brief Uniform tensor grid over the bounding box of a domain, times [0,T].
 *
 * Spatial nodes are numbered with axis 0 fastest. Nodes outside the domain closure are kept
 * but flagged inactive so that every field has the same box layout.
 */
class SpaceTimeGrid {
public:
    Domain domain;
    std::vector<int> shape;
    std::vector<double> lo, h;
    double T = 1.0;
    int nt = 2;
    double dt = 1.0;

    int dim() const { return domain.dim; }
    std::size_t num_nodes() const { return num_nodes_; }
    std::size_t stride(int axis) const { return strides_[axis]; }

    double coord(std::size_t node, int axis) const { return xs_[node * dim() + axis]; }
    const double* coords_ptr(std::size_t node) const { return &xs_[node * dim()]; }
    Point coords(std::size_t node) const
    {
        return Eigen::Map<const Eigen::VectorXd>(coords_ptr(node), dim());
    }
    double time(int level) const { return level * dt; }
    double psi(std::size_t node) const { return psi_[node]; }

    int index(std::size_t node, int axis) const { return int((node / strides_[axis]) % shape[axis]); }

    bool active(std::size_t node) const { return active_[node] != 0; }
    const std::vector<std::uint8_t>& active_mask() const { return active_; }
    BoundaryTag tag(std::size_t node) const { return tags_[node]; }
    bool interior(std::size_t node) const { return tags_[node].kind == TagKind::Interior; }

    /** @brief Neighbor node at integer offset along an axis, or -1 when it leaves the box. */
    long neighbor(std::size_t node, int axis, int offset) const
    {
        int i = index(node, axis) + offset;
        if (i < 0 || i >= shape[axis]) return -1;
        return long(node) + long(offset) * long(strides_[axis]);
    }

    // Active nodes in ascending order.
    const std::vector<std::size_t>& active_nodes() const { return active_list_; }

    // Cell volume h_1 ... h_n.
    double cell_volume() const
    {
        double v = 1.0;
        for (double hi : h) v *= hi;
        return v;
    }

    friend SpaceTimeGrid build_grid(const Domain& d, int resolution, double T, int nt);

private:
    std::size_t num_nodes_ = 0;
    std::vector<std::size_t> strides_;
    std::vector<double> xs_;
    std::vector<double> psi_;
    std::vector<std::uint8_t> active_;
    std::vector<BoundaryTag> tags_;
    std::vector<std::size_t> active_list_;
};

namespace detail {

// Every offset vector in {-1,0,1}^n except zero.
inline std::vector<std::vector<int>> neighborhood_offsets(int n)
{
    std::vector<std::vector<int>> out;
    int total = 1;
    for (int i = 0; i < n; ++i) total *= 3;
    for (int c = 0; c < total; ++c) {
        std::vector<int> off(n);
        int r = c;
        bool zero = true;
        for (int i = 0; i < n; ++i) {
            off[i] = r % 3 - 1;
            r /= 3;
            if (off[i] != 0) zero = false;
        }
        if (!zero) out.push_back(off);
    }
    return out;
}

}  // namespace detail

/**
 * @brief Build the grid with `resolution` nodes per spatial axis and nt time levels.
 *
 * Paraboloid domains are approximated by the staircase of in-domain nodes; the curved boundary
 * is the set of active nodes having an inactive node in their 3^n neighborhood.
 */
inline SpaceTimeGrid build_grid(const Domain& d, int resolution, double T, int nt)
{
    if (resolution < 5) throw ValidationError("resolution must be >= 5", "grid.resolution");
    if (nt < 2) throw ValidationError("nt must be >= 2", "grid.nt");
    if (!(T > 0.0)) throw ValidationError("T must be positive", "grid.T");
    if (d.kind == DomainKind::Interval1D && !(d.a + 0.25 > 0.0))
        throw DomainError("interval must satisfy psi > 0, i.e. a > -1/4", "domain.a");

    SpaceTimeGrid g;
    g.domain = d;
    const int n = d.dim;
    BoundingBox box = bounding_box(d);
    g.shape.assign(n, resolution);
    g.lo = box.lo;
    g.h.resize(n);
    for (int i = 0; i < n; ++i) g.h[i] = (box.hi[i] - box.lo[i]) / (resolution - 1);
    g.T = T;
    g.nt = nt;
    g.dt = T / (nt - 1);

    g.strides_.resize(n);
    std::size_t total = 1;
    for (int i = 0; i < n; ++i) {
        g.strides_[i] = total;
        total *= std::size_t(resolution);
    }
    g.num_nodes_ = total;
    g.xs_.resize(total * n);
    g.psi_.resize(total);
    g.active_.assign(total, 0);
    g.tags_.assign(total, BoundaryTag{TagKind::Outside, 0});

    for (std::size_t k = 0; k < total; ++k) {
        for (int i = 0; i < n; ++i) {
            int idx = g.index(k, i);
            // Snap the last node to the box edge so faces are exact.
            g.xs_[k * n + i] = idx == resolution - 1 ? box.hi[i] : box.lo[i] + idx * g.h[i];
        }
        g.psi_[k] = eval_level(&g.xs_[k * n], n);
    }

    const bool box_domain = d.is_box();
    for (std::size_t k = 0; k < total; ++k) {
        if (box_domain) {
            g.active_[k] = 1;
        } else {
            bool in = g.psi_[k] < d.psi_cap() && g.psi_[k] > 0.25;
            bool gamma = g.index(k, 0) == 0 && g.psi_[k] < d.psi_cap();
            g.active_[k] = (in && g.index(k, 0) > 0) || gamma ? 1 : 0;
        }
    }

    auto offsets = detail::neighborhood_offsets(n);
    for (std::size_t k = 0; k < total; ++k) {
        if (!g.active_[k]) continue;
        g.active_list_.push_back(k);
        if (g.index(k, 0) == 0) {
            g.tags_[k] = {TagKind::Gamma, 0};
            continue;
        }
        if (box_domain) {
            BoundaryTag t{TagKind::Interior, 0};
            for (int i = 1; i < n && t.kind == TagKind::Interior; ++i) {
                if (g.index(k, i) == 0) t = {TagKind::PrismFaceMinus, i + 1};
                else if (g.index(k, i) == resolution - 1) t = {TagKind::PrismFacePlus, i + 1};
            }
            if (t.kind == TagKind::Interior && g.index(k, 0) == resolution - 1)
                t = {TagKind::PrismFacePlus, 1};
            g.tags_[k] = t;
            continue;
        }
        bool edge = false;
        for (const auto& off : offsets) {
            long m = long(k);
            for (int i = 0; i < n && m >= 0; ++i) {
                if (off[i] == 0) continue;
                m = g.neighbor(std::size_t(m), i, off[i]);
            }
            if (m < 0 || !g.active_[std::size_t(m)]) {
                edge = true;
                break;
            }
        }
        g.tags_[k] = edge ? BoundaryTag{TagKind::LateralCurved, 0} : BoundaryTag{TagKind::Interior, 0};
    }
    return g;
}

/**
 * @brief Tag of the space-time node (node, level).
 *
 * Time slices take precedence: every node on t = 0 is Initial and on t = T is Terminal.
 */
inline BoundaryTag classify_boundary(const SpaceTimeGrid& g, std::size_t node, int level)
{
    if (node >= g.num_nodes() || level < 0 || level >= g.nt)
        throw DomainError("node outside grid");
    if (level == 0) return {TagKind::Initial, 0};
    if (level == g.nt - 1) return {TagKind::Terminal, 0};
    return g.tag(node);
}

}  // namespace carleman
