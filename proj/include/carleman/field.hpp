#pragma once

#include <carleman/geometry.hpp>

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace carleman {

using GridPtr = std::shared_ptr<const SpaceTimeGrid>;

inline GridPtr make_grid(const Domain& d, int resolution, double T, int nt)
{
    return std::make_shared<const SpaceTimeGrid>(build_grid(d, resolution, T, nt));
}

/** @brief Scalar per spatial node of the grid box. */
struct SpatialField {
    GridPtr grid;
    std::vector<double> values;

    SpatialField() = default;
    explicit SpatialField(GridPtr g, double fill = 0.0) : grid(std::move(g)), values(grid->num_nodes(), fill) {}

    std::size_t size() const { return values.size(); }
    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }
};

/** @brief Scalar per (spatial node, time level); levels are stored contiguously. */
struct Field {
    GridPtr grid;
    std::vector<double> values;

    Field() = default;
    explicit Field(GridPtr g, double fill = 0.0)
        : grid(std::move(g)), values(grid->num_nodes() * std::size_t(grid->nt), fill) {}

    std::size_t nodes() const { return grid->num_nodes(); }
    int levels() const { return grid->nt; }
    double& at(std::size_t node, int level) { return values[std::size_t(level) * nodes() + node]; }
    double at(std::size_t node, int level) const { return values[std::size_t(level) * nodes() + node]; }

    std::span<double> slice(int level) { return {values.data() + std::size_t(level) * nodes(), nodes()}; }
    std::span<const double> slice(int level) const
    {
        return {values.data() + std::size_t(level) * nodes(), nodes()};
    }

    SpatialField slice_field(int level) const
    {
        SpatialField s(grid);
        auto src = slice(level);
        std::copy(src.begin(), src.end(), s.values.begin());
        return s;
    }

    void set_slice(int level, const SpatialField& s)
    {
        std::copy(s.values.begin(), s.values.end(), slice(level).begin());
    }
};

/**
 * @brief Values on a set of boundary nodes over all time levels.
 *
 * Entry (j, level) is stored at level * nodes.size() + j.
 */
struct Trace {
    std::vector<std::size_t> nodes;
    int nt = 0;
    std::vector<double> values;

    Trace() = default;
    Trace(std::vector<std::size_t> nodes_, int nt_, double fill = 0.0)
        : nodes(std::move(nodes_)), nt(nt_), values(nodes.size() * std::size_t(nt), fill) {}

    std::size_t count() const { return nodes.size(); }
    double& at(std::size_t j, int level) { return values[std::size_t(level) * nodes.size() + j]; }
    double at(std::size_t j, int level) const { return values[std::size_t(level) * nodes.size() + j]; }
};

using SpaceTimeFn = std::function<double(const Point& x, double t)>;
using SpaceFn = std::function<double(const Point& x)>;

inline Field sample(const GridPtr& g, const SpaceTimeFn& fn)
{
    Field u(g);
    for (int k = 0; k < g->nt; ++k)
        for (std::size_t i = 0; i < g->num_nodes(); ++i) u.at(i, k) = fn(g->coords(i), g->time(k));
    return u;
}

inline SpatialField sample(const GridPtr& g, const SpaceFn& fn)
{
    SpatialField s(g);
    for (std::size_t i = 0; i < g->num_nodes(); ++i) s[i] = fn(g->coords(i));
    return s;
}

// Zero every entry at inactive nodes.
inline void mask_inactive(SpatialField& s)
{
    for (std::size_t i = 0; i < s.size(); ++i)
        if (!s.grid->active(i)) s[i] = 0.0;
}

inline void mask_inactive(Field& u)
{
    for (int k = 0; k < u.levels(); ++k)
        for (std::size_t i = 0; i < u.nodes(); ++i)
            if (!u.grid->active(i)) u.at(i, k) = 0.0;
}

inline Field constant_in_time(const SpatialField& s)
{
    Field u(s.grid);
    for (int k = 0; k < u.levels(); ++k) u.set_slice(k, s);
    return u;
}

inline bool all_finite(std::span<const double> v)
{
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace carleman
