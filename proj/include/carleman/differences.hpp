#pragma once

#include <carleman/field.hpp>

#include <array>
#include <cstdint>
#include <vector>

namespace carleman::fd {

/**
 * @brief Layout of a dense array: dims[0] varies fastest.
 *
 * Spatial fields use the grid shape; space-time fields append the time levels as the last axis.
 */
struct Shape {
    std::vector<int> dims;
    std::vector<std::size_t> strides;
    std::size_t size = 1;

    explicit Shape(std::vector<int> d) : dims(std::move(d))
    {
        strides.resize(dims.size());
        for (std::size_t i = 0; i < dims.size(); ++i) {
            strides[i] = size;
            size *= std::size_t(dims[i]);
        }
    }
};

inline Shape spatial_shape(const SpaceTimeGrid& g) { return Shape(g.shape); }

inline Shape spacetime_shape(const SpaceTimeGrid& g)
{
    auto d = g.shape;
    d.push_back(g.nt);
    return Shape(std::move(d));
}

/** @brief Options for one directional difference. */
struct DiffOptions {
    int accuracy = 2;  // 2 or 4
    // Optional node mask; entry for flat index f is mask[f % mask->size()].
    const std::vector<std::uint8_t>* mask = nullptr;
    // Throw StencilError when a run is too short for the requested accuracy instead of degrading.
    bool strict = true;
};

namespace detail {

inline int min_run(int order, int accuracy)
{
    if (order == 1) return accuracy == 4 ? 5 : 3;
    return accuracy == 4 ? 6 : 4;
}

// First derivative on a contiguous run of m samples.
inline void first_run(const double* f, double* out, int m, double h, int acc)
{
    if (m == 1) {
        out[0] = 0.0;
        return;
    }
    if (m == 2) {
        out[0] = out[1] = (f[1] - f[0]) / h;
        return;
    }
    if (acc == 4 && m >= 5) {
        const double s = 1.0 / (12.0 * h);
        out[0] = s * (-25 * f[0] + 48 * f[1] - 36 * f[2] + 16 * f[3] - 3 * f[4]);
        out[1] = s * (-3 * f[0] - 10 * f[1] + 18 * f[2] - 6 * f[3] + f[4]);
        for (int j = 2; j < m - 2; ++j) out[j] = s * (f[j - 2] - 8 * f[j - 1] + 8 * f[j + 1] - f[j + 2]);
        const double* g = f + (m - 1);
        out[m - 1] = -s * (-25 * g[0] + 48 * g[-1] - 36 * g[-2] + 16 * g[-3] - 3 * g[-4]);
        out[m - 2] = -s * (-3 * g[0] - 10 * g[-1] + 18 * g[-2] - 6 * g[-3] + g[-4]);
        return;
    }
    const double s = 0.5 / h;
    out[0] = s * (-3 * f[0] + 4 * f[1] - f[2]);
    for (int j = 1; j < m - 1; ++j) out[j] = s * (f[j + 1] - f[j - 1]);
    out[m - 1] = s * (3 * f[m - 1] - 4 * f[m - 2] + f[m - 3]);
}

// Second derivative on a contiguous run of m samples.
inline void second_run(const double* f, double* out, int m, double h, int acc)
{
    if (m <= 2) {
        for (int j = 0; j < m; ++j) out[j] = 0.0;
        return;
    }
    const double s = 1.0 / (h * h);
    if (m == 3) {
        double c = s * (f[0] - 2 * f[1] + f[2]);
        out[0] = out[1] = out[2] = c;
        return;
    }
    if (acc == 4 && m >= 6) {
        const double q = s / 12.0;
        out[0] = q * (45 * f[0] - 154 * f[1] + 214 * f[2] - 156 * f[3] + 61 * f[4] - 10 * f[5]);
        out[1] = q * (10 * f[0] - 15 * f[1] - 4 * f[2] + 14 * f[3] - 6 * f[4] + f[5]);
        for (int j = 2; j < m - 2; ++j)
            out[j] = q * (-f[j - 2] + 16 * f[j - 1] - 30 * f[j] + 16 * f[j + 1] - f[j + 2]);
        const double* g = f + (m - 1);
        out[m - 1] = q * (45 * g[0] - 154 * g[-1] + 214 * g[-2] - 156 * g[-3] + 61 * g[-4] - 10 * g[-5]);
        out[m - 2] = q * (10 * g[0] - 15 * g[-1] - 4 * g[-2] + 14 * g[-3] - 6 * g[-4] + g[-5]);
        return;
    }
    out[0] = s * (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]);
    for (int j = 1; j < m - 1; ++j) out[j] = s * (f[j - 1] - 2 * f[j] + f[j + 1]);
    const double* g = f + (m - 1);
    out[m - 1] = s * (2 * g[0] - 5 * g[-1] + 4 * g[-2] - g[-3]);
}

}  // namespace detail

/**
 * @brief Derivative of order 1 or 2 along one axis.
 *
 * Central stencils inside, one-sided stencils of the same accuracy at the ends of every run.
 * With a mask, runs are the maximal stretches of masked-in entries and masked-out entries get 0.
 */
inline std::vector<double> diff(std::span<const double> f, const Shape& shape, int axis, int order, double h,
                                const DiffOptions& opt = {})
{
    if (f.size() != shape.size) throw DimensionError("array size does not match shape");
    const int len = shape.dims[axis];
    const std::size_t stride = shape.strides[axis];
    std::vector<double> out(f.size(), 0.0);
    std::vector<double> buf(len), res(len);
    const std::size_t period = opt.mask ? opt.mask->size() : 0;
    auto in_mask = [&](std::size_t k) { return !opt.mask || (*opt.mask)[k % period] != 0; };
    const int need = detail::min_run(order, opt.accuracy);

    for (std::size_t base = 0; base < f.size(); ++base) {
        if ((base / stride) % std::size_t(len) != 0) continue;
        int j = 0;
        while (j < len) {
            while (j < len && !in_mask(base + std::size_t(j) * stride)) ++j;
            int start = j;
            while (j < len && in_mask(base + std::size_t(j) * stride)) ++j;
            int m = j - start;
            if (m == 0) continue;
            if (opt.strict && m < need)
                throw StencilError("difference stencil needs " + std::to_string(need) + " points, run has " +
                                   std::to_string(m));
            for (int r = 0; r < m; ++r) buf[r] = f[base + std::size_t(start + r) * stride];
            if (order == 1) detail::first_run(buf.data(), res.data(), m, h, opt.accuracy);
            else detail::second_run(buf.data(), res.data(), m, h, opt.accuracy);
            for (int r = 0; r < m; ++r) out[base + std::size_t(start + r) * stride] = res[r];
        }
    }
    return out;
}

/** @brief Spatial derivative d/dx_axis of a space-time field. */
inline Field dx(const Field& u, int axis, const DiffOptions& opt = {})
{
    Field out(u.grid);
    out.values = diff(u.values, spacetime_shape(*u.grid), axis, 1, u.grid->h[axis], opt);
    return out;
}

/** @brief Second spatial derivative; mixed terms as the composition of first differences. */
inline Field dxx(const Field& u, int a, int b, const DiffOptions& opt = {})
{
    const auto shape = spacetime_shape(*u.grid);
    Field out(u.grid);
    if (a == b) {
        out.values = diff(u.values, shape, a, 2, u.grid->h[a], opt);
    } else {
        auto tmp = diff(u.values, shape, b, 1, u.grid->h[b], opt);
        out.values = diff(tmp, shape, a, 1, u.grid->h[a], opt);
    }
    return out;
}

/** @brief Time derivative of a space-time field. */
inline Field dt(const Field& u, const DiffOptions& opt = {})
{
    const auto shape = spacetime_shape(*u.grid);
    DiffOptions o = opt;
    o.mask = nullptr;
    Field out(u.grid);
    out.values = diff(u.values, shape, int(shape.dims.size()) - 1, 1, u.grid->dt, o);
    return out;
}

inline SpatialField dx(const SpatialField& s, int axis, const DiffOptions& opt = {})
{
    SpatialField out(s.grid);
    out.values = diff(s.values, spatial_shape(*s.grid), axis, 1, s.grid->h[axis], opt);
    return out;
}

inline SpatialField dxx(const SpatialField& s, int a, int b, const DiffOptions& opt = {})
{
    const auto shape = spatial_shape(*s.grid);
    SpatialField out(s.grid);
    if (a == b) {
        out.values = diff(s.values, shape, a, 2, s.grid->h[a], opt);
    } else {
        auto tmp = diff(s.values, shape, b, 1, s.grid->h[b], opt);
        out.values = diff(tmp, shape, a, 1, s.grid->h[a], opt);
    }
    return out;
}

/** @brief Gradient and Hessian of a space-time field, stored per component. */
struct Derivatives {
    Field ut;
    std::vector<Field> grad;               // n
    std::vector<std::vector<Field>> hess;  // n x n, symmetric copies share values

    static Derivatives of(const Field& u, const DiffOptions& opt = {})
    {
        const int n = u.grid->dim();
        Derivatives d;
        d.ut = dt(u, opt);
        d.grad.reserve(n);
        for (int i = 0; i < n; ++i) d.grad.push_back(dx(u, i, opt));
        d.hess.assign(n, std::vector<Field>(n));
        const auto shape = spacetime_shape(*u.grid);
        for (int i = 0; i < n; ++i) {
            d.hess[i][i] = dxx(u, i, i, opt);
            for (int j = i + 1; j < n; ++j) {
                Field m(u.grid);
                m.values = diff(d.grad[j].values, shape, i, 1, u.grid->h[i], opt);
                d.hess[i][j] = m;
                d.hess[j][i] = std::move(m);
            }
        }
        return d;
    }
};

/**
 * @brief One-sided second-order outward normal derivative at a boundary node.
 *
 * The node sits on a face whose outward normal is sign * e_axis; the stencil reaches inward.
 */
inline double normal_derivative(std::span<const double> slice, const SpaceTimeGrid& g, std::size_t node, int axis,
                                int sign)
{
    long n1 = g.neighbor(node, axis, -sign);
    long n2 = g.neighbor(node, axis, -2 * sign);
    if (n1 < 0 || n2 < 0) throw StencilError("normal stencil leaves the grid");
    return (3.0 * slice[node] - 4.0 * slice[std::size_t(n1)] + slice[std::size_t(n2)]) / (2.0 * g.h[axis]);
}

/** @brief Outward axis normal of a tagged data-boundary node: (axis, sign). */
inline std::pair<int, int> outward_normal(const BoundaryTag& t)
{
    switch (t.kind) {
    case TagKind::Gamma: return {0, -1};
    case TagKind::PrismFacePlus: return {t.axis - 1, +1};
    case TagKind::PrismFaceMinus: return {t.axis - 1, -1};
    default: throw StencilError("node has no axis-aligned normal: " + t.str());
    }
}

}  // namespace carleman::fd
