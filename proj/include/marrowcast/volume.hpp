#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "marrowcast/error.hpp"

namespace marrowcast {

// 2D scalar image, row-major (x fastest).
struct slice2d {
    int w = 0, h = 0;
    std::vector<float> data;

    slice2d() = default;
    slice2d(int width, int height, float fill = 0.0f)
        : w(width), h(height), data(static_cast<std::size_t>(width) * height, fill) {}

    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * w + x;
    }
    float at(int x, int y) const { return data[index(x, y)]; }
    float& at(int x, int y) { return data[index(x, y)]; }
    std::size_t size() const { return data.size(); }
};

// 3D scalar grid with voxel spacing in mm, laid out x-fastest. Millimetre
// coordinates are voxel index times spacing; orientation is identity.
struct voxel_grid {
    int nx = 0, ny = 0, nz = 0;
    double sx = 1.0, sy = 1.0, sz = 1.0;
    std::vector<float> data;

    std::size_t size() const {
        return static_cast<std::size_t>(nx) * ny * nz;
    }
    std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * ny + y) * nx + x;
    }
    float at(int x, int y, int z) const { return data[index(x, y, z)]; }
    float& at(int x, int y, int z) { return data[index(x, y, z)]; }

    bool same_geometry(const voxel_grid& o) const {
        return nx == o.nx && ny == o.ny && nz == o.nz &&
               sx == o.sx && sy == o.sy && sz == o.sz;
    }

    void require_valid(const std::string& what = "volume") const {
        if (nx < 1 || ny < 1 || nz < 1) {
            throw shape_error(what + ": all dims must be >= 1");
        }
        if (!(sx > 0.0) || !(sy > 0.0) || !(sz > 0.0)) {
            throw shape_error(what + ": spacing must be > 0");
        }
        if (data.size() != size()) {
            throw shape_error(what + ": data length does not match dims");
        }
        for (float v : data) {
            if (!std::isfinite(v)) {
                throw numeric_error(what + ": non-finite voxel value");
            }
        }
    }
};

// Intensity volume (arbitrary scalar unit).
struct volume : voxel_grid {};

// Probability-or-binary mask; values live in [0, 1]. Also used for the
// reconstructed per-voxel risk map.
struct mask_volume : voxel_grid {
    void require_mask_range(const std::string& what = "mask") const {
        for (float v : data) {
            if (v < 0.0f || v > 1.0f) {
                throw shape_error(what + ": mask value outside [0, 1]");
            }
        }
    }
};

using risk_volume = mask_volume;

inline volume make_volume(int nx, int ny, int nz, double sx = 1.0, double sy = 1.0,
                          double sz = 1.0, float fill = 0.0f) {
    volume v;
    v.nx = nx; v.ny = ny; v.nz = nz;
    v.sx = sx; v.sy = sy; v.sz = sz;
    v.data.assign(static_cast<std::size_t>(nx) * ny * nz, fill);
    return v;
}

inline mask_volume make_mask(int nx, int ny, int nz, double sx = 1.0, double sy = 1.0,
                             double sz = 1.0, float fill = 0.0f) {
    mask_volume m;
    m.nx = nx; m.ny = ny; m.nz = nz;
    m.sx = sx; m.sy = sy; m.sz = sz;
    m.data.assign(static_cast<std::size_t>(nx) * ny * nz, fill);
    return m;
}

// Copy of the (nx x ny) plane at z = k.
inline slice2d axial_slice(const voxel_grid& v, int k) {
    if (k < 0 || k >= v.nz) {
        throw shape_error("axial_slice: slice index " + std::to_string(k) +
                          " out of range [0, " + std::to_string(v.nz) + ")");
    }
    slice2d s(v.nx, v.ny);
    const std::size_t plane = static_cast<std::size_t>(v.nx) * v.ny;
    std::copy_n(v.data.begin() + static_cast<std::ptrdiff_t>(plane) * k, plane,
                s.data.begin());
    return s;
}

inline void set_axial_slice(voxel_grid& v, int k, const slice2d& s) {
    if (k < 0 || k >= v.nz) {
        throw shape_error("set_axial_slice: slice index out of range");
    }
    if (s.w != v.nx || s.h != v.ny) {
        throw shape_error("set_axial_slice: slice dims do not match volume");
    }
    const std::size_t plane = static_cast<std::size_t>(v.nx) * v.ny;
    std::copy_n(s.data.begin(), plane,
                v.data.begin() + static_cast<std::ptrdiff_t>(plane) * k);
}

namespace detail {

// Sorted-order percentile with index floor(p/100 * N), clamped to the last
// element. For N=1000 this anchors p1/p99 at ranks 10 and 990.
inline float percentile_sorted(const std::vector<float>& sorted, double p) {
    std::size_t idx = static_cast<std::size_t>(std::floor(p / 100.0 * sorted.size()));
    if (idx >= sorted.size()) idx = sorted.size() - 1;
    return sorted[idx];
}

} // namespace detail

// Map the 1st/99th intensity percentiles to 0/1 and clamp. A constant volume
// normalizes to all zeros (degenerate but accepted).
inline volume normalize_intensity(const volume& v) {
    if (v.data.empty()) {
        throw degenerate_input_error("normalize_intensity: empty volume");
    }
    bool any_nonzero = false;
    for (float x : v.data) {
        if (x != 0.0f) { any_nonzero = true; break; }
    }
    if (!any_nonzero) {
        throw degenerate_input_error("normalize_intensity: all-zero volume");
    }
    std::vector<float> sorted(v.data);
    std::sort(sorted.begin(), sorted.end());
    const float lo = detail::percentile_sorted(sorted, 1.0);
    const float hi = detail::percentile_sorted(sorted, 99.0);
    volume out = v;
    if (!(hi > lo)) {
        std::fill(out.data.begin(), out.data.end(), 0.0f);
        return out;
    }
    const float span = hi - lo;
    for (float& x : out.data) {
        x = std::clamp((x - lo) / span, 0.0f, 1.0f);
    }
    return out;
}

} // namespace marrowcast
