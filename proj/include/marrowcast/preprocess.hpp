#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "marrowcast/affine.hpp"
#include "marrowcast/error.hpp"
#include "marrowcast/phantom.hpp"
#include "marrowcast/volume.hpp"

namespace marrowcast {

namespace detail {

// Separable zero-padded Gaussian along one axis, in place. The kernel is left
// unnormalized: callers smooth a numerator and a denominator with the same
// kernel, so the scale cancels.
inline void blur_axis(std::vector<double>& f, int nx, int ny, int nz, int axis, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (int k = -radius; k <= radius; ++k) {
        kernel[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (sigma * sigma));
    }
    const int n = axis == 0 ? nx : axis == 1 ? ny : nz;
    const std::size_t stride = axis == 0 ? 1
                             : axis == 1 ? static_cast<std::size_t>(nx)
                                         : static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny);
    std::vector<double> line(static_cast<std::size_t>(n));
    const int n_lines_a = axis == 0 ? ny : nx;
    const int n_lines_b = axis == 2 ? ny : nz;
    for (int b = 0; b < n_lines_b; ++b) {
        for (int a = 0; a < n_lines_a; ++a) {
            // axis 0: lines over x at (y=a, z=b); axis 1: over y at (x=a, z=b);
            // axis 2: over z at (x=a, y=b)
            std::size_t base;
            if (axis == 0) base = (static_cast<std::size_t>(b) * ny + a) * nx;
            else if (axis == 1) base = static_cast<std::size_t>(b) * ny * nx + static_cast<std::size_t>(a);
            else base = static_cast<std::size_t>(b) * nx + static_cast<std::size_t>(a);
            for (int i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = f[base + static_cast<std::size_t>(i) * stride];
            for (int i = 0; i < n; ++i) {
                double acc = 0.0;
                const int k_lo = std::max(-radius, -i);
                const int k_hi = std::min(radius, n - 1 - i);
                for (int k = k_lo; k <= k_hi; ++k) {
                    acc += kernel[static_cast<std::size_t>(k + radius)] * line[static_cast<std::size_t>(i + k)];
                }
                f[base + static_cast<std::size_t>(i) * stride] = acc;
            }
        }
    }
}

} // namespace detail

// Homomorphic bias-field correction: estimate a smooth log-intensity field by
// normalized Gaussian smoothing over the nonzero support, divide it out, and
// rescale so the mean over nonzero voxels is preserved. Zeros stay zero.
inline volume bias_correct(const volume& v, double fwhm_mm) {
    v.require_valid();
    if (fwhm_mm <= 0.0) {
        throw config_error("bias_correct: fwhm_mm must be > 0");
    }
    const std::size_t n = v.data.size();
    std::vector<double> log_masked(n, 0.0), mask(n, 0.0);
    double sum_in = 0.0;
    std::size_t n_in = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (v.data[i] > 0.0f) {
            mask[i] = 1.0;
            log_masked[i] = std::log(static_cast<double>(v.data[i]));
            sum_in += v.data[i];
            ++n_in;
        }
    }
    if (n_in == 0) {
        throw degenerate_input_error("bias_correct: volume has no nonzero voxels");
    }

    constexpr double fwhm_to_sigma = 2.354820045030949; // 2*sqrt(2*ln 2)
    const double sig_x = fwhm_mm / fwhm_to_sigma / v.sx;
    const double sig_y = fwhm_mm / fwhm_to_sigma / v.sy;
    const double sig_z = fwhm_mm / fwhm_to_sigma / v.sz;
    for (int axis = 0; axis < 3; ++axis) {
        const double s = axis == 0 ? sig_x : axis == 1 ? sig_y : sig_z;
        detail::blur_axis(log_masked, v.nx, v.ny, v.nz, axis, s);
        detail::blur_axis(mask, v.nx, v.ny, v.nz, axis, s);
    }

    volume out = v;
    double sum_out = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (v.data[i] > 0.0f && mask[i] > 1e-12) {
            const double field = log_masked[i] / mask[i];
            out.data[i] = static_cast<float>(v.data[i] / std::exp(field));
            sum_out += out.data[i];
        }
    }
    if (sum_out <= 0.0) {
        throw numeric_error("bias_correct: corrected volume lost its foreground");
    }
    const double rescale = sum_in / sum_out;
    for (std::size_t i = 0; i < n; ++i) {
        if (v.data[i] > 0.0f) {
            out.data[i] = static_cast<float>(out.data[i] * rescale);
        }
    }
    return out;
}

namespace detail {

struct interp_sample {
    double value;
    double gx, gy, gz; // d(value)/d(mm)
    bool inside;
};

// Trilinear interpolation at a point given in mm, with the analytic gradient
// of the interpolant. Points outside the grid report inside=false.
inline interp_sample sample_trilinear(const voxel_grid& v, const point3& p_mm) {
    interp_sample s{0.0, 0.0, 0.0, 0.0, false};
    const double fx = p_mm.x / v.sx;
    const double fy = p_mm.y / v.sy;
    const double fz = p_mm.z / v.sz;
    if (fx < 0.0 || fy < 0.0 || fz < 0.0 ||
        fx > v.nx - 1 || fy > v.ny - 1 || fz > v.nz - 1) {
        return s;
    }
    int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy), z0 = static_cast<int>(fz);
    if (x0 == v.nx - 1 && v.nx > 1) --x0;
    if (y0 == v.ny - 1 && v.ny > 1) --y0;
    if (z0 == v.nz - 1 && v.nz > 1) --z0;
    const int x1 = std::min(x0 + 1, v.nx - 1);
    const int y1 = std::min(y0 + 1, v.ny - 1);
    const int z1 = std::min(z0 + 1, v.nz - 1);
    const double wx = fx - x0, wy = fy - y0, wz = fz - z0;

    const double c000 = v.data[v.index(x0, y0, z0)], c100 = v.data[v.index(x1, y0, z0)];
    const double c010 = v.data[v.index(x0, y1, z0)], c110 = v.data[v.index(x1, y1, z0)];
    const double c001 = v.data[v.index(x0, y0, z1)], c101 = v.data[v.index(x1, y0, z1)];
    const double c011 = v.data[v.index(x0, y1, z1)], c111 = v.data[v.index(x1, y1, z1)];

    const double c00 = c000 + (c100 - c000) * wx;
    const double c10 = c010 + (c110 - c010) * wx;
    const double c01 = c001 + (c101 - c001) * wx;
    const double c11 = c011 + (c111 - c011) * wx;
    const double c0 = c00 + (c10 - c00) * wy;
    const double c1 = c01 + (c11 - c01) * wy;
    s.value = c0 + (c1 - c0) * wz;

    const double dx00 = c100 - c000, dx10 = c110 - c010, dx01 = c101 - c001, dx11 = c111 - c011;
    const double dx0 = dx00 + (dx10 - dx00) * wy;
    const double dx1 = dx01 + (dx11 - dx01) * wy;
    s.gx = (dx0 + (dx1 - dx0) * wz) / v.sx;
    const double dy0 = (c10 - c00);
    const double dy1 = (c11 - c01);
    s.gy = (dy0 + (dy1 - dy0) * wz) / v.sy;
    s.gz = (c1 - c0) / v.sz;
    s.inside = true;
    return s;
}

inline voxel_grid downsample2(const voxel_grid& v) {
    voxel_grid out;
    out.nx = std::max(1, (v.nx + 1) / 2);
    out.ny = std::max(1, (v.ny + 1) / 2);
    out.nz = std::max(1, (v.nz + 1) / 2);
    out.sx = v.sx * v.nx / out.nx;
    out.sy = v.sy * v.ny / out.ny;
    out.sz = v.sz * v.nz / out.nz;
    out.data.assign(static_cast<std::size_t>(out.nx) * out.ny * out.nz, 0.0f);
    for (int z = 0; z < out.nz; ++z) {
        for (int y = 0; y < out.ny; ++y) {
            for (int x = 0; x < out.nx; ++x) {
                double acc = 0.0;
                int cnt = 0;
                for (int dz = 0; dz < 2; ++dz) {
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            const int sxi = 2 * x + dx, syi = 2 * y + dy, szi = 2 * z + dz;
                            if (sxi < v.nx && syi < v.ny && szi < v.nz) {
                                acc += v.data[v.index(sxi, syi, szi)];
                                ++cnt;
                            }
                        }
                    }
                }
                out.data[out.index(x, y, z)] = static_cast<float>(acc / cnt);
            }
        }
    }
    return out;
}

// 12-parameter warp W(x) = A(x - c) + c + t evaluated around a fixed center.
struct warp_params {
    std::array<double, 9> a{1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::array<double, 3> t{0, 0, 0};
    point3 c{0, 0, 0};

    point3 apply(const point3& p) const {
        const double ux = p.x - c.x, uy = p.y - c.y, uz = p.z - c.z;
        return {a[0] * ux + a[1] * uy + a[2] * uz + c.x + t[0],
                a[3] * ux + a[4] * uy + a[5] * uz + c.y + t[1],
                a[6] * ux + a[7] * uy + a[8] * uz + c.z + t[2]};
    }

    affine_transform to_transform() const {
        affine_transform m = affine_transform::identity();
        for (int r = 0; r < 3; ++r) {
            for (int col = 0; col < 3; ++col) {
                m.m[static_cast<std::size_t>(4 * r + col)] = a[static_cast<std::size_t>(3 * r + col)];
            }
        }
        // A(x - c) + c + t  ==  A x + (c + t - A c)
        const point3 ac = {a[0] * c.x + a[1] * c.y + a[2] * c.z,
                           a[3] * c.x + a[4] * c.y + a[5] * c.z,
                           a[6] * c.x + a[7] * c.y + a[8] * c.z};
        m.m[3] = c.x + t[0] - ac.x;
        m.m[7] = c.y + t[1] - ac.y;
        m.m[11] = c.z + t[2] - ac.z;
        return m;
    }
};

struct ssd_eval {
    double objective;
    bool valid;
};

// Mean squared difference over fixed voxels whose warp lands inside the
// moving volume. Candidates with under 10% overlap are treated as invalid.
inline ssd_eval ssd_objective(const voxel_grid& fixed, const voxel_grid& moving,
                              const warp_params& w) {
    double acc = 0.0;
    std::size_t n_in = 0;
    for (int z = 0; z < fixed.nz; ++z) {
        for (int y = 0; y < fixed.ny; ++y) {
            for (int x = 0; x < fixed.nx; ++x) {
                const point3 p{x * fixed.sx, y * fixed.sy, z * fixed.sz};
                const interp_sample s = sample_trilinear(moving, w.apply(p));
                if (!s.inside) continue;
                const double r = fixed.data[fixed.index(x, y, z)] - s.value;
                acc += r * r;
                ++n_in;
            }
        }
    }
    if (n_in < fixed.data.size() / 10 || n_in == 0) {
        return {0.0, false};
    }
    const double obj = acc / static_cast<double>(n_in);
    return {obj, std::isfinite(obj)};
}

struct ssd_gradient {
    std::array<double, 9> ga{};
    std::array<double, 3> gt{};
};

inline ssd_gradient ssd_grad(const voxel_grid& fixed, const voxel_grid& moving,
                             const warp_params& w) {
    ssd_gradient g;
    std::size_t n_in = 0;
    for (int z = 0; z < fixed.nz; ++z) {
        for (int y = 0; y < fixed.ny; ++y) {
            for (int x = 0; x < fixed.nx; ++x) {
                const point3 p{x * fixed.sx, y * fixed.sy, z * fixed.sz};
                const interp_sample s = sample_trilinear(moving, w.apply(p));
                if (!s.inside) continue;
                const double r = fixed.data[fixed.index(x, y, z)] - s.value;
                const double u[3] = {p.x - w.c.x, p.y - w.c.y, p.z - w.c.z};
                const double gv[3] = {s.gx, s.gy, s.gz};
                for (int row = 0; row < 3; ++row) {
                    const double common = -2.0 * r * gv[row];
                    g.gt[static_cast<std::size_t>(row)] += common;
                    for (int col = 0; col < 3; ++col) {
                        g.ga[static_cast<std::size_t>(3 * row + col)] += common * u[col];
                    }
                }
                ++n_in;
            }
        }
    }
    if (n_in > 0) {
        for (double& v : g.ga) v /= static_cast<double>(n_in);
        for (double& v : g.gt) v /= static_cast<double>(n_in);
    }
    return g;
}

// Gradient descent with a trust-region style step: the update direction is
// scaled so the largest voxel displacement equals the current step length,
// which halves on rejection and grows modestly on acceptance.
inline void register_level(const voxel_grid& fixed, const voxel_grid& moving, warp_params& w,
                           int max_iter, double rel_tol) {
    ssd_eval cur = ssd_objective(fixed, moving, w);
    if (!cur.valid) {
        throw numeric_error("register_affine: objective not finite at starting transform");
    }
    const double hx = 0.5 * fixed.nx * fixed.sx;
    const double hy = 0.5 * fixed.ny * fixed.sy;
    const double hz = 0.5 * fixed.nz * fixed.sz;
    const double h[3] = {std::max(hx, 1.0), std::max(hy, 1.0), std::max(hz, 1.0)};
    double step_mm = 2.0 * std::max({fixed.sx, fixed.sy, fixed.sz});
    const double min_step = 1e-3;

    for (int iter = 0; iter < max_iter; ++iter) {
        const ssd_gradient g = ssd_grad(fixed, moving, w);
        std::array<double, 9> da{};
        std::array<double, 3> dt{};
        double disp = 0.0;
        for (int row = 0; row < 3; ++row) {
            dt[static_cast<std::size_t>(row)] = g.gt[static_cast<std::size_t>(row)];
            double row_disp = std::abs(dt[static_cast<std::size_t>(row)]);
            for (int col = 0; col < 3; ++col) {
                const std::size_t k = static_cast<std::size_t>(3 * row + col);
                da[k] = g.ga[k] / (h[col] * h[col]);
                row_disp += std::abs(da[k]) * h[col];
            }
            disp = std::max(disp, row_disp);
        }
        if (disp <= 0.0) return;

        bool accepted = false;
        while (step_mm >= min_step) {
            const double lambda = step_mm / disp;
            warp_params trial = w;
            for (std::size_t k = 0; k < 9; ++k) trial.a[k] -= lambda * da[k];
            for (std::size_t k = 0; k < 3; ++k) trial.t[k] -= lambda * dt[k];
            const ssd_eval cand = ssd_objective(fixed, moving, trial);
            if (cand.valid && cand.objective < cur.objective) {
                const double improvement = cur.objective - cand.objective;
                w = trial;
                cur = cand;
                step_mm = std::min(step_mm * 1.5, 4.0 * std::max({fixed.sx, fixed.sy, fixed.sz}));
                accepted = true;
                if (improvement <= rel_tol * std::max(cur.objective, 1e-30)) return;
                break;
            }
            step_mm *= 0.5;
        }
        if (!accepted) return;
    }
}

} // namespace detail

// Coarse-to-fine SSD registration. Returns the moving->fixed map; by
// construction its objective is never worse than the identity's.
inline affine_transform register_affine(const volume& fixed, const volume& moving, int levels) {
    fixed.require_valid();
    moving.require_valid();
    if (levels < 1) {
        throw config_error("register_affine: levels must be >= 1");
    }

    std::vector<voxel_grid> fixed_pyr{fixed}, moving_pyr{moving};
    for (int l = 1; l < levels; ++l) {
        if (fixed_pyr.back().nx < 8 || fixed_pyr.back().ny < 8 || fixed_pyr.back().nz < 2) break;
        fixed_pyr.push_back(detail::downsample2(fixed_pyr.back()));
        moving_pyr.push_back(detail::downsample2(moving_pyr.back()));
    }

    // Optimize the fixed->moving pullback; invert at the end.
    detail::warp_params w;
    w.c = {0.5 * fixed.nx * fixed.sx, 0.5 * fixed.ny * fixed.sy, 0.5 * fixed.nz * fixed.sz};
    for (std::size_t l = fixed_pyr.size(); l-- > 0;) {
        detail::register_level(fixed_pyr[l], moving_pyr[l], w, 200, 1e-6);
    }

    // Safety net: never return something worse than the identity.
    detail::warp_params identity;
    identity.c = w.c;
    const detail::ssd_eval at_identity = detail::ssd_objective(fixed, moving, identity);
    const detail::ssd_eval at_solution = detail::ssd_objective(fixed, moving, w);
    if (!at_solution.valid || (at_identity.valid && at_identity.objective < at_solution.objective)) {
        w = identity;
    }
    return w.to_transform().inverse();
}

// Resample onto the geometry of `target`. `pullback` maps target-space mm
// coordinates to source-space mm coordinates (so warping a moving image into
// fixed space uses the inverse of the moving->fixed transform).
inline volume resample(const volume& v, const affine_transform& pullback, const voxel_grid& target) {
    v.require_valid();
    volume out = make_volume(target.nx, target.ny, target.nz, target.sx, target.sy, target.sz);
    std::size_t i = 0;
    for (int z = 0; z < target.nz; ++z) {
        for (int y = 0; y < target.ny; ++y) {
            for (int x = 0; x < target.nx; ++x, ++i) {
                const point3 p = pullback.apply({x * target.sx, y * target.sy, z * target.sz});
                const detail::interp_sample s = detail::sample_trilinear(v, p);
                out.data[i] = s.inside ? static_cast<float>(s.value) : 0.0f;
            }
        }
    }
    return out;
}

inline mask_volume resample(const mask_volume& m, const affine_transform& pullback,
                            const voxel_grid& target) {
    m.require_valid();
    m.require_mask_range();
    mask_volume out = make_mask(target.nx, target.ny, target.nz, target.sx, target.sy, target.sz);
    std::size_t i = 0;
    for (int z = 0; z < target.nz; ++z) {
        for (int y = 0; y < target.ny; ++y) {
            for (int x = 0; x < target.nx; ++x, ++i) {
                const point3 p = pullback.apply({x * target.sx, y * target.sy, z * target.sz});
                const int sxi = static_cast<int>(std::lround(p.x / m.sx));
                const int syi = static_cast<int>(std::lround(p.y / m.sy));
                const int szi = static_cast<int>(std::lround(p.z / m.sz));
                if (sxi < 0 || syi < 0 || szi < 0 || sxi >= m.nx || syi >= m.ny || szi >= m.nz) {
                    out.data[i] = 0.0f;
                } else {
                    out.data[i] = m.data[m.index(sxi, syi, szi)] >= 0.5f ? 1.0f : 0.0f;
                }
            }
        }
    }
    return out;
}

// Register the follow-up image to baseline and carry image and annotation into
// the baseline frame. Records the recovered moving->fixed transform.
inline longitudinal_case align_pair(const longitudinal_case& c, int levels = 3) {
    if (!c.i_t.same_geometry(c.i_t1)) {
        throw shape_error("align_pair: time points have mismatched geometry");
    }
    const affine_transform m = register_affine(c.i_t, c.i_t1, levels);
    const affine_transform pullback = m.inverse();
    longitudinal_case out = c;
    out.i_t1 = resample(c.i_t1, pullback, c.i_t);
    out.a_t1 = resample(c.a_t1, pullback, c.i_t);
    out.alignment_transform = m;
    return out;
}

struct preprocess_options {
    bool bias_correct = true;
    double bias_fwhm_mm = 120.0;
    bool normalize = true;
    bool align = true;
    int registration_levels = 3;
};

inline longitudinal_case preprocess_case(const longitudinal_case& c, const preprocess_options& opt) {
    longitudinal_case out = c;
    if (opt.bias_correct) {
        out.i_t = bias_correct(out.i_t, opt.bias_fwhm_mm);
        out.i_t1 = bias_correct(out.i_t1, opt.bias_fwhm_mm);
    }
    if (opt.normalize) {
        out.i_t = normalize_intensity(out.i_t);
        out.i_t1 = normalize_intensity(out.i_t1);
    }
    if (opt.align) {
        out = align_pair(out, opt.registration_levels);
    }
    out.preprocessed = true;
    return out;
}

} // namespace marrowcast
