#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#include "marrowcast/error.hpp"
#include "marrowcast/tensor.hpp"
#include "marrowcast/volume.hpp"

namespace marrowcast {

// Threshold at `threshold` (>= rule: 0.5 counts as bone) and dilate by a
// Euclidean disk: offsets with dx^2 + dy^2 <= radius^2 (13 pixels at r = 2).
inline slice2d binarize_and_dilate(const slice2d& bone_prob, double threshold = 0.5,
                                   int radius_px = 2) {
    if (radius_px < 0) {
        throw config_error("binarize_and_dilate: radius must be >= 0");
    }
    std::vector<std::pair<int, int>> disk;
    for (int dy = -radius_px; dy <= radius_px; ++dy) {
        for (int dx = -radius_px; dx <= radius_px; ++dx) {
            if (dx * dx + dy * dy <= radius_px * radius_px) {
                disk.emplace_back(dx, dy);
            }
        }
    }
    slice2d out(bone_prob.w, bone_prob.h, 0.0f);
    for (int y = 0; y < bone_prob.h; ++y) {
        for (int x = 0; x < bone_prob.w; ++x) {
            if (static_cast<double>(bone_prob.at(x, y)) < threshold) continue;
            for (const auto& [dx, dy] : disk) {
                const int px = x + dx, py = y + dy;
                if (px >= 0 && py >= 0 && px < out.w && py < out.h) {
                    out.at(px, py) = 1.0f;
                }
            }
        }
    }
    return out;
}

inline slice2d mask_crop(const slice2d& img, const slice2d& mask) {
    if (img.w != mask.w || img.h != mask.h) {
        throw shape_error("mask_crop: image and mask dims differ");
    }
    slice2d out = img;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] *= mask.data[i];
    }
    return out;
}

// Sliding-window lattice over the bone region. Centers are lattice points
// (step = stride) whose mask value is foreground, in row-major order.
struct patch_grid {
    int patch_size = 64;
    int stride = 2;
    int width = 0, height = 0;
    std::vector<std::pair<int, int>> centers; // (x, y)
};

namespace detail {

// numpy-style 'reflect' (no edge repeat): ... 2 1 | 0 1 2 3 | 2 1 ...
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

} // namespace detail

// Read the window of `img` centered on each grid center, through reflect
// padding at the borders. Used for inputs and for matching target windows.
inline tensor4f extract_windows(const slice2d& img, const patch_grid& grid) {
    if (img.w != grid.width || img.h != grid.height) {
        throw shape_error("extract_windows: image does not match grid dims");
    }
    const int ps = grid.patch_size;
    const int lo = -(ps / 2);
    tensor4f out(static_cast<int>(grid.centers.size()), 1, ps, ps);
    std::size_t o = 0;
    for (const auto& [cx, cy] : grid.centers) {
        for (int dy = 0; dy < ps; ++dy) {
            const int sy = detail::reflect_index(cy + lo + dy, img.h);
            for (int dx = 0; dx < ps; ++dx) {
                const int sx = detail::reflect_index(cx + lo + dx, img.w);
                out.data[o++] = img.at(sx, sy);
            }
        }
    }
    return out;
}

struct patch_batch {
    patch_grid grid;
    tensor4f patches; // (n_centers, 1, patch_size, patch_size)
};

inline patch_batch extract_patches(const slice2d& img, const slice2d& bone_mask, int patch_size,
                                   int stride) {
    if (patch_size < 1 || stride < 1) {
        throw config_error("extract_patches: patch_size and stride must be >= 1");
    }
    if (img.w != bone_mask.w || img.h != bone_mask.h) {
        throw shape_error("extract_patches: image and mask dims differ");
    }
    patch_batch out;
    out.grid.patch_size = patch_size;
    out.grid.stride = stride;
    out.grid.width = img.w;
    out.grid.height = img.h;
    for (int y = 0; y < img.h; y += stride) {
        for (int x = 0; x < img.w; x += stride) {
            if (bone_mask.at(x, y) >= 0.5f) {
                out.grid.centers.emplace_back(x, y);
            }
        }
    }
    out.patches = extract_windows(img, out.grid);
    return out;
}

enum class fusion_mode { mean, max, center_only };

inline std::string to_string(fusion_mode f) {
    switch (f) {
        case fusion_mode::mean: return "mean";
        case fusion_mode::max: return "max";
        case fusion_mode::center_only: return "center_only";
    }
    return "mean";
}

inline fusion_mode fusion_mode_from_string(const std::string& s) {
    if (s == "mean") return fusion_mode::mean;
    if (s == "max") return fusion_mode::max;
    if (s == "center_only") return fusion_mode::center_only;
    throw config_error("unknown fusion mode '" + s + "'");
}

struct risk_slice {
    slice2d risk;
    std::vector<std::uint32_t> coverage;
};

// Fuse per-patch predictions back onto the slice. Pixels a patch window would
// write outside the image (reflected reads at extraction time) are dropped;
// uncovered pixels stay 0.
inline risk_slice reconstruct_risk_map(const patch_grid& grid, const tensor4f& preds,
                                       fusion_mode fusion = fusion_mode::mean) {
    const int ps = grid.patch_size;
    if (preds.n != static_cast<int>(grid.centers.size()) || preds.c != 1 || preds.h != ps ||
        preds.w != ps) {
        throw shape_error("reconstruct_risk_map: predictions " + preds.shape_str() +
                          " do not match grid (" + std::to_string(grid.centers.size()) +
                          " centers, patch " + std::to_string(ps) + ")");
    }
    risk_slice out;
    out.risk = slice2d(grid.width, grid.height, 0.0f);
    out.coverage.assign(out.risk.size(), 0);
    std::vector<double> acc(out.risk.size(), 0.0);
    const int lo = -(ps / 2);
    for (int pi = 0; pi < preds.n; ++pi) {
        const auto& [cx, cy] = grid.centers[static_cast<std::size_t>(pi)];
        const float* p = preds.plane(pi, 0);
        if (fusion == fusion_mode::center_only) {
            const std::size_t idx = out.risk.index(cx, cy);
            acc[idx] += p[static_cast<std::size_t>(-lo) * ps + static_cast<std::size_t>(-lo)];
            out.coverage[idx] += 1;
            continue;
        }
        for (int dy = 0; dy < ps; ++dy) {
            const int y = cy + lo + dy;
            if (y < 0 || y >= grid.height) continue;
            for (int dx = 0; dx < ps; ++dx) {
                const int x = cx + lo + dx;
                if (x < 0 || x >= grid.width) continue;
                const std::size_t idx = out.risk.index(x, y);
                const float v = p[static_cast<std::size_t>(dy) * ps + dx];
                if (fusion == fusion_mode::max) {
                    acc[idx] = out.coverage[idx] == 0 ? v : std::max(acc[idx], static_cast<double>(v));
                } else {
                    acc[idx] += v;
                }
                out.coverage[idx] += 1;
            }
        }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) {
        if (out.coverage[i] == 0) continue;
        out.risk.data[i] = fusion == fusion_mode::max
                               ? static_cast<float>(acc[i])
                               : static_cast<float>(acc[i] / out.coverage[i]);
    }
    return out;
}

} // namespace marrowcast
