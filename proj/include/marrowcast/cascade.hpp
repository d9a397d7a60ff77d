#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "marrowcast/error.hpp"
#include "marrowcast/patches.hpp"
#include "marrowcast/phantom.hpp"
#include "marrowcast/rng.hpp"
#include "marrowcast/unet.hpp"
#include "marrowcast/volume.hpp"

namespace marrowcast {

namespace detail {

// Slices are zero-padded centered to the net input size (never resampled, so
// annotation geometry stays exact); crop_center inverts the padding.
inline slice2d pad_center(const slice2d& s, int size) {
    if (s.w > size || s.h > size) {
        throw shape_error("slice " + std::to_string(s.w) + "x" + std::to_string(s.h) +
                          " exceeds net input size " + std::to_string(size));
    }
    if (s.w == size && s.h == size) return s;
    slice2d out(size, size, 0.0f);
    const int ox = (size - s.w) / 2, oy = (size - s.h) / 2;
    for (int y = 0; y < s.h; ++y) {
        std::copy_n(s.data.begin() + s.index(0, y), static_cast<std::size_t>(s.w),
                    out.data.begin() + out.index(ox, oy + y));
    }
    return out;
}

inline slice2d crop_center(const slice2d& s, int w, int h) {
    if (s.w == w && s.h == h) return s;
    slice2d out(w, h, 0.0f);
    const int ox = (s.w - w) / 2, oy = (s.h - h) / 2;
    for (int y = 0; y < h; ++y) {
        std::copy_n(s.data.begin() + s.index(ox, oy + y), static_cast<std::size_t>(w),
                    out.data.begin() + out.index(0, y));
    }
    return out;
}

inline tensor4f slice_to_tensor(const slice2d& s) {
    tensor4f t(1, 1, s.h, s.w);
    std::copy(s.data.begin(), s.data.end(), t.data.begin());
    return t;
}

inline slice2d tensor_to_slice(const tensor4f& t, int ni = 0, int ci = 0) {
    slice2d s(t.w, t.h, 0.0f);
    std::copy_n(t.plane(ni, ci), s.data.size(), s.data.begin());
    return s;
}

inline tensor4f binarize_tensor(tensor4f t) {
    for (float& v : t.data) v = v >= 0.5f ? 1.0f : 0.0f;
    return t;
}

} // namespace detail

struct slice_ref {
    std::string patient_id;
    int z = 0;
};

struct bone_dataset {
    training_set pairs;
    std::vector<slice_ref> refs;
};

// Every axial slice of every baseline image, paired with its bone mask slice,
// both padded to the net input size.
inline bone_dataset build_bone_dataset(const std::vector<longitudinal_case>& cases,
                                       int input_size) {
    if (cases.empty()) {
        throw degenerate_input_error("build_bone_dataset: empty cohort");
    }
    bone_dataset ds;
    for (const longitudinal_case& c : cases) {
        if (!c.i_t.same_geometry(c.b_t)) {
            throw shape_error("build_bone_dataset: image/mask geometry mismatch for " +
                              c.patient_id);
        }
        for (int z = 0; z < c.i_t.nz; ++z) {
            training_pair p;
            p.input = detail::slice_to_tensor(detail::pad_center(axial_slice(c.i_t, z), input_size));
            p.target = detail::binarize_tensor(
                detail::slice_to_tensor(detail::pad_center(axial_slice(c.b_t, z), input_size)));
            ds.pairs.push_back(std::move(p));
            ds.refs.push_back({c.patient_id, z});
        }
    }
    return ds;
}

enum class bone_source { ground_truth, bonenet };

inline std::string to_string(bone_source s) {
    return s == bone_source::ground_truth ? "ground_truth" : "bonenet";
}

inline bone_source bone_source_from_string(const std::string& s) {
    if (s == "ground_truth") return bone_source::ground_truth;
    if (s == "bonenet") return bone_source::bonenet;
    throw config_error("unknown bone source '" + s + "'");
}

struct patch_ref {
    std::string patient_id;
    int z = 0;
    int cx = 0, cy = 0;
};

struct lesion_dataset {
    training_set pairs;
    std::vector<patch_ref> refs;
    std::size_t n_pos = 0, n_neg = 0; // target-pixel counts over the whole set

    // N_neg/N_pos with floor 1 and cap 100; feeds the weighted BCE.
    double imbalance_w_pos() const {
        const double ratio =
            static_cast<double>(n_neg) / static_cast<double>(std::max<std::size_t>(n_pos, 1));
        return std::clamp(ratio, 1.0, 100.0);
    }
};

struct lesion_dataset_options {
    bone_source source = bone_source::ground_truth;
    const unet_model* bonenet = nullptr; // required for bone_source::bonenet
    int patch_size = 64;
    int stride = 2;
    double threshold = 0.5;
    int dilate_radius = 2;
};

namespace detail {

inline slice2d bonenet_probability_slice(const unet_model& net, const slice2d& s) {
    const tensor4f x = slice_to_tensor(pad_center(s, net.config.input_size));
    const tensor4f p = forward(net, x);
    return crop_center(tensor_to_slice(p), s.w, s.h);
}

} // namespace detail

// Per slice: bone map (ground truth or BoneNet) -> binarize_and_dilate ->
// mask_crop the baseline image -> sliding-window patches; targets are the
// matching windows of the aligned follow-up annotation.
inline lesion_dataset build_lesion_dataset(const std::vector<longitudinal_case>& cases,
                                           const lesion_dataset_options& opt) {
    if (cases.empty()) {
        throw degenerate_input_error("build_lesion_dataset: empty cohort");
    }
    if (opt.source == bone_source::bonenet && opt.bonenet == nullptr) {
        throw config_error("build_lesion_dataset: bonenet source requires a model");
    }
    lesion_dataset ds;
    for (const longitudinal_case& c : cases) {
        if (!c.i_t.same_geometry(c.a_t1)) {
            throw shape_error("build_lesion_dataset: image/annotation geometry mismatch for " +
                              c.patient_id);
        }
        for (int z = 0; z < c.i_t.nz; ++z) {
            const slice2d img = axial_slice(c.i_t, z);
            slice2d bone_prob = opt.source == bone_source::ground_truth
                                    ? axial_slice(c.b_t, z)
                                    : detail::bonenet_probability_slice(*opt.bonenet, img);
            const slice2d mask = binarize_and_dilate(bone_prob, opt.threshold, opt.dilate_radius);
            const slice2d cropped = mask_crop(img, mask);
            patch_batch pb = extract_patches(cropped, mask, opt.patch_size, opt.stride);
            if (pb.grid.centers.empty()) continue;
            const slice2d target_slice = axial_slice(c.a_t1, z);
            tensor4f targets = detail::binarize_tensor(extract_windows(target_slice, pb.grid));
            for (int pi = 0; pi < pb.patches.n; ++pi) {
                training_pair pair;
                pair.input = tensor4f(1, 1, opt.patch_size, opt.patch_size);
                pair.target = tensor4f(1, 1, opt.patch_size, opt.patch_size);
                std::copy_n(pb.patches.plane(pi, 0), pair.input.data.size(),
                            pair.input.data.begin());
                std::copy_n(targets.plane(pi, 0), pair.target.data.size(),
                            pair.target.data.begin());
                for (float v : pair.target.data) {
                    if (v >= 0.5f) ++ds.n_pos; else ++ds.n_neg;
                }
                ds.pairs.push_back(std::move(pair));
                const auto& [cx, cy] = pb.grid.centers[static_cast<std::size_t>(pi)];
                ds.refs.push_back({c.patient_id, z, cx, cy});
            }
        }
    }
    return ds;
}

// Deterministically subsample a lesion dataset down to `max_pairs` (seeded
// shuffle, then keep the first max_pairs in shuffled order). Counts are
// recomputed over the kept pairs.
inline lesion_dataset subsample_lesion_dataset(lesion_dataset ds, std::size_t max_pairs,
                                               std::uint64_t seed) {
    if (max_pairs == 0 || ds.pairs.size() <= max_pairs) return ds;
    std::vector<std::size_t> order(ds.pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_stream rng(seed, "patch-subsample");
    rng.shuffle(order);
    order.resize(max_pairs);
    std::sort(order.begin(), order.end());
    lesion_dataset out;
    out.pairs.reserve(max_pairs);
    out.refs.reserve(max_pairs);
    for (std::size_t i : order) {
        for (float v : ds.pairs[i].target.data) {
            if (v >= 0.5f) ++out.n_pos; else ++out.n_neg;
        }
        out.pairs.push_back(std::move(ds.pairs[i]));
        out.refs.push_back(ds.refs[i]);
    }
    return out;
}

struct cascade_pipeline {
    unet_model bonenet;
    unet_model lesionnet;
    double threshold = 0.5;
    int dilate_radius = 2;
    int patch_size = 64;
    int stride = 2;
    fusion_mode fusion = fusion_mode::mean;
    int inference_batch = 64;

    void validate() const {
        if (lesionnet.config.input_size != patch_size) {
            throw config_error("cascade: lesionnet input_size " +
                               std::to_string(lesionnet.config.input_size) +
                               " != patch_size " + std::to_string(patch_size));
        }
        if (stride < 1 || patch_size < 1 || dilate_radius < 0) {
            throw config_error("cascade: invalid patch/stride/dilation settings");
        }
    }
};

struct risk_prediction {
    mask_volume bone_prob; // BoneNet probability per voxel
    risk_volume risk;      // fused LesionNet output, masked to dilated bone
};

namespace detail {

inline tensor4f run_batched(const unet_model& net, const tensor4f& patches, int batch) {
    tensor4f out(patches.n, 1, patches.h, patches.w);
    const std::size_t sample = static_cast<std::size_t>(patches.c) *
                               static_cast<std::size_t>(patches.h) *
                               static_cast<std::size_t>(patches.w);
    const std::size_t out_sample = static_cast<std::size_t>(patches.h) * patches.w;
    for (int begin = 0; begin < patches.n; begin += batch) {
        const int end = std::min(begin + batch, patches.n);
        tensor4f chunk(end - begin, patches.c, patches.h, patches.w);
        std::copy_n(patches.data.begin() + static_cast<std::ptrdiff_t>(begin * sample),
                    static_cast<std::size_t>(end - begin) * sample, chunk.data.begin());
        const tensor4f pred = forward(net, chunk);
        std::copy_n(pred.data.begin(), static_cast<std::size_t>(end - begin) * out_sample,
                    out.data.begin() + static_cast<std::ptrdiff_t>(begin * out_sample));
    }
    return out;
}

} // namespace detail

// Two-stage inference on a normalized baseline volume: BoneNet per slice,
// LesionNet on patches inside the dilated predicted bone, fused back into a
// volumetric risk map. Risk is zero outside the dilated bone mask.
inline risk_prediction predict_risk_volume(const cascade_pipeline& pipe, const volume& i_t) {
    pipe.validate();
    i_t.require_valid("predict_risk_volume input");
    risk_prediction out;
    out.bone_prob = make_mask(i_t.nx, i_t.ny, i_t.nz, i_t.sx, i_t.sy, i_t.sz);
    out.risk = make_mask(i_t.nx, i_t.ny, i_t.nz, i_t.sx, i_t.sy, i_t.sz);
    for (int z = 0; z < i_t.nz; ++z) {
        const slice2d img = axial_slice(i_t, z);
        const slice2d prob = detail::bonenet_probability_slice(pipe.bonenet, img);
        set_axial_slice(out.bone_prob, z, prob);
        const slice2d mask = binarize_and_dilate(prob, pipe.threshold, pipe.dilate_radius);
        const slice2d cropped = mask_crop(img, mask);
        const patch_batch pb = extract_patches(cropped, mask, pipe.patch_size, pipe.stride);
        if (pb.grid.centers.empty()) continue; // no bone detected: risk stays zero
        const tensor4f preds = detail::run_batched(pipe.lesionnet, pb.patches, pipe.inference_batch);
        risk_slice rs = reconstruct_risk_map(pb.grid, preds, pipe.fusion);
        for (std::size_t i = 0; i < rs.risk.data.size(); ++i) {
            if (mask.data[i] < 0.5f) rs.risk.data[i] = 0.0f;
        }
        set_axial_slice(out.risk, z, rs.risk);
    }
    return out;
}

} // namespace marrowcast
