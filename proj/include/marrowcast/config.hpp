#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "marrowcast/cascade.hpp"
#include "marrowcast/error.hpp"
#include "marrowcast/phantom.hpp"
#include "marrowcast/preprocess.hpp"
#include "marrowcast/unet.hpp"

namespace marrowcast {

// Everything a run needs, in one document: cohort generation, preprocessing,
// both network configurations, cascade settings, training-data shaping, and
// the evaluation split. Loaded from JSON with strict key checking; a profile
// supplies size-dependent defaults which individual keys may then override.
struct run_config {
    std::string profile = "desk_scale";
    std::uint64_t seed = 1;
    int jobs = 1;
    bool reference_mode = true; // forces jobs=1 so artifacts are byte-stable
    std::string out_dir = "out";

    phantom_params phantom; // phantom.seed is ignored; the global seed drives it
    int n_patients = 12;

    preprocess_options preprocess;

    unet_config bonenet = bonenet_default();
    unet_config lesionnet = lesionnet_default();

    double threshold = 0.5;
    int dilate_radius = 2;
    int stride = 2;
    fusion_mode fusion = fusion_mode::mean;
    int inference_batch = 64;

    int max_bone_slices = 0;   // cap on training slices per epoch set (0 = all)
    int max_train_patches = 0; // cap on lesion training patches (0 = all)
    bool auto_w_pos = true;    // derive lesionnet w_pos from dataset imbalance

    // Slice index where the legs region starts; -1 means use each case's own
    // stored boundary.
    int body_part_boundary = -1;

    int effective_jobs() const { return reference_mode ? 1 : std::max(1, jobs); }

    void validate() const {
        phantom.validate();
        bonenet.validate();
        lesionnet.validate();
        if (profile != "desk_scale" && profile != "paper_scale") {
            throw config_error("config: unknown profile '" + profile + "'");
        }
        if (n_patients < 1) throw config_error("config: n_patients must be >= 1");
        if (jobs < 1) throw config_error("config: jobs must be >= 1");
        if (threshold <= 0.0 || threshold >= 1.0) {
            throw config_error("config: threshold must lie in (0, 1)");
        }
        if (dilate_radius < 0) throw config_error("config: dilate_radius must be >= 0");
        if (stride < 1) throw config_error("config: stride must be >= 1");
        if (inference_batch < 1) throw config_error("config: inference_batch must be >= 1");
        if (max_bone_slices < 0 || max_train_patches < 0) {
            throw config_error("config: training caps must be >= 0");
        }
        if (lesionnet.input_size > bonenet.input_size) {
            throw config_error("config: patch size exceeds slice input size");
        }
        if (phantom.nx > bonenet.input_size || phantom.ny > bonenet.input_size) {
            throw config_error("config: phantom slices larger than bonenet input " +
                               std::to_string(bonenet.input_size));
        }
        if (preprocess.bias_fwhm_mm <= 0.0) {
            throw config_error("config: bias_fwhm_mm must be > 0");
        }
        if (preprocess.registration_levels < 1) {
            throw config_error("config: registration_levels must be >= 1");
        }
    }
};

// Working sizes matching the clinical setup: full-resolution slices and
// standard patches. Training at this scale is for real hardware budgets.
inline void apply_paper_scale(run_config& c) {
    c.phantom = phantom_params{};
    c.phantom.nx = 384;
    c.phantom.ny = 384;
    c.phantom.nz = 48;
    c.phantom.sx = 1.3;
    c.phantom.sy = 1.3;
    c.phantom.sz = 6.0;
    c.phantom.bone_radius_min = 24.0;
    c.phantom.bone_radius_max = 40.0;
    c.phantom.lesion_radius_min = 6.0;
    c.phantom.lesion_radius_max = 12.0;
    c.n_patients = 12;

    c.bonenet = bonenet_default(); // 384, depth 4, bce
    c.bonenet.epochs = 10;
    c.lesionnet = lesionnet_default(); // 64, depth 3, weighted bce
    c.lesionnet.epochs = 10;

    c.threshold = 0.5;
    c.dilate_radius = 2;
    c.stride = 2;
    c.fusion = fusion_mode::mean;
    c.max_bone_slices = 0;
    c.max_train_patches = 0;
}

// Shrunken geometry for fast, fully-deterministic desk runs: 96x96 slices,
// 32x32 patches, small nets, few epochs. The end-to-end experiment finishes
// in minutes on one core.
inline void apply_desk_scale(run_config& c) {
    c.phantom = phantom_params{};
    c.phantom.nx = 96;
    c.phantom.ny = 96;
    c.phantom.nz = 30;
    c.phantom.sx = 2.0;
    c.phantom.sy = 2.0;
    c.phantom.sz = 6.0;
    c.n_patients = 12;

    c.bonenet = bonenet_default();
    c.bonenet.input_size = 96;
    c.bonenet.depth = 3;
    c.bonenet.base_channels = 4;
    c.bonenet.lr = 1e-3;
    c.bonenet.epochs = 2;
    c.bonenet.batch_size = 8;

    c.lesionnet = lesionnet_default();
    c.lesionnet.input_size = 32;
    c.lesionnet.depth = 2;
    c.lesionnet.base_channels = 8;
    c.lesionnet.lr = 1e-3;
    c.lesionnet.epochs = 1;
    c.lesionnet.batch_size = 16;

    c.threshold = 0.5;
    c.dilate_radius = 2;
    c.stride = 4;
    c.fusion = fusion_mode::mean;
    c.max_bone_slices = 0;
    c.max_train_patches = 4000;
}

inline void apply_profile(run_config& c, const std::string& name) {
    if (name == "paper_scale") {
        apply_paper_scale(c);
    } else if (name == "desk_scale") {
        apply_desk_scale(c);
    } else {
        throw config_error("config: unknown profile '" + name + "' (expected 'desk_scale' or "
                           "'paper_scale')");
    }
    c.profile = name;
}

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& where) {
    if (!j.is_object()) {
        throw config_error("config: " + where + " must be a JSON object");
    }
    for (const auto& item : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
            throw config_error("config: unknown key '" + item.key() + "' in " + where);
        }
    }
}

template <typename T>
void assign_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void parse_phantom_section(const nlohmann::json& j, run_config& c) {
    check_keys(j,
               {"dims", "spacing_mm", "n_patients", "n_bones", "n_emerging_lesions",
                "n_stable_lesions", "n_anomalies", "precursor_contrast", "noise_sigma",
                "bias_field", "bias_strength", "bone_radius_px", "lesion_radius_px",
                "resolved_fraction", "misalign_translation_mm", "misalign_rotation_deg",
                "background_level", "bone_level"},
               "phantom");
    phantom_params& p = c.phantom;
    if (j.contains("dims")) {
        const auto d = j.at("dims");
        if (!d.is_array() || d.size() != 3) throw config_error("config: phantom.dims needs 3 ints");
        p.nx = d.at(0).get<int>();
        p.ny = d.at(1).get<int>();
        p.nz = d.at(2).get<int>();
    }
    if (j.contains("spacing_mm")) {
        const auto s = j.at("spacing_mm");
        if (!s.is_array() || s.size() != 3) {
            throw config_error("config: phantom.spacing_mm needs 3 numbers");
        }
        p.sx = s.at(0).get<double>();
        p.sy = s.at(1).get<double>();
        p.sz = s.at(2).get<double>();
    }
    assign_if(j, "n_patients", c.n_patients);
    assign_if(j, "n_bones", p.n_bones);
    assign_if(j, "n_emerging_lesions", p.n_emerging_lesions);
    assign_if(j, "n_stable_lesions", p.n_stable_lesions);
    assign_if(j, "n_anomalies", p.n_anomalies);
    assign_if(j, "precursor_contrast", p.precursor_contrast);
    assign_if(j, "noise_sigma", p.noise_sigma);
    assign_if(j, "bias_field", p.bias_field);
    assign_if(j, "bias_strength", p.bias_strength);
    if (j.contains("bone_radius_px")) {
        const auto r = j.at("bone_radius_px");
        p.bone_radius_min = r.at(0).get<double>();
        p.bone_radius_max = r.at(1).get<double>();
    }
    if (j.contains("lesion_radius_px")) {
        const auto r = j.at("lesion_radius_px");
        p.lesion_radius_min = r.at(0).get<double>();
        p.lesion_radius_max = r.at(1).get<double>();
    }
    assign_if(j, "resolved_fraction", p.resolved_fraction);
    if (j.contains("misalign_translation_mm")) {
        const auto t = j.at("misalign_translation_mm");
        if (!t.is_array() || t.size() != 3) {
            throw config_error("config: phantom.misalign_translation_mm needs 3 numbers");
        }
        for (int i = 0; i < 3; ++i) {
            p.misalign_translation_mm[static_cast<std::size_t>(i)] = t.at(i).get<double>();
        }
    }
    assign_if(j, "misalign_rotation_deg", p.misalign_rotation_deg);
    assign_if(j, "background_level", p.background_level);
    assign_if(j, "bone_level", p.bone_level);
}

inline void parse_preprocess_section(const nlohmann::json& j, preprocess_options& o) {
    check_keys(j, {"bias_correct", "bias_fwhm_mm", "normalize", "align", "registration_levels"},
               "preprocess");
    assign_if(j, "bias_correct", o.bias_correct);
    assign_if(j, "bias_fwhm_mm", o.bias_fwhm_mm);
    assign_if(j, "normalize", o.normalize);
    assign_if(j, "align", o.align);
    assign_if(j, "registration_levels", o.registration_levels);
}

inline void parse_unet_section(const nlohmann::json& j, unet_config& u, const std::string& name) {
    check_keys(j,
               {"input_size", "in_channels", "depth", "base_channels", "channel_growth", "loss",
                "w_pos", "lr", "epochs", "batch_size"},
               name);
    assign_if(j, "input_size", u.input_size);
    assign_if(j, "in_channels", u.in_channels);
    assign_if(j, "depth", u.depth);
    assign_if(j, "base_channels", u.base_channels);
    assign_if(j, "channel_growth", u.channel_growth);
    if (j.contains("loss")) u.loss = loss_kind_from_string(j.at("loss").get<std::string>());
    assign_if(j, "w_pos", u.w_pos);
    assign_if(j, "lr", u.lr);
    assign_if(j, "epochs", u.epochs);
    assign_if(j, "batch_size", u.batch_size);
}

inline void parse_cascade_section(const nlohmann::json& j, run_config& c) {
    check_keys(j, {"threshold", "dilate_radius", "stride", "fusion", "inference_batch"}, "cascade");
    assign_if(j, "threshold", c.threshold);
    assign_if(j, "dilate_radius", c.dilate_radius);
    assign_if(j, "stride", c.stride);
    if (j.contains("fusion")) {
        c.fusion = fusion_mode_from_string(j.at("fusion").get<std::string>());
    }
    assign_if(j, "inference_batch", c.inference_batch);
}

inline void parse_training_section(const nlohmann::json& j, run_config& c) {
    check_keys(j, {"max_bone_slices", "max_train_patches", "auto_w_pos"}, "training");
    assign_if(j, "max_bone_slices", c.max_bone_slices);
    assign_if(j, "max_train_patches", c.max_train_patches);
    assign_if(j, "auto_w_pos", c.auto_w_pos);
}

inline void parse_eval_section(const nlohmann::json& j, run_config& c) {
    check_keys(j, {"body_part_boundary"}, "eval");
    assign_if(j, "body_part_boundary", c.body_part_boundary);
}

} // namespace detail

// Parse a config document: the profile (if any) is applied first, then every
// other key overrides it. Unknown keys anywhere are an error.
inline run_config parse_run_config(const nlohmann::json& j) {
    run_config c;
    detail::check_keys(j,
                       {"profile", "seed", "jobs", "reference_mode", "out_dir", "phantom",
                        "preprocess", "bonenet", "lesionnet", "cascade", "training", "eval"},
                       "top level");
    std::string profile = c.profile;
    detail::assign_if(j, "profile", profile);
    apply_profile(c, profile);

    detail::assign_if(j, "seed", c.seed);
    detail::assign_if(j, "jobs", c.jobs);
    detail::assign_if(j, "reference_mode", c.reference_mode);
    detail::assign_if(j, "out_dir", c.out_dir);
    if (j.contains("phantom")) detail::parse_phantom_section(j.at("phantom"), c);
    if (j.contains("preprocess")) detail::parse_preprocess_section(j.at("preprocess"), c.preprocess);
    if (j.contains("bonenet")) detail::parse_unet_section(j.at("bonenet"), c.bonenet, "bonenet");
    if (j.contains("lesionnet")) {
        detail::parse_unet_section(j.at("lesionnet"), c.lesionnet, "lesionnet");
    }
    if (j.contains("cascade")) detail::parse_cascade_section(j.at("cascade"), c);
    if (j.contains("training")) detail::parse_training_section(j.at("training"), c);
    if (j.contains("eval")) detail::parse_eval_section(j.at("eval"), c);
    c.validate();
    return c;
}

inline run_config load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw config_error("config: invalid JSON in " + path.string() + ": " + e.what());
    }
    return parse_run_config(j);
}

// Fully materialized echo of the effective configuration (every key present),
// used for provenance and the report header.
inline nlohmann::json run_config_to_json(const run_config& c) {
    nlohmann::json phantom = phantom_params_to_json(c.phantom);
    phantom.erase("seed"); // the global seed drives the phantom substream
    phantom["n_patients"] = c.n_patients;
    nlohmann::json bonenet, lesionnet;
    to_json(bonenet, c.bonenet);
    to_json(lesionnet, c.lesionnet);
    // per-net seeds are derived at build time, not configuration
    bonenet.erase("seed");
    lesionnet.erase("seed");
    return nlohmann::json{
        {"profile", c.profile},
        {"seed", c.seed},
        {"jobs", c.jobs},
        {"reference_mode", c.reference_mode},
        {"out_dir", c.out_dir},
        {"phantom", phantom},
        {"preprocess",
         {{"bias_correct", c.preprocess.bias_correct},
          {"bias_fwhm_mm", c.preprocess.bias_fwhm_mm},
          {"normalize", c.preprocess.normalize},
          {"align", c.preprocess.align},
          {"registration_levels", c.preprocess.registration_levels}}},
        {"bonenet", bonenet},
        {"lesionnet", lesionnet},
        {"cascade",
         {{"threshold", c.threshold},
          {"dilate_radius", c.dilate_radius},
          {"stride", c.stride},
          {"fusion", to_string(c.fusion)},
          {"inference_batch", c.inference_batch}}},
        {"training",
         {{"max_bone_slices", c.max_bone_slices},
          {"max_train_patches", c.max_train_patches},
          {"auto_w_pos", c.auto_w_pos}}},
        {"eval", {{"body_part_boundary", c.body_part_boundary}}},
    };
}

inline std::uint64_t config_hash(const run_config& c) {
    return fnv1a64(run_config_to_json(c).dump());
}

inline std::uint64_t file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string() + " for hashing");
    std::uint64_t h = 1469598103934665603ull;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    return h;
}

} // namespace marrowcast
