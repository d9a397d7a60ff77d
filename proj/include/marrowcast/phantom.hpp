#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "marrowcast/affine.hpp"
#include "marrowcast/error.hpp"
#include "marrowcast/nifti.hpp"
#include "marrowcast/rng.hpp"
#include "marrowcast/volume.hpp"

namespace marrowcast {

struct phantom_params {
    std::uint64_t seed = 1;
    int nx = 96, ny = 96, nz = 30;
    double sx = 2.0, sy = 2.0, sz = 6.0;
    int n_bones = 5;
    int n_emerging_lesions = 3;
    int n_stable_lesions = 2;
    int n_anomalies = 2;
    // How visible an emerging lesion already is at time t, as a fraction of
    // its full contrast at t+1.
    double precursor_contrast = 0.4;
    double noise_sigma = 0.02;
    bool bias_field = false;
    double bias_strength = 0.2;
    // In-plane radii in voxels.
    double bone_radius_min = 9.0, bone_radius_max = 12.0;
    double lesion_radius_min = 2.8, lesion_radius_max = 4.5;
    // Fraction of stable lesions that are resolved by t+1 (annotated at t only).
    double resolved_fraction = 0.0;
    // Pose of the follow-up acquisition relative to baseline (mm / degrees,
    // rotation about the z axis through the volume center).
    std::array<double, 3> misalign_translation_mm{0.0, 0.0, 0.0};
    double misalign_rotation_deg = 0.0;
    double background_level = 0.15;
    double bone_level = 0.75;

    void validate() const {
        if (nx < 8 || ny < 8 || nz < 2) {
            throw config_error("phantom: dims too small");
        }
        if (n_bones < 1 || n_emerging_lesions < 0 || n_stable_lesions < 0 || n_anomalies < 0) {
            throw config_error("phantom: counts must be >= 0 (and n_bones >= 1)");
        }
        if (precursor_contrast < 0.0 || precursor_contrast > 1.0) {
            throw config_error("phantom: precursor_contrast must be in [0, 1]");
        }
        if (resolved_fraction < 0.0 || resolved_fraction > 1.0) {
            throw config_error("phantom: resolved_fraction must be in [0, 1]");
        }
        if (noise_sigma < 0.0) {
            throw config_error("phantom: noise_sigma must be >= 0");
        }
    }
};

// One patient: baseline and follow-up intensity volumes, the baseline bone
// mask, and lesion annotations at both time points. All grids share geometry.
struct longitudinal_case {
    std::string patient_id;
    volume i_t, i_t1;
    mask_volume b_t;  // bone at baseline
    mask_volume a_t;  // lesions annotated at t
    mask_volume a_t1; // lesions annotated at t+1 (in the follow-up frame until aligned)
    int body_part_boundary = 0; // first slice of the lower ("legs") region
    std::optional<affine_transform> true_transform;      // follow-up -> baseline, phantom ground truth
    std::optional<affine_transform> alignment_transform; // recorded by align_pair
    bool preprocessed = false;
};

namespace detail {

struct bone_tube {
    double cx, cy;      // axis position (mm) at mid-height
    double ax, ay;      // axis slope (mm in-plane per mm height)
    double radius_mm;
    double level;
};

enum class blob_kind { emerging, stable, resolved, anomaly };

struct scene_blob {
    point3 center; // mm
    double radius_mm;
    double amp; // intensity offset subtracted inside the blob (signed for anomalies)
    blob_kind kind;
};

struct phantom_scene {
    std::vector<bone_tube> bones;
    std::vector<scene_blob> blobs;
    std::array<double, 6> bias_coeff{}; // shared across time points
    double zc_mm = 0.0;                 // mid-height used by the tube axes
};

inline int bone_at(const phantom_scene& s, const point3& p) {
    for (std::size_t b = 0; b < s.bones.size(); ++b) {
        const bone_tube& t = s.bones[b];
        const double dz = p.z - s.zc_mm;
        const double dx = p.x - (t.cx + t.ax * dz);
        const double dy = p.y - (t.cy + t.ay * dz);
        if (dx * dx + dy * dy <= t.radius_mm * t.radius_mm) {
            return static_cast<int>(b);
        }
    }
    return -1;
}

inline bool blob_active(blob_kind k, int time) {
    switch (k) {
        case blob_kind::emerging: return true; // at t only as a contrast-scaled shift
        case blob_kind::stable: return true;
        case blob_kind::resolved: return time == 0;
        case blob_kind::anomaly: return true;
    }
    return false;
}

inline bool blob_annotated(blob_kind k, int time) {
    switch (k) {
        case blob_kind::emerging: return time == 1;
        case blob_kind::stable: return true;
        case blob_kind::resolved: return time == 0;
        case blob_kind::anomaly: return false;
    }
    return false;
}

// Intensity dip profile: full amplitude in the core, linear ramp to zero over
// the outer quarter of the radius.
inline double blob_profile(double u) {
    if (u >= 1.0) return 0.0;
    return std::min(1.0, 4.0 * (1.0 - u));
}

struct scene_sample {
    double intensity;
    bool bone;
    bool annotated;
};

inline scene_sample sample_scene(const phantom_scene& s, const phantom_params& p,
                                 const point3& q, int time) {
    scene_sample out{p.background_level, false, false};
    const int b = bone_at(s, q);
    if (b < 0) {
        return out;
    }
    out.bone = true;
    double v = s.bones[static_cast<std::size_t>(b)].level;
    for (const scene_blob& blob : s.blobs) {
        if (!blob_active(blob.kind, time)) continue;
        const double dx = q.x - blob.center.x;
        const double dy = q.y - blob.center.y;
        const double dz = q.z - blob.center.z;
        const double u = std::sqrt(dx * dx + dy * dy + dz * dz) / blob.radius_mm;
        if (u >= 1.0) continue;
        double amp = blob.amp;
        if (blob.kind == blob_kind::emerging && time == 0) {
            amp *= p.precursor_contrast;
        }
        v -= amp * blob_profile(u);
        if (blob_annotated(blob.kind, time)) {
            out.annotated = true;
        }
    }
    out.intensity = v;
    return out;
}

inline double bias_field_at(const phantom_scene& s, const phantom_params& p,
                            int ix, int iy, int iz) {
    const double X = 2.0 * ix / std::max(1, p.nx - 1) - 1.0;
    const double Y = 2.0 * iy / std::max(1, p.ny - 1) - 1.0;
    const double Z = 2.0 * iz / std::max(1, p.nz - 1) - 1.0;
    const auto& c = s.bias_coeff;
    const double g = c[0] * X + c[1] * Y + c[2] * Z + c[3] * X * Y + c[4] * X * Z + c[5] * Y * Z;
    return std::exp(g);
}

inline phantom_scene build_scene(const phantom_params& p, rng_stream& rng) {
    phantom_scene s;
    const double width_mm = p.nx * p.sx;
    const double height_mm = p.ny * p.sy;
    const double depth_mm = p.nz * p.sz;
    s.zc_mm = 0.5 * depth_mm;

    const double r_max_mm = p.bone_radius_max * p.sx;
    if (static_cast<double>(p.n_bones) * 3.14159265358979323846 * r_max_mm * r_max_mm >
        0.45 * width_mm * height_mm) {
        throw generation_error("phantom: dims too small to contain " +
                               std::to_string(p.n_bones) + " bones of the requested radius");
    }

    const double edge_mm = 3.0 * p.sx;
    // Bones are long tubes spanning the full height, with a slight tilt.
    for (int attempt = 0;; ++attempt) {
        if (attempt >= 500) {
            throw generation_error("phantom: bone placement failed after bounded retries");
        }
        std::vector<bone_tube> bones;
        bool ok = true;
        for (int b = 0; b < p.n_bones && ok; ++b) {
            const double r = rng.uniform(p.bone_radius_min, p.bone_radius_max) * p.sx;
            const double margin = r + edge_mm;
            if (2.0 * margin >= std::min(width_mm, height_mm)) {
                throw generation_error("phantom: bone radius does not fit the volume");
            }
            bone_tube t;
            t.radius_mm = r;
            t.cx = rng.uniform(margin, width_mm - margin);
            t.cy = rng.uniform(margin, height_mm - margin);
            // up to ~2.5 voxels of in-plane drift over the full height
            const double drift = 2.5 * p.sx;
            t.ax = rng.uniform(-drift, drift) / depth_mm;
            t.ay = rng.uniform(-drift, drift) / depth_mm;
            t.level = p.bone_level + rng.uniform(-0.05, 0.05);
            for (const bone_tube& o : bones) {
                for (double z : {0.0, depth_mm}) {
                    const double dz = z - s.zc_mm;
                    const double dx = (t.cx + t.ax * dz) - (o.cx + o.ax * dz);
                    const double dy = (t.cy + t.ay * dz) - (o.cy + o.ay * dz);
                    if (std::sqrt(dx * dx + dy * dy) < t.radius_mm + o.radius_mm + 2.5 * p.sx) {
                        ok = false;
                    }
                }
            }
            if (ok) bones.push_back(t);
        }
        if (ok) {
            s.bones = std::move(bones);
            break;
        }
    }

    const int boundary = p.nz / 2;
    const double contrast = p.bone_level - p.background_level;
    int n_resolved = static_cast<int>(std::floor(p.resolved_fraction * p.n_stable_lesions + 0.5));
    if (n_resolved > p.n_stable_lesions) n_resolved = p.n_stable_lesions;

    auto place_blob = [&](blob_kind kind, int index) {
        for (int attempt = 0; attempt < 2000; ++attempt) {
            const double r = rng.uniform(p.lesion_radius_min, p.lesion_radius_max) * p.sx;
            const auto& bone = s.bones[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(s.bones.size()) - 1))];
            const double max_off = bone.radius_mm - r - 1.0 * p.sx;
            if (max_off <= 0.0) continue;
            // Alternate target regions so both body parts carry lesions.
            const int region = index % 2;
            const double z_lo = (region == 0 ? 0.0 : boundary * p.sz) + r + p.sz;
            const double z_hi = (region == 0 ? boundary * p.sz : depth_mm) - r - p.sz;
            if (z_hi <= z_lo) continue;
            scene_blob blob;
            blob.kind = kind;
            blob.radius_mm = r;
            blob.center.z = rng.uniform(z_lo, z_hi);
            const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            const double off = rng.uniform(0.0, max_off);
            const double dz = blob.center.z - s.zc_mm;
            blob.center.x = bone.cx + bone.ax * dz + off * std::cos(ang);
            blob.center.y = bone.cy + bone.ay * dz + off * std::sin(ang);
            if (kind == blob_kind::anomaly) {
                const double sign = rng.coin() ? 1.0 : -1.0;
                blob.amp = sign * contrast * rng.uniform(0.25, 0.5);
            } else {
                blob.amp = contrast * rng.uniform(0.8, 1.1);
            }
            bool separated = true;
            for (const scene_blob& o : s.blobs) {
                const double dx = blob.center.x - o.center.x;
                const double dy = blob.center.y - o.center.y;
                const double dzz = blob.center.z - o.center.z;
                if (std::sqrt(dx * dx + dy * dy + dzz * dzz) <
                    blob.radius_mm + o.radius_mm + 2.0 * p.sx) {
                    separated = false;
                    break;
                }
            }
            if (!separated) continue;
            s.blobs.push_back(blob);
            return;
        }
        throw generation_error("phantom: lesion placement failed after bounded retries");
    };

    for (int i = 0; i < p.n_emerging_lesions; ++i) place_blob(blob_kind::emerging, i);
    for (int i = 0; i < p.n_stable_lesions; ++i) {
        place_blob(i < n_resolved ? blob_kind::resolved : blob_kind::stable, i);
    }
    for (int i = 0; i < p.n_anomalies; ++i) place_blob(blob_kind::anomaly, i);

    if (p.bias_field) {
        for (double& c : s.bias_coeff) {
            c = rng.uniform(-p.bias_strength, p.bias_strength);
        }
    }
    return s;
}

struct raster_output {
    volume intensity;
    mask_volume bone;
    mask_volume annotation;
};

// Evaluate the analytic scene on the voxel grid. `pose` maps grid mm
// coordinates into scene coordinates; noise and bias apply in the grid frame.
inline raster_output rasterize(const phantom_scene& s, const phantom_params& p, int time,
                               const affine_transform& pose, rng_stream& noise) {
    raster_output out;
    out.intensity = make_volume(p.nx, p.ny, p.nz, p.sx, p.sy, p.sz);
    out.bone = make_mask(p.nx, p.ny, p.nz, p.sx, p.sy, p.sz);
    out.annotation = make_mask(p.nx, p.ny, p.nz, p.sx, p.sy, p.sz);
    std::size_t i = 0;
    for (int iz = 0; iz < p.nz; ++iz) {
        for (int iy = 0; iy < p.ny; ++iy) {
            for (int ix = 0; ix < p.nx; ++ix, ++i) {
                const point3 grid_mm{ix * p.sx, iy * p.sy, iz * p.sz};
                const scene_sample v = sample_scene(s, p, pose.apply(grid_mm), time);
                double intensity = v.intensity;
                if (p.bias_field) {
                    intensity *= bias_field_at(s, p, ix, iy, iz);
                }
                intensity += noise.normal(0.0, p.noise_sigma);
                out.intensity.data[i] = static_cast<float>(std::max(intensity, 1e-3));
                out.bone.data[i] = v.bone ? 1.0f : 0.0f;
                out.annotation.data[i] = v.annotated ? 1.0f : 0.0f;
            }
        }
    }
    return out;
}

} // namespace detail

// Deterministic in params.seed: the same params always produce the same case.
inline longitudinal_case generate_case(const phantom_params& p,
                                       const std::string& patient_id = "p000") {
    p.validate();
    rng_stream scene_rng(p.seed, "scene");
    const detail::phantom_scene scene = detail::build_scene(p, scene_rng);

    // Follow-up pose: grid coordinates of I_{t+1} map into the scene (which is
    // the baseline frame) through this transform, so it is exactly the
    // moving->fixed map a registration should recover.
    const point3 center{0.5 * p.nx * p.sx, 0.5 * p.ny * p.sy, 0.5 * p.nz * p.sz};
    const double angle = p.misalign_rotation_deg * 3.14159265358979323846 / 180.0;
    affine_transform pose = affine_transform::rotation_z(angle, center);
    pose.m[3] += p.misalign_translation_mm[0];
    pose.m[7] += p.misalign_translation_mm[1];
    pose.m[11] += p.misalign_translation_mm[2];
    const bool misaligned = p.misalign_rotation_deg != 0.0 ||
                            p.misalign_translation_mm != std::array<double, 3>{0.0, 0.0, 0.0};

    rng_stream noise_t(p.seed, "noise", 0);
    rng_stream noise_t1(p.seed, "noise", 1);
    detail::raster_output at_t =
        detail::rasterize(scene, p, 0, affine_transform::identity(), noise_t);
    detail::raster_output at_t1 = detail::rasterize(scene, p, 1, pose, noise_t1);

    longitudinal_case c;
    c.patient_id = patient_id;
    c.i_t = std::move(at_t.intensity);
    c.b_t = std::move(at_t.bone);
    c.a_t = std::move(at_t.annotation);
    c.i_t1 = std::move(at_t1.intensity);
    c.a_t1 = std::move(at_t1.annotation);
    c.body_part_boundary = p.nz / 2;
    if (misaligned) {
        c.true_transform = pose;
    }
    return c;
}

inline std::vector<longitudinal_case> generate_cohort(std::uint64_t seed, int n_patients,
                                                      const phantom_params& tmpl) {
    if (n_patients < 1) {
        throw config_error("generate_cohort: n_patients must be >= 1");
    }
    std::vector<longitudinal_case> cases;
    cases.reserve(static_cast<std::size_t>(n_patients));
    for (int i = 0; i < n_patients; ++i) {
        phantom_params p = tmpl;
        p.seed = derive_seed(seed, "phantom", static_cast<std::uint64_t>(i));
        char id[16];
        std::snprintf(id, sizeof(id), "p%03d", i);
        try {
            cases.push_back(generate_case(p, id));
        } catch (const generation_error& e) {
            throw generation_error("patient " + std::string(id) + ": " + e.what());
        }
    }
    return cases;
}

inline nlohmann::json phantom_params_to_json(const phantom_params& p) {
    return nlohmann::json{
        {"seed", p.seed},
        {"dims", {p.nx, p.ny, p.nz}},
        {"spacing_mm", {p.sx, p.sy, p.sz}},
        {"n_bones", p.n_bones},
        {"n_emerging_lesions", p.n_emerging_lesions},
        {"n_stable_lesions", p.n_stable_lesions},
        {"n_anomalies", p.n_anomalies},
        {"precursor_contrast", p.precursor_contrast},
        {"noise_sigma", p.noise_sigma},
        {"bias_field", p.bias_field},
        {"bias_strength", p.bias_strength},
        {"bone_radius_px", {p.bone_radius_min, p.bone_radius_max}},
        {"lesion_radius_px", {p.lesion_radius_min, p.lesion_radius_max}},
        {"resolved_fraction", p.resolved_fraction},
        {"misalign_translation_mm",
         {p.misalign_translation_mm[0], p.misalign_translation_mm[1], p.misalign_translation_mm[2]}},
        {"misalign_rotation_deg", p.misalign_rotation_deg},
        {"background_level", p.background_level},
        {"bone_level", p.bone_level},
    };
}

inline std::array<double, 12> transform_to_array(const affine_transform& t) {
    return t.m;
}

// Write the cohort as NIfTI files plus a manifest listing per-case paths,
// body-part boundaries and generation parameters. params_echo is carried
// verbatim so derived cohorts (e.g. preprocessed copies) keep their origin.
inline void write_cohort(const std::vector<longitudinal_case>& cases,
                         const nlohmann::json& params_echo, std::uint64_t seed,
                         const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["schema_version"] = 1;
    manifest["seed"] = seed;
    manifest["params"] = params_echo;
    manifest["preprocessed"] = !cases.empty() && cases.front().preprocessed;
    nlohmann::json entries = nlohmann::json::array();
    for (const longitudinal_case& c : cases) {
        const std::string stem = c.patient_id;
        save_nifti(c.i_t, dir / (stem + "_it.nii"));
        save_nifti(c.i_t1, dir / (stem + "_it1.nii"));
        save_nifti(c.b_t, dir / (stem + "_bt.nii"));
        save_nifti(c.a_t, dir / (stem + "_at.nii"));
        save_nifti(c.a_t1, dir / (stem + "_at1.nii"));
        nlohmann::json e{
            {"patient_id", c.patient_id},
            {"i_t", stem + "_it.nii"},
            {"i_t1", stem + "_it1.nii"},
            {"b_t", stem + "_bt.nii"},
            {"a_t", stem + "_at.nii"},
            {"a_t1", stem + "_at1.nii"},
            {"body_part_boundary", c.body_part_boundary},
        };
        if (c.true_transform) {
            e["true_transform"] = c.true_transform->m;
        } else {
            e["true_transform"] = nullptr;
        }
        if (c.alignment_transform) {
            e["alignment_transform"] = c.alignment_transform->m;
        }
        entries.push_back(std::move(e));
    }
    manifest["cases"] = std::move(entries);
    std::ofstream out(dir / "cohort.json");
    if (!out) {
        throw io_error("cannot write " + (dir / "cohort.json").string());
    }
    out << manifest.dump(2) << "\n";
}

inline void write_cohort(const std::vector<longitudinal_case>& cases, const phantom_params& tmpl,
                         std::uint64_t seed, const std::filesystem::path& dir) {
    write_cohort(cases, phantom_params_to_json(tmpl), seed, dir);
}

inline nlohmann::json load_cohort_manifest(const std::filesystem::path& dir) {
    const std::filesystem::path manifest_path = dir / "cohort.json";
    std::ifstream in(manifest_path);
    if (!in) {
        throw io_error("cannot open cohort manifest " + manifest_path.string());
    }
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw format_error("invalid cohort manifest: " + std::string(e.what()));
    }
    return manifest;
}

inline std::vector<longitudinal_case> generate_cohort(std::uint64_t seed, int n_patients,
                                                      const phantom_params& tmpl,
                                                      const std::filesystem::path& out_dir) {
    std::vector<longitudinal_case> cases = generate_cohort(seed, n_patients, tmpl);
    write_cohort(cases, tmpl, seed, out_dir);
    return cases;
}

inline std::vector<longitudinal_case> load_cohort(const std::filesystem::path& dir) {
    const nlohmann::json manifest = load_cohort_manifest(dir);
    std::vector<longitudinal_case> cases;
    const bool preprocessed = manifest.value("preprocessed", false);
    for (const auto& e : manifest.at("cases")) {
        longitudinal_case c;
        c.patient_id = e.at("patient_id").get<std::string>();
        c.i_t = load_nifti(dir / e.at("i_t").get<std::string>());
        c.i_t1 = load_nifti(dir / e.at("i_t1").get<std::string>());
        c.b_t = load_nifti_mask(dir / e.at("b_t").get<std::string>());
        c.a_t = load_nifti_mask(dir / e.at("a_t").get<std::string>());
        c.a_t1 = load_nifti_mask(dir / e.at("a_t1").get<std::string>());
        c.body_part_boundary = e.at("body_part_boundary").get<int>();
        c.preprocessed = preprocessed;
        if (e.contains("true_transform") && !e.at("true_transform").is_null()) {
            affine_transform t;
            const auto arr = e.at("true_transform");
            for (int i = 0; i < 12; ++i) t.m[static_cast<std::size_t>(i)] = arr.at(i).get<double>();
            c.true_transform = t;
        }
        if (e.contains("alignment_transform") && !e.at("alignment_transform").is_null()) {
            affine_transform t;
            const auto arr = e.at("alignment_transform");
            for (int i = 0; i < 12; ++i) t.m[static_cast<std::size_t>(i)] = arr.at(i).get<double>();
            c.alignment_transform = t;
        }
        cases.push_back(std::move(c));
    }
    return cases;
}

} // namespace marrowcast
