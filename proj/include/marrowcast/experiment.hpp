#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "marrowcast/cascade.hpp"
#include "marrowcast/config.hpp"
#include "marrowcast/error.hpp"
#include "marrowcast/eval.hpp"
#include "marrowcast/phantom.hpp"
#include "marrowcast/preprocess.hpp"
#include "marrowcast/rng.hpp"
#include "marrowcast/unet.hpp"

namespace marrowcast {

struct train_history {
    std::vector<double> bone_loss;
    std::vector<double> lesion_loss;
    double w_pos = 1.0;
    std::size_t n_bone_slices = 0;
    std::size_t n_lesion_patches = 0;
};

namespace detail {

inline bone_dataset subsample_bone_dataset(bone_dataset ds, std::size_t max_pairs,
                                           std::uint64_t seed) {
    if (max_pairs == 0 || ds.pairs.size() <= max_pairs) return ds;
    std::vector<std::size_t> order(ds.pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_stream rng(seed, "slice-subsample");
    rng.shuffle(order);
    order.resize(max_pairs);
    std::sort(order.begin(), order.end());
    bone_dataset out;
    out.pairs.reserve(max_pairs);
    out.refs.reserve(max_pairs);
    for (std::size_t i : order) {
        out.pairs.push_back(std::move(ds.pairs[i]));
        out.refs.push_back(ds.refs[i]);
    }
    return out;
}

} // namespace detail

// Train both stages on a training split and assemble the inference pipeline.
// All randomness (weight init, shuffling, subsampling) derives from fold_seed
// via named substreams, so a fold retrains identically given the same inputs.
inline cascade_pipeline train_cascade(const std::vector<longitudinal_case>& train_cases,
                                      const run_config& cfg, std::uint64_t fold_seed,
                                      train_history* history = nullptr) {
    unet_config bcfg = cfg.bonenet;
    unet_model bonenet = build_unet(bcfg, derive_seed(fold_seed, "init-bone"));
    bone_dataset bone_ds = build_bone_dataset(train_cases, bcfg.input_size);
    bone_ds = detail::subsample_bone_dataset(std::move(bone_ds),
                                             static_cast<std::size_t>(cfg.max_bone_slices),
                                             fold_seed);
    const std::vector<double> bone_loss = train_unet(bonenet, bone_ds.pairs);

    unet_config lcfg = cfg.lesionnet;
    lesion_dataset_options opt;
    opt.source = bone_source::ground_truth;
    opt.patch_size = lcfg.input_size;
    opt.stride = cfg.stride;
    opt.threshold = cfg.threshold;
    opt.dilate_radius = cfg.dilate_radius;
    lesion_dataset lesion_ds = build_lesion_dataset(train_cases, opt);
    lesion_ds = subsample_lesion_dataset(std::move(lesion_ds),
                                         static_cast<std::size_t>(cfg.max_train_patches),
                                         fold_seed);
    if (cfg.auto_w_pos && lcfg.loss == loss_kind::weighted_bce) {
        lcfg.w_pos = lesion_ds.imbalance_w_pos();
    }
    unet_model lesionnet = build_unet(lcfg, derive_seed(fold_seed, "init-lesion"));
    const std::vector<double> lesion_loss = train_unet(lesionnet, lesion_ds.pairs);

    if (history) {
        history->bone_loss = bone_loss;
        history->lesion_loss = lesion_loss;
        history->w_pos = lcfg.w_pos;
        history->n_bone_slices = bone_ds.pairs.size();
        history->n_lesion_patches = lesion_ds.pairs.size();
    }

    cascade_pipeline pipe;
    pipe.bonenet = std::move(bonenet);
    pipe.lesionnet = std::move(lesionnet);
    pipe.threshold = cfg.threshold;
    pipe.dilate_radius = cfg.dilate_radius;
    pipe.patch_size = lcfg.input_size;
    pipe.stride = cfg.stride;
    pipe.fusion = cfg.fusion;
    pipe.inference_batch = cfg.inference_batch;
    pipe.validate();
    return pipe;
}

// Preprocess every case (in place, in parallel up to `jobs` workers).
inline void preprocess_cohort(std::vector<longitudinal_case>& cases,
                              const preprocess_options& opt, int jobs = 1) {
    auto work = [&](std::size_t i) { cases[i] = preprocess_case(cases[i], opt); };
    if (jobs <= 1) {
        for (std::size_t i = 0; i < cases.size(); ++i) work(i);
        return;
    }
    std::vector<std::thread> workers;
    std::size_t next = 0;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        workers.emplace_back(work, i);
        if (static_cast<int>(workers.size() - next) >= jobs) workers[next++].join();
    }
    for (; next < workers.size(); ++next) workers[next].join();
}

struct experiment_result {
    eval_summary summary;
    std::vector<std::string> risk_map_files;  // relative to out_dir
    std::vector<std::string> checkpoint_files; // relative to out_dir, .bin/.json pairs
};

inline void write_provenance(const run_config& cfg, const experiment_result& result,
                             const std::filesystem::path& out_dir);

// The end-to-end evaluation: leave-one-out over the cohort, training the full
// cascade per fold, writing per-fold checkpoints and held-out risk maps, then
// the report (summary.json, ROC curves) and provenance.json under out_dir.
inline experiment_result run_experiment(const std::vector<longitudinal_case>& cases,
                                        const run_config& cfg,
                                        const std::filesystem::path& out_dir) {
    cfg.validate();
    const int jobs = cfg.effective_jobs();
    std::filesystem::create_directories(out_dir / "checkpoints");
    std::filesystem::create_directories(out_dir / "riskmaps");

    auto train_fn = [&](const std::vector<longitudinal_case>& train_cases,
                        std::uint64_t fold_seed) {
        return train_cascade(train_cases, cfg, fold_seed);
    };
    auto eval_fn = [&](const cascade_pipeline& pipe, const longitudinal_case& c, int fold) {
        char stem[32];
        std::snprintf(stem, sizeof(stem), "fold_%02d", fold);
        save_checkpoint(pipe.bonenet, out_dir / "checkpoints" / (std::string(stem) + "_bone"));
        save_checkpoint(pipe.lesionnet, out_dir / "checkpoints" / (std::string(stem) + "_lesion"));

        const risk_prediction pred = predict_risk_volume(pipe, c.i_t);
        save_nifti(pred.risk, out_dir / "riskmaps" / ("risk_" + c.patient_id + ".nii"));
        save_nifti(pred.bone_prob, out_dir / "riskmaps" / ("boneprob_" + c.patient_id + ".nii"));

        const int boundary =
            cfg.body_part_boundary >= 0 ? cfg.body_part_boundary : c.body_part_boundary;
        return evaluate_prediction(pred, c, body_part_split{boundary}, cfg.threshold,
                                   cfg.dilate_radius);
    };

    experiment_result result;
    result.summary = loocv(cases, cfg.seed, train_fn, eval_fn, jobs);

    for (const fold_result& fr : result.summary.folds) {
        if (fr.failed) continue;
        char stem[32];
        std::snprintf(stem, sizeof(stem), "fold_%02d", fr.fold);
        result.risk_map_files.push_back("riskmaps/risk_" + fr.patient_id + ".nii");
        result.risk_map_files.push_back("riskmaps/boneprob_" + fr.patient_id + ".nii");
        for (const char* net : {"_bone", "_lesion"}) {
            for (const char* ext : {".json", ".bin"}) {
                result.checkpoint_files.push_back("checkpoints/" + std::string(stem) + net + ext);
            }
        }
    }

    emit_report(result.summary, run_config_to_json(cfg), result.risk_map_files, out_dir);
    write_provenance(cfg, result, out_dir);
    return result;
}

inline void write_provenance(const run_config& cfg, const experiment_result& result,
                             const std::filesystem::path& out_dir) {
    char hex[24];
    auto hex64 = [&hex](std::uint64_t v) {
        std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(v));
        return std::string(hex);
    };
    nlohmann::json checkpoints = nlohmann::json::object();
    for (const std::string& f : result.checkpoint_files) {
        checkpoints[f] = hex64(file_hash(out_dir / f));
    }
    nlohmann::json risk_maps = nlohmann::json::object();
    for (const std::string& f : result.risk_map_files) {
        risk_maps[f] = hex64(file_hash(out_dir / f));
    }
    nlohmann::json doc{
        {"schema_version", 1},
        {"config_hash", hex64(config_hash(cfg))},
        {"seed", cfg.seed},
        {"jobs", cfg.effective_jobs()},
        {"reference_mode", cfg.reference_mode},
        {"checkpoints", checkpoints},
        {"risk_maps", risk_maps},
    };
    std::ofstream out(out_dir / "provenance.json");
    if (!out) throw io_error("cannot write " + (out_dir / "provenance.json").string());
    out << doc.dump(2) << "\n";
    if (!out) throw io_error("failed writing " + (out_dir / "provenance.json").string());
}

} // namespace marrowcast
