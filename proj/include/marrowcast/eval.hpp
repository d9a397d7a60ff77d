#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "marrowcast/cascade.hpp"
#include "marrowcast/error.hpp"
#include "marrowcast/patches.hpp"
#include "marrowcast/phantom.hpp"
#include "marrowcast/rng.hpp"
#include "marrowcast/volume.hpp"

namespace marrowcast {

// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
// ties credited 1/2, computed from average ranks in O(n log n).
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) {
        throw shape_error("roc_auc: scores/labels length mismatch");
    }
    std::size_t n_pos = 0, n_neg = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) {
            throw shape_error("roc_auc: labels must be 0 or 1");
        }
        if (l == 1) ++n_pos; else ++n_neg;
    }
    if (n_pos == 0 || n_neg == 0) {
        throw undefined_metric_error("roc_auc: need at least one positive and one negative (got " +
                                     std::to_string(n_pos) + " pos, " + std::to_string(n_neg) +
                                     " neg)");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
        }
        i = j + 1;
    }
    const double p = static_cast<double>(n_pos), n = static_cast<double>(n_neg);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n);
}

// ROC polyline (FPR, TPR), one point per distinct score threshold, from (0,0)
// to (1,1); monotone non-decreasing in both coordinates.
inline std::vector<std::pair<double, double>> roc_points(const std::vector<double>& scores,
                                                         const std::vector<int>& labels) {
    if (scores.size() != labels.size()) {
        throw shape_error("roc_points: scores/labels length mismatch");
    }
    std::size_t n_pos = 0, n_neg = 0;
    for (int l : labels) (l == 1 ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0) {
        throw undefined_metric_error("roc_points: need both classes");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
    std::size_t tp = 0, fp = 0, i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[order[k]] == 1) ++tp; else ++fp;
        }
        pts.emplace_back(static_cast<double>(fp) / static_cast<double>(n_neg),
                         static_cast<double>(tp) / static_cast<double>(n_pos));
        i = j + 1;
    }
    return pts;
}

enum class body_part { thorax, legs };

inline std::string to_string(body_part p) {
    return p == body_part::thorax ? "thorax" : "legs";
}

// Contiguous split along z: slices below the boundary are thorax, the rest legs.
struct body_part_split {
    int boundary = 0; // first slice of the legs region

    body_part label(int z) const { return z < boundary ? body_part::thorax : body_part::legs; }
};

// Voxels annotated at t+1 but not at t — the prediction target of interest.
inline mask_volume emerging_lesion_targets(const longitudinal_case& c) {
    if (!c.a_t.same_geometry(c.a_t1)) {
        throw shape_error("emerging_lesion_targets: annotation geometry mismatch");
    }
    mask_volume out = make_mask(c.a_t.nx, c.a_t.ny, c.a_t.nz, c.a_t.sx, c.a_t.sy, c.a_t.sz);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = (c.a_t1.data[i] >= 0.5f && c.a_t.data[i] < 0.5f) ? 1.0f : 0.0f;
    }
    return out;
}

struct score_pool {
    std::vector<double> scores;
    std::vector<int> labels;

    void add(double s, int l) {
        scores.push_back(s);
        labels.push_back(l);
    }
    void append(const score_pool& o) {
        scores.insert(scores.end(), o.scores.begin(), o.scores.end());
        labels.insert(labels.end(), o.labels.begin(), o.labels.end());
    }
};

struct region_metric {
    std::optional<double> auc;
    std::size_t n_pos = 0, n_neg = 0;
};

struct case_metrics {
    std::string patient_id;
    region_metric bone;          // BoneNet probability vs B_t, all voxels
    region_metric lesion_thorax; // risk vs emerging targets inside dilated GT bone
    region_metric lesion_legs;
};

struct case_evaluation {
    case_metrics metrics;
    score_pool bone, lesion_thorax, lesion_legs;
};

namespace detail {

inline region_metric pool_metric(const score_pool& pool) {
    region_metric m;
    for (int l : pool.labels) (l == 1 ? m.n_pos : m.n_neg)++;
    if (m.n_pos > 0 && m.n_neg > 0) {
        m.auc = roc_auc(pool.scores, pool.labels);
    }
    return m;
}

} // namespace detail

// Score a finished prediction against a case: bone AUC over all voxels;
// lesion AUC per body part, restricted to the dilated ground-truth bone
// region. Regions without both classes come back undefined.
inline case_evaluation evaluate_prediction(const risk_prediction& pred,
                                           const longitudinal_case& c,
                                           const body_part_split& split, double threshold = 0.5,
                                           int dilate_radius = 2) {
    if (!c.i_t.same_geometry(c.b_t) || !c.i_t.same_geometry(c.a_t1)) {
        throw shape_error("evaluate_prediction: case geometry mismatch for " + c.patient_id);
    }
    if (!pred.risk.same_geometry(c.i_t) || !pred.bone_prob.same_geometry(c.i_t)) {
        throw shape_error("evaluate_prediction: prediction geometry mismatch for " + c.patient_id);
    }
    const mask_volume emerging = emerging_lesion_targets(c);

    case_evaluation ev;
    ev.metrics.patient_id = c.patient_id;
    for (int z = 0; z < c.i_t.nz; ++z) {
        const slice2d bone_gt = axial_slice(c.b_t, z);
        const slice2d dilated = binarize_and_dilate(bone_gt, threshold, dilate_radius);
        score_pool& lesion_pool =
            split.label(z) == body_part::thorax ? ev.lesion_thorax : ev.lesion_legs;
        for (int y = 0; y < c.i_t.ny; ++y) {
            for (int x = 0; x < c.i_t.nx; ++x) {
                const std::size_t vi = c.i_t.index(x, y, z);
                ev.bone.add(pred.bone_prob.data[vi], c.b_t.data[vi] >= 0.5f ? 1 : 0);
                if (dilated.at(x, y) >= 0.5f) {
                    lesion_pool.add(pred.risk.data[vi], emerging.data[vi] >= 0.5f ? 1 : 0);
                }
            }
        }
    }
    ev.metrics.bone = detail::pool_metric(ev.bone);
    ev.metrics.lesion_thorax = detail::pool_metric(ev.lesion_thorax);
    ev.metrics.lesion_legs = detail::pool_metric(ev.lesion_legs);
    return ev;
}

// Run the cascade on the baseline image and score the result.
inline case_evaluation evaluate_case(const cascade_pipeline& pipe, const longitudinal_case& c,
                                     const body_part_split& split) {
    return evaluate_prediction(predict_risk_volume(pipe, c.i_t), c, split, pipe.threshold,
                               pipe.dilate_radius);
}

struct fold_result {
    int fold = 0;
    std::string patient_id;
    bool failed = false;
    std::string error;
    case_metrics metrics;
};

struct eval_summary {
    std::vector<fold_result> folds;
    std::optional<double> mean_bone_auc, mean_lesion_thorax_auc, mean_lesion_legs_auc;
    int n_failed = 0;
    score_pool pooled_bone, pooled_thorax, pooled_legs;
};

namespace detail {

inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& xs) {
    double acc = 0.0;
    int n = 0;
    for (const auto& x : xs) {
        if (x) {
            acc += *x;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return acc / n;
}

} // namespace detail

// Leave-one-out cross-validation. train_fn(train_cases, fold_seed) builds a
// pipeline; eval_fn(pipeline, test_case, fold) scores the held-out patient.
// Fold seeds derive from the global seed and the fold index; a failed fold is
// recorded and the run continues. `jobs` bounds fold-level parallelism; the
// per-fold work is fully seeded, so results do not depend on scheduling.
template <typename TrainFn, typename EvalFn>
eval_summary loocv(const std::vector<longitudinal_case>& cases, std::uint64_t seed,
                   TrainFn&& train_fn, EvalFn&& eval_fn, int jobs = 1) {
    if (cases.size() < 2) {
        throw degenerate_input_error("loocv: need at least 2 patients, got " +
                                     std::to_string(cases.size()));
    }
    const int n = static_cast<int>(cases.size());
    eval_summary summary;
    summary.folds.resize(static_cast<std::size_t>(n));
    std::vector<case_evaluation> evals(static_cast<std::size_t>(n));

    auto run_fold = [&](int f) {
        fold_result& fr = summary.folds[static_cast<std::size_t>(f)];
        fr.fold = f;
        fr.patient_id = cases[static_cast<std::size_t>(f)].patient_id;
        try {
            std::vector<longitudinal_case> train_cases;
            train_cases.reserve(cases.size() - 1);
            for (int i = 0; i < n; ++i) {
                if (i != f) train_cases.push_back(cases[static_cast<std::size_t>(i)]);
            }
            const std::uint64_t fold_seed = derive_seed(seed, "folds", static_cast<std::uint64_t>(f));
            const cascade_pipeline pipe = train_fn(train_cases, fold_seed);
            evals[static_cast<std::size_t>(f)] = eval_fn(pipe, cases[static_cast<std::size_t>(f)], f);
            fr.metrics = evals[static_cast<std::size_t>(f)].metrics;
        } catch (const error& e) {
            fr.failed = true;
            fr.error = e.what();
        }
    };

    if (jobs <= 1) {
        for (int f = 0; f < n; ++f) run_fold(f);
    } else {
        std::vector<std::thread> workers;
        std::size_t next = 0;
        for (int f = 0; f < n; ++f) {
            workers.emplace_back(run_fold, f);
            if (static_cast<int>(workers.size()) >= jobs) {
                workers[next++].join();
            }
        }
        for (; next < workers.size(); ++next) workers[next].join();
    }

    std::vector<std::optional<double>> bone_aucs, thorax_aucs, legs_aucs;
    for (int f = 0; f < n; ++f) {
        const fold_result& fr = summary.folds[static_cast<std::size_t>(f)];
        if (fr.failed) {
            ++summary.n_failed;
            continue;
        }
        bone_aucs.push_back(fr.metrics.bone.auc);
        thorax_aucs.push_back(fr.metrics.lesion_thorax.auc);
        legs_aucs.push_back(fr.metrics.lesion_legs.auc);
        summary.pooled_bone.append(evals[static_cast<std::size_t>(f)].bone);
        summary.pooled_thorax.append(evals[static_cast<std::size_t>(f)].lesion_thorax);
        summary.pooled_legs.append(evals[static_cast<std::size_t>(f)].lesion_legs);
    }
    summary.mean_bone_auc = detail::mean_defined(bone_aucs);
    summary.mean_lesion_thorax_auc = detail::mean_defined(thorax_aucs);
    summary.mean_lesion_legs_auc = detail::mean_defined(legs_aucs);
    return summary;
}

// ---------------------------------------------------------------------------
// Report emission: summary.json, roc_<region>.csv, roc_<region>.svg.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json region_json(const region_metric& m) {
    nlohmann::json j;
    j["auc"] = m.auc ? nlohmann::json(*m.auc) : nlohmann::json(nullptr);
    j["defined"] = m.auc.has_value();
    j["n_pos"] = m.n_pos;
    j["n_neg"] = m.n_neg;
    return j;
}

inline std::vector<std::pair<double, double>> thin_points(
    const std::vector<std::pair<double, double>>& pts, std::size_t max_points) {
    if (pts.size() <= max_points) return pts;
    std::vector<std::pair<double, double>> out;
    const double step = static_cast<double>(pts.size() - 1) / static_cast<double>(max_points - 1);
    for (std::size_t i = 0; i < max_points; ++i) {
        out.push_back(pts[static_cast<std::size_t>(std::llround(i * step))]);
    }
    out.back() = pts.back();
    return out;
}

} // namespace detail

inline void write_roc_csv(const std::vector<std::pair<double, double>>& pts,
                          const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write " + path.string());
    out << "fpr,tpr\n";
    char line[80];
    for (const auto& [fpr, tpr] : pts) {
        std::snprintf(line, sizeof(line), "%.8f,%.8f\n", fpr, tpr);
        out << line;
    }
    if (!out) throw io_error("failed writing " + path.string());
}

inline std::vector<std::pair<double, double>> read_roc_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path.string());
    std::string header;
    if (!std::getline(in, header) || header != "fpr,tpr") {
        throw format_error(path.string() + ": expected 'fpr,tpr' header");
    }
    std::vector<std::pair<double, double>> pts;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        double fpr = 0.0, tpr = 0.0;
        if (std::sscanf(line.c_str(), "%lf,%lf", &fpr, &tpr) != 2) {
            throw format_error(path.string() + ": bad row '" + line + "'");
        }
        pts.emplace_back(fpr, tpr);
    }
    return pts;
}

// Plain polyline ROC plot with axes and a chance diagonal; a missing curve is
// rendered as an explicit "undefined" placeholder rather than skipped.
inline void write_roc_svg(const std::vector<std::pair<double, double>>& pts,
                          const std::string& title, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write " + path.string());
    const double size = 440.0, margin = 40.0, span = size - 2.0 * margin;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"440\" height=\"440\" "
           "viewBox=\"0 0 440 440\">\n";
    out << "<rect width=\"440\" height=\"440\" fill=\"white\"/>\n";
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                  margin, size - margin, size - margin, size - margin);
    out << buf;
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                  margin, margin, margin, size - margin);
    out << buf;
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#bbbbbb\" "
                  "stroke-dasharray=\"4\"/>\n",
                  margin, size - margin, size - margin, margin);
    out << buf;
    out << "<text x=\"" << size / 2.0 << "\" y=\"20\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
    out << "<text x=\"" << size / 2.0 << "\" y=\"" << size - 8.0 << "\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"11\">FPR</text>\n";
    out << "<text x=\"12\" y=\"" << size / 2.0 << "\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 12 "
        << size / 2.0 << ")\">TPR</text>\n";
    if (pts.empty()) {
        out << "<text x=\"" << size / 2.0 << "\" y=\"" << size / 2.0
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
            << "fill=\"#aa0000\">undefined (single-class region)</text>\n";
    } else {
        const auto thin = detail::thin_points(pts, 1024);
        out << "<polyline fill=\"none\" stroke=\"#1f4e9c\" stroke-width=\"1.5\" points=\"";
        for (const auto& [fpr, tpr] : thin) {
            std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", margin + fpr * span,
                          size - margin - tpr * span);
            out << buf;
        }
        out << "\"/>\n";
    }
    out << "</svg>\n";
    if (!out) throw io_error("failed writing " + path.string());
}

// Write summary.json plus per-region ROC CSV/SVG files into out_dir.
inline void emit_report(const eval_summary& summary, const nlohmann::json& config_echo,
                        const std::vector<std::string>& risk_map_files,
                        const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);

    nlohmann::json folds = nlohmann::json::array();
    for (const fold_result& fr : summary.folds) {
        nlohmann::json f{{"fold", fr.fold},
                         {"patient_id", fr.patient_id},
                         {"failed", fr.failed}};
        if (fr.failed) {
            f["error"] = fr.error;
        } else {
            f["bone"] = detail::region_json(fr.metrics.bone);
            f["lesion_thorax"] = detail::region_json(fr.metrics.lesion_thorax);
            f["lesion_legs"] = detail::region_json(fr.metrics.lesion_legs);
        }
        folds.push_back(std::move(f));
    }
    auto opt_json = [](const std::optional<double>& v) {
        return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    nlohmann::json doc{
        {"schema_version", 1},
        {"config", config_echo},
        {"folds", folds},
        {"means",
         {{"bone_auc", opt_json(summary.mean_bone_auc)},
          {"lesion_thorax_auc", opt_json(summary.mean_lesion_thorax_auc)},
          {"lesion_legs_auc", opt_json(summary.mean_lesion_legs_auc)}}},
        {"n_failed_folds", summary.n_failed},
        {"risk_maps", risk_map_files},
        {"notes",
         "lesion AUC is voxelwise, restricted to the dilated ground-truth bone region; "
         "undefined metrics are excluded from means"},
    };
    std::ofstream out(out_dir / "summary.json");
    if (!out) throw io_error("cannot write " + (out_dir / "summary.json").string());
    out << doc.dump(2) << "\n";
    out.close();
    if (!out) throw io_error("failed writing " + (out_dir / "summary.json").string());

    const std::pair<const score_pool*, std::string> regions[] = {
        {&summary.pooled_bone, "bone"},
        {&summary.pooled_thorax, "lesion_thorax"},
        {&summary.pooled_legs, "lesion_legs"},
    };
    for (const auto& [pool, name] : regions) {
        std::vector<std::pair<double, double>> pts;
        try {
            pts = roc_points(pool->scores, pool->labels);
        } catch (const undefined_metric_error&) {
            pts.clear();
        }
        write_roc_csv(detail::thin_points(pts, 4096), out_dir / ("roc_" + name + ".csv"));
        write_roc_svg(pts, "ROC - " + name, out_dir / ("roc_" + name + ".svg"));
    }
}

} // namespace marrowcast
