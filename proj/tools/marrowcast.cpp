// Command-line front end: phantom cohort generation, preprocessing, training,
// inference, and the end-to-end leave-one-out evaluation. File in, file out.

#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "marrowcast/config.hpp"
#include "marrowcast/experiment.hpp"
#include "marrowcast/nifti.hpp"

namespace mc = marrowcast;
namespace fs = std::filesystem;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_usage = 1;
constexpr int exit_data = 2;
constexpr int exit_numeric = 3;

struct cli_options {
    std::string config_path;
    std::string data_dir;
    std::string out_path;
    std::string in_path;
    std::string bonenet_prefix;
    std::string lesionnet_prefix;
    std::string results_dir;
    std::optional<int> jobs;
    std::optional<std::uint64_t> seed;
    bool regen_svg = false;
};

// Flag > MARROWCAST_JOBS env var > config file value.
void apply_overrides(mc::run_config& cfg, const cli_options& opt) {
    if (opt.seed) cfg.seed = *opt.seed;
    if (opt.jobs) {
        cfg.jobs = *opt.jobs;
        cfg.reference_mode = *opt.jobs <= 1;
    } else if (const char* env = std::getenv("MARROWCAST_JOBS")) {
        try {
            const int j = std::stoi(env);
            if (j < 1) throw mc::config_error("MARROWCAST_JOBS must be >= 1");
            cfg.jobs = j;
            cfg.reference_mode = j <= 1;
        } catch (const std::logic_error&) {
            throw mc::config_error("MARROWCAST_JOBS is not an integer: " + std::string(env));
        }
    }
    cfg.validate();
}

mc::run_config load_config_or_default(const cli_options& opt) {
    mc::run_config cfg;
    if (!opt.config_path.empty()) {
        cfg = mc::load_run_config(opt.config_path);
    } else {
        mc::apply_profile(cfg, cfg.profile);
    }
    apply_overrides(cfg, opt);
    return cfg;
}

void write_tool_provenance(const mc::run_config& cfg, const fs::path& path,
                           const std::vector<fs::path>& artifacts) {
    char hex[24];
    auto hex64 = [&hex](std::uint64_t v) {
        std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(v));
        return std::string(hex);
    };
    nlohmann::json files = nlohmann::json::object();
    for (const fs::path& a : artifacts) {
        files[a.filename().string()] = hex64(mc::file_hash(a));
    }
    nlohmann::json doc{{"schema_version", 1},
                       {"config_hash", hex64(mc::config_hash(cfg))},
                       {"seed", cfg.seed},
                       {"jobs", cfg.effective_jobs()},
                       {"reference_mode", cfg.reference_mode},
                       {"artifacts", files}};
    std::ofstream out(path);
    if (!out) throw mc::io_error("cannot write " + path.string());
    out << doc.dump(2) << "\n";
}

std::vector<mc::longitudinal_case> load_cases_preprocessed(const mc::run_config& cfg,
                                                           const std::string& data_dir) {
    std::vector<mc::longitudinal_case> cases = mc::load_cohort(data_dir);
    if (cases.empty()) {
        throw mc::degenerate_input_error("cohort at " + data_dir + " is empty");
    }
    if (!cases.front().preprocessed) {
        mc::preprocess_cohort(cases, cfg.preprocess, cfg.effective_jobs());
    }
    return cases;
}

int cmd_phantom_gen(const cli_options& opt) {
    const mc::run_config cfg = load_config_or_default(opt);
    const fs::path out = opt.out_path;
    const auto cases = mc::generate_cohort(cfg.seed, cfg.n_patients, cfg.phantom, out);
    std::vector<fs::path> artifacts{out / "cohort.json"};
    write_tool_provenance(cfg, out / "provenance.json", artifacts);
    std::printf("phantom-gen: wrote %zu cases to %s\n", cases.size(), out.string().c_str());
    return exit_ok;
}

int cmd_preprocess(const cli_options& opt) {
    const mc::run_config cfg = load_config_or_default(opt);
    const nlohmann::json manifest = mc::load_cohort_manifest(opt.data_dir);
    std::vector<mc::longitudinal_case> cases = mc::load_cohort(opt.data_dir);
    mc::preprocess_cohort(cases, cfg.preprocess, cfg.effective_jobs());
    const fs::path out = opt.out_path;
    mc::write_cohort(cases, manifest.value("params", nlohmann::json::object()),
                     manifest.value("seed", std::uint64_t{0}), out);
    write_tool_provenance(cfg, out / "provenance.json", {out / "cohort.json"});
    std::printf("preprocess: wrote %zu cases to %s\n", cases.size(), out.string().c_str());
    return exit_ok;
}

int cmd_train_bone(const cli_options& opt) {
    const mc::run_config cfg = load_config_or_default(opt);
    const auto cases = load_cases_preprocessed(cfg, opt.data_dir);
    mc::unet_model net = mc::build_unet(cfg.bonenet, mc::derive_seed(cfg.seed, "init-bone"));
    mc::bone_dataset ds = mc::build_bone_dataset(cases, cfg.bonenet.input_size);
    ds = mc::detail::subsample_bone_dataset(std::move(ds),
                                            static_cast<std::size_t>(cfg.max_bone_slices),
                                            cfg.seed);
    const std::vector<double> history = mc::train_unet(net, ds.pairs);
    mc::save_checkpoint(net, opt.out_path);
    write_tool_provenance(cfg, fs::path(opt.out_path + ".provenance.json"),
                          {opt.out_path + ".json", opt.out_path + ".bin"});
    std::printf("train-bone: %zu slices, %d epochs, final loss %.6f -> %s\n", ds.pairs.size(),
                cfg.bonenet.epochs, history.empty() ? 0.0 : history.back(),
                opt.out_path.c_str());
    return exit_ok;
}

int cmd_train_lesion(const cli_options& opt) {
    const mc::run_config cfg = load_config_or_default(opt);
    const auto cases = load_cases_preprocessed(cfg, opt.data_dir);

    mc::lesion_dataset_options dso;
    dso.patch_size = cfg.lesionnet.input_size;
    dso.stride = cfg.stride;
    dso.threshold = cfg.threshold;
    dso.dilate_radius = cfg.dilate_radius;
    mc::unet_model bonenet;
    if (!opt.bonenet_prefix.empty()) {
        bonenet = mc::load_checkpoint(opt.bonenet_prefix);
        dso.source = mc::bone_source::bonenet;
        dso.bonenet = &bonenet;
    }
    mc::lesion_dataset ds = mc::build_lesion_dataset(cases, dso);
    ds = mc::subsample_lesion_dataset(std::move(ds),
                                      static_cast<std::size_t>(cfg.max_train_patches), cfg.seed);
    mc::unet_config lcfg = cfg.lesionnet;
    if (cfg.auto_w_pos && lcfg.loss == mc::loss_kind::weighted_bce) {
        lcfg.w_pos = ds.imbalance_w_pos();
    }
    mc::unet_model net = mc::build_unet(lcfg, mc::derive_seed(cfg.seed, "init-lesion"));
    const std::vector<double> history = mc::train_unet(net, ds.pairs);
    mc::save_checkpoint(net, opt.out_path);
    write_tool_provenance(cfg, fs::path(opt.out_path + ".provenance.json"),
                          {opt.out_path + ".json", opt.out_path + ".bin"});
    std::printf("train-lesion: %zu patches (w_pos %.2f), %d epochs, final loss %.6f -> %s\n",
                ds.pairs.size(), lcfg.w_pos, lcfg.epochs,
                history.empty() ? 0.0 : history.back(), opt.out_path.c_str());
    return exit_ok;
}

int cmd_predict(const cli_options& opt) {
    const mc::run_config cfg = load_config_or_default(opt);
    mc::cascade_pipeline pipe;
    pipe.bonenet = mc::load_checkpoint(opt.bonenet_prefix);
    pipe.lesionnet = mc::load_checkpoint(opt.lesionnet_prefix);
    pipe.threshold = cfg.threshold;
    pipe.dilate_radius = cfg.dilate_radius;
    pipe.patch_size = pipe.lesionnet.config.input_size;
    pipe.stride = cfg.stride;
    pipe.fusion = cfg.fusion;
    pipe.inference_batch = cfg.inference_batch;
    pipe.validate();

    const mc::volume input = mc::load_nifti(opt.in_path);
    const mc::risk_prediction pred = mc::predict_risk_volume(pipe, input);
    mc::save_nifti(pred.risk, opt.out_path);
    write_tool_provenance(cfg, fs::path(opt.out_path + ".provenance.json"),
                          {opt.bonenet_prefix + ".bin", opt.lesionnet_prefix + ".bin",
                           fs::path(opt.out_path)});
    std::printf("predict: %dx%dx%d risk volume -> %s\n", pred.risk.nx, pred.risk.ny, pred.risk.nz,
                opt.out_path.c_str());
    return exit_ok;
}

int cmd_evaluate(const cli_options& opt) {
    const mc::run_config cfg = load_config_or_default(opt);
    const auto cases = load_cases_preprocessed(cfg, opt.data_dir);
    const fs::path out = opt.out_path.empty() ? fs::path(cfg.out_dir) : fs::path(opt.out_path);
    const mc::experiment_result result = mc::run_experiment(cases, cfg, out);
    auto fmt = [](const std::optional<double>& v) {
        return v ? std::to_string(*v) : std::string("undefined");
    };
    std::printf("evaluate: %zu folds (%d failed) -> %s\n", result.summary.folds.size(),
                result.summary.n_failed, out.string().c_str());
    std::printf("  mean bone AUC:           %s\n", fmt(result.summary.mean_bone_auc).c_str());
    std::printf("  mean lesion AUC thorax:  %s\n",
                fmt(result.summary.mean_lesion_thorax_auc).c_str());
    std::printf("  mean lesion AUC legs:    %s\n", fmt(result.summary.mean_lesion_legs_auc).c_str());
    return result.summary.n_failed == 0 ? exit_ok : exit_data;
}

int cmd_report(const cli_options& opt) {
    const fs::path dir = opt.results_dir;
    std::ifstream in(dir / "summary.json");
    if (!in) throw mc::io_error("cannot open " + (dir / "summary.json").string());
    nlohmann::json summary;
    try {
        in >> summary;
    } catch (const nlohmann::json::exception& e) {
        throw mc::format_error("invalid summary.json: " + std::string(e.what()));
    }
    auto cell = [](const nlohmann::json& region) {
        if (!region.value("defined", false)) return std::string("   undef");
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%8.4f", region.at("auc").get<double>());
        return std::string(buf);
    };
    std::printf("%-6s %-10s %-8s %-8s %-8s\n", "fold", "patient", "bone", "thorax", "legs");
    for (const auto& f : summary.at("folds")) {
        if (f.value("failed", false)) {
            std::printf("%-6d %-10s FAILED: %s\n", f.at("fold").get<int>(),
                        f.at("patient_id").get<std::string>().c_str(),
                        f.value("error", std::string("?")).c_str());
            continue;
        }
        std::printf("%-6d %-10s %s %s %s\n", f.at("fold").get<int>(),
                    f.at("patient_id").get<std::string>().c_str(), cell(f.at("bone")).c_str(),
                    cell(f.at("lesion_thorax")).c_str(), cell(f.at("lesion_legs")).c_str());
    }
    const auto& means = summary.at("means");
    auto mean_cell = [](const nlohmann::json& v) {
        if (v.is_null()) return std::string("undefined");
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.4f", v.get<double>());
        return std::string(buf);
    };
    std::printf("means: bone %s, lesion thorax %s, lesion legs %s\n",
                mean_cell(means.at("bone_auc")).c_str(),
                mean_cell(means.at("lesion_thorax_auc")).c_str(),
                mean_cell(means.at("lesion_legs_auc")).c_str());
    if (opt.regen_svg) {
        for (const char* region : {"bone", "lesion_thorax", "lesion_legs"}) {
            const fs::path csv = dir / ("roc_" + std::string(region) + ".csv");
            const auto pts = mc::read_roc_csv(csv);
            mc::write_roc_svg(pts, "ROC - " + std::string(region),
                              dir / ("roc_" + std::string(region) + ".svg"));
        }
        std::printf("report: refreshed ROC SVGs in %s\n", dir.string().c_str());
    }
    return exit_ok;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"marrowcast: two-stage bone/lesion cascade on longitudinal volumes"};
    app.require_subcommand(1);
    cli_options opt;

    auto add_common = [&opt](CLI::App* sub, bool needs_config) {
        auto* c = sub->add_option("--config", opt.config_path, "run configuration JSON");
        if (needs_config) c->required()->check(CLI::ExistingFile);
        sub->add_option("--jobs", opt.jobs, "worker threads (default: config, then $MARROWCAST_JOBS)");
        sub->add_option("--seed", opt.seed, "override the global seed");
    };

    CLI::App* gen = app.add_subcommand("phantom-gen", "generate a synthetic longitudinal cohort");
    add_common(gen, true);
    gen->add_option("--out", opt.out_path, "output cohort directory")->required();

    CLI::App* pre = app.add_subcommand("preprocess",
                                       "bias-correct, normalize and align a cohort");
    add_common(pre, false);
    pre->add_option("--data", opt.data_dir, "input cohort directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    pre->add_option("--out", opt.out_path, "output cohort directory")->required();

    CLI::App* tb = app.add_subcommand("train-bone", "train the slice-level bone network");
    add_common(tb, true);
    tb->add_option("--data", opt.data_dir, "cohort directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    tb->add_option("--out", opt.out_path, "checkpoint prefix to write")->required();

    CLI::App* tl = app.add_subcommand("train-lesion", "train the patch-level lesion network");
    add_common(tl, true);
    tl->add_option("--data", opt.data_dir, "cohort directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    tl->add_option("--out", opt.out_path, "checkpoint prefix to write")->required();
    tl->add_option("--bonenet", opt.bonenet_prefix,
                   "bone checkpoint prefix (default: ground-truth bone masks)");

    CLI::App* pr = app.add_subcommand("predict", "risk map for one volume");
    add_common(pr, false);
    pr->add_option("--in", opt.in_path, "input volume (.nii)")
        ->required()
        ->check(CLI::ExistingFile);
    pr->add_option("--bonenet", opt.bonenet_prefix, "bone checkpoint prefix")->required();
    pr->add_option("--lesionnet", opt.lesionnet_prefix, "lesion checkpoint prefix")->required();
    pr->add_option("--out", opt.out_path, "output risk volume (.nii)")->required();

    CLI::App* ev = app.add_subcommand("evaluate",
                                      "leave-one-out cross-validation, end to end");
    add_common(ev, true);
    ev->add_option("--data", opt.data_dir, "cohort directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    ev->add_option("--out", opt.out_path, "results directory (default: config out_dir)");

    CLI::App* rp = app.add_subcommand("report", "print a results table from summary.json");
    rp->add_option("--results", opt.results_dir, "results directory from evaluate")
        ->required()
        ->check(CLI::ExistingDirectory);
    rp->add_flag("--svg", opt.regen_svg, "regenerate ROC SVGs from the CSVs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? exit_ok : exit_usage;
    }

    try {
        if (gen->parsed()) return cmd_phantom_gen(opt);
        if (pre->parsed()) return cmd_preprocess(opt);
        if (tb->parsed()) return cmd_train_bone(opt);
        if (tl->parsed()) return cmd_train_lesion(opt);
        if (pr->parsed()) return cmd_predict(opt);
        if (ev->parsed()) return cmd_evaluate(opt);
        if (rp->parsed()) return cmd_report(opt);
        std::fprintf(stderr, "marrowcast: usage: no subcommand given\n");
        return exit_usage;
    } catch (const mc::config_error& e) {
        std::fprintf(stderr, "marrowcast: config: %s\n", e.what());
        return exit_usage;
    } catch (const mc::numeric_error& e) {
        std::fprintf(stderr, "marrowcast: numeric: %s\n", e.what());
        return exit_numeric;
    } catch (const mc::error& e) {
        std::fprintf(stderr, "marrowcast: data: %s\n", e.what());
        return exit_data;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "marrowcast: data: %s\n", e.what());
        return exit_data;
    }
}
