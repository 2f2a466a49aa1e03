// chemmap command-line interface.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "chemmap/pipeline.hpp"

namespace fs = std::filesystem;
using namespace chemmap;

namespace {

StudyConfig load_config(const std::string& path) {
    return path.empty() ? StudyConfig{} : read_study_config(path);
}

void print_metrics(const std::string& label, const MetricsReport& r) {
    std::printf("%-10s n=%zu rmse=%.4f slope=%.4f intercept=%.4f", label.c_str(), r.n, r.rmse, r.slope, r.intercept);
    if (r.s_yx) std::printf(" s_yx=%.4f", *r.s_yx);
    std::printf("\n");
    for (const auto& g : r.groups) std::printf("  %-8s n=%zu rmse=%.4f\n", g.group.c_str(), g.n, g.rmse);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Chemical maps from hyperspectral cubes: pixel-wise PLS and a valid-convolution U-Net"};
    app.require_subcommand(1);

    std::string config_path, manifest, out, folds, model, ensemble, map, mask, predictions, subset, smoothed_out;
    std::uint64_t seed = 1;
    std::optional<double> smooth;
    bool quiet = false;

    const auto add_config = [&](CLI::App* c) { c->add_option("--config", config_path, "Study config (JSON)"); };
    const auto add_manifest = [&](CLI::App* c) {
        c->add_option("--manifest", manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
    };
    const auto add_out = [&](CLI::App* c) { c->add_option("--out", out, "Output directory")->required(); };
    const auto add_folds = [&](CLI::App* c) {
        c->add_option("--folds", folds, "Subset assignment CSV from `split`")->required()->check(CLI::ExistingFile);
    };
    const auto add_seed = [&](CLI::App* c) { c->add_option("--seed", seed, "Random seed"); };

    auto* defaults = app.add_subcommand("default-config", "Print the default study config");

    auto* synth = app.add_subcommand("synth", "Generate a phantom set with manifest and true fields");
    add_config(synth);
    add_out(synth);
    add_seed(synth);

    auto* split = app.add_subcommand("split", "DUPLEX test/CV split and CV folds on mean spectra");
    add_config(split);
    add_manifest(split);
    add_out(split);

    auto* pls_train = app.add_subcommand("pls-train", "PLS component selection by fold CV and final fit");
    add_config(pls_train);
    add_manifest(pls_train);
    add_folds(pls_train);
    add_out(pls_train);

    auto* pls_predict = app.add_subcommand("pls-predict", "PLS mean-spectrum predictions and pixel-wise maps");
    add_config(pls_predict);
    add_manifest(pls_predict);
    add_folds(pls_predict);
    pls_predict->add_option("--model", model, "PLS model file")->required()->check(CLI::ExistingFile);
    add_out(pls_predict);

    auto* unet_train = app.add_subcommand("unet-train", "Train one U-Net per CV fold");
    add_config(unet_train);
    add_manifest(unet_train);
    add_folds(unet_train);
    add_out(unet_train);
    add_seed(unet_train);
    unet_train->add_flag("--quiet", quiet, "Suppress per-epoch output");

    auto* unet_predict = app.add_subcommand("unet-predict", "Ensemble maps and belly predictions");
    add_config(unet_predict);
    add_manifest(unet_predict);
    add_folds(unet_predict);
    unet_predict->add_option("--ensemble", ensemble, "Ensemble descriptor")->required()->check(CLI::ExistingFile);
    add_out(unet_predict);

    auto* analyze = app.add_subcommand("analyze", "Variance decomposition of one map");
    analyze->add_option("--map", map, "Map file (CHM1)")->required()->check(CLI::ExistingFile);
    analyze->add_option("--mask", mask, "Mask file")->required()->check(CLI::ExistingFile);
    analyze->add_option("--out", out, "Output CSV")->required();
    analyze->add_option("--smooth", smooth, "Also analyse a Gaussian-smoothed copy with this sigma (pixels)");
    analyze->add_option("--smoothed-out", smoothed_out, "Where to write the smoothed map");

    auto* report = app.add_subcommand("report", "RMSE, line of best fit and per-group RMSE");
    report->add_option("--predictions", predictions, "Predictions CSV")->required()->check(CLI::ExistingFile);
    report->add_option("--out", out, "Output metrics CSV")->required();
    report->add_option("--subset", subset, "Restrict to 'cv' or 'test'");

    auto* study = app.add_subcommand("study", "Full phantom study: every stage plus evaluation");
    add_config(study);
    add_out(study);
    add_seed(study);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*defaults) {
            std::cout << study_config_json(StudyConfig{});
        } else if (*synth) {
            synth_stage(load_config(config_path), out, seed);
        } else if (*split) {
            split_stage(load_config(config_path), manifest, out);
        } else if (*pls_train) {
            pls_train_stage(load_config(config_path), manifest, folds, out);
        } else if (*pls_predict) {
            pls_predict_stage(load_config(config_path), manifest, model, folds, out);
        } else if (*unet_train) {
            unet_train_stage(load_config(config_path), manifest, folds, out, seed, [&](int f, const EpochLog& e) {
                if (quiet) return;
                std::printf("fold %d epoch %3d lr %.1e train_mse %10.4f val_mse %10.4f%s%s\n", f, e.epoch, e.lr,
                            e.train.mse, e.val.mse, e.new_best ? " *" : "",
                            e.action == ScheduleAction::continue_training ? "" : (std::string(" ") + to_string(e.action)).c_str());
                std::fflush(stdout);
            });
        } else if (*unet_predict) {
            unet_predict_stage(manifest, ensemble, folds, out, load_config(config_path));
        } else if (*analyze) {
            const SpatialStats s = analyze_stage(map, mask, out, smooth, smoothed_out);
            std::printf("sigma2=%.6g c0=%.6g ratio_uncorrelated=%.4f ratio_correlated=%.4f\n", s.sigma2, s.c0,
                        s.ratio_uncorrelated, s.ratio_correlated);
        } else if (*report) {
            print_metrics(subset.empty() ? "all" : subset, report_stage(predictions, out, subset));
        } else if (*study) {
            const StudySummary s = run_study(load_config(config_path), out, seed, [](const std::string& m) {
                std::printf("%s\n", m.c_str());
                std::fflush(stdout);
            });
            std::printf("test RMSE: unet %.4f  pls-mean %.4f  pls-pixel %.4f  oracle %.4f\n", s.unet_rmse,
                        s.pls_mean_rmse, s.pls_pixel_rmse, s.oracle_rmse);
            std::printf("field RMSE: unet %.4f  pls %.4f\n", s.unet_field_rmse, s.pls_field_rmse);
            std::printf("ratio_correlated: unet %.4f  pls %.4f\n", s.unet_ratio_correlated, s.pls_ratio_correlated);
            std::printf("max unet OOBL %.6g, smoothing failures %d\n", s.max_unet_oobl, s.smoothing_failures);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "chemmap: %s\n", e.what());
        return 1;
    }
    return 0;
}
