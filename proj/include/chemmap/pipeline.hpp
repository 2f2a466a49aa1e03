#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chemmap/chemo.hpp"
#include "chemmap/geostat.hpp"
#include "chemmap/report.hpp"
#include "chemmap/synth.hpp"
#include "chemmap/train.hpp"

namespace chemmap {

/// Everything a study run needs. Read from and written to JSON; keys that
/// are absent keep their defaults.
struct StudyConfig {
    StudyConfig() { phantoms.phantom.noise_sigma = 0.08; }

    PhantomSetConfig phantoms;

    int test_count = 12;
    int folds = 5;
    double pca_variance = 0.99;

    // Both models see bands [band_start, bands); the network additionally bins them.
    int band_start = 0;
    int bin_factor = 2;

    int levels = 2;
    int base_width = 4;
    int stem_depth = 7;
    int out_h = 52;
    int out_w = 52;
    LossWeights weights;
    AdamConfig adam;
    ScheduleConfig schedule;
    double flip_probability = 0.5;

    Preprocessing pls_prep;
    int pls_max_components = 8;

    // Smoothing counter-experiment: sigma grid step and upper bound (pixels).
    double smoothing_step = 0.25;
    double smoothing_max = 30.0;

    void validate() const;
    int network_bands() const;
    NetConfig net_config() const;
};

StudyConfig parse_study_config(const std::string& json_text);
StudyConfig read_study_config(const std::filesystem::path& path);
std::string study_config_json(const StudyConfig& config);
void write_study_config(const StudyConfig& config, const std::filesystem::path& path);

/// The slices of one belly, in manifest order.
struct Belly {
    std::string id;
    double reference = 0.0;
    std::string group;
    std::vector<SampleRecord> slices;
};

/// Groups manifest rows by belly in order of first appearance. Rows of one
/// belly must agree on the reference.
std::vector<Belly> group_bellies(const std::vector<SampleRecord>& records);

/// File stem for per-slice outputs.
std::string slice_stem(const SampleRecord& record);

/// Absorbance cube restricted to the study's band range.
HsiCube load_absorbance(const SampleRecord& record, const StudyConfig& config);

/// Subset index per belly; the held-out test set has index `config.folds`.
using FoldAssignment = std::map<std::string, int>;

void write_folds(const std::vector<std::string>& ids, const std::vector<int>& subsets,
                 const std::filesystem::path& path);
FoldAssignment read_folds(const std::filesystem::path& path);

// ---- stages; each reads and writes files only ----

/// Phantom cubes, masks, true fields, manifest.csv and the config used.
void synth_stage(const StudyConfig& config, const std::filesystem::path& out_dir, std::uint64_t seed);

/// Two-way DUPLEX for the test set, then k-way DUPLEX on the remainder.
/// Writes mean_spectra.csv and folds.csv.
void split_stage(const StudyConfig& config, const std::filesystem::path& manifest,
                 const std::filesystem::path& out_dir);

/// Component count by fold CV on mean spectra, then a final fit on the CV
/// set. Writes pls.model and pls_cv.csv.
void pls_train_stage(const StudyConfig& config, const std::filesystem::path& manifest,
                     const std::filesystem::path& folds, const std::filesystem::path& out_dir);

/// Mean-spectrum and pixel-wise predictions for every belly, plus map files.
void pls_predict_stage(const StudyConfig& config, const std::filesystem::path& manifest,
                       const std::filesystem::path& model, const std::filesystem::path& folds,
                       const std::filesystem::path& out_dir);

/// One network per fold (that fold validates, the others train). Writes
/// fold_<k>.unp, loss_fold_<k>.csv and ensemble.json.
void unet_train_stage(const StudyConfig& config, const std::filesystem::path& manifest,
                      const std::filesystem::path& folds, const std::filesystem::path& out_dir,
                      std::uint64_t seed, const std::function<void(int, const EpochLog&)>& on_epoch = {});

void unet_predict_stage(const std::filesystem::path& manifest, const std::filesystem::path& ensemble,
                        const std::filesystem::path& folds, const std::filesystem::path& out_dir,
                        const StudyConfig& config);

/// Spatial statistics of one map; writes a one-row CSV.
SpatialStats analyze_stage(const std::filesystem::path& map, const std::filesystem::path& mask,
                           const std::filesystem::path& out_csv, std::optional<double> smooth_sigma = std::nullopt,
                           const std::filesystem::path& smoothed_out = {});

/// Metrics over a predictions CSV, optionally restricted to one subset
/// label ("cv" or "test").
MetricsReport report_stage(const std::filesystem::path& predictions, const std::filesystem::path& out_csv,
                           const std::string& subset = "");

// ---- phantom study ----

struct PhantomRow {
    std::string id;
    double reference = 0.0;
    double unet = 0.0;
    double pls_mean = 0.0;
    double pls_pixel = 0.0;
    double oracle = 0.0;
    double unet_field_rmse = 0.0;
    double pls_field_rmse = 0.0;
    SpatialStats unet_stats;
    SpatialStats pls_stats;
    double unet_oobl = 0.0;
    double smoothing_sigma = 0.0;  // first grid sigma with PLS nugget <= U-Net nugget, or -1
    double smoothed_pls_field_rmse = 0.0;
};

struct StudySummary {
    std::vector<PhantomRow> rows;  // test phantoms
    double unet_rmse = 0.0;
    double pls_mean_rmse = 0.0;
    double pls_pixel_rmse = 0.0;
    double oracle_rmse = 0.0;
    double unet_field_rmse = 0.0;  // mean over test phantoms
    double pls_field_rmse = 0.0;
    double unet_ratio_correlated = 0.0;
    double pls_ratio_correlated = 0.0;
    double max_unet_oobl = 0.0;
    int smoothing_failures = 0;  // phantoms where smoothed PLS beat the U-Net
};

/// Scores the test phantoms of a finished study directory against their
/// true fields. Writes phantom_eval.csv and summary.csv.
StudySummary evaluate_study(const StudyConfig& config, const std::filesystem::path& study_dir);

/// synth, split, pls-train, pls-predict, unet-train, unet-predict, report
/// and evaluation in one directory.
StudySummary run_study(const StudyConfig& config, const std::filesystem::path& out_dir, std::uint64_t seed,
                       const std::function<void(const std::string&)>& progress = {});

}  // namespace chemmap
