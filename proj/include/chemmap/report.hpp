#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "chemmap/hsidata.hpp"

namespace chemmap {

struct PredictionPair {
    std::string id;
    double reference = 0.0;
    double prediction = 0.0;
    std::string group;
};

struct GroupRmse {
    std::string group;
    std::size_t n = 0;
    double rmse = 0.0;
};

struct MetricsReport {
    std::size_t n = 0;
    double rmse = 0.0;
    double slope = 0.0;      // prediction = slope * reference + intercept
    double intercept = 0.0;
    std::optional<double> s_yx;  // needs n >= 3
    std::vector<GroupRmse> groups;  // sorted by group name
    std::vector<PredictionPair> pairs;
};

/// RMSE, least-squares line of predictions on references, s_YX with n-2
/// degrees of freedom, and per-group RMSE when groups are non-empty.
MetricsReport report_metrics(const std::vector<PredictionPair>& pairs);
MetricsReport report_metrics(const std::vector<double>& predictions, const std::vector<double>& references);

void write_metrics_csv(const MetricsReport& report, const std::filesystem::path& path);
void write_predictions_csv(const MetricsReport& report, const std::filesystem::path& path);

/// Masked pixels map to clamp(1 + round((v - lo) / (hi - lo) * 254), 1, 255);
/// background is 0.
std::vector<std::uint8_t> heatmap_bytes(const ChemicalMap& map, const Mask& mask, double lo, double hi);
/// Binary PGM (P5).
void render_heatmap(const ChemicalMap& map, const Mask& mask, double lo, double hi,
                    const std::filesystem::path& path);

struct Pgm {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;
};
Pgm read_pgm(const std::filesystem::path& path);

}  // namespace chemmap
