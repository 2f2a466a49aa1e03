#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "chemmap/hsidata.hpp"

namespace chemmap {

/// Preprocessing chain applied identically at calibration and prediction:
/// SNV, then Savitzky-Golay (valid mode), then column centering.
struct Preprocessing {
    bool snv = true;
    bool savgol = true;
    int sg_window = 7;
    int sg_poly = 2;
    int sg_deriv = 2;

    /// Number of features produced from `raw_bands` input bands.
    int output_length(int raw_bands) const;
};

struct Spectrum {
    std::vector<double> values;
    std::vector<double> wavelengths;
};

/// Row-wise standard normal variate (sample standard deviation).
Eigen::MatrixXd snv(const Eigen::MatrixXd& spectra);

/// Least-squares polynomial derivative weights at unit spacing, ordered from
/// offset -(window/2) to +(window/2).
Eigen::VectorXd savgol_coefficients(int window, int poly, int deriv);

/// Valid-mode Savitzky-Golay filtering; output has p - window + 1 columns.
Eigen::MatrixXd savgol(const Eigen::MatrixXd& spectra, int window = 7, int poly = 2, int deriv = 2);

/// SNV and Savitzky-Golay steps of the chain (no centering).
Eigen::MatrixXd preprocess(const Eigen::MatrixXd& raw, const Preprocessing& prep);

/// Per-band mean over the union of masked pixels of every slice. Cubes must
/// be in absorbance space.
Spectrum mean_belly_spectrum(std::span<const HsiCube> cubes, std::span<const Mask> masks);

/// Output of the kernel PLS recursion on centred data.
struct PlsFit {
    Eigen::MatrixXd weights;     // p x A
    Eigen::MatrixXd rotations;   // p x A, scores = X * rotations
    Eigen::MatrixXd x_loadings;  // p x A
    Eigen::VectorXd y_loadings;  // A
    Eigen::MatrixXd scores;      // n x A
    /// Cumulative regression vectors; coefficients[a - 1] uses a components.
    std::vector<Eigen::VectorXd> coefficients;
};

/// Improved Kernel PLS, algorithm 1 (Dayal & MacGregor), single response.
/// X and y must already be centred. Works on X'y and deflates only that
/// cross-covariance; X itself is never deflated.
PlsFit fit_pls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int components);

struct PlsModel {
    int raw_bands = 0;
    Preprocessing prep;
    Eigen::VectorXd x_mean;
    double y_mean = 0.0;
    std::vector<Eigen::VectorXd> coefficients;  // one per component count
    int n_components = 0;

    const Eigen::VectorXd& active_coefficients() const;
};

/// Preprocess, centre and fit on raw spectra (rows = samples).
PlsModel calibrate_pls(const Eigen::MatrixXd& raw, const Eigen::VectorXd& y, int components,
                       const Preprocessing& prep);

Eigen::VectorXd predict_pls(const PlsModel& model, const Eigen::MatrixXd& raw);
/// Prediction with an explicit component count (0 returns y_mean).
Eigen::VectorXd predict_pls(const PlsModel& model, const Eigen::MatrixXd& raw, int components);

struct CvResult {
    int best_components = 0;
    std::vector<double> rmse_curve;                // index a - 1
    std::vector<std::vector<double>> fold_rmse;    // [fold][a - 1]
    Eigen::MatrixXd out_of_fold;                   // n x A_max validation predictions
    PlsModel model;                                // refit on every sample
};

/// Fold-wise validation RMSE for every component count up to max_components;
/// preprocessing and centring are recomputed on each training fold. The
/// argmin (ties to fewer components) is refit on the full set.
CvResult select_components_cv(const Eigen::MatrixXd& raw, const Eigen::VectorXd& y,
                              const std::vector<int>& folds, int max_components,
                              const Preprocessing& prep);

/// Pixel-wise prediction inside `mask` and its one-pixel ring, which an
/// eroded mask guarantees is tissue; the ring keeps the map's forward
/// differences defined at the mask edge. Pixels beyond the ring are 0. The
/// map's mask is `mask`. No clamping is applied.
ChemicalMap pls_chemical_map(const PlsModel& model, const HsiCube& absorbance, const Mask& mask);

void write_pls_model(const PlsModel& model, const std::filesystem::path& path);
PlsModel read_pls_model(const std::filesystem::path& path);

}  // namespace chemmap
