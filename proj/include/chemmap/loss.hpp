#pragma once

#include <span>
#include <vector>

#include "chemmap/diffnet.hpp"
#include "chemmap/tensor.hpp"

namespace chemmap {

struct LossWeights {
    double mse = 1.0;
    double oobl = 1e-3;
    double sl = 20.0;
    double l2 = 1e-3;
};

struct LossBreakdown {
    double mse = 0.0;
    double oobl = 0.0;
    double sl = 0.0;
    double l2 = 0.0;
    double total = 0.0;
    LossWeights weights;

    /// Recomputes `total` from the terms and weights.
    void combine();
};

// Predictions and masks are B x H x W tensors; masks hold only 0 and 1.

Tensor masked_prediction(const Tensor& y_hat, const Tensor& mask);

/// Per-sample mean of the masked prediction over the mask.
std::vector<double> mean_fat(const Tensor& y_hat_masked, const Tensor& mask);

double mse(std::span<const double> y, std::span<const double> y_hat);

/// Squared excursions outside [0, 100], summed over pixels and averaged over
/// the batch. Not normalised by mask size.
double oobl(const Tensor& y_hat_masked);

/// Squared forward-difference gradient magnitude at masked pixels with
/// h < H-1 and w < W-1, divided by their count, averaged over the batch.
/// A sample with no such pixels contributes 0.
double smoothness(const Tensor& y_hat, const Tensor& mask);

/// Sum of squared kernel weights; biases are excluded.
double l2(const NetParams& params);

/// Weighted total of the four terms. When `d_yhat` is non-null it receives
/// d(total)/d(y_hat); when `d_params` is non-null the L2 gradient is added
/// into it (it must share the layout of `params`).
LossBreakdown total_loss(const NetParams& params, const Tensor& y_hat, const Tensor& mask,
                         std::span<const double> y, const LossWeights& weights = {}, Tensor* d_yhat = nullptr,
                         NetParams* d_params = nullptr);

/// Same as total_loss but with the L2 term supplied directly (for callers
/// that only need map-dependent terms).
LossBreakdown map_loss(const Tensor& y_hat, const Tensor& mask, std::span<const double> y,
                       const LossWeights& weights, double l2_value, Tensor* d_yhat = nullptr);

}  // namespace chemmap
