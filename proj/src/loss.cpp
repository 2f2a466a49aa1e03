#include "chemmap/loss.hpp"

#include <cmath>

namespace chemmap {

namespace {

void check_pair(const Tensor& y_hat, const Tensor& mask, const char* what) {
    if (y_hat.rank() != 3) throw ShapeError(std::string(what) + ": predictions must be B x H x W");
    if (!y_hat.same_shape(mask))
        throw ShapeError(std::string(what) + ": prediction " + shape_string(y_hat.shape) + " and mask " +
                         shape_string(mask.shape) + " differ");
    for (double m : mask.values)
        if (m != 0.0 && m != 1.0) throw Error(std::string(what) + ": mask must be binary");
}

}  // namespace

void LossBreakdown::combine() {
    total = weights.mse * mse + weights.oobl * oobl + weights.sl * sl + weights.l2 * l2;
}

Tensor masked_prediction(const Tensor& y_hat, const Tensor& mask) {
    check_pair(y_hat, mask, "masked_prediction");
    Tensor out(y_hat.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = y_hat.values[i] * mask.values[i];
    return out;
}

std::vector<double> mean_fat(const Tensor& y_hat_masked, const Tensor& mask) {
    check_pair(y_hat_masked, mask, "mean_fat");
    const int B = y_hat_masked.dim(0);
    const std::size_t plane = static_cast<std::size_t>(y_hat_masked.dim(1)) * y_hat_masked.dim(2);
    std::vector<double> out(B);
    for (int b = 0; b < B; ++b) {
        double sum = 0.0, count = 0.0;
        for (std::size_t i = b * plane; i < (b + 1) * plane; ++i) {
            sum += y_hat_masked.values[i];
            count += mask.values[i];
        }
        if (count == 0.0) throw Error("mean_fat: sample " + std::to_string(b) + " has an empty mask");
        out[b] = sum / count;
    }
    return out;
}

double mse(std::span<const double> y, std::span<const double> y_hat) {
    if (y.size() != y_hat.size()) throw ShapeError("mse: length mismatch");
    if (y.empty()) throw Error("mse: empty batch");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - y_hat[i]) * (y[i] - y_hat[i]);
    return s / static_cast<double>(y.size());
}

double oobl(const Tensor& y_hat_masked) {
    if (y_hat_masked.rank() != 3) throw ShapeError("oobl: predictions must be B x H x W");
    double s = 0.0;
    for (double v : y_hat_masked.values) {
        const double lo = std::max(-v, 0.0);
        const double hi = std::max(v - 100.0, 0.0);
        s += lo * lo + hi * hi;
    }
    return s / y_hat_masked.dim(0);
}

double smoothness(const Tensor& y_hat, const Tensor& mask) {
    check_pair(y_hat, mask, "smoothness");
    const int B = y_hat.dim(0), H = y_hat.dim(1), W = y_hat.dim(2);
    if (H < 2 || W < 2) throw ShapeError("smoothness: maps must be at least 2 x 2");
    double total = 0.0;
    for (int b = 0; b < B; ++b) {
        double sum = 0.0, count = 0.0;
        for (int h = 0; h < H - 1; ++h)
            for (int w = 0; w < W - 1; ++w) {
                if (mask.at(b, h, w) == 0.0) continue;
                const double v = y_hat.at(b, h, w);
                const double dh = v - y_hat.at(b, h + 1, w);
                const double dw = v - y_hat.at(b, h, w + 1);
                sum += dh * dh + dw * dw;
                count += 1.0;
            }
        if (count > 0.0) total += sum / count;
    }
    return total / B;
}

double l2(const NetParams& params) {
    double s = 0.0;
    for (const auto& e : params.entries) {
        if (e.is_bias) continue;
        for (double v : e.tensor.values) s += v * v;
    }
    return s;
}

LossBreakdown map_loss(const Tensor& y_hat, const Tensor& mask, std::span<const double> y,
                       const LossWeights& weights, double l2_value, Tensor* d_yhat) {
    check_pair(y_hat, mask, "total_loss");
    const int B = y_hat.dim(0), H = y_hat.dim(1), W = y_hat.dim(2);
    if (y.size() != static_cast<std::size_t>(B)) throw ShapeError("total_loss: reference count differs from batch");

    const Tensor masked = masked_prediction(y_hat, mask);
    const std::vector<double> y_mean = mean_fat(masked, mask);

    LossBreakdown out;
    out.weights = weights;
    out.mse = mse(y, y_mean);
    out.oobl = oobl(masked);
    out.sl = smoothness(y_hat, mask);
    out.l2 = l2_value;
    out.combine();

    if (d_yhat) {
        *d_yhat = Tensor(y_hat.shape);
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        for (int b = 0; b < B; ++b) {
            double count = 0.0;
            for (std::size_t i = b * plane; i < (b + 1) * plane; ++i) count += mask.values[i];
            // d MSE / d y_hat[b,h,w] = 2/B (mean_b - y_b) M / count_b
            const double g_mse = weights.mse * 2.0 / B * (y_mean[b] - y[b]) / count;
            for (std::size_t i = b * plane; i < (b + 1) * plane; ++i) {
                const double m = mask.values[i];
                const double v = masked.values[i];
                const double g_oob = 2.0 * (std::max(v - 100.0, 0.0) - std::max(-v, 0.0)) / B;
                d_yhat->values[i] = m * (g_mse + weights.oobl * g_oob);
            }

            double sl_count = 0.0;
            for (int h = 0; h < H - 1; ++h)
                for (int w = 0; w < W - 1; ++w) sl_count += mask.at(b, h, w);
            if (sl_count == 0.0) continue;
            const double c = weights.sl * 2.0 / (B * sl_count);
            for (int h = 0; h < H - 1; ++h)
                for (int w = 0; w < W - 1; ++w) {
                    if (mask.at(b, h, w) == 0.0) continue;
                    const double v = y_hat.at(b, h, w);
                    const double dh = v - y_hat.at(b, h + 1, w);
                    const double dw = v - y_hat.at(b, h, w + 1);
                    d_yhat->at(b, h, w) += c * (dh + dw);
                    d_yhat->at(b, h + 1, w) -= c * dh;
                    d_yhat->at(b, h, w + 1) -= c * dw;
                }
        }
    }
    return out;
}

LossBreakdown total_loss(const NetParams& params, const Tensor& y_hat, const Tensor& mask,
                         std::span<const double> y, const LossWeights& weights, Tensor* d_yhat,
                         NetParams* d_params) {
    LossBreakdown out = map_loss(y_hat, mask, y, weights, l2(params), d_yhat);
    if (d_params) {
        if (!d_params->same_layout(params)) throw ShapeError("total_loss: gradient layout differs from parameters");
        for (std::size_t e = 0; e < params.entries.size(); ++e) {
            if (params.entries[e].is_bias) continue;
            const auto& src = params.entries[e].tensor.values;
            auto& dst = d_params->entries[e].tensor.values;
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] += weights.l2 * 2.0 * src[i];
        }
    }
    return out;
}

}  // namespace chemmap
