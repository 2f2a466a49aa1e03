#include "chemmap/geostat.hpp"

#include <cmath>

namespace chemmap {

namespace {

void check_pair(const ChemicalMap& map, const Mask& mask, const char* what) {
    if (map.height != mask.height || map.width != mask.width)
        throw ShapeError(std::string(what) + ": map " + std::to_string(map.height) + "x" +
                         std::to_string(map.width) + " and mask " + std::to_string(mask.height) + "x" +
                         std::to_string(mask.width) + " differ");
}

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    return k;
}

}  // namespace

double semivariogram(const ChemicalMap& map, const Mask& mask, int dh, int dw) {
    check_pair(map, mask, "semivariogram");
    if (dh < 0 || dw < 0 || dh >= map.height || dw >= map.width)
        throw Error("semivariogram: offset (" + std::to_string(dh) + ", " + std::to_string(dw) +
                    ") outside the map");
    double sum = 0.0;
    for (int h = 0; h < map.height - dh; ++h)
        for (int w = 0; w < map.width - dw; ++w) {
            if (!mask.at(h, w)) continue;
            const double d = map.at(h, w) - map.at(h + dh, w + dw);
            sum += d * d;
        }
    const std::size_t count = mask.count();
    if (count == 0) throw Error("semivariogram: empty mask");
    return 0.5 * sum / static_cast<double>(count);
}

double nugget(const ChemicalMap& map, const Mask& mask) {
    return 0.5 * (semivariogram(map, mask, 0, 1) + semivariogram(map, mask, 1, 0));
}

SpatialStats spatial_stats(const ChemicalMap& map, const Mask& mask) {
    check_pair(map, mask, "spatial_stats");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < map.values.size(); ++i)
        if (mask.values[i]) {
            sum += map.values[i];
            ++n;
        }
    if (n < 2) throw Error("spatial_stats: need at least 2 masked pixels");
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < map.values.size(); ++i)
        if (mask.values[i]) ss += (map.values[i] - mean) * (map.values[i] - mean);
    SpatialStats s;
    s.sigma2 = ss / static_cast<double>(n);
    if (!(s.sigma2 > 0.0)) throw NumericError("spatial_stats: zero variance inside the mask");
    s.c0 = nugget(map, mask);
    s.ratio_uncorrelated = s.c0 / s.sigma2;
    s.ratio_correlated = 1.0 - s.ratio_uncorrelated;
    return s;
}

ChemicalMap gaussian_smooth_map(const ChemicalMap& map, const Mask& mask, double sigma) {
    check_pair(map, mask, "gaussian_smooth_map");
    if (!(sigma >= 0.0)) throw Error("gaussian_smooth_map: sigma must be non-negative");
    if (sigma == 0.0) return map;
    const std::vector<double> k = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);
    const int H = map.height, W = map.width;

    // Separable pass over value*mask and mask; the ratio is the normalised result.
    std::vector<double> num(map.values.size()), den(map.values.size());
    for (std::size_t i = 0; i < num.size(); ++i) {
        den[i] = mask.values[i] ? 1.0 : 0.0;
        num[i] = den[i] * map.values[i];
    }
    std::vector<double> tn(num.size()), td(num.size());
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            double a = 0.0, b = 0.0;
            for (int j = std::max(0, w - radius); j <= std::min(W - 1, w + radius); ++j) {
                const std::size_t idx = static_cast<std::size_t>(h) * W + j;
                a += k[j - w + radius] * num[idx];
                b += k[j - w + radius] * den[idx];
            }
            tn[static_cast<std::size_t>(h) * W + w] = a;
            td[static_cast<std::size_t>(h) * W + w] = b;
        }
    ChemicalMap out = map;
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            if (!mask.at(h, w)) continue;
            double a = 0.0, b = 0.0;
            for (int i = std::max(0, h - radius); i <= std::min(H - 1, h + radius); ++i) {
                const std::size_t idx = static_cast<std::size_t>(i) * W + w;
                a += k[i - h + radius] * tn[idx];
                b += k[i - h + radius] * td[idx];
            }
            out.at(h, w) = a / b;
        }
    return out;
}

}  // namespace chemmap
