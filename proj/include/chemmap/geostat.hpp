#pragma once

#include "chemmap/hsidata.hpp"

namespace chemmap {

struct SpatialStats {
    double sigma2 = 0.0;
    double c0 = 0.0;
    double ratio_uncorrelated = 0.0;
    double ratio_correlated = 0.0;
};

/// Half the masked mean of squared differences at offset (dh, dw), with the
/// mask evaluated at the base pixel. Offsets are non-negative.
double semivariogram(const ChemicalMap& map, const Mask& mask, int dh, int dw);

/// Mean of the semi-variogram at the two unit offsets.
double nugget(const ChemicalMap& map, const Mask& mask);

/// Population variance inside the mask, nugget, and the two (unclamped)
/// variance ratios.
SpatialStats spatial_stats(const ChemicalMap& map, const Mask& mask);

/// Normalised Gaussian convolution over foreground pixels only. Background
/// pixels are copied through unchanged.
ChemicalMap gaussian_smooth_map(const ChemicalMap& map, const Mask& mask, double sigma);

}  // namespace chemmap
