#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "chemmap/hsidata.hpp"

namespace chemmap {

struct Bump {
    double center = 0.0;  // nm
    double width = 0.0;   // nm, Gaussian sigma
    double amplitude = 0.0;
};

struct EndmemberConfig {
    double baseline = 0.0;
    std::vector<Bump> bumps;
};

struct PhantomConfig {
    int height = 104;
    int width = 104;
    int bands = 16;
    double wavelength_start = 950.0;
    double wavelength_step = 40.0;

    EndmemberConfig fat{0.25, {{1210.0, 60.0, 2.2}, {1400.0, 80.0, 1.4}, {1730.0, 70.0, 2.4}}};
    EndmemberConfig lean{0.3, {{1180.0, 110.0, 1.4}, {1450.0, 90.0, 3.0}, {1650.0, 120.0, 1.0}}};
    EndmemberConfig background{0.9, {}};

    // Concentration field: random cosine mixture rescaled to [f_min, f_max].
    int field_terms = 6;
    double field_max_frequency = 3.0;  // cycles per image side
    double f_min = 20.0;
    double f_max = 60.0;

    // Mask: ellipse perturbed by a low-frequency cosine mixture, eroded once.
    double mask_radius_h = 0.4;  // fraction of height
    double mask_radius_w = 0.42;
    double mask_perturbation = 0.25;
    int mask_terms = 4;
    double mask_max_frequency = 2.0;

    double noise_sigma = 0.0;  // absorbance units

    void validate() const;
};

struct Phantom {
    HsiCube cube;  // reflectance
    Mask mask;
    ChemicalMap field;  // true concentration, full resolution, masked with `mask`
    double reference = 0.0;
    double noise_sigma = 0.0;
    std::vector<double> fat_spectrum;
    std::vector<double> lean_spectrum;
};

std::vector<double> phantom_wavelengths(const PhantomConfig& config);
std::vector<double> endmember_spectrum(const EndmemberConfig& endmember, const std::vector<double>& wavelengths);

Phantom make_phantom(const PhantomConfig& config, std::uint64_t seed);

/// Per-phantom field ranges for a batch: a level is drawn uniformly from
/// [level_min, level_max] and the field spans level +/- half_span, clipped
/// to [0, 100].
struct PhantomSetConfig {
    PhantomConfig phantom;
    int count = 60;
    double level_min = 25.0;
    double level_max = 65.0;
    double half_span = 10.0;
};

std::vector<Phantom> make_phantom_set(const PhantomSetConfig& config, std::uint64_t seed);

/// 2x2 block means; odd trailing rows or columns are dropped.
ChemicalMap block_mean_2x2(const ChemicalMap& map);

/// RMSE over `mask` between a predicted map and the true field. A field at
/// twice the map's resolution is block-averaged first.
double field_rmse(const ChemicalMap& predicted, const ChemicalMap& field, const Mask& mask);

/// Per-pixel least-squares unmixing of an absorbance cube with known
/// endmembers (fractions sum to one), in percent. Not clamped.
ChemicalMap unmix_field(const HsiCube& absorbance, const Mask& mask, const std::vector<double>& fat,
                        const std::vector<double>& lean);

/// Fat class of a reference value: lean below 30 %, medium below 50 %, fat
/// otherwise.
std::string reference_group(double reference);

/// Writes cubes, masks and true fields under `dir` plus manifest.csv. Each
/// phantom is its own belly with one slice.
void write_phantom_set(const std::vector<Phantom>& phantoms, const std::filesystem::path& dir,
                       const std::string& prefix = "ph");

}  // namespace chemmap
