#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "chemmap/common.hpp"

namespace chemmap {

enum class Space { reflectance, absorbance };

const char* to_string(Space space);
Space space_from_string(const std::string& tag);

/// Hyperspectral cube stored band-major: value(b, r, c) lives at
/// (b * height + r) * width + c.
struct HsiCube {
    int bands = 0;
    int height = 0;
    int width = 0;
    std::vector<double> values;
    std::vector<double> wavelengths;
    Space space = Space::reflectance;

    HsiCube() = default;
    HsiCube(int bands, int height, int width, Space space = Space::reflectance);

    std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
    std::size_t index(int b, int r, int c) const {
        return (static_cast<std::size_t>(b) * height + r) * width + c;
    }
    double& at(int b, int r, int c) { return values[index(b, r, c)]; }
    double at(int b, int r, int c) const { return values[index(b, r, c)]; }

    /// Copies the spectrum of one pixel.
    std::vector<double> spectrum(int r, int c) const;

    /// Throws if the shape, wavelength ordering or value domain is inconsistent.
    void validate() const;
};

struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> values;

    Mask() = default;
    Mask(int height, int width, std::uint8_t fill = 0);

    std::uint8_t& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
    std::uint8_t at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
    std::size_t count() const;
    void validate() const;
};

/// A 2D concentration raster (percent) paired with the mask it is valid on.
struct ChemicalMap {
    int height = 0;
    int width = 0;
    std::vector<double> values;
    Mask mask;

    ChemicalMap() = default;
    ChemicalMap(int height, int width);

    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
    /// Mean of the raster over foreground pixels of its mask.
    double masked_mean() const;
};

/// Size bookkeeping for the stem + valid-convolution U-Net.
///
/// The decoder recursion X_{s+1} = (X_s + 4) / 2 starts at the output size;
/// X_L is the bottleneck output. The network consumes out + context pixels
/// per axis where context = 12 * 2^L - 8.
struct Geometry {
    int levels = 0;
    int stem_depth = 0;
    int out_h = 0, out_w = 0;
    int unet_h = 0, unet_w = 0;
    int stage1_h = 0, stage1_w = 0;
    int padded_h = 0, padded_w = 0;
    int context = 0;
};

Geometry compute_geometry(int levels, int out_h, int out_w, int stem_depth);

/// Context pixels consumed by a valid-convolution U-Net with `levels` poolings.
int unet_context(int levels);

/// Expected spatial size of every tensor the network produces, in forward
/// order, labelled the same way the network labels its own trace.
struct LayerSize {
    std::string name;
    int height = 0;
    int width = 0;
};
std::vector<LayerSize> expected_layer_sizes(const Geometry& geometry);

struct SampleRecord {
    std::string belly_id;
    std::string slice_id;
    std::filesystem::path cube_path;
    std::filesystem::path mask_path;
    double reference = 0.0;
    std::string group;
};

// ---- transforms ----

HsiCube to_absorbance(const HsiCube& cube, double epsilon = 1e-6);
HsiCube select_bands(const HsiCube& cube, int start_index);
HsiCube bin_bands(const HsiCube& cube, int factor = 2);

/// Binary erosion with the radius-one disk (centre + 4-neighbours). Pixels
/// outside the image count as background.
Mask erode_mask(const Mask& mask);
/// Binary dilation with the same disk; the inverse neighbourhood of erode_mask.
Mask dilate_mask(const Mask& mask);

struct PaddedSample {
    HsiCube cube;      // bands x padded_h x padded_w
    Mask stage1_mask;  // stage1_h x stage1_w
};

/// Background padding (or centre cropping) to the stage-1 size followed by
/// symmetric mirror padding to the network input size.
PaddedSample pad_two_stage(const HsiCube& cube, const Mask& mask, const Geometry& geometry,
                           bool allow_crop = true);

/// Halves a stage-1 mask with 2x2 block means, rounds half up, then erodes.
Mask prepare_unet_mask(const Mask& stage1_mask, const Geometry& geometry);

struct FlipDecision {
    bool horizontal = false;
    bool vertical = false;
};

/// Draws exactly two values from `rng`: first the horizontal decision, then
/// the vertical one.
FlipDecision draw_flips(std::mt19937_64& rng, double probability = 0.5);
void apply_flips(HsiCube& cube, Mask& mask, FlipDecision decision);
std::pair<HsiCube, Mask> random_flip(const HsiCube& cube, const Mask& mask, std::mt19937_64& rng,
                                     double probability = 0.5);

// ---- file I/O ----

HsiCube read_cube(const std::filesystem::path& path);
void write_cube(const HsiCube& cube, const std::filesystem::path& path);
Mask read_mask(const std::filesystem::path& path);
void write_mask(const Mask& mask, const std::filesystem::path& path);
/// Raster only; the paired mask is written separately with write_mask.
ChemicalMap read_map(const std::filesystem::path& path);
void write_map(const ChemicalMap& map, const std::filesystem::path& path);

/// Manifest paths are resolved relative to the manifest's directory.
std::vector<SampleRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<SampleRecord>& records, const std::filesystem::path& path);

}  // namespace chemmap
