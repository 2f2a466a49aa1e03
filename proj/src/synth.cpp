#include "chemmap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

namespace chemmap {

namespace {

struct CosineTerm {
    double fu, fv, phase, amplitude;
};

std::vector<CosineTerm> draw_terms(std::mt19937_64& rng, int count, double max_frequency) {
    std::uniform_real_distribution<double> freq(-max_frequency, max_frequency);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> amp(0.5, 1.0);
    std::vector<CosineTerm> terms(count);
    for (auto& t : terms) {
        t.fu = freq(rng);
        t.fv = freq(rng);
        t.phase = phase(rng);
        t.amplitude = amp(rng);
    }
    return terms;
}

double eval_terms(const std::vector<CosineTerm>& terms, double u, double v) {
    double s = 0.0;
    for (const auto& t : terms) s += t.amplitude * std::cos(2.0 * std::numbers::pi * (t.fu * u + t.fv * v) + t.phase);
    return s;
}

}  // namespace

std::string reference_group(double reference) {
    if (reference < 30.0) return "lean";
    if (reference < 50.0) return "medium";
    return "fat";
}

void PhantomConfig::validate() const {
    require(height >= 4 && width >= 4, "phantom: dimensions must be at least 4 x 4");
    require(bands >= 1, "phantom: bands must be positive");
    require(wavelength_step > 0.0, "phantom: wavelength step must be positive");
    require(field_terms >= 1 && field_max_frequency >= 0.0, "phantom: bad field parameters");
    require(0.0 <= f_min && f_min <= f_max && f_max <= 100.0, "phantom: need 0 <= f_min <= f_max <= 100");
    require(mask_radius_h > 0.0 && mask_radius_w > 0.0, "phantom: mask radii must be positive");
    require(mask_terms >= 0 && mask_perturbation >= 0.0, "phantom: bad mask parameters");
    require(noise_sigma >= 0.0, "phantom: noise_sigma must be non-negative");
    for (const auto* e : {&fat, &lean, &background})
        for (const auto& b : e->bumps) require(b.width > 0.0, "phantom: bump widths must be positive");
}

std::vector<double> phantom_wavelengths(const PhantomConfig& config) {
    std::vector<double> wl(config.bands);
    for (int b = 0; b < config.bands; ++b) wl[b] = config.wavelength_start + b * config.wavelength_step;
    return wl;
}

std::vector<double> endmember_spectrum(const EndmemberConfig& endmember, const std::vector<double>& wavelengths) {
    std::vector<double> s(wavelengths.size(), endmember.baseline);
    for (std::size_t i = 0; i < s.size(); ++i)
        for (const auto& b : endmember.bumps) {
            const double z = (wavelengths[i] - b.center) / b.width;
            s[i] += b.amplitude * std::exp(-0.5 * z * z);
        }
    return s;
}

Phantom make_phantom(const PhantomConfig& config, std::uint64_t seed) {
    config.validate();
    const int H = config.height, W = config.width, B = config.bands;
    std::mt19937_64 rng(seed);

    const auto wl = phantom_wavelengths(config);
    Phantom p;
    p.noise_sigma = config.noise_sigma;
    p.fat_spectrum = endmember_spectrum(config.fat, wl);
    p.lean_spectrum = endmember_spectrum(config.lean, wl);
    const auto bg = endmember_spectrum(config.background, wl);

    const auto field_terms = draw_terms(rng, config.field_terms, config.field_max_frequency);
    const auto mask_terms = draw_terms(rng, config.mask_terms, config.mask_max_frequency);

    std::vector<double> raw(static_cast<std::size_t>(H) * W);
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
            raw[static_cast<std::size_t>(h) * W + w] = eval_terms(field_terms, (h + 0.5) / H, (w + 0.5) / W);
    const auto [lo_it, hi_it] = std::minmax_element(raw.begin(), raw.end());
    const double lo = *lo_it, hi = *hi_it;

    p.field = ChemicalMap(H, W);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const double t = hi > lo ? (raw[i] - lo) / (hi - lo) : 0.5;
        p.field.values[i] = std::clamp(config.f_min + t * (config.f_max - config.f_min), config.f_min, config.f_max);
    }

    double mask_norm = 0.0;
    for (const auto& t : mask_terms) mask_norm += t.amplitude;
    Mask blob(H, W);
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            const double y = ((h + 0.5) / H - 0.5) / config.mask_radius_h;
            const double x = ((w + 0.5) / W - 0.5) / config.mask_radius_w;
            double r = x * x + y * y;
            if (mask_norm > 0.0)
                r += config.mask_perturbation * eval_terms(mask_terms, (h + 0.5) / H, (w + 0.5) / W) / mask_norm;
            blob.at(h, w) = r < 1.0 ? 1 : 0;
        }
    p.mask = erode_mask(blob);
    if (p.mask.count() == 0) throw Error("make_phantom: mask is empty after erosion");
    p.field.mask = p.mask;
    p.reference = p.field.masked_mean();

    std::normal_distribution<double> noise(0.0, 1.0);
    p.cube = HsiCube(B, H, W, Space::reflectance);
    p.cube.wavelengths = wl;
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            const bool tissue = blob.at(h, w) != 0;
            const double f = p.field.at(h, w) / 100.0;
            for (int b = 0; b < B; ++b) {
                double a = tissue ? f * p.fat_spectrum[b] + (1.0 - f) * p.lean_spectrum[b] : bg[b];
                if (config.noise_sigma > 0.0) a += config.noise_sigma * noise(rng);
                p.cube.at(b, h, w) = std::pow(10.0, -a);
            }
        }
    return p;
}

std::vector<Phantom> make_phantom_set(const PhantomSetConfig& config, std::uint64_t seed) {
    require(config.count >= 1, "phantom set: count must be positive");
    require(config.level_min <= config.level_max && config.half_span >= 0.0, "phantom set: bad level range");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> level(config.level_min, config.level_max);
    std::vector<Phantom> out;
    out.reserve(config.count);
    for (int i = 0; i < config.count; ++i) {
        PhantomConfig pc = config.phantom;
        const double c = level(rng);
        pc.f_min = std::max(0.0, c - config.half_span);
        pc.f_max = std::min(100.0, c + config.half_span);
        out.push_back(make_phantom(pc, rng()));
    }
    return out;
}

ChemicalMap block_mean_2x2(const ChemicalMap& map) {
    const int H = map.height / 2, W = map.width / 2;
    require(H >= 1 && W >= 1, "block_mean_2x2: map smaller than 2 x 2");
    ChemicalMap out(H, W);
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
            out.at(h, w) = 0.25 * (map.at(2 * h, 2 * w) + map.at(2 * h + 1, 2 * w) + map.at(2 * h, 2 * w + 1) +
                                   map.at(2 * h + 1, 2 * w + 1));
    return out;
}

double field_rmse(const ChemicalMap& predicted, const ChemicalMap& field, const Mask& mask) {
    if (predicted.height != mask.height || predicted.width != mask.width)
        throw ShapeError("field_rmse: map and mask dimensions differ");
    if (field.height == 2 * predicted.height && field.width == 2 * predicted.width)
        return field_rmse(predicted, block_mean_2x2(field), mask);
    if (field.height != predicted.height || field.width != predicted.width)
        throw ShapeError("field_rmse: field is " + std::to_string(field.height) + "x" + std::to_string(field.width) +
                         ", map is " + std::to_string(predicted.height) + "x" + std::to_string(predicted.width));
    double ss = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < predicted.values.size(); ++i)
        if (mask.values[i]) {
            const double d = predicted.values[i] - field.values[i];
            ss += d * d;
            ++n;
        }
    if (n == 0) throw Error("field_rmse: empty mask");
    return std::sqrt(ss / static_cast<double>(n));
}

ChemicalMap unmix_field(const HsiCube& absorbance, const Mask& mask, const std::vector<double>& fat,
                        const std::vector<double>& lean) {
    if (absorbance.space != Space::absorbance) throw Error("unmix_field: cube must be in absorbance space");
    if (fat.size() != static_cast<std::size_t>(absorbance.bands) || lean.size() != fat.size())
        throw ShapeError("unmix_field: endmember length differs from band count");
    if (mask.height != absorbance.height || mask.width != absorbance.width)
        throw ShapeError("unmix_field: mask and cube dimensions differ");
    double dd = 0.0;
    for (std::size_t b = 0; b < fat.size(); ++b) dd += (fat[b] - lean[b]) * (fat[b] - lean[b]);
    if (!(dd > 0.0)) throw NumericError("unmix_field: endmembers are identical");
    ChemicalMap out(absorbance.height, absorbance.width);
    out.mask = mask;
    for (int h = 0; h < absorbance.height; ++h)
        for (int w = 0; w < absorbance.width; ++w) {
            if (!mask.at(h, w)) continue;
            double num = 0.0;
            for (int b = 0; b < absorbance.bands; ++b)
                num += (absorbance.at(b, h, w) - lean[b]) * (fat[b] - lean[b]);
            out.at(h, w) = 100.0 * num / dd;
        }
    return out;
}

void write_phantom_set(const std::vector<Phantom>& phantoms, const std::filesystem::path& dir,
                       const std::string& prefix) {
    std::vector<SampleRecord> records;
    for (std::size_t i = 0; i < phantoms.size(); ++i) {
        char id[64];
        std::snprintf(id, sizeof id, "%s%03zu", prefix.c_str(), i);
        const auto& p = phantoms[i];
        SampleRecord r;
        r.belly_id = id;
        r.slice_id = "0";
        r.cube_path = std::string(id) + ".hsc";
        r.mask_path = std::string(id) + ".msk";
        r.reference = p.reference;
        r.group = reference_group(p.reference);
        write_cube(p.cube, dir / r.cube_path);
        write_mask(p.mask, dir / r.mask_path);
        write_map(p.field, dir / (std::string(id) + "_field.chm"));
        records.push_back(r);
    }
    write_manifest(records, dir / "manifest.csv");
}

}  // namespace chemmap
