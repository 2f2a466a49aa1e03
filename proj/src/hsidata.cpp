#include "chemmap/hsidata.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"

namespace chemmap {

namespace {

// Symmetric reflection (edge sample repeated) of an index onto [0, n).
int reflect_index(int i, int n) {
    const int period = 2 * n;
    int m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - 1 - m;
}

struct AxisPlan {
    int crop_start = 0;  // first source index kept
    int pad_before = 0;  // background rows/cols inserted before the source
};

AxisPlan plan_axis(int size, int target, bool allow_crop, const char* axis) {
    AxisPlan plan;
    if (size > target) {
        if (!allow_crop) {
            throw ShapeError(std::string("image ") + axis + " " + std::to_string(size) +
                             " exceeds stage-1 target " + std::to_string(target) +
                             " and cropping is disabled");
        }
        plan.crop_start = (size - target) / 2;
    } else {
        plan.pad_before = (target - size) / 2;
    }
    return plan;
}

}  // namespace

const char* to_string(Space space) {
    return space == Space::reflectance ? "reflectance" : "absorbance";
}

Space space_from_string(const std::string& tag) {
    if (tag == "reflectance") return Space::reflectance;
    if (tag == "absorbance") return Space::absorbance;
    throw FormatError("unknown space tag '" + tag + "'");
}

HsiCube::HsiCube(int b, int h, int w, Space s)
    : bands(b), height(h), width(w), values(static_cast<std::size_t>(b) * h * w, 0.0), space(s) {
    require(b > 0 && h > 0 && w > 0, "cube dimensions must be positive");
    wavelengths.resize(b);
    for (int i = 0; i < b; ++i) wavelengths[i] = static_cast<double>(i);
}

std::vector<double> HsiCube::spectrum(int r, int c) const {
    std::vector<double> s(bands);
    for (int b = 0; b < bands; ++b) s[b] = at(b, r, c);
    return s;
}

void HsiCube::validate() const {
    if (bands <= 0 || height <= 0 || width <= 0) throw ShapeError("cube dimensions must be positive");
    if (values.size() != static_cast<std::size_t>(bands) * height * width)
        throw ShapeError("cube value count does not match bands x height x width");
    if (wavelengths.size() != static_cast<std::size_t>(bands))
        throw ShapeError("cube wavelength count does not match band count");
    for (std::size_t i = 1; i < wavelengths.size(); ++i)
        if (!(wavelengths[i] > wavelengths[i - 1]))
            throw FormatError("cube wavelengths must be strictly increasing");
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericError("cube contains non-finite values");
        if (space == Space::reflectance && v < 0.0) throw NumericError("negative reflectance in cube");
    }
}

Mask::Mask(int h, int w, std::uint8_t fill)
    : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {
    require(h > 0 && w > 0, "mask dimensions must be positive");
}

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

void Mask::validate() const {
    if (values.size() != static_cast<std::size_t>(height) * width)
        throw ShapeError("mask value count does not match height x width");
    for (auto v : values)
        if (v > 1) throw FormatError("mask values must be 0 or 1");
}

ChemicalMap::ChemicalMap(int h, int w)
    : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0.0), mask(h, w) {}

double ChemicalMap::masked_mean() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (mask.values[i]) {
            sum += values[i];
            ++n;
        }
    }
    if (n == 0) throw Error("chemical map has an empty mask");
    return sum / static_cast<double>(n);
}

// ---- geometry ----

int unet_context(int levels) { return 12 * (1 << levels) - 8; }

Geometry compute_geometry(int levels, int out_h, int out_w, int stem_depth) {
    require(levels >= 0 && levels <= 12, "levels must be in [0, 12]");
    require(out_h > 0 && out_w > 0, "output dimensions must be positive");
    require(stem_depth > 0, "stem depth must be positive");

    const auto check_axis = [levels](int out, const char* axis) {
        int x = out;
        for (int s = 0; s < levels; ++s) {
            if (x % 2 != 0) {
                throw ShapeError(std::string("output ") + axis + " " + std::to_string(out) +
                                 " does not align: decoder size " + std::to_string(x) +
                                 " at level " + std::to_string(s) + " is odd");
            }
            x = (x + 4) / 2;
        }
        if (x < 2) {
            throw ShapeError(std::string("output ") + axis + " " + std::to_string(out) +
                             " leaves a bottleneck smaller than 2 pixels");
        }
    };
    check_axis(out_h, "height");
    check_axis(out_w, "width");

    Geometry g;
    g.levels = levels;
    g.stem_depth = stem_depth;
    g.out_h = out_h;
    g.out_w = out_w;
    g.context = unet_context(levels);
    g.unet_h = out_h + g.context;
    g.unet_w = out_w + g.context;
    g.stage1_h = 2 * out_h;
    g.stage1_w = 2 * out_w;
    g.padded_h = 2 * g.unet_h;
    g.padded_w = 2 * g.unet_w;
    return g;
}

std::vector<LayerSize> expected_layer_sizes(const Geometry& g) {
    const int L = g.levels;
    // Decoder recursion from the output back to the bottleneck.
    std::vector<int> xh(L + 1), xw(L + 1);
    xh[0] = g.out_h;
    xw[0] = g.out_w;
    for (int s = 0; s < L; ++s) {
        xh[s + 1] = (xh[s] + 4) / 2;
        xw[s + 1] = (xw[s] + 4) / 2;
    }
    // Encoder level s receives in_h[s]; in_h[L] is the bottleneck input.
    std::vector<int> in_h(L + 1), in_w(L + 1);
    in_h[L] = xh[L] + 4;
    in_w[L] = xw[L] + 4;
    for (int s = L - 1; s >= 0; --s) {
        in_h[s] = 2 * in_h[s + 1] + 4;
        in_w[s] = 2 * in_w[s + 1] + 4;
    }

    std::vector<LayerSize> sizes;
    sizes.push_back({"stem", in_h[0], in_w[0]});
    for (int s = 0; s < L; ++s) {
        const std::string p = "enc" + std::to_string(s);
        sizes.push_back({p + ".conv1", in_h[s] - 2, in_w[s] - 2});
        sizes.push_back({p + ".conv2", in_h[s] - 4, in_w[s] - 4});
        sizes.push_back({p + ".pool", in_h[s + 1], in_w[s + 1]});
    }
    sizes.push_back({"bottleneck.conv1", in_h[L] - 2, in_w[L] - 2});
    sizes.push_back({"bottleneck.conv2", xh[L], xw[L]});
    for (int s = L - 1; s >= 0; --s) {
        const std::string p = "dec" + std::to_string(s);
        sizes.push_back({p + ".up", 2 * xh[s + 1], 2 * xw[s + 1]});
        sizes.push_back({p + ".concat", 2 * xh[s + 1], 2 * xw[s + 1]});
        sizes.push_back({p + ".conv1", xh[s] + 2, xw[s] + 2});
        sizes.push_back({p + ".conv2", xh[s], xw[s]});
    }
    sizes.push_back({"head", g.out_h, g.out_w});
    return sizes;
}

// ---- transforms ----

HsiCube to_absorbance(const HsiCube& cube, double epsilon) {
    if (cube.space != Space::reflectance) throw Error("to_absorbance: cube is already in absorbance space");
    require(epsilon > 0.0, "to_absorbance: epsilon must be positive");
    HsiCube out = cube;
    out.space = Space::absorbance;
    for (double& v : out.values) v = -std::log10(std::max(v, epsilon));
    return out;
}

HsiCube select_bands(const HsiCube& cube, int start_index) {
    if (start_index < 0 || start_index >= cube.bands)
        throw Error("select_bands: start index " + std::to_string(start_index) + " outside [0, " +
                    std::to_string(cube.bands) + ")");
    HsiCube out(cube.bands - start_index, cube.height, cube.width, cube.space);
    const std::size_t plane = cube.plane_size();
    std::copy(cube.values.begin() + static_cast<std::ptrdiff_t>(start_index * plane), cube.values.end(),
              out.values.begin());
    std::copy(cube.wavelengths.begin() + start_index, cube.wavelengths.end(), out.wavelengths.begin());
    return out;
}

HsiCube bin_bands(const HsiCube& cube, int factor) {
    require(factor >= 1, "bin_bands: factor must be at least 1");
    if (cube.bands % factor != 0)
        throw Error("bin_bands: " + std::to_string(cube.bands) + " bands not divisible by " +
                    std::to_string(factor));
    HsiCube out(cube.bands / factor, cube.height, cube.width, cube.space);
    const std::size_t plane = cube.plane_size();
    const double inv = 1.0 / factor;
    for (int ob = 0; ob < out.bands; ++ob) {
        double* dst = out.values.data() + ob * plane;
        double wl = 0.0;
        for (int k = 0; k < factor; ++k) {
            const int b = ob * factor + k;
            const double* src = cube.values.data() + b * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
            wl += cube.wavelengths[b];
        }
        for (std::size_t i = 0; i < plane; ++i) dst[i] *= inv;
        out.wavelengths[ob] = wl * inv;
    }
    return out;
}

Mask erode_mask(const Mask& mask) {
    Mask out(mask.height, mask.width);
    for (int r = 0; r < mask.height; ++r) {
        for (int c = 0; c < mask.width; ++c) {
            const bool keep = mask.at(r, c) && r > 0 && r + 1 < mask.height && c > 0 &&
                              c + 1 < mask.width && mask.at(r - 1, c) && mask.at(r + 1, c) &&
                              mask.at(r, c - 1) && mask.at(r, c + 1);
            out.at(r, c) = keep ? 1 : 0;
        }
    }
    return out;
}

Mask dilate_mask(const Mask& mask) {
    Mask out(mask.height, mask.width);
    for (int r = 0; r < mask.height; ++r) {
        for (int c = 0; c < mask.width; ++c) {
            const bool set = mask.at(r, c) || (r > 0 && mask.at(r - 1, c)) || (r + 1 < mask.height && mask.at(r + 1, c)) ||
                             (c > 0 && mask.at(r, c - 1)) || (c + 1 < mask.width && mask.at(r, c + 1));
            out.at(r, c) = set ? 1 : 0;
        }
    }
    return out;
}

PaddedSample pad_two_stage(const HsiCube& cube, const Mask& mask, const Geometry& g, bool allow_crop) {
    if (cube.height != mask.height || cube.width != mask.width)
        throw ShapeError("pad_two_stage: cube and mask dimensions differ");

    const AxisPlan rows = plan_axis(cube.height, g.stage1_h, allow_crop, "height");
    const AxisPlan cols = plan_axis(cube.width, g.stage1_w, allow_crop, "width");

    // Background spectrum: mean over the left-most and right-most columns.
    std::vector<double> background(cube.bands, 0.0);
    for (int b = 0; b < cube.bands; ++b) {
        double sum = 0.0;
        for (int r = 0; r < cube.height; ++r) sum += cube.at(b, r, 0) + cube.at(b, r, cube.width - 1);
        background[b] = sum / (2.0 * cube.height);
    }

    const auto source_row = [&](int r) { return r - rows.pad_before + rows.crop_start; };
    const auto source_col = [&](int c) { return c - cols.pad_before + cols.crop_start; };

    PaddedSample out;
    out.stage1_mask = Mask(g.stage1_h, g.stage1_w);
    for (int r = 0; r < g.stage1_h; ++r) {
        const int sr = source_row(r);
        for (int c = 0; c < g.stage1_w; ++c) {
            const int sc = source_col(c);
            const bool inside = sr >= 0 && sr < cube.height && sc >= 0 && sc < cube.width;
            out.stage1_mask.at(r, c) = inside ? mask.at(sr, sc) : 0;
        }
    }

    const int margin_h = (g.padded_h - g.stage1_h) / 2;
    const int margin_w = (g.padded_w - g.stage1_w) / 2;
    out.cube = HsiCube(cube.bands, g.padded_h, g.padded_w, cube.space);
    out.cube.wavelengths = cube.wavelengths;

    // Column lookup: source column in the original cube, or -1 for background.
    std::vector<int> col_src(g.padded_w);
    for (int c = 0; c < g.padded_w; ++c) {
        const int sc = source_col(reflect_index(c - margin_w, g.stage1_w));
        col_src[c] = (sc >= 0 && sc < cube.width) ? sc : -1;
    }
    for (int b = 0; b < cube.bands; ++b) {
        for (int r = 0; r < g.padded_h; ++r) {
            const int sr = source_row(reflect_index(r - margin_h, g.stage1_h));
            const bool row_inside = sr >= 0 && sr < cube.height;
            double* dst = out.cube.values.data() + out.cube.index(b, r, 0);
            for (int c = 0; c < g.padded_w; ++c) {
                const int sc = col_src[c];
                dst[c] = (row_inside && sc >= 0) ? cube.at(b, sr, sc) : background[b];
            }
        }
    }
    return out;
}

Mask prepare_unet_mask(const Mask& stage1_mask, const Geometry& g) {
    if (stage1_mask.height % 2 != 0 || stage1_mask.width % 2 != 0)
        throw ShapeError("prepare_unet_mask: stage-1 mask dimensions must be even");
    if (stage1_mask.height != g.stage1_h || stage1_mask.width != g.stage1_w)
        throw ShapeError("prepare_unet_mask: mask does not match stage-1 geometry");
    Mask half(stage1_mask.height / 2, stage1_mask.width / 2);
    for (int r = 0; r < half.height; ++r) {
        for (int c = 0; c < half.width; ++c) {
            const int ones = stage1_mask.at(2 * r, 2 * c) + stage1_mask.at(2 * r, 2 * c + 1) +
                             stage1_mask.at(2 * r + 1, 2 * c) + stage1_mask.at(2 * r + 1, 2 * c + 1);
            half.at(r, c) = (ones * 0.25 >= 0.5) ? 1 : 0;
        }
    }
    return erode_mask(half);
}

FlipDecision draw_flips(std::mt19937_64& rng, double probability) {
    const auto uniform = [&rng] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
    FlipDecision d;
    d.horizontal = uniform() < probability;
    d.vertical = uniform() < probability;
    return d;
}

void apply_flips(HsiCube& cube, Mask& mask, FlipDecision decision) {
    if (cube.height != mask.height || cube.width != mask.width)
        throw ShapeError("apply_flips: cube and mask dimensions differ");
    const int H = cube.height;
    const int W = cube.width;
    if (decision.horizontal) {
        for (int b = 0; b < cube.bands; ++b)
            for (int r = 0; r < H; ++r) {
                double* row = cube.values.data() + cube.index(b, r, 0);
                std::reverse(row, row + W);
            }
        for (int r = 0; r < H; ++r) {
            auto* row = mask.values.data() + static_cast<std::size_t>(r) * W;
            std::reverse(row, row + W);
        }
    }
    if (decision.vertical) {
        for (int b = 0; b < cube.bands; ++b)
            for (int r = 0; r < H / 2; ++r) {
                double* top = cube.values.data() + cube.index(b, r, 0);
                double* bottom = cube.values.data() + cube.index(b, H - 1 - r, 0);
                std::swap_ranges(top, top + W, bottom);
            }
        for (int r = 0; r < H / 2; ++r) {
            auto* top = mask.values.data() + static_cast<std::size_t>(r) * W;
            auto* bottom = mask.values.data() + static_cast<std::size_t>(H - 1 - r) * W;
            std::swap_ranges(top, top + W, bottom);
        }
    }
}

std::pair<HsiCube, Mask> random_flip(const HsiCube& cube, const Mask& mask, std::mt19937_64& rng,
                                     double probability) {
    const FlipDecision d = draw_flips(rng, probability);
    std::pair<HsiCube, Mask> out{cube, mask};
    apply_flips(out.first, out.second, d);
    return out;
}

// ---- file I/O ----

HsiCube read_cube(const std::filesystem::path& path) {
    const std::string bytes = detail::read_file(path);
    const auto [header, offset] = detail::split_header(bytes, path);
    std::istringstream hs(header);
    std::string magic, space_tag;
    long long bands = 0, height = 0, width = 0;
    hs >> magic;
    if (magic.rfind("HSC", 0) != 0) throw FormatError(path.string() + ": not a cube file");
    if (magic != "HSC1") throw FormatError(path.string() + ": unknown cube format version " + magic);
    if (!(hs >> bands >> height >> width >> space_tag))
        throw FormatError(path.string() + ": malformed cube header");
    if (bands <= 0 || height <= 0 || width <= 0 || bands * height * width > (1LL << 34))
        throw FormatError(path.string() + ": invalid cube dimensions");

    const std::size_t n = static_cast<std::size_t>(bands * height * width);
    const std::size_t expected = (n + static_cast<std::size_t>(bands)) * 4;
    if (bytes.size() - offset != expected)
        throw FormatError(path.string() + ": payload holds " + std::to_string(bytes.size() - offset) +
                          " bytes, header implies " + std::to_string(expected));

    HsiCube cube(static_cast<int>(bands), static_cast<int>(height), static_cast<int>(width),
                 space_from_string(space_tag));
    const char* p = bytes.data() + offset;
    for (std::size_t i = 0; i < n; ++i, p += 4) {
        const float v = detail::get_f32(p);
        if (!std::isfinite(v)) throw NumericError(path.string() + ": non-finite cube value");
        cube.values[i] = v;
    }
    for (int b = 0; b < cube.bands; ++b, p += 4) cube.wavelengths[b] = detail::get_f32(p);
    cube.validate();
    return cube;
}

void write_cube(const HsiCube& cube, const std::filesystem::path& path) {
    cube.validate();
    std::string bytes = "HSC1 " + std::to_string(cube.bands) + " " + std::to_string(cube.height) + " " +
                        std::to_string(cube.width) + " " + to_string(cube.space) + "\n";
    bytes.reserve(bytes.size() + (cube.values.size() + cube.wavelengths.size()) * 4);
    for (double v : cube.values) detail::put_f32(bytes, static_cast<float>(v));
    for (double w : cube.wavelengths) detail::put_f32(bytes, static_cast<float>(w));
    detail::write_file(path, bytes);
}

Mask read_mask(const std::filesystem::path& path) {
    const std::string bytes = detail::read_file(path);
    const auto [header, offset] = detail::split_header(bytes, path);
    std::istringstream hs(header);
    std::string magic;
    long long height = 0, width = 0;
    hs >> magic;
    if (magic.rfind("MSK", 0) != 0) throw FormatError(path.string() + ": not a mask file");
    if (magic != "MSK1") throw FormatError(path.string() + ": unknown mask format version " + magic);
    if (!(hs >> height >> width) || height <= 0 || width <= 0)
        throw FormatError(path.string() + ": malformed mask header");
    const std::size_t n = static_cast<std::size_t>(height * width);
    if (bytes.size() - offset != n)
        throw FormatError(path.string() + ": mask payload size does not match header");
    Mask mask(static_cast<int>(height), static_cast<int>(width));
    std::memcpy(mask.values.data(), bytes.data() + offset, n);
    mask.validate();
    return mask;
}

void write_mask(const Mask& mask, const std::filesystem::path& path) {
    mask.validate();
    std::string bytes = "MSK1 " + std::to_string(mask.height) + " " + std::to_string(mask.width) + "\n";
    bytes.append(reinterpret_cast<const char*>(mask.values.data()), mask.values.size());
    detail::write_file(path, bytes);
}

ChemicalMap read_map(const std::filesystem::path& path) {
    const std::string bytes = detail::read_file(path);
    const auto [header, offset] = detail::split_header(bytes, path);
    std::istringstream hs(header);
    std::string magic;
    long long height = 0, width = 0;
    hs >> magic;
    if (magic.rfind("CHM", 0) != 0) throw FormatError(path.string() + ": not a map file");
    if (magic != "CHM1") throw FormatError(path.string() + ": unknown map format version " + magic);
    if (!(hs >> height >> width) || height <= 0 || width <= 0)
        throw FormatError(path.string() + ": malformed map header");
    const std::size_t n = static_cast<std::size_t>(height * width);
    if (bytes.size() - offset != n * 4)
        throw FormatError(path.string() + ": map payload size does not match header");
    ChemicalMap map(static_cast<int>(height), static_cast<int>(width));
    const char* p = bytes.data() + offset;
    for (std::size_t i = 0; i < n; ++i, p += 4) {
        const float v = detail::get_f32(p);
        if (!std::isfinite(v)) throw NumericError(path.string() + ": non-finite map value");
        map.values[i] = v;
    }
    std::fill(map.mask.values.begin(), map.mask.values.end(), std::uint8_t{1});
    return map;
}

void write_map(const ChemicalMap& map, const std::filesystem::path& path) {
    std::string bytes = "CHM1 " + std::to_string(map.height) + " " + std::to_string(map.width) + "\n";
    for (double v : map.values) {
        if (!std::isfinite(v)) throw NumericError("write_map: non-finite map value");
        detail::put_f32(bytes, static_cast<float>(v));
    }
    detail::write_file(path, bytes);
}

std::vector<SampleRecord> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest " + path.string());
    const auto base = path.parent_path();
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty manifest");
    const auto header = detail::split_csv_line(detail::trim(line));
    const std::vector<std::string> expected{"belly_id", "slice_id", "cube_path", "mask_path", "reference", "group"};
    if (header != expected) throw FormatError(path.string() + ": unexpected manifest columns");

    std::vector<SampleRecord> records;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 6)
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 6 fields");
        SampleRecord rec;
        rec.belly_id = f[0];
        rec.slice_id = f[1];
        rec.cube_path = std::filesystem::path(f[2]).is_absolute() ? std::filesystem::path(f[2]) : base / f[2];
        rec.mask_path = std::filesystem::path(f[3]).is_absolute() ? std::filesystem::path(f[3]) : base / f[3];
        try {
            rec.reference = std::stod(f[4]);
        } catch (const std::exception&) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad reference value");
        }
        if (!(rec.reference >= 0.0 && rec.reference <= 100.0))
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": reference outside [0, 100]");
        rec.group = f[5];
        records.push_back(std::move(rec));
    }
    return records;
}

void write_manifest(const std::vector<SampleRecord>& records, const std::filesystem::path& path) {
    std::ostringstream out;
    out << "belly_id,slice_id,cube_path,mask_path,reference,group\n";
    out.precision(17);
    for (const auto& r : records) {
        out << r.belly_id << ',' << r.slice_id << ',' << r.cube_path.generic_string() << ','
            << r.mask_path.generic_string() << ',' << r.reference << ',' << r.group << '\n';
    }
    detail::write_file(path, out.str());
}

}  // namespace chemmap
