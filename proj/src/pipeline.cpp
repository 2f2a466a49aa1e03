#include "chemmap/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <set>

#include <json.hpp>

#include "binary_io.hpp"
#include "chemmap/split.hpp"

namespace chemmap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finaliser over the combined words
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// ---- config JSON ----

void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    if (!j.is_object()) throw FormatError("config: " + where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; }))
            throw FormatError("config: unknown key '" + key + "' in " + where);
    }
}

template <class T>
void take(const json& j, const char* key, T& value) {
    if (const auto it = j.find(key); it != j.end()) {
        try {
            value = it->get<T>();
        } catch (const json::exception& e) {
            throw FormatError(std::string("config: bad value for '") + key + "': " + e.what());
        }
    }
}

json endmember_json(const EndmemberConfig& e) {
    json bumps = json::array();
    for (const auto& b : e.bumps) bumps.push_back({{"center", b.center}, {"width", b.width}, {"amplitude", b.amplitude}});
    return {{"baseline", e.baseline}, {"bumps", bumps}};
}

void read_endmember(const json& j, EndmemberConfig& e, const std::string& where) {
    check_keys(j, {"baseline", "bumps"}, where);
    take(j, "baseline", e.baseline);
    if (const auto it = j.find("bumps"); it != j.end()) {
        if (!it->is_array()) throw FormatError("config: " + where + ".bumps must be an array");
        e.bumps.clear();
        for (const auto& b : *it) {
            check_keys(b, {"center", "width", "amplitude"}, where + ".bumps[]");
            Bump bump;
            take(b, "center", bump.center);
            take(b, "width", bump.width);
            take(b, "amplitude", bump.amplitude);
            e.bumps.push_back(bump);
        }
    }
}

// ---- CSV ----

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name, const fs::path& path) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw FormatError(path.string() + ": missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

Csv read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    Csv csv;
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file");
    csv.header = detail::split_csv_line(detail::trim(line));
    while (std::getline(in, line)) {
        line = detail::trim(line);
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != csv.header.size())
            throw FormatError(path.string() + ": row has " + std::to_string(fields.size()) + " fields, expected " +
                              std::to_string(csv.header.size()));
        csv.rows.push_back(std::move(fields));
    }
    return csv;
}

double parse_double(const std::string& s, const fs::path& path) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty()) throw FormatError(path.string() + ": not a number: '" + s + "'");
    return v;
}

void write_text(const fs::path& path, const std::string& text) { detail::write_file(path, text); }

// ---- data ----

std::string subset_label(const FoldAssignment& folds, const std::string& id, int k) {
    const auto it = folds.find(id);
    if (it == folds.end()) throw Error("belly '" + id + "' has no subset assignment");
    return it->second == k ? "test" : "cv";
}

Eigen::MatrixXd mean_spectra(const std::vector<Belly>& bellies, const StudyConfig& config,
                             std::vector<double>* wavelengths = nullptr) {
    Eigen::MatrixXd X;
    for (std::size_t i = 0; i < bellies.size(); ++i) {
        std::vector<HsiCube> cubes;
        std::vector<Mask> masks;
        for (const auto& s : bellies[i].slices) {
            cubes.push_back(load_absorbance(s, config));
            masks.push_back(read_mask(s.mask_path));
        }
        const Spectrum m = mean_belly_spectrum(cubes, masks);
        if (i == 0) {
            X.resize(static_cast<Eigen::Index>(bellies.size()), static_cast<Eigen::Index>(m.values.size()));
            if (wavelengths) *wavelengths = m.wavelengths;
        }
        if (static_cast<Eigen::Index>(m.values.size()) != X.cols())
            throw ShapeError("belly '" + bellies[i].id + "' has a different band count");
        for (std::size_t b = 0; b < m.values.size(); ++b) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b)) = m.values[b];
    }
    return X;
}

HsiCube network_cube(const SampleRecord& record, const StudyConfig& config) {
    return bin_bands(load_absorbance(record, config), config.bin_factor);
}

struct PredictionRow {
    std::string id;
    double reference = 0.0;
    double prediction = 0.0;
    std::string group;
    std::string subset;
};

void write_prediction_rows(const std::vector<PredictionRow>& rows, const fs::path& path) {
    std::string text = "id,reference,prediction,group,subset\n";
    for (const auto& r : rows)
        text += r.id + "," + num(r.reference) + "," + num(r.prediction) + "," + r.group + "," + r.subset + "\n";
    write_text(path, text);
}

std::map<std::string, double> read_prediction_column(const fs::path& path) {
    const Csv csv = read_csv(path);
    const auto id = csv.column("id", path), pred = csv.column("prediction", path);
    std::map<std::string, double> out;
    for (const auto& r : csv.rows) out[r[id]] = parse_double(r[pred], path);
    return out;
}

void write_map_files(const ChemicalMap& map, const fs::path& stem) {
    write_map(map, fs::path(stem.string() + ".chm"));
    write_mask(map.mask, fs::path(stem.string() + ".msk"));
    render_heatmap(map, map.mask, 0.0, 100.0, fs::path(stem.string() + ".pgm"));
}

ChemicalMap read_map_files(const fs::path& stem) {
    ChemicalMap map = read_map(fs::path(stem.string() + ".chm"));
    map.mask = read_mask(fs::path(stem.string() + ".msk"));
    if (map.mask.height != map.height || map.mask.width != map.width)
        throw ShapeError(stem.string() + ": map and mask dimensions differ");
    return map;
}

std::vector<TrainSample> train_samples(const std::vector<const Belly*>& bellies, const StudyConfig& config) {
    std::vector<TrainSample> out;
    for (const Belly* b : bellies)
        for (const auto& s : b->slices) {
            TrainSample t;
            t.belly_id = b->id;
            t.slice_id = s.slice_id;
            t.cube = network_cube(s, config);
            t.mask = read_mask(s.mask_path);
            t.reference = b->reference;
            out.push_back(std::move(t));
        }
    return out;
}

double rmse_of(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty()) return 0.0;
    return std::sqrt(mse(a, b));
}

double map_oobl(const ChemicalMap& map) {
    double s = 0.0;
    for (std::size_t i = 0; i < map.values.size(); ++i) {
        if (!map.mask.values[i]) continue;
        const double v = map.values[i];
        const double lo = std::max(-v, 0.0), hi = std::max(v - 100.0, 0.0);
        s += lo * lo + hi * hi;
    }
    return s;
}

}  // namespace

// ---- config ----

void StudyConfig::validate() const {
    phantoms.phantom.validate();
    require(phantoms.count >= 2, "config: need at least two phantoms");
    require(test_count >= 0 && test_count < phantoms.count, "config: test_count must be in [0, count)");
    require(folds >= 2, "config: folds must be at least 2");
    require(phantoms.count - test_count >= folds, "config: fewer CV bellies than folds");
    require(pca_variance > 0.0 && pca_variance <= 1.0, "config: pca_variance must be in (0, 1]");
    require(band_start >= 0 && band_start < phantoms.phantom.bands, "config: band_start outside the band range");
    require(bin_factor >= 1, "config: bin_factor must be at least 1");
    require((phantoms.phantom.bands - band_start) % bin_factor == 0,
            "config: selected band count is not divisible by bin_factor");
    require(pls_max_components >= 1, "config: pls_max_components must be at least 1");
    require(flip_probability >= 0.0 && flip_probability <= 1.0, "config: flip_probability must be in [0, 1]");
    require(smoothing_step > 0.0 && smoothing_max >= smoothing_step, "config: bad smoothing grid");
    net_config().validate();
}

int StudyConfig::network_bands() const { return (phantoms.phantom.bands - band_start) / bin_factor; }

NetConfig StudyConfig::net_config() const {
    return make_net_config(levels, base_width, out_h, out_w, network_bands(), stem_depth, bin_factor);
}

StudyConfig parse_study_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    StudyConfig c;
    check_keys(j, {"phantoms", "split", "bands", "network", "loss", "adam", "schedule", "pls", "smoothing"}, "root");

    if (const auto it = j.find("phantoms"); it != j.end()) {
        const json& p = *it;
        check_keys(p,
                   {"count", "level_min", "level_max", "half_span", "height", "width", "bands", "wavelength_start",
                    "wavelength_step", "fat", "lean", "background", "field_terms", "field_max_frequency", "f_min",
                    "f_max", "mask_radius_h", "mask_radius_w", "mask_perturbation", "mask_terms",
                    "mask_max_frequency", "noise_sigma"},
                   "phantoms");
        auto& s = c.phantoms;
        auto& ph = s.phantom;
        take(p, "count", s.count);
        take(p, "level_min", s.level_min);
        take(p, "level_max", s.level_max);
        take(p, "half_span", s.half_span);
        take(p, "height", ph.height);
        take(p, "width", ph.width);
        take(p, "bands", ph.bands);
        take(p, "wavelength_start", ph.wavelength_start);
        take(p, "wavelength_step", ph.wavelength_step);
        if (p.contains("fat")) read_endmember(p["fat"], ph.fat, "phantoms.fat");
        if (p.contains("lean")) read_endmember(p["lean"], ph.lean, "phantoms.lean");
        if (p.contains("background")) read_endmember(p["background"], ph.background, "phantoms.background");
        take(p, "field_terms", ph.field_terms);
        take(p, "field_max_frequency", ph.field_max_frequency);
        take(p, "f_min", ph.f_min);
        take(p, "f_max", ph.f_max);
        take(p, "mask_radius_h", ph.mask_radius_h);
        take(p, "mask_radius_w", ph.mask_radius_w);
        take(p, "mask_perturbation", ph.mask_perturbation);
        take(p, "mask_terms", ph.mask_terms);
        take(p, "mask_max_frequency", ph.mask_max_frequency);
        take(p, "noise_sigma", ph.noise_sigma);
    }
    if (const auto it = j.find("split"); it != j.end()) {
        check_keys(*it, {"test_count", "folds", "pca_variance"}, "split");
        take(*it, "test_count", c.test_count);
        take(*it, "folds", c.folds);
        take(*it, "pca_variance", c.pca_variance);
    }
    if (const auto it = j.find("bands"); it != j.end()) {
        check_keys(*it, {"start", "bin_factor"}, "bands");
        take(*it, "start", c.band_start);
        take(*it, "bin_factor", c.bin_factor);
    }
    if (const auto it = j.find("network"); it != j.end()) {
        check_keys(*it, {"levels", "base_width", "stem_depth", "out_h", "out_w", "flip_probability"}, "network");
        take(*it, "levels", c.levels);
        take(*it, "base_width", c.base_width);
        take(*it, "stem_depth", c.stem_depth);
        take(*it, "out_h", c.out_h);
        take(*it, "out_w", c.out_w);
        take(*it, "flip_probability", c.flip_probability);
    }
    if (const auto it = j.find("loss"); it != j.end()) {
        check_keys(*it, {"mse", "oobl", "sl", "l2"}, "loss");
        take(*it, "mse", c.weights.mse);
        take(*it, "oobl", c.weights.oobl);
        take(*it, "sl", c.weights.sl);
        take(*it, "l2", c.weights.l2);
    }
    if (const auto it = j.find("adam"); it != j.end()) {
        check_keys(*it, {"lr", "beta1", "beta2", "epsilon"}, "adam");
        take(*it, "lr", c.adam.lr);
        take(*it, "beta1", c.adam.beta1);
        take(*it, "beta2", c.adam.beta2);
        take(*it, "epsilon", c.adam.epsilon);
    }
    if (const auto it = j.find("schedule"); it != j.end()) {
        check_keys(*it, {"burn_in", "lr_patience", "stop_patience", "lr_factor", "lr_floor", "max_epochs"},
                   "schedule");
        take(*it, "burn_in", c.schedule.burn_in);
        take(*it, "lr_patience", c.schedule.lr_patience);
        take(*it, "stop_patience", c.schedule.stop_patience);
        take(*it, "lr_factor", c.schedule.lr_factor);
        take(*it, "lr_floor", c.schedule.lr_floor);
        take(*it, "max_epochs", c.schedule.max_epochs);
    }
    if (const auto it = j.find("pls"); it != j.end()) {
        check_keys(*it, {"max_components", "snv", "savgol", "sg_window", "sg_poly", "sg_deriv"}, "pls");
        take(*it, "max_components", c.pls_max_components);
        take(*it, "snv", c.pls_prep.snv);
        take(*it, "savgol", c.pls_prep.savgol);
        take(*it, "sg_window", c.pls_prep.sg_window);
        take(*it, "sg_poly", c.pls_prep.sg_poly);
        take(*it, "sg_deriv", c.pls_prep.sg_deriv);
    }
    if (const auto it = j.find("smoothing"); it != j.end()) {
        check_keys(*it, {"step", "max"}, "smoothing");
        take(*it, "step", c.smoothing_step);
        take(*it, "max", c.smoothing_max);
    }
    c.validate();
    return c;
}

StudyConfig read_study_config(const fs::path& path) { return parse_study_config(detail::read_file(path)); }

std::string study_config_json(const StudyConfig& c) {
    const auto& s = c.phantoms;
    const auto& ph = s.phantom;
    json j;
    j["phantoms"] = {{"count", s.count},
                     {"level_min", s.level_min},
                     {"level_max", s.level_max},
                     {"half_span", s.half_span},
                     {"height", ph.height},
                     {"width", ph.width},
                     {"bands", ph.bands},
                     {"wavelength_start", ph.wavelength_start},
                     {"wavelength_step", ph.wavelength_step},
                     {"fat", endmember_json(ph.fat)},
                     {"lean", endmember_json(ph.lean)},
                     {"background", endmember_json(ph.background)},
                     {"field_terms", ph.field_terms},
                     {"field_max_frequency", ph.field_max_frequency},
                     {"f_min", ph.f_min},
                     {"f_max", ph.f_max},
                     {"mask_radius_h", ph.mask_radius_h},
                     {"mask_radius_w", ph.mask_radius_w},
                     {"mask_perturbation", ph.mask_perturbation},
                     {"mask_terms", ph.mask_terms},
                     {"mask_max_frequency", ph.mask_max_frequency},
                     {"noise_sigma", ph.noise_sigma}};
    j["split"] = {{"test_count", c.test_count}, {"folds", c.folds}, {"pca_variance", c.pca_variance}};
    j["bands"] = {{"start", c.band_start}, {"bin_factor", c.bin_factor}};
    j["network"] = {{"levels", c.levels},           {"base_width", c.base_width}, {"stem_depth", c.stem_depth},
                    {"out_h", c.out_h},             {"out_w", c.out_w},           {"flip_probability", c.flip_probability}};
    j["loss"] = {{"mse", c.weights.mse}, {"oobl", c.weights.oobl}, {"sl", c.weights.sl}, {"l2", c.weights.l2}};
    j["adam"] = {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}};
    j["schedule"] = {{"burn_in", c.schedule.burn_in},         {"lr_patience", c.schedule.lr_patience},
                     {"stop_patience", c.schedule.stop_patience}, {"lr_factor", c.schedule.lr_factor},
                     {"lr_floor", c.schedule.lr_floor},       {"max_epochs", c.schedule.max_epochs}};
    j["pls"] = {{"max_components", c.pls_max_components}, {"snv", c.pls_prep.snv},
                {"savgol", c.pls_prep.savgol},              {"sg_window", c.pls_prep.sg_window},
                {"sg_poly", c.pls_prep.sg_poly},            {"sg_deriv", c.pls_prep.sg_deriv}};
    j["smoothing"] = {{"step", c.smoothing_step}, {"max", c.smoothing_max}};
    return j.dump(2) + "\n";
}

void write_study_config(const StudyConfig& config, const fs::path& path) {
    write_text(path, study_config_json(config));
}

// ---- data ----

std::vector<Belly> group_bellies(const std::vector<SampleRecord>& records) {
    std::vector<Belly> out;
    std::map<std::string, std::size_t> index;
    for (const auto& r : records) {
        const auto [it, inserted] = index.emplace(r.belly_id, out.size());
        if (inserted) {
            out.push_back({r.belly_id, r.reference, r.group, {}});
        } else if (out[it->second].reference != r.reference) {
            throw FormatError("belly '" + r.belly_id + "' has conflicting reference values");
        }
        out[it->second].slices.push_back(r);
    }
    return out;
}

std::string slice_stem(const SampleRecord& record) { return record.belly_id + "_" + record.slice_id; }

HsiCube load_absorbance(const SampleRecord& record, const StudyConfig& config) {
    return select_bands(to_absorbance(read_cube(record.cube_path)), config.band_start);
}

void write_folds(const std::vector<std::string>& ids, const std::vector<int>& subsets, const fs::path& path) {
    if (ids.size() != subsets.size()) throw ShapeError("write_folds: id and subset counts differ");
    std::string text = "belly_id,subset_index\n";
    for (std::size_t i = 0; i < ids.size(); ++i) text += ids[i] + "," + std::to_string(subsets[i]) + "\n";
    write_text(path, text);
}

FoldAssignment read_folds(const fs::path& path) {
    const Csv csv = read_csv(path);
    const auto id = csv.column("belly_id", path), sub = csv.column("subset_index", path);
    FoldAssignment out;
    for (const auto& r : csv.rows) {
        const double v = parse_double(r[sub], path);
        if (v < 0 || v != std::floor(v)) throw FormatError(path.string() + ": bad subset index '" + r[sub] + "'");
        if (!out.emplace(r[id], static_cast<int>(v)).second)
            throw FormatError(path.string() + ": duplicate belly '" + r[id] + "'");
    }
    return out;
}

// ---- stages ----

void synth_stage(const StudyConfig& config, const fs::path& out_dir, std::uint64_t seed) {
    config.validate();
    write_phantom_set(make_phantom_set(config.phantoms, seed), out_dir);
    write_study_config(config, out_dir / "study.json");
}

void split_stage(const StudyConfig& config, const fs::path& manifest, const fs::path& out_dir) {
    const auto bellies = group_bellies(read_manifest(manifest));
    const int n = static_cast<int>(bellies.size());
    if (config.test_count >= n || n - config.test_count < config.folds)
        throw Error("split: " + std::to_string(n) + " bellies are too few for the configured split");

    std::vector<double> wl;
    const Eigen::MatrixXd X = mean_spectra(bellies, config, &wl);
    {
        std::string text = "belly_id";
        for (double w : wl) text += "," + num(w);
        text += "\n";
        for (int i = 0; i < n; ++i) {
            text += bellies[i].id;
            for (Eigen::Index b = 0; b < X.cols(); ++b) text += "," + num(X(i, b));
            text += "\n";
        }
        write_text(out_dir / "mean_spectra.csv", text);
    }

    std::vector<int> subset(n, 0);
    std::vector<int> cv_rows;
    if (config.test_count > 0) {
        const auto two = duplex_split(pca_reduce(X, config.pca_variance), 2,
                                      std::vector<int>{n - config.test_count, config.test_count});
        for (int i = 0; i < n; ++i) {
            if (two[i] == 1) subset[i] = config.folds;
            else cv_rows.push_back(i);
        }
    } else {
        for (int i = 0; i < n; ++i) cv_rows.push_back(i);
    }
    Eigen::MatrixXd Xcv(static_cast<Eigen::Index>(cv_rows.size()), X.cols());
    for (std::size_t r = 0; r < cv_rows.size(); ++r) Xcv.row(static_cast<Eigen::Index>(r)) = X.row(cv_rows[r]);
    const auto folds = duplex_split(pca_reduce(Xcv, config.pca_variance), config.folds);
    for (std::size_t r = 0; r < cv_rows.size(); ++r) subset[cv_rows[r]] = folds[r];

    std::vector<std::string> ids;
    for (const auto& b : bellies) ids.push_back(b.id);
    write_folds(ids, subset, out_dir / "folds.csv");
}

void pls_train_stage(const StudyConfig& config, const fs::path& manifest, const fs::path& folds_path,
                     const fs::path& out_dir) {
    const auto bellies = group_bellies(read_manifest(manifest));
    const FoldAssignment folds = read_folds(folds_path);
    std::vector<Belly> cv;
    std::vector<int> fold_of;
    for (const auto& b : bellies)
        if (subset_label(folds, b.id, config.folds) == "cv") {
            cv.push_back(b);
            fold_of.push_back(folds.at(b.id));
        }
    if (cv.empty()) throw Error("pls-train: no CV bellies");

    const Eigen::MatrixXd X = mean_spectra(cv, config);
    Eigen::VectorXd y(static_cast<Eigen::Index>(cv.size()));
    for (std::size_t i = 0; i < cv.size(); ++i) y(static_cast<Eigen::Index>(i)) = cv[i].reference;

    // Largest count every fold's training part can support.
    std::map<int, int> fold_sizes;
    for (int f : fold_of) ++fold_sizes[f];
    int largest = 0;
    for (const auto& [f, size] : fold_sizes) largest = std::max(largest, size);
    const int n_train_min = static_cast<int>(cv.size()) - largest;
    const int max_a = std::min({config.pls_max_components, config.pls_prep.output_length(static_cast<int>(X.cols())),
                                n_train_min - 1});
    if (max_a < 1) throw Error("pls-train: too few bellies per fold for any component");

    const CvResult cvr = select_components_cv(X, y, fold_of, max_a, config.pls_prep);
    std::string text = "component,mean_rmse\n";
    for (std::size_t a = 0; a < cvr.rmse_curve.size(); ++a)
        text += std::to_string(a + 1) + "," + num(cvr.rmse_curve[a]) + "\n";
    write_text(out_dir / "pls_cv.csv", text);
    write_pls_model(calibrate_pls(X, y, cvr.best_components, config.pls_prep), out_dir / "pls.model");
}

void pls_predict_stage(const StudyConfig& config, const fs::path& manifest, const fs::path& model_path,
                       const fs::path& folds_path, const fs::path& out_dir) {
    const auto bellies = group_bellies(read_manifest(manifest));
    const FoldAssignment folds = read_folds(folds_path);
    const PlsModel model = read_pls_model(model_path);
    std::vector<PredictionRow> mean_rows, pixel_rows;
    for (const auto& b : bellies) {
        std::vector<HsiCube> cubes;
        std::vector<Mask> masks;
        std::vector<ChemicalMap> maps;
        for (const auto& s : b.slices) {
            cubes.push_back(load_absorbance(s, config));
            masks.push_back(read_mask(s.mask_path));
            maps.push_back(pls_chemical_map(model, cubes.back(), masks.back()));
            write_map_files(maps.back(), out_dir / "maps" / (slice_stem(s) + "_pls"));
        }
        const Spectrum m = mean_belly_spectrum(cubes, masks);
        const Eigen::MatrixXd row = Eigen::Map<const Eigen::RowVectorXd>(m.values.data(), static_cast<Eigen::Index>(m.values.size()));
        const std::string subset = subset_label(folds, b.id, config.folds);
        mean_rows.push_back({b.id, b.reference, predict_pls(model, row)(0), b.group, subset});
        pixel_rows.push_back({b.id, b.reference, belly_prediction(maps), b.group, subset});
    }
    write_prediction_rows(mean_rows, out_dir / "pls_mean_predictions.csv");
    write_prediction_rows(pixel_rows, out_dir / "pls_pixel_predictions.csv");
}

void unet_train_stage(const StudyConfig& config, const fs::path& manifest, const fs::path& folds_path,
                      const fs::path& out_dir, std::uint64_t seed,
                      const std::function<void(int, const EpochLog&)>& on_epoch) {
    config.validate();
    const auto bellies = group_bellies(read_manifest(manifest));
    const FoldAssignment folds = read_folds(folds_path);

    TrainConfig tc;
    tc.net = config.net_config();
    tc.weights = config.weights;
    tc.adam = config.adam;
    tc.schedule = config.schedule;
    tc.flip_probability = config.flip_probability;

    std::vector<fs::path> members;
    std::string summary = "fold,train_bellies,val_bellies,init_draws,epochs,best_epoch,best_val_mse,stop_reason\n";
    for (int f = 0; f < config.folds; ++f) {
        std::vector<const Belly*> train, val;
        for (const auto& b : bellies) {
            const int s = folds.count(b.id) ? folds.at(b.id) : -1;
            if (s < 0) throw Error("unet-train: belly '" + b.id + "' has no subset assignment");
            if (s == config.folds) continue;
            (s == f ? val : train).push_back(&b);
        }
        if (train.empty() || val.empty()) throw Error("unet-train: fold " + std::to_string(f) + " is empty");
        tc.init_seed = derive_seed(seed, 2 * static_cast<std::uint64_t>(f));
        EpochCallback cb;
        if (on_epoch) cb = [&, f](const EpochLog& e) { on_epoch(f, e); };
        const FoldResult r = train_fold(train_samples(train, config), train_samples(val, config), tc,
                                        derive_seed(seed, 2 * static_cast<std::uint64_t>(f) + 1), cb);

        const std::string name = "fold_" + std::to_string(f) + ".unp";
        write_params(r.best_params, out_dir / name);
        write_loss_log(r.log, out_dir / ("loss_fold_" + std::to_string(f) + ".csv"));
        members.emplace_back(name);
        summary += std::to_string(f) + "," + std::to_string(train.size()) + "," + std::to_string(val.size()) + "," +
                   std::to_string(r.init_draws) + "," + std::to_string(r.log.size()) + "," +
                   std::to_string(r.best_epoch) + "," + num(r.best_val_mse) +
                   "," + to_string(r.stop_reason) + "\n";
    }
    write_ensemble_descriptor(tc.net, members, out_dir / "ensemble.json");
    write_text(out_dir / "training.csv", summary);
}

void unet_predict_stage(const fs::path& manifest, const fs::path& ensemble_path, const fs::path& folds_path,
                        const fs::path& out_dir, const StudyConfig& config) {
    const auto bellies = group_bellies(read_manifest(manifest));
    const FoldAssignment folds = read_folds(folds_path);
    const Ensemble ensemble = read_ensemble(ensemble_path);
    if (ensemble.config.bands != config.network_bands())
        throw ShapeError("unet-predict: ensemble expects " + std::to_string(ensemble.config.bands) +
                         " bands, config yields " + std::to_string(config.network_bands()));
    std::vector<PredictionRow> rows;
    for (const auto& b : bellies) {
        std::vector<ChemicalMap> maps;
        for (const auto& s : b.slices) {
            maps.push_back(predict_slice_map(ensemble, network_cube(s, config), read_mask(s.mask_path)));
            write_map_files(maps.back(), out_dir / "maps" / (slice_stem(s) + "_unet"));
        }
        rows.push_back({b.id, b.reference, belly_prediction(maps), b.group, subset_label(folds, b.id, config.folds)});
    }
    write_prediction_rows(rows, out_dir / "unet_predictions.csv");
}

SpatialStats analyze_stage(const fs::path& map_path, const fs::path& mask_path, const fs::path& out_csv,
                           std::optional<double> smooth_sigma, const fs::path& smoothed_out) {
    ChemicalMap map = read_map(map_path);
    const Mask mask = read_mask(mask_path);
    if (mask.height != map.height || mask.width != map.width)
        throw ShapeError("analyze: map and mask dimensions differ");
    map.mask = mask;
    const SpatialStats s = spatial_stats(map, mask);
    const auto row = [](const char* name, const SpatialStats& st) {
        return std::string(name) + "," + num(st.sigma2) + "," + num(st.c0) + "," + num(st.ratio_uncorrelated) + "," +
               num(st.ratio_correlated) + "\n";
    };
    std::string text = "map,sigma2,c0,ratio_uncorrelated,ratio_correlated\n" + row("input", s);
    if (smooth_sigma) {
        // The ring around an eroded mask is tissue and enters the forward
        // differences, so it is smoothed too.
        ChemicalMap smoothed = gaussian_smooth_map(map, dilate_mask(mask), *smooth_sigma);
        smoothed.mask = mask;
        text += row("smoothed", spatial_stats(smoothed, mask));
        if (!smoothed_out.empty()) write_map(smoothed, smoothed_out);
    }
    write_text(out_csv, text);
    return s;
}

MetricsReport report_stage(const fs::path& predictions, const fs::path& out_csv, const std::string& subset) {
    const Csv csv = read_csv(predictions);
    const auto id = csv.column("id", predictions), ref = csv.column("reference", predictions),
               pred = csv.column("prediction", predictions);
    const auto has = [&](const char* name) {
        return std::find(csv.header.begin(), csv.header.end(), name) != csv.header.end();
    };
    std::vector<PredictionPair> pairs;
    for (const auto& r : csv.rows) {
        if (!subset.empty()) {
            if (!has("subset")) throw FormatError(predictions.string() + ": no subset column to filter on");
            if (r[csv.column("subset", predictions)] != subset) continue;
        }
        pairs.push_back({r[id], parse_double(r[ref], predictions), parse_double(r[pred], predictions),
                         has("group") ? r[csv.column("group", predictions)] : std::string()});
    }
    if (pairs.empty()) throw Error("report: no rows selected from " + predictions.string());
    const MetricsReport report = report_metrics(pairs);
    write_metrics_csv(report, out_csv);
    return report;
}

// ---- phantom study ----

StudySummary evaluate_study(const StudyConfig& config, const fs::path& dir) {
    const auto bellies = group_bellies(read_manifest(dir / "phantoms" / "manifest.csv"));
    const FoldAssignment folds = read_folds(dir / "split" / "folds.csv");
    const auto unet_pred = read_prediction_column(dir / "unet" / "unet_predictions.csv");
    const auto pls_mean = read_prediction_column(dir / "pls" / "pls_mean_predictions.csv");
    const auto pls_pixel = read_prediction_column(dir / "pls" / "pls_pixel_predictions.csv");

    const PhantomConfig& pc = config.phantoms.phantom;
    const auto wl = phantom_wavelengths(pc);
    const auto fat = endmember_spectrum(pc.fat, wl), lean = endmember_spectrum(pc.lean, wl);

    StudySummary out;
    std::vector<double> refs, u, pm, pp, orc;
    for (const auto& b : bellies) {
        if (subset_label(folds, b.id, config.folds) != "test") continue;
        if (b.slices.size() != 1) throw Error("evaluate: phantom '" + b.id + "' must have exactly one slice");
        const SampleRecord& s = b.slices[0];
        const Mask mask = read_mask(s.mask_path);
        fs::path field_path = s.cube_path;
        field_path.replace_filename(s.cube_path.stem().string() + "_field.chm");
        const ChemicalMap field = read_map(field_path);

        const ChemicalMap unet = read_map_files(dir / "unet" / "maps" / (slice_stem(s) + "_unet"));
        const ChemicalMap pls = read_map_files(dir / "pls" / "maps" / (slice_stem(s) + "_pls"));

        PhantomRow row;
        row.id = b.id;
        row.reference = b.reference;
        row.unet = unet_pred.at(b.id);
        row.pls_mean = pls_mean.at(b.id);
        row.pls_pixel = pls_pixel.at(b.id);

        // Unmixing with the true endmembers, aggregated on the network's grid and mask.
        const HsiCube absorbance = to_absorbance(read_cube(s.cube_path));
        ChemicalMap unmixed = unmix_field(absorbance, Mask(absorbance.height, absorbance.width, 1), fat, lean);
        const ChemicalMap coarse = block_mean_2x2(unmixed);
        if (coarse.height < unet.height || coarse.width < unet.width)
            throw ShapeError("evaluate: network map is larger than the half-resolution phantom");
        double sum = 0.0;
        for (int r = 0; r < unet.height; ++r)
            for (int c = 0; c < unet.width; ++c)
                if (unet.mask.at(r, c)) sum += coarse.at(r, c);
        row.oracle = sum / static_cast<double>(unet.mask.count());

        row.unet_field_rmse = field_rmse(unet, field, unet.mask);
        row.pls_field_rmse = field_rmse(pls, field, mask);
        row.unet_stats = spatial_stats(unet, unet.mask);
        row.pls_stats = spatial_stats(pls, mask);
        row.unet_oobl = map_oobl(unet);

        row.smoothing_sigma = -1.0;
        const Mask support = dilate_mask(mask);
        const int steps = static_cast<int>(std::floor(config.smoothing_max / config.smoothing_step + 1e-9));
        for (int k = 1; k <= steps; ++k) {
            const double sigma = k * config.smoothing_step;
            ChemicalMap smoothed = gaussian_smooth_map(pls, support, sigma);
            smoothed.mask = mask;
            if (nugget(smoothed, mask) <= row.unet_stats.c0) {
                row.smoothing_sigma = sigma;
                row.smoothed_pls_field_rmse = field_rmse(smoothed, field, mask);
                break;
            }
        }
        if (row.smoothing_sigma < 0.0 || row.smoothed_pls_field_rmse <= row.unet_field_rmse) ++out.smoothing_failures;

        refs.push_back(row.reference);
        u.push_back(row.unet);
        pm.push_back(row.pls_mean);
        pp.push_back(row.pls_pixel);
        orc.push_back(row.oracle);
        out.unet_field_rmse += row.unet_field_rmse;
        out.pls_field_rmse += row.pls_field_rmse;
        out.unet_ratio_correlated += row.unet_stats.ratio_correlated;
        out.pls_ratio_correlated += row.pls_stats.ratio_correlated;
        out.max_unet_oobl = std::max(out.max_unet_oobl, row.unet_oobl);
        out.rows.push_back(row);
    }
    if (out.rows.empty()) throw Error("evaluate: no test phantoms");
    const double n = static_cast<double>(out.rows.size());
    out.unet_field_rmse /= n;
    out.pls_field_rmse /= n;
    out.unet_ratio_correlated /= n;
    out.pls_ratio_correlated /= n;
    out.unet_rmse = rmse_of(refs, u);
    out.pls_mean_rmse = rmse_of(refs, pm);
    out.pls_pixel_rmse = rmse_of(refs, pp);
    out.oracle_rmse = rmse_of(refs, orc);

    std::string text =
        "id,reference,unet,pls_mean,pls_pixel,oracle,unet_field_rmse,pls_field_rmse,unet_sigma2,unet_c0,"
        "unet_ratio_correlated,pls_sigma2,pls_c0,pls_ratio_correlated,unet_oobl,smoothing_sigma,"
        "smoothed_pls_field_rmse\n";
    for (const auto& r : out.rows)
        text += r.id + "," + num(r.reference) + "," + num(r.unet) + "," + num(r.pls_mean) + "," + num(r.pls_pixel) +
                "," + num(r.oracle) + "," + num(r.unet_field_rmse) + "," + num(r.pls_field_rmse) + "," +
                num(r.unet_stats.sigma2) + "," + num(r.unet_stats.c0) + "," + num(r.unet_stats.ratio_correlated) +
                "," + num(r.pls_stats.sigma2) + "," + num(r.pls_stats.c0) + "," +
                num(r.pls_stats.ratio_correlated) + "," + num(r.unet_oobl) + "," + num(r.smoothing_sigma) + "," +
                num(r.smoothed_pls_field_rmse) + "\n";
    write_text(dir / "phantom_eval.csv", text);

    std::string sum_text = "metric,value\n";
    sum_text += "test_phantoms," + std::to_string(out.rows.size()) + "\n";
    sum_text += "unet_rmse," + num(out.unet_rmse) + "\n";
    sum_text += "pls_mean_rmse," + num(out.pls_mean_rmse) + "\n";
    sum_text += "pls_pixel_rmse," + num(out.pls_pixel_rmse) + "\n";
    sum_text += "oracle_rmse," + num(out.oracle_rmse) + "\n";
    sum_text += "unet_field_rmse," + num(out.unet_field_rmse) + "\n";
    sum_text += "pls_field_rmse," + num(out.pls_field_rmse) + "\n";
    sum_text += "unet_ratio_correlated," + num(out.unet_ratio_correlated) + "\n";
    sum_text += "pls_ratio_correlated," + num(out.pls_ratio_correlated) + "\n";
    sum_text += "max_unet_oobl," + num(out.max_unet_oobl) + "\n";
    sum_text += "smoothing_failures," + std::to_string(out.smoothing_failures) + "\n";
    write_text(dir / "summary.csv", sum_text);
    return out;
}

StudySummary run_study(const StudyConfig& config, const fs::path& dir, std::uint64_t seed,
                       const std::function<void(const std::string&)>& progress) {
    const auto say = [&](const std::string& m) {
        if (progress) progress(m);
    };
    config.validate();
    write_study_config(config, dir / "study.json");
    const fs::path manifest = dir / "phantoms" / "manifest.csv";
    const fs::path folds = dir / "split" / "folds.csv";

    say("synth");
    synth_stage(config, dir / "phantoms", derive_seed(seed, 100));
    say("split");
    split_stage(config, manifest, dir / "split");
    say("pls-train");
    pls_train_stage(config, manifest, folds, dir / "pls");
    say("pls-predict");
    pls_predict_stage(config, manifest, dir / "pls" / "pls.model", folds, dir / "pls");
    say("unet-train");
    unet_train_stage(config, manifest, folds, dir / "unet", derive_seed(seed, 200),
                     [&](int f, const EpochLog& e) {
                         if (e.new_best || e.action != ScheduleAction::continue_training)
                             say("  fold " + std::to_string(f) + " epoch " + std::to_string(e.epoch) + " val_mse " +
                                 num(e.val.mse) + " " + to_string(e.action));
                     });
    say("unet-predict");
    unet_predict_stage(manifest, dir / "unet" / "ensemble.json", folds, dir / "unet", config);
    say("report");
    for (const std::string s : {"cv", "test"}) {
        if (s == "test" && config.test_count == 0) continue;
        report_stage(dir / "unet" / "unet_predictions.csv", dir / "report" / ("unet_" + s + ".csv"), s);
        report_stage(dir / "pls" / "pls_mean_predictions.csv", dir / "report" / ("pls_mean_" + s + ".csv"), s);
        report_stage(dir / "pls" / "pls_pixel_predictions.csv", dir / "report" / ("pls_pixel_" + s + ".csv"), s);
    }
    say("evaluate");
    return evaluate_study(config, dir);
}

}  // namespace chemmap
