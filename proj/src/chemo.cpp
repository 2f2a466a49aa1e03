#include "chemmap/chemo.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "binary_io.hpp"

namespace chemmap {

namespace {

double factorial(int k) {
    double f = 1.0;
    for (int i = 2; i <= k; ++i) f *= i;
    return f;
}

void check_savgol_params(int window, int poly, int deriv) {
    if (window < 1 || window % 2 == 0) throw Error("savgol: window must be a positive odd number");
    if (poly < 0 || poly >= window) throw Error("savgol: polynomial order must be in [0, window)");
    if (deriv < 0 || deriv > poly) throw Error("savgol: derivative order must be in [0, poly]");
}

}  // namespace

int Preprocessing::output_length(int raw_bands) const {
    return savgol ? raw_bands - sg_window + 1 : raw_bands;
}

Eigen::MatrixXd snv(const Eigen::MatrixXd& spectra) {
    const Eigen::Index p = spectra.cols();
    if (p < 2) throw Error("snv: spectra need at least two bands");
    Eigen::MatrixXd out(spectra.rows(), p);
    for (Eigen::Index i = 0; i < spectra.rows(); ++i) {
        const double mean = spectra.row(i).mean();
        const double ss = (spectra.row(i).array() - mean).square().sum();
        const double sd = std::sqrt(ss / static_cast<double>(p - 1));
        if (!(sd > 0.0) || !std::isfinite(sd))
            throw NumericError("snv: spectrum " + std::to_string(i) + " is constant (degenerate spectrum)");
        out.row(i) = (spectra.row(i).array() - mean) / sd;
    }
    return out;
}

Eigen::VectorXd savgol_coefficients(int window, int poly, int deriv) {
    check_savgol_params(window, poly, deriv);
    const int half = window / 2;
    Eigen::MatrixXd design(window, poly + 1);
    for (int j = 0; j < window; ++j) {
        double x = 1.0;
        for (int i = 0; i <= poly; ++i) {
            design(j, i) = x;
            x *= static_cast<double>(j - half);
        }
    }
    const Eigen::MatrixXd pinv = design.completeOrthogonalDecomposition().pseudoInverse();
    return pinv.row(deriv).transpose() * factorial(deriv);
}

Eigen::MatrixXd savgol(const Eigen::MatrixXd& spectra, int window, int poly, int deriv) {
    check_savgol_params(window, poly, deriv);
    const Eigen::Index p = spectra.cols();
    if (p < window) throw Error("savgol: spectra shorter than the window");
    const Eigen::VectorXd c = savgol_coefficients(window, poly, deriv);
    const Eigen::Index out_len = p - window + 1;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(spectra.rows(), out_len);
    for (int k = 0; k < window; ++k) out += c(k) * spectra.middleCols(k, out_len);
    return out;
}

Eigen::MatrixXd preprocess(const Eigen::MatrixXd& raw, const Preprocessing& prep) {
    Eigen::MatrixXd x = prep.snv ? snv(raw) : raw;
    if (prep.savgol) x = savgol(x, prep.sg_window, prep.sg_poly, prep.sg_deriv);
    return x;
}

Spectrum mean_belly_spectrum(std::span<const HsiCube> cubes, std::span<const Mask> masks) {
    if (cubes.size() != masks.size()) throw Error("mean_belly_spectrum: cube and mask counts differ");
    if (cubes.empty()) throw Error("mean_belly_spectrum: no slices given");
    const int bands = cubes[0].bands;
    Spectrum out;
    out.values.assign(bands, 0.0);
    out.wavelengths = cubes[0].wavelengths;
    std::size_t n = 0;
    for (std::size_t s = 0; s < cubes.size(); ++s) {
        const HsiCube& cube = cubes[s];
        const Mask& mask = masks[s];
        if (cube.space != Space::absorbance) throw Error("mean_belly_spectrum: cubes must be in absorbance space");
        if (cube.bands != bands) throw ShapeError("mean_belly_spectrum: slices disagree on band count");
        if (cube.height != mask.height || cube.width != mask.width)
            throw ShapeError("mean_belly_spectrum: cube and mask dimensions differ");
        const std::size_t plane = cube.plane_size();
        for (int b = 0; b < bands; ++b) {
            const double* src = cube.values.data() + b * plane;
            double sum = 0.0;
            for (std::size_t i = 0; i < plane; ++i)
                if (mask.values[i]) sum += src[i];
            out.values[b] += sum;
        }
        n += mask.count();
    }
    if (n == 0) throw Error("mean_belly_spectrum: masks select no pixels");
    for (double& v : out.values) v /= static_cast<double>(n);
    return out;
}

PlsFit fit_pls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int components) {
    const Eigen::Index n = X.rows();
    const Eigen::Index p = X.cols();
    if (y.size() != n) throw ShapeError("fit_pls: X and y row counts differ");
    if (components < 1 || components > std::min<Eigen::Index>(n - 1, p))
        throw Error("fit_pls: component count " + std::to_string(components) + " outside [1, min(n-1, p)]");

    PlsFit fit;
    fit.weights = Eigen::MatrixXd::Zero(p, components);
    fit.rotations = Eigen::MatrixXd::Zero(p, components);
    fit.x_loadings = Eigen::MatrixXd::Zero(p, components);
    fit.y_loadings = Eigen::VectorXd::Zero(components);
    fit.scores = Eigen::MatrixXd::Zero(n, components);

    Eigen::VectorXd xty = X.transpose() * y;
    const double xty0 = xty.norm();
    const double x_energy = X.squaredNorm();
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p);

    for (int a = 0; a < components; ++a) {
        // Once X'y is deflated to nothing the response is fully explained and
        // further components leave the regression vector unchanged.
        if (xty0 == 0.0 || xty.norm() <= 1e-10 * xty0) {
            fit.coefficients.push_back(b);
            continue;
        }
        const Eigen::VectorXd w = xty.normalized();
        Eigen::VectorXd r = w;
        for (int j = 0; j < a; ++j) r -= fit.x_loadings.col(j).dot(w) * fit.rotations.col(j);
        const Eigen::VectorXd t = X * r;
        const double tt = t.squaredNorm();
        if (!(tt > 1e-20 * x_energy))
            throw NumericError("fit_pls: rank exhausted after " + std::to_string(a) + " components");
        const Eigen::VectorXd pa = X.transpose() * t / tt;
        const double q = r.dot(xty) / tt;
        xty -= pa * (q * tt);

        fit.weights.col(a) = w;
        fit.rotations.col(a) = r;
        fit.x_loadings.col(a) = pa;
        fit.y_loadings(a) = q;
        fit.scores.col(a) = t;
        b += r * q;
        fit.coefficients.push_back(b);
    }
    return fit;
}

const Eigen::VectorXd& PlsModel::active_coefficients() const {
    if (n_components < 1 || n_components > static_cast<int>(coefficients.size()))
        throw Error("PlsModel: no coefficients for " + std::to_string(n_components) + " components");
    return coefficients[n_components - 1];
}

PlsModel calibrate_pls(const Eigen::MatrixXd& raw, const Eigen::VectorXd& y, int components,
                       const Preprocessing& prep) {
    const Eigen::MatrixXd x = preprocess(raw, prep);
    PlsModel model;
    model.raw_bands = static_cast<int>(raw.cols());
    model.prep = prep;
    model.x_mean = x.colwise().mean().transpose();
    model.y_mean = y.mean();
    const Eigen::MatrixXd xc = x.rowwise() - model.x_mean.transpose();
    const Eigen::VectorXd yc = y.array() - model.y_mean;
    model.coefficients = fit_pls(xc, yc, components).coefficients;
    model.n_components = components;
    return model;
}

Eigen::VectorXd predict_pls(const PlsModel& model, const Eigen::MatrixXd& raw) {
    return predict_pls(model, raw, model.n_components);
}

Eigen::VectorXd predict_pls(const PlsModel& model, const Eigen::MatrixXd& raw, int components) {
    if (raw.cols() != model.raw_bands)
        throw ShapeError("predict_pls: spectra have " + std::to_string(raw.cols()) + " bands, model expects " +
                         std::to_string(model.raw_bands));
    if (components == 0) return Eigen::VectorXd::Constant(raw.rows(), model.y_mean);
    if (components < 0 || components > static_cast<int>(model.coefficients.size()))
        throw Error("predict_pls: model has no coefficients for " + std::to_string(components) + " components");
    const Eigen::MatrixXd x = preprocess(raw, model.prep);
    const Eigen::MatrixXd xc = x.rowwise() - model.x_mean.transpose();
    return (xc * model.coefficients[components - 1]).array() + model.y_mean;
}

CvResult select_components_cv(const Eigen::MatrixXd& raw, const Eigen::VectorXd& y,
                              const std::vector<int>& folds, int max_components,
                              const Preprocessing& prep) {
    const Eigen::Index n = raw.rows();
    if (y.size() != n || static_cast<Eigen::Index>(folds.size()) != n)
        throw ShapeError("select_components_cv: spectra, references and folds differ in length");
    if (max_components < 1) throw Error("select_components_cv: need at least one component");
    int n_folds = 0;
    for (int f : folds) {
        if (f < 0) throw Error("select_components_cv: negative fold index");
        n_folds = std::max(n_folds, f + 1);
    }
    if (n_folds < 2) throw Error("select_components_cv: need at least two folds");

    // SNV and Savitzky-Golay act on each spectrum alone; only the centring
    // statistics depend on which samples form the training fold.
    const Eigen::MatrixXd x = preprocess(raw, prep);

    CvResult result;
    result.out_of_fold = Eigen::MatrixXd::Zero(n, max_components);
    result.fold_rmse.assign(n_folds, std::vector<double>(max_components, 0.0));
    for (int f = 0; f < n_folds; ++f) {
        std::vector<Eigen::Index> train, val;
        for (Eigen::Index i = 0; i < n; ++i) (folds[i] == f ? val : train).push_back(i);
        if (val.empty()) throw Error("select_components_cv: fold " + std::to_string(f) + " is empty");
        const Eigen::Index feasible = std::min<Eigen::Index>(static_cast<Eigen::Index>(train.size()) - 1, x.cols());
        if (max_components > feasible)
            throw Error("select_components_cv: " + std::to_string(max_components) +
                        " components exceed the feasible rank " + std::to_string(feasible) + " of fold " +
                        std::to_string(f));

        const Eigen::MatrixXd xt = x(train, Eigen::all);
        const Eigen::VectorXd yt = y(train);
        const Eigen::RowVectorXd x_mean = xt.colwise().mean();
        const double y_mean = yt.mean();
        const PlsFit fit = fit_pls(xt.rowwise() - x_mean, yt.array() - y_mean, max_components);

        const Eigen::MatrixXd xv = x(val, Eigen::all).rowwise() - x_mean;
        const Eigen::VectorXd yv = y(val);
        for (int a = 1; a <= max_components; ++a) {
            const Eigen::VectorXd pred = (xv * fit.coefficients[a - 1]).array() + y_mean;
            for (std::size_t k = 0; k < val.size(); ++k) result.out_of_fold(val[k], a - 1) = pred(k);
            result.fold_rmse[f][a - 1] = std::sqrt((pred - yv).squaredNorm() / static_cast<double>(val.size()));
        }
    }

    result.rmse_curve.assign(max_components, 0.0);
    for (int a = 0; a < max_components; ++a) {
        double sum = 0.0;
        for (int f = 0; f < n_folds; ++f) sum += result.fold_rmse[f][a];
        result.rmse_curve[a] = sum / n_folds;
    }
    int best = 0;
    for (int a = 1; a < max_components; ++a)
        if (result.rmse_curve[a] < result.rmse_curve[best]) best = a;
    result.best_components = best + 1;
    result.model = calibrate_pls(raw, y, result.best_components, prep);
    return result;
}

ChemicalMap pls_chemical_map(const PlsModel& model, const HsiCube& cube, const Mask& mask) {
    if (cube.space != Space::absorbance) throw Error("pls_chemical_map: cube must be in absorbance space");
    if (cube.height != mask.height || cube.width != mask.width)
        throw ShapeError("pls_chemical_map: cube and mask dimensions differ");
    if (mask.count() == 0) throw Error("pls_chemical_map: mask is empty");
    const Mask support = dilate_mask(mask);
    const std::size_t n = support.count();

    Eigen::MatrixXd spectra(static_cast<Eigen::Index>(n), cube.bands);
    std::vector<std::size_t> pixels;
    pixels.reserve(n);
    for (std::size_t i = 0; i < support.values.size(); ++i)
        if (support.values[i]) pixels.push_back(i);
    const std::size_t plane = cube.plane_size();
    for (int b = 0; b < cube.bands; ++b)
        for (std::size_t k = 0; k < n; ++k)
            spectra(static_cast<Eigen::Index>(k), b) = cube.values[b * plane + pixels[k]];

    const Eigen::VectorXd pred = predict_pls(model, spectra);
    ChemicalMap map(cube.height, cube.width);
    map.mask = mask;
    for (std::size_t k = 0; k < n; ++k) map.values[pixels[k]] = pred(static_cast<Eigen::Index>(k));
    return map;
}

void write_pls_model(const PlsModel& model, const std::filesystem::path& path) {
    const auto p = model.x_mean.size();
    std::ostringstream hs;
    hs << "PLS1 " << model.raw_bands << ' ' << p << ' ' << model.coefficients.size() << ' ' << model.n_components
       << ' ' << int(model.prep.snv) << ' ' << int(model.prep.savgol) << ' ' << model.prep.sg_window << ' '
       << model.prep.sg_poly << ' ' << model.prep.sg_deriv << '\n';
    std::string bytes = hs.str();
    detail::put_f64(bytes, model.y_mean);
    for (Eigen::Index i = 0; i < p; ++i) detail::put_f64(bytes, model.x_mean(i));
    for (const auto& b : model.coefficients) {
        if (b.size() != p) throw ShapeError("write_pls_model: coefficient length mismatch");
        for (Eigen::Index i = 0; i < p; ++i) detail::put_f64(bytes, b(i));
    }
    detail::write_file(path, bytes);
}

PlsModel read_pls_model(const std::filesystem::path& path) {
    const std::string bytes = detail::read_file(path);
    const auto [header, offset] = detail::split_header(bytes, path);
    std::istringstream hs(header);
    std::string magic;
    hs >> magic;
    if (magic.rfind("PLS", 0) != 0) throw FormatError(path.string() + ": not a PLS model file");
    if (magic != "PLS1") throw FormatError(path.string() + ": unknown PLS model version " + magic);
    long long raw_bands = 0, p = 0, stored = 0;
    int n_comp = 0, use_snv = 0, use_sg = 0;
    PlsModel model;
    if (!(hs >> raw_bands >> p >> stored >> n_comp >> use_snv >> use_sg >> model.prep.sg_window >>
          model.prep.sg_poly >> model.prep.sg_deriv) ||
        raw_bands <= 0 || p <= 0 || stored < 0 || n_comp < 0 || n_comp > stored)
        throw FormatError(path.string() + ": malformed PLS header");
    model.raw_bands = static_cast<int>(raw_bands);
    model.n_components = n_comp;
    model.prep.snv = use_snv != 0;
    model.prep.savgol = use_sg != 0;
    if (model.prep.output_length(model.raw_bands) != p)
        throw FormatError(path.string() + ": feature count inconsistent with preprocessing");
    const std::size_t expected = static_cast<std::size_t>(1 + p + stored * p) * 8;
    if (bytes.size() - offset != expected) throw FormatError(path.string() + ": PLS payload size mismatch");
    const char* ptr = bytes.data() + offset;
    model.y_mean = detail::get_f64(ptr);
    ptr += 8;
    model.x_mean.resize(p);
    for (long long i = 0; i < p; ++i, ptr += 8) model.x_mean(i) = detail::get_f64(ptr);
    for (long long a = 0; a < stored; ++a) {
        Eigen::VectorXd b(p);
        for (long long i = 0; i < p; ++i, ptr += 8) b(i) = detail::get_f64(ptr);
        if (!b.allFinite()) throw NumericError(path.string() + ": non-finite coefficients");
        model.coefficients.push_back(std::move(b));
    }
    return model;
}

}  // namespace chemmap
