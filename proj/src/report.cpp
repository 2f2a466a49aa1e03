#include "chemmap/report.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "binary_io.hpp"

namespace chemmap {

MetricsReport report_metrics(const std::vector<PredictionPair>& pairs) {
    MetricsReport r;
    r.n = pairs.size();
    r.pairs = pairs;
    if (r.n == 0) throw Error("report_metrics: no predictions");

    double ss = 0.0, mx = 0.0, my = 0.0;
    for (const auto& p : pairs) {
        ss += (p.prediction - p.reference) * (p.prediction - p.reference);
        mx += p.reference;
        my += p.prediction;
    }
    const double n = static_cast<double>(r.n);
    r.rmse = std::sqrt(ss / n);
    mx /= n;
    my /= n;

    double sxx = 0.0, sxy = 0.0;
    for (const auto& p : pairs) {
        sxx += (p.reference - mx) * (p.reference - mx);
        sxy += (p.reference - mx) * (p.prediction - my);
    }
    if (sxx > 0.0) {
        r.slope = sxy / sxx;
        r.intercept = my - r.slope * mx;
        if (r.n >= 3) {
            double res = 0.0;
            for (const auto& p : pairs) {
                const double e = p.prediction - (r.slope * p.reference + r.intercept);
                res += e * e;
            }
            r.s_yx = std::sqrt(res / (n - 2.0));
        }
    } else {
        r.slope = std::nan("");
        r.intercept = std::nan("");
    }

    std::map<std::string, std::pair<std::size_t, double>> groups;
    for (const auto& p : pairs) {
        if (p.group.empty()) continue;
        auto& g = groups[p.group];
        ++g.first;
        g.second += (p.prediction - p.reference) * (p.prediction - p.reference);
    }
    for (const auto& [name, g] : groups)
        r.groups.push_back({name, g.first, std::sqrt(g.second / static_cast<double>(g.first))});
    return r;
}

MetricsReport report_metrics(const std::vector<double>& predictions, const std::vector<double>& references) {
    if (predictions.size() != references.size())
        throw ShapeError("report_metrics: " + std::to_string(predictions.size()) + " predictions but " +
                         std::to_string(references.size()) + " references");
    std::vector<PredictionPair> pairs(predictions.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        pairs[i].id = std::to_string(i);
        pairs[i].reference = references[i];
        pairs[i].prediction = predictions[i];
    }
    return report_metrics(pairs);
}

void write_metrics_csv(const MetricsReport& r, const std::filesystem::path& path) {
    std::ostringstream out;
    out.precision(10);
    out << "group,n,rmse,slope,intercept,s_yx\n";
    out << "all," << r.n << ',' << r.rmse << ',' << r.slope << ',' << r.intercept << ',';
    if (r.s_yx) out << *r.s_yx;
    out << '\n';
    for (const auto& g : r.groups) out << g.group << ',' << g.n << ',' << g.rmse << ",,,\n";
    detail::write_file(path, out.str());
}

void write_predictions_csv(const MetricsReport& r, const std::filesystem::path& path) {
    std::ostringstream out;
    out.precision(10);
    out << "id,group,reference,prediction\n";
    for (const auto& p : r.pairs) out << p.id << ',' << p.group << ',' << p.reference << ',' << p.prediction << '\n';
    detail::write_file(path, out.str());
}

std::vector<std::uint8_t> heatmap_bytes(const ChemicalMap& map, const Mask& mask, double lo, double hi) {
    if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi))
        throw Error("render_heatmap: value range must satisfy min < max");
    if (map.height != mask.height || map.width != mask.width)
        throw ShapeError("render_heatmap: map and mask dimensions differ");
    std::vector<std::uint8_t> out(map.values.size(), 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!mask.values[i]) continue;
        const double v = map.values[i];
        double q = 1.0 + std::round((v - lo) / (hi - lo) * 254.0);
        if (std::isnan(q)) q = 1.0;
        out[i] = static_cast<std::uint8_t>(std::clamp(q, 1.0, 255.0));
    }
    return out;
}

void render_heatmap(const ChemicalMap& map, const Mask& mask, double lo, double hi,
                    const std::filesystem::path& path) {
    const auto bytes = heatmap_bytes(map, mask, lo, hi);
    std::string data = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
    data.append(bytes.begin(), bytes.end());
    detail::write_file(path, data);
}

Pgm read_pgm(const std::filesystem::path& path) {
    const std::string data = detail::read_file(path);
    std::istringstream in(data);
    std::string magic;
    int maxval = 0;
    Pgm p;
    in >> magic >> p.width >> p.height >> maxval;
    if (!in || magic != "P5" || maxval != 255 || p.width <= 0 || p.height <= 0)
        throw FormatError(path.string() + ": not an 8-bit binary PGM");
    const auto offset = static_cast<std::size_t>(in.tellg()) + 1;
    const std::size_t n = static_cast<std::size_t>(p.width) * p.height;
    if (data.size() != offset + n) throw FormatError(path.string() + ": payload size mismatch");
    p.pixels.assign(data.begin() + static_cast<std::ptrdiff_t>(offset), data.end());
    return p;
}

}  // namespace chemmap
