// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "chemmap/pipeline.hpp"

namespace fs = std::filesystem;
using namespace chemmap;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
    std::vector<std::string> notes;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

// ---- 1 ----

Outcome gradient_fidelity() {
    const double t0 = cpu_seconds();
    const NetConfig cfg = make_net_config(2, 4, 12, 12, 8);
    if (cfg.geometry.padded_h != 104 || cfg.geometry.padded_w != 104) return {false, "fixture is not 104x104"};
    const UNet net(cfg);

    // Small random biases keep pre-activations off the exact ReLU kinks that
    // zero biases produce on constant regions.
    NetParams p = init_kaiming(cfg, 21);
    std::mt19937_64 rng(22);
    std::normal_distribution<double> bias(0.0, 0.05);
    for (auto& e : p.entries)
        if (e.is_bias)
            for (double& v : e.tensor.values) v = bias(rng);

    Tensor x({8, 104, 104});
    std::uniform_real_distribution<double> u(0.1, 0.5);
    for (double& v : x.values) v = u(rng);

    Mask blob(12, 12);
    for (int r = 0; r < 12; ++r)
        for (int c = 0; c < 12; ++c) blob.at(r, c) = (r - 5.5) * (r - 5.5) + (c - 5.5) * (c - 5.5) < 30.0;
    const Mask eroded = erode_mask(blob);
    Tensor mask({1, 12, 12});
    for (std::size_t i = 0; i < mask.size(); ++i) mask.values[i] = eroded.values[i];

    const Tensor y0 = net.forward(p, x);
    const double ref[1] = {mean_fat(masked_prediction(y0, mask), mask)[0] + 1.0};
    const Objective total = [&](const NetParams& q, NetParams* grad) {
        ForwardTrace trace;
        const Tensor y = net.forward(q, x, grad ? &trace : nullptr);
        Tensor d;
        const LossBreakdown l = total_loss(q, y, mask, ref, {}, grad ? &d : nullptr);
        if (grad) {
            *grad = net.backward(q, trace, d);
            total_loss(q, y, mask, ref, {}, nullptr, grad);
        }
        return l.total;
    };
    const GradCheckResult r = grad_check(total, p, 1e-6, 1e-5);
    const double secs = cpu_seconds() - t0;
    Outcome o;
    o.pass = r.max_rel_error < 1e-4 && secs < 120.0;
    o.detail = "max rel err " + fmt("%.2e", r.max_rel_error) + " over " + std::to_string(r.checked) +
               " parameters (limit 1e-4), " + fmt("%.1f", secs) + " s CPU (limit 120)";
    o.notes.push_back("worst: " + r.worst_parameter + "[" + std::to_string(r.worst_index) + "] analytic " +
                      fmt("%.6e", r.worst_analytic) + " numeric " + fmt("%.6e", r.worst_numeric));
    return o;
}

// ---- 2 ----

Outcome geometry_reproduction() {
    const Geometry g = compute_geometry(4, 996, 452, 7);
    const bool ok = g.padded_h == 2360 && g.padded_w == 1272 && g.unet_h == 1180 && g.unet_w == 636 &&
                    g.out_h == 996 && g.out_w == 452 && g.stage1_h == 1992 && g.stage1_w == 904;
    const auto sizes = expected_layer_sizes(g);
    const bool chain = !sizes.empty() && sizes.back().height == 996 && sizes.back().width == 452;
    char buf[160];
    std::snprintf(buf, sizeof buf, "padded %dx%d -> %dx%d -> %dx%d, stage-1 %dx%d", g.padded_h, g.padded_w, g.unet_h,
                  g.unet_w, g.out_h, g.out_w, g.stage1_h, g.stage1_w);
    return {ok && chain, buf};
}

// ---- 3 ----

Outcome nugget_identity() {
    std::mt19937_64 rng(31);
    std::uniform_int_distribution<int> dim(4, 24);
    std::bernoulli_distribution on(0.8);
    std::normal_distribution<double> value(40.0, 15.0);
    double worst = 0.0;
    int done = 0;
    while (done < 100) {
        const int h = dim(rng), w = dim(rng);
        Mask raw(h, w);
        for (auto& v : raw.values) v = on(rng);
        const Mask m = erode_mask(raw);
        if (m.count() == 0) continue;
        ChemicalMap map(h, w);
        for (double& v : map.values) v = value(rng);
        Tensor y({1, h, w}), mt({1, h, w});
        for (std::size_t i = 0; i < map.values.size(); ++i) {
            y.values[i] = map.values[i];
            mt.values[i] = m.values[i];
        }
        const double c0 = nugget(map, m);
        const double sl = smoothness(y, mt);
        worst = std::max(worst, std::abs(c0 - sl / 4.0) / std::max(std::abs(c0), 1e-300));
        ++done;
    }
    return {worst <= 1e-10, "max relative |C0 - SL/4| " + fmt("%.2e", worst) + " on 100 pairs (limit 1e-10)"};
}

// ---- 4 ----

// Textbook NIPALS PLS1 with explicit X and y deflation.
Eigen::VectorXd nipals_coefficients(Eigen::MatrixXd X, Eigen::VectorXd y, int A) {
    const Eigen::Index p = X.cols();
    Eigen::MatrixXd W(p, A), P(p, A);
    Eigen::VectorXd q(A);
    for (int a = 0; a < A; ++a) {
        Eigen::VectorXd w = X.transpose() * y;
        w.normalize();
        const Eigen::VectorXd t = X * w;
        const double tt = t.squaredNorm();
        const Eigen::VectorXd pa = X.transpose() * t / tt;
        q(a) = y.dot(t) / tt;
        X -= t * pa.transpose();
        y -= q(a) * t;
        W.col(a) = w;
        P.col(a) = pa;
    }
    return W * (P.transpose() * W).lu().solve(q);
}

double rel_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), 1e-300);
}

Outcome pls_oracle() {
    std::mt19937_64 rng(41);
    std::normal_distribution<double> n01(0.0, 1.0);
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
        const int n = 8 + static_cast<int>(rng() % 13);  // 8..20
        const int p = 3 + static_cast<int>(rng() % 8);   // 3..10
        const int A = 1 + static_cast<int>(rng() % std::min(5, std::min(p, n - 1)));
        Eigen::MatrixXd X(n, p);
        Eigen::VectorXd y(n);
        for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = n01(rng);
        for (Eigen::Index i = 0; i < n; ++i) y(i) = n01(rng);
        X.rowwise() -= X.colwise().mean();
        y.array() -= y.mean();
        const PlsFit fit = fit_pls(X, y, A);
        for (int a = 1; a <= A; ++a)
            worst = std::max(worst, rel_diff(fit.coefficients[a - 1], nipals_coefficients(X, y, a)));
    }
    double worst_ols = 0.0;
    for (int k = 0; k < 5; ++k) {
        const int n = 20, p = 4 + k;
        Eigen::MatrixXd X(n, p);
        Eigen::VectorXd y(n);
        for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = n01(rng);
        for (Eigen::Index i = 0; i < n; ++i) y(i) = n01(rng);
        X.rowwise() -= X.colwise().mean();
        y.array() -= y.mean();
        const Eigen::VectorXd ols = (X.transpose() * X).ldlt().solve(X.transpose() * y);
        worst_ols = std::max(worst_ols, rel_diff(fit_pls(X, y, p).coefficients.back(), ols));
    }
    return {worst <= 1e-8 && worst_ols <= 1e-8, "max rel diff vs NIPALS " + fmt("%.2e", worst) +
                                                     " on 20 instances, full-rank vs OLS " + fmt("%.2e", worst_ols) +
                                                     " (limit 1e-8)"};
}

// ---- 5 ----

Outcome savitzky_golay() {
    const int p = 25;
    Eigen::MatrixXd rows(3, p);
    for (int j = 0; j < p; ++j) {
        const double x = j - 7.0;
        rows(0, j) = 1.5 * x * x - 4.0 * x + 3.0;  // second derivative 3
        rows(1, j) = 5.0;
        rows(2, j) = -2.0 * x + 1.0;
    }
    rows.row(0) /= 1.5;  // x^2 - (8/3) x + 2, second derivative 2
    const Eigen::MatrixXd out = savgol(rows, 7, 2, 2);
    double e_quad = 0.0, e_const = 0.0, e_lin = 0.0;
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
        e_quad = std::max(e_quad, std::abs(out(0, j) - 2.0));
        e_const = std::max(e_const, std::abs(out(1, j)));
        e_lin = std::max(e_lin, std::abs(out(2, j)));
    }
    const bool ok = out.cols() == p - 6 && e_quad <= 1e-9 && e_const <= 1e-9 && e_lin <= 1e-9;
    return {ok, "quadratic -> 2 err " + fmt("%.1e", e_quad) + ", constant " + fmt("%.1e", e_const) + ", linear " +
                    fmt("%.1e", e_lin) + " (limit 1e-9)"};
}

// ---- 6 ----

struct Trace {
    std::vector<int> reductions;
    int stop = 0;
    StopReason reason = StopReason::none;
    std::vector<double> lr;
};

Trace run_trace(const std::function<double(int)>& val, ScheduleConfig cfg = {}) {
    ScheduleState s;
    s.lr = 1e-3;
    Trace t;
    for (int e = 1; e <= 1000 && t.stop == 0; ++e) {
        const ScheduleDecision d = schedule_update(s, cfg, val(e));
        t.lr.push_back(s.lr);
        if (d.action == ScheduleAction::reduce_lr_and_restore) t.reductions.push_back(e);
        if (d.action == ScheduleAction::stop_and_restore) {
            t.stop = e;
            t.reason = d.reason;
        }
    }
    return t;
}

Outcome schedule_machine() {
    std::vector<std::string> failures;
    const Trace improving = run_trace([](int e) { return 100.0 / e; });
    if (!(improving.stop == 250 && improving.reason == StopReason::max_epochs && improving.reductions.empty()))
        failures.push_back("perpetual improvement");

    const Trace flat = run_trace([](int) { return 5.0; });
    if (!(flat.reductions == std::vector<int>{40, 50} && flat.stop == 60 && flat.reason == StopReason::early_stop &&
          flat.lr[39] == 1e-4 && flat.lr[49] == 1e-5))
        failures.push_back("stagnation");

    const Trace late = run_trace([](int e) { return e == 45 ? 1.0 : (e < 45 ? 5.0 : 3.0); });
    if (!(late.reductions == std::vector<int>{40, 55, 65} && late.stop == 75)) failures.push_back("late best");

    ScheduleConfig patient;
    patient.stop_patience = 200;
    const Trace floor = run_trace([](int) { return 1.0; }, patient);
    bool monotone = true;
    for (std::size_t i = 1; i < floor.lr.size(); ++i) monotone = monotone && floor.lr[i] <= floor.lr[i - 1];
    if (!(floor.reductions == std::vector<int>{40, 50, 60, 70} && std::abs(floor.lr.back() - 1e-7) < 1e-20 &&
          monotone && floor.stop == 230))
        failures.push_back("floor");

    std::string detail = "4 scripted traces (cap 250, reduce at 40/50, stop at 60, restart after late best, floor 1e-7)";
    if (!failures.empty()) {
        detail += "; mismatched:";
        for (const auto& f : failures) detail += " " + f;
    }
    return {failures.empty(), detail};
}

// ---- 7, 8, 9 ----

std::vector<fs::path> tree_files(const fs::path& root) {
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
    std::sort(out.begin(), out.end());
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct StudyRun {
    StudySummary summary;
    double cpu = 0.0;
    double wall = 0.0;
};

StudyRun timed_study(const StudyConfig& config, const fs::path& dir, std::uint64_t seed, bool verbose) {
    fs::remove_all(dir);
    const double c0 = cpu_seconds();
    const auto w0 = std::chrono::steady_clock::now();
    StudyRun r;
    r.summary = run_study(config, dir, seed, [&](const std::string& m) {
        if (verbose) {
            std::printf("    %s\n", m.c_str());
            std::fflush(stdout);
        }
    });
    r.cpu = cpu_seconds() - c0;
    r.wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - w0).count();
    return r;
}

Outcome phantom_study(const StudyRun& run) {
    const StudySummary& s = run.summary;
    const bool a = s.unet_rmse <= 1.5 * s.oracle_rmse;
    const bool b = s.unet_field_rmse <= 0.5 * s.pls_field_rmse;
    const bool c = s.unet_ratio_correlated >= 0.9 && s.pls_ratio_correlated <= 0.5;
    const bool d = s.max_unet_oobl == 0.0;
    const bool t = run.cpu <= 1800.0;
    Outcome o;
    o.pass = a && b && c && d && t;
    o.detail = std::to_string(s.rows.size()) + " test phantoms, " + fmt("%.0f", run.cpu) + " s CPU";
    const auto mark = [](bool ok) { return ok ? "met" : "NOT MET"; };
    o.notes.push_back(std::string("7a ") + mark(a) + ": U-Net belly RMSE " + fmt("%.4f", s.unet_rmse) +
                      " vs 1.5 x oracle " + fmt("%.4f", 1.5 * s.oracle_rmse) + " (PLS mean " +
                      fmt("%.4f", s.pls_mean_rmse) + ", PLS pixel " + fmt("%.4f", s.pls_pixel_rmse) + ")");
    o.notes.push_back(std::string("7b ") + mark(b) + ": U-Net field RMSE " + fmt("%.4f", s.unet_field_rmse) +
                      " vs 0.5 x PLS " + fmt("%.4f", 0.5 * s.pls_field_rmse));
    o.notes.push_back(std::string("7c ") + mark(c) + ": ratio_correlated U-Net " +
                      fmt("%.4f", s.unet_ratio_correlated) + " (>= 0.9), PLS " + fmt("%.4f", s.pls_ratio_correlated) +
                      " (<= 0.5)");
    o.notes.push_back(std::string("7d ") + mark(d) + ": max test OOBL " + fmt("%.3g", s.max_unet_oobl));
    o.notes.push_back(std::string("runtime ") + mark(t) + ": " + fmt("%.0f", run.cpu) + " s CPU, " +
                      fmt("%.0f", run.wall) + " s wall (limit 1800 s)");
    return o;
}

Outcome determinism(const fs::path& a, const fs::path& b) {
    const auto fa = tree_files(a), fb = tree_files(b);
    if (fa != fb) return {false, "output trees differ in file lists"};
    std::size_t differing = 0;
    std::string first;
    for (const auto& f : fa)
        if (slurp(a / f) != slurp(b / f)) {
            if (differing++ == 0) first = f.string();
        }
    Outcome o;
    o.pass = differing == 0;
    o.detail = std::to_string(fa.size()) + " files compared byte for byte, " + std::to_string(differing) + " differ";
    if (differing) o.notes.push_back("first differing file: " + first);
    return o;
}

Outcome smoothing_counter(const StudySummary& s) {
    Outcome o;
    o.pass = s.smoothing_failures == 0 && !s.rows.empty();
    double min_gap = INFINITY;
    double max_sigma = 0.0;
    for (const auto& r : s.rows) {
        min_gap = std::min(min_gap, r.smoothed_pls_field_rmse - r.unet_field_rmse);
        max_sigma = std::max(max_sigma, r.smoothing_sigma);
    }
    o.detail = std::to_string(s.rows.size() - s.smoothing_failures) + "/" + std::to_string(s.rows.size()) +
               " phantoms: smoothed PLS field RMSE exceeds U-Net's once its nugget is matched";
    o.notes.push_back("smallest margin " + fmt("%.4f", min_gap) + ", largest sigma needed " + fmt("%.2f", max_sigma) +
                      " px");
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria 1-9"};
    std::string work = "acceptance_work";
    std::uint64_t seed = 2024;
    bool verbose = false;
    bool skip_study = false;
    app.add_option("--work", work, "Directory for study outputs");
    app.add_option("--seed", seed, "Study seed");
    app.add_flag("--verbose", verbose, "Print study progress");
    app.add_flag("--skip-study", skip_study, "Only run criteria 1-6");
    CLI11_PARSE(app, argc, argv);

    int failed = 0;
    const auto report = [&](int id, const char* name, const Outcome& o) {
        std::printf("%s  %d  %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
        for (const auto& n : o.notes) std::printf("        %s\n", n.c_str());
        std::fflush(stdout);
        if (!o.pass) ++failed;
    };
    const auto guarded = [&](int id, const char* name, const std::function<Outcome()>& f) {
        try {
            report(id, name, f());
        } catch (const std::exception& e) {
            report(id, name, {false, std::string("exception: ") + e.what()});
        }
    };

    guarded(1, "gradient fidelity", gradient_fidelity);
    guarded(2, "geometry reproduction", geometry_reproduction);
    guarded(3, "nugget identity", nugget_identity);
    guarded(4, "PLS oracle equivalence", pls_oracle);
    guarded(5, "Savitzky-Golay (7,2,2)", savitzky_golay);
    guarded(6, "schedule state machine", schedule_machine);

    if (skip_study) {
        std::printf("criteria 7-9 skipped; %d of 6 criteria failed\n", failed);
        return failed == 0 ? 0 : 1;
    }

    const StudyConfig config;
    const fs::path root(work);
    std::optional<StudyRun> first;
    try {
        first = timed_study(config, root / "run_a", seed, verbose);
    } catch (const std::exception& e) {
        report(7, "phantom study", {false, std::string("exception: ") + e.what()});
    }
    if (first) report(7, "phantom study", phantom_study(*first));

    guarded(8, "determinism", [&] {
        if (!first) return Outcome{false, "first study run failed"};
        timed_study(config, root / "run_b", seed, verbose);
        return determinism(root / "run_a", root / "run_b");
    });
    guarded(9, "smoothing counter-experiment", [&] {
        if (!first) return Outcome{false, "study run failed"};
        return smoothing_counter(first->summary);
    });

    std::printf("%d of 9 criteria failed\n", failed);
    return failed == 0 ? 0 : 1;
}
