#include "chemmap/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "binary_io.hpp"

namespace chemmap {

AdamState make_adam(const NetParams& params, const AdamConfig& config) {
    AdamState s;
    s.lr = config.lr;
    s.beta1 = config.beta1;
    s.beta2 = config.beta2;
    s.epsilon = config.epsilon;
    s.m = params.zeros_like();
    s.v = params.zeros_like();
    return s;
}

void adam_step(AdamState& state, NetParams& params, const NetParams& grads) {
    if (!grads.same_layout(params) || !state.m.same_layout(params) || !state.v.same_layout(params))
        throw ShapeError("adam_step: parameter, gradient and moment layouts differ");
    for (const auto& e : grads.entries)
        for (double g : e.tensor.values)
            if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in " + e.name);

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t e = 0; e < params.entries.size(); ++e) {
        auto& p = params.entries[e].tensor.values;
        const auto& g = grads.entries[e].tensor.values;
        auto& m = state.m.entries[e].tensor.values;
        auto& v = state.v.entries[e].tensor.values;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            p[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

const char* to_string(ScheduleAction action) {
    switch (action) {
        case ScheduleAction::continue_training: return "continue";
        case ScheduleAction::reduce_lr_and_restore: return "reduce_lr_and_restore";
        case ScheduleAction::stop_and_restore: return "stop_and_restore";
    }
    return "unknown";
}

const char* to_string(StopReason reason) {
    switch (reason) {
        case StopReason::none: return "none";
        case StopReason::early_stop: return "early_stop";
        case StopReason::max_epochs: return "max_epochs";
    }
    return "unknown";
}

ScheduleDecision schedule_update(ScheduleState& s, const ScheduleConfig& cfg, double val_mse) {
    ++s.epoch;
    ScheduleDecision d;
    if (val_mse < s.best_val_mse) {
        s.best_val_mse = val_mse;
        s.best_epoch = s.epoch;
        s.epochs_since_best_lr = 0;
        s.epochs_since_best_stop = 0;
        d.new_best = true;
    } else if (s.epoch > cfg.burn_in) {
        ++s.epochs_since_best_lr;
        ++s.epochs_since_best_stop;
    }

    if (s.epochs_since_best_stop >= cfg.stop_patience) {
        d.action = ScheduleAction::stop_and_restore;
        d.reason = StopReason::early_stop;
        return d;
    }
    if (s.epochs_since_best_lr >= cfg.lr_patience) {
        s.epochs_since_best_lr = 0;
        if (s.lr > cfg.lr_floor * (1.0 + 1e-9)) {
            s.lr = std::max(s.lr / cfg.lr_factor, cfg.lr_floor);
            d.action = ScheduleAction::reduce_lr_and_restore;
        }
    }
    if (d.action == ScheduleAction::continue_training && s.epoch >= cfg.max_epochs) {
        d.action = ScheduleAction::stop_and_restore;
        d.reason = StopReason::max_epochs;
    }
    return d;
}

PreparedSample prepare_sample(const HsiCube& cube, const Mask& mask, double reference, const Geometry& geometry) {
    PaddedSample padded = pad_two_stage(cube, mask, geometry);
    PreparedSample s;
    s.input = cube_to_tensor(padded.cube);
    s.unet_mask = prepare_unet_mask(padded.stage1_mask, geometry);
    if (s.unet_mask.count() == 0) throw Error("prepare_sample: network mask is empty after downsampling");
    s.mask = Tensor({1, geometry.out_h, geometry.out_w});
    for (std::size_t i = 0; i < s.mask.size(); ++i) s.mask.values[i] = s.unet_mask.values[i];
    s.reference = reference;
    return s;
}

LossBreakdown sample_loss(const UNet& net, const NetParams& params, const PreparedSample& sample,
                          const LossWeights& weights, NetParams* grad) {
    const double y[1] = {sample.reference};
    if (!grad) {
        const Tensor out = net.forward(params, sample.input);
        return total_loss(params, out, sample.mask, y, weights);
    }
    ForwardTrace trace;
    const Tensor out = net.forward(params, sample.input, &trace);
    Tensor d_out;
    const LossBreakdown loss = total_loss(params, out, sample.mask, y, weights, &d_out);
    if (!std::isfinite(loss.total))
        throw NumericError("sample_loss: non-finite loss (mse " + std::to_string(loss.mse) + ", sl " +
                           std::to_string(loss.sl) + ")");
    *grad = net.backward(params, trace, d_out);
    for (std::size_t e = 0; e < params.entries.size(); ++e) {
        if (params.entries[e].is_bias) continue;
        const auto& p = params.entries[e].tensor.values;
        auto& g = grad->entries[e].tensor.values;
        for (std::size_t i = 0; i < p.size(); ++i) g[i] += weights.l2 * 2.0 * p[i];
    }
    return loss;
}

LossBreakdown epoch_eval(const UNet& net, const NetParams& params, const std::vector<PreparedSample>& samples,
                         const LossWeights& weights) {
    if (samples.empty()) throw Error("epoch_eval: empty sample set");
    LossBreakdown acc;
    acc.weights = weights;
    for (const auto& s : samples) {
        const Tensor out = net.forward(params, s.input);
        const Tensor masked = masked_prediction(out, s.mask);
        const double pred = mean_fat(masked, s.mask)[0];
        acc.mse += (s.reference - pred) * (s.reference - pred);
        acc.oobl += oobl(masked);
        acc.sl += smoothness(out, s.mask);
    }
    const double n = static_cast<double>(samples.size());
    acc.mse /= n;
    acc.oobl /= n;
    acc.sl /= n;
    acc.l2 = l2(params);
    acc.combine();
    return acc;
}

namespace {

constexpr int max_init_draws = 64;

bool map_varies(const Tensor& out, const Tensor& mask) {
    bool seen = false;
    double first = 0.0;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        if (mask.values[i] == 0.0) continue;
        if (!seen) {
            first = out.values[i];
            seen = true;
        } else if (out.values[i] != first) {
            return true;
        }
    }
    return false;
}

}  // namespace

FoldResult train_fold(const std::vector<TrainSample>& train, const std::vector<TrainSample>& val,
                      const TrainConfig& config, std::uint64_t seed, const EpochCallback& on_epoch) {
    if (train.empty() || val.empty()) throw Error("train_fold: training and validation sets must be non-empty");
    for (const auto& a : train)
        for (const auto& b : val)
            if (a.belly_id == b.belly_id)
                throw Error("train_fold: belly " + a.belly_id + " appears in both training and validation");
    const UNet net(config.net);
    const Geometry& geometry = config.net.geometry;
    for (const auto* set : {&train, &val})
        for (const auto& s : *set)
            if (s.cube.bands != config.net.bands)
                throw ShapeError("train_fold: sample " + s.belly_id + " has " + std::to_string(s.cube.bands) +
                                 " bands, network expects " + std::to_string(config.net.bands));

    std::vector<PreparedSample> train_eval, val_eval;
    for (const auto& s : train) train_eval.push_back(prepare_sample(s.cube, s.mask, s.reference, geometry));
    for (const auto& s : val) val_eval.push_back(prepare_sample(s.cube, s.mask, s.reference, geometry));

    // A narrow network on all-positive absorbance can start with a whole
    // layer dead, or lose one in its first updates, leaving a constant map
    // that no gradient reaches. Such draws are discarded: at initialisation,
    // and when the training maps turn constant during burn-in.
    for (int draw = 0; draw < max_init_draws; ++draw) {
        NetParams params =
            init_kaiming(config.net, config.init_seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(draw));
        if (!map_varies(net.forward(params, train_eval.front().input), train_eval.front().mask)) continue;

        AdamState adam = make_adam(params, config.adam);
        ScheduleState schedule;
        schedule.lr = config.adam.lr;

        FoldResult result;
        result.init_draws = draw + 1;
        result.best_params = params;
        AdamState best_adam = adam;

        std::mt19937_64 order_rng(seed);
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), std::size_t{0});

        bool collapsed = false;
        while (true) {
            const int epoch = schedule.epoch + 1;
            std::shuffle(order.begin(), order.end(), order_rng);
            for (std::size_t idx : order) {
                std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                                  static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(idx)};
                std::mt19937_64 aug(seq);
                const auto [cube, mask] = random_flip(train[idx].cube, train[idx].mask, aug, config.flip_probability);
                const PreparedSample sample = prepare_sample(cube, mask, train[idx].reference, geometry);
                NetParams grad;
                sample_loss(net, params, sample, config.weights, &grad);
                adam_step(adam, params, grad);
            }

            EpochLog entry;
            entry.epoch = epoch;
            entry.lr = adam.lr;
            entry.train = epoch_eval(net, params, train_eval, config.weights);
            entry.val = epoch_eval(net, params, val_eval, config.weights);
            if (!std::isfinite(entry.train.total) || !std::isfinite(entry.val.total))
                throw NumericError("train_fold: non-finite loss at epoch " + std::to_string(epoch));
            if (entry.train.sl == 0.0 && epoch <= config.schedule.burn_in) {
                collapsed = true;
                break;
            }

            const ScheduleDecision d = schedule_update(schedule, config.schedule, entry.val.mse);
            entry.new_best = d.new_best;
            entry.action = d.action;
            if (d.new_best) {
                result.best_params = params;
                result.best_val_mse = entry.val.mse;
                result.best_epoch = epoch;
                best_adam = adam;
            }
            result.log.push_back(entry);
            if (on_epoch) on_epoch(result.log.back());

            if (d.action == ScheduleAction::reduce_lr_and_restore) {
                params = result.best_params;
                adam = best_adam;
                adam.lr = schedule.lr;
            } else if (d.action == ScheduleAction::stop_and_restore) {
                result.stop_reason = d.reason;
                break;
            }
        }
        if (!collapsed) return result;
    }
    throw NumericError("train_fold: every initialisation collapsed to a constant map");
}

Tensor ensemble_predict(const Ensemble& ensemble, const Tensor& padded_input) {
    if (ensemble.members.empty()) throw Error("ensemble_predict: empty ensemble");
    const UNet net(ensemble.config);
    const NetParams layout = make_params(ensemble.config);
    Tensor sum;
    for (std::size_t i = 0; i < ensemble.members.size(); ++i) {
        if (!ensemble.members[i].same_layout(layout))
            throw ShapeError("ensemble_predict: member " + std::to_string(i) + " does not match the config");
        Tensor out = net.forward(ensemble.members[i], padded_input);
        if (i == 0) {
            sum = std::move(out);
        } else {
            for (std::size_t k = 0; k < sum.size(); ++k) sum.values[k] += out.values[k];
        }
    }
    const double inv = 1.0 / static_cast<double>(ensemble.members.size());
    for (double& v : sum.values) v *= inv;
    return sum;
}

ChemicalMap predict_slice_map(const Ensemble& ensemble, const HsiCube& cube, const Mask& mask) {
    const Geometry& g = ensemble.config.geometry;
    const PreparedSample s = prepare_sample(cube, mask, 0.0, g);
    const Tensor out = ensemble_predict(ensemble, s.input);
    ChemicalMap map(g.out_h, g.out_w);
    map.mask = s.unet_mask;
    for (std::size_t i = 0; i < map.values.size(); ++i) map.values[i] = out.values[i];
    return map;
}

double belly_prediction(std::span<const ChemicalMap> slice_maps) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& m : slice_maps)
        for (std::size_t i = 0; i < m.values.size(); ++i)
            if (m.mask.values[i]) {
                sum += m.values[i];
                ++n;
            }
    if (n == 0) throw Error("belly_prediction: no masked pixels");
    return sum / static_cast<double>(n);
}

void write_loss_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
    std::ostringstream out;
    out.precision(17);
    out << "epoch,phase,mse,oobl,sl,l2,total\n";
    for (const auto& e : log) {
        for (const auto& [phase, b] : {std::pair{"train", &e.train}, std::pair{"val", &e.val}}) {
            out << e.epoch << ',' << phase << ',' << b->mse << ',' << b->oobl << ',' << b->sl << ',' << b->l2 << ','
                << b->total << '\n';
        }
    }
    detail::write_file(path, out.str());
}

void write_ensemble_descriptor(const NetConfig& config, const std::vector<std::filesystem::path>& member_files,
                               const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["format"] = "chemmap-ensemble-1";
    j["levels"] = config.levels;
    j["base_width"] = config.base_width;
    j["stem_depth"] = config.stem_depth;
    j["bin_factor"] = config.bin_factor;
    j["bands"] = config.bands;
    j["out_h"] = config.geometry.out_h;
    j["out_w"] = config.geometry.out_w;
    auto members = nlohmann::ordered_json::array();
    for (const auto& f : member_files) members.push_back(f.generic_string());
    j["members"] = members;
    detail::write_file(path, j.dump(2) + "\n");
}

Ensemble read_ensemble(const std::filesystem::path& descriptor) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_file(descriptor));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(descriptor.string() + ": " + e.what());
    }
    if (j.value("format", "") != "chemmap-ensemble-1")
        throw FormatError(descriptor.string() + ": unknown ensemble descriptor format");
    Ensemble ens;
    ens.config = make_net_config(j.at("levels"), j.at("base_width"), j.at("out_h"), j.at("out_w"), j.at("bands"),
                                 j.at("stem_depth"), j.at("bin_factor"));
    const NetParams layout = make_params(ens.config);
    for (const auto& m : j.at("members")) {
        std::filesystem::path p = m.get<std::string>();
        if (p.is_relative()) p = descriptor.parent_path() / p;
        NetParams params = read_params(p);
        if (!params.same_layout(layout))
            throw FormatError(p.string() + ": parameter layout does not match the ensemble config");
        ens.members.push_back(std::move(params));
    }
    if (ens.members.empty()) throw FormatError(descriptor.string() + ": ensemble lists no members");
    return ens;
}

}  // namespace chemmap
