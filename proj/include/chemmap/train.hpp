#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "chemmap/diffnet.hpp"
#include "chemmap/hsidata.hpp"
#include "chemmap/loss.hpp"

namespace chemmap {

// ---- Adam ----

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    long long step = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    NetParams m;
    NetParams v;
};

AdamState make_adam(const NetParams& params, const AdamConfig& config = {});

/// One bias-corrected Adam update. Throws on non-finite gradients before
/// touching any state.
void adam_step(AdamState& state, NetParams& params, const NetParams& grads);

// ---- schedule ----

struct ScheduleConfig {
    int burn_in = 30;
    int lr_patience = 10;
    int stop_patience = 30;
    double lr_factor = 10.0;
    double lr_floor = 1e-7;
    int max_epochs = 250;
};

enum class ScheduleAction { continue_training, reduce_lr_and_restore, stop_and_restore };
enum class StopReason { none, early_stop, max_epochs };

const char* to_string(ScheduleAction action);
const char* to_string(StopReason reason);

struct ScheduleState {
    int epoch = 0;
    double lr = 1e-3;
    double best_val_mse = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int epochs_since_best_lr = 0;
    int epochs_since_best_stop = 0;
};

struct ScheduleDecision {
    ScheduleAction action = ScheduleAction::continue_training;
    bool new_best = false;
    StopReason reason = StopReason::none;
};

/// Advances the epoch counter and applies the burn-in / patience rules. The
/// lr counter resets on a new best and after each reduction; the stop
/// counter resets only on a new best. Counters only run after burn-in.
ScheduleDecision schedule_update(ScheduleState& state, const ScheduleConfig& config, double val_mse);

// ---- data ----

/// One slice ready for the network: absorbance, band-selected and binned,
/// at its original spatial size.
struct TrainSample {
    std::string belly_id;
    std::string slice_id;
    HsiCube cube;
    Mask mask;
    double reference = 0.0;
};

/// Padded network input and the half-resolution eroded mask it is scored on.
struct PreparedSample {
    Tensor input;
    Tensor mask;  // 1 x out_h x out_w
    Mask unet_mask;
    double reference = 0.0;
};

PreparedSample prepare_sample(const HsiCube& cube, const Mask& mask, double reference, const Geometry& geometry);

struct TrainConfig {
    NetConfig net;
    LossWeights weights;
    AdamConfig adam;
    ScheduleConfig schedule;
    double flip_probability = 0.5;
    std::uint64_t init_seed = 0;
};

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    LossBreakdown train;
    LossBreakdown val;
    bool new_best = false;
    ScheduleAction action = ScheduleAction::continue_training;
};

struct FoldResult {
    NetParams best_params;
    double best_val_mse = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    int init_draws = 1;  // initialisations drawn until training kept a non-constant map
    std::vector<EpochLog> log;
    StopReason stop_reason = StopReason::none;
};

/// Loss of one prepared sample; fills `grad` (parameter layout) when given.
LossBreakdown sample_loss(const UNet& net, const NetParams& params, const PreparedSample& sample,
                          const LossWeights& weights, NetParams* grad = nullptr);

/// Set-level loss with the given weights, equivalent to using the whole set
/// as one batch. No augmentation.
LossBreakdown epoch_eval(const UNet& net, const NetParams& params, const std::vector<PreparedSample>& samples,
                         const LossWeights& weights);

/// Called after every epoch with the log entry just appended.
using EpochCallback = std::function<void(const EpochLog&)>;

FoldResult train_fold(const std::vector<TrainSample>& train, const std::vector<TrainSample>& val,
                      const TrainConfig& config, std::uint64_t seed, const EpochCallback& on_epoch = {});

// ---- ensemble ----

struct Ensemble {
    NetConfig config;
    std::vector<NetParams> members;
};

/// Uniform average of member outputs for one padded input.
Tensor ensemble_predict(const Ensemble& ensemble, const Tensor& padded_input);

/// Ensemble map of one slice on the network's output grid, masked with the
/// half-resolution eroded mask.
ChemicalMap predict_slice_map(const Ensemble& ensemble, const HsiCube& cube, const Mask& mask);

/// Mean over all masked pixels of all slice maps of one belly.
double belly_prediction(std::span<const ChemicalMap> slice_maps);

void write_loss_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

/// Descriptor (JSON) with the network config and member parameter files
/// relative to the descriptor's directory.
void write_ensemble_descriptor(const NetConfig& config, const std::vector<std::filesystem::path>& member_files,
                               const std::filesystem::path& path);
Ensemble read_ensemble(const std::filesystem::path& descriptor);

}  // namespace chemmap
