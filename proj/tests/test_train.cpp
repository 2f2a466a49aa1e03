#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "chemmap/synth.hpp"
#include "chemmap/train.hpp"
#include <fstream>

#include "test_util.hpp"

using namespace chemmap;

namespace {

struct Trace {
    std::vector<ScheduleAction> actions;
    std::vector<double> lr;
    StopReason reason = StopReason::none;
    int stop_epoch = 0;
};

Trace run_schedule(const std::function<double(int)>& val, ScheduleConfig cfg = {}) {
    ScheduleState s;
    s.lr = 1e-3;
    Trace t;
    for (int e = 1; e <= 1000; ++e) {
        const ScheduleDecision d = schedule_update(s, cfg, val(e));
        t.actions.push_back(d.action);
        t.lr.push_back(s.lr);
        if (d.action == ScheduleAction::stop_and_restore) {
            t.reason = d.reason;
            t.stop_epoch = e;
            break;
        }
    }
    return t;
}

std::vector<int> epochs_with(const Trace& t, ScheduleAction a) {
    std::vector<int> out;
    for (std::size_t i = 0; i < t.actions.size(); ++i)
        if (t.actions[i] == a) out.push_back(static_cast<int>(i) + 1);
    return out;
}

NetParams single(double value) {
    NetParams p;
    p.entries.push_back({"w.weight", Tensor({3}, value), false});
    return p;
}

std::vector<TrainSample> phantom_samples(int count, std::uint64_t seed, int first_id) {
    PhantomSetConfig s;
    s.phantom.height = 16;
    s.phantom.width = 16;
    s.phantom.mask_radius_h = 0.45;
    s.phantom.mask_radius_w = 0.45;
    s.phantom.mask_perturbation = 0.0;
    s.phantom.noise_sigma = 0.002;
    s.count = count;
    std::vector<TrainSample> out;
    const auto set = make_phantom_set(s, seed);
    for (int i = 0; i < count; ++i) {
        TrainSample t;
        t.belly_id = "b" + std::to_string(first_id + i);
        t.slice_id = "0";
        t.cube = bin_bands(to_absorbance(set[i].cube), 2);
        t.mask = set[i].mask;
        t.reference = set[i].reference;
        out.push_back(std::move(t));
    }
    return out;
}

TrainConfig tiny_train_config() {
    TrainConfig c;
    c.net = make_net_config(1, 2, 8, 8, 8);
    c.schedule.burn_in = 2;
    c.schedule.lr_patience = 2;
    c.schedule.stop_patience = 4;
    c.schedule.max_epochs = 12;
    c.adam.lr = 1e-2;
    c.init_seed = 3;
    return c;
}

}  // namespace

TEST_CASE("adam first step") {
    NetParams p = single(0.5);
    AdamState s = make_adam(p);
    adam_step(s, p, single(1.0));
    CHECK(s.step == 1);
    for (double v : p.entries[0].tensor.values) CHECK(v == doctest::Approx(0.5 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-15));
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    NetParams p = single(0.25);
    AdamState s = make_adam(p);
    for (int i = 0; i < 3; ++i) adam_step(s, p, single(0.0));
    for (double v : p.entries[0].tensor.values) CHECK(v == 0.25);
}

TEST_CASE("adam is deterministic and rejects non-finite gradients") {
    NetParams a = single(1.0), b = single(1.0);
    AdamState sa = make_adam(a), sb = make_adam(b);
    for (int i = 0; i < 5; ++i) {
        const NetParams g = single(0.3 * i - 0.4);
        adam_step(sa, a, g);
        adam_step(sb, b, g);
    }
    CHECK(a.entries[0].tensor.values == b.entries[0].tensor.values);
    CHECK(sa.v.entries[0].tensor.values == sb.v.entries[0].tensor.values);

    const NetParams before = a;
    NetParams bad = single(1.0);
    bad.entries[0].tensor.values[1] = std::nan("");
    CHECK_THROWS_AS(adam_step(sa, a, bad), NumericError);
    CHECK(a.entries[0].tensor.values == before.entries[0].tensor.values);
    CHECK(sa.step == 5);
}

TEST_CASE("schedule with steady improvement runs to the epoch cap") {
    const Trace t = run_schedule([](int e) { return 100.0 / e; });
    CHECK(t.stop_epoch == 250);
    CHECK(t.reason == StopReason::max_epochs);
    CHECK(epochs_with(t, ScheduleAction::reduce_lr_and_restore).empty());
}

TEST_CASE("schedule with no improvement after the first epoch") {
    const Trace t = run_schedule([](int) { return 5.0; });
    CHECK(epochs_with(t, ScheduleAction::reduce_lr_and_restore) == std::vector<int>{40, 50});
    CHECK(t.stop_epoch == 60);
    CHECK(t.reason == StopReason::early_stop);
    CHECK(t.lr[38] == 1e-3);
    CHECK(t.lr[39] == doctest::Approx(1e-4));
    CHECK(t.lr[49] == doctest::Approx(1e-5));
}

TEST_CASE("schedule counters restart at a new best after burn-in") {
    // Best at epoch 45; reductions at 55 and 65; stop at 75.
    const Trace t = run_schedule([](int e) { return e == 45 ? 1.0 : (e < 45 ? 5.0 : 3.0); });
    CHECK(epochs_with(t, ScheduleAction::reduce_lr_and_restore) == std::vector<int>{40, 55, 65});
    CHECK(t.stop_epoch == 75);
}

TEST_CASE("schedule respects the learning-rate floor") {
    ScheduleConfig cfg;
    cfg.stop_patience = 200;
    cfg.max_epochs = 250;
    const Trace t = run_schedule([](int) { return 1.0; }, cfg);
    const auto reductions = epochs_with(t, ScheduleAction::reduce_lr_and_restore);
    CHECK(reductions == std::vector<int>{40, 50, 60, 70});
    CHECK(t.lr.back() == doctest::Approx(1e-7));
    for (std::size_t i = 1; i < t.lr.size(); ++i) {
        CHECK(t.lr[i] <= t.lr[i - 1]);
        CHECK(t.lr[i] >= 1e-7 * (1.0 - 1e-12));
    }
    CHECK(t.stop_epoch == 230);
    CHECK(t.reason == StopReason::early_stop);
}

TEST_CASE("epoch evaluation") {
    const auto samples = phantom_samples(2, 1, 0);
    const TrainConfig cfg = tiny_train_config();
    const UNet net(cfg.net);
    const NetParams p = init_kaiming(cfg.net, 1);
    std::vector<PreparedSample> prepared;
    for (const auto& s : samples) prepared.push_back(prepare_sample(s.cube, s.mask, s.reference, cfg.net.geometry));

    const LossBreakdown one = epoch_eval(net, p, {prepared[0]}, cfg.weights);
    const LossBreakdown direct = sample_loss(net, p, prepared[0], cfg.weights);
    CHECK(one.total == doctest::Approx(direct.total).epsilon(1e-14));

    const LossBreakdown both = epoch_eval(net, p, prepared, cfg.weights);
    std::vector<double> preds;
    for (const auto& s : prepared) {
        const Tensor y = net.forward(p, s.input);
        preds.push_back(mean_fat(masked_prediction(y, s.mask), s.mask)[0]);
    }
    const std::vector<double> refs{prepared[0].reference, prepared[1].reference};
    CHECK(both.mse == doctest::Approx(mse(refs, preds)).epsilon(1e-14));
    CHECK(epoch_eval(net, p, prepared, cfg.weights).total == both.total);
    CHECK_THROWS(epoch_eval(net, p, {}, cfg.weights));
}

TEST_CASE("fold training tracks its best snapshot and is reproducible") {
    const auto train = phantom_samples(4, 2, 0);
    const auto val = phantom_samples(2, 3, 10);
    const TrainConfig cfg = tiny_train_config();
    std::vector<int> seen;
    const FoldResult a = train_fold(train, val, cfg, 17, [&](const EpochLog& e) { seen.push_back(e.epoch); });
    const FoldResult b = train_fold(train, val, cfg, 17);

    REQUIRE(!a.log.empty());
    CHECK(seen.size() == a.log.size());
    CHECK(a.stop_reason != StopReason::none);
    CHECK(a.log.size() <= 12);
    CHECK(a.best_val_mse <= a.log.front().val.mse);
    double best = a.log.front().val.mse;
    for (const auto& e : a.log) best = std::min(best, e.val.mse);
    CHECK(a.best_val_mse == best);
    CHECK(a.log[a.best_epoch - 1].val.mse == best);

    const UNet net(cfg.net);
    std::vector<PreparedSample> pv;
    for (const auto& s : val) pv.push_back(prepare_sample(s.cube, s.mask, s.reference, cfg.net.geometry));
    CHECK(epoch_eval(net, a.best_params, pv, cfg.weights).mse == doctest::Approx(best).epsilon(1e-14));

    for (std::size_t e = 0; e < a.best_params.entries.size(); ++e)
        CHECK(a.best_params.entries[e].tensor.values == b.best_params.entries[e].tensor.values);
    for (std::size_t i = 1; i < a.log.size(); ++i) CHECK(a.log[i].lr <= a.log[i - 1].lr);
}

TEST_CASE("fold training input checks") {
    const auto train = phantom_samples(2, 4, 0);
    auto val = phantom_samples(1, 5, 0);
    const TrainConfig cfg = tiny_train_config();
    CHECK_THROWS(train_fold(train, val, cfg, 1));  // belly b0 in both sets
    val[0].belly_id = "other";
    CHECK_THROWS(train_fold(train, {}, cfg, 1));
    auto wrong = train;
    wrong[0].cube = to_absorbance(make_phantom(PhantomConfig{.height = 16, .width = 16, .bands = 12}, 1).cube);
    CHECK_THROWS_AS(train_fold(wrong, val, cfg, 1), ShapeError);
}

TEST_CASE("ensemble averaging") {
    const NetConfig cfg = make_net_config(1, 2, 8, 8, 8);
    const NetParams p = init_kaiming(cfg, 9);
    const Tensor x = testutil::random_tensor({8, cfg.geometry.padded_h, cfg.geometry.padded_w}, 3, 0.1, 0.5);
    const UNet net(cfg);
    const Tensor single_out = net.forward(p, x);
    const Tensor twin = ensemble_predict({cfg, {p, p}}, x);
    for (std::size_t i = 0; i < twin.size(); ++i) CHECK(twin.values[i] == doctest::Approx(single_out.values[i]));

    NetParams c10 = make_params(cfg), c20 = make_params(cfg);
    c10["head.bias"].values[0] = 10.0;
    c20["head.bias"].values[0] = 20.0;
    for (double v : ensemble_predict({cfg, {c10, c20}}, x).values) CHECK(v == 15.0);
    CHECK_THROWS(ensemble_predict({cfg, {}}, x));
    CHECK_THROWS(ensemble_predict({cfg, {init_kaiming(make_net_config(1, 4, 8, 8, 8), 1)}}, x));
}

TEST_CASE("belly prediction pools all masked pixels") {
    ChemicalMap a(2, 2), b(2, 2);
    a.values = {10, 10, 10, 10};
    a.mask = Mask(2, 2, 1);
    b.values = {40, 0, 0, 0};
    b.mask = Mask(2, 2);
    b.mask.at(0, 0) = 1;
    const std::vector<ChemicalMap> maps{a, b};
    CHECK(belly_prediction(maps) == doctest::Approx(16.0));
}

TEST_CASE("loss log and ensemble descriptor") {
    testutil::TempDir dir("ensemble");
    EpochLog e;
    e.epoch = 1;
    e.train.mse = 2.0;
    e.val.mse = 3.0;
    write_loss_log({e}, dir.path / "log.csv");
    std::ifstream in(dir.path / "log.csv");
    std::string header, row1, row2;
    std::getline(in, header);
    std::getline(in, row1);
    std::getline(in, row2);
    CHECK(header == "epoch,phase,mse,oobl,sl,l2,total");
    CHECK(row1.rfind("1,train,2,", 0) == 0);
    CHECK(row2.rfind("1,val,3,", 0) == 0);

    const NetConfig cfg = make_net_config(1, 2, 8, 8, 8);
    write_params(init_kaiming(cfg, 1), dir.path / "m0.unp");
    write_params(init_kaiming(cfg, 2), dir.path / "m1.unp");
    write_ensemble_descriptor(cfg, {"m0.unp", "m1.unp"}, dir.path / "ensemble.json");
    const Ensemble ens = read_ensemble(dir.path / "ensemble.json");
    CHECK(ens.members.size() == 2);
    CHECK(ens.config.geometry.padded_h == cfg.geometry.padded_h);
    CHECK(ens.members[1].entries[0].tensor.values == init_kaiming(cfg, 2).entries[0].tensor.values);
}
