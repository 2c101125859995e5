#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "legonet/train.hpp"

#include <cmath>
#include <set>

using namespace lego;

TEST_CASE("cosine schedule pins the published anchor points") {
    TrainConfig cfg;
    CHECK(std::fabs(cosine_lr(0.0, cfg) - 1e-3) < 1e-12);
    CHECK(std::fabs(cosine_lr(25.0, cfg) - 1e-5) < 1e-12);
    CHECK(std::fabs(cosine_lr(12.5, cfg) - 5.05e-4) < 1e-12);
}

TEST_CASE("cosine schedule restarts and stays bounded") {
    TrainConfig cfg;
    CHECK(cosine_lr(26.0, cfg) == doctest::Approx(cosine_lr(1.0, cfg)));
    CHECK(cosine_lr(50.0, cfg) == doctest::Approx(1e-5));
    for (double t = 0; t < 120; t += 0.25) {
        double lr = cosine_lr(t, cfg);
        CHECK(lr >= cfg.eta_min - 1e-15);
        CHECK(lr <= cfg.lr + 1e-15);
    }
    cfg.warm_restarts = false;
    CHECK(cosine_lr(60.0, cfg) == doctest::Approx(1e-5));
}

namespace {

ParamRegistry single_param(double value, long n = 1) {
    ParamRegistry reg;
    Tensor t = Tensor::full({n}, value, true);
    t.zero_grad();
    reg.add("p", t);
    return reg;
}

} // namespace

TEST_CASE("adamw zero-gradient behaviour") {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    ParamRegistry reg = single_param(0.7);
    AdamwState st = make_adamw_state(reg);
    adamw_step(reg, st, cfg.lr, cfg);
    CHECK(reg.entries[0].second.data()[0] == 0.7);

    cfg.weight_decay = 1e-2;
    ParamRegistry reg2 = single_param(0.7);
    AdamwState st2 = make_adamw_state(reg2);
    adamw_step(reg2, st2, cfg.lr, cfg);
    CHECK(reg2.entries[0].second.data()[0] == 0.7 * (1.0 - cfg.lr * cfg.weight_decay));
}

TEST_CASE("adamw first step matches the update formula transcription") {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    ParamRegistry reg = single_param(0.0);
    reg.entries[0].second.grad()[0] = 1.0;
    AdamwState st = make_adamw_state(reg);
    adamw_step(reg, st, cfg.lr, cfg);

    double m = (1 - cfg.beta1) * 1.0, v = (1 - cfg.beta2) * 1.0;
    double m_hat = m / (1 - cfg.beta1), v_hat = v / (1 - cfg.beta2);
    double want = -cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.eps));
    CHECK(std::fabs(reg.entries[0].second.data()[0] - want) < 1e-12);
    CHECK(std::fabs(reg.entries[0].second.data()[0] + cfg.lr) < 1e-8);
}

TEST_CASE("adamw second step follows the moving averages") {
    TrainConfig cfg;
    cfg.weight_decay = 1e-5;
    ParamRegistry reg = single_param(0.3);
    AdamwState st = make_adamw_state(reg);
    double theta = 0.3, m = 0, v = 0;
    for (long s = 1; s <= 3; ++s) {
        double g = 0.5 * s;
        reg.entries[0].second.grad()[0] = g;
        adamw_step(reg, st, cfg.lr, cfg);
        m = cfg.beta1 * m + (1 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
        double mh = m / (1 - std::pow(cfg.beta1, s)), vh = v / (1 - std::pow(cfg.beta2, s));
        theta -= cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * theta);
    }
    CHECK(std::fabs(reg.entries[0].second.data()[0] - theta) < 1e-15);
}

TEST_CASE("config validation") {
    TrainConfig cfg;
    cfg.eta_min = 2e-3;
    CHECK_THROWS(cfg.validate());
    cfg = TrainConfig{};
    cfg.patience = 200;
    CHECK_THROWS(cfg.validate());
    cfg = TrainConfig{};
    cfg.folds = 1;
    CHECK_THROWS(cfg.validate());
}

namespace {

TrainConfig smoke_config(long epochs) {
    TrainConfig cfg;
    cfg.max_epochs = epochs;
    cfg.patience = std::min(epochs, 25L);
    cfg.batch_size = 2;
    cfg.seed = 5;
    return cfg;
}

} // namespace

TEST_CASE("training produces a log and holds the best weights") {
    Rng rng(1);
    auto ds = synth_tube_dataset(6, 16, rng);
    std::vector<SynthCase> tr(ds.begin(), ds.begin() + 4), va(ds.begin() + 4, ds.end());
    ModelConfig mc = tiny_config(Version::V1);
    LegoNet model = build(mc, 2);
    TrainConfig cfg = smoke_config(3);
    TrainResult res = train(model, tr, va, cfg);

    REQUIRE(!res.log.empty());
    CHECK(res.log.size() <= 3);
    double best = -1;
    for (const auto& r : res.log) {
        CHECK(r.lr == doctest::Approx(cosine_lr(double(r.epoch), cfg)));
        CHECK(std::isfinite(r.train_loss));
        best = std::max(best, r.val_dsc);
    }
    CHECK(res.best_val_dsc == best);
    CHECK(validation_dsc(model, va) == doctest::Approx(res.best_val_dsc));

    std::string csv = res.log_csv();
    CHECK(csv.find("epoch,lr,train_loss,val_dsc") == 0);
}

TEST_CASE("zero patience stops on the first non-improving epoch") {
    Rng rng(2);
    auto ds = synth_tube_dataset(4, 16, rng);
    std::vector<SynthCase> tr(ds.begin(), ds.begin() + 3), va(ds.begin() + 3, ds.end());
    ModelConfig mc = tiny_config(Version::V1);
    LegoNet model = build(mc, 3);
    TrainConfig cfg = smoke_config(10);
    cfg.patience = 0;
    cfg.lr = 1e-12;  // effectively frozen, so DSC cannot improve after epoch 0
    cfg.eta_min = 1e-13;
    TrainResult res = train(model, tr, va, cfg);
    CHECK(res.log.size() == 2);
    CHECK(res.best_epoch == 0);
}

TEST_CASE("identical seeds reproduce logs and weights bit-exactly") {
    Rng rng(3);
    auto ds = synth_tube_dataset(5, 16, rng);
    std::vector<SynthCase> tr(ds.begin(), ds.begin() + 3), va(ds.begin() + 3, ds.end());
    ModelConfig mc = tiny_config(Version::V2);
    TrainConfig cfg = smoke_config(2);

    LegoNet m1 = build(mc, 7);
    TrainResult r1 = train(m1, tr, va, cfg);
    LegoNet m2 = build(mc, 7);
    TrainResult r2 = train(m2, tr, va, cfg);
    CHECK(r1.log_csv() == r2.log_csv());
    CHECK(param_hash(m1) == param_hash(m2));
}

TEST_CASE("cross validation partitions cases and aggregates by arithmetic mean") {
    Rng rng(4);
    auto ds = synth_tube_dataset(10, 16, rng);
    ModelConfig mc = tiny_config(Version::V1);
    TrainConfig cfg = smoke_config(1);
    cfg.patience = 1;
    CrossValResult cv = cross_validate(ds, mc, cfg);

    REQUIRE(cv.folds.size() == 5);
    std::set<std::string> seen;
    double hand_sum = 0;
    long n = 0;
    for (const auto& f : cv.folds) {
        CHECK(f.report.cases.size() == 2);
        for (const auto& c : f.report.cases) {
            CHECK(seen.insert(c.case_id).second);  // each case validates exactly once
            hand_sum += c.dsc;
            ++n;
        }
    }
    CHECK(n == 10);
    CHECK(cv.mean.dsc == doctest::Approx(hand_sum / 10.0).epsilon(1e-12));

    CHECK_THROWS(cross_validate({ds.begin(), ds.begin() + 3}, mc, cfg));
}
