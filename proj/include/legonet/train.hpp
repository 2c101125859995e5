#ifndef LEGONET_TRAIN_HPP
#define LEGONET_TRAIN_HPP

#include "legonet/losses.hpp"
#include "legonet/metrics.hpp"
#include "legonet/model.hpp"
#include "legonet/volume.hpp"

namespace lego {

struct TrainConfig {
    double lr = 1e-3;
    double weight_decay = 1e-5;
    double eta_min = 1e-5;
    long t0 = 25;              // cosine cycle length in epochs
    bool warm_restarts = true; // false: clamp to the final cycle value after t0
    long max_epochs = 100;
    long patience = 25;
    long folds = 5;
    long batch_size = 2;
    uint64_t seed = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void validate() const;
};

struct AdamwState {
    long step = 0;
    std::vector<std::vector<double>> m, v;  // one slot per registry entry
};

AdamwState make_adamw_state(const ParamRegistry& params);

void zero_grads(ParamRegistry& params);

// Decoupled weight decay: theta -= lr_t * (m_hat/(sqrt(v_hat)+eps) + wd*theta).
void adamw_step(ParamRegistry& params, AdamwState& state, double lr_t, const TrainConfig& cfg);

// Cosine annealing with warm restarts; t counts epochs within repeating
// cycles of length t0.
double cosine_lr(double t, const TrainConfig& cfg);

struct EpochLog {
    long epoch = 0;
    double lr = 0, train_loss = 0, val_dsc = 0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    long best_epoch = -1;
    double best_val_dsc = -1;
    std::vector<std::vector<double>> best_params;  // registry order snapshot
    std::string log_csv() const;
};

void restore_params(LegoNet& model, const std::vector<std::vector<double>>& snapshot);

// Supervised loop: combined loss, AdamW, epoch-level cosine schedule, early
// stopping on validation DSC. Model ends up holding the best parameters.
TrainResult train(LegoNet& model, const std::vector<SynthCase>& train_cases,
                  const std::vector<SynthCase>& val_cases, const TrainConfig& cfg);

double validation_dsc(const LegoNet& model, const std::vector<SynthCase>& cases);

struct FoldResult {
    long fold = 0;
    MetricsReport report;
};

struct CrossValResult {
    std::vector<FoldResult> folds;
    CaseMetrics mean, stddev;
};

CrossValResult cross_validate(const std::vector<SynthCase>& dataset, const ModelConfig& mc,
                              const TrainConfig& cfg);

} // namespace lego

#endif
