#include "legonet/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace lego {

void TrainConfig::validate() const {
    if (!(eta_min > 0) || eta_min > lr)
        throw std::invalid_argument("train config: need 0 < eta_min <= lr");
    if (patience > max_epochs)
        throw std::invalid_argument("train config: patience exceeds max_epochs");
    if (folds < 2) throw std::invalid_argument("train config: folds must be >= 2");
    if (t0 < 1 || batch_size < 1 || max_epochs < 1)
        throw std::invalid_argument("train config: t0, batch_size, max_epochs must be positive");
}

AdamwState make_adamw_state(const ParamRegistry& params) {
    AdamwState st;
    st.m.reserve(params.entries.size());
    for (const auto& [name, t] : params.entries) {
        st.m.emplace_back(t.numel(), 0.0);
        st.v.emplace_back(t.numel(), 0.0);
    }
    return st;
}

void zero_grads(ParamRegistry& params) {
    for (auto& [name, t] : params.entries) t.zero_grad();
}

void adamw_step(ParamRegistry& params, AdamwState& state, double lr_t, const TrainConfig& cfg) {
    if (state.m.size() != params.entries.size())
        throw std::invalid_argument("adamw_step: state does not match registry");
    ++state.step;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.entries.size(); ++i) {
        Tensor& t = params.entries[i].second;
        auto& theta = t.data();
        const auto& g = t.grad();
        if (g.size() != theta.size())
            throw std::invalid_argument("adamw_step: missing gradient for " +
                                        params.entries[i].first);
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t k = 0; k < theta.size(); ++k) {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            double m_hat = m[k] / bc1;
            double v_hat = v[k] / bc2;
            theta[k] -= lr_t * (m_hat / (std::sqrt(v_hat) + cfg.eps) +
                                cfg.weight_decay * theta[k]);
        }
    }
}

double cosine_lr(double t, const TrainConfig& cfg) {
    double t0 = static_cast<double>(cfg.t0);
    double tc = cfg.warm_restarts ? std::fmod(t, t0) : std::min(t, t0);
    if (t > 0 && tc == 0) tc = t0;  // cycle boundary reports the floor before restarting
    return cfg.eta_min + 0.5 * (cfg.lr - cfg.eta_min) * (1.0 + std::cos(M_PI * tc / t0));
}

namespace {

std::pair<Tensor, Tensor> batch_from(const std::vector<SynthCase>& cases,
                                     const std::vector<long>& idx) {
    const auto& sh = cases[idx[0]].image.shape;
    long n = static_cast<long>(idx.size());
    std::vector<double> xs, ys;
    xs.reserve(n * sh[0] * sh[1] * sh[2]);
    ys.reserve(xs.capacity());
    for (long i : idx) {
        xs.insert(xs.end(), cases[i].image.data.begin(), cases[i].image.data.end());
        ys.insert(ys.end(), cases[i].mask.data.begin(), cases[i].mask.data.end());
    }
    return {Tensor::from({n, 1, sh[0], sh[1], sh[2]}, std::move(xs)),
            Tensor::from({n, 1, sh[0], sh[1], sh[2]}, std::move(ys))};
}

std::vector<std::vector<double>> snapshot_params(const LegoNet& model) {
    std::vector<std::vector<double>> out;
    out.reserve(model.params.entries.size());
    for (const auto& [name, t] : model.params.entries) out.push_back(t.data());
    return out;
}

} // namespace

void restore_params(LegoNet& model, const std::vector<std::vector<double>>& snapshot) {
    if (snapshot.size() != model.params.entries.size())
        throw std::invalid_argument("restore_params: snapshot does not match registry");
    for (size_t i = 0; i < snapshot.size(); ++i)
        model.params.entries[i].second.data() = snapshot[i];
}

double validation_dsc(const LegoNet& model, const std::vector<SynthCase>& cases) {
    if (cases.empty()) throw std::invalid_argument("validation_dsc: empty split");
    NoGradGuard ng;
    double total = 0;
    for (const auto& c : cases) {
        auto [x, y] = batch_from({c}, {0});
        Tensor logits = forward(model, x);
        std::vector<double> pred(logits.data().size());
        for (size_t i = 0; i < pred.size(); ++i) pred[i] = logits.data()[i] >= 0.0;
        total += dsc_precision_recall(pred, y.data()).dsc;
    }
    return total / static_cast<double>(cases.size());
}

TrainResult train(LegoNet& model, const std::vector<SynthCase>& train_cases,
                  const std::vector<SynthCase>& val_cases, const TrainConfig& cfg) {
    cfg.validate();
    if (train_cases.empty() || val_cases.empty())
        throw std::invalid_argument("train: empty split");

    AdamwState opt = make_adamw_state(model.params);
    TrainResult res;
    Rng base(cfg.seed);
    long since_best = 0;

    for (long epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng erng = base.stream(static_cast<uint64_t>(epoch));
        std::vector<long> order(train_cases.size());
        std::iota(order.begin(), order.end(), 0);
        erng.shuffle(order);

        double lr_t = cosine_lr(static_cast<double>(epoch), cfg);
        double loss_sum = 0;
        long n_batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<long> idx(order.begin() + start,
                                  order.begin() + std::min(order.size(),
                                                           start + cfg.batch_size));
            auto [x, y] = batch_from(train_cases, idx);
            zero_grads(model.params);
            Tensor loss = combined_loss(forward(model, x), y);
            backward(loss);
            adamw_step(model.params, opt, lr_t, cfg);
            loss_sum += loss.item();
            ++n_batches;
        }

        EpochLog row;
        row.epoch = epoch;
        row.lr = lr_t;
        row.train_loss = loss_sum / static_cast<double>(n_batches);
        row.val_dsc = validation_dsc(model, val_cases);
        res.log.push_back(row);

        if (row.val_dsc > res.best_val_dsc) {
            res.best_val_dsc = row.val_dsc;
            res.best_epoch = epoch;
            res.best_params = snapshot_params(model);
            since_best = 0;
        } else if (++since_best > cfg.patience) {
            break;
        }
    }
    restore_params(model, res.best_params);
    return res;
}

std::string TrainResult::log_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,lr,train_loss,val_dsc\n";
    for (const auto& r : log)
        os << r.epoch << "," << r.lr << "," << r.train_loss << "," << r.val_dsc << "\n";
    return os.str();
}

CrossValResult cross_validate(const std::vector<SynthCase>& dataset, const ModelConfig& mc,
                              const TrainConfig& cfg) {
    cfg.validate();
    if (static_cast<long>(dataset.size()) < cfg.folds)
        throw std::invalid_argument("cross_validate: fewer cases than folds");

    std::vector<long> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    Rng frng(cfg.seed);
    frng.shuffle(order);

    CrossValResult cv;
    std::vector<CaseMetrics> all;
    for (long f = 0; f < cfg.folds; ++f) {
        std::vector<SynthCase> tr, va;
        for (size_t i = 0; i < order.size(); ++i)
            (static_cast<long>(i) % cfg.folds == f ? va : tr).push_back(dataset[order[i]]);

        LegoNet model = build(mc, cfg.seed + static_cast<uint64_t>(f));
        train(model, tr, va, cfg);

        FoldResult fr;
        fr.fold = f;
        NoGradGuard ng;
        for (const auto& c : va) {
            auto [x, y] = batch_from({c}, {0});
            Tensor logits = forward(model, x);
            std::vector<double> pred(logits.data().size());
            for (size_t i = 0; i < pred.size(); ++i) pred[i] = logits.data()[i] >= 0.0;
            CaseMetrics cm;
            cm.case_id = c.case_id;
            OverlapScores s = dsc_precision_recall(pred, y.data());
            cm.dsc = s.dsc;
            cm.precision = s.precision;
            cm.recall = s.recall;
            bool pred_any = std::any_of(pred.begin(), pred.end(), [](double v) { return v != 0; });
            bool gt_any = std::any_of(y.data().begin(), y.data().end(),
                                      [](double v) { return v != 0; });
            if (pred_any && gt_any) {
                cm.hd95_mm = hd95(pred, y.data(), c.mask.shape, c.mask.spacing);
            } else if (!pred_any && !gt_any) {
                cm.hd95_mm = 0.0;
            } else {
                // one side empty: charge the volume diagonal as the worst case
                double dd = c.mask.shape[0] * c.mask.spacing[0];
                double dh = c.mask.shape[1] * c.mask.spacing[1];
                double dw = c.mask.shape[2] * c.mask.spacing[2];
                cm.hd95_mm = std::sqrt(dd * dd + dh * dh + dw * dw);
            }
            fr.report.cases.push_back(cm);
            all.push_back(cm);
        }
        cv.folds.push_back(std::move(fr));
    }
    MetricsReport pooled;
    pooled.cases = all;
    cv.mean = pooled.mean();
    cv.stddev = pooled.stddev();
    return cv;
}

} // namespace lego
