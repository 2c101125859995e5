#include "legonet/ssl.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace lego {

void SSLConfig::validate() const {
    for (long g : grid)
        if (g < 1) throw std::invalid_argument("ssl config: grid factors must be positive");
    if (mask_ratio < 0 || mask_ratio > 1)
        throw std::invalid_argument("ssl config: mask_ratio must be in [0,1]");
    if (mask_patch_edge < 1)
        throw std::invalid_argument("ssl config: mask_patch_edge must be positive");
}

namespace {

std::array<long, 3> padded_shape_for(const std::array<long, 3>& sh,
                                     const std::array<long, 3>& grid) {
    std::array<long, 3> out;
    for (int a = 0; a < 3; ++a) out[a] = (sh[a] + grid[a] - 1) / grid[a] * grid[a];
    return out;
}

Volume pad_to(const Volume& v, const std::array<long, 3>& target) {
    if (v.shape == target) return v;
    Volume out = make_volume(target);
    out.spacing = v.spacing;
    out.origin_extent = v.origin_extent;
    out.domain = v.domain;
    for (long d = 0; d < v.shape[0]; ++d)
        for (long h = 0; h < v.shape[1]; ++h)
            for (long w = 0; w < v.shape[2]; ++w) out.at(d, h, w) = v.at(d, h, w);
    return out;
}

} // namespace

Volume apply_permutation(const Volume& v, const SSLConfig& cfg,
                         const std::vector<long>& permutation) {
    cfg.validate();
    if (static_cast<long>(permutation.size()) != cfg.n_patches())
        throw std::invalid_argument("apply_permutation: wrong permutation length");
    auto psh = padded_shape_for(v.shape, cfg.grid);
    Volume src = pad_to(v, psh);
    Volume out = src;
    std::array<long, 3> tile;
    for (int a = 0; a < 3; ++a) tile[a] = psh[a] / cfg.grid[a];

    for (long dst = 0; dst < cfg.n_patches(); ++dst) {
        long s = permutation[dst];
        std::array<long, 3> di{dst / (cfg.grid[1] * cfg.grid[2]),
                               (dst / cfg.grid[2]) % cfg.grid[1], dst % cfg.grid[2]};
        std::array<long, 3> si{s / (cfg.grid[1] * cfg.grid[2]), (s / cfg.grid[2]) % cfg.grid[1],
                               s % cfg.grid[2]};
        for (long d = 0; d < tile[0]; ++d)
            for (long h = 0; h < tile[1]; ++h)
                for (long w = 0; w < tile[2]; ++w)
                    out.at(di[0] * tile[0] + d, di[1] * tile[1] + h, di[2] * tile[2] + w) =
                        src.at(si[0] * tile[0] + d, si[1] * tile[1] + h, si[2] * tile[2] + w);
    }
    return out;
}

std::vector<long> inverse_permutation(const std::vector<long>& p) {
    std::vector<long> inv(p.size());
    for (size_t i = 0; i < p.size(); ++i) inv[static_cast<size_t>(p[i])] = static_cast<long>(i);
    return inv;
}

Volume partition_and_shuffle(const Volume& v, const SSLConfig& cfg, Rng& rng,
                             CorruptionRecord& record) {
    cfg.validate();
    record.permutation.resize(cfg.n_patches());
    std::iota(record.permutation.begin(), record.permutation.end(), 0L);
    rng.shuffle(record.permutation);
    record.padded_shape = padded_shape_for(v.shape, cfg.grid);
    return apply_permutation(v, cfg, record.permutation);
}

Volume apply_mask(const Volume& v, const SSLConfig& cfg, Rng& rng,
                  std::vector<double>& mask_out) {
    cfg.validate();
    Volume out = v;
    mask_out.assign(v.data.size(), 0.0);
    if (cfg.mask_ratio == 0.0) return out;

    long e = cfg.mask_patch_edge;
    std::array<long, 3> cells;
    for (int a = 0; a < 3; ++a) cells[a] = (v.shape[a] + e - 1) / e;
    std::vector<long> order(cells[0] * cells[1] * cells[2]);
    std::iota(order.begin(), order.end(), 0L);
    rng.shuffle(order);

    double total = static_cast<double>(v.numel());
    double masked = 0;
    for (long cell : order) {
        if (masked / total >= cfg.mask_ratio) break;
        long cd = cell / (cells[1] * cells[2]), ch = (cell / cells[2]) % cells[1],
             cw = cell % cells[2];
        for (long d = cd * e; d < std::min((cd + 1) * e, v.shape[0]); ++d)
            for (long h = ch * e; h < std::min((ch + 1) * e, v.shape[1]); ++h)
                for (long w = cw * e; w < std::min((cw + 1) * e, v.shape[2]); ++w) {
                    out.at(d, h, w) = 0.0;
                    mask_out[(d * v.shape[1] + h) * v.shape[2] + w] = 1.0;
                    masked += 1.0;
                }
    }
    return out;
}

Volume corrupt(const Volume& v, const SSLConfig& cfg, Rng& rng, CorruptionRecord& record) {
    Volume shuffled = partition_and_shuffle(v, cfg, rng, record);
    return apply_mask(shuffled, cfg, rng, record.mask);
}

Tensor reconstruction_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw std::invalid_argument("reconstruction_loss: shape mismatch " +
                                    shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    long n = pred.numel();
    const double* pd = pred.data().data();
    const double* td = target.data().data();
    double acc = 0;
    for (long i = 0; i < n; ++i) {
        double d = pd[i] - td[i];
        acc += d * d;
    }
    std::vector<double> out{acc / static_cast<double>(n)};
    return make_custom_op({1}, std::move(out), {pred, target}, [n](Node& self) {
        Node& np = *self.parents[0];
        Node& nt = *self.parents[1];
        double g = self.grad[0] * 2.0 / static_cast<double>(n);
        const double* pd2 = np.data.data();
        const double* td2 = nt.data.data();
        if (np.requires_grad) {
            np.ensure_grad();
            for (long i = 0; i < n; ++i) np.grad[i] += g * (pd2[i] - td2[i]);
        }
        if (nt.requires_grad) {
            nt.ensure_grad();
            for (long i = 0; i < n; ++i) nt.grad[i] -= g * (pd2[i] - td2[i]);
        }
    });
}

LegoNet build_pretrain_model(const ModelConfig& mc, uint64_t seed) {
    return build(mc, seed, HeadKind::Reconstruction);
}

double pretrain_epoch(LegoNet& model, const std::vector<Volume>& volumes, const SSLConfig& cfg,
                      AdamwState& opt, const TrainConfig& tcfg, long epoch) {
    if (volumes.empty()) throw std::invalid_argument("pretrain_epoch: empty dataset");
    double lr_t = cosine_lr(static_cast<double>(epoch), tcfg);
    double loss_sum = 0;
    Rng base(cfg.seed);
    for (size_t i = 0; i < volumes.size(); ++i) {
        Rng crng = base.stream(static_cast<uint64_t>(epoch)).stream(i);
        CorruptionRecord rec;
        Volume corrupted = corrupt(volumes[i], cfg, crng, rec);
        Volume target = pad_to(volumes[i], rec.padded_shape);

        const auto& sh = corrupted.shape;
        Tensor x = Tensor::from({1, 1, sh[0], sh[1], sh[2]}, corrupted.data);
        Tensor y = Tensor::from({1, 1, sh[0], sh[1], sh[2]}, target.data);
        zero_grads(model.params);
        Tensor loss = reconstruction_loss(forward(model, x), y);
        backward(loss);
        adamw_step(model.params, opt, lr_t, tcfg);
        loss_sum += loss.item();
    }
    return loss_sum / static_cast<double>(volumes.size());
}

} // namespace lego
