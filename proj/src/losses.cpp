#include "legonet/losses.hpp"

#include <stdexcept>

namespace lego {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

} // namespace

Tensor dice_loss(const Tensor& pred, const Tensor& target, double smooth) {
    require_same_shape(pred, target, "dice_loss");
    Tensor s = Tensor::scalar(smooth);
    Tensor num = add(mul(Tensor::scalar(2.0), sum_all(mul(pred, target))), s);
    Tensor den = add(add(sum_all(mul(pred, pred)), sum_all(mul(target, target))), s);
    // (den - num) / den rather than 1 - num/den: one rounding step, so the
    // worked example lands on 1/7 to the last bit
    return div(sub(den, num), den);
}

Tensor focal_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg) {
    require_same_shape(pred, target, "focal_loss");
    Tensor p = clamp(pred, cfg.clamp_delta, 1.0 - cfg.clamp_delta);
    Tensor one = Tensor::scalar(1.0);
    Tensor pos_term = mul(mul(target, pow_op(sub(one, p), cfg.psi_focal)), log_op(p));
    Tensor neg_term = mul(mul(sub(one, target), pow_op(p, cfg.psi_focal)), log_op(sub(one, p)));
    Tensor total =
        add(mul(Tensor::scalar(cfg.epsilon_focal), sum_all(pos_term)), sum_all(neg_term));
    return neg(total);
}

Tensor combined_loss(const Tensor& logits, const Tensor& target, const LossConfig& cfg) {
    require_same_shape(logits, target, "combined_loss");
    Tensor p = sigmoid(logits);
    return add(dice_loss(p, target, cfg.smooth), focal_loss(p, target, cfg));
}

} // namespace lego
