#ifndef LEGONET_LOSSES_HPP
#define LEGONET_LOSSES_HPP

#include "legonet/tensor.hpp"

namespace lego {

struct LossConfig {
    double epsilon_focal = 1.0;   // precision/recall trade-off weight
    double psi_focal = 2.0;       // focusing exponent
    double smooth = 1.0;          // dice denominator guard
    double clamp_delta = 1e-7;    // probability clamp for log stability
};

// 1 - (2*sum(p*y) + smooth) / (sum(p^2) + sum(y^2) + smooth)
Tensor dice_loss(const Tensor& pred, const Tensor& target, double smooth = 1.0);

// sum over voxels of -eps*y*(1-p)^psi*log(p) - (1-y)*p^psi*log(1-p)
Tensor focal_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg = {});

// dice_loss(sigmoid(logits), y) + focal_loss(sigmoid(logits), y)
Tensor combined_loss(const Tensor& logits, const Tensor& target, const LossConfig& cfg = {});

} // namespace lego

#endif
