#pragma once

#include "mutr/autodiff.hpp"

namespace mutr {

// Combined segmentation loss: sum over classes of
//   bce_weight * BCE(sigmoid(logits_c), target_c) + DiceLoss_c
// with the numerically stable logit-form BCE averaged over pixels and
// DiceLoss = 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps) over the whole
// batch. logits and target share shape [N,C,H,W]; target values are 0 or 1.
Var bce_dice_loss(const Var& logits, const Tensor& target,
                  double bce_weight = 0.5, double eps = 1e-5);

}  // namespace mutr
