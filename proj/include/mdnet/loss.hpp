#pragma once

#include "mdnet/config.hpp"
#include "mdnet/model.hpp"

namespace mdnet {

// BCE-from-logits (mean over pixels, numerically stable) plus soft Dice loss
//   1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s),  p = sigmoid(logits).
// The smoothing constant keeps empty-mask slices well-defined.
inline Tensor bce_dice_loss(const Tensor& logits, const Tensor& target, real smooth = 1.0) {
  if (logits.shape() != target.shape())
    shape_fail("bce_dice_loss",
               shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  for (real v : target.vec())
    if (v != 0.0 && v != 1.0)
      throw ConfigError("bce_dice_loss: target must be binary, found " + std::to_string(v));

  Tensor bce = ops::bce_with_logits_mean(logits, target);

  Tensor p = ops::sigmoid(logits);
  Tensor inter = ops::sum_all(ops::mul(p, target));
  Tensor psum = ops::sum_all(p);
  real gsum = 0.0;
  for (real v : target.vec()) gsum += v;
  Tensor numer = ops::affine(inter, 2.0, smooth);
  Tensor denom = ops::affine(psum, 1.0, gsum + smooth);
  Tensor dice = ops::affine(ops::s_div(numer, denom), -1.0, 1.0);

  return ops::add(bce, dice);
}

// Deep supervision: every head is trained.
inline Tensor deep_supervision_loss(const SegOutputs& outputs, const Tensor& target,
                                    const std::array<real, 3>& weights, real smooth = 1.0) {
  std::vector<Tensor> terms;
  std::vector<real> w;
  for (int i = 0; i < 3; ++i) {
    terms.push_back(bce_dice_loss(outputs.head(i), target, smooth));
    w.push_back(weights[size_t(i)]);
  }
  return ops::s_wsum(terms, w);
}

}  // namespace mdnet
