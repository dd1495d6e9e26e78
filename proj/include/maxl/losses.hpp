#pragma once

#include "maxl/autograd.hpp"

namespace maxl::losses {

struct LossConfig {
  double gamma = 2.0;   // focal focusing parameter
  double lambda = 0.2;  // weight of the entropy regularizer in the meta objective
};

// Probabilities are clamped into [kProbFloor, 1] before any log.
inline constexpr double kProbFloor = 1e-12;

// Batch mean of sum_c -y_c (1 - p_c)^gamma log p_c over rows of [N, C]
// predictions `pred` and (possibly soft) targets `target`.
ag::Tensor focal_loss(const ag::Tensor& pred, const ag::Tensor& target, double gamma);

// Batch mean of sum_c -y_c log p_c.
ag::Tensor cross_entropy(const ag::Tensor& pred, const ag::Tensor& target);

// Softmax restricted to the entries where `mask` is 1; exact zeros elsewhere.
// Works row-wise on [K] or [N, K] logits. Throws EmptyMaskError when a row of
// the mask has no support.
ag::Tensor mask_softmax(const ag::Tensor& logits, const ag::Tensor& mask);

// sum_k p_k log p_k of the batch-mean prediction p = mean_n aux[n]. Lies in
// [-log K, 0]; minimizing it pushes the mean prediction towards uniform.
ag::Tensor entropy_reg(const ag::Tensor& aux_preds);

}  // namespace maxl::losses
