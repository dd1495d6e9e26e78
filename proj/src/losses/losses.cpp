#include "maxl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "maxl/errors.hpp"

namespace maxl::losses {
namespace {

ag::Tensor as_rows(const ag::Tensor& t) {
  if (t.dim() == 1) return ag::reshape(t, {1, t.shape()[0]});
  return t;
}

void check_pair(const char* op, const ag::Tensor& pred, const ag::Tensor& target) {
  if (pred.shape() != target.shape() || pred.dim() < 1 || pred.dim() > 2 || pred.numel() == 0) {
    throw ShapeError(std::string(op) + ": prediction " + ag::shape_str(pred.shape()) +
                     " and target " + ag::shape_str(target.shape()) + " must be equal [N,C]");
  }
}

ag::Tensor clamp_probs(const ag::Tensor& p) {
  const ag::Tensor lower = ag::maximum(p, ag::Tensor::scalar(kProbFloor));
  // min(x, 1) == -max(-x, -1)
  return ag::neg(ag::maximum(ag::neg(lower), ag::Tensor::scalar(-1.0)));
}

}  // namespace

ag::Tensor focal_loss(const ag::Tensor& pred, const ag::Tensor& target, double gamma) {
  check_pair("focal_loss", pred, target);
  if (gamma < 0.0 || std::isnan(gamma)) {
    throw InvalidArgumentError("focal_loss: gamma must be >= 0, got " + std::to_string(gamma));
  }
  const ag::Tensor p = clamp_probs(as_rows(pred));
  const ag::Tensor y = as_rows(target);
  const ag::Tensor focus = ag::power(ag::sub(ag::Tensor::scalar(1.0), p), gamma);
  const ag::Tensor terms = ag::mul(ag::mul(y, focus), ag::log(p));
  return ag::scalar_mul(ag::sum(terms), -1.0 / static_cast<double>(p.shape()[0]));
}

ag::Tensor cross_entropy(const ag::Tensor& pred, const ag::Tensor& target) {
  check_pair("cross_entropy", pred, target);
  const ag::Tensor p = clamp_probs(as_rows(pred));
  const ag::Tensor y = as_rows(target);
  const ag::Tensor terms = ag::mul(y, ag::log(p));
  return ag::scalar_mul(ag::sum(terms), -1.0 / static_cast<double>(p.shape()[0]));
}

ag::Tensor mask_softmax(const ag::Tensor& logits, const ag::Tensor& mask) {
  if (logits.shape() != mask.shape() || logits.dim() < 1 || logits.dim() > 2) {
    throw ShapeError("mask_softmax: logits " + ag::shape_str(logits.shape()) + " and mask " +
                     ag::shape_str(mask.shape()) + " must be equal [K] or [N,K]");
  }
  const ag::Tensor x = as_rows(logits);
  const ag::Tensor m = as_rows(mask).detach();
  const std::size_t rows = x.shape()[0];
  const std::size_t width = x.shape()[1];

  // Per-row max over the support; a constant shift, so no gradient flows through it.
  std::vector<double> shift(rows);
  const auto xs = x.data();
  const auto ms = m.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double best = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t k = 0; k < width; ++k) {
      const double mk = ms[r * width + k];
      if (mk != 0.0 && mk != 1.0) throw InvalidArgumentError("mask_softmax: mask must be binary");
      if (mk == 1.0) {
        any = true;
        best = std::max(best, xs[r * width + k]);
      }
    }
    if (!any) throw EmptyMaskError("mask_softmax: row " + std::to_string(r) + " has an empty mask");
    shift[r] = best;
  }
  const ag::Tensor centred = ag::sub(x, ag::Tensor({rows, 1}, std::move(shift)));
  const ag::Tensor e = ag::mul(ag::exp(ag::mul(centred, m)), m);
  const ag::Tensor p = ag::div(e, ag::sum(e, 1, true));
  return logits.dim() == 1 ? ag::reshape(p, logits.shape()) : p;
}

ag::Tensor entropy_reg(const ag::Tensor& aux_preds) {
  if (aux_preds.dim() != 2 || aux_preds.shape()[0] == 0 || aux_preds.shape()[1] == 0) {
    throw ShapeError("entropy_reg: expected non-empty [N,K] predictions, got " +
                     ag::shape_str(aux_preds.shape()));
  }
  const ag::Tensor p = ag::mean(aux_preds, 0, false);
  // 0 log 0 == 0: the floor only guards the log argument.
  return ag::sum(ag::mul(p, ag::log(ag::maximum(p, ag::Tensor::scalar(kProbFloor)))));
}

}  // namespace maxl::losses
