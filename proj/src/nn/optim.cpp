#include <cmath>
#include <numbers>
#include <string>

#include "maxl/errors.hpp"
#include "maxl/nn.hpp"

namespace maxl::nn {

OptimizerState make_optimizer(OptimizerKind kind, double lr, double momentum,
                              double weight_decay) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw InvalidArgumentError("optimizer: learning rate must be finite and >= 0");
  }
  if (momentum < 0.0 || momentum >= 1.0 || weight_decay < 0.0) {
    throw InvalidArgumentError("optimizer: momentum must be in [0,1) and weight decay >= 0");
  }
  OptimizerState opt;
  opt.kind = kind;
  opt.lr = lr;
  opt.momentum = kind == OptimizerKind::MomentumSgd ? momentum : 0.0;
  opt.weight_decay = weight_decay;
  return opt;
}

std::vector<Tensor> gradients_for(const ParamSet& params, std::span<const Tensor> bound,
                                  const ag::GradMap& grads) {
  if (bound.size() != params.size()) {
    throw InvalidArgumentError("gradients_for: bound view does not match the parameter set");
  }
  std::vector<Tensor> out;
  out.reserve(bound.size());
  for (std::size_t i = 0; i < bound.size(); ++i) {
    if (!grads.contains(bound[i])) {
      throw MissingGradientError("no gradient for parameter '" + params.name(i) + "'");
    }
    out.push_back(grads.at(bound[i]));
  }
  return out;
}

void sgd_step(ParamSet& params, std::span<const Tensor> grads, OptimizerState& opt) {
  if (grads.size() != params.size()) {
    throw MissingGradientError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                               std::to_string(params.size()) + " parameters");
  }
  const bool momentum = opt.kind == OptimizerKind::MomentumSgd;
  if (momentum && opt.velocity.size() != params.size()) {
    opt.velocity.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      opt.velocity[i].assign(params.value(i).numel(), 0.0);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params.value(i);
    if (!grads[i].defined()) {
      throw MissingGradientError("no gradient for parameter '" + params.name(i) + "'");
    }
    if (grads[i].shape() != p.shape()) {
      throw ShapeError("sgd_step: gradient of '" + params.name(i) + "' has shape " +
                       ag::shape_str(grads[i].shape()) + ", parameter " +
                       ag::shape_str(p.shape()));
    }
    const double wd = params.decay(i) ? opt.weight_decay : 0.0;
    const auto ps = p.data();
    const auto gs = grads[i].data();
    std::vector<double> next(ps.size());
    for (std::size_t j = 0; j < ps.size(); ++j) {
      double step = gs[j] + wd * ps[j];
      if (momentum) {
        double& v = opt.velocity[i][j];
        v = opt.momentum * v + step;
        step = v;
      }
      next[j] = ps[j] - opt.lr * step;
    }
    params.set_value(i, Tensor(p.shape(), std::move(next)));
  }
}

void sgd_step(ParamSet& params, std::span<const Tensor> bound, const ag::GradMap& grads,
              OptimizerState& opt) {
  const std::vector<Tensor> g = gradients_for(params, bound, grads);
  sgd_step(params, g, opt);
}

std::vector<Tensor> virtual_sgd_step(std::span<const Tensor> bound, const Tensor& loss,
                                     double alpha) {
  const ag::GradMap grads = ag::backward(loss, true, bound);
  std::vector<Tensor> out;
  out.reserve(bound.size());
  for (const Tensor& p : bound) {
    out.push_back(ag::sub(p, ag::scalar_mul(grads.at(p), alpha)));
  }
  return out;
}

double schedule_lr(const LrSchedule& sched, std::size_t epoch) {
  switch (sched.kind) {
    case ScheduleKind::StepHalving: {
      const std::size_t period = sched.period == 0 ? 1 : sched.period;
      return sched.base * std::pow(0.5, static_cast<double>(epoch / period));
    }
    case ScheduleKind::Cosine: {
      const double horizon = static_cast<double>(sched.horizon == 0 ? 1 : sched.horizon);
      const double t = std::min(static_cast<double>(epoch), horizon);
      const double lr = sched.base * 0.5 * (1.0 + std::cos(std::numbers::pi * t / horizon));
      return std::min(sched.base, std::max(lr, kMinCosineLr));
    }
    case ScheduleKind::Constant:
      break;
  }
  return sched.base;
}

}  // namespace maxl::nn
