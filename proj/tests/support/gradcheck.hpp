#pragma once

// Central-difference checks of backward(), and random instances of every op
// kind for them.

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "maxl/autograd.hpp"
#include "oracles.hpp"

namespace maxl::testing {

using OpFn = std::function<ag::Tensor(const std::vector<ag::Tensor>&)>;

// Relative error between backward() and central differences (step `eps`),
// worst over the inputs. The output is contracted with a fixed random probe
// so that every output entry contributes.
inline double grad_check(const OpFn& f, const std::vector<ag::Tensor>& inputs,
                         std::uint64_t seed = 3, double eps = 1e-5) {
  std::mt19937_64 rng(seed);
  ag::Tensor probe;
  {
    ag::NoGradScope ng;
    probe = random_tensor(rng, f(inputs).shape());
  }
  auto scalar_of = [&](const std::vector<ag::Tensor>& xs) {
    return ag::sum(ag::mul(f(xs), probe));
  };

  ag::Tape tape;
  ag::TapeScope scope(tape);
  std::vector<ag::Tensor> leaves;
  for (const ag::Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  const ag::GradMap grads = ag::backward(scalar_of(leaves), false);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const ag::Tensor fd = ag::finite_diff_grad(
        [&](const ag::Tensor& xi) {
          ag::NoGradScope ng;
          std::vector<ag::Tensor> xs = inputs;
          xs[i] = xi;
          return scalar_of(xs).item();
        },
        inputs[i], eps);
    worst = std::max(worst, rel_error(grads.at(leaves[i]), fd));
  }
  return worst;
}

struct OpCase {
  ag::OpKind kind;
  OpFn fn;
  std::vector<ag::Tensor> inputs;
};

// Values at least `gap` away from zero, so kinks sit far outside the FD step.
inline ag::Tensor away_from_zero(std::mt19937_64& rng, ag::Shape shape, double gap = 0.01) {
  ag::Tensor t = random_tensor(rng, shape);
  std::vector<double> v = t.to_vector();
  for (double& x : v) x = x >= 0 ? x + gap : x - gap;
  return ag::Tensor(std::move(shape), std::move(v));
}

// Distinct values on a grid of spacing `gap`, randomly placed; max-pool
// windows then never hold near-ties.
inline ag::Tensor distinct_values(std::mt19937_64& rng, ag::Shape shape, double gap = 0.01) {
  std::vector<double> v(ag::shape_numel(shape));
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng);
  for (double& x : v) x = (x - static_cast<double>(v.size()) / 2.0) * gap;
  return ag::Tensor(std::move(shape), std::move(v));
}

// One random instance of every differentiable op kind.
inline std::vector<OpCase> random_op_cases(std::mt19937_64& rng) {
  using V = std::vector<ag::Tensor>;
  using ag::OpKind;
  std::uniform_int_distribution<std::size_t> dim(1, 4), small(2, 4);
  const auto r = [&](ag::Shape s, double lo = -1.0, double hi = 1.0) {
    return random_tensor(rng, std::move(s), lo, hi);
  };
  const std::size_t m = dim(rng), n = dim(rng), k = dim(rng);
  const std::size_t b = dim(rng), c = dim(rng) % 3 + 1, h = small(rng) + 1, w = small(rng) + 1;
  const std::size_t o = dim(rng) % 3 + 1, kh = dim(rng) % 3 + 1, kw = dim(rng) % 3 + 1;
  const std::size_t pad = dim(rng) % 2;
  const bool ta = dim(rng) % 2 == 0, tb = dim(rng) % 2 == 0;

  std::vector<OpCase> cases;
  cases.push_back({OpKind::Add, [](const V& v) { return ag::add(v[0], v[1]); }, {r({m, n}), r({n})}});
  cases.push_back({OpKind::Sub, [](const V& v) { return ag::sub(v[0], v[1]); }, {r({m, 1}), r({m, n})}});
  cases.push_back({OpKind::Mul, [](const V& v) { return ag::mul(v[0], v[1]); }, {r({m, n}), r({m, n})}});
  cases.push_back({OpKind::Div, [](const V& v) { return ag::div(v[0], v[1]); },
                   {r({m, n}), r({m, n}, 0.5, 2.0)}});
  cases.push_back({OpKind::MatMul, [=](const V& v) { return ag::matmul(v[0], v[1], ta, tb); },
                   {ta ? r({k, m}) : r({m, k}), tb ? r({n, k}) : r({k, n})}});
  cases.push_back({OpKind::Conv2d, [=](const V& v) { return ag::conv2d(v[0], v[1], pad); },
                   {r({b, c, h, w}), r({o, c, std::min(kh, h), std::min(kw, w)})}});
  cases.push_back({OpKind::Relu, [](const V& v) { return ag::relu(v[0]); }, {away_from_zero(rng, {m, n})}});
  cases.push_back({OpKind::Log, [](const V& v) { return ag::log(v[0]); }, {r({m, n}, 0.2, 3.0)}});
  cases.push_back({OpKind::Exp, [](const V& v) { return ag::exp(v[0]); }, {r({m, n})}});
  const double expo = std::uniform_real_distribution<double>(0.5, 3.5)(rng);
  cases.push_back({OpKind::Power, [=](const V& v) { return ag::power(v[0], expo); }, {r({m, n}, 0.2, 2.0)}});
  cases.push_back({OpKind::Sum, [](const V& v) { return ag::sum(v[0]); }, {r({m, n})}});
  cases.push_back({OpKind::Mean, [](const V& v) { return ag::mean(v[0], 1, false); }, {r({m, n, k})}});
  cases.push_back({OpKind::Softmax, [](const V& v) { return ag::softmax(v[0]); }, {r({m, n + 1}, -3.0, 3.0)}});
  cases.push_back({OpKind::Reshape, [=](const V& v) { return ag::reshape(v[0], {n, m}); }, {r({m, n})}});
  cases.push_back({OpKind::MaxPool, [](const V& v) { return ag::max_pool2d(v[0], 2); },
                   {distinct_values(rng, {b, c, 2 * (h / 2), 2 * (w / 2)})}});
  {
    const ag::Tensor a = r({m, n});
    std::vector<double> bv = a.to_vector();
    std::uniform_real_distribution<double> off(0.02, 0.5);
    std::bernoulli_distribution sign(0.5);
    for (double& x : bv) x += sign(rng) ? off(rng) : -off(rng);
    cases.push_back({OpKind::ElementwiseMax, [](const V& v) { return ag::maximum(v[0], v[1]); },
                     {a, ag::Tensor({m, n}, bv)}});
  }
  const double factor = std::uniform_real_distribution<double>(-3.0, 3.0)(rng);
  cases.push_back({OpKind::ScalarMul, [=](const V& v) { return ag::scalar_mul(v[0], factor); }, {r({m, n})}});
  cases.push_back({OpKind::SumAxis, [](const V& v) { return ag::sum(v[0], 0, true); }, {r({m, n})}});
  cases.push_back({OpKind::SumTo, [=](const V& v) { return ag::sum_to(v[0], {1, n}); }, {r({m, n})}});
  cases.push_back({OpKind::BroadcastTo, [=](const V& v) { return ag::broadcast_to(v[0], {k, m, n}); },
                   {r({m, 1})}});
  {
    auto index = std::make_shared<std::vector<std::size_t>>(k * 2);
    std::uniform_int_distribution<std::size_t> pick(0, m * n - 1);
    for (auto& i : *index) i = pick(rng);
    const std::shared_ptr<const std::vector<std::size_t>> idx = index;
    cases.push_back({OpKind::Gather, [=](const V& v) { return ag::gather(v[0], idx, {k * 2}); }, {r({m, n})}});
    cases.push_back({OpKind::ScatterAdd, [=](const V& v) { return ag::scatter_add(v[0], idx, {m, n}); },
                     {r({k * 2})}});
  }
  const std::size_t ikh = std::min(kh, h), ikw = std::min(kw, w);
  cases.push_back({OpKind::Im2Col, [=](const V& v) { return ag::im2col(v[0], ikh, ikw, pad); },
                   {r({b, c, h, w})}});
  {
    ag::ConvGeometry g;
    g.channels = c;
    g.height = h;
    g.width = w;
    g.kernel_h = ikh;
    g.kernel_w = ikw;
    g.pad = pad;
    ag::Shape cols_shape;
    {
      ag::NoGradScope ng;
      cols_shape = ag::im2col(ag::Tensor::zeros({b, c, h, w}), ikh, ikw, pad).shape();
    }
    cases.push_back({OpKind::Col2Im, [=](const V& v) { return ag::col2im(v[0], g, b); }, {r(cols_shape)}});
  }
  cases.push_back({OpKind::Permute, [](const V& v) { return ag::permute(v[0], {2, 0, 1}); }, {r({m, n, k})}});
  {
    const std::size_t ckh = std::min(kh, h), ckw = std::min(kw, w);
    const ag::Shape xs{b, c, h, w}, ws{o, c, ckh, ckw};
    const ag::Shape ys{b, o, h + 2 * pad - ckh + 1, w + 2 * pad - ckw + 1};
    cases.push_back({OpKind::Conv2dInputGrad,
                     [=](const V& v) { return ag::conv2d_input_grad(v[0], v[1], xs, pad); },
                     {r(ys), r(ws)}});
    cases.push_back({OpKind::Conv2dWeightGrad,
                     [=](const V& v) { return ag::conv2d_weight_grad(v[0], v[1], ws, pad); },
                     {r(xs), r(ys)}});
  }
  return cases;
}

}  // namespace maxl::testing
