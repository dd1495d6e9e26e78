#include <array>
#include <functional>
#include <random>
#include <set>

#include "../support/gradcheck.hpp"
#include "../support/oracles.hpp"
#include "doctest.h"
#include "maxl/autograd.hpp"
#include "maxl/errors.hpp"

using namespace maxl;
using maxl::ag::Tensor;
using maxl::testing::random_tensor;
using maxl::testing::rel_error;

using Fn = maxl::testing::OpFn;
using maxl::testing::grad_check;

TEST_CASE("record: add and matmul shapes") {
  const Tensor t({2}, {1, 2});
  const Tensor u({2}, {10, 20});
  const Tensor s = ag::record(ag::OpKind::Add, {t, u});
  CHECK(s.shape() == ag::Shape{2});
  CHECK(s.at(0) == 11);
  CHECK(s.at(1) == 22);

  const Tensor a = Tensor::ones({2, 3});
  const Tensor b = Tensor::ones({3, 4});
  CHECK(ag::record(ag::OpKind::MatMul, {a, b}).shape() == ag::Shape{2, 4});
  CHECK_THROWS_AS(ag::record(ag::OpKind::MatMul, {a, Tensor::ones({2, 4})}), ShapeError);
  try {
    ag::matmul(a, Tensor::ones({2, 4}));
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2,4]") != std::string::npos);
  }
  CHECK_THROWS_AS(ag::record(ag::OpKind::Leaf, {a}), UnknownOpError);
  CHECK_THROWS_AS(ag::record(static_cast<ag::OpKind>(999), {a}), UnknownOpError);
  CHECK_THROWS_AS(ag::add(Tensor::ones({2, 3}), Tensor::ones({4})), ShapeError);
}

TEST_CASE("backward: elementary examples") {
  ag::Tape tape;
  ag::TapeScope scope(tape);
  const Tensor x = tape.leaf(Tensor({3}, {1, 2, 3}));
  const ag::GradMap g = ag::backward(ag::sum(ag::mul(x, x)), true);
  CHECK(g.at(x).to_vector() == std::vector<double>{2, 4, 6});

  const Tensor y = tape.leaf(Tensor({4}, {-3, 0.5, 7, 2}));
  const ag::GradMap gy = ag::backward(ag::sum(y), true);
  CHECK(gy.at(y).to_vector() == std::vector<double>{1, 1, 1, 1});
}

TEST_CASE("backward: error paths and retain semantics") {
  ag::Tape tape;
  ag::TapeScope scope(tape);
  const Tensor x = tape.leaf(Tensor({2}, {1, 2}));
  CHECK_THROWS_AS(ag::backward(ag::mul(x, x), false), NonScalarLossError);
  CHECK_THROWS_AS(ag::backward(Tensor::scalar(1.0), false), DetachedLossError);

  const Tensor loss = ag::sum(ag::mul(x, x));
  ag::backward(loss, true);
  CHECK_NOTHROW(ag::backward(loss, true));
  ag::backward(loss, false);
  CHECK_THROWS_AS(ag::backward(loss, false), DetachedLossError);
}

TEST_CASE("backward: retained gradients are tape nodes") {
  ag::Tape tape;
  ag::TapeScope scope(tape);
  const Tensor x = tape.leaf(Tensor({3}, {0.5, -1.0, 2.0}));
  const Tensor c = tape.leaf(Tensor({3}, {1, 1, 1}));
  // loss depends on c only linearly: its gradient is a constant.
  const Tensor loss = ag::add(ag::sum(ag::power(x, 3.0)), ag::sum(c));
  const ag::GradMap g = ag::backward(loss, true);
  CHECK(tape.owns(g.at(x)));
  CHECK(tape.owns(g.at(c)));
  // d/dx sum(3x^2) = 6x
  const ag::GradMap gg = ag::backward(ag::sum(g.at(x)), true, std::vector<Tensor>{x});
  CHECK(rel_error(gg.at(x), Tensor({3}, {3.0, -6.0, 12.0})) < 1e-12);
}

TEST_CASE("finite_diff_grad examples") {
  const auto sq = [](const Tensor& t) {
    double s = 0;
    for (double v : t.data()) s += v * v;
    return s;
  };
  const Tensor g = ag::finite_diff_grad(sq, Tensor({2}, {1, 2}), 1e-5);
  CHECK(g.at(0) == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(g.at(1) == doctest::Approx(4.0).epsilon(1e-8));
  const Tensor z = ag::finite_diff_grad([](const Tensor&) { return 4.2; }, Tensor({3}, {1, 2, 3}), 1e-5);
  CHECK(z.to_vector() == std::vector<double>{0, 0, 0});
  CHECK_THROWS_AS(ag::finite_diff_grad(sq, Tensor({1}, {1}), 0.0), InvalidArgumentError);
}

TEST_CASE("gradient oracle: every op kind") {
  std::mt19937_64 rng(11);
  const double tol = 1e-4;
  auto r = [&](ag::Shape s, double lo = -1.0, double hi = 1.0) {
    return random_tensor(rng, std::move(s), lo, hi);
  };
  using V = std::vector<Tensor>;

  CHECK(grad_check([](const V& v) { return ag::add(v[0], v[1]); }, {r({3, 4}), r({3, 4})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::add(v[0], v[1]); }, {r({3, 4}), r({4})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::sub(v[0], v[1]); }, {r({2, 3, 2}), r({3, 1})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::mul(v[0], v[1]); }, {r({5}), r({5})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::div(v[0], v[1]); }, {r({4, 2}), r({4, 2}, 0.5, 2.0)}) < tol);
  for (int ta = 0; ta < 2; ++ta) {
    for (int tb = 0; tb < 2; ++tb) {
      const Tensor a = ta ? r({4, 3}) : r({3, 4});
      const Tensor b = tb ? r({2, 4}) : r({4, 2});
      CHECK(grad_check([=](const V& v) { return ag::matmul(v[0], v[1], ta, tb); }, {a, b}) < tol);
    }
  }
  CHECK(grad_check([](const V& v) { return ag::conv2d(v[0], v[1], 1); }, {r({2, 2, 5, 4}), r({3, 2, 3, 3})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::conv2d(v[0], v[1], 0); }, {r({1, 3, 4, 4}), r({2, 3, 2, 2})}) < tol);
  {
    // Keep pre-activations away from the kink.
    std::vector<double> vals = r({12}).to_vector();
    for (double& x : vals) x = x >= 0 ? x + 0.01 : x - 0.01;
    CHECK(grad_check([](const V& v) { return ag::relu(v[0]); }, {Tensor({3, 4}, vals)}) < tol);
  }
  CHECK(grad_check([](const V& v) { return ag::log(v[0]); }, {r({6}, 0.2, 3.0)}) < tol);
  CHECK(grad_check([](const V& v) { return ag::exp(v[0]); }, {r({6})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::power(v[0], 3.0); }, {r({6})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::power(v[0], 2.5); }, {r({6}, 0.1, 2.0)}) < tol);
  CHECK(grad_check([](const V& v) { return ag::sum(v[0]); }, {r({3, 3})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::sum(v[0], 1, false); }, {r({3, 4, 2})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::mean(v[0]); }, {r({7})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::mean(v[0], 0, true); }, {r({3, 2})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::softmax(v[0]); }, {r({3, 5}, -2, 2)}) < tol);
  CHECK(grad_check([](const V& v) { return ag::reshape(v[0], {6, 2}); }, {r({3, 4})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::max_pool2d(v[0], 2); }, {r({2, 2, 4, 5})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::maximum(v[0], v[1]); }, {r({8}), r({8})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::maximum(v[0], v[1]); }, {r({2, 4}), Tensor::scalar(0.1)}) < tol);
  CHECK(grad_check([](const V& v) { return ag::scalar_mul(v[0], -2.5); }, {r({4})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::sum_to(v[0], {1, 3}); }, {r({4, 3})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::broadcast_to(v[0], {2, 4, 3}); }, {r({4, 1})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::permute(v[0], {2, 0, 1}); }, {r({2, 3, 4})}) < tol);
  CHECK(grad_check([](const V& v) { return ag::im2col(v[0], 2, 3, 1); }, {r({2, 2, 3, 3})}) < tol);
}

TEST_CASE("gradient oracle: random instances cover every op kind") {
  std::mt19937_64 rng(12);
  std::set<ag::OpKind> seen;
  for (int round = 0; round < 5; ++round) {
    for (const auto& c : maxl::testing::random_op_cases(rng)) {
      INFO(ag::op_name(c.kind));
      CHECK(grad_check(c.fn, c.inputs) <= 1e-4);
      seen.insert(c.kind);
    }
  }
  // Every kind except the leaf marker.
  CHECK(seen.size() == static_cast<std::size_t>(ag::OpKind::Conv2dWeightGrad));
}

TEST_CASE("second order: backward through a virtual gradient step") {
  // F(w) = sum(softmax(W2 relu(W1 u))^2) evaluated at w - alpha * grad h(w).
  std::mt19937_64 rng(5);
  const Tensor w0 = random_tensor(rng, {4, 3});
  const Tensor u = random_tensor(rng, {3, 2});
  const double alpha = 0.3;
  auto h = [&](const Tensor& w) { return ag::sum(ag::power(ag::exp(ag::matmul(w, u)), 2.0)); };
  auto outer = [&](const Tensor& w) { return ag::sum(ag::log(ag::softmax(ag::matmul(w, u, false, false)))); };

  ag::Tape tape;
  ag::TapeScope scope(tape);
  const Tensor w = tape.leaf(w0);
  const ag::GradMap inner = ag::backward(h(w), true, std::vector<Tensor>{w});
  const Tensor stepped = ag::sub(w, ag::scalar_mul(inner.at(w), alpha));
  const ag::GradMap g = ag::backward(outer(stepped), false, std::vector<Tensor>{w});

  const Tensor fd = ag::finite_diff_grad(
      [&](const Tensor& wv) {
        ag::Tape t2;
        ag::TapeScope s2(t2);
        const Tensor wl = t2.leaf(wv);
        const ag::GradMap gi = ag::backward(h(wl), false, std::vector<Tensor>{wl});
        ag::NoGradScope ng;
        return outer(ag::sub(wv, ag::scalar_mul(gi.at(wl), alpha))).item();
      },
      w0, 1e-5);
  CHECK(rel_error(g.at(w), fd) < 1e-6);
}

TEST_CASE("replay determinism") {
  auto run = [] {
    std::mt19937_64 rng(9);
    const Tensor x0 = random_tensor(rng, {2, 1, 5, 5});
    const Tensor k0 = random_tensor(rng, {3, 1, 3, 3});
    ag::Tape tape;
    ag::TapeScope scope(tape);
    const Tensor k = tape.leaf(k0);
    const Tensor loss = ag::sum(ag::softmax(ag::reshape(ag::max_pool2d(ag::conv2d(x0, k, 1), 2), {2, 12})));
    const ag::GradMap g = ag::backward(ag::mul(loss, loss), false);
    return std::make_pair(loss.item(), g.at(k).to_vector());
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("no-grad scope and precision switch") {
  ag::Tape tape;
  ag::TapeScope scope(tape);
  const Tensor x = tape.leaf(Tensor({2}, {1, 2}));
  {
    ag::NoGradScope ng;
    const Tensor y = ag::mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(ag::mul(x, x).requires_grad());

  std::mt19937_64 rng(1);
  const Tensor a = random_tensor(rng, {8, 8});
  const Tensor b = random_tensor(rng, {8, 8});
  const Tensor d = ag::matmul(a, b);
  ag::set_matmul_precision(ag::Precision::F32);
  const Tensor f = ag::matmul(a, b);
  ag::set_matmul_precision(ag::Precision::F64);
  CHECK(rel_error(d, f) < 1e-5);
}

TEST_CASE("matmul bits do not depend on buffer addresses") {
  std::mt19937_64 rng(41);
  const std::vector<std::array<std::size_t, 3>> sizes = {
      {1, 7, 5}, {3, 4, 1}, {4, 5, 6}, {5, 6, 7}, {9, 30, 25}, {40, 33, 17}, {100, 288, 64}, {1, 300, 40}};
  auto offset = [](const Tensor& t) { return reinterpret_cast<std::uintptr_t>(t.data().data()) % 64; };
  for (const auto& [m, k, n] : sizes) {
    const Tensor a = random_tensor(rng, {m, k});
    const Tensor b = random_tensor(rng, {k, n});
    // Copies of both operands at every 16-byte offset within a cache line.
    std::vector<Tensor> as, bs;
    std::set<std::uintptr_t> a_offsets, b_offsets;
    std::vector<std::vector<char>> junk;
    for (std::size_t tries = 0; tries < 4000 && (a_offsets.size() < 4 || b_offsets.size() < 4); ++tries) {
      junk.emplace_back(8 + 8 * (tries % 7));
      as.emplace_back(a.shape(), a.to_vector());
      bs.emplace_back(b.shape(), b.to_vector());
      a_offsets.insert(offset(as.back()));
      b_offsets.insert(offset(bs.back()));
    }
    if (a.numel() < 4096) CHECK(a_offsets.size() >= 2);  // large blocks come from mmap
    const auto ref = ag::matmul(a, b).to_vector();
    const auto ref_t = ag::matmul(b, a, true, true).to_vector();
    // Interleaved junk also moves the freshly allocated result buffer around.
    for (std::size_t i = 0; i < as.size(); i += 1 + as.size() / 64) {
      junk.emplace_back(16 * (i % 5) + 8);
      CHECK(ag::matmul(as[i], bs[i]).to_vector() == ref);
      junk.emplace_back(16 * (i % 3) + 24);
      CHECK(ag::matmul(bs[i], as[i], true, true).to_vector() == ref_t);
    }
  }
}

TEST_CASE("conv2d: direct kernel matches the im2col composite") {
  std::mt19937_64 rng(71);
  struct Geo {
    std::size_t b, c, h, w, o, k, pad;
  };
  // Includes shapes large enough for the blocked product path.
  for (const Geo g : {Geo{2, 2, 5, 4, 3, 3, 1}, Geo{1, 3, 4, 4, 2, 2, 0}, Geo{3, 1, 7, 6, 4, 3, 2},
                      Geo{2, 8, 9, 9, 16, 3, 1}, Geo{1, 1, 2, 2, 1, 2, 1}}) {
    const Tensor x = random_tensor(rng, {g.b, g.c, g.h, g.w});
    const Tensor k = random_tensor(rng, {g.o, g.c, g.k, g.k});
    const std::size_t oh = g.h + 2 * g.pad - g.k + 1, ow = g.w + 2 * g.pad - g.k + 1;
    const Tensor cols = ag::im2col(x, g.k, g.k, g.pad);
    const Tensor flat = ag::matmul(cols, ag::reshape(k, {g.o, g.c * g.k * g.k}), false, true);
    const Tensor ref = ag::permute(ag::reshape(flat, {g.b, oh, ow, g.o}), {0, 3, 1, 2});
    const Tensor got = ag::conv2d(x, k, g.pad);
    REQUIRE(got.shape() == ref.shape());
    CHECK(rel_error(got, ref) < 1e-13);

    // Adjoint identities: <conv(x,k), y> = <x, dx(y,k)> = <k, dw(x,y)>.
    const Tensor y = random_tensor(rng, ref.shape());
    const double lhs = ag::sum(ag::mul(got, y)).item();
    const double via_x = ag::sum(ag::mul(x, ag::conv2d_input_grad(y, k, x.shape(), g.pad))).item();
    const double via_w = ag::sum(ag::mul(k, ag::conv2d_weight_grad(x, y, k.shape(), g.pad))).item();
    CHECK(std::abs(lhs - via_x) <= 1e-12 * (1.0 + std::abs(lhs)));
    CHECK(std::abs(lhs - via_w) <= 1e-12 * (1.0 + std::abs(lhs)));
  }
  CHECK_THROWS_AS(ag::conv2d_input_grad(Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({2, 1, 3, 3}),
                                        {1, 1, 4, 4}, 1),
                  ShapeError);
}
