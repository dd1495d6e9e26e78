#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "../support/oracles.hpp"
#include "doctest.h"
#include "maxl/errors.hpp"
#include "maxl/losses.hpp"
#include "maxl/nn.hpp"

using namespace maxl;
using maxl::ag::Tensor;
using maxl::testing::random_tensor;
using maxl::testing::rel_error;

namespace {

nn::ArchSpec tiny_mlp(std::size_t in, std::vector<std::size_t> hidden = {6, 5}) {
  nn::ArchSpec arch = nn::make_arch("mlp", in, 1, 1);
  arch.hidden = std::move(hidden);
  return arch;
}

nn::ParamSet scalar_params(double value) {
  nn::ParamSet p;
  p.add("theta", Tensor({1}, {value}), false);
  return p;
}

void check_rows_are_distributions(const Tensor& probs) {
  const std::size_t n = probs.shape()[0], k = probs.shape()[1];
  for (std::size_t r = 0; r < n; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      CHECK(probs.at(r * k + c) >= 0.0);
      total += probs.at(r * k + c);
    }
    CHECK(std::abs(total - 1.0) <= 1e-9);
  }
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("maxl_nn_" + name);
}

}  // namespace

TEST_CASE("build_multitask_net examples") {
  std::mt19937_64 rng(1);
  const auto conv = nn::build_multitask_net(nn::make_arch("convnet4", 1, 28, 28), 10, 30, 1);
  const auto out = conv.forward(conv.params.values(), random_tensor(rng, {2, 1, 28, 28}));
  CHECK(out.aux.shape() == ag::Shape{2, 30});
  CHECK(out.primary.shape() == ag::Shape{2, 10});
  CHECK(out.features.shape() == ag::Shape{2, 128});

  const auto mlp = nn::build_multitask_net(nn::make_arch("mlp", 1, 28, 28), 2, 4, 0);
  CHECK(mlp.forward(mlp.params.values(), random_tensor(rng, {3, 784})).aux.shape() ==
        ag::Shape{3, 4});

  CHECK(nn::build_multitask_net(conv.arch, 10, 30, 1).params == conv.params);
  CHECK_FALSE(nn::build_multitask_net(conv.arch, 10, 30, 2).params == conv.params);

  CHECK_THROWS_AS(nn::make_arch("resnet", 1, 28, 28), UnknownArchitectureError);
  nn::ArchSpec bad = conv.arch;
  bad.kind = "vgg16";
  CHECK_THROWS_AS(nn::build_multitask_net(bad, 10, 30, 1), UnknownArchitectureError);
}

TEST_CASE("initialization scale and decay flags") {
  const auto net = nn::build_multitask_net(nn::make_arch("mlp", 1, 28, 28), 10, 30, 3);
  const std::size_t w = net.params.index_of("trunk.fc0.w");
  const std::size_t b = net.params.index_of("trunk.fc0.b");
  double sq = 0.0;
  for (double v : net.params.value(w).data()) sq += v * v;
  const double stddev = std::sqrt(sq / static_cast<double>(net.params.value(w).numel()));
  CHECK(stddev == doctest::Approx(std::sqrt(2.0 / 784.0)).epsilon(0.02));
  for (double v : net.params.value(b).data()) CHECK(v == 0.0);
  CHECK(net.params.decay(w));
  CHECK_FALSE(net.params.decay(b));
}

TEST_CASE("build_labelgen_net examples") {
  std::mt19937_64 rng(4);
  const auto arch = tiny_mlp(8);
  for (const auto& [counts, seed] :
       std::vector<std::pair<std::vector<std::size_t>, std::uint64_t>>{
           {{2, 2}, 0}, {{3, 3, 3}, 0}, {std::vector<std::size_t>(20, 5), 7}}) {
    const hierarchy::Hierarchy psi(counts);
    const auto gen = nn::build_labelgen_net(arch, psi, seed);
    std::vector<std::size_t> labels(6);
    for (auto& y : labels) y = rng() % counts.size();
    const Tensor masks = hierarchy::build_masks(labels, psi);
    const Tensor out = gen.forward(gen.params.values(), random_tensor(rng, {6, 8}), masks);
    CHECK(out.shape() == ag::Shape{6, psi.total()});
    check_rows_are_distributions(out);
    for (std::size_t i = 0; i < out.numel(); ++i) {
      if (masks.at(i) == 0.0) CHECK(out.at(i) == 0.0);
    }
  }
}

TEST_CASE("hard parameter sharing") {
  std::mt19937_64 rng(6);
  const auto net = nn::build_multitask_net(tiny_mlp(5), 3, 6, 11);
  const Tensor x = random_tensor(rng, {4, 5});
  const auto base = net.forward(net.params.values(), x);
  check_rows_are_distributions(base.primary);
  check_rows_are_distributions(base.aux);

  auto perturbed = [&](const std::string& name) {
    nn::ParamSet p = net.params;
    const std::size_t i = p.index_of(name);
    std::vector<double> v = p.value(i).to_vector();
    for (std::size_t j = 0; j < v.size(); ++j) v[j] += 0.1 * static_cast<double>(j + 1);
    p.set_value(i, Tensor(p.value(i).shape(), v));
    return net.forward(p.values(), x);
  };
  const auto trunk = perturbed("trunk.fc0.w");
  CHECK(trunk.primary.to_vector() != base.primary.to_vector());
  CHECK(trunk.aux.to_vector() != base.aux.to_vector());
  const auto pri = perturbed("pri.w");
  CHECK(pri.primary.to_vector() != base.primary.to_vector());
  CHECK(pri.aux.to_vector() == base.aux.to_vector());
  const auto aux = perturbed("aux.b");
  CHECK(aux.aux.to_vector() != base.aux.to_vector());
  CHECK(aux.primary.to_vector() == base.primary.to_vector());
}

TEST_CASE("network gradients match finite differences") {
  std::mt19937_64 rng(8);
  const auto net = nn::build_multitask_net(tiny_mlp(4, {5, 5}), 3, 4, 5);
  const Tensor x = random_tensor(rng, {3, 4});
  const Tensor y = hierarchy::one_hot(std::vector<std::size_t>{0, 2, 1}, 3);
  const Tensor ya = hierarchy::one_hot(std::vector<std::size_t>{3, 1, 0}, 4);
  auto loss_of = [&](std::span<const Tensor> p) {
    const auto out = net.forward(p, x);
    return ag::add(losses::focal_loss(out.primary, y, 2.0), losses::focal_loss(out.aux, ya, 2.0));
  };
  ag::Tape tape;
  ag::TapeScope scope(tape);
  const auto bound = net.params.bind(tape);
  const ag::GradMap grads = ag::backward(loss_of(bound), false);
  for (std::size_t i = 0; i < bound.size(); ++i) {
    const Tensor fd = ag::finite_diff_grad(
        [&](const Tensor& pi) {
          ag::NoGradScope ng;
          auto p = net.params.values();
          p[i] = pi;
          return loss_of(p).item();
        },
        net.params.value(i), 1e-5);
    CHECK(rel_error(grads.at(bound[i]), fd) <= 1e-4);
  }
}

TEST_CASE("sgd_step examples") {
  auto p = scalar_params(1.0);
  auto plain = nn::make_optimizer(nn::OptimizerKind::PlainSgd, 0.1, 0.0, 0.0);
  nn::sgd_step(p, std::vector<Tensor>{Tensor({1}, {2.0})}, plain);
  CHECK(p.value(0).item() == doctest::Approx(0.8).epsilon(1e-15));

  auto q = scalar_params(0.0);
  auto mom = nn::make_optimizer(nn::OptimizerKind::MomentumSgd, 0.1, 0.9, 0.0);
  nn::sgd_step(q, std::vector<Tensor>{Tensor({1}, {1.0})}, mom);
  CHECK(q.value(0).item() == doctest::Approx(-0.1).epsilon(1e-15));
  nn::sgd_step(q, std::vector<Tensor>{Tensor({1}, {1.0})}, mom);
  CHECK(q.value(0).item() == doctest::Approx(-0.29).epsilon(1e-15));

  const auto net = nn::build_multitask_net(tiny_mlp(3), 2, 2, 1);
  nn::ParamSet r = net.params;
  auto opt = nn::make_optimizer(nn::OptimizerKind::MomentumSgd, 0.1, 0.9, 0.0);
  std::vector<Tensor> zeros;
  for (std::size_t i = 0; i < r.size(); ++i) zeros.push_back(Tensor::zeros(r.value(i).shape()));
  nn::sgd_step(r, zeros, opt);
  CHECK(r == net.params);

  // Decay acts on weights only.
  auto decayed = nn::make_optimizer(nn::OptimizerKind::PlainSgd, 0.1, 0.0, 0.5);
  nn::ParamSet s;
  s.add("w", Tensor({1}, {2.0}), true);
  s.add("b", Tensor({1}, {2.0}), false);
  nn::sgd_step(s, std::vector<Tensor>{Tensor::zeros({1}), Tensor::zeros({1})}, decayed);
  CHECK(s.value(0).item() == doctest::Approx(1.9));
  CHECK(s.value(1).item() == 2.0);
}

TEST_CASE("sgd_step reports the missing parameter") {
  nn::ParamSet p;
  p.add("a", Tensor({1}, {1.0}), true);
  p.add("b", Tensor({1}, {1.0}), true);
  ag::Tape tape;
  ag::TapeScope scope(tape);
  const auto bound = p.bind(tape);
  ag::GradMap only_a;
  only_a.set(bound[0].node(), Tensor({1}, {1.0}));
  auto opt = nn::make_optimizer(nn::OptimizerKind::PlainSgd, 0.1, 0.0, 0.0);
  try {
    nn::sgd_step(p, bound, only_a, opt);
    FAIL("expected MissingGradientError");
  } catch (const MissingGradientError& e) {
    CHECK(std::string(e.what()).find("'b'") != std::string::npos);
  }
}

TEST_CASE("virtual_sgd_step examples") {
  {
    auto p = scalar_params(3.0);
    ag::Tape tape;
    ag::TapeScope scope(tape);
    const auto bound = p.bind(tape);
    const Tensor other = tape.leaf(Tensor({1}, {1.0}));
    const auto plus = nn::virtual_sgd_step(bound, ag::sum(ag::mul(other, other)), 0.1);
    CHECK(plus[0].item() == 3.0);
  }
  {
    auto p = scalar_params(3.0);
    ag::Tape tape;
    ag::TapeScope scope(tape);
    const auto bound = p.bind(tape);
    const auto plus = nn::virtual_sgd_step(bound, ag::sum(ag::mul(bound[0], bound[0])), 0.1);
    CHECK(plus[0].item() == doctest::Approx(2.4).epsilon(1e-15));
    const ag::GradMap d = ag::backward(ag::sum(plus[0]), false, bound);
    CHECK(d.at(bound[0]).item() == doctest::Approx(0.8).epsilon(1e-15));
  }
  {
    // Same step through both code paths.
    std::mt19937_64 rng(12);
    const auto net = nn::build_multitask_net(tiny_mlp(2, {4}), 2, 4, 9);
    const Tensor x = random_tensor(rng, {6, 2});
    const Tensor y = hierarchy::one_hot(std::vector<std::size_t>{0, 1, 1, 0, 1, 0}, 2);
    const Tensor ya = hierarchy::one_hot(std::vector<std::size_t>{0, 2, 3, 1, 2, 0}, 4);
    ag::Tape tape;
    ag::TapeScope scope(tape);
    const auto bound = net.params.bind(tape);
    const auto out = net.forward(bound, x);
    const Tensor loss =
        ag::add(losses::focal_loss(out.primary, y, 2.0), losses::focal_loss(out.aux, ya, 2.0));
    const auto plus = nn::virtual_sgd_step(bound, loss, 0.05);

    ag::Tape tape2;
    ag::TapeScope scope2(tape2);
    const auto bound2 = net.params.bind(tape2);
    const auto out2 = net.forward(bound2, x);
    const Tensor loss2 =
        ag::add(losses::focal_loss(out2.primary, y, 2.0), losses::focal_loss(out2.aux, ya, 2.0));
    nn::ParamSet stepped = net.params;
    auto opt = nn::make_optimizer(nn::OptimizerKind::PlainSgd, 0.05, 0.0, 0.0);
    nn::sgd_step(stepped, bound2, ag::backward(loss2, false), opt);
    for (std::size_t i = 0; i < plus.size(); ++i) {
      CHECK(testing::max_abs_diff(plus[i].data(), stepped.value(i).data()) == 0.0);
    }
  }
}

TEST_CASE("schedule_lr examples") {
  const nn::LrSchedule step{nn::ScheduleKind::StepHalving, 1e-2, 50, 0};
  CHECK(nn::schedule_lr(step, 100) == doctest::Approx(2.5e-3).epsilon(1e-15));
  CHECK(nn::schedule_lr(step, 49) == 1e-2);
  const nn::LrSchedule cosine{nn::ScheduleKind::Cosine, 0.1, 0, 30};
  CHECK(nn::schedule_lr(cosine, 0) == 0.1);
  CHECK(nn::schedule_lr(cosine, 30) == nn::kMinCosineLr);
  CHECK(nn::schedule_lr(cosine, 15) == doctest::Approx(0.05));
  const nn::LrSchedule constant{nn::ScheduleKind::Constant, 1e-3, 0, 0};
  CHECK(nn::schedule_lr(constant, 123) == 1e-3);
  for (std::size_t e = 0; e <= 40; ++e) {
    for (const auto& s : {step, cosine, constant}) {
      const double lr = nn::schedule_lr(s, e);
      CHECK(lr > 0.0);
      CHECK(lr <= s.base);
    }
  }
}

TEST_CASE("checkpoint round trip") {
  const auto net = nn::build_multitask_net(tiny_mlp(3), 2, 4, 13);
  const auto gen = nn::build_labelgen_net(tiny_mlp(3), hierarchy::Hierarchy({2, 2}), 14);
  nn::Checkpoint ckpt;
  ckpt.meta = "arch=mlp\nseed=13\n";
  nn::append_params(ckpt, "mt.", net.params);
  nn::append_params(ckpt, "lg.", gen.params);
  const auto path = temp_path("roundtrip.ckpt");
  nn::save_checkpoint(path, ckpt);

  const nn::Checkpoint back = nn::load_checkpoint(path);
  CHECK(back.meta == ckpt.meta);
  auto mt = nn::build_multitask_net(tiny_mlp(3), 2, 4, 99);
  auto lg = nn::build_labelgen_net(tiny_mlp(3), hierarchy::Hierarchy({2, 2}), 98);
  nn::restore_params(back, "mt.", mt.params);
  nn::restore_params(back, "lg.", lg.params);
  CHECK(mt.params == net.params);
  CHECK(lg.params == gen.params);

  nn::save_checkpoint(temp_path("again.ckpt"), back);
  std::ifstream a(path, std::ios::binary), b(temp_path("again.ckpt"), std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(a), {}) ==
        std::string(std::istreambuf_iterator<char>(b), {}));

  auto wrong = nn::build_multitask_net(tiny_mlp(3, {7}), 2, 4, 1);
  CHECK_THROWS_AS(nn::restore_params(back, "mt.", wrong.params), FormatError);
  CHECK_THROWS_AS(nn::load_checkpoint(temp_path("does_not_exist.ckpt")), IoError);
}
