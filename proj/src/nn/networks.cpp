#include <cmath>
#include <random>
#include <sstream>
#include <string>

#include "maxl/errors.hpp"
#include "maxl/losses.hpp"
#include "maxl/nn.hpp"

namespace maxl::nn {
namespace {

constexpr std::size_t kKernel = 3;
constexpr std::size_t kPool = 2;

// He-normal weights, std sqrt(2 / fan_in).
Tensor he_normal(std::mt19937_64& rng, ag::Shape shape, std::size_t fan_in) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(ag::shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

void add_dense(ParamSet& params, std::mt19937_64& rng, const std::string& name, std::size_t in,
               std::size_t out) {
  params.add(name + ".w", he_normal(rng, {in, out}, in), true);
  params.add(name + ".b", Tensor::zeros({out}), false);
}

std::size_t add_trunk(ParamSet& params, std::mt19937_64& rng, const ArchSpec& arch) {
  const std::size_t before = params.size();
  if (arch.kind == "mlp") {
    std::size_t in = arch.input_dim();
    for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
      add_dense(params, rng, "trunk.fc" + std::to_string(i), in, arch.hidden[i]);
      in = arch.hidden[i];
    }
  } else {
    std::size_t ch = arch.in_channels, h = arch.in_height, w = arch.in_width;
    for (std::size_t i = 0; i < arch.conv_channels.size(); ++i) {
      const std::size_t out = arch.conv_channels[i];
      const std::string name = "trunk.conv" + std::to_string(i);
      params.add(name + ".w", he_normal(rng, {out, ch, kKernel, kKernel}, ch * kKernel * kKernel),
                 true);
      params.add(name + ".b", Tensor::zeros({out}), false);
      ch = out;
      h /= kPool;
      w /= kPool;
    }
    add_dense(params, rng, "trunk.fc", ch * h * w, arch.dense);
  }
  return params.size() - before;
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  return ag::add(ag::matmul(x, w), b);
}

// Consumes the trunk parameters starting at p[0].
Tensor trunk_forward(const ArchSpec& arch, std::span<const Tensor> p, const Tensor& x) {
  if (x.dim() < 2 || ag::shape_numel(x.shape()) / x.shape()[0] != arch.input_dim()) {
    throw ShapeError("network: input " + ag::shape_str(x.shape()) + " does not match " +
                     arch.describe());
  }
  const std::size_t n = x.shape()[0];
  std::size_t k = 0;
  if (arch.kind == "mlp") {
    Tensor h = ag::reshape(x, {n, arch.input_dim()});
    for (std::size_t i = 0; i < arch.hidden.size(); ++i, k += 2) {
      h = ag::relu(dense(h, p[k], p[k + 1]));
    }
    return h;
  }
  Tensor h = ag::reshape(x, {n, arch.in_channels, arch.in_height, arch.in_width});
  for (std::size_t i = 0; i < arch.conv_channels.size(); ++i, k += 2) {
    const Tensor bias = ag::reshape(p[k + 1], {1, arch.conv_channels[i], 1, 1});
    h = ag::max_pool2d(ag::relu(ag::add(ag::conv2d(h, p[k], 1), bias)), kPool);
  }
  h = ag::reshape(h, {n, h.numel() / n});
  return ag::relu(dense(h, p[k], p[k + 1]));
}

}  // namespace

std::size_t ArchSpec::feature_dim() const {
  if (kind == "mlp") return hidden.empty() ? input_dim() : hidden.back();
  return dense;
}

void ArchSpec::validate() const {
  if (kind != "mlp" && kind != "convnet4") {
    throw UnknownArchitectureError("unknown architecture '" + kind +
                                   "' (expected mlp or convnet4)");
  }
  if (input_dim() == 0) throw InvalidArgumentError("architecture: empty input shape");
  if (kind == "mlp") {
    if (hidden.empty()) throw InvalidArgumentError("mlp: needs at least one hidden layer");
    for (std::size_t w : hidden) {
      if (w == 0) throw InvalidArgumentError("mlp: hidden widths must be >= 1");
    }
    return;
  }
  if (conv_channels.empty() || dense == 0) {
    throw InvalidArgumentError("convnet4: needs conv channels and a dense width");
  }
  std::size_t h = in_height, w = in_width;
  for (std::size_t c : conv_channels) {
    if (c == 0) throw InvalidArgumentError("convnet4: channel counts must be >= 1");
    if (h < kPool || w < kPool) {
      throw InvalidArgumentError("convnet4: input " + std::to_string(in_height) + "x" +
                                 std::to_string(in_width) + " too small for " +
                                 std::to_string(conv_channels.size()) + " pooling stages");
    }
    h /= kPool;
    w /= kPool;
  }
}

std::string ArchSpec::describe() const {
  std::ostringstream os;
  os << kind << " input=" << in_channels << 'x' << in_height << 'x' << in_width;
  auto list = [&os](const char* key, const std::vector<std::size_t>& v) {
    os << ' ' << key << '=';
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  };
  if (kind == "mlp") {
    list("hidden", hidden);
  } else {
    list("channels", conv_channels);
    os << " dense=" << dense;
  }
  return os.str();
}

ArchSpec make_arch(const std::string& name, std::size_t c, std::size_t h, std::size_t w) {
  ArchSpec arch;
  arch.kind = name == "convnet-4" ? "convnet4" : name;
  arch.in_channels = c;
  arch.in_height = h;
  arch.in_width = w;
  arch.validate();
  return arch;
}

MultiTaskOutput MultiTaskNet::forward(std::span<const Tensor> p, const Tensor& x) const {
  if (p.size() != params.size()) {
    throw InvalidArgumentError("multitask net: expected " + std::to_string(params.size()) +
                               " parameters, got " + std::to_string(p.size()));
  }
  MultiTaskOutput out;
  out.features = trunk_forward(arch, p, x);
  const std::size_t k = trunk_size;
  out.primary = ag::softmax(dense(out.features, p[k], p[k + 1]));
  out.aux = ag::softmax(dense(out.features, p[k + 2], p[k + 3]));
  return out;
}

Tensor MultiTaskNet::features(std::span<const Tensor> p, const Tensor& x) const {
  return trunk_forward(arch, p, x);
}

Tensor LabelGenNet::forward(std::span<const Tensor> p, const Tensor& x, const Tensor& masks) const {
  if (p.size() != params.size()) {
    throw InvalidArgumentError("label generator: expected " + std::to_string(params.size()) +
                               " parameters, got " + std::to_string(p.size()));
  }
  const Tensor h = trunk_forward(arch, p, x);
  const std::size_t k = p.size() - 2;
  return losses::mask_softmax(dense(h, p[k], p[k + 1]), masks);
}

MultiTaskNet build_multitask_net(const ArchSpec& arch, std::size_t num_primary,
                                 std::size_t total_aux, std::uint64_t seed) {
  arch.validate();
  if (num_primary < 2 || total_aux < 2) {
    throw InvalidArgumentError("multitask net: needs >= 2 primary and auxiliary classes");
  }
  MultiTaskNet net;
  net.arch = arch;
  net.num_primary = num_primary;
  net.total_aux = total_aux;
  std::mt19937_64 rng(seed);
  net.trunk_size = add_trunk(net.params, rng, arch);
  add_dense(net.params, rng, "pri", arch.feature_dim(), num_primary);
  add_dense(net.params, rng, "aux", arch.feature_dim(), total_aux);
  return net;
}

LabelGenNet build_labelgen_net(const ArchSpec& arch, const hierarchy::Hierarchy& psi,
                               std::uint64_t seed) {
  arch.validate();
  if (psi.total() == 0) throw InvalidArgumentError("label generator: empty hierarchy");
  LabelGenNet net;
  net.arch = arch;
  net.psi = psi;
  std::mt19937_64 rng(seed);
  add_trunk(net.params, rng, arch);
  add_dense(net.params, rng, "gen", arch.feature_dim(), psi.total());
  return net;
}

}  // namespace maxl::nn
