#include "maxl/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "maxl/errors.hpp"
#include "maxl/losses.hpp"

namespace maxl::diagnostics {
namespace {

std::vector<double> trunk_gradient(const nn::MultiTaskNet& net, std::span<const Tensor> params,
                                   const Tensor& x, const Tensor& target, bool primary,
                                   const CosineOptions& opts) {
  ag::Tape tape;
  ag::TapeScope scope(tape);
  std::vector<Tensor> bound;
  bound.reserve(params.size());
  for (const Tensor& p : params) bound.push_back(tape.leaf(p.detach()));
  const auto out = net.forward(bound, x);
  const Tensor loss = ag::scalar_mul(
      losses::focal_loss(primary ? out.primary : out.aux, target, opts.gamma),
      primary ? opts.primary_scale : opts.aux_scale);
  const std::span<const Tensor> trunk(bound.data(), net.trunk_size);
  const ag::GradMap grads = ag::backward(loss, false, trunk);
  std::vector<double> flat;
  for (const Tensor& p : trunk) {
    const auto g = grads.at(p).data();
    flat.insert(flat.end(), g.begin(), g.end());
  }
  return flat;
}

std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

double grad_cosine(const nn::MultiTaskNet& net, std::span<const Tensor> params, const Tensor& x,
                   const Tensor& y_pri, const Tensor& y_aux, const CosineOptions& opts) {
  const auto gp = trunk_gradient(net, params, x, y_pri, true, opts);
  const auto ga = trunk_gradient(net, params, x, y_aux, false, opts);
  double dot = 0.0, np = 0.0, na = 0.0;
  for (std::size_t i = 0; i < gp.size(); ++i) {
    dot += gp[i] * ga[i];
    np += gp[i] * gp[i];
    na += ga[i] * ga[i];
  }
  np = std::sqrt(np);
  na = std::sqrt(na);
  if (np < kCosineNormFloor || na < kCosineNormFloor) return 0.0;
  return std::clamp(dot / (np * na), -1.0, 1.0);
}

double utilization_of(std::span<const std::size_t> assigned, std::size_t total_aux) {
  if (total_aux == 0) throw InvalidArgumentError("utilization: no auxiliary classes");
  std::vector<char> hit(total_aux, 0);
  for (std::size_t a : assigned) {
    if (a >= total_aux) throw OutOfRangeClassError("utilization: class out of range");
    hit[a] = 1;
  }
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) /
         static_cast<double>(total_aux);
}

double utilization_of(const Tensor& aux_probs) {
  if (aux_probs.dim() != 2) throw ShapeError("utilization: expected [N,K] probabilities");
  const std::size_t n = aux_probs.shape()[0], k = aux_probs.shape()[1];
  std::vector<std::size_t> assigned(n);
  const auto d = aux_probs.data();
  for (std::size_t i = 0; i < n; ++i) assigned[i] = argmax_row(d.subspan(i * k, k));
  return utilization_of(assigned, k);
}

double label_utilization(const nn::LabelGenNet& labelgen, const data::Dataset& train) {
  ag::NoGradScope ng;
  const auto params = labelgen.params.values();
  const std::size_t k = labelgen.psi.total();
  std::vector<std::size_t> assigned;
  assigned.reserve(train.size());
  constexpr std::size_t kChunk = 100;
  for (std::size_t start = 0; start < train.size(); start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, train.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor masks = hierarchy::build_masks(train.batch_labels(idx), labelgen.psi);
    const Tensor probs = labelgen.forward(params, train.batch_images(idx), masks);
    const auto d = probs.data();
    for (std::size_t i = 0; i < idx.size(); ++i) assigned.push_back(argmax_row(d.subspan(i * k, k)));
  }
  return utilization_of(assigned, k);
}

std::vector<std::size_t> probe_indices(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(size, n));
  std::sort(all.begin(), all.end());
  return all;
}

void export_embeddings(const nn::MultiTaskNet& net, const data::Dataset& test,
                       const std::filesystem::path& out) {
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream file(out, std::ios::trunc);
  if (!file) throw IoError("embeddings: cannot write " + out.string());
  const std::size_t f = net.arch.feature_dim();
  file << "label";
  for (std::size_t i = 0; i < f; ++i) file << ",f" << i;
  file << '\n';

  ag::NoGradScope ng;
  const auto params = net.params.values();
  constexpr std::size_t kChunk = 100;
  char buf[32];
  for (std::size_t start = 0; start < test.size(); start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, test.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor feats = net.features(params, test.batch_images(idx));
    const auto d = feats.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      file << test.labels[idx[r]];
      for (std::size_t i = 0; i < f; ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", d[r * f + i]);
        file << ',' << buf;
      }
      file << '\n';
    }
  }
  if (!file) throw IoError("embeddings: write failed for " + out.string());
}

}  // namespace maxl::diagnostics
