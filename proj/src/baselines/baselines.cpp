#include "maxl/baselines.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "maxl/diagnostics.hpp"
#include "maxl/errors.hpp"
#include "maxl/losses.hpp"

namespace maxl::baselines {
namespace {

constexpr std::uint64_t kRandomLabelSalt = 0x5eed0001;
constexpr std::uint64_t kKMeansSalt = 0x5eed0002;
constexpr std::size_t kAeHidden = 256;
constexpr std::size_t kEncodeChunk = 500;

Tensor he_normal(std::mt19937_64& rng, ag::Shape shape, std::size_t fan_in) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(ag::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  return ag::add(ag::matmul(x, w), b);
}

Tensor flatten(const Tensor& x) {
  const std::size_t n = x.shape().at(0);
  return ag::reshape(x, {n, x.numel() / n});
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Points of each primary class, in index order.
std::vector<std::vector<std::size_t>> members_by_class(std::span<const std::size_t> primary,
                                                       std::size_t num_primary) {
  std::vector<std::vector<std::size_t>> out(num_primary);
  for (std::size_t i = 0; i < primary.size(); ++i) {
    if (primary[i] >= num_primary) throw OutOfRangeClassError("k-means: primary label out of range");
    out[primary[i]].push_back(i);
  }
  return out;
}

// Nearest centroid, lowest index on ties.
std::size_t nearest(std::span<const double> point, const std::vector<std::vector<double>>& cents) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cents.size(); ++k) {
    const double d = sq_dist(point, cents[k]);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

// Per-sample labels fixed before training.
class FixedSource final : public engine::LabelSource {
 public:
  FixedSource(std::vector<std::size_t> labels, std::size_t total)
      : labels_(std::move(labels)), total_(total) {}

  Tensor train_labels(const engine::Batch& batch) override { return peek_labels(batch); }

  Tensor peek_labels(const engine::Batch& batch) override {
    std::vector<std::size_t> ys;
    ys.reserve(batch.indices.size());
    for (std::size_t i : batch.indices) ys.push_back(labels_.at(i));
    return hierarchy::one_hot(ys, total_);
  }

  double utilization(const data::Dataset&) override {
    return diagnostics::utilization_of(labels_, total_);
  }

 private:
  std::vector<std::size_t> labels_;
  std::size_t total_;
};

// Auto-encoder trained alongside the multi-task network. Each iteration
// refreshes the batch's cached latents, runs one Lloyd step per class over
// the cache and labels the batch by its cluster.
class KMeansSource final : public engine::LabelSource {
 public:
  KMeansSource(const config::RunConfig& cfg, const data::Dataset& train,
               const hierarchy::Hierarchy& psi)
      : train_(train), psi_(psi) {
    ae_ = build_autoencoder(train.sample_numel(), cfg.latent_dim, kAeHidden, cfg.ae_lr,
                            cfg.seed ^ kKMeansSalt);
    ae_.opt.momentum = cfg.momentum;
    ae_.opt.kind = cfg.momentum > 0.0 ? nn::OptimizerKind::MomentumSgd : nn::OptimizerKind::PlainSgd;
    cache_.assign(train.size() * cfg.latent_dim, 0.0);
    for (std::size_t start = 0; start < train.size(); start += kEncodeChunk) {
      std::vector<std::size_t> idx(std::min(kEncodeChunk, train.size() - start));
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
      store(idx, ae_.latents(train.batch_images(idx)));
    }
    state_ = kmeans_init(cache_, cfg.latent_dim, train.labels, psi, cfg.seed ^ kKMeansSalt);
    assigned_ = kmeans_assign(cache_, state_, train.labels, psi).assigned;
  }

  Tensor train_labels(const engine::Batch& batch) override {
    ae_.train_step(batch.x);
    store(batch.indices, ae_.latents(batch.x));
    assigned_ = kmeans_assign(cache_, state_, train_.labels, psi_).assigned;
    return peek_labels(batch);
  }

  Tensor peek_labels(const engine::Batch& batch) override {
    std::vector<std::size_t> ys;
    ys.reserve(batch.indices.size());
    for (std::size_t i : batch.indices) ys.push_back(assigned_.at(i));
    return hierarchy::one_hot(ys, psi_.total());
  }

  double utilization(const data::Dataset&) override {
    return diagnostics::utilization_of(assigned_, psi_.total());
  }

 private:
  void store(std::span<const std::size_t> idx, const Tensor& z) {
    const std::size_t d = state_dim();
    const auto src = z.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(src.begin() + r * d, d, cache_.begin() + idx[r] * d);
    }
  }
  std::size_t state_dim() const { return ae_.latent_dim; }

  const data::Dataset& train_;
  hierarchy::Hierarchy psi_;
  AutoEncoder ae_;
  std::vector<double> cache_;
  KMeansState state_;
  std::vector<std::size_t> assigned_;
};

}  // namespace

std::vector<std::size_t> random_aux_labels(std::span<const std::size_t> primary,
                                           const hierarchy::Hierarchy& psi, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  out.reserve(primary.size());
  for (std::size_t y : primary) {
    std::uniform_int_distribution<std::size_t> pick(0, psi.count(y) - 1);
    out.push_back(psi.offset(y) + pick(rng));
  }
  return out;
}

Tensor AutoEncoder::encode(std::span<const Tensor> p, const Tensor& x) const {
  const Tensor h = ag::relu(dense(flatten(x), p[0], p[1]));
  return dense(h, p[2], p[3]);
}

Tensor AutoEncoder::reconstruct(std::span<const Tensor> p, const Tensor& x) const {
  const Tensor h = ag::relu(dense(encode(p, x), p[4], p[5]));
  return dense(h, p[6], p[7]);
}

double AutoEncoder::train_step(const Tensor& x) {
  ag::Tape tape;
  ag::TapeScope scope(tape);
  const auto bound = params.bind(tape);
  const Tensor target = flatten(x.detach());
  const Tensor diff = ag::sub(reconstruct(bound, x.detach()), target);
  const Tensor loss = ag::mean(ag::mul(diff, diff));
  const double value = loss.item();
  if (!std::isfinite(value)) throw NonFiniteLossError("auto-encoder loss is not finite", 0);
  const ag::GradMap grads = ag::backward(loss, false, bound);
  nn::sgd_step(params, bound, grads, opt);
  return value;
}

Tensor AutoEncoder::latents(const Tensor& x) const {
  ag::NoGradScope ng;
  return encode(params.values(), x.detach());
}

AutoEncoder build_autoencoder(std::size_t input_dim, std::size_t latent_dim, std::size_t hidden,
                              double lr, std::uint64_t seed) {
  if (input_dim == 0 || latent_dim == 0 || hidden == 0) {
    throw InvalidArgumentError("auto-encoder: widths must be positive");
  }
  AutoEncoder ae;
  ae.input_dim = input_dim;
  ae.latent_dim = latent_dim;
  std::mt19937_64 rng(seed);
  const auto layer = [&](const std::string& name, std::size_t in, std::size_t out) {
    ae.params.add(name + ".w", he_normal(rng, {in, out}, in), true);
    ae.params.add(name + ".b", Tensor::zeros({out}), false);
  };
  layer("enc.fc1", input_dim, hidden);
  layer("enc.fc2", hidden, latent_dim);
  layer("dec.fc1", latent_dim, hidden);
  layer("dec.fc2", hidden, input_dim);
  ae.opt = nn::make_optimizer(nn::OptimizerKind::PlainSgd, lr, 0.0, 0.0);
  return ae;
}

KMeansState kmeans_init(std::span<const double> latents, std::size_t dim,
                        std::span<const std::size_t> primary, const hierarchy::Hierarchy& psi,
                        std::uint64_t seed) {
  if (dim == 0 || latents.size() != primary.size() * dim) {
    throw ShapeError("k-means: latents do not match the label count");
  }
  std::mt19937_64 rng(seed);
  KMeansState st;
  st.dim = dim;
  const auto members = members_by_class(primary, psi.num_primary());
  st.centroids.resize(psi.num_primary());
  for (std::size_t y = 0; y < psi.num_primary(); ++y) {
    const auto& pts = members[y];
    auto& cents = st.centroids[y];
    cents.assign(psi.count(y), std::vector<double>(dim, 0.0));
    if (pts.empty()) continue;
    const auto point = [&](std::size_t i) { return latents.subspan(pts[i] * dim, dim); };
    std::uniform_int_distribution<std::size_t> first(0, pts.size() - 1);
    const auto p0 = point(first(rng));
    cents[0].assign(p0.begin(), p0.end());
    std::vector<double> d2(pts.size(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 1; k < cents.size(); ++k) {
      double total = 0.0;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        d2[i] = std::min(d2[i], sq_dist(point(i), cents[k - 1]));
        total += d2[i];
      }
      std::size_t chosen = 0;
      if (total > 0.0) {
        std::uniform_real_distribution<double> u(0.0, total);
        double r = u(rng);
        chosen = pts.size() - 1;
        for (std::size_t i = 0; i < pts.size(); ++i) {
          if (r < d2[i]) {
            chosen = i;
            break;
          }
          r -= d2[i];
        }
      }
      const auto pc = point(chosen);
      cents[k].assign(pc.begin(), pc.end());
    }
  }
  return st;
}

KMeansStep kmeans_assign(std::span<const double> latents, KMeansState& state,
                         std::span<const std::size_t> primary, const hierarchy::Hierarchy& psi) {
  const std::size_t dim = state.dim;
  if (dim == 0 || latents.size() != primary.size() * dim ||
      state.centroids.size() != psi.num_primary()) {
    throw ShapeError("k-means: state does not match the latents or hierarchy");
  }
  const auto members = members_by_class(primary, psi.num_primary());
  std::vector<std::size_t> local(primary.size(), 0);
  for (std::size_t y = 0; y < psi.num_primary(); ++y) {
    const auto& pts = members[y];
    auto& cents = state.centroids[y];
    const std::size_t k = cents.size();
    if (pts.empty()) continue;
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i : pts) {
      local[i] = nearest(latents.subspan(i * dim, dim), cents);
      ++counts[local[i]];
    }
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    for (std::size_t i : pts) {
      const auto p = latents.subspan(i * dim, dim);
      for (std::size_t d = 0; d < dim; ++d) sums[local[i]][d] += p[d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t d = 0; d < dim; ++d) cents[c][d] = sums[c][d] / static_cast<double>(counts[c]);
    }
    // An empty cluster's centroid moves onto the point farthest from its own
    // centroid; assignments are left alone until the next iteration.
    std::vector<char> used(pts.size(), 0);
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] != 0) continue;
      std::size_t far = pts.size();
      double far_d = -1.0;
      for (std::size_t q = 0; q < pts.size(); ++q) {
        if (used[q]) continue;
        const std::size_t i = pts[q];
        const double d = sq_dist(latents.subspan(i * dim, dim), cents[local[i]]);
        if (d > far_d) {
          far_d = d;
          far = q;
        }
      }
      if (far == pts.size()) break;  // more clusters than points
      used[far] = 1;
      const auto p = latents.subspan(pts[far] * dim, dim);
      cents[j].assign(p.begin(), p.end());
    }
  }
  KMeansStep step;
  step.assigned.resize(primary.size());
  for (std::size_t i = 0; i < primary.size(); ++i) step.assigned[i] = psi.offset(primary[i]) + local[i];
  step.inertia = kmeans_inertia(latents, state, primary, step.assigned, psi);
  return step;
}

std::vector<double> kmeans_inertia(std::span<const double> latents, const KMeansState& state,
                                   std::span<const std::size_t> primary,
                                   std::span<const std::size_t> assigned,
                                   const hierarchy::Hierarchy& psi) {
  const std::size_t dim = state.dim;
  if (assigned.size() != primary.size() || latents.size() != primary.size() * dim) {
    throw ShapeError("k-means: inertia inputs disagree in size");
  }
  std::vector<double> out(psi.num_primary(), 0.0);
  for (std::size_t i = 0; i < primary.size(); ++i) {
    const std::size_t y = primary[i];
    if (psi.primary_of(assigned[i]) != y) {
      throw HierarchyError("k-means: label outside its primary block");
    }
    const auto& c = state.centroids.at(y).at(assigned[i] - psi.offset(y));
    out[y] += sq_dist(latents.subspan(i * dim, dim), c);
  }
  return out;
}

std::unique_ptr<engine::LabelSource> fixed_label_source(const config::RunConfig& cfg,
                                                        const engine::PreparedData& data,
                                                        const engine::TrainState& state) {
  const auto& train = data.split.train;
  if (cfg.method == "maxl") return engine::labelgen_source(state);
  if (cfg.method == "random") {
    return std::make_unique<FixedSource>(
        random_aux_labels(train.labels, data.psi, cfg.seed ^ kRandomLabelSalt), data.psi.total());
  }
  if (cfg.method == "human") {
    if (data.human_aux.size() != train.size()) {
      throw ConfigError("human baseline needs the human hierarchy labels");
    }
    return std::make_unique<FixedSource>(data.human_aux, data.psi.total());
  }
  return nullptr;
}

engine::TrainResult train_baseline(const std::string& method, const config::RunConfig& cfg,
                                   const engine::PreparedData& data) {
  const auto& train = data.split.train;
  engine::TrainState state = engine::make_state(cfg, data.arch, data.psi, train.num_classes);
  if (method == "single") return engine::run_epochs(cfg, data, state, nullptr, false);
  if (method == "random" || method == "human") {
    auto run_cfg = cfg;
    run_cfg.method = method;
    const auto src = fixed_label_source(run_cfg, data, state);
    return engine::run_epochs(cfg, data, state, src.get(), false);
  }
  if (method == "kmeans") {
    KMeansSource src(cfg, train, data.psi);
    return engine::run_epochs(cfg, data, state, &src, false);
  }
  throw ConfigError("unknown baseline '" + method + "'");
}

engine::TrainResult run(const config::RunConfig& cfg, const engine::PreparedData& data) {
  if (cfg.method == "maxl") return engine::train(cfg, data);
  return train_baseline(cfg.method, cfg, data);
}

}  // namespace maxl::baselines
