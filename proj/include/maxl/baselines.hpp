#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "maxl/engine.hpp"
#include "maxl/hierarchy.hpp"
#include "maxl/nn.hpp"

namespace maxl::baselines {

using ag::Tensor;

// Each sample gets a uniformly random position inside its primary block;
// returns global auxiliary indices.
std::vector<std::size_t> random_aux_labels(std::span<const std::size_t> primary,
                                           const hierarchy::Hierarchy& psi, std::uint64_t seed);

// MLP auto-encoder: input -> hidden -> latent -> hidden -> input, MSE loss.
struct AutoEncoder {
  std::size_t input_dim = 0;
  std::size_t latent_dim = 32;
  nn::ParamSet params;
  nn::OptimizerState opt;

  Tensor encode(std::span<const Tensor> p, const Tensor& x) const;
  Tensor reconstruct(std::span<const Tensor> p, const Tensor& x) const;
  // One optimizer step on the batch; returns the reconstruction loss.
  double train_step(const Tensor& x);
  // Latents of `x` with the current parameters, [N, latent].
  Tensor latents(const Tensor& x) const;
};

AutoEncoder build_autoencoder(std::size_t input_dim, std::size_t latent_dim, std::size_t hidden,
                              double lr, std::uint64_t seed);

// Per primary class y, psi.count(y) centroids of dimension `dim`.
struct KMeansState {
  std::size_t dim = 0;
  std::vector<std::vector<std::vector<double>>> centroids;  // [class][k][dim]
};

// k-means++ seeding on each class's points. latents: row-major [N, dim].
KMeansState kmeans_init(std::span<const double> latents, std::size_t dim,
                        std::span<const std::size_t> primary, const hierarchy::Hierarchy& psi,
                        std::uint64_t seed);

struct KMeansStep {
  std::vector<std::size_t> assigned;   // global auxiliary index per point
  std::vector<double> inertia;         // per class, after the centroid update
};

// One Lloyd iteration per class: nearest-centroid assignment inside the
// sample's block (lowest index on ties), then centroid means. An empty
// cluster's centroid is re-seeded at the point farthest from its centroid.
KMeansStep kmeans_assign(std::span<const double> latents, KMeansState& state,
                         std::span<const std::size_t> primary, const hierarchy::Hierarchy& psi);

// Within-class sum of squared distances to the assigned centroids.
std::vector<double> kmeans_inertia(std::span<const double> latents, const KMeansState& state,
                                   std::span<const std::size_t> primary,
                                   std::span<const std::size_t> assigned,
                                   const hierarchy::Hierarchy& psi);

// Auxiliary targets of `method` for a run: the label generator for maxl,
// fixed labels for random and human, null for single. k-means state lives
// only inside a training run, so it is not available here either (null).
std::unique_ptr<engine::LabelSource> fixed_label_source(const config::RunConfig& cfg,
                                                        const engine::PreparedData& data,
                                                        const engine::TrainState& state);

// single: primary head only. random / kmeans / human: auxiliary training with
// the method's labels, no meta pass. Same metrics schema as the full method.
engine::TrainResult train_baseline(const std::string& method, const config::RunConfig& cfg,
                                   const engine::PreparedData& data);

// train() or train_baseline() depending on cfg.method.
engine::TrainResult run(const config::RunConfig& cfg, const engine::PreparedData& data);

}  // namespace maxl::baselines
