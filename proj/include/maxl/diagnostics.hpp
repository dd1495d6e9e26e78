#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "maxl/data.hpp"
#include "maxl/hierarchy.hpp"
#include "maxl/nn.hpp"

namespace maxl::diagnostics {

using ag::Tensor;

inline constexpr double kCosineNormFloor = 1e-12;
inline constexpr std::size_t kProbeSize = 512;

struct CosineOptions {
  double gamma = 2.0;
  // Multiplies each loss before differentiation; used to check scale invariance.
  double primary_scale = 1.0;
  double aux_scale = 1.0;
};

// Cosine between the gradients of focal(primary) and focal(aux) w.r.t. the
// shared trunk parameters, flattened and concatenated. 0 when either
// gradient norm is below kCosineNormFloor.
double grad_cosine(const nn::MultiTaskNet& net, std::span<const Tensor> params, const Tensor& x,
                   const Tensor& y_pri, const Tensor& y_aux, const CosineOptions& opts = {});

// Fraction of the K auxiliary classes that are the argmax of at least one row.
double utilization_of(const Tensor& aux_probs);
double utilization_of(std::span<const std::size_t> assigned, std::size_t total_aux);

// Utilization of the label generator's argmax labels over `train`.
double label_utilization(const nn::LabelGenNet& labelgen, const data::Dataset& train);

// Fixed seeded probe subset of size min(size, n).
std::vector<std::size_t> probe_indices(std::size_t n, std::size_t size, std::uint64_t seed);

// CSV "label,f0,...,f{F-1}", one row per sample of `test`.
void export_embeddings(const nn::MultiTaskNet& net, const data::Dataset& test,
                       const std::filesystem::path& out);

}  // namespace maxl::diagnostics
