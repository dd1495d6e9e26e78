#include "maxl/hierarchy.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <string>

#include "maxl/errors.hpp"

namespace maxl::hierarchy {

Hierarchy::Hierarchy(std::vector<std::size_t> counts) : counts_(std::move(counts)) {
  if (counts_.empty()) throw HierarchyError("hierarchy: needs at least one primary class");
  offsets_.assign(counts_.size() + 1, 0);
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    if (counts_[i] == 0) {
      throw HierarchyError("hierarchy: primary class " + std::to_string(i) +
                           " has no auxiliary classes");
    }
    offsets_[i + 1] = offsets_[i] + counts_[i];
  }
}

std::size_t Hierarchy::offset(std::size_t primary) const {
  if (primary >= counts_.size()) {
    throw OutOfRangeClassError("hierarchy: primary class " + std::to_string(primary) +
                               " out of range [0," + std::to_string(counts_.size()) + ")");
  }
  return offsets_[primary];
}

std::size_t Hierarchy::count(std::size_t primary) const {
  offset(primary);
  return counts_[primary];
}

std::size_t Hierarchy::primary_of(std::size_t aux) const {
  if (aux >= total()) {
    throw OutOfRangeClassError("hierarchy: auxiliary class " + std::to_string(aux) +
                               " out of range [0," + std::to_string(total()) + ")");
  }
  const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), aux);
  return static_cast<std::size_t>(it - offsets_.begin()) - 1;
}

std::vector<double> build_mask(std::size_t y, const Hierarchy& psi) {
  const std::size_t begin = psi.offset(y);
  std::vector<double> mask(psi.total(), 0.0);
  std::fill(mask.begin() + static_cast<std::ptrdiff_t>(begin),
            mask.begin() + static_cast<std::ptrdiff_t>(begin + psi.count(y)), 1.0);
  return mask;
}

ag::Tensor build_masks(std::span<const std::size_t> labels, const Hierarchy& psi) {
  const std::size_t k = psi.total();
  std::vector<double> masks(labels.size() * k, 0.0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const std::size_t begin = psi.offset(labels[n]);
    for (std::size_t j = 0; j < psi.count(labels[n]); ++j) masks[n * k + begin + j] = 1.0;
  }
  return ag::Tensor({labels.size(), k}, std::move(masks));
}

Hierarchy balanced_hierarchy(std::size_t num_primary, std::size_t per_class) {
  if (num_primary == 0 || per_class == 0) {
    throw HierarchyError("balanced_hierarchy: counts must be >= 1");
  }
  return Hierarchy(std::vector<std::size_t>(num_primary, per_class));
}

Hierarchy near_balanced_hierarchy(std::size_t num_primary, std::size_t total_aux,
                                  std::uint64_t seed) {
  if (num_primary == 0) throw HierarchyError("near_balanced_hierarchy: no primary classes");
  if (total_aux < num_primary) {
    throw TooFewAuxError("near_balanced_hierarchy: " + std::to_string(total_aux) +
                         " auxiliary classes cannot cover " + std::to_string(num_primary) +
                         " primary classes");
  }
  const std::size_t base = total_aux / num_primary;
  const std::size_t extra = total_aux % num_primary;
  std::vector<std::size_t> order(num_primary);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> counts(num_primary, base);
  for (std::size_t i = 0; i < extra; ++i) ++counts[order[i]];
  return Hierarchy(std::move(counts));
}

ag::Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  std::vector<double> out(labels.size() * classes, 0.0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] >= classes) {
      throw OutOfRangeClassError("one_hot: label " + std::to_string(labels[n]) +
                                 " out of range [0," + std::to_string(classes) + ")");
    }
    out[n * classes + labels[n]] = 1.0;
  }
  return ag::Tensor({labels.size(), classes}, std::move(out));
}

}  // namespace maxl::hierarchy
