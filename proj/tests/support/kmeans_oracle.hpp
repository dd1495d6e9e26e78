#pragma once

// Exhaustive optimal 2-partition of a small point set, and two-cloud
// instances to test k-means against it.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace maxl::testing {

// Within-cluster sum of squares of a labelling into two groups.
inline double two_partition_cost(const std::vector<double>& pts, std::size_t dim,
                                 const std::vector<int>& side) {
  const std::size_t n = side.size();
  double cost = 0.0;
  for (int s = 0; s < 2; ++s) {
    std::vector<double> mean(dim, 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (side[i] != s) continue;
      ++count;
      for (std::size_t d = 0; d < dim; ++d) mean[d] += pts[i * dim + d];
    }
    if (count == 0) continue;
    for (double& m : mean) m /= static_cast<double>(count);
    for (std::size_t i = 0; i < n; ++i) {
      if (side[i] != s) continue;
      for (std::size_t d = 0; d < dim; ++d) {
        const double e = pts[i * dim + d] - mean[d];
        cost += e * e;
      }
    }
  }
  return cost;
}

// Point 0 is fixed on side 0, so each partition is enumerated once.
inline std::vector<int> best_two_partition(const std::vector<double>& pts, std::size_t dim) {
  const std::size_t n = pts.size() / dim;
  std::vector<int> best(n, 0), side(n, 0);
  double best_cost = std::numeric_limits<double>::infinity();
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << (n - 1)); ++mask) {
    for (std::size_t i = 1; i < n; ++i) side[i] = static_cast<int>((mask >> (i - 1)) & 1u);
    const double c = two_partition_cost(pts, dim, side);
    if (c < best_cost) {
      best_cost = c;
      best = side;
    }
  }
  return best;
}

// Same partition up to swapping the two group names.
inline bool same_partition(const std::vector<int>& a, const std::vector<std::size_t>& b) {
  bool direct = true, swapped = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int bi = b[i] == b[0] ? 0 : 1;
    direct = direct && (a[i] == bi);
    swapped = swapped && (a[i] != bi);
  }
  return direct || swapped;
}

// Two unit-variance Gaussian clouds `gap` apart, `n` points in total.
inline std::vector<double> two_clouds(std::mt19937_64& rng, std::size_t n, std::size_t dim,
                                      double gap) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> dir(dim);
  double norm = 0.0;
  for (double& v : dir) {
    v = g(rng);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  std::vector<double> pts(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    const double shift = (i % 2 == 0) ? 0.0 : gap;
    for (std::size_t d = 0; d < dim; ++d) pts[i * dim + d] = g(rng) + shift * dir[d] / norm;
  }
  return pts;
}

}  // namespace maxl::testing
