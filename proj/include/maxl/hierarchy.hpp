#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "maxl/autograd.hpp"

namespace maxl::hierarchy {

// Per-primary-class auxiliary class counts. Auxiliary classes are indexed
// globally: primary class i owns [offset(i), offset(i) + count(i)).
class Hierarchy {
 public:
  Hierarchy() = default;
  explicit Hierarchy(std::vector<std::size_t> counts);

  const std::vector<std::size_t>& counts() const noexcept { return counts_; }
  const std::vector<std::size_t>& offsets() const noexcept { return offsets_; }
  std::size_t num_primary() const noexcept { return counts_.size(); }
  std::size_t total() const noexcept { return offsets_.empty() ? 0 : offsets_.back(); }
  std::size_t offset(std::size_t primary) const;
  std::size_t count(std::size_t primary) const;
  // Primary class owning global auxiliary index `aux`.
  std::size_t primary_of(std::size_t aux) const;

  bool operator==(const Hierarchy&) const = default;

 private:
  std::vector<std::size_t> counts_;
  std::vector<std::size_t> offsets_;  // size num_primary + 1
};

// Binary mask with ones exactly on the block of primary class `y`.
std::vector<double> build_mask(std::size_t y, const Hierarchy& psi);
// Row-stacked masks, [N, K].
ag::Tensor build_masks(std::span<const std::size_t> labels, const Hierarchy& psi);

Hierarchy balanced_hierarchy(std::size_t num_primary, std::size_t per_class);
// Counts differ by at most one; which classes get the larger count is a
// seeded random choice.
Hierarchy near_balanced_hierarchy(std::size_t num_primary, std::size_t total_aux,
                                  std::uint64_t seed);

// Four-level CIFAR-100 hierarchy of {3, 10, 20, 100} classes.
struct HumanHierarchyMap {
  static constexpr std::array<std::size_t, 4> kLevels{3, 10, 20, 100};

  // names[l][c]: class names of level kLevels[l], sorted; index == class id.
  std::array<std::vector<std::string>, 4> names;
  // class_of[l][fine]: class id at level kLevels[l] of each fine class.
  std::array<std::vector<std::size_t>, 4> class_of;

  std::size_t fine_index(std::string_view fine_name) const;
  // Class name at `level` (3, 10, 20 or 100) of fine class `fine`.
  const std::string& name_at(std::size_t level, std::size_t fine) const;
  static std::size_t level_slot(std::size_t level);
};

// Lines "fine_name,fine_index,level20,level10,level3"; '#' starts a comment.
HumanHierarchyMap parse_human_map(std::istream& in);
HumanHierarchyMap load_human_map(const std::filesystem::path& path);
// The map shipped in the repository's data directory.
HumanHierarchyMap default_human_map();

struct HumanLabels {
  std::vector<std::size_t> primary;     // class id at the primary level
  std::vector<std::size_t> aux;         // global auxiliary index
  ag::Tensor aux_onehot;                // [N, K]
  Hierarchy psi;
};

HumanLabels human_aux_labels(const HumanHierarchyMap& map, std::size_t primary_level,
                             std::size_t aux_level, std::span<const std::size_t> fine_labels);

ag::Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes);

}  // namespace maxl::hierarchy
