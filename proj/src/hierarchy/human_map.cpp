#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "maxl/errors.hpp"
#include "maxl/hierarchy.hpp"

namespace maxl::hierarchy {
namespace {

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

}  // namespace

std::size_t HumanHierarchyMap::level_slot(std::size_t level) {
  for (std::size_t i = 0; i < kLevels.size(); ++i) {
    if (kLevels[i] == level) return i;
  }
  throw InvalidLevelPairError("human hierarchy: no level with " + std::to_string(level) +
                              " classes (expected 3, 10, 20 or 100)");
}

std::size_t HumanHierarchyMap::fine_index(std::string_view fine_name) const {
  const auto& fine = names[3];
  const auto it = std::find(fine.begin(), fine.end(), fine_name);
  if (it == fine.end()) {
    throw HierarchyError("human hierarchy: unknown fine class '" + std::string(fine_name) + "'");
  }
  return static_cast<std::size_t>(it - fine.begin());
}

const std::string& HumanHierarchyMap::name_at(std::size_t level, std::size_t fine) const {
  const std::size_t slot = level_slot(level);
  if (fine >= class_of[slot].size()) {
    throw OutOfRangeClassError("human hierarchy: fine class " + std::to_string(fine) +
                               " out of range");
  }
  return names[slot][class_of[slot][fine]];
}

HumanHierarchyMap parse_human_map(std::istream& in) {
  // Columns after the index: level20, level10, level3.
  std::vector<std::string> fine_names(100);
  std::array<std::vector<std::string>, 3> coarse_names;
  for (auto& v : coarse_names) v.assign(100, "");
  std::vector<bool> seen(100, false);

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(trim(field));
    if (fields.size() != 5) {
      throw FormatError("human hierarchy: line " + std::to_string(line_no) +
                        " needs 5 comma-separated fields");
    }
    std::size_t index = 0;
    try {
      index = std::stoul(fields[1]);
    } catch (const std::exception&) {
      throw FormatError("human hierarchy: line " + std::to_string(line_no) + " has a bad index");
    }
    if (index >= 100 || seen[index]) {
      throw FormatError("human hierarchy: line " + std::to_string(line_no) +
                        " repeats or exceeds fine index " + fields[1]);
    }
    seen[index] = true;
    fine_names[index] = fields[0];
    coarse_names[0][index] = fields[2];
    coarse_names[1][index] = fields[3];
    coarse_names[2][index] = fields[4];
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw FormatError("human hierarchy: expected exactly 100 fine classes");
  }

  HumanHierarchyMap map;
  map.names[3] = fine_names;
  map.class_of[3].resize(100);
  for (std::size_t i = 0; i < 100; ++i) map.class_of[3][i] = i;
  // slot 2 <- level20 column, slot 1 <- level10, slot 0 <- level3.
  for (std::size_t col = 0; col < 3; ++col) {
    const std::size_t slot = 2 - col;
    std::set<std::string> unique(coarse_names[col].begin(), coarse_names[col].end());
    if (unique.size() != HumanHierarchyMap::kLevels[slot]) {
      throw FormatError("human hierarchy: level " +
                        std::to_string(HumanHierarchyMap::kLevels[slot]) + " has " +
                        std::to_string(unique.size()) + " classes");
    }
    map.names[slot].assign(unique.begin(), unique.end());
    map.class_of[slot].resize(100);
    for (std::size_t i = 0; i < 100; ++i) {
      const auto it = std::lower_bound(map.names[slot].begin(), map.names[slot].end(),
                                       coarse_names[col][i]);
      map.class_of[slot][i] = static_cast<std::size_t>(it - map.names[slot].begin());
    }
  }
  return map;
}

HumanHierarchyMap load_human_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("human hierarchy: cannot open " + path.string());
  return parse_human_map(in);
}

HumanHierarchyMap default_human_map() {
  return load_human_map(std::filesystem::path(MAXL_DATA_DIR) / "cifar100_hierarchy.txt");
}

HumanLabels human_aux_labels(const HumanHierarchyMap& map, std::size_t primary_level,
                             std::size_t aux_level, std::span<const std::size_t> fine_labels) {
  const std::size_t ps = HumanHierarchyMap::level_slot(primary_level);
  const std::size_t as = HumanHierarchyMap::level_slot(aux_level);
  if (aux_level <= primary_level) {
    throw InvalidLevelPairError("human hierarchy: auxiliary level " + std::to_string(aux_level) +
                                " must be finer than primary level " +
                                std::to_string(primary_level));
  }
  // children[p]: auxiliary-level classes under primary class p, sorted.
  std::vector<std::set<std::size_t>> children(primary_level);
  std::map<std::size_t, std::size_t> parent;
  for (std::size_t fine = 0; fine < 100; ++fine) {
    const std::size_t p = map.class_of[ps][fine];
    const std::size_t a = map.class_of[as][fine];
    const auto [it, inserted] = parent.emplace(a, p);
    if (!inserted && it->second != p) {
      throw InvalidLevelPairError("human hierarchy: levels " + std::to_string(primary_level) +
                                  " and " + std::to_string(aux_level) + " are not nested");
    }
    children[p].insert(a);
  }
  std::vector<std::size_t> counts(primary_level);
  for (std::size_t p = 0; p < primary_level; ++p) counts[p] = children[p].size();
  Hierarchy psi(std::move(counts));

  HumanLabels out;
  out.primary.reserve(fine_labels.size());
  out.aux.reserve(fine_labels.size());
  for (std::size_t fine : fine_labels) {
    if (fine >= 100) {
      throw OutOfRangeClassError("human hierarchy: fine label " + std::to_string(fine) +
                                 " out of range [0,100)");
    }
    const std::size_t p = map.class_of[ps][fine];
    const std::size_t a = map.class_of[as][fine];
    const auto& block = children[p];
    const auto rank = static_cast<std::size_t>(std::distance(block.begin(), block.find(a)));
    out.primary.push_back(p);
    out.aux.push_back(psi.offset(p) + rank);
  }
  out.aux_onehot = one_hot(out.aux, psi.total());
  out.psi = std::move(psi);
  return out;
}

}  // namespace maxl::hierarchy
