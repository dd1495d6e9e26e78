#include <algorithm>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "maxl/errors.hpp"
#include "maxl/hierarchy.hpp"

using namespace maxl;
using maxl::hierarchy::Hierarchy;

TEST_CASE("build_mask examples") {
  const Hierarchy psi({2, 2});
  CHECK(hierarchy::build_mask(0, psi) == std::vector<double>{1, 1, 0, 0});
  CHECK(hierarchy::build_mask(1, psi) == std::vector<double>{0, 0, 1, 1});
  CHECK(hierarchy::build_mask(2, Hierarchy({1, 1, 1})) == std::vector<double>{0, 0, 1});
  CHECK_THROWS_AS(hierarchy::build_mask(2, psi), OutOfRangeClassError);
  CHECK_THROWS_AS(Hierarchy({2, 0}), HierarchyError);
}

TEST_CASE("masks partition the auxiliary classes") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> counts(1 + rng() % 8);
    for (auto& c : counts) c = 1 + rng() % 6;
    const Hierarchy psi(counts);
    std::vector<int> cover(psi.total(), 0);
    for (std::size_t y = 0; y < counts.size(); ++y) {
      const auto mask = hierarchy::build_mask(y, psi);
      CHECK(static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1.0)) == counts[y]);
      for (std::size_t k = 0; k < mask.size(); ++k) {
        cover[k] += static_cast<int>(mask[k]);
        if (mask[k] == 1.0) CHECK(psi.primary_of(k) == y);
      }
    }
    CHECK(std::all_of(cover.begin(), cover.end(), [](int c) { return c == 1; }));
    CHECK(psi.offsets().back() == psi.total());
  }
}

TEST_CASE("build_masks stacks rows") {
  const Hierarchy psi({1, 2});
  const std::vector<std::size_t> labels{1, 0};
  const auto m = hierarchy::build_masks(labels, psi);
  CHECK(m.shape() == ag::Shape{2, 3});
  CHECK(m.to_vector() == std::vector<double>{0, 1, 1, 1, 0, 0});
}

TEST_CASE("balanced and near-balanced constructors") {
  CHECK(hierarchy::balanced_hierarchy(10, 3).total() == 30);
  CHECK(hierarchy::balanced_hierarchy(20, 5).total() == 100);
  CHECK(hierarchy::balanced_hierarchy(1, 1).counts() == std::vector<std::size_t>{1});

  std::set<std::vector<std::size_t>> seen;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto counts = hierarchy::near_balanced_hierarchy(3, 10, seed).counts();
    seen.insert(counts);
    std::sort(counts.begin(), counts.end());
    CHECK(counts == std::vector<std::size_t>{3, 3, 4});
    CHECK(hierarchy::near_balanced_hierarchy(3, 10, seed) ==
          hierarchy::near_balanced_hierarchy(3, 10, seed));
  }
  CHECK(seen.size() > 1);
  CHECK(hierarchy::near_balanced_hierarchy(10, 20, 4).counts() == std::vector<std::size_t>(10, 2));
  CHECK(hierarchy::near_balanced_hierarchy(5, 5, 9).counts() == std::vector<std::size_t>(5, 1));
  CHECK_THROWS_AS(hierarchy::near_balanced_hierarchy(5, 4, 0), TooFewAuxError);
}

TEST_CASE("human hierarchy data file") {
  const auto map = hierarchy::default_human_map();
  for (std::size_t slot = 0; slot < 4; ++slot) {
    CHECK(map.names[slot].size() == hierarchy::HumanHierarchyMap::kLevels[slot]);
  }
  const std::size_t maple = map.fine_index("maple_tree");
  CHECK(map.name_at(3, maple) == "vegetations");
  CHECK(map.name_at(20, maple) == "trees");
  // Sorted 20-level names line up with the standard coarse label ids.
  CHECK(map.class_of[2][map.fine_index("apple")] == 4);    // fruit_and_vegetables
  CHECK(map.class_of[2][map.fine_index("beaver")] == 0);   // aquatic_mammals
  CHECK(map.class_of[2][map.fine_index("tractor")] == 19); // vehicles_2

  std::vector<std::size_t> fine(100);
  for (std::size_t i = 0; i < 100; ++i) fine[i] = i;
  const auto h20 = hierarchy::human_aux_labels(map, 20, 100, fine);
  CHECK(h20.psi.counts() == std::vector<std::size_t>(20, 5));
  const auto h3 = hierarchy::human_aux_labels(map, 3, 10, fine);
  CHECK(h3.psi.num_primary() == 3);
  CHECK(h3.psi.total() == 10);
  CHECK(h3.aux_onehot.shape() == ag::Shape{100, 10});

  for (const auto* labels : {&h20, &h3}) {
    for (std::size_t i = 0; i < 100; ++i) {
      CHECK(labels->psi.primary_of(labels->aux[i]) == labels->primary[i]);
    }
  }
  CHECK(map.name_at(3, 0) == map.names[0][h3.primary[0]]);

  CHECK_THROWS_AS(hierarchy::human_aux_labels(map, 20, 20, fine), InvalidLevelPairError);
  CHECK_THROWS_AS(hierarchy::human_aux_labels(map, 20, 10, fine), InvalidLevelPairError);
  CHECK_THROWS_AS(hierarchy::human_aux_labels(map, 20, 7, fine), InvalidLevelPairError);
  CHECK_THROWS_AS(hierarchy::human_aux_labels(map, 20, 100, std::vector<std::size_t>{100}),
                  OutOfRangeClassError);
}

TEST_CASE("human map parser rejects malformed input") {
  std::istringstream too_few("apple,0,fruit,plants,veg\n");
  CHECK_THROWS_AS(hierarchy::parse_human_map(too_few), FormatError);
  std::istringstream bad_fields("apple,0,fruit\n");
  CHECK_THROWS_AS(hierarchy::parse_human_map(bad_fields), FormatError);
  CHECK_THROWS_AS(hierarchy::load_human_map("/nonexistent/map.txt"), IoError);
}
