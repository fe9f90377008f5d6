#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mblm/config.hpp"

namespace testutil {

// Transformer stages with the given patch sizes and widths (2 heads each).
inline mblm::HierarchyConfig hierarchy(std::vector<std::size_t> patches, std::vector<std::size_t> widths,
                                       mblm::PosEmbedding pos = mblm::PosEmbedding::learned_absolute) {
  mblm::HierarchyConfig c;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    mblm::StageConfig s;
    s.patch_size = patches[i];
    s.width = widths[i];
    s.heads = 2;
    s.pos_embedding = pos;
    c.stages.push_back(s);
  }
  return c;
}

inline std::vector<std::int32_t> random_ids(std::size_t n, std::mt19937_64& rng, int hi = 255) {
  std::uniform_int_distribution<int> dist(0, hi);
  std::vector<std::int32_t> ids(n);
  for (auto& v : ids) v = dist(rng);
  return ids;
}

}  // namespace testutil
