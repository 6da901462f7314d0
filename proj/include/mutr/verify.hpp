#pragma once

#include "mutr/model.hpp"

namespace mutr::nn {

struct BlockCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 1e-5;
  bool passed() const { return max_rel_err < tolerance; }
};

// Finite-difference checks (f64, h = 1e-5) of every architectural block and
// the loss, each over `seeds` random initializations, plus a sampled
// end-to-end check of a micro model on a 32x32 input (tolerance 1e-4).
std::vector<BlockCheckResult> run_block_gradchecks(std::uint64_t base_seed,
                                                   int seeds);

}  // namespace mutr::nn
