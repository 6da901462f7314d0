#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mutr/autodiff.hpp"

namespace mutr {

struct NamedVar {
  std::string name;
  Var var;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // "<name>[<coord>]" of the worst deviation
};

// Central-difference check of analytic gradients. `forward` rebuilds the
// scalar loss from the parameters' current values; it is invoked once under a
// tape for the analytic gradients and twice per probed coordinate for the
// finite differences (no tape). Relative error is normalized per tensor by
// the larger of the analytic and difference infinity norms.
// coords_per_tensor == 0 probes every coordinate.
GradCheckReport gradcheck(const std::vector<NamedVar>& params,
                          const std::function<Var()>& forward,
                          double h = 1e-5, std::int64_t coords_per_tensor = 0,
                          std::uint64_t coord_seed = 7);

}  // namespace mutr
