#pragma once

#include "mutr/gradcheck.hpp"

namespace mutr {

// lr0 * (1 - iter/max_iter)^power, clamped to 0 past max_iter.
double poly_lr(std::int64_t iter, std::int64_t max_iter, double lr0 = 0.01,
               double power = 0.9);

struct SgdConfig {
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// SGD with momentum; weight decay is coupled into the gradient:
//   g' = g + wd*w;  v = mu*v + g';  w -= lr*v
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<NamedVar> params, SgdConfig cfg);

  void zero_grad();
  // Throws NumericError naming the parameter if its gradient is non-finite.
  void step(double lr);

  std::vector<std::pair<std::string, Tensor>> state() const;
  void load_state(const std::vector<std::pair<std::string, Tensor>>& entries);
  const SgdConfig& config() const { return cfg_; }

 private:
  std::vector<NamedVar> params_;
  std::vector<Tensor> velocity_;
  SgdConfig cfg_;
};

}  // namespace mutr
