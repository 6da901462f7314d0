#include "mutr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace mutr {

GradCheckReport gradcheck(const std::vector<NamedVar>& params,
                          const std::function<Var()>& forward, double h,
                          std::int64_t coords_per_tensor,
                          std::uint64_t coord_seed) {
  for (const auto& p : params) p.var.zero_grad();

  std::vector<Tensor> analytic;
  {
    Tape tape;
    Var loss = forward();
    tape.backward(loss);
  }
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.var.grad().clone());

  auto eval = [&]() { return forward().value().get(0); };

  GradCheckReport report;
  Rng rng(coord_seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& w = params[pi].var.mutable_value();
    const Tensor& ga = analytic[pi];
    const std::int64_t count = w.numel();

    std::vector<std::int64_t> coords;
    if (coords_per_tensor <= 0 || coords_per_tensor >= count) {
      coords.resize(static_cast<std::size_t>(count));
      for (std::int64_t i = 0; i < count; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      coords.push_back(0);
      coords.push_back(count - 1);
      std::uniform_int_distribution<std::int64_t> dist(0, count - 1);
      while (static_cast<std::int64_t>(coords.size()) < coords_per_tensor) {
        coords.push_back(dist(rng));
      }
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }

    double max_diff = 0.0;
    double fd_scale = 0.0;
    std::int64_t worst_coord = -1;
    for (std::int64_t c : coords) {
      const double orig = w.get(c);
      w.set(c, orig + h);
      const double fp = eval();
      w.set(c, orig - h);
      const double fm = eval();
      w.set(c, orig);
      const double fd = (fp - fm) / (2.0 * h);
      fd_scale = std::max(fd_scale, std::abs(fd));
      const double diff = std::abs(fd - ga.get(c));
      if (diff > max_diff) {
        max_diff = diff;
        worst_coord = c;
      }
    }
    const double scale = std::max({max_abs(ga), fd_scale, 1e-6});
    const double rel = max_diff / scale;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst = params[pi].name + "[" + std::to_string(worst_coord) + "]";
    }
  }
  return report;
}

}  // namespace mutr
