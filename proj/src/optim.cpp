#include "mutr/optim.hpp"

#include <cmath>

#include "mutr/kernels.hpp"

namespace mutr {

double poly_lr(std::int64_t iter, std::int64_t max_iter, double lr0,
               double power) {
  if (iter < 0 || max_iter <= 0) throw ConfigError("poly_lr: bad iteration bounds");
  if (iter >= max_iter) return 0.0;
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(max_iter);
  return lr0 * std::pow(frac, power);
}

SgdOptimizer::SgdOptimizer(std::vector<NamedVar> params, SgdConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) {
    velocity_.push_back(Tensor::zeros(p.var.value().shape(), p.var.value().dtype()));
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void SgdOptimizer::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor& g = params_[i].var.grad();
    if (!g.all_finite()) {
      throw NumericError("non-finite gradient in parameter " + params_[i].name);
    }
    Tensor& w = params_[i].var.mutable_value();
    Tensor& v = velocity_[i];
    const std::int64_t n = w.numel();
    if (w.dtype() == DType::kF32) {
      Tensor gd = g.clone();
      kern::axpy<float>(static_cast<float>(cfg_.weight_decay), w.data<float>(),
                        gd.data<float>(), n);
      kern::scale<float>(v.data<float>(), static_cast<float>(cfg_.momentum),
                         v.data<float>(), n);
      kern::axpy<float>(1.0f, gd.data<float>(), v.data<float>(), n);
      kern::axpy<float>(static_cast<float>(-lr), v.data<float>(), w.data<float>(), n);
    } else {
      Tensor gd = g.clone();
      kern::axpy<double>(cfg_.weight_decay, w.data<double>(), gd.data<double>(), n);
      kern::scale<double>(v.data<double>(), cfg_.momentum, v.data<double>(), n);
      kern::axpy<double>(1.0, gd.data<double>(), v.data<double>(), n);
      kern::axpy<double>(-lr, v.data<double>(), w.data<double>(), n);
    }
  }
}

std::vector<std::pair<std::string, Tensor>> SgdOptimizer::state() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back("momentum." + params_[i].name, velocity_[i]);
  }
  return out;
}

void SgdOptimizer::load_state(
    const std::vector<std::pair<std::string, Tensor>>& entries) {
  if (entries.size() != velocity_.size()) {
    throw InputError("optimizer state entry count mismatch");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != "momentum." + params_[i].name ||
        entries[i].second.shape() != velocity_[i].shape()) {
      throw InputError("optimizer state mismatch at " + entries[i].first);
    }
    velocity_[i] = entries[i].second.clone();
  }
}

}  // namespace mutr
