#include "mutr/loss.hpp"

#include <cmath>

namespace mutr {

using detail::accum_grad;
using detail::grad_recording;
using detail::make_output;

namespace {

struct LossSaved {
  Tensor yhat;
  std::vector<double> isum, s1, s2;  // per class
  double bce_weight = 0.5, eps = 1e-5;
};

template <class T>
double loss_fwd(const Tensor& logits, const Tensor& target, LossSaved& sv) {
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  const std::int64_t plane = logits.dim(2) * logits.dim(3);
  const std::int64_t cnt = n * plane;
  sv.yhat = Tensor(logits.shape(), logits.dtype());
  sv.isum.assign(static_cast<size_t>(c), 0.0);
  sv.s1.assign(static_cast<size_t>(c), 0.0);
  sv.s2.assign(static_cast<size_t>(c), 0.0);
  const T* zp = logits.data<T>();
  const T* tp = target.data<T>();
  T* yp = sv.yhat.data<T>();
  double total = 0.0;
  for (std::int64_t cc = 0; cc < c; ++cc) {
    double bce = 0.0, isum = 0.0, s1 = 0.0, s2 = 0.0;
    for (std::int64_t b = 0; b < n; ++b) {
      const std::int64_t base = (b * c + cc) * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        const double z = zp[base + p];
        const double y = tp[base + p];
        if (y != 0.0 && y != 1.0) {
          throw InputError("loss target values must be 0 or 1");
        }
        bce += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
        const double yh = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                   : std::exp(z) / (1.0 + std::exp(z));
        yp[base + p] = static_cast<T>(yh);
        isum += yh * y;
        s1 += yh;
        s2 += y;
      }
    }
    sv.isum[static_cast<size_t>(cc)] = isum;
    sv.s1[static_cast<size_t>(cc)] = s1;
    sv.s2[static_cast<size_t>(cc)] = s2;
    const double dice = 1.0 - (2.0 * isum + sv.eps) / (s1 + s2 + sv.eps);
    total += sv.bce_weight * bce / static_cast<double>(cnt) + dice;
  }
  return total;
}

template <class T>
void loss_bwd(const Tensor& target, const LossSaved& sv, double upstream,
              Tensor& dz) {
  const std::int64_t n = dz.dim(0), c = dz.dim(1);
  const std::int64_t plane = dz.dim(2) * dz.dim(3);
  const std::int64_t cnt = n * plane;
  const T* tp = target.data<T>();
  const T* yp = sv.yhat.data<T>();
  T* dp = dz.data<T>();
  for (std::int64_t cc = 0; cc < c; ++cc) {
    const double denom = sv.s1[static_cast<size_t>(cc)] +
                         sv.s2[static_cast<size_t>(cc)] + sv.eps;
    const double numer = 2.0 * sv.isum[static_cast<size_t>(cc)] + sv.eps;
    for (std::int64_t b = 0; b < n; ++b) {
      const std::int64_t base = (b * c + cc) * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        const double yh = yp[base + p];
        const double y = tp[base + p];
        const double dbce = sv.bce_weight * (yh - y) / static_cast<double>(cnt);
        const double ddice_dyh = (numer - 2.0 * y * denom) / (denom * denom);
        const double dz_val = dbce + ddice_dyh * yh * (1.0 - yh);
        dp[base + p] += static_cast<T>(upstream * dz_val);
      }
    }
  }
}

}  // namespace

Var bce_dice_loss(const Var& logits, const Tensor& target, double bce_weight,
                  double eps) {
  const Tensor& z = logits.value();
  if (z.rank() != 4) throw ConfigError("loss: logits must be [N,C,H,W]");
  if (!same_shape(z, target) || z.dtype() != target.dtype()) {
    throw InputError("loss: logits " + z.shape_str() + " and target " +
                     target.shape_str() + " must match");
  }
  auto saved = std::make_shared<LossSaved>();
  saved->bce_weight = bce_weight;
  saved->eps = eps;
  const double value = z.dtype() == DType::kF32
                           ? loss_fwd<float>(z, target, *saved)
                           : loss_fwd<double>(z, target, *saved);
  if (!std::isfinite(value)) throw NumericError("loss is non-finite");
  const bool rec = grad_recording({&logits});
  Var out = make_output(Tensor::scalar(value, z.dtype()), rec);
  if (rec) {
    auto zn = logits.node(), on = out.node();
    const Tensor tgt = target;
    Tape::current()->record([zn, on, saved, tgt] {
      if (!on->grad.defined() || !zn->needs_grad) return;
      Tensor dz = Tensor::zeros(zn->value.shape(), zn->value.dtype());
      const double up = on->grad.get(0);
      if (dz.dtype() == DType::kF32) {
        loss_bwd<float>(tgt, *saved, up, dz);
      } else {
        loss_bwd<double>(tgt, *saved, up, dz);
      }
      accum_grad(zn, std::move(dz));
    });
  }
  return out;
}

}  // namespace mutr
