#include "mutr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mutr::metrics {

namespace {

std::int64_t as_class(const Tensor& t, std::int64_t i) {
  return std::llround(t.get(i));
}

void check_pair(const Tensor& a, const Tensor& b, const char* op) {
  if (!same_shape(a, b)) {
    throw InputError(std::string(op) + ": mask shapes differ, " + a.shape_str() +
                     " vs " + b.shape_str());
  }
  if (a.rank() != 2) throw InputError(std::string(op) + ": masks must be [H,W]");
}

}  // namespace

IouF1 iou_f1(const Tensor& pred, const Tensor& target) {
  check_pair(pred, target, "iou_f1");
  std::int64_t inter = 0, p_cnt = 0, t_cnt = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool p = as_class(pred, i) != 0;
    const bool t = as_class(target, i) != 0;
    inter += p && t;
    p_cnt += p;
    t_cnt += t;
  }
  const std::int64_t uni = p_cnt + t_cnt - inter;
  IouF1 r;
  r.iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  r.f1 = (p_cnt + t_cnt) == 0
             ? 1.0
             : 2.0 * static_cast<double>(inter) / static_cast<double>(p_cnt + t_cnt);
  return r;
}

double miou(const Tensor& pred, const Tensor& target, int num_classes) {
  check_pair(pred, target, "miou");
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::int64_t inter = 0, uni = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
      const bool p = as_class(pred, i) == c;
      const bool t = as_class(target, i) == c;
      inter += p && t;
      uni += p || t;
    }
    if (uni == 0) continue;  // class absent from both maps
    sum += static_cast<double>(inter) / static_cast<double>(uni);
    ++counted;
  }
  return counted == 0 ? 1.0 : sum / counted;
}

namespace {

std::vector<std::pair<std::int64_t, std::int64_t>> boundary_pixels(const Tensor& m) {
  const std::int64_t h = m.dim(0), w = m.dim(1);
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  auto fg = [&](std::int64_t y, std::int64_t x) {
    if (y < 0 || y >= h || x < 0 || x >= w) return false;  // border is background
    return as_class(m, y * w + x) != 0;
  };
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      if (!fg(y, x)) continue;
      if (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1)) {
        out.emplace_back(y, x);
      }
    }
  }
  return out;
}

void directed_distances(
    const std::vector<std::pair<std::int64_t, std::int64_t>>& from,
    const std::vector<std::pair<std::int64_t, std::int64_t>>& to,
    std::vector<double>& pooled) {
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) {
      const double dy = static_cast<double>(a.first - b.first);
      const double dx = static_cast<double>(a.second - b.second);
      best = std::min(best, dy * dy + dx * dx);
    }
    pooled.push_back(std::sqrt(best));
  }
}

}  // namespace

std::optional<double> hd95(const Tensor& pred, const Tensor& target) {
  check_pair(pred, target, "hd95");
  const auto bp = boundary_pixels(pred);
  const auto bt = boundary_pixels(target);
  if (bp.empty() || bt.empty()) return std::nullopt;
  std::vector<double> pooled;
  pooled.reserve(bp.size() + bt.size());
  directed_distances(bp, bt, pooled);
  directed_distances(bt, bp, pooled);
  std::sort(pooled.begin(), pooled.end());
  const double rank = 0.95 * static_cast<double>(pooled.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  const double frac = rank - std::floor(rank);
  if (lo + 1 >= pooled.size()) return pooled.back();
  return pooled[lo] + frac * (pooled[lo + 1] - pooled[lo]);
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os << "samples = " << samples << "\n";
  os << "num_classes = " << num_classes << "\n";
  for (std::size_t c = 0; c < class_iou.size(); ++c) {
    os << "class" << c + 1 << "_iou = " << class_iou[c] << "\n";
    os << "class" << c + 1 << "_dice = " << class_dice[c] << "\n";
  }
  os << "mean_iou = " << mean_iou << "\n";
  os << "mean_dice = " << mean_dice << "\n";
  if (hd95_defined > 0) {
    os << "hd95 = " << hd95_mean << "\n";
  } else {
    os << "hd95 = undefined\n";
  }
  os << "hd95_defined = " << hd95_defined << "\n";
  os << "hd95_undefined = " << hd95_undefined << "\n";
  return os.str();
}

}  // namespace mutr::metrics
