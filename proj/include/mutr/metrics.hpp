#pragma once

#include <optional>

#include "mutr/tensor.hpp"

namespace mutr::metrics {

struct IouF1 {
  double iou = 0.0;
  double f1 = 0.0;
};

// Binary masks of equal shape; both-empty pairs score (1, 1).
IouF1 iou_f1(const Tensor& pred, const Tensor& target);

// Class-index maps; classes absent from both maps are excluded from the mean.
double miou(const Tensor& pred, const Tensor& target, int num_classes);

// 95th percentile (linear interpolation) of the pooled bidirectional
// boundary distances. Boundaries use 4-connectivity with the image border
// counting as background. Empty masks yield nullopt.
std::optional<double> hd95(const Tensor& pred, const Tensor& target);

struct MetricsReport {
  int num_classes = 1;
  std::int64_t samples = 0;
  std::vector<double> class_iou;   // mean over samples where the class occurs
  std::vector<double> class_dice;
  double mean_iou = 0.0;
  double mean_dice = 0.0;
  double hd95_mean = 0.0;          // over defined pairs only
  std::int64_t hd95_defined = 0;
  std::int64_t hd95_undefined = 0;

  std::string to_text() const;  // flat key = value record
};

}  // namespace mutr::metrics
