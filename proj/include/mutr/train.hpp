#pragma once

#include "mutr/data.hpp"
#include "mutr/loss.hpp"
#include "mutr/metrics.hpp"
#include "mutr/model.hpp"
#include "mutr/optim.hpp"

namespace mutr::train {

struct TrainPlan {
  int epochs = 300;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double poly_power = 0.9;
  SgdConfig sgd;
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  bool augment = true;
  std::string out_dir;  // empty: no log file / checkpoints written
};

struct FitResult {
  int epochs_run = 0;
  double final_train_loss = 0.0;
  double min_train_loss = 0.0;
  double final_val_iou = 0.0;
  double best_val_iou = 0.0;
  std::vector<std::string> log_lines;  // "epoch, iter, lr, train_loss, val_miou"
};

// Same spatial transform applied to image and mask: a 90-degree rotation
// count and independent horizontal/vertical flips.
data::SegmentationSample augment_sample(const data::SegmentationSample& s, Rng& rng);

// Batch of samples -> model input [B,3,H,W] and loss target [B,C,H,W].
Tensor batch_images(const data::Dataset& ds, const std::vector<std::size_t>& idx);
Tensor batch_targets(const data::Dataset& ds, const std::vector<std::size_t>& idx,
                     int num_classes);

// Mean per-sample foreground IoU (binary) or mIoU (multi-class) in eval mode.
double validate(nn::Model& model, const data::Dataset& val, int batch_size);

// Full metrics over a dataset in eval mode.
metrics::MetricsReport evaluate(nn::Model& model, const data::Dataset& ds,
                                int batch_size);

// Per-sample class map predicted from logits (binary: logit > 0).
Tensor predict_classes(const Tensor& logits_sample);

FitResult fit(nn::Model& model, const data::Dataset& train_set,
              const data::Dataset& val_set, const TrainPlan& plan);

}  // namespace mutr::train
