#include "mutr/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace mutr::train {

namespace fs = std::filesystem;
using data::Dataset;
using data::SegmentationSample;

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

namespace {

// Clockwise quarter turn: out[r][c] = in[H-1-c][r].
Tensor rot90_plane(const Tensor& in) {
  const std::int64_t h = in.dim(in.rank() - 2), w = in.dim(in.rank() - 1);
  const std::int64_t planes = in.numel() / (h * w);
  std::vector<std::int64_t> shape = in.shape();
  shape[shape.size() - 2] = w;
  shape[shape.size() - 1] = h;
  Tensor out(shape, in.dtype());
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t r = 0; r < w; ++r) {
      for (std::int64_t c = 0; c < h; ++c) {
        out.set(p * h * w + r * h + c, in.get(p * h * w + (h - 1 - c) * w + r));
      }
    }
  }
  return out;
}

Tensor flip_plane(const Tensor& in, bool horizontal) {
  const std::int64_t h = in.dim(in.rank() - 2), w = in.dim(in.rank() - 1);
  const std::int64_t planes = in.numel() / (h * w);
  Tensor out(in.shape(), in.dtype());
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t r = 0; r < h; ++r) {
      for (std::int64_t c = 0; c < w; ++c) {
        const std::int64_t sr = horizontal ? r : h - 1 - r;
        const std::int64_t sc = horizontal ? w - 1 - c : c;
        out.set(p * h * w + r * w + c, in.get(p * h * w + sr * w + sc));
      }
    }
  }
  return out;
}

}  // namespace

SegmentationSample augment_sample(const SegmentationSample& s, Rng& rng) {
  std::uniform_int_distribution<int> quarter(0, 3);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int k = quarter(rng);
  const bool hflip = u01(rng) < 0.5;
  const bool vflip = u01(rng) < 0.5;
  SegmentationSample out;
  out.id = s.id;
  out.image = s.image;
  out.mask = s.mask;
  for (int i = 0; i < k; ++i) {
    out.image = rot90_plane(out.image);
    out.mask = rot90_plane(out.mask);
  }
  if (hflip) {
    out.image = flip_plane(out.image, true);
    out.mask = flip_plane(out.mask, true);
  }
  if (vflip) {
    out.image = flip_plane(out.image, false);
    out.mask = flip_plane(out.mask, false);
  }
  return out;
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

Tensor batch_images(const Dataset& ds, const std::vector<std::size_t>& idx) {
  const Tensor& first = ds[idx[0]].image;
  const std::int64_t h = first.dim(1), w = first.dim(2);
  Tensor out({static_cast<std::int64_t>(idx.size()), 3, h, w}, DType::kF32);
  float* op = out.data<float>();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& img = ds[idx[b]].image;
    if (img.dim(1) != h || img.dim(2) != w) {
      throw InputError("batch images must share one size");
    }
    const float* ip = img.data<float>();
    std::copy(ip, ip + img.numel(), op + static_cast<std::int64_t>(b) * 3 * h * w);
  }
  return out;
}

Tensor batch_targets(const Dataset& ds, const std::vector<std::size_t>& idx,
                     int num_classes) {
  const Tensor& first = ds[idx[0]].mask;
  const std::int64_t h = first.dim(0), w = first.dim(1);
  Tensor out = Tensor::zeros(
      {static_cast<std::int64_t>(idx.size()), num_classes, h, w}, DType::kF32);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& m = ds[idx[b]].mask;
    for (std::int64_t i = 0; i < m.numel(); ++i) {
      const std::int64_t cls = std::llround(m.get(i));
      if (cls < 0 || cls > num_classes) {
        throw InputError("mask class " + std::to_string(cls) +
                         " out of range for num_classes " +
                         std::to_string(num_classes));
      }
      if (cls > 0) {
        out.set((static_cast<std::int64_t>(b) * num_classes + (cls - 1)) * h * w + i,
                1.0);
      }
    }
  }
  return out;
}

Tensor predict_classes(const Tensor& logits_sample) {
  const std::int64_t c = logits_sample.dim(0);
  const std::int64_t h = logits_sample.dim(1), w = logits_sample.dim(2);
  Tensor out({h, w}, DType::kF32);
  for (std::int64_t i = 0; i < h * w; ++i) {
    std::int64_t best = -1;
    double best_v = 0.0;  // sigmoid > 0.5 <=> logit > 0
    for (std::int64_t cc = 0; cc < c; ++cc) {
      const double v = logits_sample.get(cc * h * w + i);
      if (v > 0.0 && (best < 0 || v > best_v)) {
        best = cc;
        best_v = v;
      }
    }
    out.set(i, best < 0 ? 0.0 : static_cast<double>(best + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// validation / evaluation
// ---------------------------------------------------------------------------

namespace {

template <class Fn>
void for_each_eval_sample(nn::Model& model, const Dataset& ds, int batch_size,
                          Fn&& fn) {
  const int nc = model.config().num_classes;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size();
       start += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = start;
         i < std::min(ds.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(i);
    }
    const Tensor logits = model.forward_eval(batch_images(ds, idx));
    const std::int64_t h = logits.dim(2), w = logits.dim(3);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      Tensor sample({static_cast<std::int64_t>(nc), h, w}, DType::kF32);
      for (std::int64_t e = 0; e < sample.numel(); ++e) {
        sample.set(e, logits.get(static_cast<std::int64_t>(b) * nc * h * w + e));
      }
      fn(predict_classes(sample), ds[idx[b]].mask);
    }
  }
}

}  // namespace

double validate(nn::Model& model, const Dataset& val, int batch_size) {
  if (val.empty()) return 0.0;
  const int nc = model.config().num_classes;
  double sum = 0.0;
  std::int64_t n = 0;
  for_each_eval_sample(model, val, batch_size,
                       [&](const Tensor& pred, const Tensor& target) {
                         if (nc == 1) {
                           sum += metrics::iou_f1(pred, target).iou;
                         } else {
                           sum += metrics::miou(pred, target, nc + 1);
                         }
                         ++n;
                       });
  return sum / static_cast<double>(n);
}

metrics::MetricsReport evaluate(nn::Model& model, const Dataset& ds,
                                int batch_size) {
  const int nc = model.config().num_classes;
  metrics::MetricsReport rep;
  rep.num_classes = nc;
  rep.class_iou.assign(static_cast<size_t>(nc), 0.0);
  rep.class_dice.assign(static_cast<size_t>(nc), 0.0);
  std::vector<std::int64_t> class_counts(static_cast<size_t>(nc), 0);
  for_each_eval_sample(model, ds, batch_size, [&](const Tensor& pred,
                                                  const Tensor& target) {
    ++rep.samples;
    for (int c = 1; c <= nc; ++c) {
      // Per-class binary masks.
      Tensor pc(pred.shape(), DType::kF32), tc(target.shape(), DType::kF32);
      bool any = false;
      for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = std::llround(pred.get(i)) == c;
        const bool t = std::llround(target.get(i)) == c;
        pc.set(i, p ? 1.0 : 0.0);
        tc.set(i, t ? 1.0 : 0.0);
        any = any || p || t;
      }
      if (any) {
        const auto m = metrics::iou_f1(pc, tc);
        rep.class_iou[static_cast<size_t>(c - 1)] += m.iou;
        rep.class_dice[static_cast<size_t>(c - 1)] += m.f1;
        class_counts[static_cast<size_t>(c - 1)]++;
      }
      const auto d = metrics::hd95(pc, tc);
      if (d.has_value()) {
        rep.hd95_mean += *d;
        rep.hd95_defined++;
      } else {
        rep.hd95_undefined++;
      }
    }
  });
  double iou_sum = 0.0, dice_sum = 0.0;
  int counted = 0;
  for (int c = 0; c < nc; ++c) {
    if (class_counts[static_cast<size_t>(c)] > 0) {
      rep.class_iou[static_cast<size_t>(c)] /=
          static_cast<double>(class_counts[static_cast<size_t>(c)]);
      rep.class_dice[static_cast<size_t>(c)] /=
          static_cast<double>(class_counts[static_cast<size_t>(c)]);
      iou_sum += rep.class_iou[static_cast<size_t>(c)];
      dice_sum += rep.class_dice[static_cast<size_t>(c)];
      ++counted;
    }
  }
  rep.mean_iou = counted > 0 ? iou_sum / counted : 1.0;
  rep.mean_dice = counted > 0 ? dice_sum / counted : 1.0;
  if (rep.hd95_defined > 0) rep.hd95_mean /= static_cast<double>(rep.hd95_defined);
  return rep;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

FitResult fit(nn::Model& model, const Dataset& train_set, const Dataset& val_set,
              const TrainPlan& plan) {
  if (train_set.empty()) throw InputError("fit: training set is empty");
  if (plan.epochs < 1 || plan.batch_size < 1) {
    throw ConfigError("fit: epochs and batch_size must be positive");
  }
  const int nc = model.config().num_classes;
  const std::int64_t n_train = static_cast<std::int64_t>(train_set.size());
  const std::int64_t batches_per_epoch =
      (n_train + plan.batch_size - 1) / plan.batch_size;
  const std::int64_t max_iter = static_cast<std::int64_t>(plan.epochs) * batches_per_epoch;

  SgdOptimizer opt(model.parameters(), plan.sgd);
  Rng rng(mix_seed(plan.seed, 0x666974ULL));

  std::ofstream log_file;
  if (!plan.out_dir.empty()) {
    fs::create_directories(plan.out_dir);
    log_file.open(fs::path(plan.out_dir) / "train_log.txt");
    if (!log_file) throw InputError("cannot write training log in " + plan.out_dir);
  }

  FitResult res;
  res.min_train_loss = std::numeric_limits<double>::infinity();
  std::int64_t global_iter = 0;
  double lr = plan.sgd.lr0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
    double loss_sum = 0.0;
    std::int64_t batch_count = 0;
    for (std::int64_t start = 0; start < n_train; start += plan.batch_size) {
      Dataset batch;
      std::vector<std::size_t> idx;
      for (std::int64_t i = start;
           i < std::min(n_train, start + plan.batch_size); ++i) {
        const auto& s = train_set[order[static_cast<std::size_t>(i)]];
        batch.push_back(plan.augment ? augment_sample(s, rng) : s);
        idx.push_back(batch.size() - 1);
      }
      const Tensor input = batch_images(batch, idx);
      const Tensor target = batch_targets(batch, idx, nc);

      lr = poly_lr(global_iter, max_iter, plan.sgd.lr0, plan.poly_power);
      opt.zero_grad();
      double loss_val;
      {
        Tape tape;
        Var logits = model.forward(Var::leaf(input, false), true);
        Var loss = bce_dice_loss(logits, target);
        loss_val = loss.value().get(0);
        if (!std::isfinite(loss_val)) {
          throw NumericError("non-finite loss at iteration " +
                             std::to_string(global_iter) +
                             "; last written checkpoint is retained");
        }
        tape.backward(loss);
      }
      opt.step(lr);
      loss_sum += loss_val;
      res.min_train_loss = std::min(res.min_train_loss, loss_val);
      ++global_iter;
      ++batch_count;
    }
    const double train_loss = loss_sum / static_cast<double>(batch_count);
    const double val_iou = validate(model, val_set, plan.batch_size);
    res.final_train_loss = train_loss;
    res.final_val_iou = val_iou;
    res.best_val_iou = std::max(res.best_val_iou, val_iou);
    res.epochs_run = epoch + 1;

    char line[160];
    std::snprintf(line, sizeof(line), "%d, %lld, %.10g, %.10g, %.10g", epoch + 1,
                  static_cast<long long>(global_iter), lr, train_loss, val_iou);
    res.log_lines.emplace_back(line);
    if (log_file) log_file << line << '\n';

    if (!plan.out_dir.empty() && plan.checkpoint_every > 0 &&
        (epoch + 1) % plan.checkpoint_every == 0 && epoch + 1 < plan.epochs) {
      char name[48];
      std::snprintf(name, sizeof(name), "checkpoint_epoch_%04d", epoch + 1);
      nn::save_checkpoint((fs::path(plan.out_dir) / name).string(), model,
                          opt.state());
    }
  }
  if (!plan.out_dir.empty()) {
    nn::save_checkpoint((fs::path(plan.out_dir) / "checkpoint_final").string(),
                        model, opt.state());
  }
  return res;
}

}  // namespace mutr::train
