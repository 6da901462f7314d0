// Acceptance suite: one test case per criterion, each printing a PASS/FAIL
// line with the measured numbers.
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "mutr/complexity.hpp"
#include "mutr/data.hpp"
#include "mutr/train.hpp"
#include "mutr/verify.hpp"

using namespace mutr;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(int criterion, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion,
              detail.c_str());
  std::fflush(stdout);
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("mutr_accept_" + std::to_string(Rng(std::random_device{}())()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

bool dirs_bitwise_equal(const fs::path& a, const fs::path& b) {
  std::set<std::string> na, nb;
  for (const auto& e : fs::directory_iterator(a)) na.insert(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(b)) nb.insert(e.path().filename().string());
  if (na != nb) return false;
  for (const auto& n : na) {
    if (file_bytes(a / n) != file_bytes(b / n)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("criterion 1: complexity reproduction") {
  const auto t0 = Clock::now();
  const auto base = nn::complexity_report(nn::mobileutr_config(), 256);
  const auto large = nn::complexity_report(nn::mobileutr_l_config(), 256);
  const double base_params = static_cast<double>(base.total_params()) / 1e6;
  const double large_params = static_cast<double>(large.total_params()) / 1e6;
  const double base_g = static_cast<double>(base.total_macs()) / 1e9;
  const double large_g = static_cast<double>(large.total_macs()) / 1e9;
  const double elapsed = seconds_since(t0);

  const bool base_params_ok = base_params >= 1.18 && base_params <= 1.60;
  const bool large_params_ok = large_params >= 6.70 && large_params <= 9.06;
  const bool base_macs_ok = base_g >= 2.51 * 0.75 && base_g <= 2.51 * 1.25;
  const bool large_macs_ok = large_g >= 3.70 * 0.75 && large_g <= 3.70 * 1.25;
  const bool time_ok = elapsed < 1.0;

  char detail[256];
  std::snprintf(detail, sizeof(detail),
                "params %.3f M (band 1.18-1.60: %s) / %.3f M (band 6.70-9.06: %s); "
                "MACs %.3f G (band 1.88-3.14: %s) / %.3f G (band 2.78-4.63: %s); %.3f s",
                base_params, base_params_ok ? "ok" : "OUT", large_params,
                large_params_ok ? "ok" : "OUT", base_g, base_macs_ok ? "ok" : "OUT",
                large_g, large_macs_ok ? "ok" : "OUT", elapsed);
  report(1, base_params_ok && large_params_ok && base_macs_ok && large_macs_ok && time_ok,
         detail);
  CHECK(base_params_ok);
  CHECK(base_macs_ok);
  CHECK(time_ok);
  CHECK(large_params_ok);
  CHECK(large_macs_ok);
}

TEST_CASE("criterion 2: ablation trends") {
  const auto t0 = Clock::now();
  const auto grid = nn::ablation_suite(nn::mobileutr_config());
  auto find = [&](const std::string& label) -> const nn::ComplexityReport& {
    for (const auto& r : grid) {
      if (r.label == label) return r;
    }
    throw std::runtime_error("missing " + label);
  };
  bool skips_monotone = true;
  std::int64_t prev = -1;
  for (int s = 0; s <= 3; ++s) {
    const auto& r = find("adaptive_lgl skip" + std::to_string(s));
    skips_monotone = skips_monotone && r.total_params() > prev;
    prev = r.total_params();
  }
  const std::int64_t adaptive_extra =
      find("adaptive_lgl skip3").total_params() - find("lgl skip3").total_params();
  const bool adaptive_ok = adaptive_extra > 0 && adaptive_extra < 50000;
  const bool dense_ok =
      find("dense skip3").total_macs() > find("adaptive_lgl skip3").total_macs();
  const double elapsed = seconds_since(t0);
  const bool time_ok = elapsed < 5.0;

  char detail[256];
  std::snprintf(detail, sizeof(detail),
                "skip params monotone: %s; adaptive-LGL extra %.4f M (< 0.05: %s); "
                "dense MACs %.2f G > adaptive %.2f G: %s; %.3f s",
                skips_monotone ? "yes" : "NO",
                static_cast<double>(adaptive_extra) / 1e6, adaptive_ok ? "ok" : "OUT",
                static_cast<double>(find("dense skip3").total_macs()) / 1e9,
                static_cast<double>(find("adaptive_lgl skip3").total_macs()) / 1e9,
                dense_ok ? "ok" : "NO", elapsed);
  report(2, skips_monotone && adaptive_ok && dense_ok && time_ok, detail);
  CHECK(skips_monotone);
  CHECK(adaptive_ok);
  CHECK(dense_ok);
  CHECK(time_ok);
}

TEST_CASE("criterion 3: gradient-check suite") {
  const auto t0 = Clock::now();
  const auto results = nn::run_block_gradchecks(1, 5);
  const double elapsed = seconds_since(t0);
  bool all_ok = true;
  std::string parts;
  for (const auto& r : results) {
    all_ok = all_ok && r.passed();
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%s %.1e%s ", r.name.c_str(), r.max_rel_err,
                  r.passed() ? "" : "(FAIL)");
    parts += buf;
  }
  const bool time_ok = elapsed < 600.0;
  char detail[384];
  std::snprintf(detail, sizeof(detail), "%s; %.1f s (< 600)", parts.c_str(), elapsed);
  report(3, all_ok && time_ok, detail);
  for (const auto& r : results) CHECK_MESSAGE(r.passed(), r.name);
  CHECK(time_ok);
}

TEST_CASE("criterion 4: oracle equivalences") {
  // Dense-attention oracle for GlobalSP at stride 1 on an 8x8 grid.
  bool attn_ok = false;
  double attn_err = 0.0;
  {
    Rng rng(401);
    auto block = nn::LglBlock::make(16, 3, 4, 1, DType::kF64, rng);
    Var x1 = Var::leaf(rand_uniform({1, 16, 8, 8}, DType::kF64, -1.0, 1.0, rng), false);
    const Tensor got = block.globalsp(x1).value();

    // Oracle: channel layer-norm then dense MHSA, both from definitions.
    const Tensor& x = x1.value();
    const std::int64_t c = 16, t = 64, h = 4, d = 4;
    Tensor normed(x.shape(), x.dtype());
    for (std::int64_t i = 0; i < t; ++i) {
      double mean = 0.0, var = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) mean += x.get(ch * t + i);
      mean /= static_cast<double>(c);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double dd = x.get(ch * t + i) - mean;
        var += dd * dd;
      }
      var /= static_cast<double>(c);
      const double inv = 1.0 / std::sqrt(var + 1e-5);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        normed.set(ch * t + i,
                   block.norm_attn.gamma.value().get(ch) * (x.get(ch * t + i) - mean) * inv +
                       block.norm_attn.beta.value().get(ch));
      }
    }
    auto proj = [&](const Var& w, const Var& b, std::int64_t tok, std::int64_t j) {
      double s = b.value().get(j);
      for (std::int64_t k = 0; k < c; ++k) {
        s += normed.get(k * t + tok) * w.value().get(k * c + j);
      }
      return s;
    };
    Tensor expect(x.shape(), x.dtype());
    std::vector<std::vector<double>> q(t, std::vector<double>(c)), kk = q, v = q, ctx = q;
    for (std::int64_t i = 0; i < t; ++i) {
      for (std::int64_t j = 0; j < c; ++j) {
        q[i][j] = proj(block.attn.wq, block.attn.bq, i, j);
        kk[i][j] = proj(block.attn.wk, block.attn.bk, i, j);
        v[i][j] = proj(block.attn.wv, block.attn.bv, i, j);
      }
    }
    for (std::int64_t hh = 0; hh < h; ++hh) {
      const std::int64_t off = hh * d;
      for (std::int64_t i = 0; i < t; ++i) {
        std::vector<double> sc(t);
        double mx = -1e300;
        for (std::int64_t u = 0; u < t; ++u) {
          double s = 0.0;
          for (std::int64_t e = 0; e < d; ++e) s += q[i][off + e] * kk[u][off + e];
          sc[u] = s / 2.0;  // sqrt(d) = 2
          mx = std::max(mx, sc[u]);
        }
        double denom = 0.0;
        for (auto& s : sc) {
          s = std::exp(s - mx);
          denom += s;
        }
        for (std::int64_t e = 0; e < d; ++e) {
          double s = 0.0;
          for (std::int64_t u = 0; u < t; ++u) s += sc[u] / denom * v[u][off + e];
          ctx[i][off + e] = s;
        }
      }
    }
    for (std::int64_t i = 0; i < t; ++i) {
      for (std::int64_t j = 0; j < c; ++j) {
        double s = block.attn.bo.value().get(j);
        for (std::int64_t k = 0; k < c; ++k) {
          s += ctx[i][k] * block.attn.wo.value().get(k * c + j);
        }
        expect.set(j * t + i, s);
      }
    }
    attn_err = max_abs_diff(got, expect);
    attn_ok = attn_err < 1e-6;
  }

  // HD95 against an all-pairs brute force on 100 random 16x16 pairs.
  bool hd_ok = true;
  {
    Rng rng(402);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
      Tensor a({16, 16}, DType::kF32), b({16, 16}, DType::kF32);
      for (std::int64_t i = 0; i < 256; ++i) {
        a.set(i, u(rng) < 0.25 ? 1.0 : 0.0);
        b.set(i, u(rng) < 0.25 ? 1.0 : 0.0);
      }
      auto boundary = [](const Tensor& m) {
        std::vector<std::pair<double, double>> pts;
        for (std::int64_t y = 0; y < 16; ++y) {
          for (std::int64_t x = 0; x < 16; ++x) {
            if (m.get(y * 16 + x) == 0.0) continue;
            const bool bg =
                y == 0 || y == 15 || x == 0 || x == 15 ||
                m.get((y - 1) * 16 + x) == 0.0 || m.get((y + 1) * 16 + x) == 0.0 ||
                m.get(y * 16 + x - 1) == 0.0 || m.get(y * 16 + x + 1) == 0.0;
            if (bg) pts.emplace_back(static_cast<double>(y), static_cast<double>(x));
          }
        }
        return pts;
      };
      const auto pa = boundary(a), pb = boundary(b);
      const auto got = metrics::hd95(a, b);
      if (pa.empty() || pb.empty()) {
        hd_ok = hd_ok && !got.has_value();
        continue;
      }
      std::vector<double> pooled;
      for (const auto& p : pa) {
        double best = 1e300;
        for (const auto& qq : pb) {
          best = std::min(best, std::sqrt((p.first - qq.first) * (p.first - qq.first) +
                                          (p.second - qq.second) * (p.second - qq.second)));
        }
        pooled.push_back(best);
      }
      for (const auto& qq : pb) {
        double best = 1e300;
        for (const auto& p : pa) {
          best = std::min(best, std::sqrt((p.first - qq.first) * (p.first - qq.first) +
                                          (p.second - qq.second) * (p.second - qq.second)));
        }
        pooled.push_back(best);
      }
      std::sort(pooled.begin(), pooled.end());
      const double rank = 0.95 * static_cast<double>(pooled.size() - 1);
      const std::size_t lo = static_cast<std::size_t>(rank);
      const double frac = rank - static_cast<double>(lo);
      const double expect = lo + 1 >= pooled.size()
                                ? pooled.back()
                                : pooled[lo] + frac * (pooled[lo + 1] - pooled[lo]);
      hd_ok = hd_ok && got.has_value() && *got == expect;
    }
  }

  // mIoU against the per-class loop on random 4x4 maps.
  bool miou_ok = true;
  {
    Rng rng(403);
    for (int trial = 0; trial < 200; ++trial) {
      Tensor a({4, 4}, DType::kF32), b({4, 4}, DType::kF32);
      for (std::int64_t i = 0; i < 16; ++i) {
        a.set(i, static_cast<double>(rng() % 3));
        b.set(i, static_cast<double>(rng() % 3));
      }
      double sum = 0.0;
      int cnt = 0;
      for (int c = 0; c < 3; ++c) {
        int inter = 0, uni = 0;
        for (std::int64_t i = 0; i < 16; ++i) {
          const bool p = a.get(i) == c, tt = b.get(i) == c;
          inter += p && tt;
          uni += p || tt;
        }
        if (!uni) continue;
        sum += static_cast<double>(inter) / uni;
        ++cnt;
      }
      miou_ok = miou_ok && metrics::miou(a, b, 3) == (cnt ? sum / cnt : 1.0);
    }
  }

  char detail[192];
  std::snprintf(detail, sizeof(detail),
                "dense-attention max diff %.2e (< 1e-6: %s); hd95 oracle exact: %s; "
                "miou oracle exact: %s",
                attn_err, attn_ok ? "ok" : "NO", hd_ok ? "yes" : "NO",
                miou_ok ? "yes" : "NO");
  report(4, attn_ok && hd_ok && miou_ok, detail);
  CHECK(attn_ok);
  CHECK(hd_ok);
  CHECK(miou_ok);
}

TEST_CASE("criterion 5: shape contract across input sizes") {
  nn::Model model = nn::Model::build(nn::mobileutr_config(), DType::kF32, 5);
  Rng rng(501);
  bool ok = true;
  std::string detail = "logits and trace at ";
  for (int size : {64, 128, 256}) {
    const Tensor logits =
        model.forward_eval(rand_uniform({2, 3, size, size}, DType::kF32, 0.0, 1.0, rng));
    ok = ok && logits.shape() == std::vector<std::int64_t>{2, 1, size, size};
    const auto& cfg = model.config();
    const std::array<std::pair<const char*, int>, 5> expects = {
        std::pair<const char*, int>{"stage1", 1},
        {"stage2", 2},
        {"stage3", 4},
        {"stage4", 8},
        {"stage5", 16}};
    for (std::size_t i = 0; i < expects.size(); ++i) {
      bool found = false;
      for (const auto& tr : model.last_trace()) {
        if (tr.name == expects[i].first) {
          found = true;
          ok = ok && tr.shape == std::vector<std::int64_t>{
                         2, cfg.channels[i], size / expects[i].second,
                         size / expects[i].second};
        }
      }
      ok = ok && found;
    }
    detail += std::to_string(size) + " ";
  }
  detail += ok ? "all verified (/1 /2 /4 /8 /16)" : "MISMATCH";
  report(5, ok, detail);
  CHECK(ok);
}

TEST_CASE("criterion 6: adaptive kernel rule") {
  const bool anchor = nn::adaptive_kernel(144.0, 3) == 9;
  bool property = true;
  Rng rng(601);
  std::uniform_real_distribution<double> dspan(8.0, 512.0);
  std::uniform_int_distribution<int> nspan(1, 5);
  for (int i = 0; i < 5000; ++i) {
    const int k = nn::adaptive_kernel(dspan(rng), nspan(rng));
    property = property && k >= 3 && k % 2 == 1;
  }
  char detail[128];
  std::snprintf(detail, sizeof(detail),
                "adaptive_kernel(144,3) = %d (want 9); odd and >= 3 over 5000 draws: %s",
                nn::adaptive_kernel(144.0, 3), property ? "yes" : "NO");
  report(6, anchor && property, detail);
  CHECK(anchor);
  CHECK(property);
}

TEST_CASE("criterion 7: loss, schedule and optimizer unit values") {
  // Loss at uniform 0.5 over a half-foreground 16-pixel mask.
  Tensor z = Tensor::zeros({1, 1, 4, 4}, DType::kF64);
  Tensor y = Tensor::zeros({1, 1, 4, 4}, DType::kF64);
  for (int i = 0; i < 8; ++i) y.set(i, 1.0);
  const double loss = bce_dice_loss(Var::leaf(z, false), y).value().get(0);
  const bool loss_ok = std::abs(loss - 0.84657) < 1e-4;

  const bool lr_ok = poly_lr(0, 1000) == 0.01 && poly_lr(1000, 1000) == 0.0 &&
                     std::abs(poly_lr(500, 1000) - 0.0053589) < 1e-7;

  Var w = Var::leaf(Tensor::full({1}, DType::kF64, 1.0), true);
  SgdOptimizer opt({{"w", w}}, SgdConfig{});
  w.node()->grad = Tensor::full({1}, DType::kF64, 1.0);
  opt.step(0.1);
  const double w1 = w.value().get(0);
  w.node()->grad = Tensor::full({1}, DType::kF64, 1.0);
  opt.step(0.1);
  const double w2 = w.value().get(0);
  const double v2 = 0.9 * 1.0001 + (1.0 + 1e-4 * 0.89999);
  const bool sgd_ok = std::abs(w1 - 0.89999) < 1e-9 &&
                      std::abs(w2 - (0.89999 - 0.1 * v2)) < 1e-9;

  char detail[192];
  std::snprintf(detail, sizeof(detail),
                "loss %.6f (0.84657 +- 1e-4: %s); poly_lr values: %s; sgd two-step: %s",
                loss, loss_ok ? "ok" : "NO", lr_ok ? "ok" : "NO", sgd_ok ? "ok" : "NO");
  report(7, loss_ok && lr_ok && sgd_ok, detail);
  CHECK(loss_ok);
  CHECK(lr_ok);
  CHECK(sgd_ok);
}

TEST_CASE("criterion 8: desk-scale learning") {
  const auto t0 = Clock::now();
  data::SynthSpec spec;
  spec.count = 200;
  spec.size = 64;
  spec.mean_diameter = 36.0;
  spec.seed = 8;
  const auto ds = data::synth_generate(spec);
  auto [train_set, val_set] = data::split(ds, 0.7, 8);

  nn::Model model = nn::Model::build(nn::tiny_config(), DType::kF32, 8);
  train::TrainPlan plan;
  plan.epochs = 30;
  plan.batch_size = 8;
  plan.seed = 8;
  const auto res = train::fit(model, train_set, val_set, plan);
  const double train_secs = seconds_since(t0);
  const bool iou_ok = res.best_val_iou >= 0.85;
  const bool time_ok = train_secs < 1800.0;

  // Single-sample overfit: loss < 0.05 within 500 iterations.
  nn::Model over = nn::Model::build(nn::tiny_config(), DType::kF32, 9);
  data::Dataset one = {ds[0]};
  train::TrainPlan oplan;
  oplan.epochs = 500;
  oplan.batch_size = 1;
  oplan.seed = 9;
  oplan.augment = false;
  const auto ores = train::fit(over, one, {}, oplan);
  const bool overfit_ok = ores.min_train_loss < 0.05;

  char detail[224];
  std::snprintf(detail, sizeof(detail),
                "val IoU %.4f after %d epochs (>= 0.85: %s) in %.0f s (< 1800: %s); "
                "overfit min loss %.4f (< 0.05: %s)",
                res.best_val_iou, res.epochs_run, iou_ok ? "ok" : "NO", train_secs,
                time_ok ? "ok" : "NO", ores.min_train_loss, overfit_ok ? "ok" : "NO");
  report(8, iou_ok && time_ok && overfit_ok, detail);
  CHECK(iou_ok);
  CHECK(time_ok);
  CHECK(overfit_ok);
}

TEST_CASE("criterion 9: determinism and persistence") {
  TempDir tmp;
  data::SynthSpec spec;
  spec.count = 24;
  spec.size = 32;
  spec.mean_diameter = 14.0;
  spec.seed = 91;
  const auto ds = data::synth_generate(spec);
  auto [train_set, val_set] = data::split(ds, 0.75, 91);

  nn::ModelConfig cfg = nn::tiny_config();
  cfg.input_size = 32;
  cfg.mean_diameter = 14.0;

  auto run = [&](const std::string& out) {
    nn::Model model = nn::Model::build(cfg, DType::kF32, 91);
    train::TrainPlan plan;
    plan.epochs = 3;
    plan.batch_size = 4;
    plan.seed = 91;
    plan.out_dir = out;
    return train::fit(model, train_set, val_set, plan);
  };
  const auto r1 = run((tmp.path / "a").string());
  const auto r2 = run((tmp.path / "b").string());
  const bool logs_ok = r1.log_lines == r2.log_lines &&
                       file_bytes(tmp.path / "a" / "train_log.txt") ==
                           file_bytes(tmp.path / "b" / "train_log.txt");
  const bool ckpt_ok = dirs_bitwise_equal(tmp.path / "a" / "checkpoint_final",
                                          tmp.path / "b" / "checkpoint_final");

  // Checkpoint save -> load -> save round-trips bitwise.
  nn::Model m1 = nn::Model::build(cfg, DType::kF32, 17);
  nn::save_checkpoint((tmp.path / "c1").string(), m1);
  nn::Model m2 = nn::Model::build(cfg, DType::kF32, 18);
  nn::load_checkpoint((tmp.path / "c1").string(), m2);
  nn::save_checkpoint((tmp.path / "c2").string(), m2);
  const bool reload_ok = dirs_bitwise_equal(tmp.path / "c1", tmp.path / "c2");

  // Image save -> load -> save reproduces the bytes exactly.
  Rng rng(901);
  Tensor img = rand_uniform({3, 24, 24}, DType::kF32, 0.0, 1.0, rng);
  data::save_image((tmp.path / "i1.ppm").string(), img);
  Tensor back = data::load_image((tmp.path / "i1.ppm").string());
  data::save_image((tmp.path / "i2.ppm").string(), back);
  const bool img_ok =
      file_bytes(tmp.path / "i1.ppm") == file_bytes(tmp.path / "i2.ppm");

  char detail[160];
  std::snprintf(detail, sizeof(detail),
                "same-seed logs identical: %s; checkpoints bitwise: %s; "
                "checkpoint reload bitwise: %s; image round-trip: %s",
                logs_ok ? "yes" : "NO", ckpt_ok ? "yes" : "NO",
                reload_ok ? "yes" : "NO", img_ok ? "yes" : "NO");
  report(9, logs_ok && ckpt_ok && reload_ok && img_ok, detail);
  CHECK(logs_ok);
  CHECK(ckpt_ok);
  CHECK(reload_ok);
  CHECK(img_ok);
}
