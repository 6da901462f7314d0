#include <doctest.h>

#include <cmath>

#include "mutr/loss.hpp"
#include "mutr/optim.hpp"

using namespace mutr;

namespace {

Tensor logits_like(const std::vector<double>& v) {
  Tensor t({1, 1, 4, 4}, DType::kF64);
  for (std::size_t i = 0; i < v.size(); ++i) t.set(static_cast<std::int64_t>(i), v[i]);
  return t;
}

}  // namespace

TEST_CASE("loss vanishes at saturated perfect prediction") {
  std::vector<double> z(16), y(16);
  for (int i = 0; i < 16; ++i) {
    const bool fg = i % 3 == 0;
    z[static_cast<size_t>(i)] = fg ? 40.0 : -40.0;
    y[static_cast<size_t>(i)] = fg ? 1.0 : 0.0;
  }
  Tensor target = logits_like(y);
  const double l = bce_dice_loss(Var::leaf(logits_like(z), false), target).value().get(0);
  CHECK(l >= 0.0);
  CHECK(l < 1e-6);
}

TEST_CASE("uniform 0.5 prediction on a half-foreground 16-pixel mask") {
  std::vector<double> z(16, 0.0), y(16, 0.0);
  for (int i = 0; i < 8; ++i) y[static_cast<size_t>(i)] = 1.0;
  const double l = bce_dice_loss(Var::leaf(logits_like(z), false), logits_like(y))
                       .value().get(0);
  // 0.5*ln(2) + 0.5
  CHECK(l == doctest::Approx(0.84657).epsilon(0).scale(0).epsilon(1.2e-4));
  CHECK(std::abs(l - (0.5 * std::log(2.0) + 0.5)) < 1e-6);
}

TEST_CASE("empty target with strongly negative logits costs nearly nothing") {
  std::vector<double> z(16, -40.0), y(16, 0.0);
  const double l = bce_dice_loss(Var::leaf(logits_like(z), false), logits_like(y))
                       .value().get(0);
  CHECK(l < 1e-6);
}

TEST_CASE("loss is positive away from perfect prediction") {
  Rng rng(81);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor z = rand_uniform({1, 1, 4, 4}, DType::kF64, -3.0, 3.0, rng);
    Tensor y({1, 1, 4, 4}, DType::kF64);
    for (std::int64_t i = 0; i < 16; ++i) y.set(i, rng() % 2 ? 1.0 : 0.0);
    CHECK(bce_dice_loss(Var::leaf(z, false), y).value().get(0) > 0.0);
  }
}

TEST_CASE("loss rejects shape mismatch and non-binary targets") {
  Tensor z = Tensor::zeros({1, 1, 4, 4}, DType::kF64);
  CHECK_THROWS_AS(
      bce_dice_loss(Var::leaf(z, false), Tensor::zeros({1, 1, 2, 2}, DType::kF64)),
      InputError);
  Tensor bad = Tensor::full({1, 1, 4, 4}, DType::kF64, 0.5);
  CHECK_THROWS_AS(bce_dice_loss(Var::leaf(z, false), bad), InputError);
}

TEST_CASE("poly learning rate schedule") {
  CHECK(poly_lr(0, 1000) == 0.01);
  CHECK(poly_lr(1000, 1000) == 0.0);
  CHECK(poly_lr(2000, 1000) == 0.0);  // clamp past the end
  CHECK(std::abs(poly_lr(500, 1000) - 0.0053589) < 1e-7);
  // Non-increasing over the whole range.
  double prev = 1e9;
  for (int i = 0; i <= 1000; i += 7) {
    const double lr = poly_lr(i, 1000);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(poly_lr(-1, 100), ConfigError);
}

TEST_CASE("sgd: decay-only step with zero gradient") {
  Var w = Var::leaf(Tensor::full({1}, DType::kF64, 2.0), true);
  SgdOptimizer opt({{"w", w}}, SgdConfig{});
  w.node()->grad = Tensor::zeros({1}, DType::kF64);
  opt.step(0.1);
  CHECK(w.value().get(0) == doctest::Approx(2.0 - 0.1 * 1e-4 * 2.0).epsilon(1e-12));
}

TEST_CASE("sgd: hand-computed one and two step values") {
  Var w = Var::leaf(Tensor::full({1}, DType::kF64, 1.0), true);
  SgdOptimizer opt({{"w", w}}, SgdConfig{});
  w.node()->grad = Tensor::full({1}, DType::kF64, 1.0);
  opt.step(0.1);
  CHECK(std::abs(w.value().get(0) - 0.89999) < 1e-9);

  // Second step with gradient 1 again, following the same recurrence.
  const double w1 = 0.89999;
  const double v1 = 1.0001;
  const double g2 = 1.0 + 1e-4 * w1;
  const double v2 = 0.9 * v1 + g2;
  const double w2 = w1 - 0.1 * v2;
  w.node()->grad = Tensor::full({1}, DType::kF64, 1.0);
  opt.step(0.1);
  CHECK(std::abs(w.value().get(0) - w2) < 1e-9);
}

TEST_CASE("sgd flags non-finite gradients with the parameter name") {
  Var w = Var::leaf(Tensor::full({2}, DType::kF64, 1.0), true);
  SgdOptimizer opt({{"enc1.0.dw.w", w}}, SgdConfig{});
  Tensor g = Tensor::zeros({2}, DType::kF64);
  g.set(1, std::numeric_limits<double>::quiet_NaN());
  w.node()->grad = g;
  CHECK_THROWS_WITH_AS(opt.step(0.1), doctest::Contains("enc1.0.dw.w"), NumericError);
}

TEST_CASE("plain sgd descends a convex quadratic") {
  // f(w) = (w - 3)^2 with wd = 0, momentum = 0.
  Var w = Var::leaf(Tensor::zeros({1}, DType::kF64), true);
  SgdConfig cfg;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  SgdOptimizer opt({{"w", w}}, cfg);
  double prev_f = 9.0;
  for (int i = 0; i < 50; ++i) {
    const double wv = w.value().get(0);
    w.node()->grad = Tensor::full({1}, DType::kF64, 2.0 * (wv - 3.0));
    opt.step(0.1);
    const double f = (w.value().get(0) - 3.0) * (w.value().get(0) - 3.0);
    CHECK(f <= prev_f + 1e-12);
    prev_f = f;
  }
  CHECK(prev_f < 1e-3);
}

TEST_CASE("optimizer state round-trips") {
  Rng rng(82);
  Var w = Var::leaf(rand_uniform({3}, DType::kF64, -1.0, 1.0, rng), true);
  SgdOptimizer opt({{"w", w}}, SgdConfig{});
  w.node()->grad = rand_uniform({3}, DType::kF64, -1.0, 1.0, rng);
  opt.step(0.05);
  const auto st = opt.state();
  SgdOptimizer opt2({{"w", w}}, SgdConfig{});
  opt2.load_state(st);
  CHECK(opt2.state()[0].second.same_bits(st[0].second));
}
