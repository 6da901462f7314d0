#include <doctest.h>

#include <cmath>

#include "mutr/blocks.hpp"

using namespace mutr;
using namespace mutr::nn;

namespace {

void zero_all_weights(std::vector<NamedVar>& params) {
  for (auto& p : params) {
    // Leave norm scales at 1; zero every conv/projection weight and bias.
    if (p.name.find("gamma") == std::string::npos) {
      p.var.mutable_value().fill(0.0);
    }
  }
}

// Applies a spatial-position permutation to an [N,C,H,W] tensor.
Tensor permute_positions(const Tensor& x, const std::vector<std::int64_t>& pi) {
  const std::int64_t nc = x.dim(0) * x.dim(1);
  const std::int64_t t = x.dim(2) * x.dim(3);
  Tensor out(x.shape(), x.dtype());
  for (std::int64_t p = 0; p < nc; ++p) {
    for (std::int64_t i = 0; i < t; ++i) {
      out.set(p * t + pi[static_cast<size_t>(i)], x.get(p * t + i));
    }
  }
  return out;
}

// Dense multi-head self-attention, written from the definition with plain
// loops. Independent of the ops/autodiff stack.
Tensor dense_mhsa_oracle(const Tensor& x_nchw, const Mhsa& m) {
  const std::int64_t c = x_nchw.dim(1);
  const std::int64_t t = x_nchw.dim(2) * x_nchw.dim(3);
  const std::int64_t h = m.heads;
  const std::int64_t d = c / h;
  // tokens[t][c]
  std::vector<std::vector<double>> tok(static_cast<size_t>(t),
                                       std::vector<double>(static_cast<size_t>(c)));
  for (std::int64_t i = 0; i < t; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      tok[static_cast<size_t>(i)][static_cast<size_t>(ch)] = x_nchw.get(ch * t + i);
    }
  }
  auto project = [&](const Var& w, const Var& b) {
    std::vector<std::vector<double>> out(static_cast<size_t>(t),
                                         std::vector<double>(static_cast<size_t>(c)));
    for (std::int64_t i = 0; i < t; ++i) {
      for (std::int64_t j = 0; j < c; ++j) {
        double s = b.value().get(j);
        for (std::int64_t k = 0; k < c; ++k) {
          s += tok[static_cast<size_t>(i)][static_cast<size_t>(k)] *
               w.value().get(k * c + j);
        }
        out[static_cast<size_t>(i)][static_cast<size_t>(j)] = s;
      }
    }
    return out;
  };
  const auto q = project(m.wq, m.bq);
  const auto k = project(m.wk, m.bk);
  const auto v = project(m.wv, m.bv);
  std::vector<std::vector<double>> ctx(static_cast<size_t>(t),
                                       std::vector<double>(static_cast<size_t>(c)));
  for (std::int64_t hh = 0; hh < h; ++hh) {
    const std::int64_t off = hh * d;
    for (std::int64_t i = 0; i < t; ++i) {
      std::vector<double> scores(static_cast<size_t>(t));
      double mx = -1e300;
      for (std::int64_t u = 0; u < t; ++u) {
        double s = 0.0;
        for (std::int64_t e = 0; e < d; ++e) {
          s += q[static_cast<size_t>(i)][static_cast<size_t>(off + e)] *
               k[static_cast<size_t>(u)][static_cast<size_t>(off + e)];
        }
        s /= std::sqrt(static_cast<double>(d));
        scores[static_cast<size_t>(u)] = s;
        mx = std::max(mx, s);
      }
      double denom = 0.0;
      for (auto& s : scores) {
        s = std::exp(s - mx);
        denom += s;
      }
      for (std::int64_t e = 0; e < d; ++e) {
        double s = 0.0;
        for (std::int64_t u = 0; u < t; ++u) {
          s += scores[static_cast<size_t>(u)] / denom *
               v[static_cast<size_t>(u)][static_cast<size_t>(off + e)];
        }
        ctx[static_cast<size_t>(i)][static_cast<size_t>(off + e)] = s;
      }
    }
  }
  Tensor out(x_nchw.shape(), x_nchw.dtype());
  for (std::int64_t i = 0; i < t; ++i) {
    for (std::int64_t j = 0; j < c; ++j) {
      double s = m.bo.value().get(j);
      for (std::int64_t kk = 0; kk < c; ++kk) {
        s += ctx[static_cast<size_t>(i)][static_cast<size_t>(kk)] *
             m.wo.value().get(kk * c + j);
      }
      out.set(j * t + i, s);
    }
  }
  return out;
}

// Channel layer norm computed directly (eps matches the op default).
Tensor channel_norm_oracle(const Tensor& x, const ChannelNorm& n) {
  const std::int64_t c = x.dim(1);
  const std::int64_t t = x.dim(2) * x.dim(3);
  Tensor out(x.shape(), x.dtype());
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
      out.set(ch * t + i, n.gamma.value().get(ch) * (x.get(ch * t + i) - mean) * inv +
                              n.beta.value().get(ch));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("adaptive kernel rule") {
  CHECK(adaptive_kernel(144.0, 3) == 9);
  CHECK(adaptive_kernel(160.0, 4) == 5);
  CHECK(adaptive_kernel(16.0, 3) == 3);  // clamped up from 1
  CHECK_THROWS_AS(adaptive_kernel(-1.0, 3), ConfigError);
  CHECK_THROWS_AS(adaptive_kernel(10.0, 0), ConfigError);
  // Always odd and >= 3 across the full parameter range.
  Rng rng(61);
  std::uniform_real_distribution<double> dspan(8.0, 512.0);
  std::uniform_int_distribution<int> nspan(1, 5);
  for (int i = 0; i < 2000; ++i) {
    const int k = adaptive_kernel(dspan(rng), nspan(rng));
    CHECK(k >= 3);
    CHECK(k % 2 == 1);
  }
}

TEST_CASE("convutr block preserves shape") {
  Rng rng(62);
  auto block = ConvUtrBlock::make(6, 7, DType::kF32, rng);
  Var x = Var::leaf(rand_uniform({2, 6, 8, 8}, DType::kF32, -1.0, 1.0, rng), false);
  Tensor y = block.forward(x, true).value();
  CHECK(y.shape() == x.value().shape());
}

TEST_CASE("convutr block with zero weights and identity BN stats is identity") {
  Rng rng(63);
  auto block = ConvUtrBlock::make(5, 3, DType::kF64, rng);
  std::vector<NamedVar> params;
  block.collect("b", params);
  zero_all_weights(params);
  Var x = Var::leaf(rand_uniform({1, 5, 6, 6}, DType::kF64, -2.0, 2.0, rng), false);
  Tensor y = block.forward(x, false).value();  // eval: fresh running stats are identity
  CHECK(max_abs_diff(y, x.value()) == 0.0);
}

TEST_CASE("transformer block with zero projection weights is a pure residual") {
  Rng rng(64);
  auto block = TransformerBlock::make(8, 4, DType::kF64, rng);
  std::vector<NamedVar> params;
  block.collect("b", params);
  zero_all_weights(params);
  Var x = Var::leaf(rand_uniform({2, 8, 4, 4}, DType::kF64, -1.0, 1.0, rng), false);
  Tensor y = block.forward(x, false).value();
  CHECK(max_abs_diff(y, x.value()) == 0.0);
}

TEST_CASE("transformer block is permutation-equivariant over token order") {
  Rng rng(65);
  auto block = TransformerBlock::make(8, 2, DType::kF64, rng);
  Var x = Var::leaf(rand_uniform({1, 8, 2, 4}, DType::kF64, -1.0, 1.0, rng), false);
  const std::int64_t t = 8;
  std::vector<std::int64_t> pi(static_cast<size_t>(t));
  for (std::int64_t i = 0; i < t; ++i) pi[static_cast<size_t>(i)] = i;
  for (std::size_t i = pi.size(); i > 1; --i) std::swap(pi[i - 1], pi[rng() % i]);

  Tensor y = block.forward(x, false).value();
  Var xp = Var::leaf(permute_positions(x.value(), pi), false);
  Tensor yp = block.forward(xp, false).value();
  CHECK(max_abs_diff(yp, permute_positions(y, pi)) < 1e-6);
}

TEST_CASE("mhsa attention rows sum to 1") {
  Rng rng(66);
  auto m = Mhsa::make(8, 4, DType::kF32, rng);
  Var x = Var::leaf(rand_uniform({2, 8, 4, 4}, DType::kF32, -1.0, 1.0, rng), false);
  auto [out, probs] = m.forward_with_probs(x);
  CHECK(out.value().shape() == x.value().shape());
  const std::int64_t rows = probs.value().dim(0) * probs.value().dim(1);
  const std::int64_t t = probs.value().dim(2);
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::int64_t u = 0; u < t; ++u) {
      const double v = probs.value().get(r * t + u);
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("lgl block preserves shape on [1,64,16,16]") {
  Rng rng(67);
  auto block = LglBlock::make(64, 9, 4, 2, DType::kF32, rng);
  Var x = Var::leaf(rand_uniform({1, 64, 16, 16}, DType::kF32, -1.0, 1.0, rng), false);
  Tensor y = block.forward(x, false).value();
  CHECK(y.shape() == x.value().shape());
}

TEST_CASE("globalsp with stride 1 matches the dense attention oracle on 8x8") {
  Rng rng(68);
  auto block = LglBlock::make(16, 3, 4, 1, DType::kF64, rng);
  Var x1 = Var::leaf(rand_uniform({1, 16, 8, 8}, DType::kF64, -1.0, 1.0, rng), false);
  Tensor got = block.globalsp(x1).value();
  const Tensor normed = channel_norm_oracle(x1.value(), block.norm_attn);
  const Tensor expect = dense_mhsa_oracle(normed, block.attn);
  CHECK(max_abs_diff(got, expect) < 1e-6);
}

TEST_CASE("decoder stage doubles resolution; four stages recover 16x") {
  Rng rng(69);
  auto s1 = DecoderStage::make(8, 8, 0, true, DType::kF32, rng);
  auto s2 = DecoderStage::make(8, 8, 0, true, DType::kF32, rng);
  auto s3 = DecoderStage::make(8, 8, 0, true, DType::kF32, rng);
  auto s4 = DecoderStage::make(8, 8, 0, false, DType::kF32, rng);
  Var x = Var::leaf(rand_uniform({1, 8, 2, 2}, DType::kF32, -1.0, 1.0, rng), false);
  Var h = s1.forward(x, Var(), true);
  CHECK(h.value().shape() == std::vector<std::int64_t>{1, 8, 4, 4});
  h = s2.forward(h, Var(), true);
  h = s3.forward(h, Var(), true);
  h = s4.forward(h, Var(), true);
  CHECK(h.value().shape() == std::vector<std::int64_t>{1, 8, 32, 32});
}

TEST_CASE("skip fusion consumes decoder+skip channels and halves the skip") {
  Rng rng(70);
  // Cd = 64, Ce = 64 -> first fusion conv sees 128 input channels.
  auto stage = DecoderStage::make(128, 64, 64, true, DType::kF32, rng);
  CHECK(stage.fuse1.w.value().shape() == std::vector<std::int64_t>{64, 128, 3, 3});
  Var x = Var::leaf(rand_uniform({1, 128, 4, 4}, DType::kF32, -1.0, 1.0, rng), false);
  Var skip = Var::leaf(rand_uniform({1, 64, 16, 16}, DType::kF32, -1.0, 1.0, rng), false);
  Tensor y = stage.forward(x, skip, true).value();
  CHECK(y.shape() == std::vector<std::int64_t>{1, 64, 8, 8});
  // Mismatched skip resolution is refused.
  Var bad = Var::leaf(rand_uniform({1, 64, 32, 32}, DType::kF32, -1.0, 1.0, rng), false);
  CHECK_THROWS_AS(stage.forward(x, bad, true), ConfigError);
}
