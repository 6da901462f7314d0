#include "mutr/blocks.hpp"

#include <cmath>

namespace mutr::nn {

using namespace mutr::ops;

Tensor conv_weight_init(std::int64_t cout, std::int64_t cin_per_group, int kh,
                        int kw, DType dt, Rng& rng) {
  const double fan_in = static_cast<double>(cin_per_group) * kh * kw;
  const double stddev = std::sqrt(2.0 / fan_in);
  return rand_normal({cout, cin_per_group, kh, kw}, dt, 0.0, stddev, rng);
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d Conv2d::make(std::int64_t cin, std::int64_t cout, int k, int stride,
                    int pad, int groups, bool bias, DType dt, Rng& rng) {
  Conv2d layer;
  layer.opts = Conv2dOpts{stride, pad, groups};
  layer.w = Var::leaf(conv_weight_init(cout, cin / groups, k, k, dt, rng), true);
  if (bias) layer.b = Var::leaf(Tensor::zeros({cout}, dt), true);
  return layer;
}

Var Conv2d::forward(const Var& x) const {
  return conv2d(x, w, b.defined() ? &b : nullptr, opts);
}

void Conv2d::collect(const std::string& prefix, std::vector<NamedVar>& out) const {
  out.push_back({prefix + ".w", w});
  if (b.defined()) out.push_back({prefix + ".b", b});
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

BatchNorm2d BatchNorm2d::make(std::int64_t c, DType dt) {
  BatchNorm2d bn;
  bn.gamma = Var::leaf(Tensor::full({c}, dt, 1.0), true);
  bn.beta = Var::leaf(Tensor::zeros({c}, dt), true);
  bn.state.running_mean = Tensor::zeros({c}, dt);
  bn.state.running_var = Tensor::full({c}, dt, 1.0);
  return bn;
}

Var BatchNorm2d::forward(const Var& x, bool train) {
  return batchnorm2d(x, gamma, beta, state, train);
}

void BatchNorm2d::collect(const std::string& prefix,
                          std::vector<NamedVar>& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

void BatchNorm2d::collect_buffers(const std::string& prefix,
                                  std::vector<NamedBuffer>& out) {
  out.push_back({prefix + ".running_mean", &state.running_mean});
  out.push_back({prefix + ".running_var", &state.running_var});
}

// ---------------------------------------------------------------------------
// ChannelNorm
// ---------------------------------------------------------------------------

ChannelNorm ChannelNorm::make(std::int64_t c, DType dt) {
  ChannelNorm n;
  n.gamma = Var::leaf(Tensor::full({c}, dt, 1.0), true);
  n.beta = Var::leaf(Tensor::zeros({c}, dt), true);
  return n;
}

Var ChannelNorm::forward(const Var& x) const {
  return layer_norm(x, 1, gamma, beta);
}

void ChannelNorm::collect(const std::string& prefix,
                          std::vector<NamedVar>& out) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

// ---------------------------------------------------------------------------
// Mhsa
// ---------------------------------------------------------------------------

Mhsa Mhsa::make(std::int64_t c, int heads, DType dt, Rng& rng) {
  if (heads <= 0 || c % heads != 0) {
    throw ConfigError("mhsa: channels " + std::to_string(c) +
                      " not divisible by heads " + std::to_string(heads));
  }
  Mhsa m;
  m.heads = heads;
  auto proj = [&] { return Var::leaf(rand_normal({c, c}, dt, 0.0, 0.02, rng), true); };
  auto bias = [&] { return Var::leaf(Tensor::zeros({c}, dt), true); };
  m.wq = proj(); m.bq = bias();
  m.wk = proj(); m.bk = bias();
  m.wv = proj(); m.bv = bias();
  m.wo = proj(); m.bo = bias();
  return m;
}

std::pair<Var, Var> Mhsa::forward_with_probs(const Var& x) const {
  const std::int64_t n = x.value().dim(0), c = x.value().dim(1);
  const std::int64_t hs = x.value().dim(2), ws = x.value().dim(3);
  const std::int64_t t = hs * ws;
  const std::int64_t d = c / heads;

  Var tok = reshape(x, {n, c, t});
  tok = permute(tok, {0, 2, 1});
  tok = reshape(tok, {n * t, c});

  auto split = [&](Var m) {
    m = reshape(m, {n, t, heads, d});
    m = permute(m, {0, 2, 1, 3});
    return reshape(m, {n * heads, t, d});
  };
  Var q = split(linear(tok, wq, &bq));
  Var k = split(linear(tok, wk, &bk));
  Var v = split(linear(tok, wv, &bv));

  Var kt = permute(k, {0, 2, 1});
  Var probs = softmax(scale(matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(d))), 2);
  Var ctx = matmul(probs, v);

  ctx = reshape(ctx, {n, heads, t, d});
  ctx = permute(ctx, {0, 2, 1, 3});
  ctx = reshape(ctx, {n * t, c});
  Var out = linear(ctx, wo, &bo);
  out = reshape(out, {n, t, c});
  out = permute(out, {0, 2, 1});
  return {reshape(out, {n, c, hs, ws}), probs};
}

Var Mhsa::forward(const Var& x) const { return forward_with_probs(x).first; }

void Mhsa::collect(const std::string& prefix, std::vector<NamedVar>& out) const {
  out.push_back({prefix + ".wq", wq});
  out.push_back({prefix + ".bq", bq});
  out.push_back({prefix + ".wk", wk});
  out.push_back({prefix + ".bk", bk});
  out.push_back({prefix + ".wv", wv});
  out.push_back({prefix + ".bv", bv});
  out.push_back({prefix + ".wo", wo});
  out.push_back({prefix + ".bo", bo});
}

// ---------------------------------------------------------------------------
// ConvUtrBlock
// ---------------------------------------------------------------------------

ConvUtrBlock ConvUtrBlock::make(std::int64_t c, int k, DType dt, Rng& rng) {
  ConvUtrBlock b;
  b.dw = Conv2d::make(c, c, k, 1, (k - 1) / 2, static_cast<int>(c), false, dt, rng);
  b.bn1 = BatchNorm2d::make(c, dt);
  b.pw1 = Conv2d::make(c, 4 * c, 1, 1, 0, 1, false, dt, rng);
  b.bn2 = BatchNorm2d::make(4 * c, dt);
  b.pw2 = Conv2d::make(4 * c, c, 1, 1, 0, 1, false, dt, rng);
  b.bn3 = BatchNorm2d::make(c, dt);
  return b;
}

Var ConvUtrBlock::forward(const Var& x, bool train) {
  Var y = add(bn1.forward(gelu(dw.forward(x)), train), x);
  Var z = bn2.forward(gelu(pw1.forward(y)), train);
  return add(bn3.forward(gelu(pw2.forward(z)), train), y);
}

void ConvUtrBlock::collect(const std::string& prefix,
                           std::vector<NamedVar>& out) const {
  dw.collect(prefix + ".dw", out);
  bn1.collect(prefix + ".bn1", out);
  pw1.collect(prefix + ".pw1", out);
  bn2.collect(prefix + ".bn2", out);
  pw2.collect(prefix + ".pw2", out);
  bn3.collect(prefix + ".bn3", out);
}

void ConvUtrBlock::collect_buffers(const std::string& prefix,
                                   std::vector<NamedBuffer>& out) {
  bn1.collect_buffers(prefix + ".bn1", out);
  bn2.collect_buffers(prefix + ".bn2", out);
  bn3.collect_buffers(prefix + ".bn3", out);
}

// ---------------------------------------------------------------------------
// LglBlock
// ---------------------------------------------------------------------------

LglBlock LglBlock::make(std::int64_t c, int local_kernel, int heads,
                        int sparse_stride, DType dt, Rng& rng) {
  if (sparse_stride < 1) throw ConfigError("lgl: sparse stride must be >= 1");
  LglBlock b;
  b.norm_local = ChannelNorm::make(c, dt);
  b.la_dw = Conv2d::make(c, c, local_kernel, 1, (local_kernel - 1) / 2,
                         static_cast<int>(c), true, dt, rng);
  b.la_pw = Conv2d::make(c, c, 1, 1, 0, 1, true, dt, rng);
  b.norm_attn = ChannelNorm::make(c, dt);
  b.attn = Mhsa::make(c, heads, dt, rng);
  b.sparse_stride = sparse_stride;
  if (sparse_stride > 1) {
    const int r = sparse_stride;
    b.lp_w = Var::leaf(conv_weight_init(c, 1, r, r, dt, rng), true);
    b.lp_b = Var::leaf(Tensor::zeros({c}, dt), true);
  }
  b.norm_ffn = ChannelNorm::make(c, dt);
  b.ffn1 = Conv2d::make(c, 4 * c, 1, 1, 0, 1, true, dt, rng);
  b.ffn2 = Conv2d::make(4 * c, c, 1, 1, 0, 1, true, dt, rng);
  return b;
}

Var LglBlock::globalsp(const Var& x1) const {
  Var t = stride_sample2d(x1, sparse_stride);
  t = norm_attn.forward(t);
  return attn.forward(t);
}

Var LglBlock::forward(const Var& x, bool train) {
  (void)train;
  Var x1 = add(x, la_pw.forward(la_dw.forward(norm_local.forward(x))));
  Var t = globalsp(x1);
  Var propagated =
      sparse_stride > 1
          ? conv2d_transpose(t, lp_w, &lp_b, sparse_stride,
                             static_cast<int>(x.value().dim(1)))
          : t;
  Var x3 = add(x1, propagated);
  return add(x3, ffn2.forward(gelu(ffn1.forward(norm_ffn.forward(x3)))));
}

void LglBlock::collect(const std::string& prefix, std::vector<NamedVar>& out) const {
  norm_local.collect(prefix + ".norm_local", out);
  la_dw.collect(prefix + ".la_dw", out);
  la_pw.collect(prefix + ".la_pw", out);
  norm_attn.collect(prefix + ".norm_attn", out);
  attn.collect(prefix + ".attn", out);
  if (lp_w.defined()) {
    out.push_back({prefix + ".lp.w", lp_w});
    out.push_back({prefix + ".lp.b", lp_b});
  }
  norm_ffn.collect(prefix + ".norm_ffn", out);
  ffn1.collect(prefix + ".ffn1", out);
  ffn2.collect(prefix + ".ffn2", out);
}

void LglBlock::collect_buffers(const std::string& prefix,
                               std::vector<NamedBuffer>& out) {
  (void)prefix;
  (void)out;  // layer norms carry no running state
}

// ---------------------------------------------------------------------------
// TransformerBlock
// ---------------------------------------------------------------------------

TransformerBlock TransformerBlock::make(std::int64_t c, int heads, DType dt,
                                        Rng& rng) {
  TransformerBlock b;
  b.norm1 = ChannelNorm::make(c, dt);
  b.attn = Mhsa::make(c, heads, dt, rng);
  b.norm2 = ChannelNorm::make(c, dt);
  b.ffn1 = Conv2d::make(c, 4 * c, 1, 1, 0, 1, true, dt, rng);
  b.ffn2 = Conv2d::make(4 * c, c, 1, 1, 0, 1, true, dt, rng);
  return b;
}

Var TransformerBlock::forward(const Var& x, bool train) {
  (void)train;
  Var x1 = add(x, attn.forward(norm1.forward(x)));
  return add(x1, ffn2.forward(gelu(ffn1.forward(norm2.forward(x1)))));
}

void TransformerBlock::collect(const std::string& prefix,
                               std::vector<NamedVar>& out) const {
  norm1.collect(prefix + ".norm1", out);
  attn.collect(prefix + ".attn", out);
  norm2.collect(prefix + ".norm2", out);
  ffn1.collect(prefix + ".ffn1", out);
  ffn2.collect(prefix + ".ffn2", out);
}

void TransformerBlock::collect_buffers(const std::string& prefix,
                                       std::vector<NamedBuffer>& out) {
  (void)prefix;
  (void)out;
}

// ---------------------------------------------------------------------------
// DecoderStage
// ---------------------------------------------------------------------------

DecoderStage DecoderStage::make(std::int64_t cin, std::int64_t cout,
                                std::int64_t skip_ch, bool has_stack, DType dt,
                                Rng& rng) {
  DecoderStage s;
  s.conv_up = Conv2d::make(cin, cout, 3, 1, 1, 1, false, dt, rng);
  s.bn_up = BatchNorm2d::make(cout, dt);
  s.has_stack = has_stack;
  s.skip_ch = skip_ch;
  if (has_stack) {
    s.fuse1 = Conv2d::make(cout + skip_ch, cout, 3, 1, 1, 1, false, dt, rng);
    s.bn_f1 = BatchNorm2d::make(cout, dt);
    s.fuse2 = Conv2d::make(cout, cout, 3, 1, 1, 1, false, dt, rng);
    s.bn_f2 = BatchNorm2d::make(cout, dt);
  }
  return s;
}

Var DecoderStage::fuse(const Var& decoder_feat, const Var& encoder_feat,
                       bool train) {
  Var z = decoder_feat;
  if (encoder_feat.defined()) {
    const Tensor& df = decoder_feat.value();
    const Tensor& ef = encoder_feat.value();
    if (ef.dim(2) != 2 * df.dim(2) || ef.dim(3) != 2 * df.dim(3)) {
      throw ConfigError("skip fusion: encoder feature " + ef.shape_str() +
                        " must be exactly 2x the decoder feature " +
                        df.shape_str());
    }
    z = concat_channels(decoder_feat, maxpool2d(encoder_feat));
  }
  z = bn_f1.forward(relu(fuse1.forward(z)), train);
  return bn_f2.forward(relu(fuse2.forward(z)), train);
}

Var DecoderStage::forward(const Var& x, const Var& skip, bool train) {
  Var y = relu(bn_up.forward(conv_up.forward(bilinear_upsample2x(x)), train));
  if (!has_stack) {
    if (skip.defined()) throw ConfigError("decoder stage without stack got a skip");
    return y;
  }
  return fuse(y, skip, train);
}

void DecoderStage::collect(const std::string& prefix,
                           std::vector<NamedVar>& out) const {
  conv_up.collect(prefix + ".up", out);
  bn_up.collect(prefix + ".bn_up", out);
  if (has_stack) {
    fuse1.collect(prefix + ".fuse1", out);
    bn_f1.collect(prefix + ".bn_f1", out);
    fuse2.collect(prefix + ".fuse2", out);
    bn_f2.collect(prefix + ".bn_f2", out);
  }
}

void DecoderStage::collect_buffers(const std::string& prefix,
                                   std::vector<NamedBuffer>& out) {
  bn_up.collect_buffers(prefix + ".bn_up", out);
  if (has_stack) {
    bn_f1.collect_buffers(prefix + ".bn_f1", out);
    bn_f2.collect_buffers(prefix + ".bn_f2", out);
  }
}

// ---------------------------------------------------------------------------
// PoolExpand
// ---------------------------------------------------------------------------

PoolExpand PoolExpand::make(std::int64_t cin, std::int64_t cout, DType dt,
                            Rng& rng) {
  PoolExpand p;
  p.conv = Conv2d::make(cin, cout, 3, 1, 1, 1, false, dt, rng);
  p.bn = BatchNorm2d::make(cout, dt);
  return p;
}

Var PoolExpand::forward(const Var& x, bool train) {
  return gelu(bn.forward(conv.forward(maxpool2d(x)), train));
}

void PoolExpand::collect(const std::string& prefix,
                         std::vector<NamedVar>& out) const {
  conv.collect(prefix + ".conv", out);
  bn.collect(prefix + ".bn", out);
}

void PoolExpand::collect_buffers(const std::string& prefix,
                                 std::vector<NamedBuffer>& out) {
  bn.collect_buffers(prefix + ".bn", out);
}

// ---------------------------------------------------------------------------
// adaptive kernel rule
// ---------------------------------------------------------------------------

int adaptive_kernel(double mean_diameter, int downsample_layers) {
  if (mean_diameter <= 0.0) {
    throw ConfigError("adaptive_kernel: mean diameter must be positive");
  }
  if (downsample_layers < 1) {
    throw ConfigError("adaptive_kernel: downsample layer count must be >= 1");
  }
  const double scaled = mean_diameter / std::exp2(downsample_layers + 1);
  int k = static_cast<int>(std::llround(scaled));
  if (k % 2 == 0) k += 1;
  if (k < 3) k = 3;
  return k;
}

}  // namespace mutr::nn
