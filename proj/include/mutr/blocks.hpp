#pragma once

#include <optional>

#include "mutr/gradcheck.hpp"
#include "mutr/ops.hpp"

namespace mutr::nn {

// Named handle to a batch-norm running statistic for checkpointing.
struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

struct Conv2d {
  Var w;  // [Cout, Cin/groups, k, k]
  Var b;  // undefined when constructed without bias
  ops::Conv2dOpts opts;

  static Conv2d make(std::int64_t cin, std::int64_t cout, int k, int stride,
                     int pad, int groups, bool bias, DType dt, Rng& rng);
  Var forward(const Var& x) const;
  void collect(const std::string& prefix, std::vector<NamedVar>& out) const;
};

struct BatchNorm2d {
  Var gamma, beta;
  ops::BatchNormState state;

  static BatchNorm2d make(std::int64_t c, DType dt);
  Var forward(const Var& x, bool train);
  void collect(const std::string& prefix, std::vector<NamedVar>& out) const;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
};

// Layer normalization over the channel axis of N,C,H,W maps.
struct ChannelNorm {
  Var gamma, beta;

  static ChannelNorm make(std::int64_t c, DType dt);
  Var forward(const Var& x) const;
  void collect(const std::string& prefix, std::vector<NamedVar>& out) const;
};

struct Mhsa {
  Var wq, bq, wk, bk, wv, bv, wo, bo;  // all [C,C] / [C]
  int heads = 1;

  static Mhsa make(std::int64_t c, int heads, DType dt, Rng& rng);
  Var forward(const Var& x) const;  // x: [N,C,H,W], shape preserved
  // Also returns the attention probabilities [N*heads, T, T].
  std::pair<Var, Var> forward_with_probs(const Var& x) const;
  void collect(const std::string& prefix, std::vector<NamedVar>& out) const;
};

// Depthwise + residual, then two pointwise convs (4x hidden) + residual;
// each conv is followed by GELU then batch norm.
struct ConvUtrBlock {
  Conv2d dw;
  BatchNorm2d bn1;
  Conv2d pw1;  // C -> 4C
  BatchNorm2d bn2;
  Conv2d pw2;  // 4C -> C
  BatchNorm2d bn3;

  static ConvUtrBlock make(std::int64_t c, int k, DType dt, Rng& rng);
  Var forward(const Var& x, bool train);
  void collect(const std::string& prefix, std::vector<NamedVar>& out) const;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
};

// LocalAgg -> GlobalSP (sparse-grid MHSA) -> LocalPro -> FFN, with pre-norm
// residual branches. sparse_stride 1 runs dense attention with the
// propagation step as identity.
struct LglBlock {
  ChannelNorm norm_local;
  Conv2d la_dw;  // depthwise K x K
  Conv2d la_pw;  // pointwise
  ChannelNorm norm_attn;
  Mhsa attn;
  Var lp_w, lp_b;  // depthwise transposed conv [C,1,r,r]
  int sparse_stride = 2;
  ChannelNorm norm_ffn;
  Conv2d ffn1, ffn2;

  static LglBlock make(std::int64_t c, int local_kernel, int heads,
                       int sparse_stride, DType dt, Rng& rng);
  Var forward(const Var& x, bool train);
  // The attention sub-step on the sparse token grid (norm -> MHSA), before
  // propagation back to the full grid. Exposed for the dense-attention oracle.
  Var globalsp(const Var& x1) const;
  void collect(const std::string& prefix, std::vector<NamedVar>& out) const;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
};

struct TransformerBlock {
  ChannelNorm norm1;
  Mhsa attn;
  ChannelNorm norm2;
  Conv2d ffn1, ffn2;  // pointwise, 4x hidden

  static TransformerBlock make(std::int64_t c, int heads, DType dt, Rng& rng);
  Var forward(const Var& x, bool train);
  void collect(const std::string& prefix, std::vector<NamedVar>& out) const;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
};

// Bilinear 2x upsample -> 3x3 conv -> BN -> ReLU, then a two-conv fusion
// stack (conv -> ReLU -> BN each). A supplied skip is max-pooled 2x and
// concatenated before the stack. The last decoder stage has no stack.
struct DecoderStage {
  Conv2d conv_up;
  BatchNorm2d bn_up;
  bool has_stack = false;
  std::int64_t skip_ch = 0;
  Conv2d fuse1;
  BatchNorm2d bn_f1;
  Conv2d fuse2;
  BatchNorm2d bn_f2;

  static DecoderStage make(std::int64_t cin, std::int64_t cout,
                           std::int64_t skip_ch, bool has_stack, DType dt,
                           Rng& rng);
  Var forward(const Var& x, const Var& skip, bool train);
  // Pool + concat + two-conv stack on an already upsampled feature.
  Var fuse(const Var& decoder_feat, const Var& encoder_feat, bool train);
  void collect(const std::string& prefix, std::vector<NamedVar>& out) const;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
};

// Max-pool 2x followed by a channel-expansion conv + BN + GELU.
struct PoolExpand {
  Conv2d conv;
  BatchNorm2d bn;

  static PoolExpand make(std::int64_t cin, std::int64_t cout, DType dt, Rng& rng);
  Var forward(const Var& x, bool train);
  void collect(const std::string& prefix, std::vector<NamedVar>& out) const;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
};

// Receptive-field rule for the LocalAgg kernel: round(mean_diameter /
// 2^(n+1)), bumped to odd, clamped to >= 3.
int adaptive_kernel(double mean_diameter, int downsample_layers);

// He-normal conv weight; matches GELU/ReLU stacks.
Tensor conv_weight_init(std::int64_t cout, std::int64_t cin_per_group, int kh,
                        int kw, DType dt, Rng& rng);

}  // namespace mutr::nn
