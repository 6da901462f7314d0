#pragma once

#include "mutr/autodiff.hpp"

namespace mutr::ops {

struct Conv2dOpts {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

// Cross-correlation (no kernel flip), zero padding.
// x: [N,Cin,H,W], w: [Cout,Cin/groups,kh,kw], bias: [Cout] or null.
Var conv2d(const Var& x, const Var& w, const Var* bias, const Conv2dOpts& o);

// Adjoint of a strided conv2d; only kernel == stride is supported.
// x: [N,Cin,H,W], w: [Cin,Cout/groups,k,k] -> [N,Cout,H*k,W*k].
Var conv2d_transpose(const Var& x, const Var& w, const Var* bias, int stride,
                     int groups = 1);

// 2x2 window, stride 2; ties go to the first element in row-major order.
Var maxpool2d(const Var& x);

// Half-pixel centers, edge-clamped. [N,C,H,W] -> [N,C,2H,2W].
Var bilinear_upsample2x(const Var& x);

struct BatchNormState {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  double momentum = 0.1;
  double eps = 1e-5;
};

// Train mode normalizes with batch statistics and updates the running stats;
// eval mode normalizes with the running stats. Affine transform last.
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta,
                BatchNormState& state, bool train);

Var layer_norm(const Var& x, int axis, const Var& gamma, const Var& beta,
               double eps = 1e-5);
Var softmax(const Var& x, int axis);

Var relu(const Var& x);
Var gelu(const Var& x);  // exact erf form
Var sigmoid(const Var& x);

Var add(const Var& a, const Var& b);  // same shape
Var mul(const Var& a, const Var& b);  // same shape
Var scale(const Var& x, double alpha);

// Batched: [B...,M,K] x [B...,K,N] with identical leading dims.
Var matmul(const Var& a, const Var& b);
// x: [M,K], w: [K,N], bias: [N] or null -> [M,N].
Var linear(const Var& x, const Var& w, const Var* bias);

Var reshape(const Var& x, std::vector<std::int64_t> shape);
Var permute(const Var& x, std::vector<int> perm);
Var concat_channels(const Var& a, const Var& b);  // NCHW, axis 1
// x[:, :, ::r, ::r]; spatial dims must be divisible by r.
Var stride_sample2d(const Var& x, int r);

Var sum(const Var& x);  // scalar

}  // namespace mutr::ops
