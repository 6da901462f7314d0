#include "mutr/ops.hpp"

#include <cmath>
#include <cstring>

#include "mutr/kernels.hpp"

namespace mutr::ops {

using detail::accum_grad;
using detail::ensure_finite;
using detail::grad_recording;
using detail::make_output;

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check_dtype(const Var& a, const Var& b, const char* op) {
  if (a.value().dtype() != b.value().dtype()) {
    throw ConfigError(std::string(op) + ": dtype mismatch");
  }
}

template <class T>
void transpose2d(const T* src, std::int64_t rows, std::int64_t cols, T* dst) {
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      dst[c * rows + r] = src[r * cols + c];
    }
  }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

struct ConvDims {
  std::int64_t n, cin, h, w;
  std::int64_t cout, cg, kh, kw;  // cg = cin / groups
  std::int64_t ho, wo;
  int stride, pad, groups;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Conv2dOpts& o) {
  if (x.rank() != 4) throw ConfigError("conv2d: input must be N,C,H,W, got " + x.shape_str());
  if (w.rank() != 4) throw ConfigError("conv2d: weight must be rank 4, got " + w.shape_str());
  ConvDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = o.stride;
  d.pad = o.pad;
  d.groups = o.groups;
  if (o.groups <= 0 || o.stride <= 0 || o.pad < 0) {
    throw ConfigError("conv2d: stride/pad/groups out of range");
  }
  if (d.cin % o.groups != 0 || d.cout % o.groups != 0) {
    throw ConfigError("conv2d: channels not divisible by groups");
  }
  d.cg = d.cin / o.groups;
  if (w.dim(1) != d.cg) {
    throw ConfigError("conv2d: weight in-channels " + std::to_string(w.dim(1)) +
                      " != Cin/groups " + std::to_string(d.cg));
  }
  if (d.h + 2 * d.pad < d.kh || d.w + 2 * d.pad < d.kw) {
    throw ConfigError("conv2d: padded extent smaller than kernel");
  }
  d.ho = (d.h + 2 * d.pad - d.kh) / d.stride + 1;
  d.wo = (d.w + 2 * d.pad - d.kw) / d.stride + 1;
  return d;
}

template <class T>
void im2col(const T* x_group, const ConvDims& d, T* col) {
  const std::int64_t plane = d.h * d.w;
  const std::int64_t np = d.ho * d.wo;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < d.cg; ++c) {
    const T* src = x_group + c * plane;
    for (std::int64_t r = 0; r < d.kh; ++r) {
      for (std::int64_t s = 0; s < d.kw; ++s, ++row) {
        T* dst = col + row * np;
        for (std::int64_t oh = 0; oh < d.ho; ++oh) {
          const std::int64_t ih = oh * d.stride - d.pad + r;
          T* drow = dst + oh * d.wo;
          if (ih < 0 || ih >= d.h) {
            std::memset(drow, 0, sizeof(T) * static_cast<size_t>(d.wo));
            continue;
          }
          const T* srow = src + ih * d.w;
          for (std::int64_t ow = 0; ow < d.wo; ++ow) {
            const std::int64_t iw = ow * d.stride - d.pad + s;
            drow[ow] = (iw >= 0 && iw < d.w) ? srow[iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvDims& d, T* x_group) {
  const std::int64_t plane = d.h * d.w;
  const std::int64_t np = d.ho * d.wo;
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < d.cg; ++c) {
    T* dst = x_group + c * plane;
    for (std::int64_t r = 0; r < d.kh; ++r) {
      for (std::int64_t s = 0; s < d.kw; ++s, ++row) {
        const T* src = col + row * np;
        for (std::int64_t oh = 0; oh < d.ho; ++oh) {
          const std::int64_t ih = oh * d.stride - d.pad + r;
          if (ih < 0 || ih >= d.h) continue;
          T* drow = dst + ih * d.w;
          const T* srow = src + oh * d.wo;
          for (std::int64_t ow = 0; ow < d.wo; ++ow) {
            const std::int64_t iw = ow * d.stride - d.pad + s;
            if (iw >= 0 && iw < d.w) drow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

template <class T>
Tensor conv2d_fwd(const Tensor& x, const Tensor& w, const Tensor* b,
                  const ConvDims& d) {
  Tensor out({d.n, d.cout, d.ho, d.wo}, x.dtype());
  const std::int64_t np = d.ho * d.wo;
  const std::int64_t kck = d.cg * d.kh * d.kw;
  const std::int64_t coutg = d.cout / d.groups;
  const bool pointwise = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0;
  std::vector<T> col;
  if (!pointwise) col.resize(static_cast<size_t>(kck * np));
  const T* xp = x.data<T>();
  const T* wp = w.data<T>();
  T* op = out.data<T>();
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (int g = 0; g < d.groups; ++g) {
      const T* xg = xp + (n * d.cin + g * d.cg) * d.h * d.w;
      const T* colp = xg;
      if (!pointwise) {
        im2col(xg, d, col.data());
        colp = col.data();
      }
      T* og = op + (n * d.cout + g * coutg) * np;
      kern::gemm<T>(wp + g * coutg * kck, colp, og, coutg, np, kck, false);
    }
    if (b != nullptr) {
      const T* bp = b->data<T>();
      for (std::int64_t co = 0; co < d.cout; ++co) {
        T* row = op + (n * d.cout + co) * np;
        const T bv = bp[co];
        for (std::int64_t p = 0; p < np; ++p) row[p] += bv;
      }
    }
  }
  return out;
}

template <class T>
void conv2d_bwd(const Tensor& x, const Tensor& w, const Tensor& dy,
                const ConvDims& d, Tensor* dx, Tensor* dw, Tensor* db) {
  const std::int64_t np = d.ho * d.wo;
  const std::int64_t kck = d.cg * d.kh * d.kw;
  const std::int64_t coutg = d.cout / d.groups;
  const bool pointwise = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0;
  const T* xp = x.data<T>();
  const T* wp = w.data<T>();
  const T* dyp = dy.data<T>();

  if (db != nullptr) {
    T* dbp = db->data<T>();
    for (std::int64_t n = 0; n < d.n; ++n) {
      for (std::int64_t co = 0; co < d.cout; ++co) {
        const T* row = dyp + (n * d.cout + co) * np;
        double s = 0.0;
        for (std::int64_t p = 0; p < np; ++p) s += row[p];
        dbp[co] += static_cast<T>(s);
      }
    }
  }

  std::vector<T> col, colt, wgt, dcol;
  if (dw != nullptr) {
    if (!pointwise) col.resize(static_cast<size_t>(kck * np));
    colt.resize(static_cast<size_t>(kck * np));
  }
  if (dx != nullptr) {
    wgt.resize(static_cast<size_t>(kck * coutg));
    if (!pointwise) dcol.resize(static_cast<size_t>(kck * np));
  }

  for (int g = 0; g < d.groups; ++g) {
    if (dx != nullptr) {
      transpose2d(wp + g * coutg * kck, coutg, kck, wgt.data());
    }
    for (std::int64_t n = 0; n < d.n; ++n) {
      const T* xg = xp + (n * d.cin + g * d.cg) * d.h * d.w;
      const T* dyg = dyp + (n * d.cout + g * coutg) * np;
      if (dw != nullptr) {
        const T* colp = xg;
        if (!pointwise) {
          im2col(xg, d, col.data());
          colp = col.data();
        }
        transpose2d(colp, kck, np, colt.data());
        kern::gemm<T>(dyg, colt.data(), dw->data<T>() + g * coutg * kck, coutg,
                      kck, np, true);
      }
      if (dx != nullptr) {
        T* dxg = dx->data<T>() + (n * d.cin + g * d.cg) * d.h * d.w;
        if (pointwise) {
          kern::gemm<T>(wgt.data(), dyg, dxg, kck, np, coutg, true);
        } else {
          kern::gemm<T>(wgt.data(), dyg, dcol.data(), kck, np, coutg, false);
          col2im_add(dcol.data(), d, dxg);
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var* bias, const Conv2dOpts& o) {
  check_dtype(x, w, "conv2d");
  const ConvDims d = conv_dims(x.value(), w.value(), o);
  const Tensor* bt = nullptr;
  if (bias != nullptr && bias->defined()) {
    if (bias->value().numel() != d.cout) {
      throw ConfigError("conv2d: bias size != Cout");
    }
    bt = &bias->value();
  }
  Tensor out = x.value().dtype() == DType::kF32
                   ? conv2d_fwd<float>(x.value(), w.value(), bt, d)
                   : conv2d_fwd<double>(x.value(), w.value(), bt, d);
  ensure_finite(out, "conv2d");

  const bool rec = grad_recording({&x, &w, bias});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), wn = w.node(), yn = y.node();
    auto bn = (bias != nullptr && bias->defined()) ? bias->node() : nullptr;
    Tape::current()->record([xn, wn, bn, yn, d] {
      if (!yn->grad.defined()) return;
      const DType dt = yn->value.dtype();
      Tensor dx, dw, db;
      if (xn->needs_grad) dx = Tensor::zeros(xn->value.shape(), dt);
      if (wn->needs_grad) dw = Tensor::zeros(wn->value.shape(), dt);
      if (bn && bn->needs_grad) db = Tensor::zeros(bn->value.shape(), dt);
      if (dt == DType::kF32) {
        conv2d_bwd<float>(xn->value, wn->value, yn->grad, d,
                          dx.defined() ? &dx : nullptr,
                          dw.defined() ? &dw : nullptr,
                          db.defined() ? &db : nullptr);
      } else {
        conv2d_bwd<double>(xn->value, wn->value, yn->grad, d,
                           dx.defined() ? &dx : nullptr,
                           dw.defined() ? &dw : nullptr,
                           db.defined() ? &db : nullptr);
      }
      if (dx.defined()) accum_grad(xn, std::move(dx));
      if (dw.defined()) accum_grad(wn, std::move(dw));
      if (db.defined()) accum_grad(bn, std::move(db));
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// conv2d_transpose (kernel == stride)
// ---------------------------------------------------------------------------

namespace {

struct ConvTDims {
  std::int64_t n, cin, h, w, cout, coutg, cing;
  int k, groups;
};

ConvTDims convt_dims(const Tensor& x, const Tensor& w, int stride, int groups) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ConfigError("conv2d_transpose: inputs must be rank 4");
  }
  ConvTDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.k = stride;
  d.groups = groups;
  if (w.dim(0) != d.cin) throw ConfigError("conv2d_transpose: weight Cin mismatch");
  if (w.dim(2) != stride || w.dim(3) != stride) {
    throw ConfigError("conv2d_transpose: only kernel == stride is supported");
  }
  if (groups <= 0 || d.cin % groups != 0) {
    throw ConfigError("conv2d_transpose: channels not divisible by groups");
  }
  d.cing = d.cin / groups;
  d.coutg = w.dim(1);
  d.cout = d.coutg * groups;
  return d;
}

template <class T>
Tensor convt_fwd(const Tensor& x, const Tensor& w, const Tensor* b,
                 const ConvTDims& d) {
  Tensor out = Tensor::zeros({d.n, d.cout, d.h * d.k, d.w * d.k}, x.dtype());
  const T* xp = x.data<T>();
  const T* wp = w.data<T>();
  T* op = out.data<T>();
  const std::int64_t ho = d.h * d.k, wo = d.w * d.k;
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (int g = 0; g < d.groups; ++g) {
      for (std::int64_t cl = 0; cl < d.cing; ++cl) {
        const std::int64_t ci = g * d.cing + cl;
        const T* xc = xp + (n * d.cin + ci) * d.h * d.w;
        for (std::int64_t ol = 0; ol < d.coutg; ++ol) {
          const std::int64_t co = g * d.coutg + ol;
          const T* wk = wp + (ci * d.coutg + ol) * d.k * d.k;
          T* oc = op + (n * d.cout + co) * ho * wo;
          for (std::int64_t i = 0; i < d.h; ++i) {
            for (std::int64_t j = 0; j < d.w; ++j) {
              const T v = xc[i * d.w + j];
              T* base = oc + (i * d.k) * wo + j * d.k;
              for (int di = 0; di < d.k; ++di) {
                for (int dj = 0; dj < d.k; ++dj) {
                  base[di * wo + dj] += v * wk[di * d.k + dj];
                }
              }
            }
          }
        }
      }
    }
    if (b != nullptr) {
      const T* bp = b->data<T>();
      for (std::int64_t co = 0; co < d.cout; ++co) {
        T* oc = op + (n * d.cout + co) * ho * wo;
        for (std::int64_t p = 0; p < ho * wo; ++p) oc[p] += bp[co];
      }
    }
  }
  return out;
}

template <class T>
void convt_bwd(const Tensor& x, const Tensor& w, const Tensor& dy,
               const ConvTDims& d, Tensor* dx, Tensor* dw, Tensor* db) {
  const T* xp = x.data<T>();
  const T* wp = w.data<T>();
  const T* dyp = dy.data<T>();
  const std::int64_t ho = d.h * d.k, wo = d.w * d.k;
  if (db != nullptr) {
    T* dbp = db->data<T>();
    for (std::int64_t n = 0; n < d.n; ++n) {
      for (std::int64_t co = 0; co < d.cout; ++co) {
        const T* row = dyp + (n * d.cout + co) * ho * wo;
        double s = 0.0;
        for (std::int64_t p = 0; p < ho * wo; ++p) s += row[p];
        dbp[co] += static_cast<T>(s);
      }
    }
  }
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (int g = 0; g < d.groups; ++g) {
      for (std::int64_t cl = 0; cl < d.cing; ++cl) {
        const std::int64_t ci = g * d.cing + cl;
        const T* xc = xp + (n * d.cin + ci) * d.h * d.w;
        T* dxc = dx != nullptr ? dx->data<T>() + (n * d.cin + ci) * d.h * d.w
                               : nullptr;
        for (std::int64_t ol = 0; ol < d.coutg; ++ol) {
          const std::int64_t co = g * d.coutg + ol;
          const T* wk = wp + (ci * d.coutg + ol) * d.k * d.k;
          T* dwk = dw != nullptr
                       ? dw->data<T>() + (ci * d.coutg + ol) * d.k * d.k
                       : nullptr;
          const T* dyc = dyp + (n * d.cout + co) * ho * wo;
          for (std::int64_t i = 0; i < d.h; ++i) {
            for (std::int64_t j = 0; j < d.w; ++j) {
              const T* base = dyc + (i * d.k) * wo + j * d.k;
              T acc = T(0);
              for (int di = 0; di < d.k; ++di) {
                for (int dj = 0; dj < d.k; ++dj) {
                  const T g_out = base[di * wo + dj];
                  acc += g_out * wk[di * d.k + dj];
                  if (dwk != nullptr) {
                    dwk[di * d.k + dj] += g_out * xc[i * d.w + j];
                  }
                }
              }
              if (dxc != nullptr) dxc[i * d.w + j] += acc;
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d_transpose(const Var& x, const Var& w, const Var* bias, int stride,
                     int groups) {
  check_dtype(x, w, "conv2d_transpose");
  const ConvTDims d = convt_dims(x.value(), w.value(), stride, groups);
  const Tensor* bt = nullptr;
  if (bias != nullptr && bias->defined()) {
    if (bias->value().numel() != d.cout) {
      throw ConfigError("conv2d_transpose: bias size != Cout");
    }
    bt = &bias->value();
  }
  Tensor out = x.value().dtype() == DType::kF32
                   ? convt_fwd<float>(x.value(), w.value(), bt, d)
                   : convt_fwd<double>(x.value(), w.value(), bt, d);
  ensure_finite(out, "conv2d_transpose");

  const bool rec = grad_recording({&x, &w, bias});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), wn = w.node(), yn = y.node();
    auto bn = (bias != nullptr && bias->defined()) ? bias->node() : nullptr;
    Tape::current()->record([xn, wn, bn, yn, d] {
      if (!yn->grad.defined()) return;
      const DType dt = yn->value.dtype();
      Tensor dx, dw, db;
      if (xn->needs_grad) dx = Tensor::zeros(xn->value.shape(), dt);
      if (wn->needs_grad) dw = Tensor::zeros(wn->value.shape(), dt);
      if (bn && bn->needs_grad) db = Tensor::zeros(bn->value.shape(), dt);
      if (dt == DType::kF32) {
        convt_bwd<float>(xn->value, wn->value, yn->grad, d,
                         dx.defined() ? &dx : nullptr,
                         dw.defined() ? &dw : nullptr,
                         db.defined() ? &db : nullptr);
      } else {
        convt_bwd<double>(xn->value, wn->value, yn->grad, d,
                          dx.defined() ? &dx : nullptr,
                          dw.defined() ? &dw : nullptr,
                          db.defined() ? &db : nullptr);
      }
      if (dx.defined()) accum_grad(xn, std::move(dx));
      if (dw.defined()) accum_grad(wn, std::move(dw));
      if (db.defined()) accum_grad(bn, std::move(db));
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// maxpool2d
// ---------------------------------------------------------------------------

namespace {

template <class T>
Tensor maxpool_fwd(const Tensor& x, std::vector<std::int64_t>& argmax) {
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({n, c, h / 2, w / 2}, x.dtype());
  const std::int64_t ho = h / 2, wo = w / 2;
  argmax.resize(static_cast<size_t>(out.numel()));
  const T* xp = x.data<T>();
  T* op = out.data<T>();
  std::int64_t oi = 0;
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const T* plane = xp + nc * h * w;
    const std::int64_t base = nc * h * w;
    for (std::int64_t i = 0; i < ho; ++i) {
      for (std::int64_t j = 0; j < wo; ++j, ++oi) {
        // Row-major window scan; strict > keeps the first maximum.
        std::int64_t best = (2 * i) * w + 2 * j;
        T bv = plane[best];
        const std::int64_t cands[3] = {(2 * i) * w + 2 * j + 1,
                                       (2 * i + 1) * w + 2 * j,
                                       (2 * i + 1) * w + 2 * j + 1};
        for (std::int64_t cand : cands) {
          if (plane[cand] > bv) {
            bv = plane[cand];
            best = cand;
          }
        }
        op[oi] = bv;
        argmax[static_cast<size_t>(oi)] = base + best;
      }
    }
  }
  return out;
}

}  // namespace

Var maxpool2d(const Var& x) {
  const Tensor& xt = x.value();
  if (xt.rank() != 4) throw ConfigError("maxpool2d: input must be N,C,H,W");
  if (xt.dim(2) % 2 != 0 || xt.dim(3) % 2 != 0) {
    throw ConfigError("maxpool2d: spatial dims must be divisible by 2, got " +
                      xt.shape_str());
  }
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  Tensor out = xt.dtype() == DType::kF32 ? maxpool_fwd<float>(xt, *argmax)
                                         : maxpool_fwd<double>(xt, *argmax);
  const bool rec = grad_recording({&x});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn, argmax] {
      if (!yn->grad.defined() || !xn->needs_grad) return;
      Tensor dx = Tensor::zeros(xn->value.shape(), yn->value.dtype());
      const auto& am = *argmax;
      for (std::int64_t o = 0; o < yn->grad.numel(); ++o) {
        dx.set(am[static_cast<size_t>(o)],
               dx.get(am[static_cast<size_t>(o)]) + yn->grad.get(o));
      }
      accum_grad(xn, std::move(dx));
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// bilinear_upsample2x
// ---------------------------------------------------------------------------

namespace {

struct LerpTaps {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> t;  // weight of hi
};

// Half-pixel centers: src = o/2 - 0.25, edge-clamped.
LerpTaps upsample_taps(std::int64_t in_extent) {
  LerpTaps taps;
  const std::int64_t out = in_extent * 2;
  taps.lo.resize(static_cast<size_t>(out));
  taps.hi.resize(static_cast<size_t>(out));
  taps.t.resize(static_cast<size_t>(out));
  for (std::int64_t o = 0; o < out; ++o) {
    const double src = 0.5 * static_cast<double>(o) - 0.25;
    const double fl = std::floor(src);
    std::int64_t i0 = static_cast<std::int64_t>(fl);
    double t = src - fl;
    std::int64_t i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 > in_extent - 1) i1 = in_extent - 1;
    taps.lo[static_cast<size_t>(o)] = i0;
    taps.hi[static_cast<size_t>(o)] = i1;
    taps.t[static_cast<size_t>(o)] = t;
  }
  return taps;
}

template <class T>
Tensor upsample_fwd(const Tensor& x, const LerpTaps& ty, const LerpTaps& tx) {
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({n, c, 2 * h, 2 * w}, x.dtype());
  const T* xp = x.data<T>();
  T* op = out.data<T>();
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const T* plane = xp + nc * h * w;
    T* oplane = op + nc * 4 * h * w;
    for (std::int64_t oy = 0; oy < 2 * h; ++oy) {
      const std::int64_t y0 = ty.lo[static_cast<size_t>(oy)];
      const std::int64_t y1 = ty.hi[static_cast<size_t>(oy)];
      const T wy = static_cast<T>(ty.t[static_cast<size_t>(oy)]);
      const T* r0 = plane + y0 * w;
      const T* r1 = plane + y1 * w;
      T* orow = oplane + oy * 2 * w;
      for (std::int64_t ox = 0; ox < 2 * w; ++ox) {
        const std::int64_t x0 = tx.lo[static_cast<size_t>(ox)];
        const std::int64_t x1 = tx.hi[static_cast<size_t>(ox)];
        const T wx = static_cast<T>(tx.t[static_cast<size_t>(ox)]);
        const T top = r0[x0] * (T(1) - wx) + r0[x1] * wx;
        const T bot = r1[x0] * (T(1) - wx) + r1[x1] * wx;
        orow[ox] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  return out;
}

template <class T>
void upsample_bwd(const Tensor& dy, const LerpTaps& ty, const LerpTaps& tx,
                  Tensor& dx) {
  const std::int64_t n = dx.dim(0), c = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
  const T* dyp = dy.data<T>();
  T* dxp = dx.data<T>();
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const T* gplane = dyp + nc * 4 * h * w;
    T* dplane = dxp + nc * h * w;
    for (std::int64_t oy = 0; oy < 2 * h; ++oy) {
      const std::int64_t y0 = ty.lo[static_cast<size_t>(oy)];
      const std::int64_t y1 = ty.hi[static_cast<size_t>(oy)];
      const T wy = static_cast<T>(ty.t[static_cast<size_t>(oy)]);
      const T* grow = gplane + oy * 2 * w;
      for (std::int64_t ox = 0; ox < 2 * w; ++ox) {
        const std::int64_t x0 = tx.lo[static_cast<size_t>(ox)];
        const std::int64_t x1 = tx.hi[static_cast<size_t>(ox)];
        const T wx = static_cast<T>(tx.t[static_cast<size_t>(ox)]);
        const T g = grow[ox];
        dplane[y0 * w + x0] += g * (T(1) - wy) * (T(1) - wx);
        dplane[y0 * w + x1] += g * (T(1) - wy) * wx;
        dplane[y1 * w + x0] += g * wy * (T(1) - wx);
        dplane[y1 * w + x1] += g * wy * wx;
      }
    }
  }
}

}  // namespace

Var bilinear_upsample2x(const Var& x) {
  const Tensor& xt = x.value();
  if (xt.rank() != 4) throw ConfigError("bilinear_upsample2x: input must be N,C,H,W");
  auto ty = std::make_shared<LerpTaps>(upsample_taps(xt.dim(2)));
  auto tx = std::make_shared<LerpTaps>(upsample_taps(xt.dim(3)));
  Tensor out = xt.dtype() == DType::kF32 ? upsample_fwd<float>(xt, *ty, *tx)
                                         : upsample_fwd<double>(xt, *ty, *tx);
  const bool rec = grad_recording({&x});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn, ty, tx] {
      if (!yn->grad.defined() || !xn->needs_grad) return;
      Tensor dx = Tensor::zeros(xn->value.shape(), yn->value.dtype());
      if (dx.dtype() == DType::kF32) {
        upsample_bwd<float>(yn->grad, *ty, *tx, dx);
      } else {
        upsample_bwd<double>(yn->grad, *ty, *tx, dx);
      }
      accum_grad(xn, std::move(dx));
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

namespace {

struct BnSaved {
  Tensor xhat;
  std::vector<double> invstd;  // per channel
};

template <class T>
Tensor bn_fwd(const Tensor& x, const Tensor& gamma, const Tensor& beta,
              BatchNormState& state, bool train, BnSaved& saved) {
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t plane = h * w;
  const std::int64_t cnt = n * plane;
  Tensor out(x.shape(), x.dtype());
  saved.xhat = Tensor(x.shape(), x.dtype());
  saved.invstd.resize(static_cast<size_t>(c));
  const T* xp = x.data<T>();
  const T* gp = gamma.data<T>();
  const T* bp = beta.data<T>();
  T* op = out.data<T>();
  T* hp = saved.xhat.data<T>();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (train) {
      double s = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* pp = xp + (b * c + ch) * plane;
        for (std::int64_t p = 0; p < plane; ++p) s += pp[p];
      }
      mean = s / static_cast<double>(cnt);
      double v = 0.0;
      for (std::int64_t b = 0; b < n; ++b) {
        const T* pp = xp + (b * c + ch) * plane;
        for (std::int64_t p = 0; p < plane; ++p) {
          const double dlt = pp[p] - mean;
          v += dlt * dlt;
        }
      }
      var = v / static_cast<double>(cnt);
      const double m = state.momentum;
      state.running_mean.set(ch, (1.0 - m) * state.running_mean.get(ch) + m * mean);
      const double unbiased = cnt > 1 ? var * cnt / (cnt - 1.0) : var;
      state.running_var.set(ch, (1.0 - m) * state.running_var.get(ch) + m * unbiased);
    } else {
      mean = state.running_mean.get(ch);
      var = state.running_var.get(ch);
      if (var < 0.0) {
        throw NumericError("batchnorm2d: negative running variance (corrupted state)");
      }
    }
    const double invstd = 1.0 / std::sqrt(var + state.eps);
    saved.invstd[static_cast<size_t>(ch)] = invstd;
    const T g = gp[ch], bt = bp[ch];
    for (std::int64_t b = 0; b < n; ++b) {
      const T* pp = xp + (b * c + ch) * plane;
      T* oo = op + (b * c + ch) * plane;
      T* hh = hp + (b * c + ch) * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        const T xh = static_cast<T>((pp[p] - mean) * invstd);
        hh[p] = xh;
        oo[p] = g * xh + bt;
      }
    }
  }
  return out;
}

template <class T>
void bn_bwd(const Tensor& dy, const Tensor& gamma, const BnSaved& saved,
            bool train, Tensor* dx, Tensor* dgamma, Tensor* dbeta) {
  const std::int64_t n = dy.dim(0), c = dy.dim(1);
  const std::int64_t plane = dy.dim(2) * dy.dim(3);
  const std::int64_t cnt = n * plane;
  const T* dyp = dy.data<T>();
  const T* gp = gamma.data<T>();
  const T* hp = saved.xhat.data<T>();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::int64_t b = 0; b < n; ++b) {
      const T* gy = dyp + (b * c + ch) * plane;
      const T* xh = hp + (b * c + ch) * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        sum_dy += gy[p];
        sum_dy_xhat += static_cast<double>(gy[p]) * xh[p];
      }
    }
    if (dbeta != nullptr) dbeta->set(ch, dbeta->get(ch) + sum_dy);
    if (dgamma != nullptr) dgamma->set(ch, dgamma->get(ch) + sum_dy_xhat);
    if (dx != nullptr) {
      const double g = gp[ch];
      const double invstd = saved.invstd[static_cast<size_t>(ch)];
      const double mean_dy = sum_dy / static_cast<double>(cnt);
      const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(cnt);
      T* dxp = dx->data<T>();
      for (std::int64_t b = 0; b < n; ++b) {
        const T* gy = dyp + (b * c + ch) * plane;
        const T* xh = hp + (b * c + ch) * plane;
        T* dd = dxp + (b * c + ch) * plane;
        for (std::int64_t p = 0; p < plane; ++p) {
          double v;
          if (train) {
            v = g * invstd * (gy[p] - mean_dy - xh[p] * mean_dy_xhat);
          } else {
            v = g * invstd * gy[p];
          }
          dd[p] += static_cast<T>(v);
        }
      }
    }
  }
}

}  // namespace

Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta,
                BatchNormState& state, bool train) {
  const Tensor& xt = x.value();
  if (xt.rank() != 4) throw ConfigError("batchnorm2d: input must be N,C,H,W");
  const std::int64_t c = xt.dim(1);
  if (gamma.value().numel() != c || beta.value().numel() != c ||
      state.running_mean.numel() != c || state.running_var.numel() != c) {
    throw ConfigError("batchnorm2d: channel count mismatch with state");
  }
  if (train && xt.dim(0) * xt.dim(2) * xt.dim(3) < 2) {
    throw ConfigError("batchnorm2d: train mode needs at least 2 values per channel");
  }
  auto saved = std::make_shared<BnSaved>();
  Tensor out = xt.dtype() == DType::kF32
                   ? bn_fwd<float>(xt, gamma.value(), beta.value(), state, train, *saved)
                   : bn_fwd<double>(xt, gamma.value(), beta.value(), state, train, *saved);
  ensure_finite(out, "batchnorm2d");
  const bool rec = grad_recording({&x, &gamma, &beta});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), yn = y.node();
    Tape::current()->record([xn, gn, bn, yn, saved, train] {
      if (!yn->grad.defined()) return;
      const DType dt = yn->value.dtype();
      Tensor dx, dg, db;
      if (xn->needs_grad) dx = Tensor::zeros(xn->value.shape(), dt);
      if (gn->needs_grad) dg = Tensor::zeros(gn->value.shape(), dt);
      if (bn->needs_grad) db = Tensor::zeros(bn->value.shape(), dt);
      if (dt == DType::kF32) {
        bn_bwd<float>(yn->grad, gn->value, *saved, train,
                      dx.defined() ? &dx : nullptr, dg.defined() ? &dg : nullptr,
                      db.defined() ? &db : nullptr);
      } else {
        bn_bwd<double>(yn->grad, gn->value, *saved, train,
                       dx.defined() ? &dx : nullptr, dg.defined() ? &dg : nullptr,
                       db.defined() ? &db : nullptr);
      }
      if (dx.defined()) accum_grad(xn, std::move(dx));
      if (dg.defined()) accum_grad(gn, std::move(dg));
      if (db.defined()) accum_grad(bn, std::move(db));
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// layer_norm / softmax (single-axis variants over strided slices)
// ---------------------------------------------------------------------------

namespace {

struct AxisSplit {
  std::int64_t outer, axis, inner;
};

AxisSplit axis_split(const Tensor& t, int axis, const char* op) {
  if (axis < 0 || axis >= t.rank()) {
    throw ConfigError(std::string(op) + ": axis " + std::to_string(axis) +
                      " out of range for " + t.shape_str());
  }
  AxisSplit s{1, t.dim(axis), 1};
  for (int i = 0; i < axis; ++i) s.outer *= t.dim(i);
  for (std::int64_t i = axis + 1; i < t.rank(); ++i) s.inner *= t.dim(i);
  return s;
}

struct LnSaved {
  Tensor xhat;
  std::vector<double> invstd;  // per (outer, inner) slice
  AxisSplit split;
};

template <class T>
Tensor ln_fwd(const Tensor& x, const Tensor& gamma, const Tensor& beta,
              double eps, LnSaved& saved) {
  const AxisSplit s = saved.split;
  Tensor out(x.shape(), x.dtype());
  saved.xhat = Tensor(x.shape(), x.dtype());
  saved.invstd.resize(static_cast<size_t>(s.outer * s.inner));
  const T* xp = x.data<T>();
  const T* gp = gamma.data<T>();
  const T* bp = beta.data<T>();
  T* op = out.data<T>();
  T* hp = saved.xhat.data<T>();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.axis * s.inner + i;
      double mean = 0.0;
      for (std::int64_t a = 0; a < s.axis; ++a) mean += xp[base + a * s.inner];
      mean /= static_cast<double>(s.axis);
      double var = 0.0;
      for (std::int64_t a = 0; a < s.axis; ++a) {
        const double d = xp[base + a * s.inner] - mean;
        var += d * d;
      }
      var /= static_cast<double>(s.axis);
      const double invstd = 1.0 / std::sqrt(var + eps);
      saved.invstd[static_cast<size_t>(o * s.inner + i)] = invstd;
      for (std::int64_t a = 0; a < s.axis; ++a) {
        const T xh = static_cast<T>((xp[base + a * s.inner] - mean) * invstd);
        hp[base + a * s.inner] = xh;
        op[base + a * s.inner] = gp[a] * xh + bp[a];
      }
    }
  }
  return out;
}

template <class T>
void ln_bwd(const Tensor& dy, const Tensor& gamma, const LnSaved& saved,
            Tensor* dx, Tensor* dgamma, Tensor* dbeta) {
  const AxisSplit s = saved.split;
  const T* dyp = dy.data<T>();
  const T* gp = gamma.data<T>();
  const T* hp = saved.xhat.data<T>();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.axis * s.inner + i;
      const double invstd = saved.invstd[static_cast<size_t>(o * s.inner + i)];
      double s1 = 0.0, s2 = 0.0;
      for (std::int64_t a = 0; a < s.axis; ++a) {
        const double gdy = static_cast<double>(gp[a]) * dyp[base + a * s.inner];
        s1 += gdy;
        s2 += gdy * hp[base + a * s.inner];
      }
      s1 /= static_cast<double>(s.axis);
      s2 /= static_cast<double>(s.axis);
      for (std::int64_t a = 0; a < s.axis; ++a) {
        const std::int64_t k = base + a * s.inner;
        if (dgamma != nullptr) {
          dgamma->set(a, dgamma->get(a) + static_cast<double>(dyp[k]) * hp[k]);
        }
        if (dbeta != nullptr) dbeta->set(a, dbeta->get(a) + dyp[k]);
        if (dx != nullptr) {
          const double gdy = static_cast<double>(gp[a]) * dyp[k];
          dx->set(k, dx->get(k) + invstd * (gdy - s1 - hp[k] * s2));
        }
      }
    }
  }
}

}  // namespace

Var layer_norm(const Var& x, int axis, const Var& gamma, const Var& beta,
               double eps) {
  const Tensor& xt = x.value();
  auto saved = std::make_shared<LnSaved>();
  saved->split = axis_split(xt, axis, "layer_norm");
  if (gamma.value().numel() != saved->split.axis ||
      beta.value().numel() != saved->split.axis) {
    throw ConfigError("layer_norm: affine parameter length mismatch");
  }
  Tensor out = xt.dtype() == DType::kF32
                   ? ln_fwd<float>(xt, gamma.value(), beta.value(), eps, *saved)
                   : ln_fwd<double>(xt, gamma.value(), beta.value(), eps, *saved);
  ensure_finite(out, "layer_norm");
  const bool rec = grad_recording({&x, &gamma, &beta});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), yn = y.node();
    Tape::current()->record([xn, gn, bn, yn, saved] {
      if (!yn->grad.defined()) return;
      const DType dt = yn->value.dtype();
      Tensor dx, dg, db;
      if (xn->needs_grad) dx = Tensor::zeros(xn->value.shape(), dt);
      if (gn->needs_grad) dg = Tensor::zeros(gn->value.shape(), dt);
      if (bn->needs_grad) db = Tensor::zeros(bn->value.shape(), dt);
      if (dt == DType::kF32) {
        ln_bwd<float>(yn->grad, gn->value, *saved, dx.defined() ? &dx : nullptr,
                      dg.defined() ? &dg : nullptr, db.defined() ? &db : nullptr);
      } else {
        ln_bwd<double>(yn->grad, gn->value, *saved, dx.defined() ? &dx : nullptr,
                       dg.defined() ? &dg : nullptr, db.defined() ? &db : nullptr);
      }
      if (dx.defined()) accum_grad(xn, std::move(dx));
      if (dg.defined()) accum_grad(gn, std::move(dg));
      if (db.defined()) accum_grad(bn, std::move(db));
    });
  }
  return y;
}

namespace {

template <class T>
Tensor softmax_fwd(const Tensor& x, const AxisSplit& s) {
  Tensor out(x.shape(), x.dtype());
  const T* xp = x.data<T>();
  T* op = out.data<T>();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.axis * s.inner + i;
      double mx = xp[base];
      for (std::int64_t a = 1; a < s.axis; ++a) {
        mx = std::max(mx, static_cast<double>(xp[base + a * s.inner]));
      }
      double denom = 0.0;
      for (std::int64_t a = 0; a < s.axis; ++a) {
        const double e = std::exp(xp[base + a * s.inner] - mx);
        op[base + a * s.inner] = static_cast<T>(e);
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (std::int64_t a = 0; a < s.axis; ++a) {
        op[base + a * s.inner] = static_cast<T>(op[base + a * s.inner] * inv);
      }
    }
  }
  return out;
}

template <class T>
void softmax_bwd(const Tensor& dy, const Tensor& y, const AxisSplit& s,
                 Tensor& dx) {
  const T* dyp = dy.data<T>();
  const T* yp = y.data<T>();
  T* dxp = dx.data<T>();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.axis * s.inner + i;
      double dotv = 0.0;
      for (std::int64_t a = 0; a < s.axis; ++a) {
        dotv += static_cast<double>(dyp[base + a * s.inner]) * yp[base + a * s.inner];
      }
      for (std::int64_t a = 0; a < s.axis; ++a) {
        const std::int64_t k = base + a * s.inner;
        dxp[k] += static_cast<T>(yp[k] * (dyp[k] - dotv));
      }
    }
  }
}

}  // namespace

Var softmax(const Var& x, int axis) {
  const Tensor& xt = x.value();
  const AxisSplit s = axis_split(xt, axis, "softmax");
  Tensor out = xt.dtype() == DType::kF32 ? softmax_fwd<float>(xt, s)
                                         : softmax_fwd<double>(xt, s);
  ensure_finite(out, "softmax");
  const bool rec = grad_recording({&x});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn, s] {
      if (!yn->grad.defined() || !xn->needs_grad) return;
      Tensor dx = Tensor::zeros(xn->value.shape(), yn->value.dtype());
      if (dx.dtype() == DType::kF32) {
        softmax_bwd<float>(yn->grad, yn->value, s, dx);
      } else {
        softmax_bwd<double>(yn->grad, yn->value, s, dx);
      }
      accum_grad(xn, std::move(dx));
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var relu(const Var& x) {
  const Tensor& xt = x.value();
  Tensor out(xt.shape(), xt.dtype());
  if (xt.dtype() == DType::kF32) {
    kern::relu_fwd<float>(xt.data<float>(), out.data<float>(), xt.numel());
  } else {
    kern::relu_fwd<double>(xt.data<double>(), out.data<double>(), xt.numel());
  }
  const bool rec = grad_recording({&x});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn] {
      if (!yn->grad.defined() || !xn->needs_grad) return;
      Tensor dx = Tensor::zeros(xn->value.shape(), yn->value.dtype());
      if (dx.dtype() == DType::kF32) {
        kern::relu_bwd<float>(xn->value.data<float>(), yn->grad.data<float>(),
                              dx.data<float>(), dx.numel());
      } else {
        kern::relu_bwd<double>(xn->value.data<double>(), yn->grad.data<double>(),
                               dx.data<double>(), dx.numel());
      }
      accum_grad(xn, std::move(dx));
    });
  }
  return y;
}

namespace {

template <class T>
void gelu_fwd_impl(const T* x, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = x[i];
    y[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
}

template <class T>
void gelu_bwd_impl(const T* x, const T* dy, T* dx, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = x[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
    dx[i] += static_cast<T>(dy[i] * (cdf + v * pdf));
  }
}

}  // namespace

Var gelu(const Var& x) {
  const Tensor& xt = x.value();
  Tensor out(xt.shape(), xt.dtype());
  if (xt.dtype() == DType::kF32) {
    gelu_fwd_impl<float>(xt.data<float>(), out.data<float>(), xt.numel());
  } else {
    gelu_fwd_impl<double>(xt.data<double>(), out.data<double>(), xt.numel());
  }
  const bool rec = grad_recording({&x});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn] {
      if (!yn->grad.defined() || !xn->needs_grad) return;
      Tensor dx = Tensor::zeros(xn->value.shape(), yn->value.dtype());
      if (dx.dtype() == DType::kF32) {
        gelu_bwd_impl<float>(xn->value.data<float>(), yn->grad.data<float>(),
                             dx.data<float>(), dx.numel());
      } else {
        gelu_bwd_impl<double>(xn->value.data<double>(), yn->grad.data<double>(),
                              dx.data<double>(), dx.numel());
      }
      accum_grad(xn, std::move(dx));
    });
  }
  return y;
}

namespace {

template <class T>
void sigmoid_fwd_impl(const T* x, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = x[i];
    if (v >= 0.0) {
      y[i] = static_cast<T>(1.0 / (1.0 + std::exp(-v)));
    } else {
      const double e = std::exp(v);
      y[i] = static_cast<T>(e / (1.0 + e));
    }
  }
}

}  // namespace

Var sigmoid(const Var& x) {
  const Tensor& xt = x.value();
  Tensor out(xt.shape(), xt.dtype());
  if (xt.dtype() == DType::kF32) {
    sigmoid_fwd_impl<float>(xt.data<float>(), out.data<float>(), xt.numel());
  } else {
    sigmoid_fwd_impl<double>(xt.data<double>(), out.data<double>(), xt.numel());
  }
  const bool rec = grad_recording({&x});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn] {
      if (!yn->grad.defined() || !xn->needs_grad) return;
      Tensor dx = Tensor::zeros(xn->value.shape(), yn->value.dtype());
      for (std::int64_t i = 0; i < dx.numel(); ++i) {
        const double s = yn->value.get(i);
        dx.set(i, yn->grad.get(i) * s * (1.0 - s));
      }
      accum_grad(xn, std::move(dx));
    });
  }
  return y;
}

Var add(const Var& a, const Var& b) {
  check_dtype(a, b, "add");
  if (!same_shape(a.value(), b.value())) {
    throw ConfigError("add: shape mismatch " + a.value().shape_str() + " vs " +
                      b.value().shape_str());
  }
  Tensor out(a.value().shape(), a.value().dtype());
  if (out.dtype() == DType::kF32) {
    kern::add<float>(a.value().data<float>(), b.value().data<float>(),
                     out.data<float>(), out.numel());
  } else {
    kern::add<double>(a.value().data<double>(), b.value().data<double>(),
                      out.data<double>(), out.numel());
  }
  const bool rec = grad_recording({&a, &b});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape::current()->record([an, bn, yn] {
      if (!yn->grad.defined()) return;
      if (an->needs_grad) accum_grad(an, yn->grad, /*owned=*/false);
      if (bn->needs_grad) accum_grad(bn, yn->grad, /*owned=*/false);
    });
  }
  return y;
}

Var mul(const Var& a, const Var& b) {
  check_dtype(a, b, "mul");
  if (!same_shape(a.value(), b.value())) {
    throw ConfigError("mul: shape mismatch " + a.value().shape_str() + " vs " +
                      b.value().shape_str());
  }
  Tensor out(a.value().shape(), a.value().dtype());
  if (out.dtype() == DType::kF32) {
    kern::mul<float>(a.value().data<float>(), b.value().data<float>(),
                     out.data<float>(), out.numel());
  } else {
    kern::mul<double>(a.value().data<double>(), b.value().data<double>(),
                      out.data<double>(), out.numel());
  }
  const bool rec = grad_recording({&a, &b});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape::current()->record([an, bn, yn] {
      if (!yn->grad.defined()) return;
      const DType dt = yn->value.dtype();
      if (an->needs_grad) {
        Tensor da(an->value.shape(), dt);
        if (dt == DType::kF32) {
          kern::mul<float>(yn->grad.data<float>(), bn->value.data<float>(),
                           da.data<float>(), da.numel());
        } else {
          kern::mul<double>(yn->grad.data<double>(), bn->value.data<double>(),
                            da.data<double>(), da.numel());
        }
        accum_grad(an, std::move(da));
      }
      if (bn->needs_grad) {
        Tensor db(bn->value.shape(), dt);
        if (dt == DType::kF32) {
          kern::mul<float>(yn->grad.data<float>(), an->value.data<float>(),
                           db.data<float>(), db.numel());
        } else {
          kern::mul<double>(yn->grad.data<double>(), an->value.data<double>(),
                            db.data<double>(), db.numel());
        }
        accum_grad(bn, std::move(db));
      }
    });
  }
  return y;
}

Var scale(const Var& x, double alpha) {
  const Tensor& xt = x.value();
  Tensor out(xt.shape(), xt.dtype());
  if (xt.dtype() == DType::kF32) {
    kern::scale<float>(xt.data<float>(), static_cast<float>(alpha),
                       out.data<float>(), out.numel());
  } else {
    kern::scale<double>(xt.data<double>(), alpha, out.data<double>(), out.numel());
  }
  const bool rec = grad_recording({&x});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn, alpha] {
      if (!yn->grad.defined() || !xn->needs_grad) return;
      Tensor dx(xn->value.shape(), yn->value.dtype());
      if (dx.dtype() == DType::kF32) {
        kern::scale<float>(yn->grad.data<float>(), static_cast<float>(alpha),
                           dx.data<float>(), dx.numel());
      } else {
        kern::scale<double>(yn->grad.data<double>(), alpha, dx.data<double>(),
                            dx.numel());
      }
      accum_grad(xn, std::move(dx));
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

namespace {

struct MatmulDims {
  std::int64_t batch, m, k, n;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != a.rank()) {
    throw ConfigError("matmul: ranks must match and be >= 2");
  }
  MatmulDims d{1, a.dim(a.rank() - 2), a.dim(a.rank() - 1), b.dim(b.rank() - 1)};
  if (b.dim(b.rank() - 2) != d.k) {
    throw ConfigError("matmul: inner dims mismatch " + a.shape_str() + " x " +
                      b.shape_str());
  }
  for (std::int64_t i = 0; i < a.rank() - 2; ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw ConfigError("matmul: batch dims mismatch " + a.shape_str() + " x " +
                        b.shape_str());
    }
    d.batch *= a.dim(i);
  }
  return d;
}

template <class T>
void matmul_fwd(const Tensor& a, const Tensor& b, Tensor& out,
                const MatmulDims& d) {
  const T* ap = a.data<T>();
  const T* bp = b.data<T>();
  T* op = out.data<T>();
  for (std::int64_t i = 0; i < d.batch; ++i) {
    kern::gemm<T>(ap + i * d.m * d.k, bp + i * d.k * d.n, op + i * d.m * d.n,
                  d.m, d.n, d.k, false);
  }
}

template <class T>
void matmul_bwd(const Tensor& a, const Tensor& b, const Tensor& dy,
                const MatmulDims& d, Tensor* da, Tensor* db) {
  const T* ap = a.data<T>();
  const T* bp = b.data<T>();
  const T* dyp = dy.data<T>();
  std::vector<T> bt, at;
  if (da != nullptr) bt.resize(static_cast<size_t>(d.k * d.n));
  if (db != nullptr) at.resize(static_cast<size_t>(d.m * d.k));
  for (std::int64_t i = 0; i < d.batch; ++i) {
    const T* dyi = dyp + i * d.m * d.n;
    if (da != nullptr) {
      transpose2d(bp + i * d.k * d.n, d.k, d.n, bt.data());
      kern::gemm<T>(dyi, bt.data(), da->data<T>() + i * d.m * d.k, d.m, d.k,
                    d.n, false);
    }
    if (db != nullptr) {
      transpose2d(ap + i * d.m * d.k, d.m, d.k, at.data());
      kern::gemm<T>(at.data(), dyi, db->data<T>() + i * d.k * d.n, d.k, d.n,
                    d.m, false);
    }
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  check_dtype(a, b, "matmul");
  const MatmulDims d = matmul_dims(a.value(), b.value());
  std::vector<std::int64_t> out_shape = a.value().shape();
  out_shape[out_shape.size() - 1] = d.n;
  Tensor out(std::move(out_shape), a.value().dtype());
  if (out.dtype() == DType::kF32) {
    matmul_fwd<float>(a.value(), b.value(), out, d);
  } else {
    matmul_fwd<double>(a.value(), b.value(), out, d);
  }
  ensure_finite(out, "matmul");
  const bool rec = grad_recording({&a, &b});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape::current()->record([an, bn, yn, d] {
      if (!yn->grad.defined()) return;
      const DType dt = yn->value.dtype();
      Tensor da, db;
      if (an->needs_grad) da = Tensor(an->value.shape(), dt);
      if (bn->needs_grad) db = Tensor(bn->value.shape(), dt);
      if (dt == DType::kF32) {
        matmul_bwd<float>(an->value, bn->value, yn->grad, d,
                          da.defined() ? &da : nullptr,
                          db.defined() ? &db : nullptr);
      } else {
        matmul_bwd<double>(an->value, bn->value, yn->grad, d,
                           da.defined() ? &da : nullptr,
                           db.defined() ? &db : nullptr);
      }
      if (da.defined()) accum_grad(an, std::move(da));
      if (db.defined()) accum_grad(bn, std::move(db));
    });
  }
  return y;
}

Var linear(const Var& x, const Var& w, const Var* bias) {
  check_dtype(x, w, "linear");
  const Tensor& xt = x.value();
  const Tensor& wt = w.value();
  if (xt.rank() != 2 || wt.rank() != 2 || xt.dim(1) != wt.dim(0)) {
    throw ConfigError("linear: need [M,K] x [K,N], got " + xt.shape_str() +
                      " x " + wt.shape_str());
  }
  const std::int64_t m = xt.dim(0), k = xt.dim(1), n = wt.dim(1);
  Tensor out({m, n}, xt.dtype());
  const bool has_bias = bias != nullptr && bias->defined();
  if (has_bias && bias->value().numel() != n) {
    throw ConfigError("linear: bias length mismatch");
  }
  auto fwd = [&](auto tag) {
    using T = decltype(tag);
    kern::gemm<T>(xt.data<T>(), wt.data<T>(), out.data<T>(), m, n, k, false);
    if (has_bias) {
      const T* bp = bias->value().data<T>();
      T* op = out.data<T>();
      for (std::int64_t r = 0; r < m; ++r) {
        kern::add<T>(op + r * n, bp, op + r * n, n);
      }
    }
  };
  if (xt.dtype() == DType::kF32) fwd(float{}); else fwd(double{});
  ensure_finite(out, "linear");
  const bool rec = grad_recording({&x, &w, bias});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), wn = w.node(), yn = y.node();
    auto bn = has_bias ? bias->node() : nullptr;
    Tape::current()->record([xn, wn, bn, yn, m, k, n] {
      if (!yn->grad.defined()) return;
      const DType dt = yn->value.dtype();
      auto bwd = [&](auto tag) {
        using T = decltype(tag);
        const T* dyp = yn->grad.data<T>();
        if (xn->needs_grad) {
          Tensor dx({m, k}, dt);
          std::vector<T> wtr(static_cast<size_t>(k * n));
          transpose2d(wn->value.data<T>(), k, n, wtr.data());
          kern::gemm<T>(dyp, wtr.data(), dx.data<T>(), m, k, n, false);
          accum_grad(xn, std::move(dx));
        }
        if (wn->needs_grad) {
          Tensor dw = Tensor::zeros({k, n}, dt);
          std::vector<T> xtr(static_cast<size_t>(m * k));
          transpose2d(xn->value.data<T>(), m, k, xtr.data());
          kern::gemm<T>(xtr.data(), dyp, dw.data<T>(), k, n, m, false);
          accum_grad(wn, std::move(dw));
        }
        if (bn && bn->needs_grad) {
          Tensor db = Tensor::zeros({n}, dt);
          T* dbp = db.data<T>();
          for (std::int64_t r = 0; r < m; ++r) {
            kern::add<T>(dbp, dyp + r * n, dbp, n);
          }
          accum_grad(bn, std::move(db));
        }
      };
      if (dt == DType::kF32) bwd(float{}); else bwd(double{});
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Var reshape(const Var& x, std::vector<std::int64_t> shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const bool rec = grad_recording({&x});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn] {
      if (!yn->grad.defined() || !xn->needs_grad) return;
      accum_grad(xn, yn->grad.reshaped(xn->value.shape()), /*owned=*/false);
    });
  }
  return y;
}

namespace {

Tensor permute_tensor(const Tensor& x, const std::vector<int>& perm) {
  const auto r = static_cast<std::size_t>(x.rank());
  if (perm.size() != r) throw ConfigError("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  std::vector<std::int64_t> out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] < 0 || static_cast<std::size_t>(perm[i]) >= r || seen[static_cast<std::size_t>(perm[i])]) {
      throw ConfigError("permute: invalid permutation");
    }
    seen[static_cast<std::size_t>(perm[i])] = true;
    out_shape[i] = x.dim(perm[i]);
  }
  Tensor out(out_shape, x.dtype());
  std::vector<std::int64_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) {
    in_strides[i - 1] = in_strides[i] * x.dim(static_cast<std::int64_t>(i));
  }
  std::vector<std::int64_t> map_stride(r);
  for (std::size_t i = 0; i < r; ++i) map_stride[i] = in_strides[static_cast<std::size_t>(perm[i])];
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t in_off = 0;
  const std::int64_t total = x.numel();
  auto run = [&](auto tag) {
    using T = decltype(tag);
    const T* src = x.data<T>();
    T* dst = out.data<T>();
    for (std::int64_t o = 0; o < total; ++o) {
      dst[o] = src[in_off];
      for (std::int64_t d = static_cast<std::int64_t>(r) - 1; d >= 0; --d) {
        idx[static_cast<std::size_t>(d)]++;
        in_off += map_stride[static_cast<std::size_t>(d)];
        if (idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
        idx[static_cast<std::size_t>(d)] = 0;
        in_off -= map_stride[static_cast<std::size_t>(d)] * out_shape[static_cast<std::size_t>(d)];
      }
    }
  };
  if (x.dtype() == DType::kF32) run(float{}); else run(double{});
  return out;
}

std::vector<int> inverse_perm(const std::vector<int>& perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  }
  return inv;
}

}  // namespace

Var permute(const Var& x, std::vector<int> perm) {
  Tensor out = permute_tensor(x.value(), perm);
  const bool rec = grad_recording({&x});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn, perm] {
      if (!yn->grad.defined() || !xn->needs_grad) return;
      accum_grad(xn, permute_tensor(yn->grad, inverse_perm(perm)));
    });
  }
  return y;
}

Var concat_channels(const Var& a, const Var& b) {
  check_dtype(a, b, "concat_channels");
  const Tensor& at = a.value();
  const Tensor& bt = b.value();
  if (at.rank() != 4 || bt.rank() != 4 || at.dim(0) != bt.dim(0) ||
      at.dim(2) != bt.dim(2) || at.dim(3) != bt.dim(3)) {
    throw ConfigError("concat_channels: incompatible shapes " + at.shape_str() +
                      " vs " + bt.shape_str());
  }
  const std::int64_t n = at.dim(0), ca = at.dim(1), cb = bt.dim(1);
  const std::int64_t plane = at.dim(2) * at.dim(3);
  Tensor out({n, ca + cb, at.dim(2), at.dim(3)}, at.dtype());
  auto copy_in = [&](const Tensor& src, std::int64_t c_src, std::int64_t c_off) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t e = 0; e < c_src * plane; ++e) {
        out.set((i * (ca + cb) + c_off) * plane + e, src.get(i * c_src * plane + e));
      }
    }
  };
  copy_in(at, ca, 0);
  copy_in(bt, cb, ca);
  const bool rec = grad_recording({&a, &b});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape::current()->record([an, bn, yn, n, ca, cb, plane] {
      if (!yn->grad.defined()) return;
      const DType dt = yn->value.dtype();
      auto slice_to = [&](const std::shared_ptr<VarNode>& node, std::int64_t c_cnt,
                          std::int64_t c_off) {
        if (!node->needs_grad) return;
        Tensor d(node->value.shape(), dt);
        for (std::int64_t i = 0; i < n; ++i) {
          for (std::int64_t e = 0; e < c_cnt * plane; ++e) {
            d.set(i * c_cnt * plane + e,
                  yn->grad.get((i * (ca + cb) + c_off) * plane + e));
          }
        }
        accum_grad(node, std::move(d));
      };
      slice_to(an, ca, 0);
      slice_to(bn, cb, ca);
    });
  }
  return y;
}

Var stride_sample2d(const Var& x, int r) {
  const Tensor& xt = x.value();
  if (xt.rank() != 4) throw ConfigError("stride_sample2d: input must be N,C,H,W");
  if (r <= 0 || xt.dim(2) % r != 0 || xt.dim(3) % r != 0) {
    throw ConfigError("stride_sample2d: stride " + std::to_string(r) +
                      " must divide spatial dims of " + xt.shape_str());
  }
  const std::int64_t n = xt.dim(0), c = xt.dim(1), h = xt.dim(2), w = xt.dim(3);
  const std::int64_t ho = h / r, wo = w / r;
  Tensor out({n, c, ho, wo}, xt.dtype());
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    for (std::int64_t i = 0; i < ho; ++i) {
      for (std::int64_t j = 0; j < wo; ++j) {
        out.set(nc * ho * wo + i * wo + j,
                xt.get(nc * h * w + (i * r) * w + j * r));
      }
    }
  }
  const bool rec = grad_recording({&x});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn, n, c, h, w, ho, wo, r] {
      if (!yn->grad.defined() || !xn->needs_grad) return;
      Tensor dx = Tensor::zeros(xn->value.shape(), yn->value.dtype());
      for (std::int64_t nc = 0; nc < n * c; ++nc) {
        for (std::int64_t i = 0; i < ho; ++i) {
          for (std::int64_t j = 0; j < wo; ++j) {
            const std::int64_t xi = nc * h * w + (i * r) * w + j * r;
            dx.set(xi, dx.get(xi) + yn->grad.get(nc * ho * wo + i * wo + j));
          }
        }
      }
      accum_grad(xn, std::move(dx));
    });
  }
  return y;
}

Var sum(const Var& x) {
  const Tensor& xt = x.value();
  double s = 0.0;
  for (std::int64_t i = 0; i < xt.numel(); ++i) s += xt.get(i);
  Tensor out = Tensor::scalar(s, xt.dtype());
  const bool rec = grad_recording({&x});
  Var y = make_output(std::move(out), rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape::current()->record([xn, yn] {
      if (!yn->grad.defined() || !xn->needs_grad) return;
      accum_grad(xn, Tensor::full(xn->value.shape(), yn->value.dtype(),
                                  yn->grad.get(0)));
    });
  }
  return y;
}

}  // namespace mutr::ops
