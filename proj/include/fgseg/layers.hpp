#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "fgseg/tensor.hpp"

namespace fgseg {

enum class Mode { Train, Eval };

// A learnable tensor: value, accumulated gradient and the RMSProp
// second-moment accumulator, all the same shape.
template <typename S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  Tensor<S> rms_acc;
  bool trainable = true;

  Param(std::string n, Tensor<S> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), rms_acc(value.shape()) {}

  void zero_grad() { grad.array() = S{0}; }
};

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using RowMatMap = Eigen::Map<RowMat<S>>;

template <typename S>
using ConstRowMatMap = Eigen::Map<const RowMat<S>>;

// Patch matrix of one sample for "same" zero-padded dilated convolution:
// (c*k*k) rows by (h*w) columns, row r = (ci*k + u)*k + v.
template <typename S>
void im2col(const Tensor<S>& x, int sample, int k, int dilation, RowMat<S>& col) {
  const Shape& s = x.shape();
  const int pad = dilation * (k - 1) / 2;
  const std::int64_t hw = s.spatial();
  col.setZero(static_cast<std::int64_t>(s.c) * k * k, hw);
  for (int ci = 0; ci < s.c; ++ci) {
    for (int u = 0; u < k; ++u) {
      const int du = u * dilation - pad;
      for (int v = 0; v < k; ++v) {
        const int dv = v * dilation - pad;
        const std::int64_t r = (static_cast<std::int64_t>(ci) * k + u) * k + v;
        S* row = col.data() + r * hw;
        for (int i = 0; i < s.h; ++i) {
          const int ii = i + du;
          if (ii < 0 || ii >= s.h) continue;
          const int j0 = std::max(0, -dv);
          const int j1 = std::min(s.w, s.w - dv);
          if (j0 >= j1) continue;
          const S* src = x.data() + x.offset(sample, ci, ii, j0 + dv);
          std::copy(src, src + (j1 - j0), row + static_cast<std::int64_t>(i) * s.w + j0);
        }
      }
    }
  }
}

// Transpose scatter of im2col: adds patch-matrix gradients back onto gx.
template <typename S>
void col2im_add(const RowMat<S>& col, int sample, int k, int dilation, Tensor<S>& gx) {
  const Shape& s = gx.shape();
  const int pad = dilation * (k - 1) / 2;
  const std::int64_t hw = s.spatial();
  for (int ci = 0; ci < s.c; ++ci) {
    for (int u = 0; u < k; ++u) {
      const int du = u * dilation - pad;
      for (int v = 0; v < k; ++v) {
        const int dv = v * dilation - pad;
        const std::int64_t r = (static_cast<std::int64_t>(ci) * k + u) * k + v;
        const S* row = col.data() + r * hw;
        for (int i = 0; i < s.h; ++i) {
          const int ii = i + du;
          if (ii < 0 || ii >= s.h) continue;
          const int j0 = std::max(0, -dv);
          const int j1 = std::min(s.w, s.w - dv);
          S* dst = gx.data() + gx.offset(sample, ci, ii, j0 + dv);
          const S* src = row + static_cast<std::int64_t>(i) * s.w + j0;
          for (int j = 0; j < j1 - j0; ++j) dst[j] += src[j];
        }
      }
    }
  }
}

}  // namespace detail

template <typename S>
struct Conv2dCtx {
  Tensor<S> input;
};

// Stride-1 dilated convolution with "same" zero padding; weights are
// (out_ch, in_ch, k, k), bias is (1, out_ch, 1, 1). Output spatial dims
// always equal the input's.
template <typename S>
struct Conv2d {
  Param<S>* w = nullptr;
  Param<S>* b = nullptr;
  int dilation = 1;

  void check(const Tensor<S>& x) const {
    const Shape& ws = w->value.shape();
    if (ws.h != ws.w) throw std::invalid_argument("conv2d: kernel must be square, got " + ws.str());
    if (ws.h % 2 == 0) {
      throw std::invalid_argument("conv2d: even kernel size " + std::to_string(ws.h) +
                                  " has no symmetric same padding");
    }
    if (dilation < 1) throw std::invalid_argument("conv2d: dilation must be >= 1");
    if (x.shape().c != ws.c) {
      throw std::invalid_argument("conv2d: input channels " + std::to_string(x.shape().c) +
                                  " do not match kernel " + ws.str());
    }
    if (b->value.shape().c != ws.n) {
      throw std::invalid_argument("conv2d: bias channels " + std::to_string(b->value.shape().c) +
                                  " do not match kernel " + ws.str());
    }
  }

  Tensor<S> forward(const Tensor<S>& x, Conv2dCtx<S>& ctx) const {
    check(x);
    ctx.input = x;
    const Shape& ws = w->value.shape();
    const int k = ws.h;
    const std::int64_t hw = x.shape().spatial();
    const std::int64_t ckk = static_cast<std::int64_t>(ws.c) * k * k;
    Tensor<S> out({x.shape().n, ws.n, x.shape().h, x.shape().w});
    detail::ConstRowMatMap<S> W(w->value.data(), ws.n, ckk);
    detail::RowMat<S> col;
    for (int n = 0; n < x.shape().n; ++n) {
      detail::im2col(x, n, k, dilation, col);
      detail::RowMatMap<S> O(out.data() + out.offset(n, 0, 0, 0), ws.n, hw);
      O.noalias() = W * col;
      for (int kc = 0; kc < ws.n; ++kc) O.row(kc).array() += b->value[kc];
    }
    return out;
  }

  // Accumulates into w->grad and b->grad, returns the input gradient.
  Tensor<S> backward(const Conv2dCtx<S>& ctx, const Tensor<S>& gy) const {
    const Tensor<S>& x = ctx.input;
    const Shape& ws = w->value.shape();
    const int k = ws.h;
    const std::int64_t hw = x.shape().spatial();
    const std::int64_t ckk = static_cast<std::int64_t>(ws.c) * k * k;
    if (!(gy.shape() == Shape{x.shape().n, ws.n, x.shape().h, x.shape().w})) {
      throw std::invalid_argument("conv2d backward: upstream shape " + gy.shape().str() +
                                  " does not match forward output");
    }
    Tensor<S> gx(x.shape());
    detail::ConstRowMatMap<S> W(w->value.data(), ws.n, ckk);
    detail::RowMatMap<S> GW(w->grad.data(), ws.n, ckk);
    detail::RowMat<S> col, gcol;
    for (int n = 0; n < x.shape().n; ++n) {
      detail::im2col(x, n, k, dilation, col);
      detail::ConstRowMatMap<S> GY(gy.data() + gy.offset(n, 0, 0, 0), ws.n, hw);
      GW.noalias() += GY * col.transpose();
      for (int kc = 0; kc < ws.n; ++kc) b->grad[kc] += GY.row(kc).sum();
      gcol.noalias() = W.transpose() * GY;
      detail::col2im_add(gcol, n, k, dilation, gx);
    }
    return gx;
  }
};

template <typename S>
struct ReluCtx {
  Tensor<S> out;
};

template <typename S>
Tensor<S> relu(const Tensor<S>& x, ReluCtx<S>& ctx) {
  Tensor<S> out(x.shape());
  out.array() = x.array().max(S{0});
  ctx.out = out;
  return out;
}

// Subgradient at 0 is 0: gradient flows only where the output is positive.
template <typename S>
Tensor<S> relu_backward(const ReluCtx<S>& ctx, const Tensor<S>& gy) {
  Tensor<S> gx(gy.shape());
  gx.array() = (ctx.out.array() > S{0}).select(gy.array(), S{0});
  return gx;
}

template <typename S>
struct SigmoidCtx {
  Tensor<S> out;
};

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x, SigmoidCtx<S>& ctx) {
  Tensor<S> out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const S v = x[i];
    if (v >= S{0}) {
      const S e = std::exp(-v);
      out[i] = S{1} / (S{1} + e);
    } else {
      const S e = std::exp(v);
      out[i] = e / (S{1} + e);
    }
  }
  ctx.out = out;
  return out;
}

template <typename S>
Tensor<S> sigmoid_backward(const SigmoidCtx<S>& ctx, const Tensor<S>& gy) {
  Tensor<S> gx(gy.shape());
  gx.array() = gy.array() * ctx.out.array() * (S{1} - ctx.out.array());
  return gx;
}

struct Pool2Ctx {
  Shape in_shape;
  std::vector<std::int64_t> argmax;  // flat input index per output element
};

// 2x2 window, stride 2. Ties go to the first element in row-major order.
template <typename S>
Tensor<S> maxpool2x2(const Tensor<S>& x, Pool2Ctx& ctx) {
  const Shape& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw std::invalid_argument("maxpool2x2: spatial dims must be even, got " + s.str());
  }
  Tensor<S> out({s.n, s.c, s.h / 2, s.w / 2});
  ctx.in_shape = s;
  ctx.argmax.assign(static_cast<std::size_t>(out.size()), 0);
  std::int64_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int i = 0; i < s.h; i += 2) {
        for (int j = 0; j < s.w; j += 2) {
          std::int64_t best_idx = x.offset(n, c, i, j);
          S best = x[best_idx];
          for (int u = 0; u < 2; ++u) {
            for (int v = 0; v < 2; ++v) {
              const std::int64_t idx = x.offset(n, c, i + u, j + v);
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          }
          out[o] = best;
          ctx.argmax[o] = best_idx;
          ++o;
        }
      }
    }
  }
  return out;
}

template <typename S>
Tensor<S> maxpool2x2_backward(const Pool2Ctx& ctx, const Tensor<S>& gy) {
  Tensor<S> gx(ctx.in_shape);
  for (std::int64_t o = 0; o < gy.size(); ++o) gx[ctx.argmax[o]] += gy[o];
  return gx;
}

struct Pool3Ctx {
  Shape in_shape;
  std::vector<std::int64_t> argmax;
};

// 3x3 window, stride 1, "same" extent: border windows take the max over
// their in-bounds taps. Ties go to the first valid tap in row-major order.
template <typename S>
Tensor<S> maxpool3x3_same(const Tensor<S>& x, Pool3Ctx& ctx) {
  const Shape& s = x.shape();
  Tensor<S> out(s);
  ctx.in_shape = s;
  ctx.argmax.assign(static_cast<std::size_t>(out.size()), 0);
  std::int64_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int i = 0; i < s.h; ++i) {
        for (int j = 0; j < s.w; ++j) {
          S best = -std::numeric_limits<S>::infinity();
          std::int64_t best_idx = -1;
          for (int u = -1; u <= 1; ++u) {
            const int ii = i + u;
            if (ii < 0 || ii >= s.h) continue;
            for (int v = -1; v <= 1; ++v) {
              const int jj = j + v;
              if (jj < 0 || jj >= s.w) continue;
              const std::int64_t idx = x.offset(n, c, ii, jj);
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          }
          out[o] = best;
          ctx.argmax[o] = best_idx;
          ++o;
        }
      }
    }
  }
  return out;
}

template <typename S>
Tensor<S> maxpool3x3_same_backward(const Pool3Ctx& ctx, const Tensor<S>& gy) {
  Tensor<S> gx(ctx.in_shape);
  for (std::int64_t o = 0; o < gy.size(); ++o) gx[ctx.argmax[o]] += gy[o];
  return gx;
}

template <typename S>
struct InstanceNormCtx {
  Tensor<S> xhat;
  std::vector<S> inv_std;  // one per (n,c) slice
};

// Per-example, per-channel standardization with a learnable affine.
// Uses biased variance and the same statistics in Train and Eval.
template <typename S>
struct InstanceNorm2d {
  Param<S>* gamma = nullptr;  // (1,c,1,1)
  Param<S>* beta = nullptr;   // (1,c,1,1)
  S eps = S(1e-5);

  Tensor<S> forward(const Tensor<S>& x, InstanceNormCtx<S>& ctx) const {
    if (!(eps > S{0})) throw std::invalid_argument("instance_norm: eps must be > 0");
    const Shape& s = x.shape();
    if (gamma->value.shape().c != s.c || beta->value.shape().c != s.c) {
      throw std::invalid_argument("instance_norm: affine channels do not match input " + s.str());
    }
    Tensor<S> out(s);
    ctx.xhat = Tensor<S>(s);
    ctx.inv_std.assign(static_cast<std::size_t>(s.n) * s.c, S{0});
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const auto slice = x.slice_array(n, c);
        const S mean = slice.mean();
        const S var = (slice - mean).square().mean();
        const S inv = S{1} / std::sqrt(var + eps);
        ctx.inv_std[static_cast<std::size_t>(n) * s.c + c] = inv;
        auto xhat = ctx.xhat.slice_array(n, c);
        xhat = (slice - mean) * inv;
        out.slice_array(n, c) = gamma->value[c] * xhat + beta->value[c];
      }
    }
    return out;
  }

  Tensor<S> backward(const InstanceNormCtx<S>& ctx, const Tensor<S>& gy) const {
    const Shape& s = ctx.xhat.shape();
    Tensor<S> gx(s);
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const auto g = gy.slice_array(n, c);
        const auto xhat = ctx.xhat.slice_array(n, c);
        const S inv = ctx.inv_std[static_cast<std::size_t>(n) * s.c + c];
        gamma->grad[c] += (g * xhat).sum();
        beta->grad[c] += g.sum();
        const auto gxh = g * gamma->value[c];
        const S mean_g = gxh.mean();
        const S mean_gx = (gxh * xhat).mean();
        gx.slice_array(n, c) = inv * (gxh - mean_g - xhat * mean_gx);
      }
    }
    return gx;
  }
};

template <typename S>
struct DropoutCtx {
  bool identity = true;
  Tensor<S> mask;  // scale values, 0 or 1/(1-rate)
};

// Inverted elementwise dropout: Train scales kept values by 1/(1-rate),
// Eval is the identity. Mask draws consume one uniform per element in
// flat row-major order.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, Mode mode, Rng* rng, DropoutCtx<S>& ctx) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (mode == Mode::Eval || rate == 0.0) {
    ctx.identity = true;
    return x;
  }
  if (rng == nullptr) throw std::invalid_argument("dropout: Train mode requires an rng");
  ctx.identity = false;
  ctx.mask = Tensor<S>(x.shape());
  const S scale = static_cast<S>(1.0 / (1.0 - rate));
  for (std::int64_t i = 0; i < x.size(); ++i) {
    ctx.mask[i] = rng->uniform() < rate ? S{0} : scale;
  }
  return mul(x, ctx.mask);
}

template <typename S>
Tensor<S> dropout_backward(const DropoutCtx<S>& ctx, const Tensor<S>& gy) {
  return ctx.identity ? gy : mul(gy, ctx.mask);
}

template <typename S>
struct SpatialDropoutCtx {
  bool identity = true;
  Tensor<S> mask;  // (n,c,1,1)
};

// Drops whole (n,c) feature maps; one uniform per slice, n-major order.
template <typename S>
Tensor<S> spatial_dropout(const Tensor<S>& x, double rate, Mode mode, Rng* rng,
                          SpatialDropoutCtx<S>& ctx) {
  if (rate < 0.0 || rate >= 1.0) {
    throw std::invalid_argument("spatial_dropout: rate must be in [0,1), got " +
                                std::to_string(rate));
  }
  if (mode == Mode::Eval || rate == 0.0) {
    ctx.identity = true;
    return x;
  }
  if (rng == nullptr) throw std::invalid_argument("spatial_dropout: Train mode requires an rng");
  ctx.identity = false;
  ctx.mask = Tensor<S>({x.shape().n, x.shape().c, 1, 1});
  const S scale = static_cast<S>(1.0 / (1.0 - rate));
  for (std::int64_t i = 0; i < ctx.mask.size(); ++i) {
    ctx.mask[i] = rng->uniform() < rate ? S{0} : scale;
  }
  return mul(x, ctx.mask);
}

template <typename S>
Tensor<S> spatial_dropout_backward(const SpatialDropoutCtx<S>& ctx, const Tensor<S>& gy) {
  return ctx.identity ? gy : mul(gy, ctx.mask);
}

struct Upsample2xCtx {
  Shape in_shape;
};

namespace detail {

// Half-pixel-center source coordinates for 2x upscaling, clamped to the
// valid range: s = (d + 0.5)/2 - 0.5.
template <typename S>
void up2x_coords(int in_dim, std::vector<int>& i0, std::vector<int>& i1, std::vector<S>& frac) {
  const int out_dim = 2 * in_dim;
  i0.resize(out_dim);
  i1.resize(out_dim);
  frac.resize(out_dim);
  for (int d = 0; d < out_dim; ++d) {
    S s = (static_cast<S>(d) + S{0.5}) / S{2} - S{0.5};
    if (s < S{0}) s = S{0};
    if (s > static_cast<S>(in_dim - 1)) s = static_cast<S>(in_dim - 1);
    const int lo = static_cast<int>(std::floor(s));
    i0[d] = lo;
    i1[d] = std::min(lo + 1, in_dim - 1);
    frac[d] = s - static_cast<S>(lo);
  }
}

}  // namespace detail

template <typename S>
Tensor<S> bilinear_upsample2x(const Tensor<S>& x, Upsample2xCtx& ctx) {
  const Shape& s = x.shape();
  ctx.in_shape = s;
  Tensor<S> out({s.n, s.c, 2 * s.h, 2 * s.w});
  std::vector<int> r0, r1, c0, c1;
  std::vector<S> rf, cf;
  detail::up2x_coords<S>(s.h, r0, r1, rf);
  detail::up2x_coords<S>(s.w, c0, c1, cf);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int i = 0; i < 2 * s.h; ++i) {
        const S fi = rf[i];
        for (int j = 0; j < 2 * s.w; ++j) {
          const S fj = cf[j];
          const S top = (S{1} - fj) * x(n, c, r0[i], c0[j]) + fj * x(n, c, r0[i], c1[j]);
          const S bot = (S{1} - fj) * x(n, c, r1[i], c0[j]) + fj * x(n, c, r1[i], c1[j]);
          out(n, c, i, j) = (S{1} - fi) * top + fi * bot;
        }
      }
    }
  }
  return out;
}

template <typename S>
Tensor<S> bilinear_upsample2x_backward(const Upsample2xCtx& ctx, const Tensor<S>& gy) {
  const Shape& s = ctx.in_shape;
  Tensor<S> gx(s);
  std::vector<int> r0, r1, c0, c1;
  std::vector<S> rf, cf;
  detail::up2x_coords<S>(s.h, r0, r1, rf);
  detail::up2x_coords<S>(s.w, c0, c1, cf);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int i = 0; i < 2 * s.h; ++i) {
        const S fi = rf[i];
        for (int j = 0; j < 2 * s.w; ++j) {
          const S fj = cf[j];
          const S g = gy(n, c, i, j);
          gx(n, c, r0[i], c0[j]) += (S{1} - fi) * (S{1} - fj) * g;
          gx(n, c, r0[i], c1[j]) += (S{1} - fi) * fj * g;
          gx(n, c, r1[i], c0[j]) += fi * (S{1} - fj) * g;
          gx(n, c, r1[i], c1[j]) += fi * fj * g;
        }
      }
    }
  }
  return gx;
}

struct GapCtx {
  Shape in_shape;
};

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x, GapCtx& ctx) {
  const Shape& s = x.shape();
  ctx.in_shape = s;
  Tensor<S> out({s.n, s.c, 1, 1});
  // sequential accumulation in index order
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      S sum{0};
      const S* p = x.data() + x.offset(n, c, 0, 0);
      for (std::int64_t i = 0; i < s.spatial(); ++i) sum += p[i];
      out(n, c, 0, 0) = sum / static_cast<S>(s.spatial());
    }
  }
  return out;
}

template <typename S>
Tensor<S> global_avg_pool_backward(const GapCtx& ctx, const Tensor<S>& gy) {
  const Shape& s = ctx.in_shape;
  Tensor<S> gx(s);
  const S inv = S{1} / static_cast<S>(s.spatial());
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      gx.slice_array(n, c) = gy(n, c, 0, 0) * inv;
    }
  }
  return gx;
}

template <typename S>
struct ModulateCtx {
  Tensor<S> f;
  Tensor<S> alpha;
};

// out = alpha (x) f + f, i.e. channel i scaled by (1 + alpha_i).
template <typename S>
Tensor<S> gap_modulate(const Tensor<S>& f, const Tensor<S>& alpha, ModulateCtx<S>& ctx) {
  const Shape& s = f.shape();
  if (!(alpha.shape() == Shape{s.n, s.c, 1, 1})) {
    throw std::invalid_argument("gap_modulate: alpha shape " + alpha.shape().str() +
                                " does not match feature " + s.str());
  }
  ctx.f = f;
  ctx.alpha = alpha;
  Tensor<S> out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const S a = alpha(n, c, 0, 0);
      const auto src = f.slice_array(n, c);
      out.slice_array(n, c) = a * src + src;
    }
  }
  return out;
}

template <typename S>
struct ModulateGrads {
  Tensor<S> gf;
  Tensor<S> galpha;  // (n,c,1,1)
};

template <typename S>
ModulateGrads<S> gap_modulate_backward(const ModulateCtx<S>& ctx, const Tensor<S>& gy) {
  const Shape& s = ctx.f.shape();
  ModulateGrads<S> out{Tensor<S>(s), Tensor<S>({s.n, s.c, 1, 1})};
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const S a = ctx.alpha(n, c, 0, 0);
      const auto g = gy.slice_array(n, c);
      out.gf.slice_array(n, c) = g * (S{1} + a);
      out.galpha(n, c, 0, 0) = (g * ctx.f.slice_array(n, c)).sum();
    }
  }
  return out;
}

}  // namespace fgseg
