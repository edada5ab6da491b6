#include <doctest.h>

#include <cmath>

#include "fgseg/gradsuite.hpp"
#include "fgseg/layers.hpp"

using namespace fgseg;

namespace {

// Direct nested-loop convolution, independent of the im2col path.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w,
                           const Tensor<double>& b, int dilation) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const int k = ws.h;
  const int pad = dilation * (k - 1) / 2;
  Tensor<double> out({xs.n, ws.n, xs.h, xs.w});
  for (int n = 0; n < xs.n; ++n) {
    for (int kc = 0; kc < ws.n; ++kc) {
      for (int i = 0; i < xs.h; ++i) {
        for (int j = 0; j < xs.w; ++j) {
          double acc = b(0, kc, 0, 0);
          for (int c = 0; c < xs.c; ++c) {
            for (int u = 0; u < k; ++u) {
              const int ii = i + dilation * u - pad;
              if (ii < 0 || ii >= xs.h) continue;
              for (int v = 0; v < k; ++v) {
                const int jj = j + dilation * v - pad;
                if (jj < 0 || jj >= xs.w) continue;
                acc += w(kc, c, u, v) * x(n, c, ii, jj);
              }
            }
          }
          out(n, kc, i, j) = acc;
        }
      }
    }
  }
  return out;
}

Conv2d<double> make_conv(Param<double>& w, Param<double>& b, int dilation) {
  return Conv2d<double>{&w, &b, dilation};
}

}  // namespace

TEST_CASE("conv2d: dilation-2 ones kernel on a 5x5 ones image") {
  Param<double> w("w", Tensor<double>::ones({1, 1, 3, 3}));
  Param<double> b("b", Tensor<double>::zeros({1, 1, 1, 1}));
  auto conv = make_conv(w, b, 2);
  Conv2dCtx<double> ctx;
  auto out = conv.forward(Tensor<double>::ones({1, 1, 5, 5}), ctx);
  CHECK(out.shape() == Shape{1, 1, 5, 5});
  CHECK(out(0, 0, 2, 2) == doctest::Approx(9.0));  // all nine taps land inside
}

TEST_CASE("conv2d: 1x1 identity kernel") {
  Param<double> w("w", Tensor<double>::ones({1, 1, 1, 1}));
  Param<double> b("b", Tensor<double>::zeros({1, 1, 1, 1}));
  auto conv = make_conv(w, b, 1);
  Rng rng(21);
  auto x = Tensor<double>::uniform({1, 1, 4, 4}, rng, -1.0, 1.0);
  Conv2dCtx<double> ctx;
  CHECK(bit_equal(conv.forward(x, ctx), x));
}

TEST_CASE("conv2d: dilation 16 on a 16x16 input keeps same dims") {
  Rng rng(22);
  Param<double> w("w", Tensor<double>::he_normal({2, 1, 3, 3}, rng));
  Param<double> b("b", Tensor<double>::zeros({1, 2, 1, 1}));
  auto conv = make_conv(w, b, 16);
  auto x = Tensor<double>::uniform({1, 1, 16, 16}, rng, -1.0, 1.0);
  Conv2dCtx<double> ctx;
  auto out = conv.forward(x, ctx);
  CHECK(out.shape() == Shape{1, 2, 16, 16});
  CHECK(bit_equal(out, conv_oracle(x, w.value, b.value, 16)));
}

TEST_CASE("conv2d matches the nested-loop oracle across dilations") {
  Rng rng(23);
  for (int dilation : {1, 2, 4, 8}) {
    auto x = Tensor<double>::uniform({2, 3, 10, 9}, rng, -1.0, 1.0);
    Param<double> w("w", Tensor<double>::he_normal({4, 3, 3, 3}, rng));
    Param<double> b("b", Tensor<double>::uniform({1, 4, 1, 1}, rng, -0.5, 0.5));
    auto conv = make_conv(w, b, dilation);
    Conv2dCtx<double> ctx;
    auto got = conv.forward(x, ctx);
    auto want = conv_oracle(x, w.value, b.value, dilation);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("conv2d rejects even kernels and channel mismatches") {
  Param<double> w("w", Tensor<double>::ones({1, 2, 2, 2}));
  Param<double> b("b", Tensor<double>::zeros({1, 1, 1, 1}));
  auto conv = make_conv(w, b, 1);
  Conv2dCtx<double> ctx;
  CHECK_THROWS_AS(conv.forward(Tensor<double>::ones({1, 2, 4, 4}), ctx), std::invalid_argument);
  Param<double> w3("w", Tensor<double>::ones({1, 2, 3, 3}));
  auto conv3 = make_conv(w3, b, 1);
  CHECK_THROWS_AS(conv3.forward(Tensor<double>::ones({1, 3, 4, 4}), ctx), std::invalid_argument);
}

TEST_CASE("conv2d receptive field: pixels outside the taps never matter") {
  Rng rng(24);
  const int dilation = 4;
  auto x = Tensor<double>::uniform({1, 1, 12, 12}, rng, -1.0, 1.0);
  Param<double> w("w", Tensor<double>::he_normal({1, 1, 3, 3}, rng));
  Param<double> b("b", Tensor<double>::zeros({1, 1, 1, 1}));
  auto conv = make_conv(w, b, dilation);
  Conv2dCtx<double> ctx;
  auto base = conv.forward(x, ctx);
  const int oi = 6, oj = 5;
  // Perturb every pixel that is not one of the nine dilated taps.
  Tensor<double> perturbed = x;
  for (int i = 0; i < 12; ++i) {
    for (int j = 0; j < 12; ++j) {
      const bool on_tap = std::abs(i - oi) % dilation == 0 && std::abs(i - oi) <= dilation &&
                          std::abs(j - oj) % dilation == 0 && std::abs(j - oj) <= dilation;
      if (!on_tap) perturbed(0, 0, i, j) += rng.uniform(-5.0, 5.0);
    }
  }
  auto moved = conv.forward(perturbed, ctx);
  CHECK(base(0, 0, oi, oj) == moved(0, 0, oi, oj));
}

TEST_CASE("relu basics") {
  Tensor<float> x({1, 1, 1, 3});
  x[0] = -1;
  x[1] = 0;
  x[2] = 2;
  ReluCtx<float> ctx;
  auto y = relu(x, ctx);
  CHECK(y[0] == 0.0f);
  CHECK(y[1] == 0.0f);
  CHECK(y[2] == 2.0f);

  auto pos = Tensor<float>::constant({1, 1, 2, 2}, 0.5f);
  CHECK(bit_equal(relu(pos, ctx), pos));
}

TEST_CASE("sigmoid values and saturation") {
  Tensor<double> x({1, 1, 1, 3});
  x[0] = 0.0;
  x[1] = 100.0;
  x[2] = -100.0;
  SigmoidCtx<double> ctx;
  auto y = sigmoid(x, ctx);
  CHECK(y[0] == doctest::Approx(0.5));
  CHECK(std::abs(y[1] - 1.0) < 1e-12);
  CHECK(std::abs(y[2]) < 1e-12);
  CHECK(y.all_finite());
}

TEST_CASE("maxpool2x2 basics and tie rule") {
  Tensor<double> x({1, 1, 2, 2});
  x[0] = 1;
  x[1] = 2;
  x[2] = 3;
  x[3] = 4;
  Pool2Ctx ctx;
  auto y = maxpool2x2(x, ctx);
  CHECK(y.size() == 1);
  CHECK(y[0] == 4.0);

  auto flat = Tensor<double>::constant({1, 1, 4, 4}, 2.5);
  auto pooled = maxpool2x2(flat, ctx);
  CHECK(pooled.shape() == Shape{1, 1, 2, 2});
  for (std::int64_t i = 0; i < pooled.size(); ++i) CHECK(pooled[i] == 2.5);
  // ties resolve to the first window element, which takes the whole gradient
  auto g = maxpool2x2_backward<double>(ctx, Tensor<double>::ones({1, 1, 2, 2}));
  CHECK(g(0, 0, 0, 0) == 1.0);
  CHECK(g(0, 0, 0, 1) == 0.0);
  CHECK(g(0, 0, 2, 2) == 1.0);
}

TEST_CASE("maxpool2x2 matches a loop oracle on random input") {
  Rng rng(25);
  auto x = Tensor<double>::uniform({2, 3, 8, 8}, rng, -4.0, 4.0);
  Pool2Ctx ctx;
  auto y = maxpool2x2(x, ctx);
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
          double best = -1e300;
          for (int u = 0; u < 2; ++u) {
            for (int v = 0; v < 2; ++v) best = std::max(best, x(n, c, 2 * i + u, 2 * j + v));
          }
          CHECK(y(n, c, i, j) == best);
        }
      }
    }
  }
}

TEST_CASE("maxpool2x2 rejects odd dims") {
  Pool2Ctx ctx;
  CHECK_THROWS_AS(maxpool2x2(Tensor<double>::ones({1, 1, 3, 4}), ctx), std::invalid_argument);
}

TEST_CASE("maxpool3x3_same keeps dims and matches a loop oracle") {
  Rng rng(26);
  auto x = Tensor<double>::uniform({1, 2, 5, 6}, rng, -4.0, 4.0);
  Pool3Ctx ctx;
  auto y = maxpool3x3_same(x, ctx);
  CHECK(y.shape() == x.shape());
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 6; ++j) {
        double best = -1e300;
        for (int u = -1; u <= 1; ++u) {
          for (int v = -1; v <= 1; ++v) {
            const int ii = i + u, jj = j + v;
            if (ii < 0 || ii >= 5 || jj < 0 || jj >= 6) continue;
            best = std::max(best, x(0, c, ii, jj));
          }
        }
        CHECK(y(0, c, i, j) == best);
      }
    }
  }
}

TEST_CASE("instance_norm closed-form example") {
  Tensor<double> x({1, 1, 2, 2});
  x[0] = 1;
  x[1] = 2;
  x[2] = 3;
  x[3] = 4;
  Param<double> gamma("g", Tensor<double>::ones({1, 1, 1, 1}));
  Param<double> beta("b", Tensor<double>::zeros({1, 1, 1, 1}));
  InstanceNorm2d<double> norm{&gamma, &beta, 1e-5};
  InstanceNormCtx<double> ctx;
  auto y = norm.forward(x, ctx);
  CHECK(y[0] == doctest::Approx(-1.3416).epsilon(1e-3));
  CHECK(y[1] == doctest::Approx(-0.4472).epsilon(1e-3));
  CHECK(y[2] == doctest::Approx(0.4472).epsilon(1e-3));
  CHECK(y[3] == doctest::Approx(1.3416).epsilon(1e-3));
}

TEST_CASE("instance_norm: constant slice maps to ~0, gamma=0 gives beta") {
  auto x = Tensor<double>::constant({1, 2, 3, 3}, 7.0);
  Param<double> gamma("g", Tensor<double>::ones({1, 2, 1, 1}));
  Param<double> beta("b", Tensor<double>::zeros({1, 2, 1, 1}));
  InstanceNorm2d<double> norm{&gamma, &beta, 1e-5};
  InstanceNormCtx<double> ctx;
  auto y = norm.forward(x, ctx);
  for (std::int64_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i]) < std::sqrt(1e-5));

  gamma.value.array() = 0.0;
  beta.value(0, 0, 0, 0) = 1.5;
  beta.value(0, 1, 0, 0) = -2.0;
  Rng rng(27);
  auto r = Tensor<double>::uniform({1, 2, 3, 3}, rng, -4.0, 4.0);
  auto z = norm.forward(r, ctx);
  for (int h = 0; h < 3; ++h) {
    for (int w = 0; w < 3; ++w) {
      CHECK(z(0, 0, h, w) == 1.5);
      CHECK(z(0, 1, h, w) == -2.0);
    }
  }
}

TEST_CASE("instance_norm output statistics with identity affine") {
  Rng rng(28);
  auto x = Tensor<double>::uniform({2, 3, 6, 6}, rng, -2.0, 2.0);
  Param<double> gamma("g", Tensor<double>::ones({1, 3, 1, 1}));
  Param<double> beta("b", Tensor<double>::zeros({1, 3, 1, 1}));
  const double eps = 1e-5;
  InstanceNorm2d<double> norm{&gamma, &beta, eps};
  InstanceNormCtx<double> ctx;
  auto y = norm.forward(x, ctx);
  auto in_m = channel_moments(x);
  auto out_m = channel_moments(y);
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      CHECK(std::abs(out_m.mean(n, c, 0, 0)) < 1e-5);
      const double expected = in_m.var(n, c, 0, 0) / (in_m.var(n, c, 0, 0) + eps);
      CHECK(out_m.var(n, c, 0, 0) > 0.99 * expected);
      CHECK(out_m.var(n, c, 0, 0) < 1.01 * expected);
    }
  }
}

TEST_CASE("dropout identities") {
  Rng rng(29);
  auto x = Tensor<float>::uniform({1, 4, 4, 4}, rng, -1.0, 1.0);
  DropoutCtx<float> ctx;
  CHECK(bit_equal(dropout(x, 0.0, Mode::Train, &rng, ctx), x));
  CHECK(bit_equal(dropout(x, 0.7, Mode::Eval, nullptr, ctx), x));
  SpatialDropoutCtx<float> sctx;
  CHECK(bit_equal(spatial_dropout(x, 0.0, Mode::Train, &rng, sctx), x));
  CHECK(bit_equal(spatial_dropout(x, 0.7, Mode::Eval, nullptr, sctx), x));
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::Train, &rng, ctx), std::invalid_argument);
  CHECK_THROWS_AS(spatial_dropout(x, -0.1, Mode::Train, &rng, sctx), std::invalid_argument);
}

TEST_CASE("spatial_dropout drop rate and expectation, rate 0.25") {
  Rng rng(30);
  auto x = Tensor<double>::ones({100, 100, 2, 2});  // 10,000 channel slices
  SpatialDropoutCtx<double> ctx;
  auto y = spatial_dropout(x, 0.25, Mode::Train, &rng, ctx);
  std::int64_t dropped = 0;
  for (std::int64_t i = 0; i < ctx.mask.size(); ++i) {
    if (ctx.mask[i] == 0.0) ++dropped;
  }
  const double frac = static_cast<double>(dropped) / static_cast<double>(ctx.mask.size());
  CHECK(frac > 0.23);
  CHECK(frac < 0.27);
  const double mean_out = y.array().mean();
  CHECK(mean_out > 0.97);
  CHECK(mean_out < 1.03);
  // whole slices are either zero or scaled
  for (int n = 0; n < 100; ++n) {
    for (int c = 0; c < 100; ++c) {
      const double first = y(n, c, 0, 0);
      for (int h = 0; h < 2; ++h) {
        for (int w = 0; w < 2; ++w) CHECK(y(n, c, h, w) == first);
      }
    }
  }
}

TEST_CASE("dropout drop rate, rate 0.5 over 1e6 elements") {
  Rng rng(31);
  auto x = Tensor<double>::ones({1, 100, 100, 100});
  DropoutCtx<double> ctx;
  auto y = dropout(x, 0.5, Mode::Train, &rng, ctx);
  std::int64_t dropped = 0;
  for (std::int64_t i = 0; i < y.size(); ++i) {
    if (y[i] == 0.0) ++dropped;
  }
  const double frac = static_cast<double>(dropped) / static_cast<double>(y.size());
  CHECK(frac > 0.49);
  CHECK(frac < 0.51);
}

TEST_CASE("bilinear upsample: constants and 1x1 clamp") {
  auto k = Tensor<double>::constant({1, 2, 3, 4}, 3.25);
  Upsample2xCtx ctx;
  auto up = bilinear_upsample2x(k, ctx);
  CHECK(up.shape() == Shape{1, 2, 6, 8});
  for (std::int64_t i = 0; i < up.size(); ++i) CHECK(up[i] == doctest::Approx(3.25));

  auto single = Tensor<double>::constant({1, 1, 1, 1}, 5.0);
  auto up1 = bilinear_upsample2x(single, ctx);
  CHECK(up1.shape() == Shape{1, 1, 2, 2});
  for (std::int64_t i = 0; i < up1.size(); ++i) CHECK(up1[i] == 5.0);
}

TEST_CASE("bilinear upsample matches the coordinate-formula oracle") {
  Tensor<double> x({1, 1, 2, 2});
  x[0] = 0;
  x[1] = 1;
  x[2] = 2;
  x[3] = 3;
  Upsample2xCtx ctx;
  auto up = bilinear_upsample2x(x, ctx);
  CHECK(up.shape() == Shape{1, 1, 4, 4});
  for (int d = 0; d < 4; ++d) {
    for (int e = 0; e < 4; ++e) {
      auto src = [&](int dim, int idx) {
        double s = (idx + 0.5) / 2.0 - 0.5;
        return std::clamp(s, 0.0, static_cast<double>(dim - 1));
      };
      const double sy = src(2, d), sx = src(2, e);
      const int y0 = static_cast<int>(std::floor(sy));
      const int x0 = static_cast<int>(std::floor(sx));
      const int y1 = std::min(y0 + 1, 1), x1 = std::min(x0 + 1, 1);
      const double fy = sy - y0, fx = sx - x0;
      const double want = (1 - fy) * ((1 - fx) * x(0, 0, y0, x0) + fx * x(0, 0, y0, x1)) +
                          fy * ((1 - fx) * x(0, 0, y1, x0) + fx * x(0, 0, y1, x1));
      CHECK(up(0, 0, d, e) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("global_avg_pool basics and exactness") {
  auto k = Tensor<double>::constant({1, 2, 4, 4}, 1.75);
  GapCtx ctx;
  auto g = global_avg_pool(k, ctx);
  CHECK(g.shape() == Shape{1, 2, 1, 1});
  CHECK(g[0] == doctest::Approx(1.75));

  Tensor<double> two({1, 1, 1, 2});
  two[0] = 0;
  two[1] = 2;
  CHECK(global_avg_pool(two, ctx)[0] == doctest::Approx(1.0));

  Rng rng(32);
  auto x = Tensor<double>::uniform({2, 3, 4, 4}, rng, -2.0, 2.0);
  auto got = global_avg_pool(x, ctx);
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      double sum = 0.0;
      for (int h = 0; h < 4; ++h) {
        for (int w = 0; w < 4; ++w) sum += x(n, c, h, w);
      }
      CHECK(got(n, c, 0, 0) == sum / 16.0);
    }
  }
}

TEST_CASE("gap_modulate: alpha 0 is the identity, alpha 1 doubles") {
  Rng rng(33);
  auto f = Tensor<double>::uniform({1, 4, 3, 3}, rng, 0.0, 2.0);
  ModulateCtx<double> ctx;
  auto zero = Tensor<double>::zeros({1, 4, 1, 1});
  CHECK(bit_equal(gap_modulate(f, zero, ctx), f));
  auto one = Tensor<double>::ones({1, 4, 1, 1});
  auto doubled = gap_modulate(f, one, ctx);
  for (std::int64_t i = 0; i < f.size(); ++i) CHECK(doubled[i] == 2.0 * f[i]);
}

TEST_CASE("gap_modulate matches the broadcast-loop oracle") {
  Rng rng(34);
  auto f = Tensor<double>::uniform({2, 3, 4, 4}, rng, -1.0, 1.0);
  auto alpha = Tensor<double>::uniform({2, 3, 1, 1}, rng, -0.5, 0.5);
  ModulateCtx<double> ctx;
  auto out = gap_modulate(f, alpha, ctx);
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) {
      for (int h = 0; h < 4; ++h) {
        for (int w = 0; w < 4; ++w) {
          CHECK(out(n, c, h, w) == alpha(n, c, 0, 0) * f(n, c, h, w) + f(n, c, h, w));
        }
      }
    }
  }
  auto bad = Tensor<double>::zeros({2, 4, 1, 1});
  CHECK_THROWS_AS(gap_modulate(f, bad, ctx), std::invalid_argument);
}

TEST_CASE("every layer passes its finite-difference check on 3 seeds") {
  for (std::uint64_t seed : {101ull, 202ull, 303ull}) {
    for (const auto& entry : run_layer_gradient_checks(seed)) {
      INFO(entry.name, " seed ", seed, " err ", entry.max_rel_err);
      CHECK(entry.max_rel_err < entry.threshold);
    }
  }
}

TEST_CASE("negative control: a corrupted backward fails the check") {
  Rng rng(35);
  auto x = Tensor<double>::uniform({1, 2, 6, 6}, rng, -1.0, 1.0);
  Param<double> w("w", Tensor<double>::he_normal({2, 2, 3, 3}, rng));
  Param<double> b("b", Tensor<double>::zeros({1, 2, 1, 1}));
  Conv2d<double> conv{&w, &b, 1};
  auto r = Tensor<double>::uniform({1, 2, 6, 6}, rng, -1.0, 1.0);
  auto loss = [&] {
    Conv2dCtx<double> ctx;
    double s = 0.0;
    auto out = conv.forward(x, ctx);
    for (std::int64_t i = 0; i < out.size(); ++i) s += r[i] * out[i];
    return s;
  };
  Conv2dCtx<double> ctx;
  conv.forward(x, ctx);
  auto gx = conv.backward(ctx, r);
  gx.array() *= 1.01;  // deliberately wrong by 1%
  CHECK(fd_check_coords(loss, x, gx) > 1e-4);
}
