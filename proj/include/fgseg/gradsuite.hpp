#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fgseg/gradcheck.hpp"
#include "fgseg/network.hpp"
#include "fgseg/training.hpp"

namespace fgseg {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double threshold = 1e-4;

  bool pass() const { return max_rel_err < threshold; }
};

namespace detail {

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Values with pairwise gaps far above the FD step, so pooling argmaxes
// cannot flip under perturbation.
inline Tensor<double> well_separated(Shape shape, Rng& rng) {
  Tensor<double> t(shape);
  std::vector<std::int64_t> order(static_cast<std::size_t>(t.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  rng.shuffle(order);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<double>(order[static_cast<std::size_t>(i)]) * 0.01 +
           rng.uniform(-1e-3, 1e-3);
  }
  return t;
}

// Uniform draw nudged away from the ReLU kink.
inline Tensor<double> away_from_zero(Shape shape, Rng& rng) {
  Tensor<double> t = Tensor<double>::uniform(shape, rng, -1.0, 1.0);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[i] += t[i] >= 0.0 ? 1e-3 : -1e-3;
  }
  return t;
}

inline GradCheckEntry check_conv(const std::string& name, std::uint64_t seed, int k, int dilation,
                                 Shape in_shape, int out_c) {
  Rng rng(seed);
  Tensor<double> x = Tensor<double>::uniform(in_shape, rng, -1.0, 1.0);
  Param<double> w("w", Tensor<double>::uniform({out_c, in_shape.c, k, k}, rng, -0.5, 0.5));
  Param<double> b("b", Tensor<double>::uniform({1, out_c, 1, 1}, rng, -0.2, 0.2));
  const Conv2d<double> conv{&w, &b, dilation};
  const Tensor<double> r =
      Tensor<double>::uniform({in_shape.n, out_c, in_shape.h, in_shape.w}, rng, -1.0, 1.0);
  auto loss = [&] {
    Conv2dCtx<double> ctx;
    return dot(r, conv.forward(x, ctx));
  };
  Conv2dCtx<double> ctx;
  conv.forward(x, ctx);
  const Tensor<double> gx = conv.backward(ctx, r);
  GradCheckEntry e{name};
  e.max_rel_err = fd_check_coords(loss, x, gx);
  e.max_rel_err = std::max(e.max_rel_err, fd_check_coords(loss, w.value, w.grad));
  e.max_rel_err = std::max(e.max_rel_err, fd_check_coords(loss, b.value, b.grad));
  return e;
}

}  // namespace detail

inline GradCheckEntry gradcheck_relu(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x = detail::away_from_zero({1, 2, 5, 5}, rng);
  const Tensor<double> r = Tensor<double>::uniform(x.shape(), rng, -1.0, 1.0);
  auto loss = [&] {
    ReluCtx<double> ctx;
    return detail::dot(r, relu(x, ctx));
  };
  ReluCtx<double> ctx;
  relu(x, ctx);
  const Tensor<double> gx = relu_backward(ctx, r);
  return {"relu", fd_check_coords(loss, x, gx)};
}

inline GradCheckEntry gradcheck_sigmoid(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x = Tensor<double>::uniform({1, 2, 4, 4}, rng, -3.0, 3.0);
  const Tensor<double> r = Tensor<double>::uniform(x.shape(), rng, -1.0, 1.0);
  auto loss = [&] {
    SigmoidCtx<double> ctx;
    return detail::dot(r, sigmoid(x, ctx));
  };
  SigmoidCtx<double> ctx;
  sigmoid(x, ctx);
  const Tensor<double> gx = sigmoid_backward(ctx, r);
  return {"sigmoid", fd_check_coords(loss, x, gx)};
}

inline GradCheckEntry gradcheck_maxpool2x2(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x = detail::well_separated({1, 2, 6, 6}, rng);
  const Tensor<double> r = Tensor<double>::uniform({1, 2, 3, 3}, rng, -1.0, 1.0);
  auto loss = [&] {
    Pool2Ctx ctx;
    return detail::dot(r, maxpool2x2(x, ctx));
  };
  Pool2Ctx ctx;
  maxpool2x2(x, ctx);
  const Tensor<double> gx = maxpool2x2_backward<double>(ctx, r);
  return {"maxpool2x2", fd_check_coords(loss, x, gx)};
}

inline GradCheckEntry gradcheck_maxpool3x3(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x = detail::well_separated({1, 2, 5, 5}, rng);
  const Tensor<double> r = Tensor<double>::uniform(x.shape(), rng, -1.0, 1.0);
  auto loss = [&] {
    Pool3Ctx ctx;
    return detail::dot(r, maxpool3x3_same(x, ctx));
  };
  Pool3Ctx ctx;
  maxpool3x3_same(x, ctx);
  const Tensor<double> gx = maxpool3x3_same_backward<double>(ctx, r);
  return {"maxpool3x3_same", fd_check_coords(loss, x, gx)};
}

inline GradCheckEntry gradcheck_instance_norm(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x = Tensor<double>::uniform({1, 3, 4, 4}, rng, -1.0, 1.0);
  Param<double> gamma("gamma", Tensor<double>::uniform({1, 3, 1, 1}, rng, 0.5, 1.5));
  Param<double> beta("beta", Tensor<double>::uniform({1, 3, 1, 1}, rng, -0.5, 0.5));
  const InstanceNorm2d<double> norm{&gamma, &beta, 1e-5};
  const Tensor<double> r = Tensor<double>::uniform(x.shape(), rng, -1.0, 1.0);
  auto loss = [&] {
    InstanceNormCtx<double> ctx;
    return detail::dot(r, norm.forward(x, ctx));
  };
  InstanceNormCtx<double> ctx;
  norm.forward(x, ctx);
  const Tensor<double> gx = norm.backward(ctx, r);
  GradCheckEntry e{"instance_norm"};
  e.max_rel_err = fd_check_coords(loss, x, gx);
  e.max_rel_err = std::max(e.max_rel_err, fd_check_coords(loss, gamma.value, gamma.grad));
  e.max_rel_err = std::max(e.max_rel_err, fd_check_coords(loss, beta.value, beta.grad));
  return e;
}

inline GradCheckEntry gradcheck_spatial_dropout(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x = Tensor<double>::uniform({2, 6, 3, 3}, rng, -1.0, 1.0);
  const Tensor<double> r = Tensor<double>::uniform(x.shape(), rng, -1.0, 1.0);
  const std::uint64_t mask_seed = seed ^ 0x5d;
  auto loss = [&] {
    Rng mask_rng(mask_seed);
    SpatialDropoutCtx<double> ctx;
    return detail::dot(r, spatial_dropout(x, 0.25, Mode::Train, &mask_rng, ctx));
  };
  Rng mask_rng(mask_seed);
  SpatialDropoutCtx<double> ctx;
  spatial_dropout(x, 0.25, Mode::Train, &mask_rng, ctx);
  const Tensor<double> gx = spatial_dropout_backward(ctx, r);
  return {"spatial_dropout", fd_check_coords(loss, x, gx)};
}

inline GradCheckEntry gradcheck_dropout(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x = Tensor<double>::uniform({1, 3, 4, 4}, rng, -1.0, 1.0);
  const Tensor<double> r = Tensor<double>::uniform(x.shape(), rng, -1.0, 1.0);
  const std::uint64_t mask_seed = seed ^ 0xd5;
  auto loss = [&] {
    Rng mask_rng(mask_seed);
    DropoutCtx<double> ctx;
    return detail::dot(r, dropout(x, 0.5, Mode::Train, &mask_rng, ctx));
  };
  Rng mask_rng(mask_seed);
  DropoutCtx<double> ctx;
  dropout(x, 0.5, Mode::Train, &mask_rng, ctx);
  const Tensor<double> gx = dropout_backward(ctx, r);
  return {"dropout", fd_check_coords(loss, x, gx)};
}

inline GradCheckEntry gradcheck_upsample(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x = Tensor<double>::uniform({1, 2, 3, 3}, rng, -1.0, 1.0);
  const Tensor<double> r = Tensor<double>::uniform({1, 2, 6, 6}, rng, -1.0, 1.0);
  auto loss = [&] {
    Upsample2xCtx ctx;
    return detail::dot(r, bilinear_upsample2x(x, ctx));
  };
  Upsample2xCtx ctx;
  bilinear_upsample2x(x, ctx);
  const Tensor<double> gx = bilinear_upsample2x_backward<double>(ctx, r);
  return {"bilinear_upsample2x", fd_check_coords(loss, x, gx)};
}

inline GradCheckEntry gradcheck_gap(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x = Tensor<double>::uniform({1, 3, 4, 4}, rng, -1.0, 1.0);
  const Tensor<double> r = Tensor<double>::uniform({1, 3, 1, 1}, rng, -1.0, 1.0);
  auto loss = [&] {
    GapCtx ctx;
    return detail::dot(r, global_avg_pool(x, ctx));
  };
  GapCtx ctx;
  global_avg_pool(x, ctx);
  const Tensor<double> gx = global_avg_pool_backward<double>(ctx, r);
  return {"global_avg_pool", fd_check_coords(loss, x, gx)};
}

inline GradCheckEntry gradcheck_gap_modulate(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> f = Tensor<double>::uniform({1, 4, 3, 3}, rng, -1.0, 1.0);
  Tensor<double> alpha = Tensor<double>::uniform({1, 4, 1, 1}, rng, -0.5, 0.5);
  const Tensor<double> r = Tensor<double>::uniform(f.shape(), rng, -1.0, 1.0);
  auto loss = [&] {
    ModulateCtx<double> ctx;
    return detail::dot(r, gap_modulate(f, alpha, ctx));
  };
  ModulateCtx<double> ctx;
  gap_modulate(f, alpha, ctx);
  const ModulateGrads<double> grads = gap_modulate_backward(ctx, r);
  GradCheckEntry e{"gap_modulate"};
  e.max_rel_err = fd_check_coords(loss, f, grads.gf);
  e.max_rel_err = std::max(e.max_rel_err, fd_check_coords(loss, alpha, grads.galpha));
  return e;
}

inline GradCheckEntry gradcheck_weighted_bce(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> P = Tensor<double>::uniform({1, 1, 6, 6}, rng, 0.05, 0.95);
  Tensor<double> target({1, 1, 6, 6});
  Tensor<double> mask({1, 1, 6, 6});
  for (std::int64_t i = 0; i < target.size(); ++i) {
    target[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
    mask[i] = rng.uniform() < 0.2 ? 0.0 : 1.0;
  }
  mask[0] = 1.0;
  auto loss = [&] { return weighted_bce(P, target, 2.0, 0.5, mask).loss; };
  const BceResult<double> bce = weighted_bce(P, target, 2.0, 0.5, mask);
  return {"weighted_bce", fd_check_coords(loss, P, bce.dP), 1e-6};
}

inline std::vector<GradCheckEntry> run_layer_gradient_checks(std::uint64_t seed) {
  std::vector<GradCheckEntry> out;
  out.push_back(detail::check_conv("conv2d_3x3", seed, 3, 1, {1, 2, 6, 6}, 3));
  out.push_back(detail::check_conv("conv2d_3x3_dil4", seed + 1, 3, 4, {1, 2, 8, 8}, 2));
  out.push_back(detail::check_conv("conv2d_3x3_dil8", seed + 2, 3, 8, {1, 2, 12, 12}, 2));
  out.push_back(detail::check_conv("conv2d_3x3_dil16", seed + 3, 3, 16, {1, 2, 16, 16}, 2));
  out.push_back(detail::check_conv("conv2d_1x1", seed + 4, 1, 1, {1, 3, 5, 5}, 2));
  out.push_back(gradcheck_relu(seed + 5));
  out.push_back(gradcheck_sigmoid(seed + 6));
  out.push_back(gradcheck_maxpool2x2(seed + 7));
  out.push_back(gradcheck_maxpool3x3(seed + 8));
  out.push_back(gradcheck_instance_norm(seed + 9));
  out.push_back(gradcheck_spatial_dropout(seed + 10));
  out.push_back(gradcheck_dropout(seed + 11));
  out.push_back(gradcheck_upsample(seed + 12));
  out.push_back(gradcheck_gap(seed + 13));
  out.push_back(gradcheck_gap_modulate(seed + 14));
  out.push_back(gradcheck_weighted_bce(seed + 15));
  return out;
}

// End-to-end check through the weighted BCE loss: directional derivatives
// over the input and every parameter jointly.
inline GradCheckEntry run_model_gradient_check(std::uint64_t seed, int directions = 3) {
  ModelConfig cfg;
  cfg.width_mult = 1.0 / 8;
  Rng init_rng(seed);
  Model<double> model(cfg, init_rng);

  Rng rng(seed ^ 0xabcdef);
  Tensor<double> x = Tensor<double>::uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
  Tensor<double> target({1, 1, 16, 16});
  for (std::int64_t i = 0; i < target.size(); ++i) {
    target[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
  }
  const Tensor<double> mask = Tensor<double>::ones({1, 1, 16, 16});
  const std::uint64_t mask_seed = seed ^ 0x105e;

  auto loss = [&] {
    Rng dropout_rng(mask_seed);
    ForwardTrace<double> trace = model.forward(x, Mode::Train, &dropout_rng);
    return static_cast<double>(weighted_bce(trace.P, target, 2.0, 0.5, mask).loss);
  };

  model.weights().zero_grads();
  Rng dropout_rng(mask_seed);
  ForwardTrace<double> trace = model.forward(x, Mode::Train, &dropout_rng);
  const BceResult<double> bce = weighted_bce(trace.P, target, 2.0, 0.5, mask);
  const Tensor<double> gx = model.backward(trace, bce.dP);

  std::vector<std::pair<Tensor<double>*, const Tensor<double>*>> pairs;
  pairs.emplace_back(&x, &gx);
  for (std::size_t i = 0; i < model.weights().size(); ++i) {
    pairs.emplace_back(&model.weights()[i].value, &model.weights()[i].grad);
  }

  GradCheckEntry e{"model_end_to_end", 0.0, 1e-3};
  Rng dir_rng(seed ^ 0xd1f);
  for (int d = 0; d < directions; ++d) {
    e.max_rel_err = std::max(e.max_rel_err, fd_check_direction(loss, pairs, dir_rng));
  }
  return e;
}

}  // namespace fgseg
