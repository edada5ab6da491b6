#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "fgseg/dataset.hpp"
#include "fgseg/errors.hpp"
#include "fgseg/network.hpp"

namespace fgseg {

struct TrainConfig {
  double lr0 = 1e-4;
  double rho = 0.9;
  double eps = 1e-8;
  int batch_size = 1;
  int max_epochs = 100;
  int lr_patience = 5;
  double lr_factor = 0.1;
  int stop_patience = 10;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
  double threshold = 0.9;  // eval-time binarization

  void validate() const {
    if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
    if (rho < 0.0 || rho >= 1.0) throw ConfigError("rho must be in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
    if (batch_size != 1) throw ConfigError("batch_size must be 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (lr_patience < 1 || stop_patience < 1) throw ConfigError("patience values must be >= 1");
    if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("lr_factor must be in (0,1)");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
      throw ConfigError("val_fraction must be in (0,1)");
    }
    if (threshold < 0.0 || threshold > 1.0) throw ConfigError("threshold must be in [0,1]");
  }
};

enum class ScheduleAction { Continue, ReduceLR, Stop };

inline const char* schedule_action_name(ScheduleAction a) {
  switch (a) {
    case ScheduleAction::Continue: return "continue";
    case ScheduleAction::ReduceLR: return "reduce_lr";
    case ScheduleAction::Stop: return "stop";
  }
  return "?";
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;  // rate used during this epoch's updates
  ScheduleAction action = ScheduleAction::Continue;
};

struct TrainState {
  int epoch = 0;
  double current_lr = 0.0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int epochs_since_improve_lr = 0;
  int epochs_since_improve_stop = 0;
  std::vector<EpochRecord> history;
};

struct SplitSpec {
  std::vector<int> train_ids;
  std::vector<int> val_ids;
};

// Seeded shuffle, then the trailing round(val_fraction*N) ids become the
// validation set (at least one, never all).
inline SplitSpec split_train_val(std::vector<int> frame_ids, double val_fraction, Rng& rng) {
  const std::size_t n = frame_ids.size();
  if (n < 2) throw DataError("need at least 2 frames to split, got " + std::to_string(n));
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("val_fraction must be in (0,1)");
  }
  rng.shuffle(frame_ids);
  std::size_t n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(n)));
  n_val = std::min(std::max<std::size_t>(n_val, 1), n - 1);
  SplitSpec split;
  split.train_ids.assign(frame_ids.begin(), frame_ids.end() - static_cast<std::ptrdiff_t>(n_val));
  split.val_ids.assign(frame_ids.end() - static_cast<std::ptrdiff_t>(n_val), frame_ids.end());
  return split;
}

struct ClassWeights {
  double w_fg = 1.0;
  double w_bg = 1.0;
};

// Inverse-frequency weights over evaluable pixels, normalized so balanced
// frames give (1,1). A frame missing one class weights it 0 and the other 1.
inline ClassWeights class_weights(const std::vector<std::uint8_t>& gt,
                                  const std::vector<std::uint8_t>* roi = nullptr) {
  std::int64_t n_fg = 0, n_bg = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (roi && (*roi)[i] == 0) continue;
    if (gt[i] == kGtForeground) {
      ++n_fg;
    } else if (gt[i] == kGtBackground || gt[i] == kGtShadow) {
      ++n_bg;
    }
  }
  const std::int64_t n_eval = n_fg + n_bg;
  if (n_eval == 0) throw DataError("frame has no evaluable pixels");
  if (n_fg == 0) return {0.0, 1.0};
  if (n_bg == 0) return {1.0, 0.0};
  return {static_cast<double>(n_eval) / (2.0 * static_cast<double>(n_fg)),
          static_cast<double>(n_eval) / (2.0 * static_cast<double>(n_bg))};
}

template <typename S>
struct BceResult {
  S loss = S{0};
  Tensor<S> dP;
};

// Class-weighted binary cross entropy over evaluable pixels; probabilities
// are clamped to [1e-7, 1-1e-7] and clamped pixels get zero gradient.
// Ignored pixels (mask 0) contribute neither loss nor gradient.
template <typename S>
BceResult<S> weighted_bce(const Tensor<S>& P, const Tensor<S>& target, double w_fg, double w_bg,
                          const Tensor<S>& eval_mask) {
  if (!(P.shape() == target.shape()) || !(P.shape() == eval_mask.shape())) {
    throw std::invalid_argument("weighted_bce: shape mismatch " + P.shape().str() + " / " +
                                target.shape().str() + " / " + eval_mask.shape().str());
  }
  const S lo = static_cast<S>(1e-7);
  const S hi = S{1} - static_cast<S>(1e-7);
  std::int64_t n_eval = 0;
  for (std::int64_t i = 0; i < eval_mask.size(); ++i) {
    if (eval_mask[i] != S{0}) ++n_eval;
  }
  if (n_eval == 0) throw DataError("weighted_bce: no evaluable pixels");

  BceResult<S> out;
  out.dP = Tensor<S>(P.shape());
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n_eval);
  for (std::int64_t i = 0; i < P.size(); ++i) {
    if (eval_mask[i] == S{0}) continue;
    const S p_raw = P[i];
    const S p = std::min(std::max(p_raw, lo), hi);
    const double y = static_cast<double>(target[i]);
    const double pd = static_cast<double>(p);
    loss -= inv_n * (w_fg * y * std::log(pd) + w_bg * (1.0 - y) * std::log(1.0 - pd));
    if (p_raw >= lo && p_raw <= hi) {
      out.dP[i] = static_cast<S>(-inv_n * (w_fg * y / pd - w_bg * (1.0 - y) / (1.0 - pd)));
    }
  }
  out.loss = static_cast<S>(loss);
  return out;
}

// acc <- rho*acc + (1-rho)*g^2; w <- w - lr*g/(sqrt(acc)+eps); grads are
// zeroed afterwards. Frozen params only get their grads cleared.
template <typename S>
void rmsprop_step(ModelWeights<S>& weights, double lr, double rho, double eps) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    Param<S>& p = weights[i];
    if (p.trainable) {
      for (std::int64_t j = 0; j < p.value.size(); ++j) {
        const double g = static_cast<double>(p.grad[j]);
        const double acc = rho * static_cast<double>(p.rms_acc[j]) + (1.0 - rho) * g * g;
        p.rms_acc[j] = static_cast<S>(acc);
        p.value[j] -= static_cast<S>(lr * g / (std::sqrt(acc) + eps));
      }
    }
    p.zero_grad();
  }
}

struct ScheduleDecision {
  ScheduleAction action = ScheduleAction::Continue;
  bool improved = false;
};

// Improvement means val_loss < best - 1e-9. Both patience counters run
// from the same signal; hitting stop_patience wins over a pending
// reduction.
inline ScheduleDecision schedule_and_stop(TrainState& state, double val_loss,
                                          const TrainConfig& cfg) {
  ScheduleDecision d;
  if (val_loss < state.best_val_loss - 1e-9) {
    state.best_val_loss = val_loss;
    state.best_epoch = state.epoch;
    state.epochs_since_improve_lr = 0;
    state.epochs_since_improve_stop = 0;
    d.improved = true;
    d.action = ScheduleAction::Continue;
    return d;
  }
  ++state.epochs_since_improve_lr;
  ++state.epochs_since_improve_stop;
  if (state.epochs_since_improve_stop >= cfg.stop_patience) {
    d.action = ScheduleAction::Stop;
  } else if (state.epochs_since_improve_lr >= cfg.lr_patience) {
    state.current_lr *= cfg.lr_factor;
    state.epochs_since_improve_lr = 0;
    d.action = ScheduleAction::ReduceLR;
  }
  return d;
}

template <typename S>
struct TrainExample {
  int id = 0;
  Tensor<S> image;   // padded to a multiple of 4
  Tensor<S> target;  // (1,1,h,w) in {0,1}, zero in the padded region
  Tensor<S> mask;    // (1,1,h,w) in {0,1}, zero where ignored or padded
  double w_fg = 1.0;
  double w_bg = 1.0;
  int orig_h = 0;
  int orig_w = 0;
};

template <typename S>
TrainExample<S> make_example(const FrameRecord& rec) {
  TrainExample<S> ex;
  ex.id = rec.id;
  ex.orig_h = rec.height;
  ex.orig_w = rec.width;
  const PaddedImage padded = pad_to_multiple(rec.image);
  ex.image = padded.tensor.template cast<S>();
  const Shape ps = padded.tensor.shape();
  ex.target = Tensor<S>({1, 1, ps.h, ps.w});
  ex.mask = Tensor<S>({1, 1, ps.h, ps.w});
  for (int y = 0; y < rec.height; ++y) {
    for (int x = 0; x < rec.width; ++x) {
      const std::uint8_t g = rec.gt[static_cast<std::size_t>(y) * rec.width + x];
      const bool in_roi = rec.roi[static_cast<std::size_t>(y) * rec.width + x] != 0;
      if (!in_roi || gt_is_ignored(g)) continue;
      ex.mask(0, 0, y, x) = S{1};
      if (g == kGtForeground) ex.target(0, 0, y, x) = S{1};
    }
  }
  const ClassWeights cw = class_weights(rec.gt, &rec.roi);
  ex.w_fg = cw.w_fg;
  ex.w_bg = cw.w_bg;
  return ex;
}

using EpochLogFn = std::function<void(const EpochRecord&)>;

// One pass of the full protocol: per-frame updates at batch size 1,
// class-weighted BCE, RMSProp, plateau schedule with early stopping, and
// a best-validation checkpoint restored at the end.
template <typename S>
TrainState train_loop(Model<S>& model, const std::vector<TrainExample<S>>& frames,
                      const SplitSpec& split, const TrainConfig& cfg, Rng& rng,
                      const EpochLogFn& log = {}) {
  cfg.validate();
  if (frames.empty()) throw DataError("train_loop: empty dataset");
  std::unordered_map<int, std::size_t> by_id;
  for (std::size_t i = 0; i < frames.size(); ++i) by_id[frames[i].id] = i;
  auto frame_at = [&](int id) -> const TrainExample<S>& {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("split references unknown frame " + std::to_string(id));
    return frames[it->second];
  };
  for (int id : split.train_ids) frame_at(id);
  for (int id : split.val_ids) frame_at(id);
  if (split.train_ids.empty() || split.val_ids.empty()) {
    throw DataError("train_loop: split must contain both train and validation frames");
  }

  TrainState state;
  state.current_lr = cfg.lr0;
  std::vector<Tensor<S>> best_values;
  std::vector<int> order = split.train_ids;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    state.epoch = epoch;
    const double lr_used = state.current_lr;
    rng.shuffle(order);
    double train_sum = 0.0;
    for (int id : order) {
      const TrainExample<S>& ex = frame_at(id);
      ForwardTrace<S> trace = model.forward(ex.image, Mode::Train, &rng);
      BceResult<S> bce = weighted_bce(trace.P, ex.target, ex.w_fg, ex.w_bg, ex.mask);
      if (!std::isfinite(static_cast<double>(bce.loss))) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           ", frame " + std::to_string(id));
      }
      model.backward(trace, bce.dP);
      rmsprop_step(model.weights(), state.current_lr, cfg.rho, cfg.eps);
      train_sum += static_cast<double>(bce.loss);
    }
    const double train_loss = train_sum / static_cast<double>(order.size());

    double val_sum = 0.0;
    for (int id : split.val_ids) {
      const TrainExample<S>& ex = frame_at(id);
      ForwardTrace<S> trace = model.forward(ex.image, Mode::Eval, nullptr);
      BceResult<S> bce = weighted_bce(trace.P, ex.target, ex.w_fg, ex.w_bg, ex.mask);
      val_sum += static_cast<double>(bce.loss);
    }
    const double val_loss = val_sum / static_cast<double>(split.val_ids.size());
    if (!std::isfinite(val_loss)) {
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    }

    const ScheduleDecision decision = schedule_and_stop(state, val_loss, cfg);
    if (decision.improved) best_values = model.weights().snapshot_values();
    state.history.push_back({epoch, train_loss, val_loss, lr_used, decision.action});
    if (log) log(state.history.back());
    if (decision.action == ScheduleAction::Stop) break;
  }

  if (!best_values.empty()) model.weights().restore_values(best_values);
  return state;
}

}  // namespace fgseg
