#include <doctest.h>

#include <cmath>
#include <set>

#include "fgseg/gradcheck.hpp"
#include "fgseg/training.hpp"

using namespace fgseg;

namespace {

std::vector<int> iota_ids(int n) {
  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = i + 1;
  return ids;
}

}  // namespace

TEST_CASE("split_train_val: 10 frames at 0.2 gives disjoint 8/2") {
  Rng rng(1);
  auto split = split_train_val(iota_ids(10), 0.2, rng);
  CHECK(split.train_ids.size() == 8);
  CHECK(split.val_ids.size() == 2);
  std::set<int> all(split.train_ids.begin(), split.train_ids.end());
  all.insert(split.val_ids.begin(), split.val_ids.end());
  CHECK(all.size() == 10);
}

TEST_CASE("split_train_val: 25 frames at 0.2 gives 20/5") {
  Rng rng(2);
  auto split = split_train_val(iota_ids(25), 0.2, rng);
  CHECK(split.train_ids.size() == 20);
  CHECK(split.val_ids.size() == 5);
}

TEST_CASE("split_train_val is deterministic and rejects tiny sets") {
  Rng a(3), b(3);
  auto sa = split_train_val(iota_ids(9), 0.25, a);
  auto sb = split_train_val(iota_ids(9), 0.25, b);
  CHECK(sa.train_ids == sb.train_ids);
  CHECK(sa.val_ids == sb.val_ids);
  Rng c(4);
  CHECK_THROWS_AS(split_train_val({7}, 0.2, c), DataError);
}

TEST_CASE("class_weights: 10 fg / 90 bg") {
  std::vector<std::uint8_t> gt(100, kGtBackground);
  for (int i = 0; i < 10; ++i) gt[static_cast<std::size_t>(i)] = kGtForeground;
  auto w = class_weights(gt);
  CHECK(w.w_fg == doctest::Approx(5.0));
  CHECK(w.w_bg == doctest::Approx(0.5556).epsilon(1e-3));
}

TEST_CASE("class_weights: balanced frame gives (1,1), shadow counts as bg") {
  std::vector<std::uint8_t> gt(100, kGtForeground);
  for (int i = 0; i < 25; ++i) gt[static_cast<std::size_t>(i)] = kGtBackground;
  for (int i = 25; i < 50; ++i) gt[static_cast<std::size_t>(i)] = kGtShadow;
  auto w = class_weights(gt);
  CHECK(w.w_fg == doctest::Approx(1.0));
  CHECK(w.w_bg == doctest::Approx(1.0));
}

TEST_CASE("class_weights: degenerate frames and ignore handling") {
  std::vector<std::uint8_t> all_bg(50, kGtBackground);
  auto w = class_weights(all_bg);
  CHECK(w.w_fg == 0.0);
  CHECK(w.w_bg == 1.0);

  std::vector<std::uint8_t> all_fg(50, kGtForeground);
  w = class_weights(all_fg);
  CHECK(w.w_fg == 1.0);
  CHECK(w.w_bg == 0.0);

  std::vector<std::uint8_t> all_ignored(50, kGtIgnoreLow);
  CHECK_THROWS_AS(class_weights(all_ignored), DataError);

  // roi can exclude everything too
  std::vector<std::uint8_t> gt(50, kGtForeground);
  std::vector<std::uint8_t> roi(50, 0);
  CHECK_THROWS_AS(class_weights(gt, &roi), DataError);
}

TEST_CASE("weighted_bce: perfect prediction loses almost nothing") {
  Tensor<double> P({1, 1, 2, 2});
  Tensor<double> y({1, 1, 2, 2});
  for (int i = 0; i < 4; ++i) {
    y[i] = i % 2;
    P[i] = i % 2;  // exact labels, clamped internally
  }
  auto mask = Tensor<double>::ones({1, 1, 2, 2});
  auto r = weighted_bce(P, y, 3.0, 1.0, mask);
  CHECK(r.loss <= 1e-6 * 3.0);
}

TEST_CASE("weighted_bce: single pixel at p=0.5 gives ln 2") {
  auto P = Tensor<double>::constant({1, 1, 1, 1}, 0.5);
  auto y = Tensor<double>::ones({1, 1, 1, 1});
  auto mask = Tensor<double>::ones({1, 1, 1, 1});
  auto r = weighted_bce(P, y, 1.0, 1.0, mask);
  CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("weighted_bce gradient matches finite differences to 1e-6") {
  Rng rng(5);
  Tensor<double> P = Tensor<double>::uniform({1, 1, 5, 5}, rng, 0.05, 0.95);
  Tensor<double> y({1, 1, 5, 5});
  Tensor<double> mask({1, 1, 5, 5});
  for (std::int64_t i = 0; i < y.size(); ++i) {
    y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    mask[i] = rng.uniform() < 0.25 ? 0.0 : 1.0;
  }
  mask[3] = 1.0;
  auto loss = [&] { return weighted_bce(P, y, 2.5, 0.75, mask).loss; };
  auto analytic = weighted_bce(P, y, 2.5, 0.75, mask).dP;
  CHECK(fd_check_coords(loss, P, analytic) < 1e-6);
}

TEST_CASE("weighted_bce with unit weights equals plain bce") {
  Rng rng(6);
  Tensor<double> P = Tensor<double>::uniform({1, 1, 4, 4}, rng, 0.1, 0.9);
  Tensor<double> y({1, 1, 4, 4});
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
  auto mask = Tensor<double>::ones({1, 1, 4, 4});
  auto r = weighted_bce(P, y, 1.0, 1.0, mask);
  double plain = 0.0;
  for (std::int64_t i = 0; i < P.size(); ++i) {
    plain -= (y[i] * std::log(P[i]) + (1.0 - y[i]) * std::log(1.0 - P[i])) / 16.0;
  }
  CHECK(r.loss == doctest::Approx(plain).epsilon(1e-12));
}

TEST_CASE("weighted_bce: ignored pixels contribute nothing") {
  Rng rng(7);
  Tensor<double> P = Tensor<double>::uniform({1, 1, 4, 4}, rng, 0.1, 0.9);
  Tensor<double> y({1, 1, 4, 4});
  Tensor<double> mask = Tensor<double>::ones({1, 1, 4, 4});
  mask[5] = 0.0;
  mask[9] = 0.0;
  auto base = weighted_bce(P, y, 1.5, 0.5, mask);
  Tensor<double> poked = P;
  poked[5] = 0.999;
  poked[9] = 0.001;
  auto moved = weighted_bce(poked, y, 1.5, 0.5, mask);
  CHECK(base.loss == moved.loss);
  CHECK(base.dP[5] == 0.0);
  CHECK(base.dP[9] == 0.0);

  auto none = Tensor<double>::zeros({1, 1, 4, 4});
  CHECK_THROWS_AS(weighted_bce(P, y, 1.0, 1.0, none), DataError);
}

TEST_CASE("rmsprop single step closed form") {
  ModelWeights<double> weights;
  auto& p = weights.add("w", Tensor<double>::zeros({1, 1, 1, 1}));
  p.grad[0] = 1.0;
  rmsprop_step(weights, 1e-4, 0.9, 1e-8);
  CHECK(std::abs(p.value[0] - (-3.1623e-4)) < 1e-8);
  CHECK(p.grad[0] == 0.0);  // grads cleared by the step
  CHECK(p.rms_acc[0] == doctest::Approx(0.1));
}

TEST_CASE("rmsprop: zero grad leaves weights unchanged") {
  ModelWeights<double> weights;
  auto& p = weights.add("w", Tensor<double>::constant({1, 2, 1, 1}, 0.75));
  rmsprop_step(weights, 1e-2, 0.9, 1e-8);
  CHECK(p.value[0] == 0.75);
  CHECK(p.value[1] == 0.75);
}

TEST_CASE("rmsprop: identical grad histories give identical updates") {
  ModelWeights<double> weights;
  auto& a = weights.add("a", Tensor<double>::constant({1, 1, 1, 1}, 0.5));
  auto& b = weights.add("b", Tensor<double>::constant({1, 1, 1, 1}, 0.5));
  for (int step = 0; step < 5; ++step) {
    a.grad[0] = 0.1 * (step + 1);
    b.grad[0] = 0.1 * (step + 1);
    rmsprop_step(weights, 1e-3, 0.9, 1e-8);
    CHECK(a.value[0] == b.value[0]);
    CHECK(a.rms_acc[0] == b.rms_acc[0]);
  }
}

TEST_CASE("rmsprop skips frozen params but clears their grads") {
  ModelWeights<double> weights;
  auto& p = weights.add("frozen", Tensor<double>::constant({1, 1, 1, 1}, 1.0));
  p.trainable = false;
  p.grad[0] = 5.0;
  rmsprop_step(weights, 1e-2, 0.9, 1e-8);
  CHECK(p.value[0] == 1.0);
  CHECK(p.grad[0] == 0.0);
}

TEST_CASE("schedule: strictly improving losses never fire") {
  TrainConfig cfg;
  TrainState st;
  st.current_lr = cfg.lr0;
  for (int e = 1; e <= 20; ++e) {
    st.epoch = e;
    auto d = schedule_and_stop(st, 1.0 / e, cfg);
    CHECK(d.action == ScheduleAction::Continue);
    CHECK(d.improved);
  }
  CHECK(st.current_lr == cfg.lr0);
}

TEST_CASE("schedule: 5 stagnant epochs reduce lr by 10x, 10 stop") {
  TrainConfig cfg;
  TrainState st;
  st.current_lr = cfg.lr0;
  st.epoch = 1;
  CHECK(schedule_and_stop(st, 1.0, cfg).improved);  // establishes the best
  int reduce_at = 0, stop_at = 0;
  for (int flat = 1; flat <= 12; ++flat) {
    st.epoch = 1 + flat;
    auto d = schedule_and_stop(st, 1.0, cfg);
    if (d.action == ScheduleAction::ReduceLR && reduce_at == 0) reduce_at = flat;
    if (d.action == ScheduleAction::Stop) {
      stop_at = flat;
      break;
    }
  }
  CHECK(reduce_at == 5);
  CHECK(stop_at == 10);
  CHECK(st.current_lr == doctest::Approx(1e-5));  // one reduction happened
}

TEST_CASE("schedule: lr after two plateau reductions is 1e-6") {
  // two reductions need an improvement in between, before the stop
  // counter reaches 10
  TrainConfig cfg;
  TrainState st;
  st.current_lr = cfg.lr0;
  st.epoch = 1;
  schedule_and_stop(st, 1.0, cfg);
  for (int i = 0; i < 5; ++i) {
    st.epoch++;
    schedule_and_stop(st, 1.0, cfg);
  }
  CHECK(st.current_lr == doctest::Approx(1e-5));
  st.epoch++;
  schedule_and_stop(st, 0.5, cfg);  // improvement resets the counters
  for (int i = 0; i < 5; ++i) {
    st.epoch++;
    schedule_and_stop(st, 0.5, cfg);
  }
  CHECK(st.current_lr == doctest::Approx(1e-6));
}

TEST_CASE("schedule: tiny changes below the tolerance do not count as improvement") {
  TrainConfig cfg;
  TrainState st;
  st.current_lr = cfg.lr0;
  st.epoch = 1;
  schedule_and_stop(st, 1.0, cfg);
  st.epoch = 2;
  auto d = schedule_and_stop(st, 1.0 - 1e-12, cfg);
  CHECK_FALSE(d.improved);
}

namespace {

std::vector<TrainExample<float>> tiny_examples(int count, int dim, std::uint64_t seed) {
  SynthSceneConfig cfg;
  cfg.height = dim;
  cfg.width = dim;
  cfg.frames = count;
  cfg.square_size = dim / 4;
  cfg.noise = 0.01;
  cfg.seed = seed;
  std::vector<TrainExample<float>> out;
  for (const auto& rec : synth_scene(cfg)) out.push_back(make_example<float>(rec));
  return out;
}

}  // namespace

TEST_CASE("train_loop: same seed twice gives a bit-identical loss history") {
  auto run = [] {
    ModelConfig mcfg;
    mcfg.width_mult = 1.0 / 16;
    TrainConfig tcfg;
    tcfg.max_epochs = 3;
    Rng rng(99);
    Model<float> model(mcfg, rng);
    auto frames = tiny_examples(6, 16, 7);
    std::vector<int> ids;
    for (const auto& f : frames) ids.push_back(f.id);
    auto split = split_train_val(ids, 0.2, rng);
    return train_loop(model, frames, split, tcfg, rng);
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_loss == b.history[i].val_loss);
    CHECK(a.history[i].lr == b.history[i].lr);
  }
}

TEST_CASE("train_loop: perturbing ignored gt pixels changes nothing") {
  auto run = [](bool poke) {
    ModelConfig mcfg;
    mcfg.width_mult = 1.0 / 16;
    TrainConfig tcfg;
    tcfg.max_epochs = 2;
    Rng rng(55);
    Model<float> model(mcfg, rng);
    auto frames = tiny_examples(6, 16, 11);
    // mark a block of pixels ignored; when poking, also flip their labels
    for (auto& f : frames) {
      for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
          f.mask(0, 0, y, x) = 0.0f;
          if (poke) f.target(0, 0, y, x) = 1.0f - f.target(0, 0, y, x);
        }
      }
    }
    std::vector<int> ids;
    for (const auto& f : frames) ids.push_back(f.id);
    auto split = split_train_val(ids, 0.2, rng);
    train_loop(model, frames, split, tcfg, rng);
    return model.weights().snapshot_values();
  };
  auto base = run(false);
  auto poked = run(true);
  REQUIRE(base.size() == poked.size());
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(bit_equal(base[i], poked[i]));
}

TEST_CASE("train_loop: best_val_loss is non-increasing and lr stays lr0*0.1^k") {
  ModelConfig mcfg;
  mcfg.width_mult = 1.0 / 16;
  TrainConfig tcfg;
  tcfg.max_epochs = 8;
  Rng rng(77);
  Model<float> model(mcfg, rng);
  auto frames = tiny_examples(6, 16, 13);
  std::vector<int> ids;
  for (const auto& f : frames) ids.push_back(f.id);
  auto split = split_train_val(ids, 0.2, rng);
  auto state = train_loop(model, frames, split, tcfg, rng);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& rec : state.history) {
    best = std::min(best, rec.val_loss);
    const double k = std::log10(tcfg.lr0 / rec.lr);
    CHECK(std::abs(k - std::round(k)) < 1e-9);
  }
  CHECK(state.best_val_loss == doctest::Approx(best));
}
