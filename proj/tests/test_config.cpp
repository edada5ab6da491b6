#include <doctest.h>

#include "fgseg/config.hpp"
#include "fgseg/errors.hpp"

using namespace fgseg;

TEST_CASE("defaults carry the documented hyperparameters") {
  RunConfig cfg = parse_run_config("{}");
  CHECK(cfg.train.lr0 == 1e-4);
  CHECK(cfg.train.rho == 0.9);
  CHECK(cfg.train.eps == 1e-8);
  CHECK(cfg.train.batch_size == 1);
  CHECK(cfg.train.max_epochs == 100);
  CHECK(cfg.train.lr_patience == 5);
  CHECK(cfg.train.lr_factor == 0.1);
  CHECK(cfg.train.stop_patience == 10);
  CHECK(cfg.train.val_fraction == 0.2);
  CHECK(cfg.train.threshold == 0.9);
  CHECK(cfg.model.width_mult == 1.0);
  CHECK(cfg.model.encoder_dropout_rate == 0.5);
  CHECK(cfg.model.spatial_dropout_rate == 0.25);
  CHECK(cfg.model.instance_norm_eps == 1e-5);
  CHECK(cfg.model.use_gap);
}

TEST_CASE("values parse and the seed reaches both sections") {
  RunConfig cfg = parse_run_config(R"({
    "seed": 123,
    "model": {"width_mult": 0.125, "use_gap": false, "freeze_blocks": [1, 2]},
    "train": {"max_epochs": 7, "threshold": 0.5}
  })");
  CHECK(cfg.seed == 123);
  CHECK(cfg.model.seed == 123);
  CHECK(cfg.train.seed == 123);
  CHECK(cfg.model.width_mult == 0.125);
  CHECK_FALSE(cfg.model.use_gap);
  CHECK(cfg.model.freeze_blocks == std::vector<int>{1, 2});
  CHECK(cfg.train.max_epochs == 7);
  CHECK(cfg.train.threshold == 0.5);
}

TEST_CASE("unknown keys are errors") {
  CHECK_THROWS_AS(parse_run_config(R"({"sead": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"width": 1.0}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"lr": 1e-3}})"), ConfigError);
}

TEST_CASE("invalid JSON, wrong types and bad values are errors") {
  CHECK_THROWS_AS(parse_run_config("not json"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"max_epochs": "many"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"batch_size": 2}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"width_mult": 0.0}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"val_fraction": 1.5}})"), ConfigError);
}

TEST_CASE("config round-trips through its JSON dump") {
  RunConfig cfg = parse_run_config(R"({"seed": 9, "model": {"width_mult": 0.25}})");
  RunConfig back = parse_run_config(run_config_to_json(cfg));
  CHECK(back.seed == cfg.seed);
  CHECK(back.model.width_mult == cfg.model.width_mult);
  CHECK(back.train.lr0 == cfg.train.lr0);
}
