#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fgseg/network.hpp"
#include "fgseg/training.hpp"

namespace fgseg {

// Effective run configuration: model + training hyperparameters and one
// seed that drives initialization, splitting, shuffling and dropout.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    train.validate();
  }
};

// JSON with exactly the documented keys; unknown keys are errors. A
// missing file section keeps the defaults.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const std::string& json_text);
std::string run_config_to_json(const RunConfig& cfg, int indent = 2);

}  // namespace fgseg
