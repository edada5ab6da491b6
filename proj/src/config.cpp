#include "fgseg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "fgseg/errors.hpp"

namespace fgseg {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("unknown config key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read_into(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

void parse_model(const json& j, ModelConfig& m) {
  check_keys(j,
             {"input_channels", "width_mult", "encoder_dropout_rate", "spatial_dropout_rate",
              "instance_norm_eps", "use_gap", "freeze_blocks"},
             "model");
  read_into(j, "input_channels", m.input_channels);
  read_into(j, "width_mult", m.width_mult);
  read_into(j, "encoder_dropout_rate", m.encoder_dropout_rate);
  read_into(j, "spatial_dropout_rate", m.spatial_dropout_rate);
  read_into(j, "instance_norm_eps", m.instance_norm_eps);
  read_into(j, "use_gap", m.use_gap);
  read_into(j, "freeze_blocks", m.freeze_blocks);
}

void parse_train(const json& j, TrainConfig& t) {
  check_keys(j,
             {"lr0", "rho", "eps", "batch_size", "max_epochs", "lr_patience", "lr_factor",
              "stop_patience", "val_fraction", "threshold"},
             "train");
  read_into(j, "lr0", t.lr0);
  read_into(j, "rho", t.rho);
  read_into(j, "eps", t.eps);
  read_into(j, "batch_size", t.batch_size);
  read_into(j, "max_epochs", t.max_epochs);
  read_into(j, "lr_patience", t.lr_patience);
  read_into(j, "lr_factor", t.lr_factor);
  read_into(j, "stop_patience", t.stop_patience);
  read_into(j, "val_fraction", t.val_fraction);
  read_into(j, "threshold", t.threshold);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, {"seed", "model", "train"}, "config");
  RunConfig cfg;
  read_into(j, "seed", cfg.seed);
  if (j.contains("model")) parse_model(j.at("model"), cfg.model);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  cfg.model.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path.string());
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_run_config(buf.str());
}

std::string run_config_to_json(const RunConfig& cfg, int indent) {
  json j;
  j["seed"] = cfg.seed;
  j["model"] = {{"input_channels", cfg.model.input_channels},
                {"width_mult", cfg.model.width_mult},
                {"encoder_dropout_rate", cfg.model.encoder_dropout_rate},
                {"spatial_dropout_rate", cfg.model.spatial_dropout_rate},
                {"instance_norm_eps", cfg.model.instance_norm_eps},
                {"use_gap", cfg.model.use_gap},
                {"freeze_blocks", cfg.model.freeze_blocks}};
  j["train"] = {{"lr0", cfg.train.lr0},
                {"rho", cfg.train.rho},
                {"eps", cfg.train.eps},
                {"batch_size", cfg.train.batch_size},
                {"max_epochs", cfg.train.max_epochs},
                {"lr_patience", cfg.train.lr_patience},
                {"lr_factor", cfg.train.lr_factor},
                {"stop_patience", cfg.train.stop_patience},
                {"val_fraction", cfg.train.val_fraction},
                {"threshold", cfg.train.threshold}};
  return j.dump(indent);
}

}  // namespace fgseg
