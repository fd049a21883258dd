#include "textcsp/core/io.hpp"
#include "textcsp/train/train.hpp"

namespace textcsp::train {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (warmup_epochs < 1 || warmup_epochs >= epochs) throw ConfigError("train.warmup_epochs must be in [1, epochs)");
  if (!(base_lr > 0.0)) throw ConfigError("train.base_lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
  if (!(sam_rho >= 0.0)) throw ConfigError("train.sam_rho must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (eval_interval < 1) throw ConfigError("train.eval_interval must be >= 1");
  if (holdout < 1) throw ConfigError("train.holdout must be >= 1");
  for (double w : loss_weights)
    if (!(w >= 0.0)) throw ConfigError("train.loss_weights must be >= 0");
}

json TrainConfig::to_json() const {
  return json{{"epochs", epochs},       {"warmup_epochs", warmup_epochs}, {"base_lr", base_lr},
              {"momentum", momentum},   {"sam_rho", sam_rho},             {"weight_decay", weight_decay},
              {"batch_size", batch_size}, {"seed", seed},                 {"eval_interval", eval_interval},
              {"holdout", holdout},     {"loss_weights", loss_weights}, {"batch_dice", batch_dice}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (!j.is_object()) throw ConfigError("train config: expected an object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "epochs") c.epochs = v.get<int>();
      else if (k == "warmup_epochs") c.warmup_epochs = v.get<int>();
      else if (k == "base_lr") c.base_lr = v.get<double>();
      else if (k == "momentum") c.momentum = v.get<double>();
      else if (k == "sam_rho") c.sam_rho = v.get<double>();
      else if (k == "weight_decay") c.weight_decay = v.get<double>();
      else if (k == "batch_size") c.batch_size = v.get<Index>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "eval_interval") c.eval_interval = v.get<int>();
      else if (k == "holdout") c.holdout = v.get<Index>();
      else if (k == "loss_weights") c.loss_weights = v.get<std::array<double, 3>>();
      else if (k == "batch_dice") c.batch_dice = v.get<bool>();
      else throw ConfigError("train config: unknown field " + k);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

void ExperimentConfig::validate() const {
  data.validate();
  ModelConfig m = model;
  m.finalize();
  train.validate();
  if (train.holdout >= data.num_cases)
    throw ConfigError("train.holdout must be smaller than data.num_cases");
}

json ExperimentConfig::to_json() const {
  return json{{"data", data.to_json()}, {"model", model.to_json()}, {"train", train.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  if (!j.is_object()) throw ConfigError("config: expected an object");
  for (const auto& [k, v] : j.items()) {
    if (k == "data") c.data = synth::GeneratorConfig::from_json(v);
    else if (k == "model") c.model = ModelConfig::from_json(v);
    else if (k == "train") c.train = TrainConfig::from_json(v);
    else throw ConfigError("config: unknown field " + k);
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  json j;
  try {
    j = io::read_json(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return from_json(j);
}

std::string config_hash(const json& j) { return io::fnv1a_hex(j.dump()); }

}  // namespace textcsp::train
