#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "textcsp/core/random.hpp"
#include "textcsp/metrics/metrics.hpp"
#include "textcsp/synthdata/synthdata.hpp"
#include "textcsp/train/model.hpp"

namespace textcsp::train {

struct TrainConfig {
  int epochs = 200;
  int warmup_epochs = 50;
  double base_lr = 0.1;
  double momentum = 0.9;
  double sam_rho = 0.05;
  double weight_decay = 0.0;
  Index batch_size = 2;
  std::uint64_t seed = 0;
  int eval_interval = 10;
  Index holdout = 16;  // the last `holdout` cases of the dataset
  std::array<double, 3> loss_weights{1.0, 1.0, 1.0};
  bool batch_dice = false;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Everything a run needs: data generator, model and optimisation settings.
struct ExperimentConfig {
  synth::GeneratorConfig data;
  ModelConfig model;
  TrainConfig train;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

// Canonical hash of a json document (object keys are sorted by the dump).
std::string config_hash(const nlohmann::json& j);

double lr_at(int epoch, const TrainConfig& cfg);

struct StepResult {
  double loss = 0.0;       // L(w) before the update
  double grad_norm = 0.0;  // ||g|| at w
  bool perturbed = false;
};

template <typename T>
using LossFn = std::function<nn::Var<T>()>;

// One SAM step around SGD with momentum. velocity is aligned with params and
// allocated on first use. rho = 0 reduces to sgd_step.
template <typename T>
StepResult sam_step(const std::vector<nn::Parameter<T>*>& params, const LossFn<T>& loss_fn, double lr, double rho,
                    double momentum, std::vector<Tensor<T>>& velocity, double weight_decay = 0.0);
template <typename T>
StepResult sgd_step(const std::vector<nn::Parameter<T>*>& params, const LossFn<T>& loss_fn, double lr,
                    double momentum, std::vector<Tensor<T>>& velocity, double weight_decay = 0.0);

// Single-file archive: magic, meta length, meta.json text, raw tensors.
// Meta carries the tensor index (name, shape, trainable, offsets).
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const nn::ParameterStore<T>& store,
                     const std::vector<Tensor<T>>& velocity, nlohmann::json meta);
// Restores values and velocity into a store built from the same config.
// Raises IncompatibleError on missing tensors or shape mismatches.
template <typename T>
nlohmann::json load_checkpoint(const std::filesystem::path& path, nn::ParameterStore<T>& store,
                               std::vector<Tensor<T>>* velocity = nullptr);
nlohmann::json read_checkpoint_meta(const std::filesystem::path& path);

struct Batch {
  Tensor<float> volume;  // [B, 4, D, H, W]
  Tensor<float> labels;  // [B, 3, D, H, W]
  textenc::TokenBatch tokens;
};
Batch make_batch(const std::vector<const synth::Case*>& cases);

// Thresholds each branch's logits at 0; [3, D, H, W] per case.
std::vector<Tensor<std::uint8_t>> predict(const TextCSPModel<float>& model, const std::vector<const synth::Case*>& cases,
                                          Index batch_size);
metrics::MetricReport evaluate(const TextCSPModel<float>& model, const std::vector<const synth::Case*>& cases,
                               Index batch_size);

struct HistoryRow {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  bool evaluated = false;
  std::array<double, 3> dice{};  // WT, TC, ET
  std::array<double, 3> hd95{};
  double violation = 0.0;
};
std::string history_csv(const std::vector<HistoryRow>& rows);

struct TrainOptions {
  std::filesystem::path out_dir;
  bool resume = false;                              // continue from out_dir/last.ckpt
  std::function<void(const HistoryRow&)> on_epoch;  // progress callback
};

struct TrainResult {
  std::vector<HistoryRow> history;
  double best_dice = -1.0;
  int best_epoch = -1;
  metrics::MetricReport final_report;  // held-out split with the last weights
};

struct Split {
  std::vector<const synth::Case*> train;
  std::vector<const synth::Case*> holdout;
};
Split split_dataset(const synth::Dataset& ds, Index holdout);

TrainResult train_loop(const synth::Dataset& ds, TextCSPModel<float>& model, const ExperimentConfig& cfg,
                       const TrainOptions& opts);

struct GroupCount {
  Index trainable = 0;
  Index frozen = 0;
};
struct FreezeReport {
  std::map<std::string, GroupCount> groups;  // keyed by the first name component
  Index lora_trainable = 0;
  Index prompt_trainable = 0;
  std::vector<std::string> violations;  // empty when the frozen set is as expected
  bool ok() const { return violations.empty(); }
  nlohmann::json to_json() const;
};
template <typename T>
FreezeReport freeze_audit(const nn::ParameterStore<T>& store);

}  // namespace textcsp::train
