#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "textcsp/train/train.hpp"

namespace textcsp::cli {

enum ExitCode { kOk = 0, kConfig = 2, kNumeric = 3, kIncompatible = 4 };

// Maps library exceptions to the documented exit codes.
int exit_code_for(const std::exception& e);

struct RunManifest {
  std::string command;
  std::string config_path;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string started;
  std::string finished;
  std::vector<std::string> artifacts;
  nlohmann::json to_json() const;
};
inline constexpr const char* kManifestName = "run_manifest.json";

// Refuses (ConfigError) to reuse a directory whose manifest has the same
// config hash unless force is set.
void guard_output_dir(const std::filesystem::path& out, const std::string& hash, bool force);
std::string utc_now();

// Sizes the text encoder to the dataset's vocabulary and token length and
// checks the grid against the vision config.
void bind_dataset(train::ExperimentConfig& cfg, const synth::Dataset& ds);
void check_compatible(const train::ExperimentConfig& cfg, const synth::Dataset& ds);

struct TrainRun {
  train::TrainResult result;
  train::FreezeReport audit;
  std::filesystem::path out_dir;
};
// Full training run with artifacts: resolved config, checkpoints, history,
// held-out report and freeze audit. The manifest is left to the caller.
TrainRun train_run(train::ExperimentConfig cfg, const synth::Dataset& ds, const std::filesystem::path& out,
                   bool resume = false, bool verbose = true);

struct LoadedModel {
  train::ExperimentConfig cfg;
  std::unique_ptr<train::TextCSPModel<float>> model;
};
LoadedModel load_model(const std::filesystem::path& checkpoint);

struct AttentionExport {
  Tensor<double> a_wt;  // [1, 1, D, H, W], sigmoid of the float logits taken in double
  Tensor<double> a_tc;
  double max_abs_logit = 0.0;
  Index saturated = 0;  // voxels whose stored value rounded to exactly 0 or 1
  std::vector<std::filesystem::path> files;
};
AttentionExport export_attention(const train::TextCSPModel<float>& model, const synth::Case& c,
                                 const std::filesystem::path& out);
// Binary greyscale image of the middle slice across `axis` (0 = D, 1 = H, 2 = W), values in [0, 1].
void write_pgm_mid_slice(const std::filesystem::path& path, const Tensor<double>& map, int axis);

struct AblationRow {
  std::string label;
  train::ExperimentConfig cfg;
};
std::vector<AblationRow> ablation_rows(const std::string& suite, const train::ExperimentConfig& base);

int run(int argc, char** argv);

}  // namespace textcsp::cli
