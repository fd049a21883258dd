#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "textcsp/core/tensor.hpp"
#include "textcsp/nn/autograd.hpp"

namespace textcsp::metrics {

using Mask = Tensor<std::uint8_t>;  // [D, H, W], values 0/1
using Spacing = std::array<double, 3>;

// 2|X n Y| / (|X| + |Y|); 1 when both are empty.
double dice(const Mask& pred, const Mask& gt);

// Foreground voxels with a 6-neighbour that is background or outside the grid.
std::vector<Index> surface_voxels(const Mask& mask);

// Exact squared Euclidean distance from every voxel to the nearest voxel of
// `targets` (flat indices), honouring anisotropic spacing. Voxels are
// unreachable (infinity) only when `targets` is empty.
std::vector<double> squared_distance_to(const std::vector<Index>& targets, const Shape& shape, const Spacing& spacing);

struct Hd95 {
  double value = 0.0;
  // Exactly one mask was empty; value holds the grid-diagonal sentinel.
  bool sentinel = false;
};
// Both directed nearest-surface distance sets are pooled and the 95th
// percentile is taken with linear interpolation between order statistics.
Hd95 hd95(const Mask& pred, const Mask& gt, const Spacing& spacing = {1.0, 1.0, 1.0});
double grid_diagonal(const Shape& shape, const Spacing& spacing);
// Linear-interpolated percentile, q in [0, 100]. The input is reordered.
double percentile(std::vector<double>& values, double q);

// (|ET \ TC| + |TC \ WT|) / (|ET| + |TC|), 0 when both are empty.
double containment_violation(const Mask& wt, const Mask& tc, const Mask& et);

// Channel r of a [3, D, H, W] (or [B, 3, D, H, W] with sample b) label grid.
Mask region(const Tensor<std::uint8_t>& labels, int r, Index sample = 0);

struct CaseMetrics {
  std::string case_id;
  std::array<double, 3> dice{};
  std::array<double, 3> hd95{};
  std::array<bool, 3> hd95_sentinel{};
  double violation = 0.0;
  double mean_dice() const { return (dice[0] + dice[1] + dice[2]) / 3.0; }
  double mean_hd95() const { return (hd95[0] + hd95[1] + hd95[2]) / 3.0; }
};

// pred and gt are [3, D, H, W] in WT, TC, ET order.
CaseMetrics evaluate_case(const std::string& case_id, const Tensor<std::uint8_t>& pred,
                          const Tensor<std::uint8_t>& gt, const Spacing& spacing = {1.0, 1.0, 1.0});

struct MetricReport {
  std::vector<CaseMetrics> cases;
  Spacing spacing{1.0, 1.0, 1.0};

  std::array<double, 3> mean_dice() const;
  std::array<double, 3> mean_hd95() const;
  double avg_dice() const;
  double avg_hd95() const;
  double mean_violation() const;
  int sentinel_count() const;

  nlohmann::json to_json() const;
  std::string to_csv() const;
  // Dice ET/WT/TC/Avg and HD95 ET/WT/TC/Avg, as percentages and distances.
  std::string summary_table() const;
  void write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const;
};

// Sum over the three branches of soft Dice (eps 1e-5) + BCE, each branch
// weighted by weights[s]. logits[s] are [B, 1, D, H, W]; labels [B, 3, D, H, W].
// With pool_batch the Dice ratio is taken over the whole batch instead of
// averaged per sample, so false positives on an empty region still cost.
template <typename T>
struct BranchLoss {
  nn::Var<T> total;
  std::array<double, 3> dice{};
  std::array<double, 3> bce{};
};
template <typename T>
BranchLoss<T> segmentation_loss(const std::array<nn::Var<T>, 3>& logits, const Tensor<T>& labels,
                                const std::array<double, 3>& weights = {1.0, 1.0, 1.0}, bool pool_batch = false);

}  // namespace textcsp::metrics
