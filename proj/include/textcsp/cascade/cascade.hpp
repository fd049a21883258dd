#pragma once

#include <array>
#include <string>

#include <json.hpp>

#include "textcsp/nn/layers.hpp"

namespace textcsp::cascade {

enum class Topology { kParallel, kPartial, kFull };
Topology parse_topology(const std::string& name);
const char* topology_name(Topology t);

struct CascadeConfig {
  Topology topology = Topology::kFull;
  Index channels = 48;   // C, must equal the decoder output channels
  Index text_dim = 64;   // d of the pooled sentence embedding
  Index reduction = 4;   // bottleneck C / reduction
  bool modulators_on = true;

  void validate() const;
  nlohmann::json to_json() const;
  static CascadeConfig from_json(const nlohmann::json& j);
};

// G = sigmoid(W2 relu(W1 t + b1) + b2), biases zero-initialised.
template <typename T>
class ChannelModulator {
 public:
  ChannelModulator() = default;
  ChannelModulator(nn::ParameterStore<T>& store, const std::string& prefix, Index channels, Index text_dim,
                   Index reduction);
  // t: [B, d] -> G: [B, C]
  nn::Var<T> operator()(const nn::Var<T>& t) const;
  const nn::Linear<T>& fc1() const { return fc1_; }
  const nn::Linear<T>& fc2() const { return fc2_; }

 private:
  nn::Linear<T> fc1_;
  nn::Linear<T> fc2_;
};

template <typename T>
struct CascadeOutput {
  std::array<nn::Var<T>, 3> logits;  // y_WT, y_TC, y_ET, each [B, 1, D, H, W]
  nn::Var<T> a_wt;                   // sigmoid(y_WT)
  nn::Var<T> a_tc;                   // sigmoid(y_TC)
  nn::Var<T> g_tc;                   // [B, C]; undefined when modulators are off
  nn::Var<T> g_et;
};

template <typename T>
class CascadeHead {
 public:
  CascadeHead(nn::ParameterStore<T>& store, const CascadeConfig& cfg);
  const CascadeConfig& config() const { return cfg_; }

  // t_tc / t_et are the sub-region text representations [B, L, d] pooled
  // with `mask` [B, L]. Channel gates may be supplied directly instead
  // (g_override) to bypass the modulators.
  CascadeOutput<T> forward(const nn::Var<T>& f_dec, const nn::Var<T>& t_tc, const nn::Var<T>& t_et,
                           const Tensor<std::uint8_t>& mask) const;
  CascadeOutput<T> forward_with_gates(const nn::Var<T>& f_dec, const nn::Var<T>& g_tc, const nn::Var<T>& g_et) const;

  const ChannelModulator<T>& modulator_tc() const { return mod_tc_; }
  const ChannelModulator<T>& modulator_et() const { return mod_et_; }

 private:
  CascadeConfig cfg_;
  std::array<nn::Conv3d<T>, 3> heads_;
  ChannelModulator<T> mod_tc_;
  ChannelModulator<T> mod_et_;
};

}  // namespace textcsp::cascade
