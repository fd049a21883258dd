#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "textcsp/nn/layers.hpp"

namespace textcsp::visionnet {

struct VisionConfig {
  Index in_channels = 4;
  Index base_channels = 8;
  Index depth = 3;
  Index out_channels = 48;  // C
  Index fusion_heads = 4;
  Index groups = 4;  // GroupNorm groups (capped at the channel count)
  // Order inside the bottleneck fusion. false: text attends to vision, then
  // vision attends to the updated text. true: vision attends to the text first.
  bool vision_first = false;

  void validate() const;
  Index stage_channels(Index stage) const { return base_channels << stage; }
  nlohmann::json to_json() const;
  static VisionConfig from_json(const nlohmann::json& j);
};

template <typename T>
struct FusionResult {
  nn::Var<T> vision;  // bottleneck grid, same shape as the input
  nn::Var<T> text;    // text sequence after its cross-attention update
};

template <typename T>
class VisionNet {
 public:
  // text_dim is the width of T_shared.
  VisionNet(nn::ParameterStore<T>& store, const VisionConfig& cfg, Index text_dim);

  const VisionConfig& config() const { return cfg_; }
  // Feature grids at depth + 1 resolutions, finest first; the last one is the bottleneck.
  std::vector<nn::Var<T>> encode(const nn::Var<T>& volume) const;
  FusionResult<T> fuse_bottleneck(const nn::Var<T>& bottleneck, const nn::Var<T>& text,
                                  const Tensor<T>& text_mask) const;
  // F_dec [B, C, D, H, W].
  nn::Var<T> decode(const std::vector<nn::Var<T>>& pyramid, const nn::Var<T>& fused) const;

  // Checks the grid against the configured depth (ConfigError otherwise).
  void check_grid(const Shape& volume_shape) const;

 private:
  struct ConvBlock {
    nn::Conv3d<T> conv;
    nn::GroupNorm<T> norm;
  };
  struct CrossAttention {
    nn::LayerNorm<T> q_norm, kv_norm;
    nn::Linear<T> q, k, v, out;
  };
  nn::Var<T> block(const ConvBlock& b, const nn::Var<T>& x) const;
  nn::Var<T> cross(const CrossAttention& a, const nn::Var<T>& queries, const nn::Var<T>& keys,
                   const Tensor<T>* key_mask) const;
  ConvBlock make_block(nn::ParameterStore<T>& store, const std::string& name, Index in, Index out, int k, int stride,
                       int pad) const;
  CrossAttention make_cross(nn::ParameterStore<T>& store, const std::string& name, Index q_dim, Index kv_dim,
                            Index inner) const;

  VisionConfig cfg_;
  std::vector<std::array<ConvBlock, 2>> enc_;
  std::vector<nn::ConvTranspose3d2x<T>> up_;
  std::vector<ConvBlock> dec_;
  ConvBlock head_;
  CrossAttention text_from_vision_;
  CrossAttention vision_from_text_;
};

}  // namespace textcsp::visionnet
