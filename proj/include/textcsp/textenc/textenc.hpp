#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "textcsp/nn/layers.hpp"

namespace textcsp::textenc {

struct TextEncoderConfig {
  Index d = 64;
  Index layers = 2;
  Index heads = 4;
  Index max_tokens = 32;  // L
  Index vocab_size = 64;
  Index prompt_tokens = 4;  // K
  Index ffn_mult = 4;
  Index lora_rank = 8;
  double lora_alpha = 16.0;
  bool prompts_on = true;
  bool lora_on = true;

  void validate() const;
  nlohmann::json to_json() const;
  static TextEncoderConfig from_json(const nlohmann::json& j);
};

// y = W x + b + (alpha / r) * B (A x), where W, b are frozen and A [r, in],
// B [out, r] are trainable. B starts at zero so the adapter is an identity.
template <typename T>
class LoRALinear {
 public:
  LoRALinear() = default;
  // `lora_name` is the checkpoint prefix for A/B (e.g. "lora.0.q"); empty
  // disables the adapter entirely.
  LoRALinear(nn::ParameterStore<T>& store, const std::string& base_name, const std::string& lora_name, Index in,
             Index out, Index rank, double alpha);
  nn::Var<T> operator()(const nn::Var<T>& x) const;
  const nn::Linear<T>& base() const { return base_; }
  const nn::Var<T>& A() const { return a_; }
  const nn::Var<T>& B() const { return b_; }
  double scale() const { return scale_; }
  bool adapted() const { return a_.defined(); }

 private:
  nn::Linear<T> base_;
  nn::Var<T> a_;
  nn::Var<T> b_;
  double scale_ = 0.0;
};

// Functional form: W x + (alpha / r) B A x over the last axis. `r` is the
// nominal rank used for scaling; A must have at most min(in, out) rows.
template <typename T>
nn::Var<T> lora_forward(const nn::Var<T>& w, const nn::Var<T>& a, const nn::Var<T>& b, double alpha, Index r,
                        const nn::Var<T>& x);

struct TokenBatch {
  std::vector<Index> ids;  // [B, L] row-major
  Tensor<std::uint8_t> mask;  // [B, L] 0/1
  Index batch = 0;
  Index length = 0;
};
TokenBatch make_token_batch(const std::vector<std::vector<std::int32_t>>& ids,
                            const std::vector<std::vector<std::uint8_t>>& masks);

template <typename T>
struct TextRepresentation {
  std::array<nn::Var<T>, 3> sub;  // T_WT, T_TC, T_ET, each [B, L, d]
  nn::Var<T> shared;              // mean of the three
};

template <typename T>
class TextEncoder {
 public:
  TextEncoder(nn::ParameterStore<T>& store, const TextEncoderConfig& cfg);

  const TextEncoderConfig& config() const { return cfg_; }
  // Runs the shared encoder once on [P_s; E_word] and drops the first K
  // outputs. `region` is 0, 1, 2 for WT, TC, ET.
  nn::Var<T> encode_subregion(const TokenBatch& tokens, int region) const;
  // Without prompts the encoder runs once on the words alone.
  nn::Var<T> encode_plain(const TokenBatch& tokens) const;
  TextRepresentation<T> encode_all(const TokenBatch& tokens) const;

  const nn::Var<T>& prompt(int region) const { return prompts_[static_cast<std::size_t>(region)]; }
  // Sequence length seen by the transformer for the last call (K + L with prompts).
  Index last_internal_length() const { return last_internal_length_; }

 private:
  struct Layer {
    nn::LayerNorm<T> ln1, ln2;
    LoRALinear<T> q, v;
    nn::Linear<T> k, o, ff1, ff2;
  };
  nn::Var<T> run(const nn::Var<T>& x, const Tensor<T>& mask) const;
  nn::Var<T> embed_words(const TokenBatch& tokens) const;

  TextEncoderConfig cfg_;
  nn::Var<T> token_table_;
  nn::Var<T> positions_;
  nn::LayerNorm<T> embed_ln_;
  std::vector<Layer> layers_;
  nn::LayerNorm<T> final_ln_;
  std::array<nn::Var<T>, 3> prompts_;
  mutable Index last_internal_length_ = 0;
};

// Mask-aware mean over token positions; an all-zero mask row gives zeros.
template <typename T>
nn::Var<T> pool_sentence(const nn::Var<T>& t, const Tensor<std::uint8_t>& mask);

const char* prompt_key(int region);

}  // namespace textcsp::textenc
