#pragma once

#include <cstdint>
#include <memory>

#include <json.hpp>

#include "textcsp/cascade/cascade.hpp"
#include "textcsp/textenc/textenc.hpp"
#include "textcsp/visionnet/visionnet.hpp"

namespace textcsp::train {

struct ModelConfig {
  textenc::TextEncoderConfig text;
  visionnet::VisionConfig vision;
  cascade::CascadeConfig cascade;

  // Copies the shared dimensions (C, d) into the cascade block and validates.
  void finalize();
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

template <typename T>
struct ModelOutput {
  cascade::CascadeOutput<T> cascade;
  textenc::TextRepresentation<T> text;
  nn::Var<T> features;  // F_dec
};

template <typename T>
class TextCSPModel {
 public:
  TextCSPModel(const ModelConfig& cfg, std::uint64_t seed);
  TextCSPModel(const TextCSPModel&) = delete;
  TextCSPModel& operator=(const TextCSPModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterStore<T>& store() { return store_; }
  const nn::ParameterStore<T>& store() const { return store_; }
  const textenc::TextEncoder<T>& text() const { return *text_; }
  const visionnet::VisionNet<T>& vision() const { return *vision_; }
  const cascade::CascadeHead<T>& head() const { return *head_; }

  // volume [B, 4, D, H, W]; tokens with batch B.
  ModelOutput<T> forward(const nn::Var<T>& volume, const textenc::TokenBatch& tokens) const;

 private:
  ModelConfig cfg_;
  nn::ParameterStore<T> store_;
  std::unique_ptr<textenc::TextEncoder<T>> text_;
  std::unique_ptr<visionnet::VisionNet<T>> vision_;
  std::unique_ptr<cascade::CascadeHead<T>> head_;
};

}  // namespace textcsp::train
