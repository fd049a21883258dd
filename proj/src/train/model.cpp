#include "textcsp/train/model.hpp"

namespace textcsp::train {

using nlohmann::json;

void ModelConfig::finalize() {
  cascade.channels = vision.out_channels;
  cascade.text_dim = text.d;
  text.validate();
  vision.validate();
  cascade.validate();
}

json ModelConfig::to_json() const {
  return json{{"text", text.to_json()}, {"vision", vision.to_json()}, {"cascade", cascade.to_json()}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  if (!j.is_object()) throw ConfigError("model config: expected an object");
  for (const auto& [k, v] : j.items()) {
    if (k == "text") c.text = textenc::TextEncoderConfig::from_json(v);
    else if (k == "vision") c.vision = visionnet::VisionConfig::from_json(v);
    else if (k == "cascade") c.cascade = cascade::CascadeConfig::from_json(v);
    else throw ConfigError("model config: unknown field " + k);
  }
  return c;
}

template <typename T>
TextCSPModel<T>::TextCSPModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
  cfg_.finalize();
  text_ = std::make_unique<textenc::TextEncoder<T>>(store_, cfg_.text);
  vision_ = std::make_unique<visionnet::VisionNet<T>>(store_, cfg_.vision, cfg_.text.d);
  head_ = std::make_unique<cascade::CascadeHead<T>>(store_, cfg_.cascade);
}

template <typename T>
ModelOutput<T> TextCSPModel<T>::forward(const nn::Var<T>& volume, const textenc::TokenBatch& tokens) const {
  if (volume.value().rank() != 5 || volume.dim(0) != tokens.batch)
    throw ShapeError("model: volume batch " + shape_str(volume.shape()) + " does not match token batch " +
                     std::to_string(tokens.batch));
  ModelOutput<T> out;
  out.text = text_->encode_all(tokens);
  const auto pyramid = vision_->encode(volume);
  const auto fused = vision_->fuse_bottleneck(pyramid.back(), out.text.shared, tokens.mask.template cast<T>());
  out.features = vision_->decode(pyramid, fused.vision);
  out.cascade = head_->forward(out.features, out.text.sub[1], out.text.sub[2], tokens.mask);
  return out;
}

template class TextCSPModel<float>;
template class TextCSPModel<double>;

}  // namespace textcsp::train
