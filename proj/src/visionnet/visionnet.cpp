#include "textcsp/visionnet/visionnet.hpp"

#include <cmath>

namespace textcsp::visionnet {

using nn::Var;
using nlohmann::json;

namespace {
constexpr double kSlope = 0.01;
}

void VisionConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("vision config: " + m); };
  if (in_channels < 1) fail("in_channels must be positive");
  if (base_channels < 1) fail("base_channels must be positive");
  if (depth < 1 || depth > 6) fail("depth must lie in [1, 6]");
  if (out_channels < 1) fail("out_channels must be positive");
  if (groups < 1) fail("groups must be positive");
  for (Index s = 0; s <= depth; ++s) {
    const Index c = stage_channels(s);
    if (c % std::min(groups, c) != 0) fail("stage channels " + std::to_string(c) + " not divisible by groups");
  }
  if (out_channels % std::min(groups, out_channels) != 0) fail("out_channels not divisible by groups");
  if (fusion_heads < 1 || stage_channels(depth) % fusion_heads != 0)
    fail("bottleneck channels " + std::to_string(stage_channels(depth)) + " not divisible by fusion_heads");
}

json VisionConfig::to_json() const {
  return json{{"in_channels", in_channels}, {"base_channels", base_channels}, {"depth", depth},
              {"out_channels", out_channels}, {"fusion_heads", fusion_heads}, {"groups", groups},
              {"vision_first", vision_first}};
}

VisionConfig VisionConfig::from_json(const json& j) {
  VisionConfig c;
  if (!j.is_object()) throw ConfigError("vision config: expected an object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "in_channels") c.in_channels = v.get<Index>();
      else if (k == "base_channels") c.base_channels = v.get<Index>();
      else if (k == "depth") c.depth = v.get<Index>();
      else if (k == "out_channels") c.out_channels = v.get<Index>();
      else if (k == "fusion_heads") c.fusion_heads = v.get<Index>();
      else if (k == "groups") c.groups = v.get<Index>();
      else if (k == "vision_first") c.vision_first = v.get<bool>();
      else throw ConfigError("vision config: unknown field " + k);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("vision config: ") + e.what());
  }
  return c;
}

template <typename T>
typename VisionNet<T>::ConvBlock VisionNet<T>::make_block(nn::ParameterStore<T>& store, const std::string& name,
                                                          Index in, Index out, int k, int stride, int pad) const {
  ConvBlock b;
  b.conv = nn::Conv3d<T>(store, name + ".conv", in, out, k, stride, pad);
  b.norm = nn::GroupNorm<T>(store, name + ".norm", out, static_cast<int>(std::min(cfg_.groups, out)));
  return b;
}

template <typename T>
typename VisionNet<T>::CrossAttention VisionNet<T>::make_cross(nn::ParameterStore<T>& store, const std::string& name,
                                                               Index q_dim, Index kv_dim, Index inner) const {
  CrossAttention a;
  a.q_norm = nn::LayerNorm<T>(store, name + ".q_norm", q_dim, true);
  a.kv_norm = nn::LayerNorm<T>(store, name + ".kv_norm", kv_dim, true);
  a.q = nn::Linear<T>(store, name + ".q", q_dim, inner, true, true, 1.0 / std::sqrt(static_cast<double>(q_dim)));
  a.k = nn::Linear<T>(store, name + ".k", kv_dim, inner, true, true, 1.0 / std::sqrt(static_cast<double>(kv_dim)));
  a.v = nn::Linear<T>(store, name + ".v", kv_dim, inner, true, true, 1.0 / std::sqrt(static_cast<double>(kv_dim)));
  a.out = nn::Linear<T>(store, name + ".out", inner, q_dim, false, true, 0.0);
  return a;
}

template <typename T>
VisionNet<T>::VisionNet(nn::ParameterStore<T>& store, const VisionConfig& cfg, Index text_dim) : cfg_(cfg) {
  cfg_.validate();
  if (text_dim < 1) throw ConfigError("vision: text_dim must be positive");
  for (Index s = 0; s <= cfg_.depth; ++s) {
    const std::string p = "vision.enc." + std::to_string(s);
    const Index in = s == 0 ? cfg_.in_channels : cfg_.stage_channels(s - 1);
    const Index c = cfg_.stage_channels(s);
    enc_.push_back({make_block(store, p + ".0", in, c, 3, s == 0 ? 1 : 2, 1), make_block(store, p + ".1", c, c, 3, 1, 1)});
  }
  const Index cb = cfg_.stage_channels(cfg_.depth);
  text_from_vision_ = make_cross(store, "vision.fuse.text_from_vision", text_dim, cb, cb);
  vision_from_text_ = make_cross(store, "vision.fuse.vision_from_text", cb, text_dim, cb);
  for (Index s = cfg_.depth; s >= 1; --s) {
    const std::string p = "vision.dec." + std::to_string(s - 1);
    const Index c = cfg_.stage_channels(s - 1);
    up_.push_back(nn::ConvTranspose3d2x<T>(store, p + ".up", cfg_.stage_channels(s), c));
    dec_.push_back(make_block(store, p + ".fuse", 2 * c, c, 3, 1, 1));
  }
  head_ = make_block(store, "vision.dec.out", cfg_.stage_channels(0), cfg_.out_channels, 1, 1, 0);
}

template <typename T>
void VisionNet<T>::check_grid(const Shape& s) const {
  if (s.size() != 5 || s[1] != cfg_.in_channels)
    throw ConfigError("vision: expected a [B, " + std::to_string(cfg_.in_channels) + ", D, H, W] volume, got " +
                      shape_str(s));
  const Index f = Index{1} << cfg_.depth;
  for (int a = 2; a < 5; ++a)
    if (s[static_cast<std::size_t>(a)] % f != 0 || s[static_cast<std::size_t>(a)] < f)
      throw ConfigError("vision: grid " + shape_str(s) + " not divisible by 2^depth = " + std::to_string(f));
}

template <typename T>
Var<T> VisionNet<T>::block(const ConvBlock& b, const Var<T>& x) const {
  return nn::leaky_relu(b.norm(b.conv(x)), static_cast<T>(kSlope));
}

template <typename T>
std::vector<Var<T>> VisionNet<T>::encode(const Var<T>& volume) const {
  check_grid(volume.shape());
  std::vector<Var<T>> out;
  Var<T> x = volume;
  for (const auto& stage : enc_) {
    x = block(stage[1], block(stage[0], x));
    out.push_back(x);
  }
  return out;
}

template <typename T>
Var<T> VisionNet<T>::cross(const CrossAttention& a, const Var<T>& queries, const Var<T>& keys,
                           const Tensor<T>* key_mask) const {
  const Var<T> kv = a.kv_norm(keys);
  const Var<T> att = nn::attention(a.q(a.q_norm(queries)), a.k(kv), a.v(kv), static_cast<int>(cfg_.fusion_heads), key_mask);
  return nn::add(queries, a.out(att));
}

template <typename T>
FusionResult<T> VisionNet<T>::fuse_bottleneck(const Var<T>& bottleneck, const Var<T>& text,
                                              const Tensor<T>& text_mask) const {
  if (bottleneck.value().rank() != 5) throw ShapeError("fuse_bottleneck: expected a [B, C, d, h, w] grid");
  if (text.value().rank() != 3 || text.dim(0) != bottleneck.dim(0))
    throw ShapeError("fuse_bottleneck: text must be [B, L, d] with the bottleneck's batch");
  const Shape spatial{bottleneck.dim(2), bottleneck.dim(3), bottleneck.dim(4)};
  Var<T> tokens = nn::channels_to_tokens(bottleneck);
  Var<T> t = text;
  if (cfg_.vision_first) {
    tokens = cross(vision_from_text_, tokens, t, &text_mask);
    t = cross(text_from_vision_, t, tokens, nullptr);
  } else {
    t = cross(text_from_vision_, t, tokens, nullptr);
    tokens = cross(vision_from_text_, tokens, t, &text_mask);
  }
  return {nn::tokens_to_channels(tokens, spatial), t};
}

template <typename T>
Var<T> VisionNet<T>::decode(const std::vector<Var<T>>& pyramid, const Var<T>& fused) const {
  if (static_cast<Index>(pyramid.size()) != cfg_.depth + 1) throw ShapeError("decode: pyramid depth mismatch");
  Var<T> x = fused;
  for (std::size_t i = 0; i < up_.size(); ++i) {
    const Var<T>& skip = pyramid[pyramid.size() - 2 - i];
    x = block(dec_[i], nn::concat(up_[i](x), skip, 1));
  }
  return block(head_, x);
}

template class VisionNet<float>;
template class VisionNet<double>;

}  // namespace textcsp::visionnet
