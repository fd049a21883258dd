#include "textcsp/textenc/textenc.hpp"

#include <cmath>

namespace textcsp::textenc {

using nn::Init;
using nn::Var;
using nlohmann::json;

const char* prompt_key(int region) {
  static const char* keys[] = {"prompt.WT", "prompt.TC", "prompt.ET"};
  if (region < 0 || region > 2) throw ConfigError("prompt_key: region must be 0, 1 or 2");
  return keys[region];
}

void TextEncoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("text encoder config: " + m); };
  if (d <= 0 || layers <= 0 || heads <= 0 || max_tokens < 2 || vocab_size < 3 || ffn_mult <= 0)
    fail("d, layers, heads, ffn_mult must be positive, max_tokens >= 2, vocab_size >= 3");
  if (d % heads != 0) fail("d (" + std::to_string(d) + ") must be divisible by heads (" + std::to_string(heads) + ")");
  if (prompt_tokens < 1) fail("prompt_tokens (K) must be at least 1");
  if (lora_rank < 1) fail("lora_rank must be at least 1");
  if (lora_rank > d) fail("lora_rank " + std::to_string(lora_rank) + " exceeds hidden dimension " + std::to_string(d));
  if (!(lora_alpha > 0.0)) fail("lora_alpha must be positive");
}

json TextEncoderConfig::to_json() const {
  return json{{"d", d},
              {"layers", layers},
              {"heads", heads},
              {"max_tokens", max_tokens},
              {"vocab_size", vocab_size},
              {"prompt_tokens", prompt_tokens},
              {"ffn_mult", ffn_mult},
              {"lora_rank", lora_rank},
              {"lora_alpha", lora_alpha},
              {"prompts_on", prompts_on},
              {"lora_on", lora_on}};
}

TextEncoderConfig TextEncoderConfig::from_json(const json& j) {
  TextEncoderConfig c;
  if (!j.is_object()) throw ConfigError("text encoder config: expected an object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "d") c.d = v.get<Index>();
      else if (k == "layers") c.layers = v.get<Index>();
      else if (k == "heads") c.heads = v.get<Index>();
      else if (k == "max_tokens") c.max_tokens = v.get<Index>();
      else if (k == "vocab_size") c.vocab_size = v.get<Index>();
      else if (k == "prompt_tokens") c.prompt_tokens = v.get<Index>();
      else if (k == "ffn_mult") c.ffn_mult = v.get<Index>();
      else if (k == "lora_rank") c.lora_rank = v.get<Index>();
      else if (k == "lora_alpha") c.lora_alpha = v.get<double>();
      else if (k == "prompts_on") c.prompts_on = v.get<bool>();
      else if (k == "lora_on") c.lora_on = v.get<bool>();
      else throw ConfigError("text encoder config: unknown field " + k);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("text encoder config: ") + e.what());
  }
  return c;
}

template <typename T>
LoRALinear<T>::LoRALinear(nn::ParameterStore<T>& store, const std::string& base_name, const std::string& lora_name,
                          Index in, Index out, Index rank, double alpha)
    : base_(store, base_name, in, out, true, false, 0.02) {
  if (lora_name.empty()) return;
  if (rank < 1 || rank > std::min(in, out))
    throw ConfigError(lora_name + ": rank " + std::to_string(rank) + " exceeds layer dimension " +
                      std::to_string(std::min(in, out)));
  a_ = store.create(lora_name + ".A", Shape{rank, in}, Init::normal(0.02), true);
  b_ = store.create(lora_name + ".B", Shape{out, rank}, Init::zeros(), true);
  scale_ = alpha / static_cast<double>(rank);
}

template <typename T>
Var<T> LoRALinear<T>::operator()(const Var<T>& x) const {
  Var<T> y = base_(x);
  if (!adapted()) return y;
  const Var<T> none;
  return nn::add(y, nn::scale(nn::linear(nn::linear(x, a_, none), b_, none), static_cast<T>(scale_)));
}

template <typename T>
Var<T> lora_forward(const Var<T>& w, const Var<T>& a, const Var<T>& b, double alpha, Index r, const Var<T>& x) {
  if (r < 1) throw ConfigError("lora_forward: rank must be positive");
  if (a.dim(0) > std::min(w.dim(0), w.dim(1)))
    throw ConfigError("lora_forward: rank " + std::to_string(a.dim(0)) + " exceeds matrix dimension");
  const Var<T> none;
  return nn::add(nn::linear(x, w, none),
                 nn::scale(nn::linear(nn::linear(x, a, none), b, none), static_cast<T>(alpha / static_cast<double>(r))));
}

TokenBatch make_token_batch(const std::vector<std::vector<std::int32_t>>& ids,
                            const std::vector<std::vector<std::uint8_t>>& masks) {
  if (ids.empty() || ids.size() != masks.size()) throw ShapeError("make_token_batch: ids/masks batch mismatch");
  TokenBatch tb;
  tb.batch = static_cast<Index>(ids.size());
  tb.length = static_cast<Index>(ids[0].size());
  tb.mask = Tensor<std::uint8_t>(Shape{tb.batch, tb.length});
  for (std::size_t b = 0; b < ids.size(); ++b) {
    if (static_cast<Index>(ids[b].size()) != tb.length || masks[b].size() != ids[b].size())
      throw ShapeError("make_token_batch: ragged token sequences");
    for (Index i = 0; i < tb.length; ++i) {
      tb.ids.push_back(ids[b][static_cast<std::size_t>(i)]);
      tb.mask[static_cast<Index>(b) * tb.length + i] = masks[b][static_cast<std::size_t>(i)] ? 1 : 0;
    }
  }
  return tb;
}

template <typename T>
TextEncoder<T>::TextEncoder(nn::ParameterStore<T>& store, const TextEncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const Index d = cfg_.d;
  token_table_ = store.create("text.embed.token", Shape{cfg_.vocab_size, d}, Init::normal(1.0), false);
  positions_ = store.create("text.embed.pos", Shape{cfg_.prompt_tokens + cfg_.max_tokens, d}, Init::normal(0.1), false);
  embed_ln_ = nn::LayerNorm<T>(store, "text.embed.ln", d, false);
  for (Index l = 0; l < cfg_.layers; ++l) {
    const std::string p = "text.layer" + std::to_string(l);
    const std::string lora = cfg_.lora_on ? "lora." + std::to_string(l) : "";
    Layer layer;
    layer.ln1 = nn::LayerNorm<T>(store, p + ".ln1", d, false);
    layer.ln2 = nn::LayerNorm<T>(store, p + ".ln2", d, false);
    layer.q = LoRALinear<T>(store, p + ".q", lora.empty() ? "" : lora + ".q", d, d, cfg_.lora_rank, cfg_.lora_alpha);
    layer.k = nn::Linear<T>(store, p + ".k", d, d, true, false, 0.02);
    layer.v = LoRALinear<T>(store, p + ".v", lora.empty() ? "" : lora + ".v", d, d, cfg_.lora_rank, cfg_.lora_alpha);
    layer.o = nn::Linear<T>(store, p + ".o", d, d, true, false, 0.02);
    layer.ff1 = nn::Linear<T>(store, p + ".ff1", d, d * cfg_.ffn_mult, true, false, 0.02);
    layer.ff2 = nn::Linear<T>(store, p + ".ff2", d * cfg_.ffn_mult, d, true, false, 0.02);
    layers_.push_back(std::move(layer));
  }
  final_ln_ = nn::LayerNorm<T>(store, "text.final_ln", d, false);
  if (cfg_.prompts_on)
    for (int s = 0; s < 3; ++s)
      prompts_[static_cast<std::size_t>(s)] = store.create(prompt_key(s), Shape{cfg_.prompt_tokens, d}, Init::normal(0.02), true);
}

template <typename T>
Var<T> TextEncoder<T>::embed_words(const TokenBatch& tokens) const {
  if (tokens.length != cfg_.max_tokens)
    throw ShapeError("text encoder: token length " + std::to_string(tokens.length) + " != configured L " +
                     std::to_string(cfg_.max_tokens));
  for (Index id : tokens.ids)
    if (id < 0 || id >= cfg_.vocab_size)
      throw ShapeError("text encoder: token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(cfg_.vocab_size));
  return nn::embedding(token_table_, tokens.ids, tokens.batch, tokens.length);
}

template <typename T>
Var<T> TextEncoder<T>::run(const Var<T>& x_in, const Tensor<T>& mask) const {
  const Index s = x_in.dim(1);
  last_internal_length_ = s;
  Var<T> pos = nn::slice(positions_, 0, 0, s);
  Var<T> x = embed_ln_(nn::add_broadcast(x_in, pos));
  const int heads = static_cast<int>(cfg_.heads);
  for (const auto& layer : layers_) {
    Var<T> h = layer.ln1(x);
    Var<T> att = nn::attention(layer.q(h), layer.k(h), layer.v(h), heads, &mask);
    x = nn::add(x, layer.o(att));
    h = layer.ln2(x);
    x = nn::add(x, layer.ff2(nn::gelu(layer.ff1(h))));
  }
  return final_ln_(x);
}

template <typename T>
Var<T> TextEncoder<T>::encode_subregion(const TokenBatch& tokens, int region) const {
  if (!cfg_.prompts_on) throw ConfigError("encode_subregion: prompts are disabled in this model");
  const Var<T> words = embed_words(tokens);
  const Var<T> seq = nn::prepend_rows(prompt(region), words);
  const Index k = cfg_.prompt_tokens;
  Tensor<T> ext(Shape{tokens.batch, k + tokens.length});
  for (Index b = 0; b < tokens.batch; ++b) {
    for (Index i = 0; i < k; ++i) ext[b * (k + tokens.length) + i] = T{1};
    for (Index i = 0; i < tokens.length; ++i)
      ext[b * (k + tokens.length) + k + i] = static_cast<T>(tokens.mask[b * tokens.length + i]);
  }
  return nn::slice(run(seq, ext), 1, k, tokens.length);
}

template <typename T>
Var<T> TextEncoder<T>::encode_plain(const TokenBatch& tokens) const {
  return run(embed_words(tokens), tokens.mask.template cast<T>());
}

template <typename T>
TextRepresentation<T> TextEncoder<T>::encode_all(const TokenBatch& tokens) const {
  TextRepresentation<T> r;
  if (!cfg_.prompts_on) {
    Var<T> t = encode_plain(tokens);
    r.sub = {t, t, t};
    r.shared = t;
    return r;
  }
  for (int s = 0; s < 3; ++s) r.sub[static_cast<std::size_t>(s)] = encode_subregion(tokens, s);
  r.shared = nn::scale(nn::add(nn::add(r.sub[0], r.sub[1]), r.sub[2]), static_cast<T>(1.0 / 3.0));
  return r;
}

template <typename T>
Var<T> pool_sentence(const Var<T>& t, const Tensor<std::uint8_t>& mask) {
  return nn::masked_mean(t, mask.template cast<T>());
}

template class LoRALinear<float>;
template class LoRALinear<double>;
template class TextEncoder<float>;
template class TextEncoder<double>;
template Var<float> lora_forward<float>(const Var<float>&, const Var<float>&, const Var<float>&, double, Index,
                                        const Var<float>&);
template Var<double> lora_forward<double>(const Var<double>&, const Var<double>&, const Var<double>&, double, Index,
                                          const Var<double>&);
template Var<float> pool_sentence<float>(const Var<float>&, const Tensor<std::uint8_t>&);
template Var<double> pool_sentence<double>(const Var<double>&, const Tensor<std::uint8_t>&);

}  // namespace textcsp::textenc
