#include "textcsp/cascade/cascade.hpp"

#include <cmath>

#include "textcsp/textenc/textenc.hpp"

namespace textcsp::cascade {

using nn::Var;
using nlohmann::json;

Topology parse_topology(const std::string& name) {
  if (name == "parallel") return Topology::kParallel;
  if (name == "partial") return Topology::kPartial;
  if (name == "full") return Topology::kFull;
  throw ConfigError("unknown cascade topology '" + name + "' (expected parallel, partial or full)");
}

const char* topology_name(Topology t) {
  switch (t) {
    case Topology::kParallel: return "parallel";
    case Topology::kPartial: return "partial";
    case Topology::kFull: return "full";
  }
  return "?";
}

void CascadeConfig::validate() const {
  if (channels < 1 || text_dim < 1) throw ConfigError("cascade config: channels and text_dim must be positive");
  if (reduction < 1 || channels % reduction != 0)
    throw ConfigError("cascade config: channels " + std::to_string(channels) + " not divisible by reduction " +
                      std::to_string(reduction));
}

json CascadeConfig::to_json() const {
  return json{{"topology", topology_name(topology)}, {"channels", channels}, {"text_dim", text_dim},
              {"reduction", reduction}, {"modulators_on", modulators_on}};
}

CascadeConfig CascadeConfig::from_json(const json& j) {
  CascadeConfig c;
  if (!j.is_object()) throw ConfigError("cascade config: expected an object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "topology") c.topology = parse_topology(v.get<std::string>());
      else if (k == "channels") c.channels = v.get<Index>();
      else if (k == "text_dim") c.text_dim = v.get<Index>();
      else if (k == "reduction") c.reduction = v.get<Index>();
      else if (k == "modulators_on") c.modulators_on = v.get<bool>();
      else throw ConfigError("cascade config: unknown field " + k);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("cascade config: ") + e.what());
  }
  return c;
}

template <typename T>
ChannelModulator<T>::ChannelModulator(nn::ParameterStore<T>& store, const std::string& prefix, Index channels,
                                      Index text_dim, Index reduction) {
  if (reduction < 1 || channels % reduction != 0)
    throw ConfigError(prefix + ": channels not divisible by reduction ratio");
  const Index hidden = channels / reduction;
  fc1_ = nn::Linear<T>(store, prefix + ".fc1", text_dim, hidden, true, true, 1.0 / std::sqrt(static_cast<double>(text_dim)));
  fc2_ = nn::Linear<T>(store, prefix + ".fc2", hidden, channels, true, true, 1.0 / std::sqrt(static_cast<double>(hidden)));
}

template <typename T>
Var<T> ChannelModulator<T>::operator()(const Var<T>& t) const {
  return nn::sigmoid(fc2_(nn::relu(fc1_(t))));
}

template <typename T>
CascadeHead<T>::CascadeHead(nn::ParameterStore<T>& store, const CascadeConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const char* names[] = {"cascade.head.wt", "cascade.head.tc", "cascade.head.et"};
  for (int s = 0; s < 3; ++s) heads_[static_cast<std::size_t>(s)] = nn::Conv3d<T>(store, names[s], cfg_.channels, 1, 1, 1, 0);
  if (cfg_.modulators_on) {
    mod_tc_ = ChannelModulator<T>(store, "cascade.mod.tc", cfg_.channels, cfg_.text_dim, cfg_.reduction);
    mod_et_ = ChannelModulator<T>(store, "cascade.mod.et", cfg_.channels, cfg_.text_dim, cfg_.reduction);
  }
}

template <typename T>
CascadeOutput<T> CascadeHead<T>::forward(const Var<T>& f_dec, const Var<T>& t_tc, const Var<T>& t_et,
                                         const Tensor<std::uint8_t>& mask) const {
  Var<T> g_tc, g_et;
  if (cfg_.modulators_on) {
    g_tc = mod_tc_(textenc::pool_sentence(t_tc, mask));
    g_et = mod_et_(textenc::pool_sentence(t_et, mask));
  }
  return forward_with_gates(f_dec, g_tc, g_et);
}

template <typename T>
CascadeOutput<T> CascadeHead<T>::forward_with_gates(const Var<T>& f_dec, const Var<T>& g_tc, const Var<T>& g_et) const {
  if (f_dec.value().rank() != 5 || f_dec.dim(1) != cfg_.channels)
    throw ShapeError("cascade: decoder features " + shape_str(f_dec.shape()) + " do not have " +
                     std::to_string(cfg_.channels) + " channels");
  CascadeOutput<T> out;
  out.g_tc = g_tc;
  out.g_et = g_et;
  auto branch = [&](const Var<T>* prior, const Var<T>& gate) {
    Var<T> f = prior ? nn::spatial_gate(f_dec, *prior) : f_dec;
    if (gate.defined()) f = nn::channel_gate(f, gate);
    return f;
  };
  out.logits[0] = heads_[0](f_dec);
  out.a_wt = nn::sigmoid(out.logits[0]);
  const bool gated = cfg_.topology != Topology::kParallel;
  out.logits[1] = heads_[1](branch(gated ? &out.a_wt : nullptr, g_tc));
  out.a_tc = nn::sigmoid(out.logits[1]);
  const Var<T>* et_prior = cfg_.topology == Topology::kFull ? &out.a_tc : gated ? &out.a_wt : nullptr;
  out.logits[2] = heads_[2](branch(et_prior, g_et));
  return out;
}

template class ChannelModulator<float>;
template class ChannelModulator<double>;
template class CascadeHead<float>;
template class CascadeHead<double>;

}  // namespace textcsp::cascade
