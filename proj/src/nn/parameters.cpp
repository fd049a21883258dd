#include "textcsp/nn/parameters.hpp"

#include "textcsp/core/random.hpp"

namespace textcsp::nn {

template <typename T>
Var<T> ParameterStore<T>::create(const std::string& name, Shape shape, Init init, bool trainable) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  Tensor<T> value(std::move(shape));
  Rng rng(derive_seed(seed_, name));
  switch (init.kind) {
    case Init::Kind::kZeros: break;
    case Init::Kind::kOnes: value.fill(T{1}); break;
    case Init::Kind::kNormal:
      for (Index i = 0; i < value.size(); ++i) value[i] = static_cast<T>(rng.normal(0.0, init.a));
      break;
    case Init::Kind::kUniform:
      for (Index i = 0; i < value.size(); ++i) value[i] = static_cast<T>(rng.uniform(-init.a, init.a));
      break;
  }
  Var<T> var(std::move(value), trainable);
  index_[name] = params_.size();
  params_.push_back(Parameter<T>{name, var, trainable});
  return var;
}

template <typename T>
const Parameter<T>* ParameterStore<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

template <typename T>
Parameter<T>* ParameterStore<T>::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

template <typename T>
const Parameter<T>& ParameterStore<T>::at(const std::string& name) const {
  const auto* p = find(name);
  if (!p) throw ConfigError("unknown parameter '" + name + "'");
  return *p;
}

template <typename T>
std::vector<Parameter<T>*> ParameterStore<T>::trainable() {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_)
    if (p.trainable) out.push_back(&p);
  return out;
}

template <typename T>
Index ParameterStore<T>::count(bool trainable) const {
  Index n = 0;
  for (const auto& p : params_)
    if (p.trainable == trainable) n += p.var.size();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

template class ParameterStore<float>;
template class ParameterStore<double>;

}  // namespace textcsp::nn
