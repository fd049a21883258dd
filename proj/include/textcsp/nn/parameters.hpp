#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "textcsp/nn/autograd.hpp"

namespace textcsp::nn {

struct Init {
  enum class Kind { kZeros, kOnes, kNormal, kUniform };
  Kind kind = Kind::kZeros;
  double a = 0.0;  // stddev for kNormal, half-width for kUniform
  static Init zeros() { return {Kind::kZeros, 0.0}; }
  static Init ones() { return {Kind::kOnes, 0.0}; }
  static Init normal(double stddev) { return {Kind::kNormal, stddev}; }
  static Init uniform(double bound) { return {Kind::kUniform, bound}; }
};

template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
  bool trainable = false;
};

// Owns every named parameter of a model. Initial values depend only on
// (seed, parameter name), so toggling optional components never shifts the
// initialization of the others.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Var<T> create(const std::string& name, Shape shape, Init init, bool trainable);

  const std::vector<Parameter<T>>& params() const { return params_; }
  std::vector<Parameter<T>>& params() { return params_; }
  const Parameter<T>* find(const std::string& name) const;
  Parameter<T>* find(const std::string& name);
  const Parameter<T>& at(const std::string& name) const;

  std::vector<Parameter<T>*> trainable();
  Index count(bool trainable) const;
  void zero_grad();
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace textcsp::nn
