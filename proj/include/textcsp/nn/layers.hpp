#pragma once

#include <string>

#include "textcsp/nn/ops.hpp"
#include "textcsp/nn/parameters.hpp"

// Thin parameter-owning wrappers around the ops. Each layer registers its
// tensors in a ParameterStore under "<prefix>.<tensor>".
namespace textcsp::nn {

template <typename T>
class Linear {
 public:
  Linear() = default;
  // Weights ~ N(0, stddev^2); bias zero.
  Linear(ParameterStore<T>& store, const std::string& prefix, Index in, Index out, bool bias,
         bool trainable, double stddev);
  Var<T> operator()(const Var<T>& x) const { return linear(x, weight_, bias_); }
  const Var<T>& weight() const { return weight_; }
  const Var<T>& bias() const { return bias_; }

 private:
  Var<T> weight_;
  Var<T> bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& prefix, Index dim, bool trainable);
  Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma_, beta_, T(1e-5)); }

 private:
  Var<T> gamma_;
  Var<T> beta_;
};

template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(ParameterStore<T>& store, const std::string& prefix, Index channels, int groups);
  Var<T> operator()(const Var<T>& x) const { return group_norm(x, groups_, gamma_, beta_, T(1e-5)); }

 private:
  int groups_ = 1;
  Var<T> gamma_;
  Var<T> beta_;
};

// Cubic-kernel 3D convolution with He-normal initialization.
template <typename T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(ParameterStore<T>& store, const std::string& prefix, Index in, Index out, int kernel,
         int stride, int pad, bool bias = true);
  Var<T> operator()(const Var<T>& x) const { return conv3d(x, weight_, bias_, stride_, pad_); }

 private:
  Var<T> weight_;
  Var<T> bias_;
  int stride_ = 1;
  int pad_ = 0;
};

template <typename T>
class ConvTranspose3d2x {
 public:
  ConvTranspose3d2x() = default;
  ConvTranspose3d2x(ParameterStore<T>& store, const std::string& prefix, Index in, Index out);
  Var<T> operator()(const Var<T>& x) const { return conv_transpose3d_2x(x, weight_, bias_); }

 private:
  Var<T> weight_;
  Var<T> bias_;
};

}  // namespace textcsp::nn
