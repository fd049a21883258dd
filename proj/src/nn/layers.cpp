#include "textcsp/nn/layers.hpp"

#include <cmath>

namespace textcsp::nn {

template <typename T>
Linear<T>::Linear(ParameterStore<T>& store, const std::string& prefix, Index in, Index out, bool bias,
                  bool trainable, double stddev) {
  weight_ = store.create(prefix + ".weight", Shape{out, in}, Init::normal(stddev), trainable);
  if (bias) bias_ = store.create(prefix + ".bias", Shape{out}, Init::zeros(), trainable);
}

template <typename T>
LayerNorm<T>::LayerNorm(ParameterStore<T>& store, const std::string& prefix, Index dim, bool trainable) {
  gamma_ = store.create(prefix + ".gamma", Shape{dim}, Init::ones(), trainable);
  beta_ = store.create(prefix + ".beta", Shape{dim}, Init::zeros(), trainable);
}

template <typename T>
GroupNorm<T>::GroupNorm(ParameterStore<T>& store, const std::string& prefix, Index channels, int groups)
    : groups_(groups) {
  if (groups <= 0 || channels % groups != 0)
    throw ConfigError(prefix + ": channel count " + std::to_string(channels) +
                      " not divisible by group count " + std::to_string(groups));
  gamma_ = store.create(prefix + ".gamma", Shape{channels}, Init::ones(), true);
  beta_ = store.create(prefix + ".beta", Shape{channels}, Init::zeros(), true);
}

template <typename T>
Conv3d<T>::Conv3d(ParameterStore<T>& store, const std::string& prefix, Index in, Index out, int kernel,
                  int stride, int pad, bool bias)
    : stride_(stride), pad_(pad) {
  const double fan_in = static_cast<double>(in) * kernel * kernel * kernel;
  weight_ = store.create(prefix + ".weight", Shape{out, in, kernel, kernel, kernel},
                         Init::normal(std::sqrt(2.0 / fan_in)), true);
  if (bias) bias_ = store.create(prefix + ".bias", Shape{out}, Init::zeros(), true);
}

template <typename T>
ConvTranspose3d2x<T>::ConvTranspose3d2x(ParameterStore<T>& store, const std::string& prefix, Index in,
                                        Index out) {
  weight_ = store.create(prefix + ".weight", Shape{in, out, 2, 2, 2},
                         Init::normal(std::sqrt(2.0 / static_cast<double>(in))), true);
  bias_ = store.create(prefix + ".bias", Shape{out}, Init::zeros(), true);
}

template class Linear<float>;
template class Linear<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class GroupNorm<float>;
template class GroupNorm<double>;
template class Conv3d<float>;
template class Conv3d<double>;
template class ConvTranspose3d2x<float>;
template class ConvTranspose3d2x<double>;

}  // namespace textcsp::nn
