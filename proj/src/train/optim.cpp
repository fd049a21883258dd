#include <cmath>
#include <numbers>

#include "textcsp/train/train.hpp"

namespace textcsp::train {

double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  const int w = cfg.warmup_epochs;
  if (epoch < w) return cfg.base_lr * static_cast<double>(epoch + 1) / static_cast<double>(w);
  const double t = static_cast<double>(epoch - w) / static_cast<double>(cfg.epochs - w);
  return 0.5 * cfg.base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

template <typename T>
std::vector<Tensor<T>> gradient(const std::vector<nn::Parameter<T>*>& params, const LossFn<T>& loss_fn,
                                double& loss_out) {
  for (auto* p : params) p->var.zero_grad();
  nn::Var<T> loss = loss_fn();
  if (loss.size() != 1) throw ShapeError("optimizer: loss must be a scalar, got " + shape_str(loss.shape()));
  loss_out = static_cast<double>(loss.value()[0]);
  if (!std::isfinite(loss_out)) throw NumericError("optimizer: non-finite loss " + std::to_string(loss_out));
  nn::backward(loss);
  std::vector<Tensor<T>> grads;
  grads.reserve(params.size());
  for (auto* p : params) {
    const auto& g = p->var.grad();
    grads.push_back(g.empty() ? Tensor<T>(p->var.shape()) : g);
    for (Index i = 0; i < grads.back().size(); ++i)
      if (!std::isfinite(static_cast<double>(grads.back()[i])))
        throw NumericError("optimizer: non-finite gradient in '" + p->name + "'");
  }
  for (auto* p : params) p->var.zero_grad();
  return grads;
}

template <typename T>
double norm_of(const std::vector<Tensor<T>>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (Index i = 0; i < g.size(); ++i) s += static_cast<double>(g[i]) * static_cast<double>(g[i]);
  return std::sqrt(s);
}

template <typename T>
void momentum_update(const std::vector<nn::Parameter<T>*>& params, const std::vector<Tensor<T>>& grads, double lr,
                     double momentum, std::vector<Tensor<T>>& velocity, double weight_decay) {
  if (velocity.empty())
    for (auto* p : params) velocity.emplace_back(p->var.shape());
  if (velocity.size() != params.size()) throw ShapeError("optimizer: velocity/parameter count mismatch");
  const T m = static_cast<T>(momentum), step = static_cast<T>(lr), wd = static_cast<T>(weight_decay);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = params[k]->var.mutable_value();
    auto& v = velocity[k];
    const auto& g = grads[k];
    if (v.shape() != w.shape()) throw ShapeError("optimizer: velocity shape mismatch for '" + params[k]->name + "'");
    for (Index i = 0; i < w.size(); ++i) {
      T gi = g[i];
      if (weight_decay != 0.0) gi += wd * w[i];
      v[i] = m * v[i] + gi;
      w[i] -= step * v[i];
    }
  }
}

}  // namespace

template <typename T>
StepResult sgd_step(const std::vector<nn::Parameter<T>*>& params, const LossFn<T>& loss_fn, double lr,
                    double momentum, std::vector<Tensor<T>>& velocity, double weight_decay) {
  StepResult r;
  auto g = gradient(params, loss_fn, r.loss);
  r.grad_norm = norm_of(g);
  momentum_update(params, g, lr, momentum, velocity, weight_decay);
  return r;
}

template <typename T>
StepResult sam_step(const std::vector<nn::Parameter<T>*>& params, const LossFn<T>& loss_fn, double lr, double rho,
                    double momentum, std::vector<Tensor<T>>& velocity, double weight_decay) {
  if (!(rho >= 0.0)) throw ConfigError("sam_rho must be >= 0");
  StepResult r;
  auto g = gradient(params, loss_fn, r.loss);
  r.grad_norm = norm_of(g);
  if (rho > 0.0 && r.grad_norm > 0.0) {
    std::vector<Tensor<T>> saved;
    saved.reserve(params.size());
    const double scale = rho / r.grad_norm;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& w = params[k]->var.mutable_value();
      saved.push_back(w);
      for (Index i = 0; i < w.size(); ++i) w[i] += static_cast<T>(scale * static_cast<double>(g[k][i]));
    }
    double perturbed_loss = 0.0;
    try {
      g = gradient(params, loss_fn, perturbed_loss);
    } catch (...) {
      for (std::size_t k = 0; k < params.size(); ++k) params[k]->var.mutable_value() = saved[k];
      throw;
    }
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->var.mutable_value() = std::move(saved[k]);
    r.perturbed = true;
  }
  momentum_update(params, g, lr, momentum, velocity, weight_decay);
  return r;
}

template StepResult sgd_step<float>(const std::vector<nn::Parameter<float>*>&, const LossFn<float>&, double, double,
                                    std::vector<Tensor<float>>&, double);
template StepResult sgd_step<double>(const std::vector<nn::Parameter<double>*>&, const LossFn<double>&, double,
                                     double, std::vector<Tensor<double>>&, double);
template StepResult sam_step<float>(const std::vector<nn::Parameter<float>*>&, const LossFn<float>&, double, double,
                                    double, std::vector<Tensor<float>>&, double);
template StepResult sam_step<double>(const std::vector<nn::Parameter<double>*>&, const LossFn<double>&, double,
                                     double, double, std::vector<Tensor<double>>&, double);

}  // namespace textcsp::train
