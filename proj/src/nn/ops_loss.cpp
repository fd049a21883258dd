#include <cmath>

#include "textcsp/nn/ops.hpp"

namespace textcsp::nn {

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& target) {
  require_same_shape(logits.value(), target, "bce_with_logits");
  const Index n = logits.size();
  if (n == 0) throw ShapeError("bce_with_logits: empty input");
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double x = static_cast<double>(logits.value()[i]);
    const double t = static_cast<double>(target[i]);
    total += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  const T loss = static_cast<T>(total / static_cast<double>(n));
  return make_result<T>(Tensor<T>(Shape{}, loss), {logits}, [logits, target, n](const Tensor<T>& g) {
    const T w = g[0] / static_cast<T>(n);
    T* gl = logits.grad_buffer().data();
    for (Index i = 0; i < n; ++i) gl[i] += w * (stable_sigmoid(logits.value()[i]) - target[i]);
  });
}

template <typename T>
Var<T> soft_dice_loss(const Var<T>& logits, const Tensor<T>& target, T eps) {
  require_same_shape(logits.value(), target, "soft_dice_loss");
  if (logits.value().rank() < 1) throw ShapeError("soft_dice_loss: expected a leading batch axis");
  const Index b = logits.dim(0);
  const Index per = logits.size() / b;
  std::vector<double> num(static_cast<std::size_t>(b));
  std::vector<double> den(static_cast<std::size_t>(b));
  double total = 0.0;
  for (Index bi = 0; bi < b; ++bi) {
    double inter = 0.0;
    double ps = 0.0;
    double ts = 0.0;
    for (Index i = 0; i < per; ++i) {
      const double p = static_cast<double>(stable_sigmoid(logits.value()[bi * per + i]));
      const double t = static_cast<double>(target[bi * per + i]);
      inter += p * t;
      ps += p;
      ts += t;
    }
    num[static_cast<std::size_t>(bi)] = 2.0 * inter + static_cast<double>(eps);
    den[static_cast<std::size_t>(bi)] = ps + ts + static_cast<double>(eps);
    total += 1.0 - num[static_cast<std::size_t>(bi)] / den[static_cast<std::size_t>(bi)];
  }
  const T loss = static_cast<T>(total / static_cast<double>(b));
  return make_result<T>(Tensor<T>(Shape{}, loss), {logits},
                        [logits, target, num, den, b, per](const Tensor<T>& g) {
    T* gl = logits.grad_buffer().data();
    const double w = static_cast<double>(g[0]) / static_cast<double>(b);
    for (Index bi = 0; bi < b; ++bi) {
      const double nu = num[static_cast<std::size_t>(bi)];
      const double de = den[static_cast<std::size_t>(bi)];
      for (Index i = 0; i < per; ++i) {
        const Index idx = bi * per + i;
        const double p = static_cast<double>(stable_sigmoid(logits.value()[idx]));
        const double t = static_cast<double>(target[idx]);
        const double dl_dp = -(2.0 * t / de) + nu / (de * de);
        gl[idx] += static_cast<T>(w * dl_dp * p * (1.0 - p));
      }
    }
  });
}

template Var<float> bce_with_logits<float>(const Var<float>&, const Tensor<float>&);
template Var<double> bce_with_logits<double>(const Var<double>&, const Tensor<double>&);
template Var<float> soft_dice_loss<float>(const Var<float>&, const Tensor<float>&, float);
template Var<double> soft_dice_loss<double>(const Var<double>&, const Tensor<double>&, double);

}  // namespace textcsp::nn
