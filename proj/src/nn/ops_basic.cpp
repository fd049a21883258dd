#include <cmath>
#include <numbers>

#include "textcsp/nn/ops.hpp"
#include "textcsp/simd/kernels.hpp"

namespace textcsp::nn {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  simd::axpy(out.size(), T{1}, b.value().data(), out.data());
  return make_result<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    if (a.requires_grad()) simd::axpy(g.size(), T{1}, g.data(), a.grad_buffer().data());
    if (b.requires_grad()) simd::axpy(g.size(), T{1}, g.data(), b.grad_buffer().data());
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  simd::axpy(out.size(), T{-1}, b.value().data(), out.data());
  return make_result<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    if (a.requires_grad()) simd::axpy(g.size(), T{1}, g.data(), a.grad_buffer().data());
    if (b.requires_grad()) simd::axpy(g.size(), T{-1}, g.data(), b.grad_buffer().data());
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out(a.shape());
  const Index n = out.size();
  for (Index i = 0; i < n; ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    const Index n = g.size();
    if (a.requires_grad()) {
      T* ga = a.grad_buffer().data();
      for (Index i = 0; i < n; ++i) ga[i] += g[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      T* gb = b.grad_buffer().data();
      for (Index i = 0; i < n; ++i) gb[i] += g[i] * a.value()[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (Index i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  return make_result<T>(std::move(out), {a}, [a, s](const Tensor<T>& g) {
    simd::axpy(g.size(), s, g.data(), a.grad_buffer().data());
  });
}

template <typename T>
Var<T> add_broadcast(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    throw ShapeError("add_broadcast: " + shape_str(bs) + " is not a suffix of " + shape_str(as));
  }
  const Index inner = b.size();
  const Index outer = inner == 0 ? 0 : a.size() / inner;
  Tensor<T> out = a.value();
  for (Index o = 0; o < outer; ++o) simd::axpy(inner, T{1}, b.value().data(), out.data() + o * inner);
  return make_result<T>(std::move(out), {a, b}, [a, b, inner, outer](const Tensor<T>& g) {
    if (a.requires_grad()) simd::axpy(g.size(), T{1}, g.data(), a.grad_buffer().data());
    if (b.requires_grad()) {
      T* gb = b.grad_buffer().data();
      for (Index o = 0; o < outer; ++o) simd::axpy(inner, T{1}, g.data() + o * inner, gb);
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (Index i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(a.value()[i]);
  auto result = make_result<T>(std::move(out), {a}, nullptr);
  if (result.requires_grad()) {
    // The closure reads the output value through a weak handle to avoid a cycle.
    std::weak_ptr<Node<T>> self = result.node();
    result.node()->backward_fn = [a, self](const Tensor<T>& g) {
      auto node = self.lock();
      const Tensor<T>& y = node->value;
      T* ga = a.grad_buffer().data();
      for (Index i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T{1} - y[i]);
    };
  }
  return result;
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  for (Index i = 0; i < out.size(); ++i) out[i] = a.value()[i] > T{0} ? a.value()[i] : T{0};
  return make_result<T>(std::move(out), {a}, [a](const Tensor<T>& g) {
    T* ga = a.grad_buffer().data();
    for (Index i = 0; i < g.size(); ++i)
      if (a.value()[i] > T{0}) ga[i] += g[i];
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  Tensor<T> out(a.shape());
  for (Index i = 0; i < out.size(); ++i) {
    const T x = a.value()[i];
    out[i] = x > T{0} ? x : slope * x;
  }
  return make_result<T>(std::move(out), {a}, [a, slope](const Tensor<T>& g) {
    T* ga = a.grad_buffer().data();
    for (Index i = 0; i < g.size(); ++i) ga[i] += a.value()[i] > T{0} ? g[i] : slope * g[i];
  });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  const T inv_sqrt2 = T{1} / std::numbers::sqrt2_v<T>;
  Tensor<T> out(a.shape());
  for (Index i = 0; i < out.size(); ++i) {
    const T x = a.value()[i];
    out[i] = T{0.5} * x * (T{1} + std::erf(x * inv_sqrt2));
  }
  return make_result<T>(std::move(out), {a}, [a, inv_sqrt2](const Tensor<T>& g) {
    const T inv_sqrt_2pi = inv_sqrt2 / std::sqrt(std::numbers::pi_v<T>);
    T* ga = a.grad_buffer().data();
    for (Index i = 0; i < g.size(); ++i) {
      const T x = a.value()[i];
      const T cdf = T{0.5} * (T{1} + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * x * x);
      ga[i] += g[i] * (cdf + x * pdf);
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (Index i = 0; i < a.size(); ++i) s += a.value()[i];
  return make_result<T>(Tensor<T>(Shape{}, s), {a}, [a](const Tensor<T>& g) {
    T* ga = a.grad_buffer().data();
    for (Index i = 0; i < a.size(); ++i) ga[i] += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const Index n = a.size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {a}, [a](const Tensor<T>& g) {
    simd::axpy(g.size(), T{1}, g.data(), a.grad_buffer().data());
  });
}

namespace {

struct AxisSplit {
  Index outer;
  Index axis;
  Index inner;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r{1, s[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("axis out of range");
  return a;
}

}  // namespace

template <typename T>
Var<T> concat(const Var<T>& a, const Var<T>& b, int axis) {
  if (a.value().rank() != b.value().rank()) throw ShapeError("concat: rank mismatch");
  axis = normalize_axis(axis, a.value().rank());
  Shape out_shape = a.shape();
  for (int i = 0; i < a.value().rank(); ++i) {
    if (i != axis && a.shape()[static_cast<std::size_t>(i)] != b.shape()[static_cast<std::size_t>(i)])
      throw ShapeError("concat: incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
  }
  out_shape[static_cast<std::size_t>(axis)] += b.shape()[static_cast<std::size_t>(axis)];
  const AxisSplit sa = split_at(a.shape(), axis);
  const AxisSplit sb = split_at(b.shape(), axis);
  const Index ra = sa.axis * sa.inner;
  const Index rb = sb.axis * sb.inner;
  Tensor<T> out(out_shape);
  for (Index o = 0; o < sa.outer; ++o) {
    std::copy_n(a.value().data() + o * ra, ra, out.data() + o * (ra + rb));
    std::copy_n(b.value().data() + o * rb, rb, out.data() + o * (ra + rb) + ra);
  }
  return make_result<T>(std::move(out), {a, b}, [a, b, sa, ra, rb](const Tensor<T>& g) {
    for (Index o = 0; o < sa.outer; ++o) {
      if (a.requires_grad())
        simd::axpy(ra, T{1}, g.data() + o * (ra + rb), a.grad_buffer().data() + o * ra);
      if (b.requires_grad())
        simd::axpy(rb, T{1}, g.data() + o * (ra + rb) + ra, b.grad_buffer().data() + o * rb);
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& a, int axis, Index start, Index length) {
  axis = normalize_axis(axis, a.value().rank());
  const AxisSplit s = split_at(a.shape(), axis);
  if (start < 0 || length < 0 || start + length > s.axis) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  Tensor<T> out(out_shape);
  const Index rin = s.axis * s.inner;
  const Index rout = length * s.inner;
  for (Index o = 0; o < s.outer; ++o)
    std::copy_n(a.value().data() + o * rin + start * s.inner, rout, out.data() + o * rout);
  return make_result<T>(std::move(out), {a}, [a, s, rin, rout, start](const Tensor<T>& g) {
    T* ga = a.grad_buffer().data();
    for (Index o = 0; o < s.outer; ++o)
      simd::axpy(rout, T{1}, g.data() + o * rout, ga + o * rin + start * s.inner);
  });
}

#define TEXTCSP_INSTANTIATE_BASIC(T)                                          \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                       \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                       \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                       \
  template Var<T> scale<T>(const Var<T>&, T);                                 \
  template Var<T> add_broadcast<T>(const Var<T>&, const Var<T>&);             \
  template Var<T> sigmoid<T>(const Var<T>&);                                  \
  template Var<T> relu<T>(const Var<T>&);                                     \
  template Var<T> leaky_relu<T>(const Var<T>&, T);                            \
  template Var<T> gelu<T>(const Var<T>&);                                     \
  template Var<T> sum<T>(const Var<T>&);                                      \
  template Var<T> mean<T>(const Var<T>&);                                     \
  template Var<T> reshape<T>(const Var<T>&, Shape);                           \
  template Var<T> concat<T>(const Var<T>&, const Var<T>&, int);               \
  template Var<T> slice<T>(const Var<T>&, int, Index, Index);

TEXTCSP_INSTANTIATE_BASIC(float)
TEXTCSP_INSTANTIATE_BASIC(double)

}  // namespace textcsp::nn
