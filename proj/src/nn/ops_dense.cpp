#include <cmath>
#include <limits>

#include "textcsp/nn/ops.hpp"
#include "textcsp/simd/kernels.hpp"

namespace textcsp::nn {

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  if (w.value().rank() != 2) throw ShapeError("linear: weight must be [out, in]");
  const Index out_features = w.dim(0);
  const Index in_features = w.dim(1);
  if (x.value().rank() < 1 || x.dim(-1) != in_features) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  if (bias.defined() && bias.size() != out_features) throw ShapeError("linear: bias size mismatch");
  const Index rows = x.size() / in_features;
  Shape out_shape = x.shape();
  out_shape.back() = out_features;
  Tensor<T> out(out_shape);
  simd::gemm_nt(rows, out_features, in_features, x.value().data(), in_features, w.value().data(),
                in_features, out.data(), out_features, false);
  if (bias.defined())
    for (Index r = 0; r < rows; ++r)
      simd::axpy(out_features, T{1}, bias.value().data(), out.data() + r * out_features);

  Var<T> b = bias.defined() ? bias : Var<T>(Tensor<T>(Shape{0}));
  return make_result<T>(std::move(out), {x, w, b},
                        [x, w, b, rows, in_features, out_features](const Tensor<T>& g) {
    if (x.requires_grad()) {
      simd::gemm_nn(rows, in_features, out_features, g.data(), out_features, w.value().data(),
                    in_features, x.grad_buffer().data(), in_features, true);
    }
    if (w.requires_grad()) {
      std::vector<T> gt(static_cast<std::size_t>(rows * out_features));
      simd::transpose(rows, out_features, g.data(), gt.data());
      simd::gemm_nn(out_features, in_features, rows, gt.data(), rows, x.value().data(), in_features,
                    w.grad_buffer().data(), in_features, true);
    }
    if (b.requires_grad()) {
      T* gb = b.grad_buffer().data();
      for (Index r = 0; r < rows; ++r) simd::axpy(out_features, T{1}, g.data() + r * out_features, gb);
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const Index d = x.dim(-1);
  if (gamma.size() != d || beta.size() != d) throw ShapeError("layer_norm: affine size mismatch");
  const Index rows = x.size() / d;
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.size()));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const T* xr = x.value().data() + r * d;
    T m{0};
    for (Index i = 0; i < d; ++i) m += xr[i];
    m /= static_cast<T>(d);
    T v{0};
    for (Index i = 0; i < d; ++i) v += (xr[i] - m) * (xr[i] - m);
    v /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(v + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = is;
    for (Index i = 0; i < d; ++i) {
      const T h = (xr[i] - m) * is;
      (*xhat)[static_cast<std::size_t>(r * d + i)] = h;
      out[r * d + i] = h * gamma.value()[i] + beta.value()[i];
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, inv_std, rows, d](const Tensor<T>& g) {
    std::vector<T> dh(static_cast<std::size_t>(d));
    for (Index r = 0; r < rows; ++r) {
      const T* gr = g.data() + r * d;
      const T* hr = xhat->data() + r * d;
      if (gamma.requires_grad()) {
        T* gg = gamma.grad_buffer().data();
        for (Index i = 0; i < d; ++i) gg[i] += gr[i] * hr[i];
      }
      if (beta.requires_grad()) {
        T* gb = beta.grad_buffer().data();
        for (Index i = 0; i < d; ++i) gb[i] += gr[i];
      }
      if (x.requires_grad()) {
        T s1{0};
        T s2{0};
        for (Index i = 0; i < d; ++i) {
          dh[static_cast<std::size_t>(i)] = gr[i] * gamma.value()[i];
          s1 += dh[static_cast<std::size_t>(i)];
          s2 += dh[static_cast<std::size_t>(i)] * hr[i];
        }
        const T is = (*inv_std)[static_cast<std::size_t>(r)];
        const T invd = T{1} / static_cast<T>(d);
        T* gx = x.grad_buffer().data() + r * d;
        for (Index i = 0; i < d; ++i)
          gx[i] += is * (dh[static_cast<std::size_t>(i)] - invd * s1 - hr[i] * invd * s2);
      }
    }
  });
}

template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<Index>& ids, Index batch, Index length) {
  if (table.value().rank() != 2) throw ShapeError("embedding: table must be [V, E]");
  if (static_cast<Index>(ids.size()) != batch * length) throw ShapeError("embedding: id count mismatch");
  const Index vocab = table.dim(0);
  const Index e = table.dim(1);
  Tensor<T> out(Shape{batch, length, e});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Index id = ids[i];
    if (id < 0 || id >= vocab)
      throw ShapeError("embedding: token id " + std::to_string(id) + " outside vocabulary");
    std::copy_n(table.value().data() + id * e, e, out.data() + static_cast<Index>(i) * e);
  }
  return make_result<T>(std::move(out), {table}, [table, ids, e](const Tensor<T>& g) {
    T* gt = table.grad_buffer().data();
    for (std::size_t i = 0; i < ids.size(); ++i)
      simd::axpy(e, T{1}, g.data() + static_cast<Index>(i) * e, gt + ids[i] * e);
  });
}

template <typename T>
Var<T> prepend_rows(const Var<T>& prefix, const Var<T>& x) {
  if (prefix.value().rank() != 2 || x.value().rank() != 3 || prefix.dim(1) != x.dim(2)) {
    throw ShapeError("prepend_rows: prefix " + shape_str(prefix.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  const Index b = x.dim(0);
  const Index k = prefix.dim(0);
  const Index l = x.dim(1);
  const Index e = x.dim(2);
  Tensor<T> out(Shape{b, k + l, e});
  for (Index i = 0; i < b; ++i) {
    std::copy_n(prefix.value().data(), k * e, out.data() + i * (k + l) * e);
    std::copy_n(x.value().data() + i * l * e, l * e, out.data() + (i * (k + l) + k) * e);
  }
  return make_result<T>(std::move(out), {prefix, x}, [prefix, x, b, k, l, e](const Tensor<T>& g) {
    for (Index i = 0; i < b; ++i) {
      if (prefix.requires_grad())
        simd::axpy(k * e, T{1}, g.data() + i * (k + l) * e, prefix.grad_buffer().data());
      if (x.requires_grad())
        simd::axpy(l * e, T{1}, g.data() + (i * (k + l) + k) * e, x.grad_buffer().data() + i * l * e);
    }
  });
}

template <typename T>
Var<T> masked_mean(const Var<T>& x, const Tensor<T>& mask) {
  if (x.value().rank() != 3 || mask.rank() != 2 || mask.dim(0) != x.dim(0) || mask.dim(1) != x.dim(1)) {
    throw ShapeError("masked_mean: input " + shape_str(x.shape()) + " vs mask " + shape_str(mask.shape()));
  }
  const Index b = x.dim(0);
  const Index l = x.dim(1);
  const Index e = x.dim(2);
  std::vector<T> weight(static_cast<std::size_t>(b * l), T{0});
  for (Index i = 0; i < b; ++i) {
    T count{0};
    for (Index j = 0; j < l; ++j) count += mask[i * l + j] != T{0} ? T{1} : T{0};
    if (count == T{0}) continue;
    for (Index j = 0; j < l; ++j)
      weight[static_cast<std::size_t>(i * l + j)] = mask[i * l + j] != T{0} ? T{1} / count : T{0};
  }
  Tensor<T> out(Shape{b, e});
  for (Index i = 0; i < b; ++i)
    for (Index j = 0; j < l; ++j) {
      const T w = weight[static_cast<std::size_t>(i * l + j)];
      if (w != T{0}) simd::axpy(e, w, x.value().data() + (i * l + j) * e, out.data() + i * e);
    }
  return make_result<T>(std::move(out), {x}, [x, weight, b, l, e](const Tensor<T>& g) {
    T* gx = x.grad_buffer().data();
    for (Index i = 0; i < b; ++i)
      for (Index j = 0; j < l; ++j) {
        const T w = weight[static_cast<std::size_t>(i * l + j)];
        if (w != T{0}) simd::axpy(e, w, g.data() + i * e, gx + (i * l + j) * e);
      }
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 const std::type_identity_t<Tensor<T>>* key_mask) {
  if (q.value().rank() != 3 || k.value().rank() != 3 || v.value().rank() != 3)
    throw ShapeError("attention: expected [B, S, E] inputs");
  const Index b = q.dim(0);
  const Index sq = q.dim(1);
  const Index sk = k.dim(1);
  const Index e = q.dim(2);
  if (k.dim(0) != b || v.dim(0) != b || k.dim(2) != e || v.dim(2) != e || v.dim(1) != sk)
    throw ShapeError("attention: q/k/v shapes disagree");
  if (heads <= 0 || e % heads != 0) throw ShapeError("attention: embed dim not divisible by heads");
  if (key_mask && (key_mask->rank() != 2 || key_mask->dim(0) != b || key_mask->dim(1) != sk))
    throw ShapeError("attention: key mask must be [B, Sk]");
  const Index hd = e / heads;
  const T scl = T{1} / std::sqrt(static_cast<T>(hd));

  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(b * heads * sq * sk), T{0});
  Tensor<T> out(Shape{b, sq, e});
  std::vector<T> row(static_cast<std::size_t>(sk));
  for (Index bi = 0; bi < b; ++bi) {
    for (Index h = 0; h < heads; ++h) {
      for (Index i = 0; i < sq; ++i) {
        const T* qi = q.value().data() + (bi * sq + i) * e + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (Index j = 0; j < sk; ++j) {
          if (key_mask && (*key_mask)[bi * sk + j] == T{0}) continue;
          const T s = scl * simd::dot(hd, qi, k.value().data() + (bi * sk + j) * e + h * hd);
          row[static_cast<std::size_t>(j)] = s;
          mx = any ? std::max(mx, s) : s;
          any = true;
        }
        if (!any) continue;
        T* p = probs->data() + ((bi * heads + h) * sq + i) * sk;
        T z{0};
        for (Index j = 0; j < sk; ++j) {
          if (key_mask && (*key_mask)[bi * sk + j] == T{0}) continue;
          p[j] = std::exp(row[static_cast<std::size_t>(j)] - mx);
          z += p[j];
        }
        T* oi = out.data() + (bi * sq + i) * e + h * hd;
        for (Index j = 0; j < sk; ++j) {
          if (p[j] == T{0}) continue;
          p[j] /= z;
          simd::axpy(hd, p[j], v.value().data() + (bi * sk + j) * e + h * hd, oi);
        }
      }
    }
  }
  return make_result<T>(std::move(out), {q, k, v},
                        [q, k, v, probs, b, heads, sq, sk, e, hd, scl](const Tensor<T>& g) {
    std::vector<T> dp(static_cast<std::size_t>(sk));
    for (Index bi = 0; bi < b; ++bi) {
      for (Index h = 0; h < heads; ++h) {
        for (Index i = 0; i < sq; ++i) {
          const T* p = probs->data() + ((bi * heads + h) * sq + i) * sk;
          const T* gi = g.data() + (bi * sq + i) * e + h * hd;
          T dot_pd{0};
          for (Index j = 0; j < sk; ++j) {
            if (p[j] == T{0}) {
              dp[static_cast<std::size_t>(j)] = T{0};
              continue;
            }
            dp[static_cast<std::size_t>(j)] = simd::dot(hd, gi, v.value().data() + (bi * sk + j) * e + h * hd);
            dot_pd += p[j] * dp[static_cast<std::size_t>(j)];
            if (v.requires_grad())
              simd::axpy(hd, p[j], gi, v.grad_buffer().data() + (bi * sk + j) * e + h * hd);
          }
          const T* qi = q.value().data() + (bi * sq + i) * e + h * hd;
          for (Index j = 0; j < sk; ++j) {
            if (p[j] == T{0}) continue;
            const T ds = p[j] * (dp[static_cast<std::size_t>(j)] - dot_pd) * scl;
            if (q.requires_grad())
              simd::axpy(hd, ds, k.value().data() + (bi * sk + j) * e + h * hd,
                         q.grad_buffer().data() + (bi * sq + i) * e + h * hd);
            if (k.requires_grad())
              simd::axpy(hd, ds, qi, k.grad_buffer().data() + (bi * sk + j) * e + h * hd);
          }
        }
      }
    }
  });
}

#define TEXTCSP_INSTANTIATE_DENSE(T)                                                        \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                   \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);            \
  template Var<T> embedding<T>(const Var<T>&, const std::vector<Index>&, Index, Index);     \
  template Var<T> prepend_rows<T>(const Var<T>&, const Var<T>&);                            \
  template Var<T> masked_mean<T>(const Var<T>&, const Tensor<T>&);                          \
  template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, const Tensor<T>*);

TEXTCSP_INSTANTIATE_DENSE(float)
TEXTCSP_INSTANTIATE_DENSE(double)

}  // namespace textcsp::nn
