#include <cmath>
#include <memory>

#include "textcsp/nn/ops.hpp"
#include "textcsp/simd/kernels.hpp"

namespace textcsp::nn {
namespace {

struct ConvGeometry {
  Index cin, d, h, w;
  int k, s, p;
  Index od, oh, ow;
  Index in_volume() const { return d * h * w; }
  Index out_volume() const { return od * oh * ow; }
  Index col_rows() const { return cin * k * k * k; }
  bool pointwise() const { return k == 1 && s == 1 && p == 0; }
};

template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const Index vo = g.out_volume();
  for (Index c = 0; c < g.cin; ++c)
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          const Index row = ((c * g.k + kz) * g.k + ky) * g.k + kx;
          T* dst = col + row * vo;
          for (Index oz = 0; oz < g.od; ++oz) {
            const Index iz = oz * g.s - g.p + kz;
            for (Index oy = 0; oy < g.oh; ++oy) {
              T* drow = dst + (oz * g.oh + oy) * g.ow;
              const Index iy = oy * g.s - g.p + ky;
              if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) {
                std::fill(drow, drow + g.ow, T{0});
                continue;
              }
              const T* src = x + ((c * g.d + iz) * g.h + iy) * g.w;
              for (Index ox = 0; ox < g.ow; ++ox) {
                const Index ix = ox * g.s - g.p + kx;
                drow[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T{0};
              }
            }
          }
        }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* x) {
  const Index vo = g.out_volume();
  for (Index c = 0; c < g.cin; ++c)
    for (int kz = 0; kz < g.k; ++kz)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          const Index row = ((c * g.k + kz) * g.k + ky) * g.k + kx;
          const T* src = col + row * vo;
          for (Index oz = 0; oz < g.od; ++oz) {
            const Index iz = oz * g.s - g.p + kz;
            if (iz < 0 || iz >= g.d) continue;
            for (Index oy = 0; oy < g.oh; ++oy) {
              const Index iy = oy * g.s - g.p + ky;
              if (iy < 0 || iy >= g.h) continue;
              const T* srow = src + (oz * g.oh + oy) * g.ow;
              T* dst = x + ((c * g.d + iz) * g.h + iy) * g.w;
              for (Index ox = 0; ox < g.ow; ++ox) {
                const Index ix = ox * g.s - g.p + kx;
                if (ix >= 0 && ix < g.w) dst[ix] += srow[ox];
              }
            }
          }
        }
}

template <typename T>
std::unique_ptr<T[]> scratch(Index n) {
  return std::unique_ptr<T[]>(new T[static_cast<std::size_t>(n)]);
}

// Stride-1 "same" convolution evaluated as one GEMM per kernel tap over a
// zero-padded copy of the input. In the padded layout every tap is a constant
// flat offset, so outputs are computed over the contiguous span of padded
// indices covering all valid centres; the stray border positions are dropped.
struct PaddedGeometry {
  Index d, h, w;
  int p;
  Index dp, hp, wp;
  Index first, span;
  PaddedGeometry(Index d_, Index h_, Index w_, int p_) : d(d_), h(h_), w(w_), p(p_) {
    dp = d + 2 * p;
    hp = h + 2 * p;
    wp = w + 2 * p;
    first = centre(0, 0, 0);
    span = centre(d - 1, h - 1, w - 1) - first + 1;
  }
  Index volume() const { return dp * hp * wp; }
  Index centre(Index z, Index y, Index x) const { return ((z + p) * hp + (y + p)) * wp + (x + p); }
  Index offset(int kz, int ky, int kx) const { return ((kz - p) * hp + (ky - p)) * wp + (kx - p); }
};

template <typename T>
void pad_into(const PaddedGeometry& pg, Index channels, const T* src, T* dst) {
  std::fill(dst, dst + channels * pg.volume(), T{0});
  for (Index c = 0; c < channels; ++c)
    for (Index z = 0; z < pg.d; ++z)
      for (Index y = 0; y < pg.h; ++y)
        std::copy_n(src + ((c * pg.d + z) * pg.h + y) * pg.w, pg.w, dst + c * pg.volume() + pg.centre(z, y, 0));
}

// Copies between the dense [C, D, H, W] layout and the [C, span] centre layout.
template <typename T>
void centres_to_dense(const PaddedGeometry& pg, Index channels, const T* src, T* dst) {
  for (Index c = 0; c < channels; ++c)
    for (Index z = 0; z < pg.d; ++z)
      for (Index y = 0; y < pg.h; ++y)
        std::copy_n(src + c * pg.span + pg.centre(z, y, 0) - pg.first, pg.w, dst + ((c * pg.d + z) * pg.h + y) * pg.w);
}

template <typename T>
void dense_to_centres(const PaddedGeometry& pg, Index channels, const T* src, T* dst) {
  std::fill(dst, dst + channels * pg.span, T{0});
  for (Index c = 0; c < channels; ++c)
    for (Index z = 0; z < pg.d; ++z)
      for (Index y = 0; y < pg.h; ++y)
        std::copy_n(src + ((c * pg.d + z) * pg.h + y) * pg.w, pg.w, dst + c * pg.span + pg.centre(z, y, 0) - pg.first);
}

template <typename T>
void add_padded_interior(const PaddedGeometry& pg, Index channels, const T* src, T* dst) {
  for (Index c = 0; c < channels; ++c)
    for (Index z = 0; z < pg.d; ++z)
      for (Index y = 0; y < pg.h; ++y) {
        const T* s = src + c * pg.volume() + pg.centre(z, y, 0);
        T* o = dst + ((c * pg.d + z) * pg.h + y) * pg.w;
        for (Index x = 0; x < pg.w; ++x) o[x] += s[x];
      }
}

void require_volume(const Shape& s, const char* what) {
  if (s.size() != 5) throw ShapeError(std::string(what) + ": expected [B, C, D, H, W], got " + shape_str(s));
}

// Spatial chunk for the tap loops; sized so one chunk of every operand stays in L2.
constexpr Index kSpanChunk = 1024;

template <typename T>
Var<T> conv3d_same(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int pad) {
  const Index b = x.dim(0);
  const Index cin = x.dim(1);
  const Index cout = w.dim(0);
  const int k = 2 * pad + 1;
  const int taps = k * k * k;
  const PaddedGeometry pg(x.dim(2), x.dim(3), x.dim(4), pad);
  const Index vi = pg.d * pg.h * pg.w;

  // Per-tap weight slices, [taps][cout][cin].
  auto wtap = std::make_shared<std::vector<T>>(static_cast<std::size_t>(taps * cout * cin));
  for (Index co = 0; co < cout; ++co)
    for (Index ci = 0; ci < cin; ++ci)
      for (int t = 0; t < taps; ++t)
        (*wtap)[static_cast<std::size_t>((t * cout + co) * cin + ci)] = w.value()[(co * cin + ci) * taps + t];

  std::vector<Index> tap_offset;
  for (int kz = 0; kz < k; ++kz)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) tap_offset.push_back(pg.offset(kz, ky, kx));

  auto xpad = std::make_shared<std::vector<T>>(static_cast<std::size_t>(b * cin * pg.volume()));
  auto ycent = scratch<T>(cout * pg.span);
  Tensor<T> out(Shape{b, cout, pg.d, pg.h, pg.w});
  for (Index bi = 0; bi < b; ++bi) {
    T* xp = xpad->data() + bi * cin * pg.volume();
    pad_into(pg, cin, x.value().data() + bi * cin * vi, xp);
    for (Index c0 = 0; c0 < pg.span; c0 += kSpanChunk) {
      const Index cn = std::min(kSpanChunk, pg.span - c0);
      for (int t = 0; t < taps; ++t)
        simd::gemm_nn(cout, cn, cin, wtap->data() + t * cout * cin, cin, xp + pg.first + c0 + tap_offset[t],
                      pg.volume(), ycent.get() + c0, pg.span, t > 0);
    }
    T* ob = out.data() + bi * cout * vi;
    centres_to_dense(pg, cout, ycent.get(), ob);
    if (bias.defined())
      for (Index co = 0; co < cout; ++co) {
        const T bv = bias.value()[co];
        for (Index i = 0; i < vi; ++i) ob[co * vi + i] += bv;
      }
  }

  Var<T> bv = bias.defined() ? bias : Var<T>(Tensor<T>(Shape{0}));
  return make_result<T>(std::move(out), {x, w, bv}, [x, w, bv, wtap, xpad, pg, b, cin, cout, taps, tap_offset](const Tensor<T>& g) {
    const Index vi = pg.d * pg.h * pg.w;
    auto gcent = scratch<T>(cout * pg.span);
    std::vector<T> wt_t;
    std::vector<T> dw_t;
    std::unique_ptr<T[]> dxpad;
    if (x.requires_grad()) {
      wt_t.resize(static_cast<std::size_t>(taps * cin * cout));
      for (int t = 0; t < taps; ++t)
        simd::transpose(cout, cin, wtap->data() + t * cout * cin, wt_t.data() + t * cin * cout);
      dxpad = scratch<T>(cin * pg.volume());
    }
    if (w.requires_grad()) dw_t.assign(static_cast<std::size_t>(taps * cout * cin), T{0});
    for (Index bi = 0; bi < b; ++bi) {
      const T* gb = g.data() + bi * cout * vi;
      if (bv.requires_grad()) {
        T* gbias = bv.grad_buffer().data();
        for (Index co = 0; co < cout; ++co) {
          T s{0};
          for (Index i = 0; i < vi; ++i) s += gb[co * vi + i];
          gbias[co] += s;
        }
      }
      if (!w.requires_grad() && !x.requires_grad()) continue;
      dense_to_centres(pg, cout, gb, gcent.get());
      const T* xp = xpad->data() + bi * cin * pg.volume();
      if (x.requires_grad()) std::fill(dxpad.get(), dxpad.get() + cin * pg.volume(), T{0});
      // dw_t accumulates per tap over all chunks, [taps][cout][cin].
      for (Index c0 = 0; c0 < pg.span; c0 += kSpanChunk) {
        const Index cn = std::min(kSpanChunk, pg.span - c0);
        for (int t = 0; t < taps; ++t) {
          const Index off = pg.first + c0 + tap_offset[t];
          if (w.requires_grad())
            simd::gemm_nt(cout, cin, cn, gcent.get() + c0, pg.span, xp + off, pg.volume(),
                          dw_t.data() + t * cout * cin, cin, true);
          if (x.requires_grad())
            simd::gemm_nn(cin, cn, cout, wt_t.data() + t * cin * cout, cout, gcent.get() + c0, pg.span,
                          dxpad.get() + off, pg.volume(), true);
        }
      }
      if (x.requires_grad()) add_padded_interior(pg, cin, dxpad.get(), x.grad_buffer().data() + bi * cin * vi);
    }
    if (w.requires_grad()) {
      T* gw = w.grad_buffer().data();
      for (int t = 0; t < taps; ++t)
        for (Index co = 0; co < cout; ++co)
          for (Index ci = 0; ci < cin; ++ci)
            gw[(co * cin + ci) * taps + t] += dw_t[static_cast<std::size_t>((t * cout + co) * cin + ci)];
    }
  });
}

}  // namespace

template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta, T eps) {
  if (x.value().rank() < 2) throw ShapeError("group_norm: expected [B, C, ...]");
  const Index b = x.dim(0);
  const Index c = x.dim(1);
  if (groups <= 0 || c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.size() != c || beta.size() != c) throw ShapeError("group_norm: affine size mismatch");
  const Index spatial = x.size() / (b * c);
  const Index cg = c / groups;
  const Index n = cg * spatial;
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(b * groups));
  for (Index bi = 0; bi < b; ++bi) {
    for (Index gi = 0; gi < groups; ++gi) {
      const Index base = (bi * c + gi * cg) * spatial;
      const T* xs = x.value().data() + base;
      double m = 0.0;
      for (Index i = 0; i < n; ++i) m += static_cast<double>(xs[i]);
      m /= static_cast<double>(n);
      double v = 0.0;
      for (Index i = 0; i < n; ++i) {
        const double dlt = static_cast<double>(xs[i]) - m;
        v += dlt * dlt;
      }
      v /= static_cast<double>(n);
      const T is = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
      (*inv_std)[static_cast<std::size_t>(bi * groups + gi)] = is;
      for (Index ch = 0; ch < cg; ++ch) {
        const Index cc = gi * cg + ch;
        const T ga = gamma.value()[cc];
        const T be = beta.value()[cc];
        for (Index s = 0; s < spatial; ++s) {
          const Index idx = base + ch * spatial + s;
          const T hval = static_cast<T>((static_cast<double>(x.value()[idx]) - m)) * is;
          (*xhat)[idx] = hval;
          out[idx] = hval * ga + be;
        }
      }
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, inv_std, b, c, groups, cg, spatial, n](const Tensor<T>& g) {
    for (Index bi = 0; bi < b; ++bi) {
      for (Index gi = 0; gi < groups; ++gi) {
        const Index base = (bi * c + gi * cg) * spatial;
        double s1 = 0.0;
        double s2 = 0.0;
        for (Index ch = 0; ch < cg; ++ch) {
          const Index cc = gi * cg + ch;
          const T ga = gamma.value()[cc];
          double dga = 0.0;
          double dbe = 0.0;
          for (Index s = 0; s < spatial; ++s) {
            const Index idx = base + ch * spatial + s;
            const double gv = static_cast<double>(g[idx]);
            const double hv = static_cast<double>((*xhat)[idx]);
            dga += gv * hv;
            dbe += gv;
            s1 += gv * static_cast<double>(ga);
            s2 += gv * static_cast<double>(ga) * hv;
          }
          if (gamma.requires_grad()) gamma.grad_buffer()[cc] += static_cast<T>(dga);
          if (beta.requires_grad()) beta.grad_buffer()[cc] += static_cast<T>(dbe);
        }
        if (!x.requires_grad()) continue;
        const double is = static_cast<double>((*inv_std)[static_cast<std::size_t>(bi * groups + gi)]);
        const double invn = 1.0 / static_cast<double>(n);
        T* gx = x.grad_buffer().data();
        for (Index ch = 0; ch < cg; ++ch) {
          const double ga = static_cast<double>(gamma.value()[gi * cg + ch]);
          for (Index s = 0; s < spatial; ++s) {
            const Index idx = base + ch * spatial + s;
            const double dh = static_cast<double>(g[idx]) * ga;
            gx[idx] += static_cast<T>(is * (dh - invn * s1 - static_cast<double>((*xhat)[idx]) * invn * s2));
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad) {
  require_volume(x.shape(), "conv3d input");
  require_volume(w.shape(), "conv3d weight");
  const Index b = x.dim(0);
  const Index cout = w.dim(0);
  const int k = static_cast<int>(w.dim(2));
  if (w.dim(1) != x.dim(1) || w.dim(3) != k || w.dim(4) != k)
    throw ShapeError("conv3d: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  if (bias.defined() && bias.size() != cout) throw ShapeError("conv3d: bias size mismatch");
  if (stride < 1 || pad < 0) throw ShapeError("conv3d: invalid stride/padding");
  ConvGeometry geo{x.dim(1), x.dim(2), x.dim(3), x.dim(4), k, stride, pad, 0, 0, 0};
  geo.od = (geo.d + 2 * pad - k) / stride + 1;
  geo.oh = (geo.h + 2 * pad - k) / stride + 1;
  geo.ow = (geo.w + 2 * pad - k) / stride + 1;
  if (geo.od <= 0 || geo.oh <= 0 || geo.ow <= 0) throw ShapeError("conv3d: input smaller than kernel");
  if (stride == 1 && k > 1 && k == 2 * pad + 1) return conv3d_same(x, w, bias, pad);

  const Index vi = geo.in_volume();
  const Index vo = geo.out_volume();
  const Index kc = geo.col_rows();
  Tensor<T> out(Shape{b, cout, geo.od, geo.oh, geo.ow});
  std::unique_ptr<T[]> col;
  if (!geo.pointwise()) col = scratch<T>(kc * vo);
  for (Index bi = 0; bi < b; ++bi) {
    const T* xb = x.value().data() + bi * geo.cin * vi;
    const T* cb = xb;
    if (!geo.pointwise()) {
      im2col(geo, xb, col.get());
      cb = col.get();
    }
    T* ob = out.data() + bi * cout * vo;
    simd::gemm_nn(cout, vo, kc, w.value().data(), kc, cb, vo, ob, vo, false);
    if (bias.defined())
      for (Index co = 0; co < cout; ++co) {
        const T bv = bias.value()[co];
        T* row = ob + co * vo;
        for (Index i = 0; i < vo; ++i) row[i] += bv;
      }
  }

  Var<T> bv = bias.defined() ? bias : Var<T>(Tensor<T>(Shape{0}));
  return make_result<T>(std::move(out), {x, w, bv}, [x, w, bv, geo, b, cout](const Tensor<T>& g) {
    const Index vi = geo.in_volume();
    const Index vo = geo.out_volume();
    const Index kc = geo.col_rows();
    std::unique_ptr<T[]> col;
    std::unique_ptr<T[]> dcol;
    std::vector<T> wt;
    if (!geo.pointwise()) col = scratch<T>(kc * vo);
    if (x.requires_grad()) {
      wt.resize(static_cast<std::size_t>(kc * cout));
      simd::transpose(cout, kc, w.value().data(), wt.data());
      if (!geo.pointwise()) dcol = scratch<T>(kc * vo);
    }
    for (Index bi = 0; bi < b; ++bi) {
      const T* gb = g.data() + bi * cout * vo;
      const T* xb = x.value().data() + bi * geo.cin * vi;
      if (w.requires_grad()) {
        const T* cb = xb;
        if (!geo.pointwise()) {
          im2col(geo, xb, col.get());
          cb = col.get();
        }
        simd::gemm_nt(cout, kc, vo, gb, vo, cb, vo, w.grad_buffer().data(), kc, true);
      }
      if (bv.requires_grad()) {
        T* gbias = bv.grad_buffer().data();
        for (Index co = 0; co < cout; ++co) {
          T s{0};
          for (Index i = 0; i < vo; ++i) s += gb[co * vo + i];
          gbias[co] += s;
        }
      }
      if (x.requires_grad()) {
        T* gx = x.grad_buffer().data() + bi * geo.cin * vi;
        if (geo.pointwise()) {
          simd::gemm_nn(kc, vo, cout, wt.data(), cout, gb, vo, gx, vo, true);
        } else {
          simd::gemm_nn(kc, vo, cout, wt.data(), cout, gb, vo, dcol.get(), vo, false);
          col2im_add(geo, dcol.get(), gx);
        }
      }
    }
  });
}

template <typename T>
Var<T> conv_transpose3d_2x(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require_volume(x.shape(), "conv_transpose3d input");
  require_volume(w.shape(), "conv_transpose3d weight");
  const Index b = x.dim(0);
  const Index cin = x.dim(1);
  const Index d = x.dim(2);
  const Index h = x.dim(3);
  const Index wd = x.dim(4);
  if (w.dim(0) != cin || w.dim(2) != 2 || w.dim(3) != 2 || w.dim(4) != 2)
    throw ShapeError("conv_transpose3d: weight " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  const Index cout = w.dim(1);
  if (bias.defined() && bias.size() != cout) throw ShapeError("conv_transpose3d: bias size mismatch");
  const Index vi = d * h * wd;
  const Index m8 = cout * 8;
  const Index vo = vi * 8;

  std::vector<T> wt(static_cast<std::size_t>(m8 * cin));
  simd::transpose(cin, m8, w.value().data(), wt.data());
  auto y8 = scratch<T>(m8 * vi);
  Tensor<T> out(Shape{b, cout, 2 * d, 2 * h, 2 * wd});
  for (Index bi = 0; bi < b; ++bi) {
    simd::gemm_nn(m8, vi, cin, wt.data(), cin, x.value().data() + bi * cin * vi, vi, y8.get(), vi, false);
    T* ob = out.data() + bi * cout * vo;
    for (Index co = 0; co < cout; ++co) {
      const T bvv = bias.defined() ? bias.value()[co] : T{0};
      for (int tap = 0; tap < 8; ++tap) {
        const int a = tap >> 2, bb = (tap >> 1) & 1, cc = tap & 1;
        const T* src = y8.get() + (co * 8 + tap) * vi;
        for (Index z = 0; z < d; ++z)
          for (Index y = 0; y < h; ++y) {
            T* dst = ob + ((co * 2 * d + 2 * z + a) * 2 * h + 2 * y + bb) * 2 * wd + cc;
            const T* s = src + (z * h + y) * wd;
            for (Index xx = 0; xx < wd; ++xx) dst[2 * xx] = s[xx] + bvv;
          }
      }
    }
  }

  Var<T> bv = bias.defined() ? bias : Var<T>(Tensor<T>(Shape{0}));
  return make_result<T>(std::move(out), {x, w, bv},
                        [x, w, bv, b, cin, cout, d, h, wd, vi, vo, m8](const Tensor<T>& g) {
    auto g8 = scratch<T>(m8 * vi);
    for (Index bi = 0; bi < b; ++bi) {
      const T* gb = g.data() + bi * cout * vo;
      for (Index co = 0; co < cout; ++co)
        for (int tap = 0; tap < 8; ++tap) {
          const int a = tap >> 2, bb = (tap >> 1) & 1, cc = tap & 1;
          T* dst = g8.get() + (co * 8 + tap) * vi;
          for (Index z = 0; z < d; ++z)
            for (Index y = 0; y < h; ++y) {
              const T* src = gb + ((co * 2 * d + 2 * z + a) * 2 * h + 2 * y + bb) * 2 * wd + cc;
              T* drow = dst + (z * h + y) * wd;
              for (Index xx = 0; xx < wd; ++xx) drow[xx] = src[2 * xx];
            }
        }
      if (bv.requires_grad()) {
        T* gbias = bv.grad_buffer().data();
        for (Index co = 0; co < cout; ++co) {
          T s{0};
          for (Index i = 0; i < 8 * vi; ++i) s += g8[static_cast<std::size_t>(co * 8 * vi + i)];
          gbias[co] += s;
        }
      }
      const T* xb = x.value().data() + bi * cin * vi;
      if (w.requires_grad())
        simd::gemm_nt(cin, m8, vi, xb, vi, g8.get(), vi, w.grad_buffer().data(), m8, true);
      if (x.requires_grad())
        simd::gemm_nn(cin, vi, m8, w.value().data(), m8, g8.get(), vi,
                      x.grad_buffer().data() + bi * cin * vi, vi, true);
    }
  });
}

template <typename T>
Var<T> channel_gate(const Var<T>& x, const Var<T>& g) {
  if (x.value().rank() < 2 || g.value().rank() != 2 || g.dim(0) != x.dim(0) || g.dim(1) != x.dim(1))
    throw ShapeError("channel_gate: features " + shape_str(x.shape()) + " vs gate " + shape_str(g.shape()));
  const Index bc = g.size();
  const Index spatial = x.size() / bc;
  Tensor<T> out(x.shape());
  for (Index i = 0; i < bc; ++i) {
    const T gv = g.value()[i];
    const T* src = x.value().data() + i * spatial;
    T* dst = out.data() + i * spatial;
    for (Index s = 0; s < spatial; ++s) dst[s] = src[s] * gv;
  }
  return make_result<T>(std::move(out), {x, g}, [x, g, bc, spatial](const Tensor<T>& grad) {
    for (Index i = 0; i < bc; ++i) {
      const T* gr = grad.data() + i * spatial;
      if (x.requires_grad()) simd::axpy(spatial, g.value()[i], gr, x.grad_buffer().data() + i * spatial);
      if (g.requires_grad()) g.grad_buffer()[i] += simd::dot(spatial, gr, x.value().data() + i * spatial);
    }
  });
}

template <typename T>
Var<T> spatial_gate(const Var<T>& x, const Var<T>& a) {
  if (x.value().rank() < 2 || a.value().rank() != x.value().rank() || a.dim(0) != x.dim(0) || a.dim(1) != 1)
    throw ShapeError("spatial_gate: features " + shape_str(x.shape()) + " vs gate " + shape_str(a.shape()));
  for (int i = 2; i < x.value().rank(); ++i)
    if (a.dim(i) != x.dim(i))
      throw ShapeError("spatial_gate: spatial shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(a.shape()));
  const Index b = x.dim(0);
  const Index c = x.dim(1);
  const Index spatial = a.size() / b;
  Tensor<T> out(x.shape());
  for (Index bi = 0; bi < b; ++bi) {
    const T* av = a.value().data() + bi * spatial;
    for (Index ci = 0; ci < c; ++ci) {
      const T* src = x.value().data() + (bi * c + ci) * spatial;
      T* dst = out.data() + (bi * c + ci) * spatial;
      for (Index s = 0; s < spatial; ++s) dst[s] = src[s] * (T{1} + av[s]);
    }
  }
  return make_result<T>(std::move(out), {x, a}, [x, a, b, c, spatial](const Tensor<T>& g) {
    for (Index bi = 0; bi < b; ++bi) {
      const T* av = a.value().data() + bi * spatial;
      for (Index ci = 0; ci < c; ++ci) {
        const T* gr = g.data() + (bi * c + ci) * spatial;
        if (x.requires_grad()) {
          T* gx = x.grad_buffer().data() + (bi * c + ci) * spatial;
          for (Index s = 0; s < spatial; ++s) gx[s] += gr[s] * (T{1} + av[s]);
        }
        if (a.requires_grad()) {
          const T* xv = x.value().data() + (bi * c + ci) * spatial;
          T* ga = a.grad_buffer().data() + bi * spatial;
          for (Index s = 0; s < spatial; ++s) ga[s] += gr[s] * xv[s];
        }
      }
    }
  });
}

template <typename T>
Var<T> channels_to_tokens(const Var<T>& x) {
  if (x.value().rank() < 3) throw ShapeError("channels_to_tokens: expected [B, C, spatial...]");
  const Index b = x.dim(0);
  const Index c = x.dim(1);
  const Index s = x.size() / (b * c);
  Tensor<T> out(Shape{b, s, c});
  for (Index bi = 0; bi < b; ++bi)
    simd::transpose(c, s, x.value().data() + bi * c * s, out.data() + bi * c * s);
  return make_result<T>(std::move(out), {x}, [x, b, c, s](const Tensor<T>& g) {
    std::vector<T> tmp(static_cast<std::size_t>(c * s));
    for (Index bi = 0; bi < b; ++bi) {
      simd::transpose(s, c, g.data() + bi * c * s, tmp.data());
      simd::axpy(c * s, T{1}, tmp.data(), x.grad_buffer().data() + bi * c * s);
    }
  });
}

template <typename T>
Var<T> tokens_to_channels(const Var<T>& x, const Shape& spatial) {
  if (x.value().rank() != 3 || shape_numel(spatial) != x.dim(1))
    throw ShapeError("tokens_to_channels: " + shape_str(x.shape()) + " vs spatial " + shape_str(spatial));
  const Index b = x.dim(0);
  const Index s = x.dim(1);
  const Index c = x.dim(2);
  Shape out_shape{b, c};
  out_shape.insert(out_shape.end(), spatial.begin(), spatial.end());
  Tensor<T> out(out_shape);
  for (Index bi = 0; bi < b; ++bi)
    simd::transpose(s, c, x.value().data() + bi * c * s, out.data() + bi * c * s);
  return make_result<T>(std::move(out), {x}, [x, b, c, s](const Tensor<T>& g) {
    std::vector<T> tmp(static_cast<std::size_t>(c * s));
    for (Index bi = 0; bi < b; ++bi) {
      simd::transpose(c, s, g.data() + bi * c * s, tmp.data());
      simd::axpy(c * s, T{1}, tmp.data(), x.grad_buffer().data() + bi * c * s);
    }
  });
}

#define TEXTCSP_INSTANTIATE_VOLUME(T)                                                     \
  template Var<T> group_norm<T>(const Var<T>&, int, const Var<T>&, const Var<T>&, T);     \
  template Var<T> conv3d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);       \
  template Var<T> conv_transpose3d_2x<T>(const Var<T>&, const Var<T>&, const Var<T>&);    \
  template Var<T> channel_gate<T>(const Var<T>&, const Var<T>&);                          \
  template Var<T> spatial_gate<T>(const Var<T>&, const Var<T>&);                          \
  template Var<T> channels_to_tokens<T>(const Var<T>&);                                   \
  template Var<T> tokens_to_channels<T>(const Var<T>&, const Shape&);

TEXTCSP_INSTANTIATE_VOLUME(float)
TEXTCSP_INSTANTIATE_VOLUME(double)

}  // namespace textcsp::nn
