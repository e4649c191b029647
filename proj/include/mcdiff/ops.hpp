#pragma once

// Differentiable primitives over Var. Batched layouts follow the usual
// conventions: images are [B, C, H, W] and token sequences are [B, L, d];
// unbatched [C, H, W] / [L, d] inputs are accepted where noted.

#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mcdiff/autograd.hpp"
#include "mcdiff/blas.hpp"

namespace mcdiff {

namespace detail {

template <typename T>
Tape<T>& tape_of(const Var<T>& a) {
  if (!a.valid()) throw Error("op on an unbound Var");
  return *a.tape();
}

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw Error("op mixes vars from different tapes");
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Accumulate g (size n*m) into dst (size m) summing the n leading repeats.
template <typename T>
void reduce_repeats(const T* g, T* dst, std::size_t reps, std::size_t m) {
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < m; ++i) dst[i] += g[r * m + i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

// a + sign*b where b's shape is a trailing suffix of a's (or vice versa).
template <typename T>
Var<T> add_scaled(Var<T> a, Var<T> b, T sign, std::string_view name) {
  detail::same_tape(a, b);
  Tape<T>& tp = detail::tape_of(a);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool b_small = detail::is_suffix(sb, sa);
  if (!b_small && !detail::is_suffix(sa, sb))
    throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(sa) + " and " +
                     shape_str(sb));
  const Tensor<T>& big = b_small ? a.value() : b.value();
  const Tensor<T>& small = b_small ? b.value() : a.value();
  const std::size_t m = small.size(), reps = big.size() / m;
  Tensor<T> out(big.shape());
  const T sa_ = b_small ? T(1) : sign;  // coefficient on big
  const T sb_ = b_small ? sign : T(1);  // coefficient on small
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < m; ++i) out[r * m + i] = sa_ * big[r * m + i] + sb_ * small[i];
  return tp.record(name, std::move(out), {a, b}, [a, b, b_small, sign, reps, m](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const Var<T>& big_v = b_small ? a : b;
    const Var<T>& small_v = b_small ? b : a;
    const T cb = b_small ? T(1) : sign, cs = b_small ? sign : T(1);
    if (T* gb = t.grad_buffer(big_v))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += cb * g[i];
    if (T* gs = t.grad_buffer(small_v)) {
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < m; ++i) gs[i] += cs * g[r * m + i];
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return add_scaled(a, b, T(1), "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return add_scaled(a, b, T(-1), "sub");
}

// Elementwise product with trailing broadcast.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  Tape<T>& tp = detail::tape_of(a);
  bool b_small = detail::is_suffix(b.shape(), a.shape());
  if (!b_small && !detail::is_suffix(a.shape(), b.shape()))
    throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  Var<T> big_v = b_small ? a : b, small_v = b_small ? b : a;
  const Tensor<T>& big = big_v.value();
  const Tensor<T>& small = small_v.value();
  const std::size_t m = small.size(), reps = big.size() / m;
  Tensor<T> out(big.shape());
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < m; ++i) out[r * m + i] = big[r * m + i] * small[i];
  return tp.record("mul", std::move(out), {a, b}, [big_v, small_v, reps, m](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& big = big_v.value();
    const Tensor<T>& small = small_v.value();
    if (T* gb = t.grad_buffer(big_v))
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < m; ++i) gb[r * m + i] += g[r * m + i] * small[i];
    if (T* gs = t.grad_buffer(small_v))
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < m; ++i) gs[i] += g[r * m + i] * big[r * m + i];
  });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  Tape<T>& tp = detail::tape_of(a);
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= c;
  return tp.record("scale", std::move(out), {a}, [a, c](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    if (T* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

template <typename T>
Var<T> silu(Var<T> a) {
  Tape<T>& tp = detail::tape_of(a);
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / (T(1) + std::exp(-x[i]));
  return tp.record("silu", std::move(out), {a}, [a](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& x = a.value();
    if (T* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-x[i]));
        ga[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

inline constexpr double kNormEps = 1e-5;

// Normalizes over the last axis, then applies gamma/beta of shape [d].
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta) {
  Tape<T>& tp = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  const std::size_t d = xv.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    throw ShapeError("layer_norm: affine params must be [" + std::to_string(d) + "]");
  const std::size_t rows = xv.size() / d;
  Tensor<T> out(xv.shape());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &xv[r * d];
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= T(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + T(kNormEps));
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (xr[i] - mean) * rs;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = h * gv[i] + bv[i];
    }
  }
  return tp.record("layer_norm", std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat, rstd, rows, d](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& gv = gamma.value();
    T* gx = t.grad_buffer(x);
    T* gg = t.grad_buffer(gamma);
    T* gb = t.grad_buffer(beta);
    std::vector<T> dxh(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = &g[r * d];
      const T* hr = &(*xhat)[r * d];
      T s1 = 0, s2 = 0;
      for (std::size_t i = 0; i < d; ++i) {
        if (gg) gg[i] += gr[i] * hr[i];
        if (gb) gb[i] += gr[i];
        dxh[i] = gr[i] * gv[i];
        s1 += dxh[i];
        s2 += dxh[i] * hr[i];
      }
      if (gx) {
        const T rs = (*rstd)[r] / T(d);
        for (std::size_t i = 0; i < d; ++i)
          gx[r * d + i] += rs * (T(d) * dxh[i] - s1 - hr[i] * s2);
      }
    }
  });
}

// x: [B, C, ...]; statistics over (C/groups channels x spatial) per sample.
template <typename T>
Var<T> group_norm(Var<T> x, std::size_t groups, Var<T> gamma, Var<T> beta) {
  Tape<T>& tp = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("group_norm: need [B, C, ...]");
  const std::size_t B = xv.dim(0), C = xv.dim(1);
  if (groups == 0 || C % groups) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    throw ShapeError("group_norm: affine params must be [C]");
  const std::size_t S = xv.size() / (B * C), cpg = C / groups, n = cpg * S;
  Tensor<T> out(xv.shape());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(B * groups);
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (b * C + gi * cpg) * S;
      T mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += xv[base + i];
      mean /= T(n);
      T var = 0;
      for (std::size_t i = 0; i < n; ++i) var += (xv[base + i] - mean) * (xv[base + i] - mean);
      var /= T(n);
      const T rs = T(1) / std::sqrt(var + T(kNormEps));
      (*rstd)[b * groups + gi] = rs;
      for (std::size_t c = 0; c < cpg; ++c) {
        const std::size_t ch = gi * cpg + c;
        for (std::size_t s = 0; s < S; ++s) {
          const std::size_t idx = base + c * S + s;
          const T h = (xv[idx] - mean) * rs;
          (*xhat)[idx] = h;
          out[idx] = h * gv[ch] + bv[ch];
        }
      }
    }
  return tp.record("group_norm", std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat, rstd, B, C, S, groups, cpg, n](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& gv = gamma.value();
    T* gx = t.grad_buffer(x);
    T* gg = t.grad_buffer(gamma);
    T* gb = t.grad_buffer(beta);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t base = (b * C + gi * cpg) * S;
        T s1 = 0, s2 = 0;
        for (std::size_t c = 0; c < cpg; ++c) {
          const std::size_t ch = gi * cpg + c;
          for (std::size_t s = 0; s < S; ++s) {
            const std::size_t idx = base + c * S + s;
            const T h = (*xhat)[idx];
            if (gg) gg[ch] += g[idx] * h;
            if (gb) gb[ch] += g[idx];
            const T dh = g[idx] * gv[ch];
            s1 += dh;
            s2 += dh * h;
          }
        }
        if (!gx) continue;
        const T rs = (*rstd)[b * groups + gi] / T(n);
        for (std::size_t c = 0; c < cpg; ++c) {
          const std::size_t ch = gi * cpg + c;
          for (std::size_t s = 0; s < S; ++s) {
            const std::size_t idx = base + c * S + s;
            gx[idx] += rs * (T(n) * g[idx] * gv[ch] - s1 - (*xhat)[idx] * s2);
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  Tape<T>& tp = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank()) throw ShapeError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = xv.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xv[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      T s = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= s;
    }
  return tp.record("softmax", std::move(out), {x}, [x, outer, inner, len](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    const Tensor<T>& y = t.value(Var<T>(&t, self));
    T* gx = t.grad_buffer(x);
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = 0;
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k)
          gx[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
      }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  Tape<T>& tp = detail::tape_of(a);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                     shape_str(bv.shape()));
  const int m = int(av.dim(0)), k = int(av.dim(1)), n = int(bv.dim(1));
  Tensor<T> out(Shape{av.dim(0), bv.dim(1)});
  blas::gemm<T>(false, false, m, n, k, T(1), av.data().data(), k, bv.data().data(), n, T(0),
                out.data().data(), n);
  return tp.record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, std::uint32_t self) {
    const T* g = t.grad_of(self).data().data();
    if (T* ga = t.grad_buffer(a))  // dA = G B^T
      blas::gemm<T>(false, true, m, k, n, T(1), g, n, b.value().data().data(), n, T(1), ga, k);
    if (T* gb = t.grad_buffer(b))  // dB = A^T G
      blas::gemm<T>(true, false, k, n, m, T(1), a.value().data().data(), k, g, n, T(1), gb, n);
  });
}

// x: [..., in], w: [in, out], bias: [out] (optional, pass invalid Var to skip).
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias = Var<T>()) {
  detail::same_tape(x, w);
  Tape<T>& tp = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  if (wv.rank() != 2 || xv.shape().back() != wv.dim(0))
    throw ShapeError("linear: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
  const bool has_bias = bias.valid();
  if (has_bias && bias.shape() != Shape{wv.dim(1)}) throw ShapeError("linear: bias extent");
  const int in = int(wv.dim(0)), outd = int(wv.dim(1));
  const int rows = int(xv.size() / in);
  Shape os = xv.shape();
  os.back() = wv.dim(1);
  Tensor<T> out(os);
  if (has_bias) {
    const Tensor<T>& bv = bias.value();
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < outd; ++j) out[r * outd + j] = bv[j];
  }
  blas::gemm<T>(false, false, rows, outd, in, T(1), xv.data().data(), in, wv.data().data(), outd,
                T(has_bias ? 1 : 0), out.data().data(), outd);
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return tp.record("linear", std::move(out), inputs,
                   [x, w, bias, has_bias, rows, in, outd](Tape<T>& t, std::uint32_t self) {
    const T* g = t.grad_of(self).data().data();
    if (T* gx = t.grad_buffer(x))
      blas::gemm<T>(false, true, rows, in, outd, T(1), g, outd, w.value().data().data(), outd, T(1), gx, in);
    if (T* gw = t.grad_buffer(w))
      blas::gemm<T>(true, false, in, outd, rows, T(1), x.value().data().data(), in, g, outd, T(1), gw, outd);
    if (has_bias)
      if (T* gb = t.grad_buffer(bias))
        for (int r = 0; r < rows; ++r)
          for (int j = 0; j < outd; ++j) gb[j] += g[r * outd + j];
  });
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip)
// ---------------------------------------------------------------------------

struct Conv2dGeometry {
  std::size_t batch, c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out;
};

inline Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& w, std::size_t stride,
                                      std::size_t pad) {
  if (x.size() != 4 && x.size() != 3) throw ShapeError("conv2d: input must be [B,C,H,W] or [C,H,W]");
  if (w.size() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin,kh,kw]");
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t off = x.size() == 4 ? 1 : 0;
  Conv2dGeometry g{off ? x[0] : 1, x[off], x[off + 1], x[off + 2], w[0], w[2], w[3], stride, pad, 0, 0};
  if (w[1] != g.c_in)
    throw ShapeError("conv2d: weight expects " + std::to_string(w[1]) + " input channels, got " +
                     std::to_string(g.c_in));
  const std::size_t ph = g.h + 2 * pad, pw = g.w + 2 * pad;
  if (ph < g.kh || pw < g.kw) throw ShapeError("conv2d: kernel larger than padded input");
  if ((ph - g.kh) % stride || (pw - g.kw) % stride)
    throw ShapeError("conv2d: non-integral output extent for input " + shape_str(x) + ", kernel " +
                     std::to_string(g.kh) + "x" + std::to_string(g.kw) + ", stride " +
                     std::to_string(stride) + ", padding " + std::to_string(pad));
  g.h_out = (ph - g.kh) / stride + 1;
  g.w_out = (pw - g.kw) / stride + 1;
  return g;
}

namespace detail {

inline constexpr std::size_t kConvChunk = 32;

// Output columns [lo, hi) whose input column ox*stride + j - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_cols(const Conv2dGeometry& g, std::size_t j) {
  std::size_t lo = 0;
  while (lo < g.w_out && long(lo * g.stride + j) < long(g.pad)) ++lo;
  std::size_t hi = lo;
  while (hi < g.w_out && long(hi * g.stride + j) - long(g.pad) < long(g.w)) ++hi;
  return {lo, hi};
}

// col[K, nb*P] for samples [b0, b0+nb).
template <typename T>
void im2col(const T* x, const Conv2dGeometry& g, std::size_t b0, std::size_t nb, T* col) {
  const std::size_t P = g.h_out * g.w_out, ld = nb * P;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * ld;
        const auto [lo, hi] = valid_cols(g, j);
        for (std::size_t b = 0; b < nb; ++b) {
          const T* xc = x + ((b0 + b) * g.c_in + c) * g.h * g.w;
          T* dst = row + b * P;
          for (std::size_t oy = 0; oy < g.h_out; ++oy) {
            const long iy = long(oy * g.stride + i) - long(g.pad);
            T* d = dst + oy * g.w_out;
            if (iy < 0 || iy >= long(g.h)) {
              std::fill(d, d + g.w_out, T(0));
              continue;
            }
            const T* src = xc + iy * long(g.w) + long(j) - long(g.pad);
            std::fill(d, d + lo, T(0));
            if (g.stride == 1) {
              std::copy(src + lo, src + hi, d + lo);
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) d[ox] = src[ox * g.stride];
            }
            std::fill(d + hi, d + g.w_out, T(0));
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const Conv2dGeometry& g, std::size_t b0, std::size_t nb, T* dx) {
  const std::size_t P = g.h_out * g.w_out, ld = nb * P;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * ld;
        const auto [lo, hi] = valid_cols(g, j);
        for (std::size_t b = 0; b < nb; ++b) {
          T* xc = dx + ((b0 + b) * g.c_in + c) * g.h * g.w;
          const T* srcb = row + b * P;
          for (std::size_t oy = 0; oy < g.h_out; ++oy) {
            const long iy = long(oy * g.stride + i) - long(g.pad);
            if (iy < 0 || iy >= long(g.h)) continue;
            const T* s = srcb + oy * g.w_out;
            T* d = xc + iy * long(g.w) + long(j) - long(g.pad);
            for (std::size_t ox = lo; ox < hi; ++ox) d[ox * g.stride] += s[ox];
          }
        }
      }
}

}  // namespace detail

// x: [B, Cin, H, W] (or [Cin, H, W]); w: [Cout, Cin, kh, kw]; bias: [Cout] or unbound.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, std::size_t stride, std::size_t padding) {
  detail::same_tape(x, w);
  Tape<T>& tp = detail::tape_of(x);
  const Conv2dGeometry g = conv2d_geometry(x.shape(), w.shape(), stride, padding);
  const bool has_bias = bias.valid();
  if (has_bias && bias.shape() != Shape{g.c_out}) throw ShapeError("conv2d: bias extent");
  const std::size_t P = g.h_out * g.w_out, K = g.c_in * g.kh * g.kw;
  Shape os = x.shape().size() == 4 ? Shape{g.batch, g.c_out, g.h_out, g.w_out}
                                   : Shape{g.c_out, g.h_out, g.w_out};
  Tensor<T> out(os);
  const T* xd = x.value().data().data();
  const T* wd = w.value().data().data();
  const std::size_t chunk = std::min(g.batch, detail::kConvChunk);
  // Chunk b0 keeps its columns at offset K * b0 * P; cached for the weight
  // gradient when w is tracked.
  auto cols = std::make_shared<std::vector<T>>();
  const bool cache = w.requires_grad();
  std::vector<T> tmp(g.c_out * chunk * P), scratch(cache ? 0 : K * chunk * P);
  if (cache) cols->resize(K * g.batch * P);
  for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
    const std::size_t nb = std::min(chunk, g.batch - b0), N = nb * P;
    T* col = cache ? cols->data() + K * b0 * P : scratch.data();
    detail::im2col(xd, g, b0, nb, col);
    blas::gemm<T>(false, false, int(g.c_out), int(N), int(K), T(1), wd, int(K), col, int(N),
                  T(0), tmp.data(), int(N));
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t o = 0; o < g.c_out; ++o) {
        T* dst = &out[((b0 + b) * g.c_out + o) * P];
        const T* src = &tmp[o * N + b * P];
        const T bo = has_bias ? bias.value()[o] : T(0);
        for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + bo;
      }
  }
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return tp.record("conv2d", std::move(out), inputs,
                   [x, w, bias, has_bias, g, P, K, chunk, cols](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& gout = t.grad_of(self);
    T* gx = t.grad_buffer(x);
    T* gw = t.grad_buffer(w);
    T* gb = has_bias ? t.grad_buffer(bias) : nullptr;
    const T* wd = w.value().data().data();
    std::vector<T> col(gx ? K * chunk * P : 0), gt(g.c_out * chunk * P);
    for (std::size_t b0 = 0; b0 < g.batch; b0 += chunk) {
      const std::size_t nb = std::min(chunk, g.batch - b0), N = nb * P;
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t o = 0; o < g.c_out; ++o) {
          const T* src = &gout[((b0 + b) * g.c_out + o) * P];
          std::copy(src, src + P, &gt[o * N + b * P]);
          if (gb)
            for (std::size_t p = 0; p < P; ++p) gb[o] += src[p];
        }
      if (gw)
        blas::gemm<T>(false, true, int(g.c_out), int(K), int(N), T(1), gt.data(), int(N),
                      cols->data() + K * b0 * P, int(N), T(1), gw, int(K));
      if (gx) {
        blas::gemm<T>(true, false, int(K), int(N), int(g.c_out), T(1), wd, int(K), gt.data(), int(N),
                      T(0), col.data(), int(N));
        detail::col2im_add(col.data(), g, b0, nb, gx);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Multi-head scaled dot-product attention without projections.
// q: [B, Lq, d]; k, v: [B or 1, Lk, d] (2-D inputs are treated as B = 1).
// Heads split d into contiguous slices; outputs are concatenated back to d.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t n_heads) {
  detail::same_tape(q, k);
  detail::same_tape(q, v);
  Tape<T>& tp = detail::tape_of(q);
  auto dims3 = [](const Shape& s, const char* which) {
    if (s.size() == 2) return std::array<std::size_t, 3>{1, s[0], s[1]};
    if (s.size() == 3) return std::array<std::size_t, 3>{s[0], s[1], s[2]};
    throw ShapeError(std::string("attention: ") + which + " must be [L,d] or [B,L,d]");
  };
  const auto [bq, lq, d] = dims3(q.shape(), "q");
  const auto [bk, lk, dk] = dims3(k.shape(), "k");
  const auto [bv, lv, dv] = dims3(v.shape(), "v");
  if (dk != d || dv != d || lv != lk || bk != bv)
    throw ShapeError("attention: q/k/v extents disagree");
  if (bk != 1 && bk != bq) throw ShapeError("attention: k/v batch must be 1 or match q");
  if (n_heads == 0 || d % n_heads)
    throw ShapeError("attention: d=" + std::to_string(d) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  const std::size_t dh = d / n_heads;
  const T sc = T(1) / std::sqrt(T(dh));
  auto probs = std::make_shared<std::vector<T>>(bq * n_heads * lq * lk);
  Tensor<T> out(q.shape());
  const T* qd = q.value().data().data();
  const T* kd = k.value().data().data();
  const T* vd = v.value().data().data();
  for (std::size_t b = 0; b < bq; ++b) {
    const std::size_t kb = bk == 1 ? 0 : b;
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* p = &(*probs)[(b * n_heads + h) * lq * lk];
      blas::gemm<T>(false, true, int(lq), int(lk), int(dh), sc, qd + b * lq * d + h * dh, int(d),
                    kd + kb * lk * d + h * dh, int(d), T(0), p, int(lk));
      for (std::size_t i = 0; i < lq; ++i) {
        T* row = p + i * lk;
        const T mx = *std::max_element(row, row + lk);
        T s = 0;
        for (std::size_t j = 0; j < lk; ++j) s += (row[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < lk; ++j) row[j] /= s;
      }
      blas::gemm<T>(false, false, int(lq), int(dh), int(lk), T(1), p, int(lk), vd + kb * lk * d + h * dh,
                    int(d), T(0), out.data().data() + b * lq * d + h * dh, int(d));
    }
  }
  return tp.record("attention", std::move(out), {q, k, v},
                   [q, k, v, probs, bq, bk, lq, lk, d, dh, n_heads, sc](Tape<T>& t, std::uint32_t self) {
    const T* g = t.grad_of(self).data().data();
    T* gq = t.grad_buffer(q);
    T* gk = t.grad_buffer(k);
    T* gv = t.grad_buffer(v);
    const T* qd = q.value().data().data();
    const T* kd = k.value().data().data();
    const T* vd = v.value().data().data();
    std::vector<T> dp(lq * lk);
    for (std::size_t b = 0; b < bq; ++b) {
      const std::size_t kb = bk == 1 ? 0 : b;
      for (std::size_t h = 0; h < n_heads; ++h) {
        const T* p = &(*probs)[(b * n_heads + h) * lq * lk];
        const T* gh = g + b * lq * d + h * dh;
        if (gv)  // dV += P^T dO
          blas::gemm<T>(true, false, int(lk), int(dh), int(lq), T(1), p, int(lk), gh, int(d), T(1),
                        gv + kb * lk * d + h * dh, int(d));
        if (!gq && !gk) continue;
        // dP = dO V^T, then dS = P * (dP - rowdot(dP, P)).
        blas::gemm<T>(false, true, int(lq), int(lk), int(dh), T(1), gh, int(d), vd + kb * lk * d + h * dh,
                      int(d), T(0), dp.data(), int(lk));
        for (std::size_t i = 0; i < lq; ++i) {
          T dot = 0;
          for (std::size_t j = 0; j < lk; ++j) dot += dp[i * lk + j] * p[i * lk + j];
          for (std::size_t j = 0; j < lk; ++j) dp[i * lk + j] = p[i * lk + j] * (dp[i * lk + j] - dot);
        }
        if (gq)
          blas::gemm<T>(false, false, int(lq), int(dh), int(lk), sc, dp.data(), int(lk),
                        kd + kb * lk * d + h * dh, int(d), T(1), gq + b * lq * d + h * dh, int(d));
        if (gk)
          blas::gemm<T>(true, false, int(lk), int(dh), int(lq), sc, dp.data(), int(lk),
                        qd + b * lq * d + h * dh, int(d), T(1), gk + kb * lk * d + h * dh, int(d));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> x, Shape s) {
  Tape<T>& tp = detail::tape_of(x);
  if (shape_numel(s) != x.value().size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(s));
  return tp.record("reshape", Tensor<T>(std::move(s), x.value().vec()), {x}, [x](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    if (T* gx = t.grad_buffer(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// out.dim(i) = x.dim(perm[i]).
template <typename T>
Var<T> permute(Var<T> x, std::vector<std::size_t> perm) {
  Tape<T>& tp = detail::tape_of(x);
  const Tensor<T>& xv = x.value();
  const std::size_t r = xv.rank();
  if (perm.size() != r) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: not a permutation");
    seen[p] = true;
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = xv.dim(perm[i]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * xv.dim(i + 1);
  // map[out_flat] = in_flat
  auto map = std::make_shared<std::vector<std::size_t>>(xv.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < xv.size(); ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_stride[perm[i]];
    (*map)[o] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < os[i]) break;
      idx[i] = 0;
    }
  }
  Tensor<T> out(os);
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[(*map)[o]];
  return tp.record("permute", std::move(out), {x}, [x, map](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    if (T* gx = t.grad_buffer(x))
      for (std::size_t o = 0; o < g.size(); ++o) gx[(*map)[o]] += g[o];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Tape<T>& tp = detail::tape_of(xs[0]);
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  Shape os = s0;
  os[axis] = 0;
  for (const auto& x : xs) {
    detail::same_tape(xs[0], x);
    const Shape& s = x.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw ShapeError("concat: extents " + shape_str(s) + " vs " + shape_str(s0));
    os[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
  for (std::size_t i = axis + 1; i < os.size(); ++i) inner *= os[i];
  Tensor<T> out(os);
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t wdt = x.shape()[axis] * inner;
    widths.push_back(wdt);
    const Tensor<T>& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(&xv[o * wdt], wdt, &out[o * os[axis] * inner + off]);
    off += wdt;
  }
  const std::size_t row = os[axis] * inner;
  return tp.record("concat", std::move(out), xs, [xs, widths, outer, row](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (T* gx = t.grad_buffer(xs[k]))
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[k]; ++i) gx[o * widths[k] + i] += g[o * row + off + i];
      off += widths[k];
    }
  });
}

// Nearest-neighbour 2x upsampling of [B, C, H, W].
template <typename T>
Var<T> upsample2x(Var<T> x) {
  Tape<T>& tp = detail::tape_of(x);
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("upsample2x: need [B,C,H,W]");
  const std::size_t planes = s[0] * s[1], H = s[2], W = s[3];
  Tensor<T> out(Shape{s[0], s[1], 2 * H, 2 * W});
  const Tensor<T>& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t xx = 0; xx < 2 * W; ++xx)
        out[(p * 2 * H + y) * 2 * W + xx] = xv[(p * H + y / 2) * W + xx / 2];
  return tp.record("upsample2x", std::move(out), {x}, [x, planes, H, W](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    if (T* gx = t.grad_buffer(x))
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < 2 * H; ++y)
          for (std::size_t xx = 0; xx < 2 * W; ++xx)
            gx[(p * H + y / 2) * W + xx / 2] += g[(p * 2 * H + y) * 2 * W + xx];
  });
}

// x: [B, C, ...] plus per-sample, per-channel offsets v: [B, C].
template <typename T>
Var<T> add_channelwise(Var<T> x, Var<T> v) {
  detail::same_tape(x, v);
  Tape<T>& tp = detail::tape_of(x);
  const Shape& s = x.shape();
  if (s.size() < 2 || v.shape() != Shape{s[0], s[1]})
    throw ShapeError("add_channelwise: " + shape_str(s) + " with " + shape_str(v.shape()));
  const std::size_t BC = s[0] * s[1], S = x.value().size() / BC;
  Tensor<T> out = x.value();
  const Tensor<T>& vv = v.value();
  for (std::size_t i = 0; i < BC; ++i)
    for (std::size_t j = 0; j < S; ++j) out[i * S + j] += vv[i];
  return tp.record("add_channelwise", std::move(out), {x, v}, [x, v, BC, S](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    if (T* gx = t.grad_buffer(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (T* gv = t.grad_buffer(v))
      for (std::size_t i = 0; i < BC; ++i)
        for (std::size_t j = 0; j < S; ++j) gv[i] += g[i * S + j];
  });
}

// out[b] = use_fallback[b] ? fallback : x[b]; x: [B, ...], fallback: x.shape minus batch.
template <typename T>
Var<T> select_batch(Var<T> x, Var<T> fallback, const std::vector<bool>& use_fallback) {
  detail::same_tape(x, fallback);
  Tape<T>& tp = detail::tape_of(x);
  const Shape& s = x.shape();
  Shape inner_shape(s.begin() + 1, s.end());
  if (s.empty() || fallback.shape() != inner_shape || use_fallback.size() != s[0])
    throw ShapeError("select_batch: " + shape_str(s) + " with fallback " + shape_str(fallback.shape()));
  const std::size_t B = s[0], m = fallback.value().size();
  Tensor<T> out = x.value();
  for (std::size_t b = 0; b < B; ++b)
    if (use_fallback[b]) std::copy_n(fallback.value().data().data(), m, &out[b * m]);
  return tp.record("select_batch", std::move(out), {x, fallback},
                   [x, fallback, use_fallback, B, m](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    T* gx = t.grad_buffer(x);
    T* gf = t.grad_buffer(fallback);
    for (std::size_t b = 0; b < B; ++b) {
      T* dst = use_fallback[b] ? gf : (gx ? gx + b * m : nullptr);
      if (!dst) continue;
      for (std::size_t i = 0; i < m; ++i) dst[i] += g[b * m + i];
    }
  });
}

// Stack an unbatched tensor n times along a new leading axis.
template <typename T>
Var<T> repeat_batch(Var<T> x, std::size_t n) {
  Tape<T>& tp = detail::tape_of(x);
  Shape s = x.shape();
  s.insert(s.begin(), n);
  const std::size_t m = x.value().size();
  Tensor<T> out(s);
  for (std::size_t b = 0; b < n; ++b) std::copy_n(x.value().data().data(), m, &out[b * m]);
  return tp.record("repeat_batch", std::move(out), {x}, [x, n, m](Tape<T>& t, std::uint32_t self) {
    const Tensor<T>& g = t.grad_of(self);
    if (T* gx = t.grad_buffer(x)) detail::reduce_repeats(g.data().data(), gx, n, m);
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(Var<T> x) {
  Tape<T>& tp = detail::tape_of(x);
  T s = 0;
  for (auto v : x.value().vec()) s += v;
  return tp.record("sum", Tensor<T>::scalar(s), {x}, [x](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_of(self)[0];
    if (T* gx = t.grad_buffer(x))
      for (std::size_t i = 0; i < x.value().size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T(1) / T(x.value().size()));
}

// Mean over all elements of (pred - target)^2.
template <typename T>
Var<T> mse(Var<T> pred, Var<T> target) {
  detail::same_tape(pred, target);
  Tape<T>& tp = detail::tape_of(pred);
  if (pred.shape() != target.shape())
    throw ShapeError("mse: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const Tensor<T>& a = pred.value();
  const Tensor<T>& b = target.value();
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  const T inv_n = T(1) / T(a.size());
  return tp.record("mse", Tensor<T>::scalar(s * inv_n), {pred, target},
                   [pred, target, inv_n](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_of(self)[0] * T(2) * inv_n;
    const Tensor<T>& a = pred.value();
    const Tensor<T>& b = target.value();
    T* ga = t.grad_buffer(pred);
    T* gb = t.grad_buffer(target);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const T d = g * (a[i] - b[i]);
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

}  // namespace mcdiff
