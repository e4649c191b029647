#pragma once

// Parameterized layers built on the ops in ops.hpp.

#include <functional>
#include <string>

#include "mcdiff/ops.hpp"
#include "mcdiff/rng.hpp"

namespace mcdiff {

template <typename T>
using ParamVisitor = std::function<void(const std::string&, Param<T>&)>;

// Normal(0, std) truncated to +-2 std by resampling.
template <typename T>
Tensor<T> trunc_normal(Rng& rng, const Shape& shape, double std) {
  Tensor<T> out(shape);
  for (auto& v : out.vec()) {
    double z;
    do {
      z = rng.normal_pair()[0];
    } while (std::abs(z) > 2.0);
    v = T(z * std);
  }
  return out;
}

inline constexpr double kInitStd = 0.02;  // embeddings and learned tokens
// Grid positional embeddings start large enough that cross-attention already
// prefers the image token under each query cell. At amplitude 1 the routing
// stays near uniform and the layout goes unused.
inline constexpr double kPosGridAmplitude = 5.0;

// Weights keep unit output variance for unit-variance inputs.
inline double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(double(fan_in)); }

// [h*w, dim] sin/cos features of each cell centre in unit coordinates; the
// first half of dim encodes y, the second x. Frequencies span 0.25..2 cycles
// per image side, so dot products peak between cells covering the same area
// at any grid resolution. A trailing odd column stays zero.
template <typename T>
Tensor<T> sincos_grid(std::size_t h, std::size_t w, std::size_t dim, double amplitude = 1.0) {
  Tensor<T> out(Shape{h * w, dim});
  const std::size_t nf = dim / 4;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double u[2] = {(double(y) + 0.5) / double(h), (double(x) + 0.5) / double(w)};
      T* row = &out[(y * w + x) * dim];
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t f = 0; f < nf; ++f) {
          const double freq = nf > 1 ? 0.25 + 1.75 * double(f) / double(nf - 1) : 1.0;
          const double ang = 2 * 3.141592653589793 * freq * u[a];
          row[a * 2 * nf + 2 * f] = T(amplitude * std::sin(ang));
          row[a * 2 * nf + 2 * f + 1] = T(amplitude * std::cos(ang));
        }
    }
  return out;
}

template <typename T>
struct Linear {
  Param<T> weight;  // [in, out]
  Param<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(trunc_normal<T>(rng, {in, out}, fan_in_std(in))), bias(Tensor<T>(Shape{out})) {}

  Var<T> operator()(Tape<T>& tp, Var<T> x) { return linear(x, tp.param(weight), tp.param(bias)); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

template <typename T>
struct Conv2d {
  Param<T> weight;  // [out, in, k, k]
  Param<T> bias;    // [out]
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, std::size_t pad, Rng& rng,
         bool zero_init = false)
      : weight(zero_init ? Tensor<T>(Shape{out, in, k, k})
                         : trunc_normal<T>(rng, {out, in, k, k}, fan_in_std(in * k * k))),
        bias(Tensor<T>(Shape{out})),
        stride(stride_),
        padding(pad) {}

  Var<T> operator()(Tape<T>& tp, Var<T> x) {
    return conv2d(x, tp.param(weight), tp.param(bias), stride, padding);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

template <typename T>
struct GroupNorm {
  Param<T> gamma;
  Param<T> beta;
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(std::size_t channels, std::size_t g)
      : gamma(Tensor<T>(Shape{channels}, T(1))), beta(Tensor<T>(Shape{channels})), groups(g) {}

  Var<T> operator()(Tape<T>& tp, Var<T> x) { return group_norm(x, groups, tp.param(gamma), tp.param(beta)); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

// Largest group count <= 8 dividing `channels`.
inline std::size_t norm_groups(std::size_t channels) {
  for (std::size_t g = 8; g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

template <typename T>
struct LayerNorm {
  Param<T> gamma;
  Param<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d) : gamma(Tensor<T>(Shape{d}, T(1))), beta(Tensor<T>(Shape{d})) {}

  Var<T> operator()(Tape<T>& tp, Var<T> x) { return layer_norm(x, tp.param(gamma), tp.param(beta)); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

// Projected multi-head attention: queries from x, keys/values from ctx.
template <typename T>
struct MultiHeadAttention {
  Linear<T> q, k, v, out;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d_model, std::size_t d_ctx, std::size_t n_heads, Rng& rng)
      : q(d_model, d_model, rng), k(d_ctx, d_model, rng), v(d_ctx, d_model, rng), out(d_model, d_model, rng),
        heads(n_heads) {
    if (d_model % n_heads) throw ShapeError("attention: model width not divisible by heads");
  }

  Var<T> operator()(Tape<T>& tp, Var<T> x, Var<T> ctx) {
    return out(tp, attention(q(tp, x), k(tp, ctx), v(tp, ctx), heads));
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    q.visit(prefix + ".q", fn);
    k.visit(prefix + ".k", fn);
    v.visit(prefix + ".v", fn);
    out.visit(prefix + ".out", fn);
  }
};

// [B, C, H, W] -> [B, H*W, C]
template <typename T>
Var<T> to_tokens(Var<T> x) {
  const Shape& s = x.shape();
  return reshape(permute(x, {0, 2, 3, 1}), Shape{s[0], s[2] * s[3], s[1]});
}

// [B, H*W, C] -> [B, C, H, W]
template <typename T>
Var<T> from_tokens(Var<T> x, std::size_t h, std::size_t w) {
  const Shape& s = x.shape();
  return permute(reshape(x, Shape{s[0], h, w, s[2]}), {0, 3, 1, 2});
}

}  // namespace mcdiff
