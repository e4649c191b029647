#pragma once

// Epsilon-prediction UNet. Timestep features are added in every residual
// block; the condition sequence z enters through cross-attention at the
// resolutions listed in DenoiserConfig::attention_levels.

#include <cmath>
#include <string>
#include <vector>

#include "mcdiff/nn.hpp"

namespace mcdiff {

struct DenoiserConfig {
  std::size_t in_channels = 3;
  std::size_t image_size = 16;
  std::size_t base_channels = 32;
  std::vector<std::size_t> channel_mult{1, 2};
  std::size_t res_blocks = 2;
  std::vector<std::size_t> attention_levels{1};  // level 1 is 8x8 for a 16x16 input
  std::size_t time_dim = 64;
  std::size_t time_hidden = 128;
  std::size_t context_dim = 64;
  std::size_t attention_heads = 4;
  int max_timestep = 1000;

  bool has_attention(std::size_t level) const {
    return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
  }

  void validate() const {
    if (channel_mult.empty() || res_blocks == 0) throw DomainError("denoiser config: need >= 1 level and res block");
    if (image_size % (std::size_t{1} << (channel_mult.size() - 1)))
      throw DomainError("denoiser config: image_size not divisible by the downsampling depth");
    if (time_dim % 2) throw DomainError("denoiser config: time_dim must be even");
    for (auto l : attention_levels)
      if (l >= channel_mult.size()) throw DomainError("denoiser config: attention level out of range");
  }
};

// [sin(t w_j)..., cos(t w_j)...] with w_j = 10000^(-2j/dim), j < dim/2.
template <typename T>
std::vector<T> timestep_embedding(double t, std::size_t dim) {
  if (dim % 2) throw DomainError("timestep_embedding: dim must be even, got " + std::to_string(dim));
  const std::size_t half = dim / 2;
  std::vector<T> e(dim);
  for (std::size_t j = 0; j < half; ++j) {
    const double w = std::pow(10000.0, -2.0 * double(j) / double(dim));
    e[j] = T(std::sin(t * w));
    e[half + j] = T(std::cos(t * w));
  }
  return e;
}

template <typename T>
struct ResBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2;
  Linear<T> time_proj;
  Conv2d<T> skip;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(std::size_t in, std::size_t out, std::size_t time_hidden, Rng& rng)
      : norm1(in, norm_groups(in)),
        norm2(out, norm_groups(out)),
        conv1(in, out, 3, 1, 1, rng),
        conv2(out, out, 3, 1, 1, rng),
        time_proj(time_hidden, out, rng),
        has_skip(in != out) {
    if (has_skip) skip = Conv2d<T>(in, out, 1, 1, 0, rng);
  }

  // temb: [B, time_hidden], already passed through SiLU.
  Var<T> operator()(Tape<T>& tp, Var<T> x, Var<T> temb) {
    Var<T> h = conv1(tp, silu(norm1(tp, x)));
    h = add_channelwise(h, time_proj(tp, temb));
    h = conv2(tp, silu(norm2(tp, h)));
    return add(has_skip ? skip(tp, x) : x, h);
  }

  void visit(const std::string& p, const ParamVisitor<T>& fn) {
    norm1.visit(p + ".norm1", fn);
    conv1.visit(p + ".conv1", fn);
    time_proj.visit(p + ".time_proj", fn);
    norm2.visit(p + ".norm2", fn);
    conv2.visit(p + ".conv2", fn);
    if (has_skip) skip.visit(p + ".skip", fn);
  }
};

// Residual cross-attention from feature-map tokens to the condition sequence.
// Queries carry a learned per-position embedding so spatially indexed
// condition tokens can be routed to matching locations. It starts as the
// same grid encoding the fusion transformer gives image tokens, and the key
// projection starts equal to the query projection, so attention initially
// prefers the image token covering the query's location.
template <typename T>
struct CrossAttentionBlock {
  GroupNorm<T> norm;
  Param<T> pos;  // [H*W, C]
  MultiHeadAttention<T> attn;
  std::size_t h = 0, w = 0;

  CrossAttentionBlock() = default;
  CrossAttentionBlock(std::size_t channels, std::size_t ctx_dim, std::size_t heads, std::size_t hh, std::size_t ww,
                      Rng& rng)
      : norm(channels, norm_groups(channels)),
        pos(sincos_grid<T>(hh, ww, channels, kPosGridAmplitude)),
        attn(channels, ctx_dim, heads, rng),
        h(hh),
        w(ww) {
    if (channels == ctx_dim) attn.k.weight.value = attn.q.weight.value;
  }

  Var<T> operator()(Tape<T>& tp, Var<T> x, Var<T> ctx) {
    Var<T> tok = add(to_tokens(norm(tp, x)), tp.param(pos));
    return add(x, from_tokens(attn(tp, tok, ctx), h, w));
  }

  void visit(const std::string& p, const ParamVisitor<T>& fn) {
    norm.visit(p + ".norm", fn);
    fn(p + ".pos", pos);
    attn.visit(p + ".attn", fn);
  }
};

template <typename T>
class Denoiser {
 public:
  Denoiser() = default;

  Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    time_fc1_ = Linear<T>(cfg.time_dim, cfg.time_hidden, rng);
    time_fc2_ = Linear<T>(cfg.time_hidden, cfg.time_hidden, rng);
    const std::size_t levels = cfg.channel_mult.size();
    std::size_t ch = cfg.base_channels * cfg.channel_mult[0];
    conv_in_ = Conv2d<T>(cfg.in_channels, ch, 3, 1, 1, rng);
    std::size_t res = cfg.image_size;
    std::vector<std::size_t> skip_ch;
    for (std::size_t l = 0; l < levels; ++l) {
      const std::size_t out = cfg.base_channels * cfg.channel_mult[l];
      Level lv;
      for (std::size_t r = 0; r < cfg.res_blocks; ++r) {
        lv.blocks.emplace_back(ch, out, cfg.time_hidden, rng);
        ch = out;
      }
      if (cfg.has_attention(l)) lv.attn = CrossAttentionBlock<T>(ch, cfg.context_dim, cfg.attention_heads, res, res, rng);
      lv.has_attn = cfg.has_attention(l);
      skip_ch.push_back(ch);
      if (l + 1 < levels) {
        lv.resample = Conv2d<T>(ch, ch, 4, 2, 1, rng);
        res /= 2;
      }
      down_.push_back(std::move(lv));
    }
    for (std::size_t l = levels; l-- > 0;) {
      const std::size_t out = cfg.base_channels * cfg.channel_mult[l];
      Level lv;
      lv.blocks.emplace_back(ch + skip_ch[l], out, cfg.time_hidden, rng);
      ch = out;
      lv.has_attn = cfg.has_attention(l);
      if (lv.has_attn) lv.attn = CrossAttentionBlock<T>(ch, cfg.context_dim, cfg.attention_heads, res, res, rng);
      if (l > 0) {
        lv.resample = Conv2d<T>(ch, cfg.base_channels * cfg.channel_mult[l - 1], 3, 1, 1, rng);
        ch = cfg.base_channels * cfg.channel_mult[l - 1];
        res *= 2;
      }
      up_.push_back(std::move(lv));
    }
    norm_out_ = GroupNorm<T>(ch, norm_groups(ch));
    conv_out_ = Conv2d<T>(ch, cfg.in_channels, 3, 1, 1, rng, /*zero_init=*/true);
  }

  const DenoiserConfig& config() const { return cfg_; }

  // x_t: [B, C, H, W]; t: B timesteps; z: [B, L, d] (or [1, L, d] shared).
  Var<T> operator()(Tape<T>& tp, Var<T> x, const std::vector<int>& t, Var<T> z) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.image_size || s[3] != cfg_.image_size)
      throw ShapeError("denoiser: input " + shape_str(s) + " does not match config");
    if (t.size() != s[0]) throw ShapeError("denoiser: need one timestep per batch element");
    if (z.shape().size() != 3 || z.dim(2) != cfg_.context_dim || (z.dim(0) != s[0] && z.dim(0) != 1))
      throw ShapeError("denoiser: condition " + shape_str(z.shape()) + " incompatible with batch " + shape_str(s));
    Tensor<T> temb(Shape{s[0], cfg_.time_dim});
    for (std::size_t b = 0; b < s[0]; ++b) {
      if (t[b] < 0 || t[b] > cfg_.max_timestep)
        throw DomainError("denoiser: t = " + std::to_string(t[b]) + " outside [0, " +
                          std::to_string(cfg_.max_timestep) + "]");
      auto e = timestep_embedding<T>(double(t[b]), cfg_.time_dim);
      std::copy(e.begin(), e.end(), &temb[b * cfg_.time_dim]);
    }
    Var<T> te = silu(time_fc2_(tp, silu(time_fc1_(tp, tp.constant(std::move(temb))))));

    Var<T> h = conv_in_(tp, x);
    std::vector<Var<T>> skips;
    for (auto& lv : down_) {
      for (auto& b : lv.blocks) h = b(tp, h, te);
      if (lv.has_attn) h = lv.attn(tp, h, z);
      skips.push_back(h);
      if (lv.resample.weight.value.size()) h = lv.resample(tp, h);
    }
    for (std::size_t i = 0; i < up_.size(); ++i) {
      auto& lv = up_[i];
      h = concat<T>({h, skips[skips.size() - 1 - i]}, 1);
      for (auto& b : lv.blocks) h = b(tp, h, te);
      if (lv.has_attn) h = lv.attn(tp, h, z);
      if (lv.resample.weight.value.size()) h = upsample2x(lv.resample(tp, h));
    }
    return conv_out_(tp, silu(norm_out_(tp, h)));
  }

  void visit(const std::string& p, const ParamVisitor<T>& fn) {
    time_fc1_.visit(p + ".time_fc1", fn);
    time_fc2_.visit(p + ".time_fc2", fn);
    conv_in_.visit(p + ".conv_in", fn);
    for (std::size_t l = 0; l < down_.size(); ++l) down_[l].visit(p + ".down" + std::to_string(l), fn);
    for (std::size_t l = 0; l < up_.size(); ++l) up_[l].visit(p + ".up" + std::to_string(l), fn);
    norm_out_.visit(p + ".norm_out", fn);
    conv_out_.visit(p + ".conv_out", fn);
  }

 private:
  struct Level {
    std::vector<ResBlock<T>> blocks;
    CrossAttentionBlock<T> attn;
    bool has_attn = false;
    Conv2d<T> resample;  // down: 4x4/s2 conv; up: 3x3 conv, then nearest 2x upsampling

    void visit(const std::string& p, const ParamVisitor<T>& fn) {
      for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(p + ".res" + std::to_string(i), fn);
      if (has_attn) attn.visit(p + ".xattn", fn);
      if (resample.weight.value.size()) resample.visit(p + ".resample", fn);
    }
  };

  DenoiserConfig cfg_;
  Linear<T> time_fc1_, time_fc2_;
  Conv2d<T> conv_in_;
  std::vector<Level> down_;
  std::vector<Level> up_;
  GroupNorm<T> norm_out_;
  Conv2d<T> conv_out_;
};

}  // namespace mcdiff
