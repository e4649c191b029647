#pragma once

// Multi-condition embedding: a frozen prompt encoder, a trainable image
// encoder for the layout image, and a fusion transformer over the
// concatenated token blocks. The image-null block z_phi is learnable; the
// text null is the all-PAD prompt pushed through the frozen encoder.

#include <sstream>
#include <string>
#include <vector>

#include "mcdiff/nn.hpp"

namespace mcdiff {

struct ConditionConfig {
  std::size_t d_embed = 64;
  std::size_t text_len = 8;  // k_t
  std::size_t image_size = 16;
  std::size_t image_channels = 1;
  std::size_t encoder_blocks = 2;
  std::size_t encoder_channels = 32;
  std::size_t encoder_out_channels = 64;
  std::size_t fusion_layers = 2;
  std::size_t fusion_heads = 4;
  std::size_t fusion_hidden = 256;

  // Full-width fusion transformer (6 layers, 8 heads, 768/3072).
  static ConditionConfig wide() {
    ConditionConfig c;
    c.d_embed = 768;
    c.fusion_layers = 6;
    c.fusion_heads = 8;
    c.fusion_hidden = 3072;
    return c;
  }

  std::size_t image_grid() const { return image_size >> encoder_blocks; }
  // k_i: one token per cell of the encoder's final grid.
  std::size_t image_len() const { return image_grid() * image_grid(); }
  std::size_t seq_len() const { return text_len + image_len(); }

  void validate() const {
    if (encoder_blocks == 0 || image_size % (std::size_t{1} << encoder_blocks))
      throw DomainError("condition config: image_size " + std::to_string(image_size) +
                        " not divisible by 2^encoder_blocks");
    if (d_embed % fusion_heads) throw DomainError("condition config: d_embed not divisible by fusion_heads");
    if (text_len < 2) throw DomainError("condition config: text_len must hold at least two tokens");
  }
};

// ---------------------------------------------------------------------------

class PromptVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kNullPrompt = 1;

  explicit PromptVocab(std::size_t text_len = 8)
      : tokens_{"<pad>", "<null>", "red", "green", "blue", "yellow", "circle", "square", "triangle"},
        text_len_(text_len) {}

  PromptVocab(std::vector<std::string> tokens, std::size_t text_len) : tokens_(std::move(tokens)), text_len_(text_len) {
    if (tokens_.size() < 2 || tokens_[0] != "<pad>" || tokens_[1] != "<null>")
      throw FormatError("vocab: first two tokens must be <pad> and <null>");
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t text_len() const { return text_len_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(std::string_view tok) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (tokens_[i] == tok) return int(i);
    throw DomainError("vocab: unknown token '" + std::string(tok) + "'");
  }

  // Exactly text_len ids, right-padded. "<null>" alone (or nothing) is the null prompt.
  std::vector<int> encode(const std::vector<std::string>& words) const {
    std::vector<int> ids(text_len_, kPad);
    if (words.size() == 1 && words[0] == "<null>") return ids;
    if (words.size() > text_len_)
      throw DomainError("vocab: prompt has " + std::to_string(words.size()) + " tokens, limit " +
                        std::to_string(text_len_));
    for (std::size_t i = 0; i < words.size(); ++i) {
      ids[i] = id(words[i]);
      if (ids[i] == kNullPrompt) throw DomainError("vocab: <null> must appear alone");
    }
    return ids;
  }

  std::vector<int> encode_text(std::string_view text) const {
    std::istringstream is{std::string(text)};
    std::vector<std::string> words;
    for (std::string w; is >> w;) words.push_back(w);
    return encode(words);
  }

  std::vector<int> null_prompt() const { return std::vector<int>(text_len_, kPad); }

 private:
  std::vector<std::string> tokens_;
  std::size_t text_len_;
};

// Frozen lookup table with orthonormal rows (random, Gram-Schmidt).
template <typename T>
struct PromptEncoder {
  Param<T> table;  // [vocab, d], trainable = false

  PromptEncoder() = default;
  PromptEncoder(std::size_t vocab, std::size_t d, Rng& rng) {
    Tensor<T> m(Shape{vocab, d});
    std::vector<double> rows(vocab * d);
    for (std::size_t r = 0; r < vocab; ++r) {
      double* row = &rows[r * d];
      double norm = 0;
      do {
        for (std::size_t j = 0; j < d; ++j) row[j] = rng.normal_pair()[0];
        if (r < d)
          for (std::size_t q = 0; q < r; ++q) {
            const double* prev = &rows[q * d];
            double dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += row[j] * prev[j];
            for (std::size_t j = 0; j < d; ++j) row[j] -= dot * prev[j];
          }
        norm = 0;
        for (std::size_t j = 0; j < d; ++j) norm += row[j] * row[j];
        norm = std::sqrt(norm);
      } while (norm < 1e-6);
      for (std::size_t j = 0; j < d; ++j) {
        row[j] /= norm;
        m[r * d + j] = T(row[j]);
      }
    }
    table = Param<T>(std::move(m), false);
  }

  std::size_t dim() const { return table.value.dim(1); }

  // [k_t, d]; plain tensor, no gradient path.
  Tensor<T> encode(const std::vector<int>& ids) const {
    const std::size_t d = dim();
    Tensor<T> out(Shape{ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || std::size_t(ids[i]) >= table.value.dim(0)) throw DomainError("prompt encoder: id out of range");
      std::copy_n(&table.value[std::size_t(ids[i]) * d], d, &out[i * d]);
    }
    return out;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) { fn(prefix + ".table", table); }
};

// ---------------------------------------------------------------------------

// Stride-2 residual block: 4x4/s2 conv, 3x3 conv, 2x2/s2 projection shortcut.
template <typename T>
struct EncoderBlock {
  Conv2d<T> down, conv, skip;

  EncoderBlock() = default;
  EncoderBlock(std::size_t in, std::size_t out, Rng& rng)
      : down(in, out, 4, 2, 1, rng), conv(out, out, 3, 1, 1, rng), skip(in, out, 2, 2, 0, rng) {}

  Var<T> operator()(Tape<T>& tp, Var<T> x) {
    Var<T> h = conv(tp, silu(down(tp, x)));
    return silu(add(h, skip(tp, x)));
  }

  void visit(const std::string& p, const ParamVisitor<T>& fn) {
    down.visit(p + ".down", fn);
    conv.visit(p + ".conv", fn);
    skip.visit(p + ".skip", fn);
  }
};

// Layout image [B, C, H, W] -> tokens [B, k_i, d].
template <typename T>
struct ImageEncoder {
  std::vector<EncoderBlock<T>> blocks;
  Conv2d<T> out_layer;
  Linear<T> proj;
  std::size_t image_size = 0;
  std::size_t channels = 0;

  ImageEncoder() = default;
  ImageEncoder(const ConditionConfig& c, Rng& rng) : image_size(c.image_size), channels(c.image_channels) {
    std::size_t ch = c.image_channels;
    for (std::size_t i = 0; i < c.encoder_blocks; ++i) {
      blocks.emplace_back(ch, c.encoder_channels, rng);
      ch = c.encoder_channels;
    }
    out_layer = Conv2d<T>(ch, c.encoder_out_channels, 3, 1, 1, rng);
    proj = Linear<T>(c.encoder_out_channels, c.d_embed, rng);
  }

  Var<T> operator()(Tape<T>& tp, Var<T> x) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != channels || s[2] != image_size || s[3] != image_size)
      throw ShapeError("image encoder: expected [B," + std::to_string(channels) + "," + std::to_string(image_size) +
                       "," + std::to_string(image_size) + "], got " + shape_str(s));
    Var<T> h = x;
    for (auto& b : blocks) h = b(tp, h);
    h = out_layer(tp, h);
    return proj(tp, to_tokens(h));
  }

  void visit(const std::string& p, const ParamVisitor<T>& fn) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(p + ".block" + std::to_string(i), fn);
    out_layer.visit(p + ".out_layer", fn);
    proj.visit(p + ".proj", fn);
  }
};

// Pre-norm transformer block (self-attention + SiLU MLP).
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Linear<T> fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(std::size_t d, std::size_t heads, std::size_t hidden, Rng& rng)
      : ln1(d), ln2(d), attn(d, d, heads, rng), fc1(d, hidden, rng), fc2(hidden, d, rng) {}

  Var<T> operator()(Tape<T>& tp, Var<T> x) {
    Var<T> n = ln1(tp, x);
    x = add(x, attn(tp, n, n));
    return add(x, fc2(tp, silu(fc1(tp, ln2(tp, x)))));
  }

  void visit(const std::string& p, const ParamVisitor<T>& fn) {
    ln1.visit(p + ".ln1", fn);
    attn.visit(p + ".attn", fn);
    ln2.visit(p + ".ln2", fn);
    fc1.visit(p + ".fc1", fn);
    fc2.visit(p + ".fc2", fn);
  }
};

template <typename T>
struct FusionTransformer {
  Param<T> pos;  // [k_t + k_i, d]
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> final_norm;

  FusionTransformer() = default;
  FusionTransformer(const ConditionConfig& c, Rng& rng)
      : pos(trunc_normal<T>(rng, {c.seq_len(), c.d_embed}, kInitStd)), final_norm(c.d_embed) {
    // Image-token rows start as the grid encoding of their cell.
    const auto grid = sincos_grid<T>(c.image_grid(), c.image_grid(), c.d_embed, kPosGridAmplitude);
    std::copy(grid.vec().begin(), grid.vec().end(), &pos.value[c.text_len * c.d_embed]);
    for (std::size_t i = 0; i < c.fusion_layers; ++i)
      blocks.emplace_back(c.d_embed, c.fusion_heads, c.fusion_hidden, rng);
  }

  // z_p: [B, k_t, d], z_x: [B, k_i, d] -> [B, k_t + k_i, d]
  Var<T> operator()(Tape<T>& tp, Var<T> z_p, Var<T> z_x) {
    Var<T> x = concat<T>({z_p, z_x}, 1);
    const Shape& ps = pos.value.shape();
    if (x.dim(1) != ps[0] || x.dim(2) != ps[1])
      throw ShapeError("fuse: sequence " + shape_str(x.shape()) + " does not match positional embedding " +
                       shape_str(ps));
    x = add(x, tp.param(pos));
    for (auto& b : blocks) x = b(tp, x);
    return final_norm(tp, x);
  }

  void visit(const std::string& p, const ParamVisitor<T>& fn) {
    fn(p + ".pos", pos);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(p + ".block" + std::to_string(i), fn);
    final_norm.visit(p + ".final_norm", fn);
  }
};

// ---------------------------------------------------------------------------

struct DropoutFlags {
  bool text = false;
  bool image = false;
};

// Per-sample independent draws: text first, then image.
inline std::vector<DropoutFlags> draw_condition_dropout(Rng& rng, std::size_t n, double d_p, double d_x) {
  if (!(d_p >= 0 && d_p <= 1 && d_x >= 0 && d_x <= 1))
    throw DomainError("condition dropout: probabilities must lie in [0, 1]");
  std::vector<DropoutFlags> out(n);
  for (auto& f : out) {
    f.text = rng.bernoulli(d_p);
    f.image = rng.bernoulli(d_x);
  }
  return out;
}

template <typename T>
struct DroppedConditions {
  Var<T> z_p;
  Var<T> z_x;
  std::vector<DropoutFlags> flags;
};

// Replaces dropped text blocks with the text null and dropped image blocks
// with z_phi. z_p, z_x: [B, k, d]; text_null: [k_t, d]; z_phi: [k_i, d].
template <typename T>
DroppedConditions<T> apply_condition_dropout(Var<T> z_p, Var<T> z_x, Var<T> text_null, Var<T> z_phi, Rng& rng,
                                             double d_p, double d_x) {
  const std::size_t B = z_p.dim(0);
  if (z_x.dim(0) != B) throw ShapeError("condition dropout: batch mismatch");
  auto flags = draw_condition_dropout(rng, B, d_p, d_x);
  std::vector<bool> dt(B), dx(B);
  for (std::size_t b = 0; b < B; ++b) {
    dt[b] = flags[b].text;
    dx[b] = flags[b].image;
  }
  return {select_batch(z_p, text_null, dt), select_batch(z_x, z_phi, dx), std::move(flags)};
}

}  // namespace mcdiff
