#pragma once

// Everything that owns parameters: prompt encoder E, image encoder F, fusion
// transformer, the image-null block z_phi and the denoiser.

#include <string>
#include <utility>
#include <vector>

#include "mcdiff/conditioning.hpp"
#include "mcdiff/denoiser.hpp"

namespace mcdiff {

struct ModelConfig {
  ConditionConfig cond;
  DenoiserConfig denoiser;

  void validate() const {
    cond.validate();
    denoiser.validate();
    if (cond.d_embed != denoiser.context_dim)
      throw DomainError("model config: condition width " + std::to_string(cond.d_embed) +
                        " != denoiser context_dim " + std::to_string(denoiser.context_dim));
    if (cond.image_size != denoiser.image_size)
      throw DomainError("model config: condition and denoiser image sizes differ");
  }
};

template <typename T>
class Model {
 public:
  Model() = default;

  Model(const ModelConfig& cfg, std::uint64_t seed, PromptVocab vocab = PromptVocab())
      : cfg_(cfg), vocab_(std::move(vocab)) {
    cfg.validate();
    if (vocab_.text_len() != cfg.cond.text_len) vocab_ = PromptVocab(vocab_.tokens(), cfg.cond.text_len);
    const Rng root = Rng(seed).split("init");
    Rng r_prompt = root.split("prompt"), r_image = root.split("image"), r_fuse = root.split("fusion"),
        r_null = root.split("null"), r_den = root.split("denoiser");
    prompt_ = PromptEncoder<T>(vocab_.size(), cfg.cond.d_embed, r_prompt);
    image_ = ImageEncoder<T>(cfg.cond, r_image);
    fusion_ = FusionTransformer<T>(cfg.cond, r_fuse);
    z_phi_ = Param<T>(trunc_normal<T>(r_null, {cfg.cond.image_len(), cfg.cond.d_embed}, kInitStd));
    denoiser_ = Denoiser<T>(cfg.denoiser, r_den);
  }

  const ModelConfig& config() const { return cfg_; }
  const PromptVocab& vocab() const { return vocab_; }
  PromptEncoder<T>& prompt_encoder() { return prompt_; }
  const PromptEncoder<T>& prompt_encoder() const { return prompt_; }
  Param<T>& null_image() { return z_phi_; }

  // Text embeddings for a batch of id rows -> constant [B, k_t, d].
  Var<T> encode_prompts(Tape<T>& tp, const std::vector<std::vector<int>>& ids) const {
    if (ids.empty()) throw ShapeError("encode_prompts: empty batch");
    const std::size_t kt = cfg_.cond.text_len, d = cfg_.cond.d_embed;
    Tensor<T> out(Shape{ids.size(), kt, d});
    for (std::size_t b = 0; b < ids.size(); ++b) {
      if (ids[b].size() != kt) throw ShapeError("encode_prompts: prompt length != k_t");
      auto e = prompt_.encode(ids[b]);
      std::copy(e.vec().begin(), e.vec().end(), &out[b * kt * d]);
    }
    return tp.constant(std::move(out));
  }

  // [k_t, d] embedding of the null prompt.
  Var<T> text_null(Tape<T>& tp) const { return tp.constant(prompt_.encode(vocab_.null_prompt())); }

  Var<T> encode_images(Tape<T>& tp, Var<T> layouts) { return image_(tp, layouts); }
  Var<T> z_phi(Tape<T>& tp) { return tp.param(z_phi_); }
  Var<T> fuse(Tape<T>& tp, Var<T> z_p, Var<T> z_x) { return fusion_(tp, z_p, z_x); }

  Var<T> predict_eps(Tape<T>& tp, Var<T> x_t, const std::vector<int>& t, Var<T> z) {
    return denoiser_(tp, x_t, t, z);
  }

  void visit(const ParamVisitor<T>& fn) {
    prompt_.visit("prompt", fn);
    image_.visit("image_encoder", fn);
    fusion_.visit("fusion", fn);
    fn("z_phi", z_phi_);
    denoiser_.visit("denoiser", fn);
  }

  std::vector<std::pair<std::string, Param<T>*>> named_params() {
    std::vector<std::pair<std::string, Param<T>*>> out;
    visit([&](const std::string& n, Param<T>& p) { out.emplace_back(n, &p); });
    return out;
  }

  std::size_t param_count(bool trainable_only = true) {
    std::size_t n = 0;
    visit([&](const std::string&, Param<T>& p) {
      if (p.trainable || !trainable_only) n += p.value.size();
    });
    return n;
  }

  std::size_t denoiser_param_count() {
    std::size_t n = 0;
    denoiser_.visit("denoiser", [&](const std::string&, Param<T>& p) { n += p.value.size(); });
    return n;
  }

  void zero_grad() {
    visit([](const std::string&, Param<T>& p) { p.zero_grad(); });
  }

  // Copies parameter values from a model of another precision with the same config.
  template <typename U>
  void assign_from(Model<U>& other) {
    auto dst = named_params();
    auto src = other.named_params();
    if (dst.size() != src.size()) throw ShapeError("assign_from: parameter lists differ");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].first != src[i].first || dst[i].second->value.shape() != src[i].second->value.shape())
        throw ShapeError("assign_from: mismatch at " + dst[i].first);
      dst[i].second->value = src[i].second->value.template cast<T>();
    }
  }

 private:
  ModelConfig cfg_;
  PromptVocab vocab_;
  PromptEncoder<T> prompt_;
  ImageEncoder<T> image_;
  FusionTransformer<T> fusion_;
  Param<T> z_phi_;
  Denoiser<T> denoiser_;
};

}  // namespace mcdiff
