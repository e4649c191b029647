#pragma once

// Multi-condition guided sampling. A per-step selector decides which fused
// condition the denoiser sees; guidance mixes it with the fully-null
// condition: eps = (1 + s) eps(x, z_n) - s eps(x, z_null).

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "mcdiff/metrics.hpp"
#include "mcdiff/model.hpp"
#include "mcdiff/schedule.hpp"

namespace mcdiff {

enum class Selector {
  joint,      // text + image
  text_only,  // text + z_phi
  text_null,  // null prompt + image
};

enum class SamplerKind { ddim, ddpm };

inline const char* to_string(Selector s) {
  switch (s) {
    case Selector::joint: return "joint";
    case Selector::text_only: return "text_only";
    case Selector::text_null: return "text_null";
  }
  return "?";
}

inline Selector parse_selector(std::string_view s) {
  for (auto v : {Selector::joint, Selector::text_only, Selector::text_null})
    if (s == to_string(v)) return v;
  throw DomainError("unknown selector '" + std::string(s) + "'");
}

inline const char* to_string(SamplerKind k) { return k == SamplerKind::ddim ? "ddim" : "ddpm"; }

inline SamplerKind parse_sampler(std::string_view s) {
  if (s == "ddim") return SamplerKind::ddim;
  if (s == "ddpm") return SamplerKind::ddpm;
  throw DomainError("unknown sampler '" + std::string(s) + "' (expected ddim or ddpm)");
}

struct SampleSpec {
  int n_steps = 50;
  double guidance = 3.0;
  std::optional<int> sigma;        // unset: n_steps + 1 (image never injected)
  std::optional<double> strength;  // unset: no SDEdit
  std::uint64_t seed = 0;
  SamplerKind sampler = SamplerKind::ddim;
  // Explicit selectors for n = N..1; overrides sigma when set.
  std::optional<std::vector<Selector>> selectors;

  int resolved_sigma() const { return sigma.value_or(n_steps + 1); }

  void validate() const {
    if (n_steps < 1) throw DomainError("sample spec: steps must be >= 1");
    if (!(guidance >= 0)) throw DomainError("sample spec: guidance scale must be >= 0");
    const int s = resolved_sigma();
    if (s < 1 || s > n_steps + 1)
      throw DomainError("sample spec: sigma " + std::to_string(s) + " outside [1, " + std::to_string(n_steps + 1) +
                        "]");
    if (strength && !(*strength >= 0 && *strength <= 1))
      throw DomainError("sample spec: strength " + std::to_string(*strength) + " outside [0, 1]");
    if (selectors && selectors->size() != std::size_t(n_steps))
      throw DomainError("sample spec: selector list has " + std::to_string(selectors->size()) + " entries, need " +
                        std::to_string(n_steps));
  }
};

// Entry i is the selector for step counter n = N - i.
inline std::vector<Selector> condition_schedule(const SampleSpec& spec) {
  spec.validate();
  if (spec.selectors) return *spec.selectors;
  const int N = spec.n_steps, sigma = spec.resolved_sigma();
  std::vector<Selector> out(N);
  for (int i = 0; i < N; ++i) out[i] = (N - i) >= sigma ? Selector::joint : Selector::text_only;
  return out;
}

inline bool needs_image(Selector s) { return s != Selector::text_only; }

// (1 + s) * cond - s * uncond
template <typename T>
Tensor<T> guided_epsilon(const Tensor<T>& cond, const Tensor<T>& uncond, double s) {
  if (cond.shape() != uncond.shape()) throw ShapeError("guided_epsilon: shape mismatch");
  if (!(s >= 0)) throw DomainError("guided_epsilon: guidance scale must be >= 0");
  const T a = T(1 + s), b = T(s);
  Tensor<T> out(cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * cond[i] - b * uncond[i];
  return out;
}

// Fused embeddings for each selector plus the null pair, computed once per
// trajectory batch and reused across steps.
template <typename T>
struct ConditionSet {
  std::optional<Tensor<T>> joint, text_only, text_null;  // [B, L, d]
  Tensor<T> null;                                        // [1, L, d]

  const Tensor<T>& get(Selector s) const {
    const auto& o = s == Selector::joint ? joint : s == Selector::text_only ? text_only : text_null;
    if (!o) throw DomainError(std::string("condition '") + to_string(s) + "' requires a condition image");
    return *o;
  }
};

// prompts: B id rows; layouts: [B, C_cond, H, W] or nullopt.
template <typename T>
ConditionSet<T> build_conditions(Model<T>& m, const std::vector<std::vector<int>>& prompts,
                                 const std::optional<Tensor<T>>& layouts, const std::vector<Selector>& used) {
  Tape<T> tp(false);
  const std::size_t B = prompts.size();
  Var<T> zp = m.encode_prompts(tp, prompts);
  Var<T> tnull = m.text_null(tp);
  Var<T> zphi = m.z_phi(tp);
  auto batched = [&](Var<T> v) { return repeat_batch(v, B); };
  ConditionSet<T> cs;
  auto has = [&](Selector s) { return std::find(used.begin(), used.end(), s) != used.end(); };
  std::optional<Var<T>> zx;
  if (layouts) {
    if (layouts->dim(0) != B) throw ShapeError("sample: layout batch does not match prompt batch");
    zx = m.encode_images(tp, tp.constant(*layouts));
  }
  if (has(Selector::joint) && zx) cs.joint = m.fuse(tp, zp, *zx).value();
  if (has(Selector::text_only)) cs.text_only = m.fuse(tp, zp, batched(zphi)).value();
  if (has(Selector::text_null) && zx) cs.text_null = m.fuse(tp, batched(tnull), *zx).value();
  cs.null = m.fuse(tp, repeat_batch(tnull, 1), repeat_batch(zphi, 1)).value();
  return cs;
}

// Guided prediction for a batch; conditional and null branches share one
// forward pass of batch 2B.
template <typename T>
Tensor<T> guided_prediction(Model<T>& m, const Tensor<T>& x, int t, const Tensor<T>& z, const Tensor<T>& z_null,
                            double s) {
  const std::size_t B = x.dim(0), n = x.size() / B;
  const std::size_t L = z.dim(1), d = z.dim(2);
  Tape<T> tp(false);
  if (s == 0) {
    Var<T> e = m.predict_eps(tp, tp.constant(x), std::vector<int>(B, t), tp.constant(z));
    return guided_epsilon(e.value(), e.value(), 0.0);
  }
  Shape xs = x.shape();
  xs[0] = 2 * B;
  Tensor<T> xx(xs), zz(Shape{2 * B, L, d});
  std::copy(x.vec().begin(), x.vec().end(), xx.vec().begin());
  std::copy(x.vec().begin(), x.vec().end(), xx.vec().begin() + B * n);
  std::copy(z.vec().begin(), z.vec().end(), zz.vec().begin());
  for (std::size_t b = 0; b < B; ++b) std::copy(z_null.vec().begin(), z_null.vec().end(), &zz[(B + b) * L * d]);
  Var<T> e = m.predict_eps(tp, tp.constant(std::move(xx)), std::vector<int>(2 * B, t), tp.constant(std::move(zz)));
  const Tensor<T>& ev = e.value();
  Tensor<T> cond(x.shape()), uncond(x.shape());
  std::copy_n(ev.vec().begin(), B * n, cond.vec().begin());
  std::copy_n(ev.vec().begin() + B * n, B * n, uncond.vec().begin());
  return guided_epsilon(cond, uncond, s);
}

template <typename T>
struct Trajectory {
  std::vector<int> prompt;            // k_t ids
  std::optional<Tensor<T>> layout;    // [C_cond, H, W] fed to the image encoder
  std::optional<Tensor<T>> init;      // [3, H, W] SDEdit source; defaults to the layout lifted to RGB
  std::uint64_t seed = 0;
};

// Runs every trajectory under one spec. Trajectory b draws all of its noise
// from Rng(seed_b).split("sample"). Output is clamped to [-1, 1] at the end.
template <typename T>
std::vector<Tensor<T>> sample(Model<T>& m, const NoiseSchedule& sched, const std::vector<Trajectory<T>>& trajs,
                              const SampleSpec& spec) {
  spec.validate();
  if (trajs.empty()) throw ShapeError("sample: no trajectories");
  const auto sel = condition_schedule(spec);
  const int N = spec.n_steps;
  const std::size_t B = trajs.size();
  const auto& dc = m.config().denoiser;
  const auto& cc = m.config().cond;
  const Shape img{dc.in_channels, dc.image_size, dc.image_size};

  const bool any_image = std::any_of(sel.begin(), sel.end(), needs_image);
  const bool have = std::all_of(trajs.begin(), trajs.end(), [](const auto& tr) { return tr.layout.has_value(); });
  if (any_image && !have)
    throw DomainError("sample: sigma " + std::to_string(spec.resolved_sigma()) + " <= steps " + std::to_string(N) +
                      " needs a condition image");
  std::optional<Tensor<T>> layouts;
  if (have) {
    const Shape ls{cc.image_channels, cc.image_size, cc.image_size};
    Tensor<T> l(Shape{B, ls[0], ls[1], ls[2]});
    for (std::size_t b = 0; b < B; ++b) {
      if (trajs[b].layout->shape() != ls)
        throw ShapeError("sample: condition image " + shape_str(trajs[b].layout->shape()) + ", expected " +
                         shape_str(ls));
      std::copy(trajs[b].layout->vec().begin(), trajs[b].layout->vec().end(), &l[b * shape_numel(ls)]);
    }
    layouts = std::move(l);
  }
  std::vector<std::vector<int>> prompts;
  for (const auto& tr : trajs) prompts.push_back(tr.prompt);
  const ConditionSet<T> cs = build_conditions(m, prompts, layouts, sel);

  const auto times = sampler_times(N, sched.steps());
  const std::size_t n = shape_numel(img);
  std::vector<Rng> rngs;
  Tensor<T> x(Shape{B, img[0], img[1], img[2]});
  int first = 0;  // first sampler entry to run
  for (std::size_t b = 0; b < B; ++b) {
    rngs.push_back(Rng(trajs[b].seed).split("sample"));
    Tensor<T> x0;
    if (spec.strength) {
      Tensor<T> src;
      if (trajs[b].init) src = *trajs[b].init;
      else if (trajs[b].layout) src = as_rgb(*trajs[b].layout);
      else throw DomainError("sample: SDEdit strength set but no condition image given");
      if (src.shape() != img)
        throw ShapeError("sample: SDEdit source " + shape_str(src.shape()) + ", expected " + shape_str(img));
      auto st = sdedit_init(src, *spec.strength, times, rngs[b], sched);
      x0 = std::move(st.x_start);
      first = N - st.start_index;
    } else {
      x0 = gaussian<T>(rngs[b], img);
    }
    std::copy(x0.vec().begin(), x0.vec().end(), &x[b * n]);
  }

  for (int i = first; i < N; ++i) {
    const int t = times[i], t_prev = i + 1 < N ? times[i + 1] : 0;
    const Tensor<T> eps = guided_prediction(m, x, t, cs.get(sel[i]), cs.null, spec.guidance);
    if (spec.sampler == SamplerKind::ddim) {
      x = ddim_step(x, t, t_prev, eps, sched);
    } else {
      Tensor<T> noise(x.shape());
      for (std::size_t b = 0; b < B; ++b) {
        Tensor<T> e = gaussian<T>(rngs[b], img);
        std::copy(e.vec().begin(), e.vec().end(), &noise[b * n]);
      }
      x = ddpm_step_between(x, t, t_prev, eps, noise, sched);
    }
  }

  std::vector<Tensor<T>> out;
  for (std::size_t b = 0; b < B; ++b) {
    Tensor<T> o(img);
    for (std::size_t j = 0; j < n; ++j) o[j] = std::clamp(x[b * n + j], T(-1), T(1));
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace mcdiff
