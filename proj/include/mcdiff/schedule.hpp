#pragma once

// Noise schedule, forward noising, DDPM/DDIM reverse updates and SDEdit
// initialization. Tables are kept in double regardless of the tensor type.

#include <cmath>
#include <vector>

#include "mcdiff/rng.hpp"
#include "mcdiff/tensor.hpp"

namespace mcdiff {

class NoiseSchedule {
 public:
  // betas[i] is beta_{i+1}.
  explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
    if (betas_.empty()) throw DomainError("schedule: T must be >= 1");
    alphas_.resize(betas_.size());
    alpha_bars_.resize(betas_.size() + 1);
    alpha_bars_[0] = 1.0;
    for (std::size_t i = 0; i < betas_.size(); ++i) {
      if (!(betas_[i] > 0.0 && betas_[i] < 1.0))
        throw DomainError("schedule: beta_" + std::to_string(i + 1) + " = " + std::to_string(betas_[i]) +
                          " outside (0, 1)");
      alphas_[i] = 1.0 - betas_[i];
      alpha_bars_[i + 1] = alpha_bars_[i] * alphas_[i];
    }
  }

  int steps() const { return int(betas_.size()); }

  // 1-based accessors; alpha_bar(0) == 1.
  double beta(int t) const { return betas_.at(check(t, 1) - 1); }
  double alpha(int t) const { return alphas_.at(check(t, 1) - 1); }
  double alpha_bar(int t) const { return alpha_bars_.at(check(t, 0)); }

  const std::vector<double>& betas() const { return betas_; }

 private:
  int check(int t, int lo) const {
    if (t < lo || t > steps())
      throw DomainError("schedule: t = " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                        std::to_string(steps()) + "]");
    return t;
  }

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

// Betas interpolated linearly from beta_start (t = 1) to beta_end (t = T).
inline NoiseSchedule linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw DomainError("linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw DomainError("linear_schedule: need 0 < beta_start <= beta_end < 1");
  std::vector<double> b(T);
  for (int i = 0; i < T; ++i)
    b[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(i) / double(T - 1);
  return NoiseSchedule(std::move(b));
}

namespace detail {
template <typename T>
void same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
  detail::same_shape(x0, eps, "forward_diffuse");
  if (t < 1 || t > s.steps()) throw DomainError("forward_diffuse: t = " + std::to_string(t) + " out of range");
  const double ab = s.alpha_bar(t);
  const T a = T(std::sqrt(ab)), b = T(std::sqrt(1.0 - ab));
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  require_finite(out, "forward_diffuse");
  return out;
}

// Ancestral step between arbitrary times t > t_prev using the posterior with
// the "sigma^2 = beta" variance; t_prev = t - 1 gives the textbook DDPM step.
// Noise is ignored when t_prev == 0.
template <typename T>
Tensor<T> ddpm_step_between(const Tensor<T>& xt, int t, int t_prev, const Tensor<T>& eps_pred,
                            const Tensor<T>& noise, const NoiseSchedule& s) {
  detail::same_shape(xt, eps_pred, "ddpm_step");
  detail::same_shape(xt, noise, "ddpm_step");
  if (t < 1 || t > s.steps() || t_prev < 0 || t_prev >= t)
    throw DomainError("ddpm_step: invalid step pair t=" + std::to_string(t) + ", t_prev=" + std::to_string(t_prev));
  const double ab_t = s.alpha_bar(t);
  const double alpha = ab_t / s.alpha_bar(t_prev);
  const double beta = 1.0 - alpha;
  const T c0 = T(1.0 / std::sqrt(alpha));
  const T c1 = T(beta / std::sqrt(1.0 - ab_t));
  const T sigma = t_prev == 0 ? T(0) : T(std::sqrt(beta));
  Tensor<T> out(xt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c0 * (xt[i] - c1 * eps_pred[i]) + sigma * noise[i];
  require_finite(out, "ddpm_step");
  return out;
}

// x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t) + sqrt(beta_t) noise
template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& xt, int t, const Tensor<T>& eps_pred, const Tensor<T>& noise,
                    const NoiseSchedule& s) {
  return ddpm_step_between(xt, t, t - 1, eps_pred, noise, s);
}

// Deterministic (eta = 0) DDIM update from t to t_prev.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& xt, int t, int t_prev, const Tensor<T>& eps_pred, const NoiseSchedule& s) {
  detail::same_shape(xt, eps_pred, "ddim_step");
  if (t < 1 || t > s.steps() || t_prev < 0 || t_prev >= t)
    throw DomainError("ddim_step: need 0 <= t_prev < t <= T, got t=" + std::to_string(t) +
                      ", t_prev=" + std::to_string(t_prev));
  const double ab_t = s.alpha_bar(t), ab_p = s.alpha_bar(t_prev);
  const T sa = T(std::sqrt(ab_t)), sb = T(std::sqrt(1.0 - ab_t));
  const T pa = T(std::sqrt(ab_p)), pb = T(std::sqrt(1.0 - ab_p));
  Tensor<T> out(xt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x0 = (xt[i] - sb * eps_pred[i]) / sa;
    out[i] = pa * x0 + pb * eps_pred[i];
  }
  require_finite(out, "ddim_step");
  return out;
}

// Sampler times for N steps, descending: entry i is t_{N-i} = floor((N-i) * T / N).
// Step counter n = N - i; the step taken at entry i moves to the next entry,
// or to t = 0 after the last one.
inline std::vector<int> sampler_times(int n_steps, int T) {
  if (n_steps < 1 || n_steps > T)
    throw DomainError("sampler_times: need 1 <= N <= T, got N=" + std::to_string(n_steps));
  std::vector<int> times(n_steps);
  for (int i = 0; i < n_steps; ++i) times[i] = int((long long)(n_steps - i) * T / n_steps);
  return times;
}

template <typename T>
struct SdeditStart {
  Tensor<T> x_start;
  int start_index;  // number of trailing sampler entries still to run
};

// Number of denoising steps kept for a given strength: floor(strength * N).
// A 1e-9 guard absorbs products like 0.6 * 50 landing just below an integer.
inline int sdedit_kept_steps(double strength, int n_steps) {
  if (!(strength >= 0.0 && strength <= 1.0))
    throw DomainError("sdedit: strength " + std::to_string(strength) + " outside [0, 1]");
  return int(std::floor(strength * n_steps + 1e-9));
}

// Noises the condition image to the sampler time where the kept trajectory
// begins. strength = 0 returns the image untouched with no steps left.
template <typename T>
SdeditStart<T> sdedit_init(const Tensor<T>& cond_image, double strength, const std::vector<int>& step_times,
                           Rng& rng, const NoiseSchedule& s) {
  const int n = int(step_times.size());
  const int k = sdedit_kept_steps(strength, n);
  if (k == 0) return {cond_image, 0};
  Tensor<T> eps = gaussian<T>(rng, cond_image.shape());
  return {forward_diffuse(cond_image, step_times[n - k], eps, s), k};
}

}  // namespace mcdiff
