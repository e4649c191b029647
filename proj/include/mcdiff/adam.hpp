#pragma once

// Adam with bias correction.

#include <cmath>
#include <cstdint>
#include <span>

#include "mcdiff/autograd.hpp"

namespace mcdiff {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamMoments {
  Tensor<T> m;
  Tensor<T> v;
};

// One Adam update of `param` from `grad`. `step` is the 1-based index of
// this update (already incremented by the caller).
template <typename T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, AdamMoments<T>& st, std::uint64_t step,
                 double lr, const AdamHyper& h = {}) {
  if (grad.shape() != param.shape()) throw ShapeError("adam: grad shape " + shape_str(grad.shape()) +
                                                      " vs param " + shape_str(param.shape()));
  if (st.m.empty()) st.m = Tensor<T>(param.shape());
  if (st.v.empty()) st.v = Tensor<T>(param.shape());
  if (st.m.shape() != param.shape() || st.v.shape() != param.shape())
    throw ShapeError("adam: state shape mismatch for " + shape_str(param.shape()));
  const double bc1 = 1.0 - std::pow(h.beta1, double(step));
  const double bc2 = 1.0 - std::pow(h.beta2, double(step));
  const T b1 = T(h.beta1), b2 = T(h.beta2);
  const T step_size = T(lr / bc1);
  const T inv_sqrt_bc2 = T(1.0 / std::sqrt(bc2));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    st.m[i] = b1 * st.m[i] + (T(1) - b1) * g;
    st.v[i] = b2 * st.v[i] + (T(1) - b2) * g * g;
    param[i] -= step_size * st.m[i] / (std::sqrt(st.v[i]) * inv_sqrt_bc2 + T(h.eps));
  }
}

// Optimizer over a fixed, ordered parameter list.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Param<T>*> params, AdamHyper h = {}) : params_(std::move(params)), h_(h) {
    moments_.resize(params_.size());
  }

  // Applies one update with learning rate `lr`; frozen params are skipped.
  void step(double lr) {
    ++step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Param<T>& p = *params_[i];
      if (!p.trainable) continue;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      adam_update(p.value, p.grad, moments_[i], step_, lr, h_);
    }
  }

  std::uint64_t steps() const { return step_; }
  void set_steps(std::uint64_t s) { step_ = s; }
  std::vector<AdamMoments<T>>& moments() { return moments_; }
  const std::vector<AdamMoments<T>>& moments() const { return moments_; }
  const AdamHyper& hyper() const { return h_; }

 private:
  std::vector<Param<T>*> params_;
  std::vector<AdamMoments<T>> moments_;
  AdamHyper h_;
  std::uint64_t step_ = 0;
};

}  // namespace mcdiff
