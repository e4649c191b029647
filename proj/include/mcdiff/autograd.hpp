#pragma once

// Reverse-mode gradient tape.
//
// A Tape owns every value computed in one forward pass. Ops append a node
// holding the output value and, when any input is tracked, a closure that
// pushes the node's gradient into its inputs. backward() replays the closures
// in reverse recording order, which is a valid topological order because a
// node can only reference earlier nodes. Each tape supports one backward pass.

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>

#include "mcdiff/tensor.hpp"

namespace mcdiff {

// Named trainable (or frozen) tensor with an accumulated gradient.
template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Param() = default;
  explicit Param(Tensor<T> v, bool train = true) : value(std::move(v)), trainable(train) {}

  void zero_grad() {
    if (grad.shape() != value.shape())
      grad = Tensor<T>(value.shape());
    else
      grad.fill(T(0));
  }
};

template <typename T>
class Tape;

// Handle to a tensor recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  bool requires_grad() const { return tape_->requires_grad(*this); }
  Tape<T>* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  // Backward closure; receives the tape and the id of the node it belongs to.
  using Backward = std::function<void(Tape&, std::uint32_t)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, nullptr, nullptr); }

  Var<T> leaf(Tensor<T> v, bool requires_grad = true) {
    return push(std::move(v), requires_grad && grad_enabled_, nullptr, nullptr);
  }

  // Leaf bound to a parameter. Gradients reaching it are added to p.grad at
  // the end of backward(). Frozen parameters are recorded as constants.
  Var<T> param(Param<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>(this, it->second);
    const bool track = p.trainable && grad_enabled_;
    Var<T> v = push(p.value, track, nullptr, track ? &p : nullptr);
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  // Append an op result. The closure is kept only if an input is tracked.
  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                Backward backward) {
    require_finite(value, op);
    bool track = false;
    if (grad_enabled_)
      for (const auto& in : inputs) track = track || requires_grad(in);
    return push(std::move(value), track, track ? std::move(backward) : nullptr, nullptr);
  }

  Var<T> record(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                Backward backward) {
    require_finite(value, op);
    bool track = false;
    if (grad_enabled_)
      for (const auto& in : inputs) track = track || requires_grad(in);
    return push(std::move(value), track, track ? std::move(backward) : nullptr, nullptr);
  }

  const Tensor<T>& value(const Var<T>& v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(const Var<T>& v) const { return nodes_.at(v.id()).requires_grad; }

  // Gradient buffer of an input, allocated on first use; nullptr when the
  // input is untracked (callers skip that branch).
  T* grad_buffer(const Var<T>& v) {
    Node& n = nodes_.at(v.id());
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad.data().data();
  }

  // Gradient of node `id` during replay; empty when nothing reached it.
  const Tensor<T>& grad_of(std::uint32_t id) const { return nodes_.at(id).grad; }

  // Gradient of a tracked var after backward(); empty if it was unreachable.
  const Tensor<T>& grad(const Var<T>& v) const { return nodes_.at(v.id()).grad; }

  void backward(const Var<T>& loss) {
    if (consumed_) throw Error("backward: tape already consumed");
    if (loss.tape() != this) throw Error("backward: loss recorded on another tape");
    const Tensor<T>& lv = value(loss);
    if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(lv.shape()));
    if (!requires_grad(loss)) throw Error("backward: loss is not tracked");
    consumed_ = true;
    grad_buffer(loss)[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) {
        n.backward(*this, static_cast<std::uint32_t>(i));
        n.backward = nullptr;
      }
      if (n.param) {
        require_finite(n.grad, "backward(param grad)");
        if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
        auto& pg = n.param->grad;
        for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
      }
    }
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
    Param<T>* param = nullptr;
  };

  Var<T> push(Tensor<T> v, bool requires_grad, Backward bw, Param<T>* p) {
    nodes_.push_back(Node{std::move(v), Tensor<T>(), requires_grad, std::move(bw), p});
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Param<T>*, std::uint32_t> param_nodes_;
  bool grad_enabled_;
  bool consumed_ = false;
};

}  // namespace mcdiff
