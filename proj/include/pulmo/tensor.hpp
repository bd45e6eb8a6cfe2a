#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "pulmo/common.hpp"

namespace pulmo {

template <class T>
using ArrX = Eigen::Array<T, Eigen::Dynamic, 1>;

// Flat row-major storage plus a logical shape. Gradients are allocated lazily
// and accumulate additively across uses.
template <class T>
struct TensorData {
  std::vector<int> shape;
  ArrX<T> value;
  ArrX<T> grad;  // size 0 until touched by backward
  bool requires_grad = false;

  std::int64_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad = ArrX<T>::Zero(value.size());
  }
};

// Value-semantics handle sharing TensorData; ops hold inputs alive through the
// tape, and un-recorded intermediates free as handles go out of scope.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(shape);
    std::int64_t n = 1;
    for (int s : t.d_->shape) {
      if (s <= 0) throw std::logic_error("tensor: non-positive shape extent");
      n *= s;
    }
    t.d_->value = ArrX<T>::Zero(n);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  template <class U>
  static Tensor from(std::vector<int> shape, const std::vector<U>& vals, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    if (static_cast<std::int64_t>(vals.size()) != t.size())
      throw std::logic_error("tensor: value count does not match shape");
    for (std::size_t i = 0; i < vals.size(); ++i) t.value()[static_cast<Eigen::Index>(i)] = static_cast<T>(vals[i]);
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  std::int64_t size() const { return d_->size(); }
  const std::vector<int>& shape() const { return d_->shape; }
  int shape(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
  ArrX<T>& value() { return d_->value; }
  const ArrX<T>& value() const { return d_->value; }
  ArrX<T>& grad() { return d_->grad; }
  const ArrX<T>& grad() const { return d_->grad; }
  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }
  void ensure_grad() { d_->ensure_grad(); }
  std::shared_ptr<TensorData<T>> ptr() const { return d_; }
  T* data() { return d_->value.data(); }
  const T* data() const { return d_->value.data(); }

  T item() const {
    if (size() != 1) throw std::logic_error("tensor: item() on non-scalar");
    return d_->value[0];
  }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

// Records backward closures in execution order; replaying them newest-first is
// a valid topological order, so gradients are deterministic for a fixed graph.
template <class T>
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  // Seeds d(root)/d(root) = 1 and replays the recorded steps in reverse.
  void backward(Tensor<T> root) {
    if (steps_.empty()) throw std::logic_error("backward called before any recorded forward op");
    if (root.size() != 1) throw std::logic_error("backward root must be scalar");
    root.ensure_grad();
    root.grad()[0] = T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  void clear() { steps_.clear(); }
  std::size_t size() const { return steps_.size(); }

 private:
  std::vector<std::function<void()>> steps_;
};

// True when the op must participate in the backward pass.
template <class T>
inline bool tracing(const Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
  if (!tape) return false;
  for (const auto* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

// Output gradient of `t`, or nullptr when it never received one (unused branch).
template <class T>
inline const ArrX<T>* out_grad(const std::shared_ptr<TensorData<T>>& t) {
  return t->grad.size() == t->value.size() ? &t->grad : nullptr;
}

}  // namespace pulmo
