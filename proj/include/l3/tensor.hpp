#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "l3/common.hpp"
#include "l3/rng.hpp"

namespace l3 {

// Reverse-mode autodiff over a dynamically recorded graph. Each Tensor is a
// cheap handle onto a Node; ops allocate a fresh output node and, when grad
// recording is on, attach parent links plus a backward closure. Values are
// treated as immutable once an op has produced them; only leaf parameters
// are updated in place by the optimizer between steps.
template <typename T>
struct Node {
  std::vector<int64_t> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first use during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    int64_t total = 1;
    for (auto d : shape) total *= d;
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(total), T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(std::vector<int64_t> shape, std::vector<T> data,
                          bool requires_grad = false) {
    int64_t total = 1;
    for (auto d : shape) total *= d;
    check(total == static_cast<int64_t>(data.size()), ErrorKind::Dimension,
          "tensor data does not match shape");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  // Parameter initialized uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static Tensor param_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    Tensor t = zeros(std::move(shape), true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.node_->value) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int64_t>& shape() const { return node_->shape; }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return node_->numel(); }

  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  T* grad() {
    node_->ensure_grad();
    return node_->grad.data();
  }
  const std::vector<T>& grad_values() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    check(numel() == 1, ErrorKind::Dimension, "item() on non-scalar tensor");
    return node_->value[0];
  }

  std::shared_ptr<Node<T>>& node() { return node_; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Thread-local switch; generation/eval paths disable recording so ops skip
// parent bookkeeping and activations free eagerly.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {
void set_grad_enabled(bool v);
}

// Runs reverse-mode accumulation from a scalar loss. Seeds d(loss)/d(loss)=1,
// walks the recorded graph in reverse topological order.
template <typename T>
void backward(Tensor<T>& loss);

extern template void backward<float>(Tensor<float>&);
extern template void backward<double>(Tensor<double>&);

}  // namespace l3
