#pragma once

// Dense row-major tensors with tape-based reverse-mode autodiff.
// A Tensor is a cheap handle: shape plus shared data/grad buffers. Ops build
// a graph of GradNodes; backward() replays it in reverse topological order.
// The tape is rebuilt on every forward pass.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <unordered_set>
#include <vector>

#include "lnablate/errors.hpp"

namespace lnablate {

// All tensor buffers share one fixed alignment so kernel results never
// depend on where the heap happens to place an allocation. Vectorized code
// paths otherwise change with pointer alignment, which breaks bit-identical
// reruns within a process.
template <typename T, std::size_t Align>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}

  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(Align));
  }

  bool operator==(const AlignedAllocator&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T, 64>>;

// Gradient recording can be switched off for inference / evaluation paths.
inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct Tensor;

// One tape entry: the inputs that produced a tensor and the rule that
// scatters the output gradient back into them.
template <typename T>
struct GradNode {
  std::vector<Tensor<T>> parents;
  std::function<void()> backward;
};

template <typename T>
struct Tensor {
  using Scalar = T;

  std::vector<int64_t> shape;
  std::shared_ptr<Buffer<T>> data;
  std::shared_ptr<Buffer<T>> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::shared_ptr<GradNode<T>> node;

  Tensor() = default;

  int64_t numel() const {
    if (shape.empty()) return 0;
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
  }

  bool defined() const { return static_cast<bool>(data); }

  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }
  T* grad_ptr() { return grad->data(); }
  const T* grad_ptr() const { return grad->data(); }

  T& operator[](int64_t i) { return (*data)[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return (*data)[static_cast<size_t>(i)]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item(): tensor is not a scalar");
    return (*data)[0];
  }

  static Tensor zeros(std::vector<int64_t> shape) {
    return full(std::move(shape), T(0));
  }

  static Tensor ones(std::vector<int64_t> shape) {
    return full(std::move(shape), T(1));
  }

  static Tensor full(std::vector<int64_t> shape, T value) {
    check_shape(shape);
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<Buffer<T>>(static_cast<size_t>(t.numel()), value);
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, std::vector<T> values) {
    check_shape(shape);
    Tensor t;
    t.shape = std::move(shape);
    int64_t n = t.numel();
    if (static_cast<int64_t>(values.size()) != n) {
      throw ShapeError("from(): value count does not match shape product");
    }
    t.data = std::make_shared<Buffer<T>>(values.begin(), values.end());
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  // Gaussian init. Draws in double so float and double builds see the same
  // sequence (up to rounding), for a given engine state.
  static Tensor randn(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev, double mean = 0.0) {
    Tensor t = zeros(std::move(shape));
    std::normal_distribution<double> dist(mean, stddev);
    for (auto& v : *t.data) v = static_cast<T>(dist(rng));
    return t;
  }

  // Deep copy of the values only; the copy is a fresh leaf.
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<Buffer<T>>(*data);
    return t;
  }

  void set_requires_grad() {
    requires_grad = true;
    if (!grad) grad = std::make_shared<Buffer<T>>(data->size(), T(0));
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  bool all_finite() const {
    for (T v : *data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

 private:
  static void check_shape(const std::vector<int64_t>& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
    for (int64_t e : shape) {
      if (e <= 0) throw ShapeError("tensor extents must be positive");
    }
  }
};

namespace detail {

// Allocates the output of an op and wires up the tape entry when any input
// is being tracked. The caller fills data and assigns node->backward.
template <typename T>
Tensor<T> op_output(std::vector<int64_t> shape, std::initializer_list<Tensor<T>> parents) {
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  if (!g_grad_enabled) return out;
  bool tracked = false;
  for (const Tensor<T>& p : parents) tracked = tracked || p.requires_grad;
  if (!tracked) return out;
  out.requires_grad = true;
  out.grad = std::make_shared<Buffer<T>>(out.data->size(), T(0));
  out.node = std::make_shared<GradNode<T>>();
  out.node->parents.assign(parents);
  return out;
}

}  // namespace detail

// Reverse-mode sweep from a scalar root. `seed` is the incoming gradient of
// the root (1 by default; 1/grad_accum for accumulated micro-batches).
// Each node runs exactly once, in reverse topological order.
template <typename T>
void backward(Tensor<T>& root, T seed = T(1)) {
  if (root.numel() != 1) throw ShapeError("backward(): root must be scalar");
  if (!root.requires_grad) throw StateError("backward(): root does not require grad");

  std::vector<GradNode<T>*> order;
  std::unordered_set<GradNode<T>*> seen;
  // Iterative post-order DFS over parent links.
  struct Frame {
    GradNode<T>* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  if (root.node) {
    seen.insert(root.node.get());
    stack.push_back({root.node.get(), 0});
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      GradNode<T>* p = f.node->parents[f.next_parent].node.get();
      ++f.next_parent;
      if (p != nullptr && seen.insert(p).second) {
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  (*root.grad)[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward();
  }
}

}  // namespace lnablate
