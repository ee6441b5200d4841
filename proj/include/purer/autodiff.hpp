#pragma once

// Reverse-mode automatic differentiation on dense tensors.
//
// Every primitive's backward rule is itself written in terms of primitives, so
// gradients can be recorded on the tape (create_graph) and differentiated
// again. That is what the second-order inner loop and the pixel gradients of
// the outer loss need.

#include "purer/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace purer::ad {

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Whether newly created ops are recorded on the tape (per thread).
inline bool grad_mode_enabled() { return detail::grad_enabled; }

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(detail::grad_enabled) { detail::grad_enabled = enabled; }
  ~GradModeGuard() { detail::grad_enabled = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

struct NoGradGuard : GradModeGuard {
  NoGradGuard() : GradModeGuard(false) {}
};

template <typename Scalar>
class Var;

template <typename Scalar>
struct Node {
  // (output gradient, which parents need one) -> one gradient per parent.
  using BackwardFn = std::function<std::vector<Var<Scalar>>(const Var<Scalar>&, const std::vector<bool>&)>;

  Tensor<Scalar> value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // An undefined Var in the returned list means "no contribution".
  BackwardFn backward;
  const char* op = "leaf";
};

/// Handle to a tape node. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Tensor<Scalar> value) { return leaf(std::move(value), false); }
  static Var parameter(Tensor<Scalar> value) { return leaf(std::move(value), true); }
  static Var scalar(Scalar v) { return constant(Tensor<Scalar>::scalar(v)); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<Scalar>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  Index size() const { return node_->value.size(); }
  Scalar item() const { return node_->value.item(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const NodePtr& node() const { return node_; }

  /// Same value, cut from the tape.
  Var detach() const { return constant(node_->value); }

 private:
  static Var leaf(Tensor<Scalar> value, bool requires_grad) {
    auto n = std::make_shared<Node<Scalar>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  NodePtr node_;
};

/// Gradients of a single-element `output` with respect to `inputs`.
/// With create_graph the returned gradients are themselves on the tape.
/// Inputs the output does not depend on receive zeros.
template <typename Scalar>
std::vector<Var<Scalar>> grad(const Var<Scalar>& output, const std::vector<Var<Scalar>>& inputs,
                              bool create_graph = false);

// Elementwise, identical shapes.
template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> neg(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& a, Scalar s);
template <typename Scalar> Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s);
template <typename Scalar> Var<Scalar> exp(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> log(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> pow(const Var<Scalar>& a, Scalar p);
template <typename Scalar> Var<Scalar> relu(const Var<Scalar>& a);

// Reductions and their adjoint broadcasts.
template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& a);
/// Sums out `axis`; the axis is removed from the shape.
template <typename Scalar> Var<Scalar> sum_axis(const Var<Scalar>& a, Index axis);
/// Inserts a new `axis` of extent `n` by repetition.
template <typename Scalar> Var<Scalar> expand_axis(const Var<Scalar>& a, Index axis, Index n);
/// Broadcasts a single-element tensor to `shape`.
template <typename Scalar> Var<Scalar> fill(const Var<Scalar>& a, const Shape& shape);
template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& a, const Shape& shape);

// 2-d linear algebra.
template <typename Scalar> Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> transpose(const Var<Scalar>& a);

// Convolution with "same" padding, stride 1, odd square kernels.
// x: [B, Cin, H, W], w: [Cout, Cin, k, k] -> [B, Cout, H, W]
template <typename Scalar> Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w);
/// Adjoint of conv2d in the kernel: <conv2d(x, w), g> = <w, conv2d_weight_grad(x, g, k)>.
template <typename Scalar> Var<Scalar> conv2d_weight_grad(const Var<Scalar>& x, const Var<Scalar>& g, Index k);
/// w[o, i, a, b] -> w[i, o, k-1-a, k-1-b]. An involution.
template <typename Scalar> Var<Scalar> flip_transpose(const Var<Scalar>& w);

using IndexList = std::shared_ptr<const std::vector<Index>>;

/// out[i] = a[idx[i]] reshaped to `shape`.
template <typename Scalar> Var<Scalar> gather(const Var<Scalar>& a, IndexList idx, const Shape& shape);
/// out[idx[i]] += a[i] into a zero tensor of `shape`. Adjoint of gather.
template <typename Scalar> Var<Scalar> scatter(const Var<Scalar>& a, IndexList idx, const Shape& shape);

/// 2x2 max pooling, stride 2, ceil mode (a trailing odd row/column pools alone).
template <typename Scalar> Var<Scalar> max_pool2x2(const Var<Scalar>& x);

template <typename Scalar> Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar> Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar> Var<Scalar> operator*(const Var<Scalar>& a, const Var<Scalar>& b) { return mul(a, b); }
template <typename Scalar> Var<Scalar> operator/(const Var<Scalar>& a, const Var<Scalar>& b) { return div(a, b); }
template <typename Scalar> Var<Scalar> operator-(const Var<Scalar>& a) { return neg(a); }

}  // namespace purer::ad
