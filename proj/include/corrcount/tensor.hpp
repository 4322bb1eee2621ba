#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "corrcount/rng.hpp"

namespace corrcount {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

/// One node of the computation graph. Holds the forward value and, while a
/// graph is alive, strong references to its inputs plus a rule that pulls
/// this node's gradient into theirs. Nodes are immutable after construction
/// except for the grad buffer (and leaf values, which the optimizer updates
/// between graph builds).
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until backward() reaches this node
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const TensorNode& self)> backprop;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

/// Dense row-major tensor of 64-bit reals, value-semantic handle over a graph
/// node. Tracked operations record backward rules; backward(loss) populates
/// grad() on every requires_grad tensor reachable from the loss.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  /// Validates length and finiteness (NaN/Inf rejected).
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t dim(int i) const { return shape()[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const;

  bool requires_grad() const;

  std::span<const double> values() const;
  /// Leaf-only mutable access (optimizer updates, in-place test tweaks).
  std::span<double> mutable_values();
  double item() const;  // scalar tensors only
  /// Row-major element access by multi-index.
  double at(std::initializer_list<std::int64_t> idx) const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Value copy detached from any graph.
  Tensor detach(bool requires_grad = false) const;

  bool all_finite() const;

  detail::TensorNode* node() const { return node_.get(); }
  std::shared_ptr<detail::TensorNode> node_ptr() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode> n);

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

/// Reverse-mode sweep from a scalar loss. Every requires_grad tensor reachable
/// from it gets grad populated; fan-out accumulates additively. Grad buffers
/// are not cleared first, so repeated sweeps accumulate.
void backward(const Tensor& loss);

namespace detail {
/// Builds an op output node. Parents/backprop are only recorded when some
/// input needs gradients, so untracked forwards stay graph-free.
Tensor make_node(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                 std::function<void(const TensorNode&)> backprop);
}  // namespace detail

}  // namespace corrcount
