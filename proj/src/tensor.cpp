#include "corrcount/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

#include "corrcount/error.hpp"

namespace corrcount {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace {

std::shared_ptr<detail::TensorNode> new_node(Shape shape, std::vector<double> value, bool requires_grad) {
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

void check_positive_extents(const Shape& s) {
  for (std::int64_t d : s) {
    if (d <= 0) throw ContractViolation("tensor shape has non-positive extent " + shape_str(s));
  }
}

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_positive_extents(shape);
  const auto n = shape_numel(shape);
  return wrap(new_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  check_positive_extents(shape);
  if (!std::isfinite(v)) throw ContractViolation("tensor fill value is not finite");
  const auto n = shape_numel(shape);
  return wrap(new_node(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), v), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return full({1}, v, requires_grad); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  check_positive_extents(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ContractViolation("data length " + std::to_string(data.size()) + " does not match shape " +
                            shape_str(shape));
  }
  for (double v : data) {
    if (!std::isfinite(v)) throw ContractViolation("tensor data contains a non-finite value");
  }
  return wrap(new_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
  check_positive_extents(shape);
  const auto n = shape_numel(shape);
  std::vector<double> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return wrap(new_node(std::move(shape), std::move(data), requires_grad));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractViolation("use of an empty tensor");
  return node_->shape;
}

std::int64_t Tensor::numel() const {
  if (!node_) throw ContractViolation("use of an empty tensor");
  return node_->numel();
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::values() const {
  if (!node_) throw ContractViolation("use of an empty tensor");
  return {node_->value.data(), node_->value.size()};
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw ContractViolation("use of an empty tensor");
  if (node_->backprop) throw ContractViolation("mutable_values() is restricted to leaf tensors");
  return {node_->value.data(), node_->value.size()};
}

double Tensor::item() const {
  if (!node_ || node_->numel() != 1) {
    throw ContractViolation("item() requires a single-element tensor");
  }
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) {
    throw ContractViolation("at(): index rank does not match tensor rank " + shape_str(s));
  }
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (std::int64_t i : idx) {
    if (i < 0 || i >= s[k]) throw ContractViolation("at(): index out of bounds for shape " + shape_str(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return node_->value[static_cast<std::size_t>(flat)];
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) throw ContractViolation("use of an empty tensor");
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::detach(bool requires_grad) const {
  if (!node_) return {};
  return wrap(new_node(node_->shape, node_->value, requires_grad));
}

bool Tensor::all_finite() const {
  if (!node_) return true;
  for (double v : node_->value) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace detail {

Tensor make_node(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                 std::function<void(const TensorNode&)> backprop) {
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in.requires_grad();
  auto n = new_node(std::move(shape), std::move(value), rg);
  if (rg) {
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.node_ptr());
    n->backprop = std::move(backprop);
  }
  return Tensor::wrap(std::move(n));
}

}  // namespace detail

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractViolation("backward() requires a scalar loss tensor");
  }
  if (!loss.requires_grad()) {
    throw ContractViolation("backward() requires a loss produced under gradient tracking");
  }

  // Iterative postorder DFS: parents land before children in `topo`.
  std::vector<detail::TensorNode*> topo;
  std::unordered_set<detail::TensorNode*> visited;
  struct Frame {
    detail::TensorNode* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node(), 0});
  visited.insert(loss.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::TensorNode* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }

  for (auto* n : topo) n->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

}  // namespace corrcount
