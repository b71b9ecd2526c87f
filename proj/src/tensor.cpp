#include "sdconv/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "sdconv/error.hpp"

namespace sdconv {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("shape has non-positive extent " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ",";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

namespace {

thread_local int g_no_grad_depth = 0;

std::shared_ptr<detail::Node> make_node(const Shape& shape, std::vector<float> values,
                                        bool requires_grad) {
  int64_t expect = shape_numel(shape);
  if (expect != static_cast<int64_t>(values.size())) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return wrap(make_node(shape, std::vector<float>(shape_numel(shape), 0.0f), requires_grad));
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
  return wrap(make_node(shape, std::vector<float>(shape_numel(shape), value), requires_grad));
}

Tensor Tensor::from_values(const Shape& shape, std::vector<float> values, bool requires_grad) {
  return wrap(make_node(shape, std::move(values), requires_grad));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("shape() on an undefined tensor");
  return node_->shape;
}

int64_t Tensor::size() const {
  if (!node_) throw ContractError("size() on an undefined tensor");
  return node_->numel();
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const std::vector<float>& Tensor::values() const {
  if (!node_) throw ContractError("values() on an undefined tensor");
  return node_->values;
}

std::vector<float>& Tensor::mutable_values() {
  if (!node_) throw ContractError("mutable_values() on an undefined tensor");
  return node_->values;
}

const std::vector<float>& Tensor::grad() const {
  if (!node_) throw ContractError("grad() on an undefined tensor");
  if (node_->grad.size() != node_->values.size()) {
    throw ContractError("grad() before backward populated this tensor");
  }
  return node_->grad;
}

std::vector<float>& Tensor::mutable_grad() {
  if (!node_) throw ContractError("mutable_grad() on an undefined tensor");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) return;
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

float Tensor::item() const {
  if (!node_) throw ContractError("item() on an undefined tensor");
  if (node_->numel() != 1) {
    throw ContractError("item() requires a single-element tensor, got shape " +
                        shape_to_string(node_->shape));
  }
  return node_->values[0];
}

void Tensor::set_label(const std::string& label) {
  if (node_) node_->label = label;
}

const std::string& Tensor::label() const {
  static const std::string kEmpty;
  return node_ ? node_->label : kEmpty;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward() on an undefined tensor");
  if (loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        shape_to_string(loss.shape()));
  }
  if (!loss.node()->requires_grad) {
    throw ContractError("backward() on a tensor that does not require grad");
  }

  // Iterative post-order DFS: children appear after all their parents are
  // visited, so reverse order is a valid topological order for accumulation.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  struct Frame {
    detail::Node* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node(), 0});
  visited.insert(loss.node());
  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next_parent < top.node->parents.size()) {
      detail::Node* parent = top.node->parents[top.next_parent++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.push_back({parent, 0});
      }
    } else {
      order.push_back(top.node);
      stack.pop_back();
    }
  }

  loss.node()->grad.assign(1, 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

}  // namespace sdconv
