#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace sdconv {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

/// One node of the reverse-mode tape. Values are immutable once produced by
/// an op; only the optimizer writes into leaf values between steps.
struct Node {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;  // lazily allocated, same length as values
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // scatters node.grad into parents
  std::string label;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0f);
  }
};

}  // namespace detail

/**
 * @brief Dense float32 tensor with reverse-mode autodiff. The graph is owned
 *        by the tensors themselves (shared parent pointers), so each training
 *        step's tape dies when the loss tensor goes out of scope.
 */
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float value, bool requires_grad = false);
  static Tensor from_values(const Shape& shape, std::vector<float> values,
                            bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const;
  bool requires_grad() const;

  const std::vector<float>& values() const;
  /// Optimizer-only mutation hook; never call on graph interior nodes.
  std::vector<float>& mutable_values();
  const std::vector<float>& grad() const;
  std::vector<float>& mutable_grad();
  void zero_grad();

  /// Value of a single-element tensor.
  float item() const;

  void set_label(const std::string& label);
  const std::string& label() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode accumulation from a scalar loss through the whole tape.
void backward(const Tensor& loss);

/// RAII guard: while alive, ops do not record the tape (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

}  // namespace sdconv
