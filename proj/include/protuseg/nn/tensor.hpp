#pragma once

// Reverse-mode differentiable tensors over dense 3D grids.
//
// Every tensor is 5D: (batch, channels, z, y, x), x fastest. Parameters use
// the same container, e.g. a conv kernel is (out, in, k, k, k). Ops build a
// graph of shared nodes; backward() walks it in reverse topological order and
// accumulates into .grad of every node that requires gradients.

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace protuseg::nn {

using Shape = std::array<int, 5>;

std::size_t numel(const Shape& s);
std::string to_string(const Shape& s);

namespace detail {

template <typename T>
struct Node {
  Shape shape{};
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

}  // namespace detail

/// Graph recording is on by default; NoGradGuard disables it for the
/// current thread (inference, finite-difference probes).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;
  using BackwardFn = std::function<void(Node&)>;

  Tensor() = default;
  explicit Tensor(const Shape& shape, T fill = T{0}, bool requires_grad = false);
  Tensor(const Shape& shape, std::vector<T> data, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  int batch() const { return node_->shape[0]; }
  int channels() const { return node_->shape[1]; }
  int depth() const { return node_->shape[2]; }
  int height() const { return node_->shape[3]; }
  int width() const { return node_->shape[4]; }
  std::size_t spatial_size() const {
    return static_cast<std::size_t>(depth()) * height() * width();
  }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> data() { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Zero-filled on first access.
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->ensure_grad(); }
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  const std::string& op() const { return node_->op; }

  /// Value of a single-element tensor.
  T item() const;

  /// Copy of the values with no graph attached.
  Tensor detach() const;

  /// Builds an op result. Parents and the backward function are only kept
  /// when recording is enabled and at least one parent requires gradients.
  static Tensor make_result(const Shape& shape, std::vector<T> data, std::vector<Tensor> parents,
                            std::string op, BackwardFn backward);

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Seeds d(loss)/d(loss) = 1 and propagates gradients through the graph.
/// `loss` must hold exactly one element.
template <typename T>
void backward(const Tensor<T>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace protuseg::nn
