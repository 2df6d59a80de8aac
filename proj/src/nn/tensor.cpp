#include "protuseg/nn/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

namespace protuseg::nn {

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string to_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

namespace {
thread_local bool t_grad_enabled = true;

void validate_shape(const Shape& s) {
  for (int d : s) {
    if (d < 1) throw std::invalid_argument("tensor shape components must be >= 1, got " + to_string(s));
  }
}
}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(const Shape& shape, T fill, bool requires_grad) : node_(std::make_shared<Node>()) {
  validate_shape(shape);
  node_->shape = shape;
  node_->data.assign(nn::numel(shape), fill);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(const Shape& shape, std::vector<T> data, bool requires_grad) : node_(std::make_shared<Node>()) {
  validate_shape(shape);
  if (data.size() != nn::numel(shape)) {
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                                to_string(shape));
  }
  node_->shape = shape;
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::make_result(const Shape& shape, std::vector<T> data, std::vector<Tensor> parents,
                                 std::string op, BackwardFn backward) {
  Tensor out(shape, std::move(data), false);
  out.node_->op = std::move(op);
  if (!grad_enabled()) return out;
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Tensor& p) { return p.defined() && p.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->backward = std::move(backward);
  out.node_->parents.reserve(parents.size());
  for (auto& p : parents) out.node_->parents.push_back(p.node_);
  return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward() needs a single-element loss");
  using Node = detail::Node<T>;
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace protuseg::nn
