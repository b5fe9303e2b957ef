#include "tele/tensor.hpp"

#include <atomic>
#include <cassert>
#include <sstream>
#include <unordered_set>

namespace tele {

namespace {

std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

std::shared_ptr<detail::Node> new_node(Shape shape, std::shared_ptr<const Buffer> value,
                                       bool requires_grad) {
  if (value->size() != numel(shape)) {
    throw DimensionError("data length " + std::to_string(value->size()) +
                         " does not match shape " + to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->id = next_node_id();
  return node;
}

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw DimensionError("negative dimension in " + to_string(shape));
    n *= d;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

Buffer& Node::grad_buffer() {
  if (grad.size() != value->size()) grad = Buffer::Zero(value->size());
  return grad;
}

void Node::accumulate(const Buffer& delta) {
  assert(delta.size() == value->size());
  if (grad.size() != value->size()) {
    grad = delta;
  } else {
    grad += delta;
  }
}

void Node::accumulate(Buffer&& delta) {
  assert(delta.size() == value->size());
  if (grad.size() != value->size()) {
    grad = std::move(delta);
  } else {
    grad += delta;
  }
}

}  // namespace detail

Tensor Tensor::constant(Shape shape, Buffer data) {
  return Tensor(new_node(std::move(shape), std::make_shared<const Buffer>(std::move(data)), false));
}

Tensor Tensor::zeros(Shape shape) {
  const Index n = tele::numel(shape);
  return constant(std::move(shape), Buffer::Zero(n));
}

Tensor Tensor::scalar(double value) { return constant({}, Buffer::Constant(1, value)); }

Tensor Tensor::leaf(Shape shape, Buffer data, bool requires_grad) {
  return Tensor(
      new_node(std::move(shape), std::make_shared<const Buffer>(std::move(data)), requires_grad));
}

Tensor Tensor::view_of(Shape shape, std::shared_ptr<const Buffer> storage, bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(storage), requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }

Index Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(node_->shape));
  }
  return node_->shape[axis];
}

Index Tensor::numel() const { return node_->value->size(); }
const Buffer& Tensor::data() const { return *node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
  return (*node_->value)[0];
}

Eigen::Map<const MatrixRM> Tensor::matrix() const {
  const Shape& s = shape();
  Index rows = 1;
  Index cols = 1;
  if (s.size() == 1) {
    cols = s[0];
  } else if (s.size() == 2) {
    rows = s[0];
    cols = s[1];
  } else if (!s.empty()) {
    throw DimensionError("matrix view needs rank <= 2, got " + to_string(s));
  }
  return {node_->value->data(), rows, cols};
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->leaf; }
bool Tensor::has_grad() const { return node_->grad.size() == node_->value->size(); }

const Buffer& Tensor::grad() const {
  if (!has_grad()) throw GraphError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad = Buffer::Zero(node_->value->size()); }
std::uint64_t Tensor::id() const { return node_->id; }

Tensor detail_make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                          std::function<void(const Buffer&)> backward) {
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  auto node = new_node(std::move(shape), std::make_shared<const Buffer>(std::move(value)), needs);
  node->leaf = false;
  if (needs) {
    node->parents.reserve(inputs.size());
    for (auto& t : inputs) {
      if (t.requires_grad()) node->parents.push_back(t.node());
    }
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void detail_accumulate(const Tensor& t, const Buffer& delta) {
  if (t.requires_grad()) t.node()->accumulate(delta);
}

void detail_accumulate(const Tensor& t, Buffer&& delta) {
  if (t.requires_grad()) t.node()->accumulate(std::move(delta));
}

void backward(const Tensor& loss, std::span<const Tensor> ensure_zero) {
  if (!loss.defined()) throw GraphError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  auto root = loss.node();
  if (root->consumed) throw GraphError("backward called twice on the same graph");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  if (root->requires_grad) {
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
  }
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      assert(!p->consumed || p->leaf);
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (root->requires_grad) {
    root->grad = Buffer::Constant(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* node = *it;
      if (node->leaf || !node->backward) continue;
      if (node->grad.size() != node->value->size()) continue;
      node->backward(node->grad);
    }
  }

  for (detail::Node* node : order) {
    if (node->leaf) continue;
    node->backward = nullptr;
    node->parents.clear();
    node->grad.resize(0);
    node->consumed = true;
  }
  root->consumed = true;

  for (const auto& t : ensure_zero) {
    if (t.defined() && t.requires_grad() && !t.has_grad()) t.node()->grad_buffer();
  }
}

}  // namespace tele
