#include "mblm/tensor.hpp"

#include <unordered_set>

namespace mblm {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {
thread_local int g_no_grad_depth = 0;

std::shared_ptr<TensorNode> new_node(Shape shape, std::vector<float> data, bool requires_grad) {
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("shape " + shape_str(shape) + " does not match buffer of " +
                     std::to_string(data.size()) + " elements");
  }
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

const TensorNode& deref(const std::shared_ptr<TensorNode>& node) {
  if (!node) throw ContractError("operation on an empty tensor handle");
  return *node;
}

TensorNode& deref(std::shared_ptr<TensorNode>& node) {
  if (!node) throw ContractError("operation on an empty tensor handle");
  return *node;
}
}  // namespace

bool grad_enabled() { return g_no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<float>(n, 0.0f), requires_grad));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<float>(n, value), requires_grad));
}

Tensor Tensor::of(Shape shape, std::vector<float> values, bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(float value) { return Tensor::of({1}, {value}); }

Tensor Tensor::randn(Shape shape, float stddev, std::mt19937& rng, bool requires_grad) {
  auto n = shape_numel(shape);
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return Tensor(new_node(std::move(shape), std::move(v), requires_grad));
}

const Shape& Tensor::shape() const { return deref(node_).shape; }
int Tensor::ndim() const { return static_cast<int>(deref(node_).shape.size()); }

int Tensor::dim(int axis) const {
  const auto& s = deref(node_).shape;
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

int64_t Tensor::size() const { return static_cast<int64_t>(deref(node_).data.size()); }

std::vector<float>& Tensor::values() { return deref(node_).data; }
const std::vector<float>& Tensor::values() const { return deref(node_).data; }

float Tensor::item() const {
  const auto& n = deref(node_);
  if (n.data.size() != 1) {
    throw ContractError("item() requires a scalar, got shape " + shape_str(n.shape));
  }
  return n.data[0];
}

bool Tensor::tracked() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return tracked() && !node_->backward_fn; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<float>& Tensor::grad() const {
  const auto& n = deref(node_);
  if (n.grad.empty()) throw ContractError("no gradient accumulated on this tensor");
  return n.grad;
}

void Tensor::zero_grad() { deref(node_).grad.clear(); }

void Tensor::set_requires_grad(bool on) {
  auto& n = deref(node_);
  if (on && n.backward_fn) {
    throw ContractError("requires_grad can only be toggled on leaf tensors");
  }
  n.requires_grad = on;
}

void backward(const Tensor& loss) {
  if (!loss.valid()) throw ContractError("backward on an empty tensor handle");
  if (loss.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  // A loss with no graph attachment has nothing to propagate.
  if (!loss.tracked()) return;

  // Iterative post-order DFS over tracked parents: the resulting list is
  // topologically sorted (parents precede children), so the reverse sweep
  // visits each node exactly once with its gradient fully accumulated.
  struct Frame {
    TensorNode* node;
    size_t next_parent;
  };
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<Frame> stack;
  visited.insert(loss.node().get());
  stack.push_back({loss.node().get(), 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent == f.node->parents.size()) {
      order.push_back(f.node);
      stack.pop_back();
      continue;
    }
    TensorNode* p = f.node->parents[f.next_parent++].get();
    if (p->requires_grad && !visited.count(p)) {
      visited.insert(p);
      stack.push_back({p, 0});
    }
  }

  // Interior gradients are scratch space for this sweep; only leaves keep
  // accumulating across repeated backward calls.
  for (TensorNode* n : order) {
    if (n->backward_fn) n->grad.clear();
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

Tensor detach(const Tensor& x) {
  if (!x.valid()) throw ContractError("detach on an empty tensor handle");
  return Tensor::of(x.shape(), x.values(), false);
}

}  // namespace mblm
