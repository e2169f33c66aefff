#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mblm/errors.hpp"

namespace mblm {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// One node of the computation graph. Holds the forward value, an optional
// gradient buffer (empty means "no gradient accumulated yet"), and, for
// op results, the parent nodes plus a closure that pushes this node's
// gradient into them.
struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

// Graph recording can be suspended for pure inference paths.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Value-semantic handle to a graph node. fp32, row-major.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor of(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value);
  static Tensor randn(Shape shape, float stddev, std::mt19937& rng, bool requires_grad = false);

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int dim(int axis) const;
  int64_t size() const;

  std::vector<float>& values();
  const std::vector<float>& values() const;
  float item() const;

  bool tracked() const;
  bool is_leaf() const;
  bool has_grad() const;
  const std::vector<float>& grad() const;
  void zero_grad();
  void set_requires_grad(bool on);

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Reverse-mode accumulation from a scalar loss into every tracked node.
// Gradients sum into existing buffers; callers reset between steps.
void backward(const Tensor& loss);

// Same values, no graph attachment; gradients never flow through the result.
Tensor detach(const Tensor& x);

}  // namespace mblm
