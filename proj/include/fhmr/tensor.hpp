#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tensor is a shared handle to a node in a dynamically recorded graph.
// Operations on tensors that require gradients record a backward closure;
// calling backward() on a scalar result accumulates gradients into every
// leaf that requires them. Storage is row-major.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fhmr {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::span<const double> values() const { return node_->value; }
  // Writes bypass the graph; only use on leaves (parameters, buffers, inputs).
  std::span<double> mutable_values() const { return node_->value; }
  double item() const;
  double operator[](int64_t i) const { return node_->value[static_cast<size_t>(i)]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  // Gradient of the last backward pass; zeros when none has reached this node.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  // Seeds d(this)/d(this) = 1 and propagates. Requires a single-element tensor.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;

  friend Tensor make_op_result(Shape, std::vector<double>, std::vector<Tensor>,
                               std::function<void(Node&)>);
};

// Records an operation result. The backward closure receives the result
// node and must accumulate into node.inputs[i]->ensure_grad() for inputs
// with requires_grad set. Nothing is recorded when gradients are disabled
// or when no input requires them.
Tensor make_op_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                      std::function<void(Node&)> backward);

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

namespace ops {

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);

// [N,K] x [K,M] -> [N,M]
Tensor matmul(const Tensor& a, const Tensor& b);
// [B,N,K] x [B,K,M] -> [B,N,M]
Tensor bmm(const Tensor& a, const Tensor& b);
// x[..., in] * w[in, out] + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& dims);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t end);
// Selects entries along axis 0.
Tensor index_rows(const Tensor& a, const std::vector<int64_t>& rows);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);
Tensor max_axis(const Tensor& a, int axis);

// Unit-normalizes and crosses 3-vectors along the last axis.
Tensor normalize_last(const Tensor& a);
Tensor cross_last(const Tensor& a, const Tensor& b);

struct Conv2dGeometry {
  int stride = 1;
  int padding = 0;
};

// x[N,Ci,H,W], w[Co,Ci,kh,kw], b[Co] (b may be undefined)
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dGeometry geo);
// x[N,Ci,H,W], w[Ci,Co,kh,kw], b[Co]; output size (H-1)*stride - 2*padding + kh
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dGeometry geo);

// Per-channel normalization of x[N,C,H,W]. In training mode batch statistics
// are used and running statistics are updated in place; otherwise the
// running statistics are used.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                    Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

}  // namespace ops
}  // namespace fhmr
