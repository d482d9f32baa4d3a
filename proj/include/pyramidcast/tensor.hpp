#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pyramidcast {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One node of the compute tape. Holds the forward value plus everything
// backward() needs: the input handles and a closure that routes this
// node's gradient into the inputs' gradient buffers.
struct Node {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  const char* op = "leaf";

  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  // Gradient slot, keyed by node identity. Allocated during backward()
  // for every requires_grad node reachable from the loss.
  std::vector<double> grad;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
};

}  // namespace detail

/// Dense row-major tensor of 64-bit floats. Copyable handle: copies share
/// the underlying node, so tensors behave as immutable values once built.
/// Only leaves are ever mutated (parameter updates between graphs) via
/// mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return node_->numel(); }
  int64_t extent(int axis) const;  // negative axis counts from the end

  std::span<const double> data() const { return node_->values; }
  std::span<double> mutable_data();  // leaf tensors only
  double value() const;              // scalar tensors only
  double at(std::initializer_list<int64_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag);  // leaf tensors only

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad_mut() { return node_->grad; }
  void clear_grad() { node_->grad.clear(); node_->grad.shrink_to_fit(); }

  detail::Node* node() const { return node_.get(); }

 private:
  friend Tensor make_op(const char*, Shape, std::vector<Tensor>,
                        std::function<void(detail::Node&)>);
  std::shared_ptr<detail::Node> node_;
};

/// Reverse topological gradient accumulation from a scalar loss.
/// Populates the grad slot of every requires_grad tensor reachable from
/// the loss; frozen tensors (requires_grad=false) receive none.
void backward(const Tensor& loss);

// ----- differentiable primitives -------------------------------------

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

/// Y[...,k] = sum_m W[k,m] * X[...,m] + b[k]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// [..., m, k] x [..., k, n] -> [..., m, n]. The right operand may be 2-D,
/// in which case it is shared across all leading indices of the left.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor swap_axes(const Tensor& x, int axis_a, int axis_b);
Tensor transpose_last2(const Tensor& x);
Tensor reshape(const Tensor& x, Shape new_shape);  // copies, row-major order
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length);
std::vector<Tensor> split(const Tensor& x, int axis,
                          const std::vector<int64_t>& sizes);

/// Gather along `axis`: out[..., i, ...] = x[..., indices[i], ...].
Tensor index_select(const Tensor& x, int axis, const std::vector<int64_t>& indices);

Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar
Tensor abs(const Tensor& x);   // subgradient 0 at 0
Tensor gelu(const Tensor& x);  // exact erf form

/// Softmax over the last axis with max-subtraction. Non-finite input is a
/// numeric error.
Tensor softmax_last(const Tensor& x);

/// Per-token normalization of the last axis with biased variance, then
/// affine gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);

/// Gather rows of `table` ([rows, width]) at `indices`; output shape is
/// lead_shape + [width]. Backward scatter-adds into exactly the referenced
/// rows.
Tensor embedding_lookup(const Tensor& table,
                        const std::vector<int64_t>& indices,
                        const Shape& lead_shape);

/// y[..., c] = x[..., c] * scale[c] + shift[c] with constant coefficients.
Tensor channel_affine(const Tensor& x, std::vector<double> scale,
                      std::vector<double> shift);

// ----- gradient checking ----------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
};

/// Compares analytic gradients of fn() (a deterministic scalar function of
/// `params`) against central finite differences
/// (f(t+eps)-f(t-eps))/(2*eps). Relative error uses denominator
/// max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const std::function<Tensor()>& fn,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double eps);

}  // namespace pyramidcast
