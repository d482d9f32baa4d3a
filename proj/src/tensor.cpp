#include "pyramidcast/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "pyramidcast/errors.hpp"

namespace pyramidcast {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void check_shape_valid(const Shape& shape) {
  for (int64_t e : shape) {
    if (e < 1) throw ConfigError("tensor extent must be >= 1, got shape " + shape_str(shape));
  }
}

int normalize_axis(int axis, int ndim) {
  int a = axis < 0 ? axis + ndim : axis;
  if (a < 0 || a >= ndim) {
    throw ConfigError("axis " + std::to_string(axis) + " out of range for rank " +
                      std::to_string(ndim));
  }
  return a;
}

// Ensures a grad buffer exists for accumulation.
std::vector<double>& grad_buf(detail::Node& n) {
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ----- Tensor basics ---------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_data(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return from_data(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape_valid(shape);
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ConfigError("data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.node_ = std::make_shared<detail::Node>();
  t.node_->shape = std::move(shape);
  t.node_->values = std::move(data);
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

int64_t Tensor::extent(int axis) const {
  int a = normalize_axis(axis, ndim());
  return node_->shape[a];
}

std::span<double> Tensor::mutable_data() {
  if (node_->backward_fn) {
    throw ConfigError("mutable_data is restricted to leaf tensors");
  }
  return node_->values;
}

double Tensor::value() const {
  if (numel() != 1) {
    throw ConfigError("value() requires a scalar tensor, got shape " + shape_str(shape()));
  }
  return node_->values[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  if (static_cast<int>(index.size()) != ndim()) {
    throw ConfigError("index rank mismatch");
  }
  int64_t flat = 0;
  int i = 0;
  for (int64_t idx : index) {
    flat = flat * node_->shape[i] + idx;
    ++i;
  }
  return node_->values[flat];
}

void Tensor::set_requires_grad(bool flag) {
  if (node_->backward_fn) {
    throw ConfigError("set_requires_grad is restricted to leaf tensors");
  }
  node_->requires_grad = flag;
}

Tensor make_op(const char* op, Shape shape, std::vector<Tensor> inputs,
               std::function<void(detail::Node&)> backward_fn) {
  Tensor t;
  t.node_ = std::make_shared<detail::Node>();
  t.node_->shape = std::move(shape);
  t.node_->values.resize(shape_numel(t.node_->shape));
  t.node_->op = op;
  bool needs = false;
  for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  t.node_->requires_grad = needs;
  for (const Tensor& in : inputs) t.node_->inputs.push_back(in.node_);
  if (needs) t.node_->backward_fn = std::move(backward_fn);
  return t;
}

// ----- backward --------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ConfigError("backward requires a scalar loss tensor");
  }
  detail::Node* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS over the requires_grad subgraph.
  std::vector<detail::Node*> topo;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    bool descended = false;
    while (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
        descended = true;
        break;
      }
    }
    if (!descended && (stack.back().second >= stack.back().first->inputs.size())) {
      topo.push_back(stack.back().first);
      stack.pop_back();
    }
  }

  for (detail::Node* n : topo) n->grad.assign(n->values.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ----- elementwise -----------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_op("add", a.shape(), {a, b}, [](detail::Node& n) {
    for (int k = 0; k < 2; ++k) {
      detail::Node* in = n.inputs[k].get();
      if (!in->requires_grad) continue;
      auto& g = grad_buf(*in);
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
  auto dst = out.node()->values.data();
  auto pa = a.data().data();
  auto pb = b.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) dst[i] = pa[i] + pb[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = make_op("sub", a.shape(), {a, b}, [](detail::Node& n) {
    detail::Node* ia = n.inputs[0].get();
    detail::Node* ib = n.inputs[1].get();
    if (ia->requires_grad) {
      auto& g = grad_buf(*ia);
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (ib->requires_grad) {
      auto& g = grad_buf(*ib);
      for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
  auto dst = out.node()->values.data();
  auto pa = a.data().data();
  auto pb = b.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) dst[i] = pa[i] - pb[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = make_op("mul", a.shape(), {a, b}, [](detail::Node& n) {
    detail::Node* ia = n.inputs[0].get();
    detail::Node* ib = n.inputs[1].get();
    if (ia->requires_grad) {
      auto& g = grad_buf(*ia);
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * ib->values[i];
    }
    if (ib->requires_grad) {
      auto& g = grad_buf(*ib);
      for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * ia->values[i];
    }
  });
  auto dst = out.node()->values.data();
  auto pa = a.data().data();
  auto pb = b.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) dst[i] = pa[i] * pb[i];
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = make_op("add_scalar", a.shape(), {a}, [](detail::Node& n) {
    detail::Node* in = n.inputs[0].get();
    if (!in->requires_grad) return;
    auto& g = grad_buf(*in);
    for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
  auto dst = out.node()->values.data();
  auto pa = a.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) dst[i] = pa[i] + s;
  return out;
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor out = make_op("mul_scalar", a.shape(), {a}, [s](detail::Node& n) {
    detail::Node* in = n.inputs[0].get();
    if (!in->requires_grad) return;
    auto& g = grad_buf(*in);
    for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
  });
  auto dst = out.node()->values.data();
  auto pa = a.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) dst[i] = pa[i] * s;
  return out;
}

// ----- linear / matmul ---------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.ndim() != 2) {
    throw ConfigError("linear: weight must be 2-D, got " + shape_str(weight.shape()));
  }
  const int64_t out_dim = weight.extent(0);
  const int64_t in_dim = weight.extent(1);
  if (x.extent(-1) != in_dim) {
    throw ConfigError("linear: input shape " + shape_str(x.shape()) +
                      " incompatible with weight shape " + shape_str(weight.shape()));
  }
  if (bias.ndim() != 1 || bias.extent(0) != out_dim) {
    throw ConfigError("linear: bias shape " + shape_str(bias.shape()) +
                      " incompatible with weight shape " + shape_str(weight.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  const int64_t rows = x.numel() / in_dim;

  Tensor out = make_op(
      "linear", out_shape, {x, weight, bias},
      [rows, in_dim, out_dim](detail::Node& n) {
        detail::Node* xn = n.inputs[0].get();
        detail::Node* wn = n.inputs[1].get();
        detail::Node* bn = n.inputs[2].get();
        const double* gy = n.grad.data();
        if (xn->requires_grad) {
          auto& gx = grad_buf(*xn);
          const double* w = wn->values.data();
          for (int64_t r = 0; r < rows; ++r) {
            const double* gy_r = gy + r * out_dim;
            double* gx_r = gx.data() + r * in_dim;
            for (int64_t k = 0; k < out_dim; ++k) {
              const double g = gy_r[k];
              if (g == 0.0) continue;
              const double* w_k = w + k * in_dim;
              for (int64_t m = 0; m < in_dim; ++m) gx_r[m] += g * w_k[m];
            }
          }
        }
        if (wn->requires_grad) {
          auto& gw = grad_buf(*wn);
          const double* xv = xn->values.data();
          for (int64_t r = 0; r < rows; ++r) {
            const double* gy_r = gy + r * out_dim;
            const double* x_r = xv + r * in_dim;
            for (int64_t k = 0; k < out_dim; ++k) {
              const double g = gy_r[k];
              if (g == 0.0) continue;
              double* gw_k = gw.data() + k * in_dim;
              for (int64_t m = 0; m < in_dim; ++m) gw_k[m] += g * x_r[m];
            }
          }
        }
        if (bn->requires_grad) {
          auto& gb = grad_buf(*bn);
          for (int64_t r = 0; r < rows; ++r) {
            const double* gy_r = gy + r * out_dim;
            for (int64_t k = 0; k < out_dim; ++k) gb[k] += gy_r[k];
          }
        }
      });

  double* y = out.node()->values.data();
  const double* xv = x.data().data();
  const double* w = weight.data().data();
  const double* b = bias.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x_r = xv + r * in_dim;
    double* y_r = y + r * out_dim;
    for (int64_t k = 0; k < out_dim; ++k) {
      const double* w_k = w + k * in_dim;
      double acc = b[k];
      for (int64_t m = 0; m < in_dim; ++m) acc += w_k[m] * x_r[m];
      y_r[k] = acc;
    }
  }
  return out;
}

namespace {

// C[m,n] += A[m,k] * B[k,n], optional transposes on 2-D panels.
void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k,
              int64_t n, bool trans_a, bool trans_b) {
  for (int64_t i = 0; i < m; ++i) {
    double* c_i = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = trans_a ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      const double* b_p = trans_b ? nullptr : b + p * n;
      if (trans_b) {
        for (int64_t j = 0; j < n; ++j) c_i[j] += av * b[j * k + p];
      } else {
        for (int64_t j = 0; j < n; ++j) c_i[j] += av * b_p[j];
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw ConfigError("matmul: operands must have rank >= 2, got " +
                      shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int64_t m = a.extent(-2);
  const int64_t k = a.extent(-1);
  const int64_t k2 = b.extent(-2);
  const int64_t n = b.extent(-1);
  if (k != k2) {
    throw ConfigError("matmul: inner extents differ, " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  }
  const bool b_shared = b.ndim() == 2 && a.ndim() > 2;
  if (!b_shared && a.ndim() != b.ndim()) {
    throw ConfigError("matmul: rank mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  if (!b_shared) {
    Shape lead_a(a.shape().begin(), a.shape().end() - 2);
    Shape lead_b(b.shape().begin(), b.shape().end() - 2);
    if (lead_a != lead_b) {
      throw ConfigError("matmul: leading extents differ, " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
    }
  }
  out_shape.push_back(m);
  out_shape.push_back(n);
  const int64_t batches = a.numel() / (m * k);

  Tensor out = make_op(
      "matmul", out_shape, {a, b},
      [m, k, n, batches, b_shared](detail::Node& node) {
        detail::Node* an = node.inputs[0].get();
        detail::Node* bn = node.inputs[1].get();
        const double* gy = node.grad.data();
        const double* av = an->values.data();
        const double* bv = bn->values.data();
        if (an->requires_grad) {
          auto& ga = grad_buf(*an);
          for (int64_t t = 0; t < batches; ++t) {
            const double* b_t = b_shared ? bv : bv + t * k * n;
            // dA = dY * B^T
            gemm_acc(gy + t * m * n, b_t, ga.data() + t * m * k, m, n, k, false,
                     true);
          }
        }
        if (bn->requires_grad) {
          auto& gb = grad_buf(*bn);
          for (int64_t t = 0; t < batches; ++t) {
            double* gb_t = b_shared ? gb.data() : gb.data() + t * k * n;
            // dB = A^T * dY (accumulated over batches when B is shared)
            gemm_acc(av + t * m * k, gy + t * m * n, gb_t, k, m, n, true, false);
          }
        }
      });

  double* y = out.node()->values.data();
  std::fill(y, y + out.numel(), 0.0);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (int64_t t = 0; t < batches; ++t) {
    const double* b_t = b_shared ? bv : bv + t * k * n;
    gemm_acc(av + t * m * k, b_t, y + t * m * n, m, k, n, false, false);
  }
  return out;
}

// ----- layout ops --------------------------------------------------------

namespace {

std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> s(shape.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    s[i] = acc;
    acc *= shape[i];
  }
  return s;
}

// Copies src (shape `in_shape`) into dst laid out with axes `a` and `b`
// swapped. Used for both forward and backward of swap_axes.
void swapped_copy(const double* src, double* dst, const Shape& in_shape, int a,
                  int b) {
  Shape out_shape = in_shape;
  std::swap(out_shape[a], out_shape[b]);
  auto in_strides = row_major_strides(in_shape);
  auto out_strides = row_major_strides(out_shape);
  // Stride of the OUTPUT index along each input axis.
  std::vector<int64_t> dst_stride_for_in_axis(in_shape.size());
  for (size_t i = 0; i < in_shape.size(); ++i) dst_stride_for_in_axis[i] = out_strides[i];
  std::swap(dst_stride_for_in_axis[a], dst_stride_for_in_axis[b]);

  const int nd = static_cast<int>(in_shape.size());
  std::vector<int64_t> idx(nd, 0);
  const int64_t total = shape_numel(in_shape);
  int64_t dst_off = 0;
  for (int64_t flat = 0; flat < total; ++flat) {
    dst[dst_off] = src[flat];
    // advance multi-index
    for (int ax = nd - 1; ax >= 0; --ax) {
      idx[ax]++;
      dst_off += dst_stride_for_in_axis[ax];
      if (idx[ax] < in_shape[ax]) break;
      dst_off -= dst_stride_for_in_axis[ax] * in_shape[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

Tensor swap_axes(const Tensor& x, int axis_a, int axis_b) {
  const int nd = x.ndim();
  int a = normalize_axis(axis_a, nd);
  int b = normalize_axis(axis_b, nd);
  Shape out_shape = x.shape();
  std::swap(out_shape[a], out_shape[b]);
  Shape in_shape = x.shape();

  Tensor out = make_op("swap_axes", out_shape, {x},
                       [in_shape, out_shape, a, b](detail::Node& n) {
                         detail::Node* in = n.inputs[0].get();
                         if (!in->requires_grad) return;
                         auto& g = grad_buf(*in);
                         // inverse of the forward permutation: swap back
                         std::vector<double> tmp(g.size());
                         swapped_copy(n.grad.data(), tmp.data(), out_shape, a, b);
                         for (size_t i = 0; i < g.size(); ++i) g[i] += tmp[i];
                       });
  swapped_copy(x.data().data(), out.node()->values.data(), in_shape, a, b);
  return out;
}

Tensor transpose_last2(const Tensor& x) { return swap_axes(x, -2, -1); }

Tensor reshape(const Tensor& x, Shape new_shape) {
  check_shape_valid(new_shape);
  if (shape_numel(new_shape) != x.numel()) {
    throw ConfigError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                      shape_str(new_shape));
  }
  Tensor out = make_op("reshape", new_shape, {x}, [](detail::Node& n) {
    detail::Node* in = n.inputs[0].get();
    if (!in->requires_grad) return;
    auto& g = grad_buf(*in);
    for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
  std::copy(x.data().begin(), x.data().end(), out.node()->values.begin());
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  const int nd = parts[0].ndim();
  const int a = normalize_axis(axis, nd);
  Shape out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != nd) throw ConfigError("concat: rank mismatch");
    for (int i = 0; i < nd; ++i) {
      if (i != a && p.shape()[i] != out_shape[i]) {
        throw ConfigError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                          shape_str(out_shape) + " on axis " + std::to_string(i));
      }
    }
    axis_total += p.shape()[a];
  }
  out_shape[a] = axis_total;

  // outer = product of extents before axis, inner = product after.
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= out_shape[i];
  for (int i = a + 1; i < nd; ++i) inner *= out_shape[i];
  std::vector<int64_t> part_axis(parts.size());
  for (size_t i = 0; i < parts.size(); ++i) part_axis[i] = parts[i].shape()[a];

  Tensor out = make_op(
      "concat", out_shape, parts,
      [outer, inner, part_axis, axis_total](detail::Node& n) {
        int64_t offset = 0;
        for (size_t pi = 0; pi < n.inputs.size(); ++pi) {
          detail::Node* in = n.inputs[pi].get();
          const int64_t pa = part_axis[pi];
          if (in->requires_grad) {
            auto& g = grad_buf(*in);
            for (int64_t o = 0; o < outer; ++o) {
              const double* src = n.grad.data() + (o * axis_total + offset) * inner;
              double* dst = g.data() + o * pa * inner;
              for (int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
            }
          }
          offset += pa;
        }
      });

  double* dst = out.node()->values.data();
  int64_t offset = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const double* src = parts[pi].data().data();
    const int64_t pa = part_axis[pi];
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(src + o * pa * inner, src + (o + 1) * pa * inner,
                dst + (o * axis_total + offset) * inner);
    }
    offset += pa;
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t length) {
  const int nd = x.ndim();
  const int a = normalize_axis(axis, nd);
  const int64_t extent = x.shape()[a];
  if (start < 0 || length < 1 || start + length > extent) {
    throw ConfigError("slice: range [" + std::to_string(start) + ", " +
                      std::to_string(start + length) + ") out of bounds for extent " +
                      std::to_string(extent));
  }
  Shape out_shape = x.shape();
  out_shape[a] = length;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= x.shape()[i];
  for (int i = a + 1; i < nd; ++i) inner *= x.shape()[i];

  Tensor out = make_op("slice", out_shape, {x},
                       [outer, inner, start, length, extent](detail::Node& n) {
                         detail::Node* in = n.inputs[0].get();
                         if (!in->requires_grad) return;
                         auto& g = grad_buf(*in);
                         for (int64_t o = 0; o < outer; ++o) {
                           const double* src = n.grad.data() + o * length * inner;
                           double* dst = g.data() + (o * extent + start) * inner;
                           for (int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                         }
                       });
  double* dst = out.node()->values.data();
  const double* src = x.data().data();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy(src + (o * extent + start) * inner,
              src + (o * extent + start + length) * inner, dst + o * length * inner);
  }
  return out;
}

std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<int64_t>& sizes) {
  const int a = normalize_axis(axis, x.ndim());
  int64_t total = 0;
  for (int64_t s : sizes) total += s;
  if (total != x.shape()[a]) {
    throw ConfigError("split: sizes sum to " + std::to_string(total) +
                      " but axis extent is " + std::to_string(x.shape()[a]));
  }
  std::vector<Tensor> parts;
  int64_t start = 0;
  for (int64_t s : sizes) {
    parts.push_back(slice(x, a, start, s));
    start += s;
  }
  return parts;
}

Tensor index_select(const Tensor& x, int axis, const std::vector<int64_t>& indices) {
  const int nd = x.ndim();
  const int a = normalize_axis(axis, nd);
  const int64_t extent = x.shape()[a];
  for (int64_t i : indices) {
    if (i < 0 || i >= extent) {
      throw ConfigError("index_select: index " + std::to_string(i) +
                        " out of range [0, " + std::to_string(extent) + ")");
    }
  }
  Shape out_shape = x.shape();
  out_shape[a] = static_cast<int64_t>(indices.size());
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= x.shape()[i];
  for (int i = a + 1; i < nd; ++i) inner *= x.shape()[i];
  auto idx = indices;
  const int64_t picked = static_cast<int64_t>(idx.size());

  Tensor out = make_op("index_select", out_shape, {x},
                       [outer, inner, extent, picked, idx](detail::Node& n) {
                         detail::Node* in = n.inputs[0].get();
                         if (!in->requires_grad) return;
                         auto& g = grad_buf(*in);
                         for (int64_t o = 0; o < outer; ++o) {
                           for (int64_t i = 0; i < picked; ++i) {
                             const double* src = n.grad.data() + (o * picked + i) * inner;
                             double* dst = g.data() + (o * extent + idx[i]) * inner;
                             for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
                           }
                         }
                       });
  double* dst = out.node()->values.data();
  const double* src = x.data().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < picked; ++i) {
      std::copy(src + (o * extent + idx[i]) * inner,
                src + (o * extent + idx[i] + 1) * inner,
                dst + (o * picked + i) * inner);
    }
  }
  return out;
}

// ----- reductions and pointwise nonlinearities ---------------------------

Tensor sum(const Tensor& x) {
  Tensor out = make_op("sum", {1}, {x}, [](detail::Node& n) {
    detail::Node* in = n.inputs[0].get();
    if (!in->requires_grad) return;
    auto& g = grad_buf(*in);
    const double gy = n.grad[0];
    for (size_t i = 0; i < g.size(); ++i) g[i] += gy;
  });
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.node()->values[0] = acc;
  return out;
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor out = make_op("mean", {1}, {x}, [inv](detail::Node& n) {
    detail::Node* in = n.inputs[0].get();
    if (!in->requires_grad) return;
    auto& g = grad_buf(*in);
    const double gy = n.grad[0] * inv;
    for (size_t i = 0; i < g.size(); ++i) g[i] += gy;
  });
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.node()->values[0] = acc * inv;
  return out;
}

Tensor abs(const Tensor& x) {
  Tensor out = make_op("abs", x.shape(), {x}, [](detail::Node& n) {
    detail::Node* in = n.inputs[0].get();
    if (!in->requires_grad) return;
    auto& g = grad_buf(*in);
    for (size_t i = 0; i < g.size(); ++i) {
      const double v = in->values[i];
      // subgradient 0 at ties
      const double s = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      g[i] += n.grad[i] * s;
    }
  });
  auto dst = out.node()->values.data();
  auto src = x.data().data();
  for (int64_t i = 0; i < x.numel(); ++i) dst[i] = std::fabs(src[i]);
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = make_op("gelu", x.shape(), {x}, [](detail::Node& n) {
    detail::Node* in = n.inputs[0].get();
    if (!in->requires_grad) return;
    auto& g = grad_buf(*in);
    for (size_t i = 0; i < g.size(); ++i) {
      const double v = in->values[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      g[i] += n.grad[i] * (cdf + v * pdf);
    }
  });
  auto dst = out.node()->values.data();
  auto src = x.data().data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    dst[i] = 0.5 * src[i] * (1.0 + std::erf(src[i] * kInvSqrt2));
  }
  return out;
}

Tensor softmax_last(const Tensor& x) {
  const int64_t width = x.extent(-1);
  const int64_t rows = x.numel() / width;
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw NumericError("softmax_last: non-finite input");
  }
  Tensor out = make_op("softmax_last", x.shape(), {x}, [rows, width](detail::Node& n) {
    detail::Node* in = n.inputs[0].get();
    if (!in->requires_grad) return;
    auto& g = grad_buf(*in);
    const double* y = n.values.data();
    const double* gy = n.grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y_r = y + r * width;
      const double* gy_r = gy + r * width;
      double dot = 0.0;
      for (int64_t i = 0; i < width; ++i) dot += gy_r[i] * y_r[i];
      double* g_r = g.data() + r * width;
      for (int64_t i = 0; i < width; ++i) g_r[i] += (gy_r[i] - dot) * y_r[i];
    }
  });
  double* dst = out.node()->values.data();
  const double* src = x.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x_r = src + r * width;
    double* y_r = dst + r * width;
    double mx = x_r[0];
    for (int64_t i = 1; i < width; ++i) mx = std::max(mx, x_r[i]);
    double denom = 0.0;
    for (int64_t i = 0; i < width; ++i) {
      y_r[i] = std::exp(x_r[i] - mx);
      denom += y_r[i];
    }
    const double inv = 1.0 / denom;
    for (int64_t i = 0; i < width; ++i) y_r[i] *= inv;
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int64_t width = x.extent(-1);
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  if (gain.ndim() != 1 || gain.extent(0) != width || bias.ndim() != 1 ||
      bias.extent(0) != width) {
    throw ConfigError("layer_norm: gain/bias shape must be [" + std::to_string(width) +
                      "], got " + shape_str(gain.shape()) + " and " +
                      shape_str(bias.shape()));
  }
  const int64_t rows = x.numel() / width;

  Tensor out = make_op(
      "layer_norm", x.shape(), {x, gain, bias},
      [rows, width, eps](detail::Node& n) {
        detail::Node* xn = n.inputs[0].get();
        detail::Node* gn = n.inputs[1].get();
        detail::Node* bn = n.inputs[2].get();
        const double* xv = xn->values.data();
        const double* gv = gn->values.data();
        const double* gy = n.grad.data();
        std::vector<double> xhat(width);
        for (int64_t r = 0; r < rows; ++r) {
          const double* x_r = xv + r * width;
          const double* gy_r = gy + r * width;
          double mu = 0.0;
          for (int64_t i = 0; i < width; ++i) mu += x_r[i];
          mu /= width;
          double var = 0.0;
          for (int64_t i = 0; i < width; ++i) {
            const double d = x_r[i] - mu;
            var += d * d;
          }
          var /= width;
          const double inv_sigma = 1.0 / std::sqrt(var + eps);
          for (int64_t i = 0; i < width; ++i) xhat[i] = (x_r[i] - mu) * inv_sigma;

          if (gn->requires_grad) {
            auto& gg = grad_buf(*gn);
            for (int64_t i = 0; i < width; ++i) gg[i] += gy_r[i] * xhat[i];
          }
          if (bn->requires_grad) {
            auto& gb = grad_buf(*bn);
            for (int64_t i = 0; i < width; ++i) gb[i] += gy_r[i];
          }
          if (xn->requires_grad) {
            auto& gx = grad_buf(*xn);
            double mean_dyg = 0.0, mean_dyg_xhat = 0.0;
            for (int64_t i = 0; i < width; ++i) {
              const double dyg = gy_r[i] * gv[i];
              mean_dyg += dyg;
              mean_dyg_xhat += dyg * xhat[i];
            }
            mean_dyg /= width;
            mean_dyg_xhat /= width;
            double* gx_r = gx.data() + r * width;
            for (int64_t i = 0; i < width; ++i) {
              const double dyg = gy_r[i] * gv[i];
              gx_r[i] += (dyg - mean_dyg - xhat[i] * mean_dyg_xhat) * inv_sigma;
            }
          }
        }
      });

  double* dst = out.node()->values.data();
  const double* src = x.data().data();
  const double* gv = gain.data().data();
  const double* bv = bias.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x_r = src + r * width;
    double* y_r = dst + r * width;
    double mu = 0.0;
    for (int64_t i = 0; i < width; ++i) mu += x_r[i];
    mu /= width;
    double var = 0.0;
    for (int64_t i = 0; i < width; ++i) {
      const double d = x_r[i] - mu;
      var += d * d;
    }
    var /= width;
    const double inv_sigma = 1.0 / std::sqrt(var + eps);
    for (int64_t i = 0; i < width; ++i) {
      y_r[i] = (x_r[i] - mu) * inv_sigma * gv[i] + bv[i];
    }
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& indices,
                        const Shape& lead_shape) {
  if (table.ndim() != 2) {
    throw ConfigError("embedding_lookup: table must be 2-D, got " +
                      shape_str(table.shape()));
  }
  const int64_t rows = table.extent(0);
  const int64_t width = table.extent(1);
  if (shape_numel(lead_shape) != static_cast<int64_t>(indices.size())) {
    throw ConfigError("embedding_lookup: index count does not match lead shape " +
                      shape_str(lead_shape));
  }
  for (int64_t idx : indices) {
    if (idx < 0 || idx >= rows) {
      throw ConfigError("embedding_lookup: index " + std::to_string(idx) +
                        " out of range [0, " + std::to_string(rows) + ")");
    }
  }
  Shape out_shape = lead_shape;
  out_shape.push_back(width);
  auto idx_copy = indices;

  Tensor out = make_op("embedding_lookup", out_shape, {table},
                       [idx_copy, width](detail::Node& n) {
                         detail::Node* tn = n.inputs[0].get();
                         if (!tn->requires_grad) return;
                         auto& g = grad_buf(*tn);
                         for (size_t i = 0; i < idx_copy.size(); ++i) {
                           const double* src = n.grad.data() + i * width;
                           double* dst = g.data() + idx_copy[i] * width;
                           for (int64_t j = 0; j < width; ++j) dst[j] += src[j];
                         }
                       });
  double* dst = out.node()->values.data();
  const double* src = table.data().data();
  for (size_t i = 0; i < indices.size(); ++i) {
    std::copy(src + indices[i] * width, src + (indices[i] + 1) * width,
              dst + i * width);
  }
  return out;
}

Tensor channel_affine(const Tensor& x, std::vector<double> scale,
                      std::vector<double> shift) {
  const int64_t channels = x.extent(-1);
  if (static_cast<int64_t>(scale.size()) != channels ||
      static_cast<int64_t>(shift.size()) != channels) {
    throw ConfigError("channel_affine: coefficient length does not match channels " +
                      std::to_string(channels));
  }
  Tensor out = make_op("channel_affine", x.shape(), {x},
                       [scale, channels](detail::Node& n) {
                         detail::Node* in = n.inputs[0].get();
                         if (!in->requires_grad) return;
                         auto& g = grad_buf(*in);
                         for (size_t i = 0; i < g.size(); ++i) {
                           g[i] += n.grad[i] * scale[i % channels];
                         }
                       });
  auto dst = out.node()->values.data();
  auto src = x.data().data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    dst[i] = src[i] * scale[i % channels] + shift[i % channels];
  }
  return out;
}

// ----- gradient checking ----------------------------------------------

GradCheckResult grad_check(const std::function<Tensor()>& fn,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double eps) {
  if (eps < 1e-7 || eps > 1e-3) {
    throw ConfigError("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  Tensor loss = fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);
    }
  }

  GradCheckResult result;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi].second;
    auto data = p.mutable_data();
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double f_plus = fn().value();
      data[i] = saved - eps;
      const double f_minus = fn().value();
      data[i] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = params[pi].first;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace pyramidcast
