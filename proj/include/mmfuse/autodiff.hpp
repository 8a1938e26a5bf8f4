#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// Every primitive records a tape node holding the local backward rule; the
// tape is the implicit graph of nodes reachable from a result. Tensors are
// immutable after creation, so a tape is rebuilt for every forward pass and
// may be walked backward any number of times with bit-identical results.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmfuse/common.hpp"

namespace mmfuse::diff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  std::uint64_t id = 0;
  std::size_t size = 0;
  // Entries may be null when the corresponding input is an untracked
  // constant; the matching parent_grads slot is then null as well.
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates d(loss)/d(parent_i) into *parent_grads[i] given
  // d(loss)/d(output). Must add, never overwrite.
  std::function<void(const std::vector<double>& out_grad,
                     const std::vector<std::vector<double>*>& parent_grads)>
      backward;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, double v);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  const std::vector<double>& data() const;
  double value() const;  // numel-1 accessor
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t i, std::size_t j) const { return data()[i * cols() + j]; }
  bool tracked() const { return node_ != nullptr; }
  bool defined() const { return data_ != nullptr; }

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  std::shared_ptr<Node> node_;
};

// A fresh differentiation leaf sharing t's values.
Tensor make_leaf(const Tensor& t);

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);

// 2-D matrix product with optional operand transposes (gemm-style).
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);

Tensor reshape(const Tensor& a, Shape s);
// axis 0 stacks rows, axis 1 widens columns; 1-D tensors only on axis 0.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t count);

Tensor mean(const Tensor& a);                           // over all elements
Tensor sum_axis(const Tensor& a, std::size_t axis);     // 2-D only
Tensor logsumexp_axis(const Tensor& a, std::size_t axis);  // 2-D, max-shifted

// Composites (no new backward rules).
Tensor sum_all(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
// Replicate a [1, d] (or [d]) tensor into [n, d] rows via a ones matmul.
Tensor broadcast_rows(const Tensor& v, std::size_t n);
// Diagonal of a square [n, n] tensor as [n].
Tensor diag_of(const Tensor& a);

// Escape hatch for modules that need a bespoke backward rule (spectral
// functions and the like): a tracked tensor whose backward closure is given
// directly. Parent gradients arrive in the order of `parents`; untracked
// parents get a null slot. Untracked everywhere → plain constant result.
Tensor custom_node(
    Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
    std::function<void(const std::vector<double>& out_grad,
                       const std::vector<std::vector<double>*>& parent_grads)>
        backward_fn);

class GradientMap {
 public:
  // Gradient of the loss w.r.t. t; zeros when t was not reached.
  Tensor grad_of(const Tensor& t) const;

  std::unordered_map<const Node*, std::vector<double>> grads_;
};

// Walks the tape from a tracked scalar loss; each reachable node is visited
// exactly once, in reverse creation order.
GradientMap backward(const Tensor& loss);

// Max over coordinates of |g_ad - g_fd| / max(1, |g_fd|), central differences.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& point, double eps);

}  // namespace mmfuse::diff
