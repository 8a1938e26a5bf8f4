#include "mmfuse/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace mmfuse::diff {

namespace {

std::uint64_t next_node_id() {
  // Tape construction is single-threaded by contract; thread_local keeps
  // independent tapes on worker threads isolated.
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

std::shared_ptr<Node> make_node(
    std::vector<std::shared_ptr<Node>> parents, std::size_t size,
    std::function<void(const std::vector<double>&,
                       const std::vector<std::vector<double>*>&)>
        backward) {
  auto n = std::make_shared<Node>();
  n->id = next_node_id();
  n->size = size;
  n->parents = std::move(parents);
  n->backward = std::move(backward);
  return n;
}

bool any_tracked(const std::vector<const Tensor*>& ts) {
  for (const auto* t : ts)
    if (t->tracked()) return true;
  return false;
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(str(op, ": undefined tensor"));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(str(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                         shape_str(b.shape())));
}

Tensor with_node(Shape shape, std::vector<double> values,
                 std::shared_ptr<Node> node) {
  Tensor t(std::move(shape), std::move(values));
  t.node_ = std::move(node);
  return t;
}

using Backward = std::function<void(const std::vector<double>&,
                                    const std::vector<std::vector<double>*>&)>;

// Unary elementwise op with df expressed from input x and output y.
Tensor unary_elementwise(const Tensor& a, const char* op,
                         double (*fwd)(double),
                         double (*dfn)(double x, double y)) {
  check_defined(a, op);
  const auto& x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  if (!a.tracked()) return Tensor(a.shape(), std::move(y));

  auto out = std::make_shared<const std::vector<double>>(std::move(y));
  auto xin = a.data_;
  Backward bw = [xin, out, dfn](const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& pg) {
    if (!pg[0]) return;
    auto& dst = *pg[0];
    for (std::size_t i = 0; i < g.size(); ++i)
      dst[i] += g[i] * dfn((*xin)[i], (*out)[i]);
  };
  Tensor t;
  t.shape_ = a.shape();
  t.data_ = out;
  t.node_ = make_node({a.node_}, out->size(), std::move(bw));
  return t;
}

// C[m,n] (+)= opA(A) * opB(B) on raw row-major buffers.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = tb ? nullptr : b + p * n;
      double* crow = c + i * n;
      if (tb) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError(str("Tensor: zero extent in ", shape_str(shape_)));
  if (numel(shape_) != values.size())
    throw ShapeError(str("Tensor: shape ", shape_str(shape_), " wants ",
                         numel(shape_), " values, got ", values.size()));
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros(const Shape& s) {
  return Tensor(s, std::vector<double>(numel(s), 0.0));
}

Tensor Tensor::full(const Shape& s, double v) {
  return Tensor(s, std::vector<double>(numel(s), v));
}

std::size_t Tensor::rows() const {
  if (ndim() != 2) throw ShapeError(str("rows: tensor is ", shape_str(shape_)));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (ndim() != 2) throw ShapeError(str("cols: tensor is ", shape_str(shape_)));
  return shape_[1];
}

const std::vector<double>& Tensor::data() const {
  if (!data_) throw ContractError("Tensor: access to undefined tensor");
  return *data_;
}

double Tensor::value() const {
  if (size() != 1)
    throw ContractError(str("value: tensor ", shape_str(shape_), " is not scalar"));
  return data()[0];
}

Tensor make_leaf(const Tensor& t) {
  Tensor leaf;
  leaf.shape_ = t.shape_;
  leaf.data_ = t.data_;
  leaf.node_ = make_node({}, t.size(), nullptr);
  return leaf;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  check_same_shape("add", a, b);
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  if (!any_tracked({&a, &b})) return Tensor(a.shape(), std::move(y));
  Backward bw = [](const std::vector<double>& g,
                   const std::vector<std::vector<double>*>& pg) {
    for (int s = 0; s < 2; ++s)
      if (pg[s])
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[s])[i] += g[i];
  };
  return with_node(a.shape(), std::move(y),
                   make_node({a.node_, b.node_}, a.size(), std::move(bw)));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  check_same_shape("sub", a, b);
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] - b.data()[i];
  if (!any_tracked({&a, &b})) return Tensor(a.shape(), std::move(y));
  Backward bw = [](const std::vector<double>& g,
                   const std::vector<std::vector<double>*>& pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
    if (pg[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
  };
  return with_node(a.shape(), std::move(y),
                   make_node({a.node_, b.node_}, a.size(), std::move(bw)));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  check_same_shape("mul", a, b);
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  if (!any_tracked({&a, &b})) return Tensor(a.shape(), std::move(y));
  auto da = a.data_;
  auto db = b.data_;
  Backward bw = [da, db](const std::vector<double>& g,
                         const std::vector<std::vector<double>*>& pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * (*db)[i];
    if (pg[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * (*da)[i];
  };
  return with_node(a.shape(), std::move(y),
                   make_node({a.node_, b.node_}, a.size(), std::move(bw)));
}

Tensor scale(const Tensor& a, double s) {
  check_defined(a, "scale");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * s;
  if (!a.tracked()) return Tensor(a.shape(), std::move(y));
  Backward bw = [s](const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * s;
  };
  return with_node(a.shape(), std::move(y),
                   make_node({a.node_}, a.size(), std::move(bw)));
}

Tensor relu(const Tensor& a) {
  return unary_elementwise(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary_elementwise(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary_elementwise(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  check_defined(a, "log");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a.data()[i] > 0.0))
      throw DomainError(str("log: non-positive value ", a.data()[i],
                            " at index ", i));
  return unary_elementwise(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary_elementwise(
      a, "square", [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError(str("matmul: requires 2-D operands, got ",
                         shape_str(a.shape()), " and ", shape_str(b.shape())));
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t ka = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (ka != kb)
    throw ShapeError(str("matmul: inner dimensions differ, ",
                         shape_str(a.shape()), (trans_a ? "^T" : ""), " vs ",
                         shape_str(b.shape()), (trans_b ? "^T" : "")));
  std::vector<double> y(m * n);
  gemm(trans_a, trans_b, m, n, ka, a.data().data(), b.data().data(), y.data(),
       false);
  if (!any_tracked({&a, &b})) return Tensor({m, n}, std::move(y));

  auto da = a.data_;
  auto db = b.data_;
  const std::size_t k = ka;
  Backward bw = [da, db, m, n, k, trans_a, trans_b](
                    const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& pg) {
    // dAop = G * Bop^T, dBop = Aop^T * G, then undo the transposes.
    if (pg[0]) {
      if (!trans_a) {
        // dA[m,k] = G[m,n] * Bop^T[n,k]; Bop^T = trans_b ? B : B^T
        gemm(false, !trans_b, m, k, n, g.data(), db->data(), pg[0]->data(),
             true);
      } else {
        // dA[k,m] = (G * Bop^T)^T = Bop[k,n] * G^T[n,m]
        gemm(trans_b, true, k, m, n, db->data(), g.data(), pg[0]->data(),
             true);
      }
    }
    if (pg[1]) {
      if (!trans_b) {
        // dB[k,n] = Aop^T[k,m] * G[m,n]; Aop^T = trans_a ? A : A^T
        gemm(!trans_a, false, k, n, m, da->data(), g.data(), pg[1]->data(),
             true);
      } else {
        // dB[n,k] = (Aop^T * G)^T = G^T[n,m] * Aop[m,k]
        gemm(true, trans_a, n, k, m, g.data(), da->data(), pg[1]->data(),
             true);
      }
    }
  };
  return with_node({m, n}, std::move(y),
                   make_node({a.node_, b.node_}, m * n, std::move(bw)));
}

Tensor reshape(const Tensor& a, Shape s) {
  check_defined(a, "reshape");
  if (numel(s) != a.size())
    throw ShapeError(str("reshape: ", shape_str(a.shape()), " to ",
                         shape_str(s), " changes element count"));
  if (!a.tracked()) {
    Tensor t;
    t.shape_ = std::move(s);
    t.data_ = a.data_;
    return t;
  }
  Backward bw = [](const std::vector<double>& g,
                   const std::vector<std::vector<double>*>& pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
  };
  Tensor t;
  t.shape_ = std::move(s);
  t.data_ = a.data_;
  t.node_ = make_node({a.node_}, a.size(), std::move(bw));
  return t;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  const std::size_t nd = parts[0].ndim();
  for (const auto& p : parts) {
    check_defined(p, "concat");
    if (p.ndim() != nd)
      throw ShapeError("concat: mixed ranks");
  }
  if (nd == 1 && axis != 0) throw ShapeError("concat: 1-D tensors on axis 0 only");
  if (nd != 1 && nd != 2) throw ShapeError("concat: 1-D or 2-D only");

  Shape out_shape;
  std::vector<double> y;
  std::vector<std::size_t> sizes;
  if (nd == 1 || axis == 0) {
    const std::size_t width = nd == 1 ? 1 : parts[0].shape()[1];
    std::size_t rows = 0;
    for (const auto& p : parts) {
      const std::size_t w = nd == 1 ? 1 : p.shape()[1];
      if (w != width)
        throw ShapeError(str("concat: width mismatch ", shape_str(p.shape()),
                             " vs ", shape_str(parts[0].shape())));
      rows += p.shape()[0];
      sizes.push_back(p.size());
    }
    y.reserve(rows * width);
    for (const auto& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
    out_shape = nd == 1 ? Shape{rows} : Shape{rows, width};
    bool tracked = false;
    for (const auto& p : parts) tracked = tracked || p.tracked();
    if (!tracked) return Tensor(out_shape, std::move(y));
    std::vector<std::shared_ptr<Node>> parents;
    for (const auto& p : parts) parents.push_back(p.node_);
    Backward bw = [sizes](const std::vector<double>& g,
                          const std::vector<std::vector<double>*>& pg) {
      std::size_t off = 0;
      for (std::size_t s = 0; s < sizes.size(); ++s) {
        if (pg[s])
          for (std::size_t i = 0; i < sizes[s]; ++i) (*pg[s])[i] += g[off + i];
        off += sizes[s];
      }
    };
    return with_node(out_shape, std::move(y),
                     make_node(std::move(parents), rows * width, std::move(bw)));
  }

  // axis == 1, 2-D: widen columns.
  const std::size_t rows = parts[0].shape()[0];
  std::size_t width = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.shape()[0] != rows)
      throw ShapeError(str("concat: row mismatch ", shape_str(p.shape()),
                           " vs ", shape_str(parts[0].shape())));
    widths.push_back(p.shape()[1]);
    width += p.shape()[1];
  }
  y.resize(rows * width);
  std::size_t coff = 0;
  for (std::size_t s = 0; s < parts.size(); ++s) {
    const auto& d = parts[s].data();
    for (std::size_t i = 0; i < rows; ++i)
      std::copy(d.begin() + i * widths[s], d.begin() + (i + 1) * widths[s],
                y.begin() + i * width + coff);
    coff += widths[s];
  }
  out_shape = {rows, width};
  bool tracked = false;
  for (const auto& p : parts) tracked = tracked || p.tracked();
  if (!tracked) return Tensor(out_shape, std::move(y));
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) parents.push_back(p.node_);
  Backward bw = [rows, width, widths](
                    const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& pg) {
    std::size_t coff = 0;
    for (std::size_t s = 0; s < widths.size(); ++s) {
      if (pg[s]) {
        auto& dst = *pg[s];
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < widths[s]; ++j)
            dst[i * widths[s] + j] += g[i * width + coff + j];
      }
      coff += widths[s];
    }
  };
  return with_node(out_shape, std::move(y),
                   make_node(std::move(parents), rows * width, std::move(bw)));
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t count) {
  check_defined(a, "slice");
  if (a.ndim() != 1 && a.ndim() != 2)
    throw ShapeError("slice: 1-D or 2-D only");
  if (axis >= a.ndim()) throw ShapeError("slice: axis out of range");
  if (count == 0 || start + count > a.shape()[axis])
    throw ShapeError(str("slice: range [", start, ",", start + count,
                         ") exceeds extent ", a.shape()[axis], " of ",
                         shape_str(a.shape())));
  const std::size_t in_rows = a.shape()[0];
  const std::size_t in_cols = a.ndim() == 2 ? a.shape()[1] : 1;
  Shape out_shape = a.shape();
  out_shape[axis] = count;
  std::vector<double> y;
  y.reserve(numel(out_shape));
  if (axis == 0) {
    y.assign(a.data().begin() + start * in_cols,
             a.data().begin() + (start + count) * in_cols);
  } else {
    for (std::size_t i = 0; i < in_rows; ++i)
      y.insert(y.end(), a.data().begin() + i * in_cols + start,
               a.data().begin() + i * in_cols + start + count);
  }
  if (!a.tracked()) return Tensor(out_shape, std::move(y));
  Backward bw = [axis, start, count, in_rows, in_cols](
                    const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& pg) {
    if (!pg[0]) return;
    auto& dst = *pg[0];
    if (axis == 0) {
      for (std::size_t i = 0; i < g.size(); ++i) dst[start * in_cols + i] += g[i];
    } else {
      for (std::size_t i = 0; i < in_rows; ++i)
        for (std::size_t j = 0; j < count; ++j)
          dst[i * in_cols + start + j] += g[i * count + j];
    }
  };
  return with_node(out_shape, std::move(y),
                   make_node({a.node_}, numel(out_shape), std::move(bw)));
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  std::vector<double> y{acc * inv};
  if (!a.tracked()) return Tensor({1}, std::move(y));
  const std::size_t n = a.size();
  Backward bw = [inv, n](const std::vector<double>& g,
                         const std::vector<std::vector<double>*>& pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < n; ++i) (*pg[0])[i] += g[0] * inv;
  };
  return with_node({1}, std::move(y), make_node({a.node_}, 1, std::move(bw)));
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  check_defined(a, "sum_axis");
  if (a.ndim() != 2) throw ShapeError("sum_axis: 2-D only");
  if (axis > 1) throw ShapeError("sum_axis: axis must be 0 or 1");
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t out_n = axis == 0 ? c : r;
  std::vector<double> y(out_n, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      y[axis == 0 ? j : i] += a.data()[i * c + j];
  if (!a.tracked()) return Tensor({out_n}, std::move(y));
  Backward bw = [axis, r, c](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& pg) {
    if (!pg[0]) return;
    auto& dst = *pg[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        dst[i * c + j] += g[axis == 0 ? j : i];
  };
  return with_node({out_n}, std::move(y),
                   make_node({a.node_}, out_n, std::move(bw)));
}

Tensor logsumexp_axis(const Tensor& a, std::size_t axis) {
  check_defined(a, "logsumexp_axis");
  if (a.ndim() != 2) throw ShapeError("logsumexp_axis: 2-D only");
  if (axis > 1) throw ShapeError("logsumexp_axis: axis must be 0 or 1");
  const std::size_t r = a.rows(), c = a.cols();
  const std::size_t out_n = axis == 0 ? c : r;
  const std::size_t red_n = axis == 0 ? r : c;
  const auto& x = a.data();
  auto at = [&](std::size_t o, std::size_t k) {
    return axis == 0 ? x[k * c + o] : x[o * c + k];
  };
  std::vector<double> y(out_n);
  for (std::size_t o = 0; o < out_n; ++o) {
    double m = at(o, 0);
    for (std::size_t k = 1; k < red_n; ++k) m = std::max(m, at(o, k));
    double s = 0.0;
    for (std::size_t k = 0; k < red_n; ++k) s += std::exp(at(o, k) - m);
    y[o] = m + std::log(s);
  }
  if (!a.tracked()) return Tensor({out_n}, std::move(y));
  auto xin = a.data_;
  auto out = std::make_shared<const std::vector<double>>(y);
  Backward bw = [axis, r, c, out_n, red_n, xin, out](
                    const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& pg) {
    if (!pg[0]) return;
    auto& dst = *pg[0];
    const auto& x = *xin;
    for (std::size_t o = 0; o < out_n; ++o) {
      const double lse = (*out)[o];
      for (std::size_t k = 0; k < red_n; ++k) {
        const std::size_t idx = axis == 0 ? k * c + o : o * c + k;
        dst[idx] += g[o] * std::exp(x[idx] - lse);
      }
    }
  };
  return with_node({out_n}, std::move(y),
                   make_node({a.node_}, out_n, std::move(bw)));
}

Tensor sum_all(const Tensor& a) {
  return scale(mean(a), static_cast<double>(a.size()));
}

Tensor add_scalar(const Tensor& a, double s) {
  return add(a, Tensor::full(a.shape(), s));
}

Tensor broadcast_rows(const Tensor& v, std::size_t n) {
  check_defined(v, "broadcast_rows");
  Tensor row = v.ndim() == 1 ? reshape(v, {1, v.size()}) : v;
  if (row.rows() != 1) throw ShapeError("broadcast_rows: expects a single row");
  return matmul(Tensor::full({n, 1}, 1.0), row);
}

Tensor diag_of(const Tensor& a) {
  if (a.ndim() != 2 || a.rows() != a.cols())
    throw ShapeError(str("diag_of: square 2-D required, got ", shape_str(a.shape())));
  const std::size_t n = a.rows();
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  return sum_axis(mul(a, Tensor({n, n}, std::move(eye))), 1);
}

Tensor custom_node(Shape shape, std::vector<double> values,
                   const std::vector<Tensor>& parents,
                   std::function<void(const std::vector<double>&,
                                      const std::vector<std::vector<double>*>&)>
                       backward_fn) {
  if (numel(shape) != values.size())
    throw ShapeError(str("custom_node: ", numel(shape), " elements expected for ",
                         shape_str(shape), ", got ", values.size()));
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(parents.size());
  for (const auto& p : parents) ptrs.push_back(&p);
  if (!any_tracked(ptrs)) return Tensor(std::move(shape), std::move(values));

  std::vector<std::shared_ptr<Node>> parent_nodes;
  parent_nodes.reserve(parents.size());
  for (const auto& p : parents) parent_nodes.push_back(p.node_);
  const std::size_t n = values.size();
  return with_node(std::move(shape), std::move(values),
                   make_node(std::move(parent_nodes), n, std::move(backward_fn)));
}

Tensor GradientMap::grad_of(const Tensor& t) const {
  if (!t.tracked())
    throw ContractError("grad_of: tensor is not tracked on any tape");
  auto it = grads_.find(t.node_.get());
  if (it == grads_.end()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), it->second);
}

GradientMap backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1 || !loss.tracked())
    throw ContractError("backward: loss must be a tracked scalar");

  // Collect reachable nodes, then sweep in reverse creation order; creation
  // ids are strictly increasing so this is a topological order.
  std::vector<Node*> order;
  std::unordered_map<const Node*, bool> seen;
  std::vector<Node*> stack{loss.node_.get()};
  seen[loss.node_.get()] = true;
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p && !seen[p.get()]) {
        seen[p.get()] = true;
        stack.push_back(p.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });

  GradientMap gm;
  gm.grads_.reserve(order.size());
  gm.grads_[loss.node_.get()] = {1.0};
  for (Node* n : order) {
    auto git = gm.grads_.find(n);
    if (git == gm.grads_.end()) continue;  // not reachable from the seed
    if (!n->backward) continue;            // leaf
    // Element references survive rehashing; iterators do not.
    const std::vector<double>& out_grad = git->second;
    std::vector<std::vector<double>*> parent_grads(n->parents.size(), nullptr);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      const auto& p = n->parents[i];
      if (!p) continue;
      auto& slot = gm.grads_[p.get()];
      if (slot.empty()) slot.assign(p->size, 0.0);
      parent_grads[i] = &slot;
    }
    n->backward(out_grad, parent_grads);
  }
  return gm;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& point, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3))
    throw ContractError(str("grad_check: eps ", eps, " outside [1e-7, 1e-3]"));
  Tensor leaf = make_leaf(point);
  Tensor y = f(leaf);
  if (y.size() != 1) throw ContractError("grad_check: f must return a scalar");
  Tensor g_ad = backward(y).grad_of(leaf);

  double worst = 0.0;
  std::vector<double> base = point.data();
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> hi = base, lo = base;
    hi[i] += eps;
    lo[i] -= eps;
    const double fhi = f(Tensor(point.shape(), std::move(hi))).value();
    const double flo = f(Tensor(point.shape(), std::move(lo))).value();
    const double g_fd = (fhi - flo) / (2.0 * eps);
    const double err = std::abs(g_ad.data()[i] - g_fd) / std::max(1.0, std::abs(g_fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace mmfuse::diff
