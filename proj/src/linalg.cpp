#include "mmfuse/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace mmfuse::linalg {

Mat::Mat(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), a(std::move(values)) {
  if (a.size() != r * c)
    throw ShapeError(str("Mat: ", r, "x", c, " wants ", r * c, " values, got ",
                         a.size()));
}

Mat Mat::identity(std::size_t n) {
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Mat matmul(const Mat& x, const Mat& y, bool trans_x, bool trans_y) {
  const std::size_t m = trans_x ? x.cols : x.rows;
  const std::size_t kx = trans_x ? x.rows : x.cols;
  const std::size_t ky = trans_y ? y.cols : y.rows;
  const std::size_t n = trans_y ? y.rows : y.cols;
  if (kx != ky)
    throw ShapeError(str("linalg::matmul: inner dimensions differ, ", x.rows,
                         "x", x.cols, (trans_x ? "^T" : ""), " vs ", y.rows,
                         "x", y.cols, (trans_y ? "^T" : "")));
  Mat out(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < kx; ++p) {
      const double xv = trans_x ? x(p, i) : x(i, p);
      if (xv == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j)
        out(i, j) += xv * (trans_y ? y(j, p) : y(p, j));
    }
  }
  return out;
}

Mat transpose(const Mat& x) {
  Mat out(x.cols, x.rows);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) out(j, i) = x(i, j);
  return out;
}

std::vector<double> column_means(const Mat& x) {
  if (x.rows == 0) throw ContractError("column_means: empty matrix");
  std::vector<double> mu(x.cols, 0.0);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) mu[j] += x(i, j);
  for (auto& v : mu) v /= static_cast<double>(x.rows);
  return mu;
}

Mat center_columns(const Mat& x) {
  auto mu = column_means(x);
  Mat out = x;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) -= mu[j];
  return out;
}

double frobenius_norm(const Mat& x) {
  double s = 0.0;
  for (double v : x.a) s += v * v;
  return std::sqrt(s);
}

EigResult jacobi_eigh(const Mat& a) {
  if (a.rows != a.cols)
    throw ShapeError(str("jacobi_eigh: matrix is ", a.rows, "x", a.cols));
  const std::size_t n = a.rows;
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(i, j) = 0.5 * (a(i, j) + a(j, i));
  Mat v = Mat::identity(n);

  double scale = 0.0;
  for (double x : m.a) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) scale = 1.0;

  const int max_sweeps = 128;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += m(i, j) * m(i, j);
    if (std::sqrt(off) <= 1e-15 * scale * n) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = m(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double app = m(p, p), aqq = m(q, q);
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0 ? 1.0 : -1.0) /
                         (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double mkp = m(k, p), mkq = m(k, q);
          m(k, p) = c * mkp - s * mkq;
          m(k, q) = s * mkp + c * mkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double mpk = m(p, k), mqk = m(q, k);
          m(p, k) = c * mpk - s * mqk;
          m(q, k) = s * mpk + c * mqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<double> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = m(i, i);
  std::sort(order.begin(), order.end(),
            [&](std::size_t x, std::size_t y) { return diag[x] < diag[y]; });

  EigResult res;
  res.values.resize(n);
  res.vectors = Mat(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    res.values[k] = diag[order[k]];
    for (std::size_t i = 0; i < n; ++i) res.vectors(i, k) = v(i, order[k]);
  }
  return res;
}

std::vector<double> singular_values(const Mat& x) {
  const bool wide = x.cols > x.rows;
  // Gram matrix on the smaller side.
  Mat g = wide ? matmul(x, x, false, true) : matmul(x, x, true, false);
  EigResult eig = jacobi_eigh(g);
  std::vector<double> sv;
  sv.reserve(eig.values.size());
  for (auto it = eig.values.rbegin(); it != eig.values.rend(); ++it)
    sv.push_back(std::sqrt(std::max(0.0, *it)));
  return sv;
}

ThinSvd thin_svd(const Mat& x) {
  if (x.rows == 0 || x.cols == 0) throw ContractError("thin_svd: empty matrix");
  Mat g = matmul(x, x, true, false);  // [cols, cols]
  EigResult eig = jacobi_eigh(g);
  const std::size_t d = x.cols;
  const std::size_t k = std::min(x.rows, x.cols);
  ThinSvd out;
  out.singular.resize(k);
  out.right_vectors = Mat(d, k);
  // eig is ascending; take the top k in descending order.
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t src = d - 1 - j;
    out.singular[j] = std::sqrt(std::max(0.0, eig.values[src]));
    for (std::size_t i = 0; i < d; ++i)
      out.right_vectors(i, j) = eig.vectors(i, src);
  }
  return out;
}

std::vector<double> canonical_correlations(const Mat& x, const Mat& y,
                                           double ridge) {
  if (x.rows != y.rows)
    throw ShapeError(str("canonical_correlations: row mismatch ", x.rows,
                         " vs ", y.rows));
  if (x.rows < 2) throw ContractError("canonical_correlations: need N >= 2");
  const double denom = static_cast<double>(x.rows - 1);
  Mat xc = center_columns(x);
  Mat yc = center_columns(y);
  Mat sxx = matmul(xc, xc, true, false);
  Mat syy = matmul(yc, yc, true, false);
  Mat sxy = matmul(xc, yc, true, false);
  for (auto& v : sxx.a) v /= denom;
  for (auto& v : syy.a) v /= denom;
  for (auto& v : sxy.a) v /= denom;
  for (std::size_t i = 0; i < sxx.rows; ++i) sxx(i, i) += ridge;
  for (std::size_t i = 0; i < syy.rows; ++i) syy(i, i) += ridge;

  auto inv_sqrt = [](const Mat& s) {
    EigResult eig = jacobi_eigh(s);
    return sym_matrix_function(eig, [](double lam) {
      return lam > 1e-12 ? 1.0 / std::sqrt(lam) : 0.0;
    });
  };
  Mat t = matmul(matmul(inv_sqrt(sxx), sxy), inv_sqrt(syy));
  std::vector<double> sv = singular_values(t);
  for (auto& v : sv) v = std::clamp(v, 0.0, 1.0);
  return sv;
}

}  // namespace mmfuse::linalg
