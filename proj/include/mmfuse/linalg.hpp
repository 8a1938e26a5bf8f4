#pragma once

// Plain (non-differentiating) dense double matrices and the small-matrix
// factorizations the toolkit needs: cyclic Jacobi eigendecomposition for
// symmetric matrices and thin SVD built on top of it. Sized for d <= a few
// hundred; everything here is deterministic.

#include <cstddef>
#include <vector>

#include "mmfuse/common.hpp"

namespace mmfuse::linalg {

struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), a(r * c, fill) {}
  Mat(std::size_t r, std::size_t c, std::vector<double> values);

  double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
  std::size_t size() const { return a.size(); }

  static Mat identity(std::size_t n);
};

Mat matmul(const Mat& x, const Mat& y, bool trans_x = false, bool trans_y = false);
Mat transpose(const Mat& x);

// Column means subtracted.
Mat center_columns(const Mat& x);
std::vector<double> column_means(const Mat& x);

double frobenius_norm(const Mat& x);

struct EigResult {
  std::vector<double> values;  // ascending
  Mat vectors;                 // columns are eigenvectors; A = V diag(values) V^T
};

// Cyclic Jacobi for symmetric input (symmetrized internally).
EigResult jacobi_eigh(const Mat& a);

// U f(lambda) U^T for a symmetric matrix.
template <typename F>
Mat sym_matrix_function(const EigResult& eig, F f) {
  const std::size_t n = eig.values.size();
  Mat out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k)
        acc += eig.vectors(i, k) * f(eig.values[k]) * eig.vectors(j, k);
      out(i, j) = acc;
      out(j, i) = acc;
    }
  }
  return out;
}

// Singular values of a general matrix, descending, via eigh of the smaller
// Gram matrix. Negative eigenvalues from roundoff clamp to zero.
std::vector<double> singular_values(const Mat& x);

struct ThinSvd {
  std::vector<double> singular;  // descending
  Mat right_vectors;             // [cols, k], columns are right singular vectors
};

// Right singular vectors and values of x (rows >= 1). k = min(rows, cols).
ThinSvd thin_svd(const Mat& x);

// Canonical correlations between column-centered views, each clamped to
// [0, 1], descending. ridge regularizes both covariances.
std::vector<double> canonical_correlations(const Mat& x, const Mat& y,
                                           double ridge);

}  // namespace mmfuse::linalg
