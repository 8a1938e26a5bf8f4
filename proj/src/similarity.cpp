#include "mmfuse/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mmfuse/linalg.hpp"

namespace mmfuse {

namespace {

using linalg::Mat;

Mat to_mat(const diff::Tensor& t, const char* what) {
  if (t.ndim() != 2)
    throw ShapeError(str(what, ": expected a [N, d] matrix, got ",
                         diff::shape_str(t.shape())));
  return Mat(t.rows(), t.cols(), t.data());
}

void check_paired(const Mat& x, const Mat& y, const char* what) {
  if (x.rows != y.rows)
    throw ShapeError(str(what, ": row counts differ (", x.rows, " vs ", y.rows, ")"));
  if (x.rows < 2) throw ContractError(str(what, ": need at least 2 rows"));
}

double cka_of(const Mat& x, const Mat& y) {
  const Mat xc = linalg::center_columns(x);
  const Mat yc = linalg::center_columns(y);
  const double cross = linalg::frobenius_norm(linalg::matmul(yc, xc, true, false));
  const double xx = linalg::frobenius_norm(linalg::matmul(xc, xc, true, false));
  const double yy = linalg::frobenius_norm(linalg::matmul(yc, yc, true, false));
  if (xx == 0.0 || yy == 0.0) return 0.0;
  return std::clamp(cross * cross / (xx * yy), 0.0, 1.0);
}

// Centered principal-component scores covering var_keep of the variance.
Mat reduce(const Mat& x, double var_keep, const char* what) {
  const Mat xc = linalg::center_columns(x);
  const linalg::ThinSvd svd = linalg::thin_svd(xc);
  double total = 0.0;
  for (double s : svd.singular) total += s * s;
  if (total <= 1e-24) throw DomainError(str(what, ": input has no variance"));

  std::size_t keep = 0;
  double cum = 0.0;
  while (keep < svd.singular.size() && cum < var_keep * total) {
    cum += svd.singular[keep] * svd.singular[keep];
    ++keep;
  }
  Mat v(svd.right_vectors.rows, keep);
  for (std::size_t i = 0; i < v.rows; ++i)
    for (std::size_t j = 0; j < keep; ++j) v(i, j) = svd.right_vectors(i, j);
  return linalg::matmul(xc, v);
}

double svcca_of(const Mat& x, const Mat& y, double var_keep) {
  const Mat a = reduce(x, var_keep, "svcca");
  const Mat b = reduce(y, var_keep, "svcca");
  const std::size_t kept = std::max(a.cols, b.cols);
  if (x.rows < kept + 2)
    throw ContractError(str("svcca: ", x.rows, " rows cannot support ", kept,
                            " kept components"));
  const auto corr = linalg::canonical_correlations(a, b, 1e-6);
  double sum = 0.0;
  for (double c : corr) sum += c;
  return corr.empty() ? 0.0 : sum / static_cast<double>(corr.size());
}

}  // namespace

double linear_cka(const diff::Tensor& X, const diff::Tensor& Y) {
  const Mat x = to_mat(X, "linear_cka"), y = to_mat(Y, "linear_cka");
  check_paired(x, y, "linear_cka");
  return cka_of(x, y);
}

double svcca(const diff::Tensor& X, const diff::Tensor& Y, double var_keep) {
  if (var_keep <= 0.0 || var_keep > 1.0)
    throw ContractError("svcca: var_keep must lie in (0, 1]");
  const Mat x = to_mat(X, "svcca"), y = to_mat(Y, "svcca");
  check_paired(x, y, "svcca");
  return svcca_of(x, y, var_keep);
}

SimilarityReport group_similarity_report(const diff::Tensor& Z1,
                                         const diff::Tensor& Z2,
                                         const std::vector<int>& groups,
                                         double var_keep) {
  const Mat z1 = to_mat(Z1, "group_similarity_report");
  const Mat z2 = to_mat(Z2, "group_similarity_report");
  if (z1.rows != z2.rows || z1.rows != groups.size())
    throw ShapeError("group_similarity_report: rows and labels must align");

  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(i);

  auto take = [](const Mat& src, const std::vector<std::size_t>& rows) {
    Mat out(rows.size(), src.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < src.cols; ++j) out(i, j) = src(rows[i], j);
    return out;
  };

  SimilarityReport report;
  for (const auto& [label, rows] : members) {
    GroupSimilarity g;
    g.group = label;
    g.count = rows.size();
    try {
      const Mat a = take(z1, rows), b = take(z2, rows);
      check_paired(a, b, "group_similarity_report");
      const double cka = cka_of(a, b);
      const double cca = svcca_of(a, b, var_keep);
      g.cka = cka;
      g.svcca = cca;
      g.present = true;
    } catch (const Error&) {
      g.present = false;  // undersized or degenerate group: marked absent
    }
    report.groups.push_back(g);
  }
  return report;
}

}  // namespace mmfuse
