#pragma once

// Cross-modal representation-similarity metrics: linear CKA and SVCCA, plus
// the per-group report used to compare modalities within cohorts.

#include <vector>

#include "mmfuse/autodiff.hpp"
#include "mmfuse/common.hpp"

namespace mmfuse {

// ||Y'X||_F^2 / (||X'X||_F ||Y'Y||_F) on column-centered inputs (linear
// kernel, biased form). 0 when either factor has no variance; result clamped
// to [0,1].
double linear_cka(const diff::Tensor& X, const diff::Tensor& Y);

// Center each view, reduce to the top principal components reaching
// var_keep of the variance, then mean canonical correlation between the
// reduced views (ridge 1e-6, each correlation clamped to [0,1]).
double svcca(const diff::Tensor& X, const diff::Tensor& Y, double var_keep = 0.99);

struct GroupSimilarity {
  int group = 0;
  std::size_t count = 0;
  bool present = false;  // false: too few samples, metrics not fabricated
  double cka = 0.0;
  double svcca = 0.0;
};

struct SimilarityReport {
  std::vector<GroupSimilarity> groups;  // ascending group label
};

// Both metrics within each label's row subset. Groups too small to support
// the metrics are reported absent.
SimilarityReport group_similarity_report(const diff::Tensor& Z1,
                                         const diff::Tensor& Z2,
                                         const std::vector<int>& groups,
                                         double var_keep = 0.99);

}  // namespace mmfuse
