#pragma once

// Frozen-representation evaluation: elastic-net logistic regression fit by
// proximal gradient, ROC AUC, random hyperparameter search over stratified
// folds, and the per-modality holdout report.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmfuse/encoder.hpp"
#include "mmfuse/synthdata.hpp"

namespace mmfuse {

enum class Penalty { L1, L2, ElasticNet };

std::string penalty_name(Penalty p);
Penalty penalty_from_name(const std::string& name);

struct ProbeConfig {
  double C = 1.0;  // inverse regularization strength
  Penalty penalty = Penalty::L2;
  double l1_ratio = 0.5;  // only consulted for ElasticNet
  std::size_t max_iter = 2000;
  double tol = 1e-10;  // stop when the objective decrease falls below this

  void validate() const;
};

// Minimizes mean log-loss + (1/C) * R(w) with R = |w|_1, 0.5*|w|_2^2, or
// l1_ratio*|w|_1 + (1-l1_ratio)*0.5*|w|_2^2. The bias is never penalized.
struct LogregModel {
  std::vector<double> weights;
  double bias = 0.0;
  double objective = 0.0;  // penalized objective at the returned iterate
  std::size_t iterations = 0;

  // w . z + b per row.
  std::vector<double> decision(const diff::Tensor& Z) const;
};

LogregModel fit_logreg(const diff::Tensor& Z, const std::vector<int>& y,
                       const ProbeConfig& cfg);

// Probability a positive outranks a negative, ties at half weight, computed
// from midranks. Quantized to the 2^-53 grid so that
// roc_auc(-s, y) == 1 - roc_auc(s, y) holds bitwise.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& y);

struct SearchSpace {
  double c_lo = 1e-6, c_hi = 1e3;  // log-uniform
  std::vector<Penalty> penalties{Penalty::L1, Penalty::L2, Penalty::ElasticNet};
  std::size_t iterations = 500;
  std::size_t folds = 5;
  // Budget for each fold-level fit during the search.
  std::size_t fit_max_iter = 400;
  double fit_tol = 1e-8;

  void validate() const;
};

struct SearchResult {
  ProbeConfig best;
  double cv_auc = 0.0;
  std::size_t draw_index = 0;  // which random draw won (ties: earliest)
};

// Shuffles each class and deals it round-robin, so per-fold class counts
// differ by at most one. Every index lands in exactly one fold.
std::vector<std::vector<std::size_t>> stratified_folds(const std::vector<int>& y,
                                                       std::size_t folds, Rng& rng);

// Random search; each draw is scored by mean validation AUC over the same
// stratified folds. Draws use pre-assigned RNG substreams, so the winner is
// identical whether iterations run sequentially or in parallel.
SearchResult search_hyperparams(const diff::Tensor& Z, const std::vector<int>& y,
                                const SearchSpace& space, std::uint64_t seed);

struct ProbeOutcome {
  ProbeConfig best;
  double cv_auc = 0.0;
  double holdout_auc = 0.0;
};

// Search on the training matrix, refit the winner on all of it, score the
// holdout. Features are z-scored with training statistics throughout.
ProbeOutcome probe_matrix(const diff::Tensor& z_train, const std::vector<int>& y_train,
                          const diff::Tensor& z_holdout,
                          const std::vector<int>& y_holdout, const SearchSpace& space,
                          std::uint64_t seed);

struct ProbeReport {
  std::array<ProbeOutcome, 2> modality;
  double mean_auc = 0.0;  // the cross-modality ordering key
};

// Encodes frozen latents for the train and holdout splits (images z-scored
// with training-split statistics, matching the trainer), drops the
// non-clinical group, and probes each modality. Train and holdout must not
// share subjects.
ProbeReport evaluate_representation(const EncoderConfig& enc_cfg,
                                    const ParamStore& params,
                                    const PairedDataset& data,
                                    const SearchSpace& space, std::uint64_t seed);

}  // namespace mmfuse
