#include "mmfuse/probe.hpp"

#include "mmfuse/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace mmfuse {

using diff::Tensor;

std::string penalty_name(Penalty p) {
  switch (p) {
    case Penalty::L1: return "l1";
    case Penalty::L2: return "l2";
    case Penalty::ElasticNet: return "elasticnet";
  }
  throw ContractError("penalty_name: unknown penalty");
}

Penalty penalty_from_name(const std::string& name) {
  if (name == "l1") return Penalty::L1;
  if (name == "l2") return Penalty::L2;
  if (name == "elasticnet") return Penalty::ElasticNet;
  throw ConfigError(str("unknown penalty '", name, "'; use l1, l2, or elasticnet"));
}

void ProbeConfig::validate() const {
  if (!(C > 0.0)) throw ConfigError("probe: C must be positive");
  if (l1_ratio < 0.0 || l1_ratio > 1.0)
    throw ConfigError("probe: l1_ratio must lie in [0, 1]");
  if (max_iter == 0) throw ConfigError("probe: max_iter must be positive");
  if (tol < 0.0) throw ConfigError("probe: tol must be non-negative");
}

void SearchSpace::validate() const {
  if (!(c_lo > 0.0) || c_hi < c_lo)
    throw ConfigError("search: need 0 < c_lo <= c_hi");
  if (penalties.empty()) throw ConfigError("search: penalty set is empty");
  if (iterations == 0) throw ConfigError("search: iterations must be positive");
  if (folds < 2) throw ConfigError("search: need at least 2 folds");
  if (fit_max_iter == 0) throw ConfigError("search: fit_max_iter must be positive");
  if (fit_tol < 0.0) throw ConfigError("search: fit_tol must be non-negative");
}

namespace {

void check_binary(const std::vector<int>& y, const char* where) {
  std::size_t pos = 0, neg = 0;
  for (int v : y) {
    if (v == 1)
      ++pos;
    else if (v == 0)
      ++neg;
    else
      throw ContractError(str(where, ": labels must be 0/1, got ", v));
  }
  if (pos == 0 || neg == 0)
    throw ContractError(str(where, ": both classes must be present"));
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct PenaltyWeights {
  double l1 = 0.0, l2 = 0.0;
};

PenaltyWeights penalty_weights(const ProbeConfig& cfg) {
  const double alpha = 1.0 / cfg.C;
  switch (cfg.penalty) {
    case Penalty::L1: return {alpha, 0.0};
    case Penalty::L2: return {0.0, alpha};
    case Penalty::ElasticNet:
      return {alpha * cfg.l1_ratio, alpha * (1.0 - cfg.l1_ratio)};
  }
  throw ContractError("penalty_weights: unknown penalty");
}

}  // namespace

std::vector<double> LogregModel::decision(const Tensor& Z) const {
  if (Z.ndim() != 2 || Z.cols() != weights.size())
    throw ShapeError(str("decision: expected [*, ", weights.size(), "] features, got ",
                         diff::shape_str(Z.shape())));
  std::vector<double> s(Z.rows(), bias);
  for (std::size_t i = 0; i < Z.rows(); ++i)
    for (std::size_t j = 0; j < weights.size(); ++j)
      s[i] += Z.data()[i * weights.size() + j] * weights[j];
  return s;
}

LogregModel fit_logreg(const Tensor& Z, const std::vector<int>& y,
                       const ProbeConfig& cfg) {
  cfg.validate();
  if (Z.ndim() != 2) throw ShapeError("fit_logreg: features must be [N, d]");
  const std::size_t n = Z.rows(), d = Z.cols();
  if (y.size() != n)
    throw ShapeError(str("fit_logreg: ", n, " rows but ", y.size(), " labels"));
  check_binary(y, "fit_logreg");
  for (double v : Z.data())
    if (!std::isfinite(v)) throw DomainError("fit_logreg: non-finite feature value");

  const auto [l1, l2] = penalty_weights(cfg);
  const double* z = Z.data().data();

  // Smooth part: mean log-loss + 0.5*l2*|w|^2. The l1 term rides on the
  // proximal step.
  auto scores = [&](const std::vector<double>& w, double b, std::vector<double>& s) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = b;
      for (std::size_t j = 0; j < d; ++j) acc += z[i * d + j] * w[j];
      s[i] = acc;
    }
  };
  auto data_loss = [&](const std::vector<double>& s, double shift) {
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double si = s[i] + shift;
      loss += y[i] == 1 ? softplus(-si) : softplus(si);
    }
    return loss / static_cast<double>(n);
  };
  auto l2_at = [&](const std::vector<double>& w) {
    double sq = 0.0;
    for (double wj : w) sq += wj * wj;
    return 0.5 * l2 * sq;
  };
  auto l1_at = [&](const std::vector<double>& w) {
    double a = 0.0;
    for (double wj : w) a += std::abs(wj);
    return l1 * a;
  };

  // Alternating blocks with separate backtracked step sizes: the l2 penalty
  // can make the weight block vastly stiffer than the unpenalized bias, and a
  // shared step would freeze the bias.
  std::vector<double> w(d, 0.0), s(n), gw(d), w_new(d), s_new(n);
  double b = 0.0;
  scores(w, b, s);
  double dl = data_loss(s, 0.0);
  double objective = dl + l2_at(w) + l1_at(w);
  double lw = 1.0, lb = 0.25;
  std::size_t accepted = 0;

  for (std::size_t iter = 0; iter < cfg.max_iter; ++iter) {
    // Weight block: proximal step on data loss + l2, soft-threshold for l1.
    std::fill(gw.begin(), gw.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double r = sigmoid(s[i]) - (y[i] == 1 ? 1.0 : 0.0);
      for (std::size_t j = 0; j < d; ++j) gw[j] += r * z[i * d + j];
    }
    for (std::size_t j = 0; j < d; ++j)
      gw[j] = gw[j] / static_cast<double>(n) + l2 * w[j];

    const double f_w = dl + l2_at(w);
    double f_w_new = f_w, dl_new = dl;
    lw = std::max(lw * 0.5, 1e-4);
    while (true) {
      const double thresh = l1 / lw;
      for (std::size_t j = 0; j < d; ++j) {
        const double u = w[j] - gw[j] / lw;
        w_new[j] = u > thresh ? u - thresh : (u < -thresh ? u + thresh : 0.0);
      }
      scores(w_new, b, s_new);
      dl_new = data_loss(s_new, 0.0);
      f_w_new = dl_new + l2_at(w_new);
      double lin = 0.0, sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        lin += (w_new[j] - w[j]) * gw[j];
        sq += (w_new[j] - w[j]) * (w_new[j] - w[j]);
      }
      if (f_w_new <= f_w + lin + 0.5 * lw * sq + 1e-15) break;
      lw *= 2.0;
      if (lw > 1e15) break;  // step has collapsed to the numerical floor
    }

    // Bias block: plain backtracked gradient step; only the data term moves.
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      gb += sigmoid(s_new[i]) - (y[i] == 1 ? 1.0 : 0.0);
    gb /= static_cast<double>(n);
    lb = std::max(lb * 0.5, 1e-4);
    double db = 0.0;
    while (true) {
      db = -gb / lb;
      const double shifted = data_loss(s_new, db);
      if (shifted <= dl_new + gb * db + 0.5 * lb * db * db + 1e-15) {
        dl_new = shifted;
        break;
      }
      lb *= 2.0;
      if (lb > 1e15) {
        db = 0.0;
        break;
      }
    }
    if (db != 0.0)
      for (std::size_t i = 0; i < n; ++i) s_new[i] += db;

    const double objective_new = dl_new + l2_at(w_new) + l1_at(w_new);
    if (!(objective_new <= objective)) break;  // keep the sequence monotone
    const double drop = objective - objective_new;
    w.swap(w_new);
    s.swap(s_new);
    b += db;
    dl = dl_new;
    objective = objective_new;
    ++accepted;
    if (drop < cfg.tol) break;
  }

  LogregModel model;
  model.weights = std::move(w);
  model.bias = b;
  model.objective = objective;
  model.iterations = accepted;
  return model;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& y) {
  if (scores.size() != y.size())
    throw ShapeError(str("roc_auc: ", scores.size(), " scores but ", y.size(),
                         " labels"));
  check_binary(y, "roc_auc");
  for (double v : scores)
    if (std::isnan(v)) throw DomainError("roc_auc: NaN score");

  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Integer pipeline: twice the positive-class midrank sum stays exact, and
  // the final division is rounded once onto the 2^-53 grid (ties to even).
  // That grid is symmetric under x -> 1-x, which is what makes the
  // complement identity hold bitwise.
  std::uint64_t rank2_pos = 0, n_pos = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t two_mid = static_cast<std::uint64_t>(i + 1 + j);  // lo+hi
    for (std::size_t k = i; k < j; ++k)
      if (y[order[k]] == 1) {
        rank2_pos += two_mid;
        ++n_pos;
      }
    i = j;
  }
  const std::uint64_t n_neg = n - n_pos;
  const std::uint64_t two_u = rank2_pos - n_pos * (n_pos + 1);

  using u128 = unsigned __int128;
  const u128 den = u128(2) * n_pos * n_neg;
  const u128 num = u128(two_u) << 53;
  std::uint64_t k = static_cast<std::uint64_t>(num / den);
  const u128 rem = num % den;
  if (2 * rem > den || (2 * rem == den && (k & 1))) ++k;
  return std::ldexp(static_cast<double>(k), -53);
}

std::vector<std::vector<std::size_t>> stratified_folds(const std::vector<int>& y,
                                                       std::size_t folds, Rng& rng) {
  if (folds < 2) throw ContractError("stratified_folds: need at least 2 folds");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < y.size(); ++i) by_class[y[i]].push_back(i);
  for (const auto& [label, members] : by_class)
    if (members.size() < folds)
      throw ContractError(str("stratified_folds: class ", label, " has ",
                              members.size(), " samples; cannot stratify into ",
                              folds, " folds"));

  std::vector<std::vector<std::size_t>> out(folds);
  for (auto& [label, members] : by_class) {
    for (std::size_t i = members.size(); i > 1; --i)
      std::swap(members[i - 1], members[rng.uniform_u64(i)]);
    for (std::size_t i = 0; i < members.size(); ++i)
      out[i % folds].push_back(members[i]);
  }
  for (auto& fold : out) std::sort(fold.begin(), fold.end());
  return out;
}

namespace {

// Per-feature z-scaling fitted on training rows; constant features pass
// through centered.
struct Standardizer {
  std::vector<double> mean, scale;

  void fit(const Tensor& Z, const std::vector<std::size_t>& rows) {
    const std::size_t d = Z.cols();
    mean.assign(d, 0.0);
    scale.assign(d, 1.0);
    if (rows.empty()) return;
    for (auto r : rows)
      for (std::size_t j = 0; j < d; ++j) mean[j] += Z.data()[r * d + j];
    for (auto& m : mean) m /= static_cast<double>(rows.size());
    std::vector<double> var(d, 0.0);
    for (auto r : rows)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = Z.data()[r * d + j] - mean[j];
        var[j] += c * c;
      }
    for (std::size_t j = 0; j < d; ++j) {
      const double sd = std::sqrt(var[j] / static_cast<double>(rows.size()));
      scale[j] = sd > 1e-12 ? sd : 1.0;
    }
  }

  Tensor apply(const Tensor& Z, const std::vector<std::size_t>& rows) const {
    const std::size_t d = Z.cols();
    std::vector<double> out;
    out.reserve(rows.size() * d);
    for (auto r : rows)
      for (std::size_t j = 0; j < d; ++j)
        out.push_back((Z.data()[r * d + j] - mean[j]) / scale[j]);
    return Tensor({rows.size(), d}, std::move(out));
  }
};

std::vector<int> gather_labels(const std::vector<int>& y,
                               const std::vector<std::size_t>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(y[r]);
  return out;
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

}  // namespace

SearchResult search_hyperparams(const Tensor& Z, const std::vector<int>& y,
                                const SearchSpace& space, std::uint64_t seed) {
  space.validate();
  if (Z.ndim() != 2 || Z.rows() != y.size())
    throw ShapeError("search_hyperparams: features must be [N, d] matching labels");
  check_binary(y, "search_hyperparams");

  Rng fold_rng(Rng::mix(seed, "probe.folds"));
  const auto folds = stratified_folds(y, space.folds, fold_rng);
  std::vector<std::vector<std::size_t>> train_rows(folds.size());
  for (std::size_t f = 0; f < folds.size(); ++f)
    for (std::size_t g = 0; g < folds.size(); ++g)
      if (g != f)
        train_rows[f].insert(train_rows[f].end(), folds[g].begin(), folds[g].end());

  // Every draw gets its own substream, so the candidate list is independent
  // of evaluation order and thread count.
  std::vector<ProbeConfig> draws(space.iterations);
  for (std::size_t i = 0; i < space.iterations; ++i) {
    Rng r(Rng::mix(seed, str("probe.draw.", i)));
    ProbeConfig c;
    c.C = std::exp(r.uniform(std::log(space.c_lo), std::log(space.c_hi)));
    c.penalty = space.penalties[r.uniform_u64(space.penalties.size())];
    if (c.penalty == Penalty::ElasticNet) c.l1_ratio = r.uniform();
    c.max_iter = space.fit_max_iter;
    c.tol = space.fit_tol;
    draws[i] = c;
  }

  std::vector<double> cv(space.iterations, 0.0);
  parallel_for(space.iterations, [&](std::size_t i) {
    double sum = 0.0;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      Standardizer sc;
      sc.fit(Z, train_rows[f]);
      LogregModel model =
          fit_logreg(sc.apply(Z, train_rows[f]), gather_labels(y, train_rows[f]),
                     draws[i]);
      const auto val_scores = model.decision(sc.apply(Z, folds[f]));
      sum += roc_auc(val_scores, gather_labels(y, folds[f]));
    }
    cv[i] = sum / static_cast<double>(folds.size());
  });

  std::size_t best = 0;
  for (std::size_t i = 1; i < cv.size(); ++i)
    if (cv[i] > cv[best]) best = i;  // ties keep the earlier draw
  return {draws[best], cv[best], best};
}

ProbeOutcome probe_matrix(const Tensor& z_train, const std::vector<int>& y_train,
                          const Tensor& z_holdout, const std::vector<int>& y_holdout,
                          const SearchSpace& space, std::uint64_t seed) {
  if (z_train.ndim() != 2 || z_holdout.ndim() != 2 ||
      z_train.cols() != z_holdout.cols())
    throw ShapeError("probe_matrix: train/holdout feature widths differ");
  SearchResult search = search_hyperparams(z_train, y_train, space, seed);

  Standardizer sc;
  sc.fit(z_train, all_rows(z_train.rows()));
  LogregModel model =
      fit_logreg(sc.apply(z_train, all_rows(z_train.rows())), y_train, search.best);
  const auto hold_scores = model.decision(sc.apply(z_holdout, all_rows(z_holdout.rows())));

  ProbeOutcome out;
  out.best = search.best;
  out.cv_auc = search.cv_auc;
  out.holdout_auc = roc_auc(hold_scores, y_holdout);
  return out;
}

namespace {

Tensor gather_images(const PairedDataset& data, int modality,
                     const std::vector<std::size_t>& rows) {
  const std::size_t px = data.image_side * data.image_side;
  std::vector<double> flat;
  flat.reserve(rows.size() * px);
  for (auto r : rows) {
    const auto& img = data.images[modality][r];
    flat.insert(flat.end(), img.begin(), img.end());
  }
  return Tensor({rows.size(), px}, std::move(flat));
}

std::vector<std::size_t> clinical_rows(const PairedDataset& data, Split split) {
  std::vector<std::size_t> rows;
  for (auto i : data.indices_of_split(split))
    if (data.labels[i] != static_cast<int>(Group::Other)) rows.push_back(i);
  return rows;
}

}  // namespace

ProbeReport evaluate_representation(const EncoderConfig& enc_cfg,
                                    const ParamStore& params,
                                    const PairedDataset& data,
                                    const SearchSpace& space, std::uint64_t seed) {
  enc_cfg.validate();
  data.validate();  // also rejects subject leakage across splits
  if (data.image_side != enc_cfg.image_side)
    throw ShapeError(str("evaluate_representation: dataset side ", data.image_side,
                         " vs encoder side ", enc_cfg.image_side));

  const NormStats stats = compute_norm_stats(data, Split::Train);
  const PairedDataset normed = znormalize(data, stats);

  const auto train_rows = clinical_rows(normed, Split::Train);
  const auto hold_rows = clinical_rows(normed, Split::Holdout);
  if (train_rows.empty() || hold_rows.empty())
    throw ContractError("evaluate_representation: a split has no clinical samples");

  const std::vector<int> y_train = gather_labels(normed.labels, train_rows);
  const std::vector<int> y_hold = gather_labels(normed.labels, hold_rows);

  BoundParams w(params);
  ProbeReport report;
  for (int m = 0; m < 2; ++m) {
    const Tensor z_train =
        encode_batch(enc_cfg, w, kEncPrefix[m], gather_images(normed, m, train_rows))
            .latent;
    const Tensor z_hold =
        encode_batch(enc_cfg, w, kEncPrefix[m], gather_images(normed, m, hold_rows))
            .latent;
    report.modality[m] = probe_matrix(z_train, y_train, z_hold, y_hold, space,
                                      Rng::mix(seed, str("probe.m", m + 1)));
  }
  report.mean_auc = 0.5 * (report.modality[0].holdout_auc +
                           report.modality[1].holdout_auc);
  return report;
}

}  // namespace mmfuse
