#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include "mmfuse/optim.hpp"
#include "mmfuse/probe.hpp"
#include "oracles.hpp"

using namespace mmfuse;
using diff::Tensor;

namespace {

// Random scores on a coarse grid so ties occur, labels guaranteed binary.
void random_auc_instance(Rng& rng, std::vector<double>& scores,
                         std::vector<int>& y) {
  const std::size_t n = 2 + rng.uniform_u64(49);
  scores.resize(n);
  y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = static_cast<double>(rng.uniform_u64(8)) / 4.0;
    y[i] = static_cast<int>(rng.uniform_u64(2));
  }
  y[0] = 0;
  y[n - 1] = 1;
}

Tensor random_matrix(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<double> v(n * d);
  for (auto& x : v) x = rng.normal();
  return Tensor({n, d}, std::move(v));
}

}  // namespace

TEST_CASE("roc_auc handles the canonical cases") {
  CHECK(roc_auc({0.1, 0.2, 0.7, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(roc_auc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}) == 0.0);
  CHECK(roc_auc({0.4, 0.4, 0.4, 0.4}, {0, 1, 0, 1}) == 0.5);
  CHECK(roc_auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == 0.75);
}

TEST_CASE("roc_auc matches brute-force pair counting") {
  Rng rng(101);
  std::vector<double> scores;
  std::vector<int> y;
  for (int trial = 0; trial < 3000; ++trial) {
    random_auc_instance(rng, scores, y);
    CHECK(std::abs(roc_auc(scores, y) - oracle::pairwise_auc(scores, y)) <= 1e-12);
  }
}

TEST_CASE("roc_auc complement under score negation is bitwise exact") {
  Rng rng(102);
  std::vector<double> scores;
  std::vector<int> y;
  for (int trial = 0; trial < 3000; ++trial) {
    random_auc_instance(rng, scores, y);
    std::vector<double> neg(scores);
    for (auto& v : neg) v = -v;
    CHECK(roc_auc(neg, y) == 1.0 - roc_auc(scores, y));
  }
}

TEST_CASE("roc_auc is invariant under strictly increasing transforms") {
  Rng rng(103);
  std::vector<double> scores;
  std::vector<int> y;
  for (int trial = 0; trial < 500; ++trial) {
    random_auc_instance(rng, scores, y);
    const double base = roc_auc(scores, y);
    std::vector<double> t(scores);
    for (auto& v : t) v = std::exp(v);
    CHECK(roc_auc(t, y) == base);
    for (std::size_t i = 0; i < scores.size(); ++i) t[i] = 2.0 * scores[i] + 3.0;
    CHECK(roc_auc(t, y) == base);
    for (std::size_t i = 0; i < scores.size(); ++i) t[i] = std::tanh(scores[i]);
    CHECK(roc_auc(t, y) == base);
  }
}

TEST_CASE("roc_auc input validation") {
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), ContractError);
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {0, 2}), ContractError);
  CHECK_THROWS_AS(roc_auc({0.1}, {0, 1}), ShapeError);
  CHECK_THROWS_AS(roc_auc({std::nan(""), 0.2}, {0, 1}), DomainError);
}

TEST_CASE("logistic fit finds the separating direction") {
  // 1-D, negatives below zero, positives above.
  Tensor Z({8, 1}, {-1.2, -0.9, -1.1, -0.7, 0.8, 1.1, 0.9, 1.3});
  std::vector<int> y{0, 0, 0, 0, 1, 1, 1, 1};
  ProbeConfig cfg;
  cfg.C = 1.0;
  LogregModel m = fit_logreg(Z, y, cfg);
  CHECK(m.weights[0] > 0.1);
  const auto s = m.decision(Z);
  CHECK(roc_auc(s, y) == 1.0);
}

TEST_CASE("crushing regularization recovers the base-rate bias") {
  Rng rng(7);
  Tensor Z = random_matrix(rng, 20, 3);
  std::vector<int> y(20, 0);
  for (int i = 0; i < 6; ++i) y[i] = 1;
  ProbeConfig cfg;
  cfg.C = 1e-10;
  cfg.penalty = Penalty::L2;
  cfg.max_iter = 50000;
  cfg.tol = 1e-15;
  LogregModel m = fit_logreg(Z, y, cfg);
  for (double w : m.weights) CHECK(std::abs(w) < 1e-6);
  CHECK(m.bias == doctest::Approx(std::log(6.0 / 14.0)).epsilon(1e-3));
}

TEST_CASE("logistic fit rejects bad input") {
  Tensor Z({2, 1}, {0.0, 1.0});
  ProbeConfig cfg;
  CHECK_THROWS_AS(fit_logreg(Z, {1, 1}, cfg), ContractError);
  CHECK_THROWS_AS(fit_logreg(Z, {0, 3}, cfg), ContractError);
  Tensor bad({2, 1}, {std::numeric_limits<double>::infinity(), 1.0});
  CHECK_THROWS_AS(fit_logreg(bad, {0, 1}, cfg), DomainError);
  cfg.C = -1.0;
  CHECK_THROWS_AS(fit_logreg(Z, {0, 1}, cfg), ConfigError);
}

TEST_CASE("proximal objective decreases monotonically") {
  Rng rng(11);
  Tensor Z = random_matrix(rng, 40, 5);
  std::vector<int> y(40);
  for (auto& v : y) v = static_cast<int>(rng.uniform_u64(2));
  y[0] = 0;
  y[1] = 1;
  ProbeConfig cfg;
  cfg.C = 0.5;
  cfg.penalty = Penalty::ElasticNet;
  cfg.l1_ratio = 0.3;
  cfg.tol = 0.0;
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k <= 40; ++k) {
    cfg.max_iter = k;
    LogregModel m = fit_logreg(Z, y, cfg);
    CHECK(m.objective <= prev + 1e-15);
    prev = m.objective;
  }
}

TEST_CASE("proximal solver matches the coordinate-descent oracle") {
  Rng rng(29);
  const Penalty penalties[] = {Penalty::L1, Penalty::L2, Penalty::ElasticNet};
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t n = 20 + rng.uniform_u64(81);
    const std::size_t d = 1 + rng.uniform_u64(10);
    Tensor Z = random_matrix(rng, n, d);
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng.uniform_u64(2));
    y[0] = 0;
    y[1] = 1;

    ProbeConfig cfg;
    cfg.penalty = penalties[inst % 3];
    cfg.C = std::exp(rng.uniform(std::log(0.05), std::log(50.0)));
    cfg.l1_ratio = rng.uniform();
    cfg.max_iter = 30000;
    cfg.tol = 1e-15;
    LogregModel m = fit_logreg(Z, y, cfg);

    oracle::LogregProblem p;
    p.z = Z.data();
    p.n = n;
    p.d = d;
    p.y = y;
    const double alpha = 1.0 / cfg.C;
    switch (cfg.penalty) {
      case Penalty::L1: p.l1 = alpha; break;
      case Penalty::L2: p.l2 = alpha; break;
      case Penalty::ElasticNet:
        p.l1 = alpha * cfg.l1_ratio;
        p.l2 = alpha * (1.0 - cfg.l1_ratio);
        break;
    }
    // The returned objective must be the real objective of the returned
    // iterate, and both solvers must agree on the optimum.
    CHECK(std::abs(logreg_objective(p, m.weights, m.bias) - m.objective) <= 1e-12);
    const double cd = oracle::cd_logreg(p);
    CAPTURE(inst);
    CHECK(std::abs(m.objective - cd) <= 1e-6);
  }
}

TEST_CASE("stratified folds partition and balance every class") {
  std::vector<int> y(25, 0);
  for (int i = 17; i < 25; ++i) y[i] = 1;
  Rng rng(3);
  auto folds = stratified_folds(y, 5, rng);
  REQUIRE(folds.size() == 5);

  std::vector<std::size_t> all;
  for (const auto& fold : folds) {
    std::size_t pos = 0;
    for (auto i : fold) pos += y[i];
    // 17/5 and 8/5 per fold, within one sample.
    CHECK(fold.size() - pos >= 3);
    CHECK(fold.size() - pos <= 4);
    CHECK(pos >= 1);
    CHECK(pos <= 2);
    all.insert(all.end(), fold.begin(), fold.end());
  }
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);

  Rng a(4), b(4);
  CHECK(stratified_folds(y, 5, a) == stratified_folds(y, 5, b));
  std::vector<int> tiny{0, 0, 0, 1, 1, 1, 1, 1, 1};
  Rng c(5);
  CHECK_THROWS_AS(stratified_folds(tiny, 5, c), ContractError);
}

TEST_CASE("collapsed search space returns its only point") {
  Rng rng(17);
  Tensor Z = random_matrix(rng, 40, 3);
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) y[i] = i % 2;
  SearchSpace space;
  space.c_lo = space.c_hi = 3.7;
  space.penalties = {Penalty::L2};
  space.iterations = 4;
  space.folds = 4;
  space.fit_max_iter = 50;
  SearchResult r = search_hyperparams(Z, y, space, 99);
  CHECK(r.best.C == doctest::Approx(3.7).epsilon(1e-12));
  CHECK(r.best.penalty == Penalty::L2);
}

TEST_CASE("search is deterministic and thread-count invariant") {
  Rng rng(19);
  Tensor Z = random_matrix(rng, 60, 4);
  std::vector<int> y(60);
  for (std::size_t i = 0; i < 60; ++i)
    y[i] = Z.data()[i * 4] + 0.5 * Z.data()[i * 4 + 2] > 0.0 ? 1 : 0;
  y[0] = 0;
  y[1] = 1;
  SearchSpace space;
  space.iterations = 24;
  space.folds = 3;
  space.fit_max_iter = 200;

  setenv("MMFUSE_THREADS", "1", 1);
  SearchResult serial = search_hyperparams(Z, y, space, 5);
  setenv("MMFUSE_THREADS", "4", 1);
  SearchResult parallel = search_hyperparams(Z, y, space, 5);
  unsetenv("MMFUSE_THREADS");
  SearchResult defaulted = search_hyperparams(Z, y, space, 5);

  CHECK(serial.draw_index == parallel.draw_index);
  CHECK(serial.cv_auc == parallel.cv_auc);
  CHECK(serial.best.C == parallel.best.C);
  CHECK(serial.draw_index == defaulted.draw_index);
  CHECK(serial.cv_auc == defaulted.cv_auc);
}

TEST_CASE("search on separable features scores near-perfect CV AUC") {
  Rng rng(23);
  Tensor Z = random_matrix(rng, 80, 4);
  std::vector<int> y(80);
  for (std::size_t i = 0; i < 80; ++i) {
    const double* row = Z.data().data() + i * 4;
    y[i] = 2.0 * row[0] - row[1] + 0.5 * row[2] > 0.0 ? 1 : 0;
  }
  y[0] = 0;
  y[1] = 1;
  SearchSpace space;
  space.iterations = 30;
  space.fit_max_iter = 300;
  SearchResult r = search_hyperparams(Z, y, space, 31);
  CHECK(r.cv_auc >= 0.95);
}

TEST_CASE("one-hot representations probe to a perfect holdout") {
  auto one_hot = [](const std::vector<int>& y) {
    std::vector<double> v;
    for (int label : y) {
      v.push_back(label == 0 ? 1.0 : 0.0);
      v.push_back(label == 1 ? 1.0 : 0.0);
    }
    return Tensor({y.size(), 2}, std::move(v));
  };
  std::vector<int> y_train(40), y_hold(20);
  for (std::size_t i = 0; i < 40; ++i) y_train[i] = i % 2;
  for (std::size_t i = 0; i < 20; ++i) y_hold[i] = (i / 2) % 2;
  SearchSpace space;
  space.iterations = 10;
  space.fit_max_iter = 200;
  ProbeOutcome out =
      probe_matrix(one_hot(y_train), y_train, one_hot(y_hold), y_hold, space, 7);
  CHECK(out.holdout_auc == 1.0);
  CHECK(out.cv_auc >= 0.99);
}

TEST_CASE("random labels probe to chance-level holdout AUC") {
  SearchSpace space;
  space.iterations = 12;
  space.folds = 3;
  space.fit_max_iter = 120;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(500 + trial);
    Tensor z_train = random_matrix(rng, 150, 6);
    Tensor z_hold = random_matrix(rng, 150, 6);
    std::vector<int> y_train(150), y_hold(150);
    for (std::size_t i = 0; i < 150; ++i) {
      y_train[i] = i % 2;
      y_hold[i] = (i + 1) % 2;
    }
    ProbeOutcome out =
        probe_matrix(z_train, y_train, z_hold, y_hold, space, 600 + trial);
    CAPTURE(trial);
    CHECK(out.holdout_auc >= 0.35);
    CHECK(out.holdout_auc <= 0.65);
  }
}

TEST_CASE("evaluation rejects subject leakage across splits") {
  PairedDataset data;
  data.image_side = 8;
  for (int i = 0; i < 12; ++i) {
    data.images[0].push_back(std::vector<double>(64, 0.1 * i));
    data.images[1].push_back(std::vector<double>(64, 0.2 * i));
    data.labels.push_back(i % 2);
    data.subject_ids.push_back(i % 6);  // subject i-6 reappears
    data.split.push_back(i < 6 ? static_cast<int>(Split::Train)
                               : static_cast<int>(Split::Holdout));
  }
  EncoderConfig enc;
  enc.image_side = 8;
  enc.patch_side = 4;
  enc.d_loc = 8;
  enc.d_z = 8;
  enc.hidden = {8};
  TrainConfig tc;
  tc.encoder = enc;
  tc.critic.embed_dim = 8;
  tc.graph = ObjectiveGraph::preset("S");
  ParamStore params = init_train_params(tc);
  SearchSpace space;
  CHECK_THROWS_AS(evaluate_representation(enc, params, data, space, 1),
                  ContractError);
}

TEST_CASE("trained encoders probe better than random initialization") {
  SearchSpace space;
  space.iterations = 16;
  space.folds = 3;
  space.fit_max_iter = 150;

  // Small images keep each run a couple of seconds; averaging over a few
  // seeds smooths out the per-dataset luck in so small a holdout.
  double margin_sum = 0.0;
  for (std::uint64_t seed : {77ull, 303ull, 404ull}) {
    GeneratorConfig gen;
    gen.n_subjects = 160;
    gen.image_side = 8;
    gen.seed = seed;
    PairedDataset data = generate(gen);

    TrainConfig cfg;
    cfg.encoder.image_side = 8;
    cfg.encoder.patch_side = 4;
    cfg.encoder.d_loc = 16;
    cfg.encoder.d_z = 16;
    cfg.encoder.hidden = {32};
    cfg.critic.embed_dim = 16;
    cfg.batch_size = 32;
    cfg.epochs = 200;
    cfg.seed = seed;
    cfg.graph = ObjectiveGraph::preset("S");

    ParamStore random_init = init_train_params(cfg);
    ProbeReport before =
        evaluate_representation(cfg.encoder, random_init, data, space, 42);
    TrainResult trained = train(cfg, data);
    ProbeReport after =
        evaluate_representation(cfg.encoder, trained.params, data, space, 42);

    for (int m = 0; m < 2; ++m) {
      CHECK(before.modality[m].holdout_auc >= 0.0);
      CHECK(before.modality[m].holdout_auc <= 1.0);
    }
    CHECK(after.mean_auc == 0.5 * (after.modality[0].holdout_auc +
                                   after.modality[1].holdout_auc));
    CHECK(after.mean_auc >= before.mean_auc);
    margin_sum += after.mean_auc - before.mean_auc;
  }
  CHECK(margin_sum / 3.0 >= 0.05);
}
