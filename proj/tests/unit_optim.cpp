#include <doctest.h>

#include <cmath>

#include "mmfuse/optim.hpp"

using namespace mmfuse;
using diff::Tensor;

namespace {

// Independent scalar RAdam used as the oracle for the library version.
struct ScalarRadam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  double step(double x, double g, double lr) {
    ++t;
    m = beta1 * m + (1 - beta1) * g;
    v = beta2 * v + (1 - beta2) * g * g;
    const double m_hat = m / (1 - std::pow(beta1, t));
    const double rho_inf = 2 / (1 - beta2) - 1;
    const double b2t = std::pow(beta2, t);
    const double rho = rho_inf - 2 * t * b2t / (1 - b2t);
    if (rho > 4) {
      const double r = std::sqrt(((rho - 4) * (rho - 2) * rho_inf) /
                                 ((rho_inf - 4) * (rho_inf - 2) * rho));
      return x - lr * r * m_hat / (std::sqrt(v / (1 - b2t)) + eps);
    }
    return x - lr * m_hat;
  }
};

TrainConfig tiny_train_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.encoder.image_side = 8;
  cfg.encoder.patch_side = 4;
  cfg.encoder.d_loc = 16;
  cfg.encoder.d_z = 16;
  cfg.encoder.hidden = {32};
  cfg.critic.embed_dim = 16;
  cfg.batch_size = 32;
  cfg.epochs = 3;
  cfg.seed = seed;
  cfg.graph = ObjectiveGraph::preset("S");
  return cfg;
}

GeneratorConfig tiny_generator(std::uint64_t seed) {
  GeneratorConfig gen;
  gen.n_subjects = 96;
  gen.image_side = 8;
  gen.seed = seed;
  return gen;
}

}  // namespace

TEST_CASE("radam matches an independent scalar implementation") {
  ParamStore params;
  params.add("x", Tensor::scalar(1.0));
  OptimizerState state;
  ScalarRadam oracle;
  double x_oracle = 1.0;
  for (int step = 0; step < 12; ++step) {
    const double x = params.get("x").value();
    CHECK(x == doctest::Approx(x_oracle).epsilon(1e-15));
    // f(x) = x^2/2, so grad = x.
    radam_step(state, params, {{"x", Tensor::scalar(x)}}, 0.1);
    x_oracle = oracle.step(x_oracle, x_oracle, 0.1);
  }
  // The rectified branch must have engaged within those steps.
  const double rho_inf = 2 / (1 - 0.999) - 1;
  const double b2t = std::pow(0.999, 12);
  CHECK(rho_inf - 2 * 12 * b2t / (1 - b2t) > 4);
}

TEST_CASE("radam first step is pure momentum") {
  // rho_1 = 1 <= 4: update is exactly -lr * m_hat = -lr * g.
  ParamStore params;
  params.add("x", Tensor::scalar(1.0));
  OptimizerState state;
  radam_step(state, params, {{"x", Tensor::scalar(1.0)}}, 0.1);
  CHECK(params.get("x").value() == doctest::Approx(0.9).epsilon(1e-15));
  // Second step, still unrectified: m = 0.9*0.1 + 0.1*0.9, m_hat = m/0.19.
  radam_step(state, params, {{"x", Tensor::scalar(0.9)}}, 0.1);
  const double want = 0.9 - 0.1 * (0.9 * 0.1 + 0.1 * 0.9) / (1 - 0.81);
  CHECK(params.get("x").value() == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("radam leaves parameters alone under zero gradients") {
  ParamStore params;
  params.add("w", Tensor({2, 2}, {1, 2, 3, 4}));
  OptimizerState state;
  for (int i = 0; i < 10; ++i)
    radam_step(state, params, {{"w", Tensor::zeros({2, 2})}}, 0.5);
  CHECK(params.get("w").data() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("radam treats parameters independently and identically") {
  ParamStore params;
  params.add("a", Tensor::scalar(2.0));
  params.add("b", Tensor::scalar(2.0));
  OptimizerState state;
  for (int i = 0; i < 7; ++i) {
    const double g = 0.3 * (i + 1);
    radam_step(state, params, {{"a", Tensor::scalar(g)}, {"b", Tensor::scalar(g)}},
               0.05);
    CHECK(params.get("a").value() == params.get("b").value());
  }
}

TEST_CASE("radam rejects non-finite gradients by name") {
  ParamStore params;
  params.add("enc.w0", Tensor::scalar(1.0));
  OptimizerState state;
  try {
    radam_step(state, params,
               {{"enc.w0", Tensor::scalar(std::numeric_limits<double>::quiet_NaN())}},
               0.1);
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("enc.w0") != std::string::npos);
  }
}

TEST_CASE("radam skips frozen parameters") {
  ParamStore params;
  params.add("w", Tensor::scalar(1.0), /*trainable=*/false);
  OptimizerState state;
  radam_step(state, params, {{"w", Tensor::scalar(5.0)}}, 0.1);
  CHECK(params.get("w").value() == 1.0);
}

TEST_CASE("one-cycle schedule hits the documented anchor points") {
  const std::size_t total = 1000;
  CHECK(onecycle_lr(0, total, 0.01) == doctest::Approx(4e-4).epsilon(1e-12));
  CHECK(onecycle_lr(0.3 * total, total, 0.01) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(onecycle_lr(total, total, 0.01) == doctest::Approx(1e-6).epsilon(1e-9));
}

TEST_CASE("one-cycle schedule is continuous at the phase boundary") {
  const std::size_t total = 997;  // non-integer boundary
  const double up = 0.3 * total;
  const double before = onecycle_lr(up - 1e-9, total, 0.01);
  const double after = onecycle_lr(up + 1e-9, total, 0.01);
  CHECK(std::abs(before - after) < 1e-12);
  CHECK(onecycle_lr(up, total, 0.01) == doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("one-cycle schedule rises then falls") {
  const std::size_t total = 200;
  for (int s = 1; s <= 60; ++s)
    CHECK(onecycle_lr(s, total, 0.01) >= onecycle_lr(s - 1, total, 0.01));
  for (int s = 61; s <= 200; ++s)
    CHECK(onecycle_lr(s, total, 0.01) <= onecycle_lr(s - 1, total, 0.01));
}

TEST_CASE("one-cycle schedule rejects out-of-range steps") {
  CHECK_THROWS_AS(onecycle_lr(-1.0, 10, 0.01), ContractError);
  CHECK_THROWS_AS(onecycle_lr(11.0, 10, 0.01), ContractError);
  CHECK_THROWS_AS(onecycle_lr(0.0, 0, 0.01), ContractError);
}

TEST_CASE("balanced sampling equalizes class draws") {
  // 90/10 imbalance, batch 1000: each class lands in [400, 600] with
  // overwhelming probability (binomial tail below 1e-3).
  std::vector<int> labels(100, 0);
  for (int i = 90; i < 100; ++i) labels[i] = 1;
  Rng rng(8);
  std::vector<std::size_t> draws = balanced_sample(labels, 1000, rng);
  int minority = 0;
  for (auto i : draws) minority += labels[i];
  CHECK(minority >= 400);
  CHECK(minority <= 600);
}

TEST_CASE("balanced sampling is deterministic and respects membership") {
  std::vector<int> labels{2, 0, 1, 0, 2, 1, 0};
  Rng a(5), b(5);
  CHECK(balanced_sample(labels, 64, a) == balanced_sample(labels, 64, b));

  Rng c(6);
  for (auto i : balanced_sample(labels, 50, c)) CHECK(i < labels.size());
  CHECK_THROWS_AS(balanced_sample({}, 4, c), ContractError);
}

TEST_CASE("single-class sampling is plain uniform") {
  std::vector<int> labels(20, 7);
  Rng rng(11);
  std::vector<bool> seen(20, false);
  for (auto i : balanced_sample(labels, 2000, rng)) seen[i] = true;
  for (bool s : seen) CHECK(s);
}

TEST_CASE("zero epochs returns the initialization") {
  TrainConfig cfg = tiny_train_config(3);
  cfg.epochs = 0;
  PairedDataset data = generate(tiny_generator(3));
  TrainResult r = train(cfg, data);
  ParamStore init = init_train_params(cfg);
  REQUIRE(r.params.names() == init.names());
  for (const auto& name : init.names())
    CHECK(r.params.get(name).data() == init.get(name).data());
  CHECK(r.history.empty());
}

TEST_CASE("training is bit-deterministic in the seed") {
  TrainConfig cfg = tiny_train_config(9);
  cfg.epochs = 2;
  PairedDataset data = generate(tiny_generator(9));
  TrainResult a = train(cfg, data);
  TrainResult b = train(cfg, data);
  REQUIRE(a.params.names() == b.params.names());
  for (const auto& name : a.params.names())
    CHECK(a.params.get(name).data() == b.params.get(name).data());
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].loss == b.history[i].loss);
    CHECK(a.history[i].term == b.history[i].term);
  }

  cfg.seed = 10;
  TrainResult c = train(cfg, data);
  bool any_diff = false;
  for (const auto& name : a.params.names())
    if (a.params.get(name).data() != c.params.get(name).data()) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("history carries finite per-term rows for every epoch") {
  TrainConfig cfg = tiny_train_config(21);
  cfg.epochs = 3;
  PairedDataset data = generate(tiny_generator(21));
  TrainResult r = train(cfg, data);

  std::size_t total_rows = 0;
  for (const auto& row : r.history) {
    CHECK(std::isfinite(row.loss));
    CHECK(row.lr > 0.0);
    if (row.term == "total") {
      ++total_rows;
      CHECK_FALSE(row.bound.has_value());
    }
    if (row.term.rfind("S:", 0) == 0) {
      REQUIRE(row.bound.has_value());
      CHECK(std::isfinite(*row.bound));
      CHECK(*row.bound <= std::log(static_cast<double>(cfg.batch_size)) + 1e-9);
    }
  }
  CHECK(total_rows == cfg.epochs);
}

TEST_CASE("contrastive training lifts the similarity bound") {
  // Mean S-edge bound in the final epoch beats the first epoch by a clear
  // margin on every seed.
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    TrainConfig cfg = tiny_train_config(seed);
    cfg.epochs = 100;
    PairedDataset data = generate(tiny_generator(seed));
    TrainResult r = train(cfg, data);

    auto mean_bound_at = [&](std::size_t epoch) {
      double sum = 0.0;
      int n = 0;
      for (const auto& row : r.history)
        if (row.epoch == epoch && row.bound) {
          sum += *row.bound;
          ++n;
        }
      REQUIRE(n > 0);
      return sum / n;
    };
    const double first = mean_bound_at(0);
    const double last = mean_bound_at(cfg.epochs - 1);
    CAPTURE(seed);
    CHECK(last - first >= 0.5);
  }
}

TEST_CASE("supervised mode trains a masked binary head") {
  TrainConfig cfg = tiny_train_config(31);
  cfg.supervised = true;
  cfg.epochs = 10;
  PairedDataset data = generate(tiny_generator(31));
  TrainResult r = train(cfg, data);
  CHECK(r.params.has("sup.w"));

  double first = 0.0, last = 0.0;
  for (const auto& row : r.history) {
    if (row.term != "bce") continue;
    if (row.epoch == 0) first = row.loss;
    if (row.epoch == cfg.epochs - 1) last = row.loss;
    CHECK(std::isfinite(row.loss));
  }
  CHECK(last < first);
}

TEST_CASE("training aborts on a diverging run") {
  TrainConfig cfg = tiny_train_config(41);
  cfg.graph = ObjectiveGraph::preset("AE");
  cfg.base_lr = 1e60;
  cfg.max_lr = 1e62;
  cfg.epochs = 4;
  PairedDataset data = generate(tiny_generator(41));
  CHECK_THROWS_AS(train(cfg, data), DomainError);
}

TEST_CASE("train config validation") {
  TrainConfig cfg = tiny_train_config(1);
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_train_config(1);
  cfg.base_lr = 0.5;  // above max_lr
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_train_config(1);
  cfg.pct_up = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_train_config(1);
  CHECK_NOTHROW(cfg.validate());
}
