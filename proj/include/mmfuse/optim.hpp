#pragma once

// Training: RAdam with the rectified variance term, a one-cycle cosine
// learning-rate schedule, class-balanced batch sampling, and the seeded
// training loop tying encoder, objectives, and augmentation together.

#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmfuse/objectives.hpp"
#include "mmfuse/synthdata.hpp"

namespace mmfuse {

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double base_lr = 4e-4;  // schedule start; start_div = max_lr / base_lr
  double max_lr = 0.01;
  double final_div = 1e4;
  double pct_up = 0.3;
  std::uint64_t seed = 1;
  ObjectiveGraph graph;
  AugmentFlags augment;  // disable by clearing both flags
  CriticConfig critic;
  EncoderConfig encoder;
  // Trains a binary head on the concatenated latents with cross-entropy
  // instead of the objective graph; 'other'-group samples are masked out.
  bool supervised = false;

  void validate() const;
};

struct OptimizerState {
  std::unordered_map<std::string, std::vector<double>> m, v;
  std::uint64_t step = 0;
};

// One RAdam update over every trainable parameter. Gradients must be keyed
// by parameter name (zero tensors are fine for unreached parameters).
void radam_step(OptimizerState& state, ParamStore& params,
                const std::unordered_map<std::string, diff::Tensor>& grads,
                double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

// Cosine warmup from max_lr/start_div to max_lr over pct_up*total_steps,
// then cosine decay to max_lr/final_div. step may be fractional.
double onecycle_lr(double step, std::size_t total_steps, double max_lr,
                   double start_div = 25.0, double final_div = 1e4,
                   double pct_up = 0.3);

// Each draw picks a present class uniformly, then a member uniformly within
// the class. Returned indices point into `labels`.
std::vector<std::size_t> balanced_sample(const std::vector<int>& labels,
                                         std::size_t batch_size, Rng& rng);

struct HistoryRow {
  std::size_t epoch = 0;
  std::string term;             // edge/aux name, "bce", or "total"
  std::optional<double> bound;  // epoch-mean InfoNCE bound where defined
  double loss = 0.0;            // epoch-mean loss contribution
  double lr = 0.0;              // epoch-mean learning rate
};

struct TrainResult {
  ParamStore params;
  std::vector<HistoryRow> history;
  NormStats norm;  // training-split statistics the model was trained under
};

using EpochCallback = std::function<void(std::size_t epoch, const ParamStore&)>;

// Initializes all parameter groups from cfg.seed, z-normalizes with
// training-split statistics, and runs epochs x ceil(Ntrain/batch) steps of
// build_loss -> backward -> radam_step under the one-cycle schedule.
TrainResult train(const TrainConfig& cfg, const PairedDataset& data,
                  const EpochCallback& on_epoch = nullptr);

// The parameter store train() starts from (useful as a random-init baseline).
ParamStore init_train_params(const TrainConfig& cfg);

}  // namespace mmfuse
