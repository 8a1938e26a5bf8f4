#include "mmfuse/optim.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace mmfuse {

using diff::Tensor;

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (base_lr <= 0.0 || max_lr <= 0.0 || max_lr < base_lr)
    throw ConfigError("train: need 0 < base_lr <= max_lr");
  if (final_div < 1.0) throw ConfigError("train: final_div must be >= 1");
  if (pct_up < 0.0 || pct_up > 1.0) throw ConfigError("train: pct_up in [0,1]");
  encoder.validate();
  critic.validate();
  if (!supervised) graph.validate();
  // The latent head is the identity, so any edge touching a latent scores it
  // directly against critic embeddings.
  for (const Edge& e : graph.edges)
    if ((e.src_level == Level::Latent || e.dst_level == Level::Latent) &&
        critic.embed_dim != encoder.d_z && !supervised)
      throw ConfigError("train: edge " + e.name() + " needs critic.embed_dim == d_z (" +
                        std::to_string(critic.embed_dim) + " vs " +
                        std::to_string(encoder.d_z) + ")");
}

void radam_step(OptimizerState& state, ParamStore& params,
                const std::unordered_map<std::string, diff::Tensor>& grads,
                double lr, double beta1, double beta2, double eps) {
  const double t = static_cast<double>(++state.step);
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double b1t = std::pow(beta1, t);
  const double b2t = std::pow(beta2, t);
  const double rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
  const bool rectified = rho_t > 4.0;
  const double r_t =
      rectified ? std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                            ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                : 0.0;

  for (const auto& name : params.trainable_names()) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& value = params.get(name);
    const Tensor& grad = git->second;
    if (grad.shape() != value.shape())
      throw ShapeError(str("radam_step: gradient shape ",
                           diff::shape_str(grad.shape()), " for parameter '",
                           name, "' of shape ", diff::shape_str(value.shape())));
    for (double g : grad.data())
      if (!std::isfinite(g))
        throw DomainError(str("radam_step: non-finite gradient for '", name, "'"));

    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(value.size(), 0.0);
    if (v.empty()) v.assign(value.size(), 0.0);

    std::vector<double> updated = value.data();
    for (std::size_t i = 0; i < updated.size(); ++i) {
      const double g = grad.data()[i];
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      const double m_hat = m[i] / (1.0 - b1t);
      if (rectified) {
        const double v_hat = std::sqrt(v[i] / (1.0 - b2t));
        updated[i] -= lr * r_t * m_hat / (v_hat + eps);
      } else {
        updated[i] -= lr * m_hat;
      }
    }
    params.set(name, Tensor(value.shape(), std::move(updated)));
  }
}

double onecycle_lr(double step, std::size_t total_steps, double max_lr,
                   double start_div, double final_div, double pct_up) {
  if (total_steps == 0) throw ContractError("onecycle_lr: total_steps must be > 0");
  const double total = static_cast<double>(total_steps);
  if (step < 0.0 || step > total)
    throw ContractError(str("onecycle_lr: step ", step, " outside [0, ", total, "]"));
  const double up = pct_up * total;
  const double start_lr = max_lr / start_div;
  const double final_lr = max_lr / final_div;
  if (step <= up) {
    if (up == 0.0) return max_lr;
    const double tau = step / up;
    return start_lr + (max_lr - start_lr) * 0.5 * (1.0 - std::cos(M_PI * tau));
  }
  const double tau = (step - up) / (total - up);
  return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + std::cos(M_PI * tau));
}

std::vector<std::size_t> balanced_sample(const std::vector<int>& labels,
                                         std::size_t batch_size, Rng& rng) {
  if (labels.empty()) throw ContractError("balanced_sample: no labels");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<const std::vector<std::size_t>*> classes;
  for (const auto& [label, members] : by_class) classes.push_back(&members);

  std::vector<std::size_t> out;
  out.reserve(batch_size);
  for (std::size_t k = 0; k < batch_size; ++k) {
    const auto& members = *classes[rng.uniform_u64(classes.size())];
    out.push_back(members[rng.uniform_u64(members.size())]);
  }
  return out;
}

namespace {

Tensor gather_images(const PairedDataset& data, int modality,
                     const std::vector<std::size_t>& rows,
                     const std::vector<std::size_t>& base) {
  const std::size_t px = data.image_side * data.image_side;
  std::vector<double> flat;
  flat.reserve(rows.size() * px);
  for (auto r : rows) {
    const auto& img = data.images[modality][base[r]];
    flat.insert(flat.end(), img.begin(), img.end());
  }
  return Tensor({rows.size(), px}, std::move(flat));
}

// Binary cross-entropy on the concatenated latents; rows with mask 0 drop
// out of the mean. softplus built from logsumexp([0, logit]).
Tensor supervised_loss(const Tensor& z1, const Tensor& z2, const BoundParams& w,
                       const std::vector<double>& targets,
                       const std::vector<double>& mask) {
  const std::size_t n = z1.rows();
  Tensor features = diff::concat({z1, z2}, 1);
  Tensor logits = diff::add(diff::matmul(features, w["sup.w"]),
                            diff::broadcast_rows(w["sup.b"], n));
  Tensor padded = diff::concat({Tensor::zeros({n, 1}), logits}, 1);
  Tensor softplus = diff::logsumexp_axis(padded, 1);  // [n]
  Tensor y({n}, targets);
  Tensor msk({n}, mask);
  double count = 0.0;
  for (double v : mask) count += v;
  if (count == 0.0) return Tensor::scalar(0.0);
  Tensor per = diff::sub(softplus, diff::mul(y, diff::reshape(logits, {n})));
  return diff::scale(diff::sum_all(diff::mul(per, msk)), 1.0 / count);
}

}  // namespace

ParamStore init_train_params(const TrainConfig& cfg) {
  cfg.validate();
  ParamStore store;
  Rng rng(Rng::mix(cfg.seed, "train.init"));
  for (int m = 0; m < 2; ++m) init_encoder_params(cfg.encoder, rng, store, kEncPrefix[m]);
  for (int m = 0; m < 2; ++m) init_decoder_params(cfg.encoder, rng, store, kDecPrefix[m]);
  ProjectionConfig pc;
  pc.d_in = cfg.encoder.d_loc;
  pc.d_out = cfg.critic.embed_dim;
  for (int m = 0; m < 2; ++m) init_projection_params(pc, rng, store, kProjPrefix[m]);
  if (cfg.supervised) {
    const std::size_t d = 2 * cfg.encoder.d_z;
    const double a = std::sqrt(6.0 / static_cast<double>(d + 1));
    std::vector<double> wv(d);
    for (auto& x : wv) x = rng.uniform(-a, a);
    store.add("sup.w", Tensor({d, 1}, std::move(wv)));
    store.add("sup.b", Tensor::zeros({1, 1}));
  }
  return store;
}

TrainResult train(const TrainConfig& cfg, const PairedDataset& data,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  data.validate();

  TrainResult result;
  result.params = init_train_params(cfg);
  result.norm = compute_norm_stats(data, Split::Train);
  const PairedDataset normed = znormalize(data, result.norm);

  const std::vector<std::size_t> train_idx = normed.indices_of_split(Split::Train);
  if (train_idx.empty()) throw ContractError("train: training split is empty");
  std::vector<int> train_labels;
  train_labels.reserve(train_idx.size());
  for (auto i : train_idx) train_labels.push_back(normed.labels[i]);

  if (cfg.epochs == 0) return result;

  const std::size_t steps_per_epoch =
      (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;
  const double start_div = cfg.max_lr / cfg.base_lr;

  Rng sample_rng(Rng::mix(cfg.seed, "train.sample"));
  Rng aug_rng(Rng::mix(cfg.seed, "train.augment"));
  OptimizerState opt;
  const std::size_t px = normed.image_side * normed.image_side;
  const bool augment_on = cfg.augment.flips || cfg.augment.crops;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // name -> (loss sum, bound sum, bound count)
    std::vector<HistoryRow> acc;
    auto row_for = [&](const std::string& term) -> HistoryRow& {
      for (auto& r : acc)
        if (r.term == term) return r;
      acc.push_back({epoch, term, std::nullopt, 0.0, 0.0});
      return acc.back();
    };
    double lr_sum = 0.0;

    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t global_step = epoch * steps_per_epoch + s;
      const double lr = onecycle_lr(static_cast<double>(global_step), total_steps,
                                    cfg.max_lr, start_div, cfg.final_div, cfg.pct_up);
      lr_sum += lr;

      std::vector<std::size_t> rows =
          balanced_sample(train_labels, cfg.batch_size, sample_rng);

      Tensor images1 = gather_images(normed, 0, rows, train_idx);
      Tensor images2 = gather_images(normed, 1, rows, train_idx);
      if (augment_on) {
        std::vector<double> a1 = images1.data(), a2 = images2.data();
        for (std::size_t r = 0; r < rows.size(); ++r) {
          ImagePair pair;
          pair.side = normed.image_side;
          pair.m1.assign(a1.begin() + r * px, a1.begin() + (r + 1) * px);
          pair.m2.assign(a2.begin() + r * px, a2.begin() + (r + 1) * px);
          ImagePair out = augment(pair, aug_rng, cfg.augment);
          std::copy(out.m1.begin(), out.m1.end(), a1.begin() + r * px);
          std::copy(out.m2.begin(), out.m2.end(), a2.begin() + r * px);
        }
        images1 = Tensor({rows.size(), px}, std::move(a1));
        images2 = Tensor({rows.size(), px}, std::move(a2));
      }

      BoundParams w(result.params);
      std::array<ModalityBatch, 2> mb;
      mb[0].enc = encode_batch(cfg.encoder, w, kEncPrefix[0], images1);
      mb[1].enc = encode_batch(cfg.encoder, w, kEncPrefix[1], images2);
      mb[0].images = images1;
      mb[1].images = images2;

      Tensor total;
      std::vector<TermReport> terms;
      if (cfg.supervised) {
        std::vector<double> targets(rows.size(), 0.0), mask(rows.size(), 0.0);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          const int label = train_labels[rows[r]];
          if (label == static_cast<int>(Group::Other)) continue;
          targets[r] = label == static_cast<int>(Group::AD) ? 1.0 : 0.0;
          mask[r] = 1.0;
        }
        total = supervised_loss(mb[0].enc.latent, mb[1].enc.latent, w, targets, mask);
        terms.push_back({"bce", total.value(), std::nullopt});
      } else {
        BuiltLoss built = build_loss(cfg.graph, mb, w, cfg.encoder, cfg.critic);
        total = built.total;
        terms = std::move(built.terms);
      }
      if (!std::isfinite(total.value()))
        throw DomainError(str("train: non-finite loss at step ", global_step));

      std::unordered_map<std::string, Tensor> grads;
      if (total.tracked()) {
        diff::GradientMap g = diff::backward(total);
        for (const auto& name : result.params.trainable_names())
          grads.emplace(name, g.grad_of(w[name]));
      } else {
        for (const auto& name : result.params.trainable_names())
          grads.emplace(name, Tensor::zeros(result.params.get(name).shape()));
      }
      radam_step(opt, result.params, grads, lr);

      for (const auto& t : terms) {
        HistoryRow& row = row_for(t.name);
        row.loss += t.loss;
        if (t.bound) row.bound = row.bound.value_or(0.0) + *t.bound;
      }
      row_for("total").loss += total.value();
    }

    for (auto& row : acc) {
      row.loss /= static_cast<double>(steps_per_epoch);
      if (row.bound) *row.bound /= static_cast<double>(steps_per_epoch);
      row.lr = lr_sum / static_cast<double>(steps_per_epoch);
      result.history.push_back(std::move(row));
    }
    if (on_epoch) on_epoch(epoch, result.params);
  }
  return result;
}

}  // namespace mmfuse
