#include "mmfuse/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mmfuse/introspect.hpp"
#include "mmfuse/objectives.hpp"
#include "mmfuse/optim.hpp"
#include "mmfuse/probe.hpp"
#include "mmfuse/similarity.hpp"
#include "mmfuse/synthdata.hpp"

namespace mmfuse {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using diff::Tensor;

// --- config plumbing ---------------------------------------------------------

// During the configuration stage every failure is the user's config's fault.
template <typename F>
auto config_stage(F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

void reject_unknown(const json& obj, const std::vector<std::string>& allowed,
                    const std::string& where) {
  if (!obj.is_object())
    throw ConfigError("config: '" + where + "' must be a JSON object");
  for (const auto& [key, value] : obj.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("config: unknown key '" + key + "' in " + where);
}

template <typename T>
void read_into(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad value for '") + key + "'");
  }
}

struct RunPaths {
  fs::path out;
  std::string dataset;
  std::string checkpoint;
};

struct Cli {
  std::string command;
  json cfg = json::object();
  std::uint64_t seed = 1;
  RunPaths paths;
  std::string model;

  json section(const char* name) const {
    return cfg.contains(name) ? cfg.at(name) : json::object();
  }
};

GeneratorConfig parse_generator(const json& j, std::uint64_t seed) {
  reject_unknown(j, {"n_subjects", "image_side", "k_shared", "k_spec1", "k_spec2",
                     "noise_sigma", "label_noise", "group_ratios", "split_ratios",
                     "shared_gain1", "shared_gain2", "pairs_per_subject"},
                 "generator");
  GeneratorConfig g;
  read_into(j, "n_subjects", g.n_subjects);
  read_into(j, "image_side", g.image_side);
  read_into(j, "k_shared", g.k_shared);
  read_into(j, "k_spec1", g.k_spec1);
  read_into(j, "k_spec2", g.k_spec2);
  read_into(j, "noise_sigma", g.noise_sigma);
  read_into(j, "label_noise", g.label_noise);
  read_into(j, "group_ratios", g.group_ratios);
  read_into(j, "split_ratios", g.split_ratios);
  read_into(j, "shared_gain1", g.shared_gain1);
  read_into(j, "shared_gain2", g.shared_gain2);
  read_into(j, "pairs_per_subject", g.pairs_per_subject);
  g.seed = seed;
  g.validate();
  return g;
}

json echo_generator(const GeneratorConfig& g) {
  return {{"n_subjects", g.n_subjects},
          {"image_side", g.image_side},
          {"k_shared", g.k_shared},
          {"k_spec1", g.k_spec1},
          {"k_spec2", g.k_spec2},
          {"noise_sigma", g.noise_sigma},
          {"label_noise", g.label_noise},
          {"group_ratios", g.group_ratios},
          {"split_ratios", g.split_ratios},
          {"shared_gain1", g.shared_gain1},
          {"shared_gain2", g.shared_gain2},
          {"pairs_per_subject", g.pairs_per_subject}};
}

EncoderConfig parse_encoder(const json& j) {
  reject_unknown(j, {"image_side", "patch_side", "d_loc", "d_z", "hidden"},
                 "encoder");
  EncoderConfig e;
  read_into(j, "image_side", e.image_side);
  read_into(j, "patch_side", e.patch_side);
  read_into(j, "d_loc", e.d_loc);
  read_into(j, "d_z", e.d_z);
  read_into(j, "hidden", e.hidden);
  e.validate();
  return e;
}

json echo_encoder(const EncoderConfig& e) {
  return {{"image_side", e.image_side},
          {"patch_side", e.patch_side},
          {"d_loc", e.d_loc},
          {"d_z", e.d_z},
          {"hidden", e.hidden}};
}

TrainConfig parse_training(const Cli& cli) {
  const json j = cli.section("training");
  reject_unknown(j, {"epochs", "batch_size", "base_lr", "max_lr", "final_div",
                     "pct_up", "supervised", "augment", "critic"},
                 "training");
  TrainConfig t;
  read_into(j, "epochs", t.epochs);
  read_into(j, "batch_size", t.batch_size);
  read_into(j, "base_lr", t.base_lr);
  read_into(j, "max_lr", t.max_lr);
  read_into(j, "final_div", t.final_div);
  read_into(j, "pct_up", t.pct_up);
  read_into(j, "supervised", t.supervised);
  if (j.contains("augment")) {
    const json& a = j.at("augment");
    reject_unknown(a, {"flips", "crops", "crop_fraction"}, "training.augment");
    read_into(a, "flips", t.augment.flips);
    read_into(a, "crops", t.augment.crops);
    read_into(a, "crop_fraction", t.augment.crop_fraction);
  }
  if (j.contains("critic")) {
    const json& c = j.at("critic");
    reject_unknown(c, {"clip", "penalty", "embed_dim"}, "training.critic");
    read_into(c, "clip", t.critic.clip);
    read_into(c, "penalty", t.critic.penalty);
    read_into(c, "embed_dim", t.critic.embed_dim);
  }
  t.seed = cli.seed;
  t.encoder = parse_encoder(cli.section("encoder"));
  if (!t.supervised) {
    if (!cli.cfg.contains("objective"))
      throw ConfigError("config: train needs an 'objective' section (or training.supervised)");
    t.graph = graph_from_json(cli.cfg.at("objective").dump());
  }
  t.validate();
  return t;
}

json echo_training(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"base_lr", t.base_lr},
          {"max_lr", t.max_lr},
          {"final_div", t.final_div},
          {"pct_up", t.pct_up},
          {"supervised", t.supervised},
          {"augment",
           {{"flips", t.augment.flips},
            {"crops", t.augment.crops},
            {"crop_fraction", t.augment.crop_fraction}}},
          {"critic",
           {{"clip", t.critic.clip},
            {"penalty", t.critic.penalty},
            {"embed_dim", t.critic.embed_dim}}}};
}

SearchSpace parse_probe(const json& j) {
  reject_unknown(j, {"c_lo", "c_hi", "penalties", "iterations", "folds",
                     "fit_max_iter", "fit_tol"},
                 "probe");
  SearchSpace s;
  read_into(j, "c_lo", s.c_lo);
  read_into(j, "c_hi", s.c_hi);
  if (j.contains("penalties")) {
    s.penalties.clear();
    for (const auto& name : j.at("penalties"))
      s.penalties.push_back(penalty_from_name(name.get<std::string>()));
  }
  read_into(j, "iterations", s.iterations);
  read_into(j, "folds", s.folds);
  read_into(j, "fit_max_iter", s.fit_max_iter);
  read_into(j, "fit_tol", s.fit_tol);
  s.validate();
  return s;
}

json echo_probe(const SearchSpace& s) {
  json names = json::array();
  for (Penalty p : s.penalties) names.push_back(penalty_name(p));
  return {{"c_lo", s.c_lo},         {"c_hi", s.c_hi},
          {"penalties", names},     {"iterations", s.iterations},
          {"folds", s.folds},       {"fit_max_iter", s.fit_max_iter},
          {"fit_tol", s.fit_tol}};
}

struct IntrospectionConfig {
  SmoothgradConfig sg;
  double percentile = 90.0;
};

IntrospectionConfig parse_introspection(const json& j) {
  reject_unknown(j, {"sigma", "n_samples", "percentile"}, "introspection");
  IntrospectionConfig c;
  read_into(j, "sigma", c.sg.sigma);
  read_into(j, "n_samples", c.sg.n_samples);
  read_into(j, "percentile", c.percentile);
  c.sg.validate();
  if (c.percentile < 0.0 || c.percentile > 100.0)
    throw ConfigError("config: introspection.percentile must lie in [0, 100]");
  return c;
}

json echo_introspection(const IntrospectionConfig& c) {
  return {{"sigma", c.sg.sigma},
          {"n_samples", c.sg.n_samples},
          {"percentile", c.percentile}};
}

double parse_var_keep(const json& j) {
  reject_unknown(j, {"var_keep"}, "similarity");
  double var_keep = 0.99;
  read_into(j, "var_keep", var_keep);
  if (!(var_keep > 0.0 && var_keep <= 1.0))
    throw ConfigError("config: similarity.var_keep must lie in (0, 1]");
  return var_keep;
}

// --- small file helpers ------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_config_echo(const Cli& cli, json resolved) {
  resolved["seed"] = cli.seed;
  resolved["out"] = cli.paths.out.string();
  write_text(cli.paths.out / (cli.command + "_config.json"), resolved.dump(2) + "\n");
}

// 8-bit ASCII PGM; values expected in [lo, hi].
void write_pgm(const fs::path& path, const Tensor& img, double lo, double hi) {
  std::ostringstream out;
  out << "P2\n" << img.cols() << " " << img.rows() << "\n255\n";
  for (std::size_t i = 0; i < img.rows(); ++i) {
    for (std::size_t j = 0; j < img.cols(); ++j) {
      const double t = (img.at(i, j) - lo) / (hi - lo);
      const int v = static_cast<int>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
      out << v << (j + 1 == img.cols() ? "" : " ");
    }
    out << "\n";
  }
  write_text(path, out.str());
}

void write_grid_csv(const fs::path& path, const Tensor& img) {
  std::ostringstream out;
  for (std::size_t i = 0; i < img.rows(); ++i) {
    for (std::size_t j = 0; j < img.cols(); ++j)
      out << fmt(img.at(i, j)) << (j + 1 == img.cols() ? "" : ",");
    out << "\n";
  }
  write_text(path, out.str());
}

const char* group_name(int g) {
  switch (g) {
    case 0: return "HC";
    case 1: return "AD";
    case 2: return "other";
    default: return "unknown";
  }
}

struct CheckpointMeta {
  std::string model;
  std::string objective;
  std::uint64_t seed = 0;
  EncoderConfig encoder;
};

fs::path meta_path(const std::string& checkpoint) {
  return fs::path(checkpoint + ".meta.json");
}

CheckpointMeta load_meta(const std::string& checkpoint) {
  const json j = json::parse(slurp(meta_path(checkpoint)));
  reject_unknown(j, {"model", "objective", "seed", "encoder"}, "checkpoint meta");
  CheckpointMeta m;
  read_into(j, "model", m.model);
  read_into(j, "objective", m.objective);
  read_into(j, "seed", m.seed);
  m.encoder = parse_encoder(j.at("encoder"));
  return m;
}

// Normalized holdout latents for both modalities plus the matching labels.
struct HoldoutLatents {
  std::array<Tensor, 2> z;
  std::vector<int> labels;
};

Tensor encode_rows(const EncoderConfig& enc, const BoundParams& w,
                   const std::string& prefix, const PairedDataset& data,
                   std::size_t modality, const std::vector<std::size_t>& rows) {
  std::vector<double> flat;
  flat.reserve(rows.size() * enc.image_side * enc.image_side);
  for (std::size_t r : rows)
    flat.insert(flat.end(), data.images[modality][r].begin(),
                data.images[modality][r].end());
  Tensor batch({rows.size(), enc.image_side * enc.image_side}, std::move(flat));
  return encode_batch(enc, w, prefix, batch).latent;
}

HoldoutLatents holdout_latents(const EncoderConfig& enc, const ParamStore& params,
                               const PairedDataset& raw) {
  raw.validate();
  if (raw.image_side != enc.image_side)
    throw ShapeError("dataset image_side does not match the checkpoint encoder");
  const PairedDataset data = znormalize(raw, compute_norm_stats(raw, Split::Train));
  const std::vector<std::size_t> rows = data.indices_of_split(Split::Holdout);
  if (rows.empty()) throw ContractError("dataset has no holdout rows");
  HoldoutLatents h;
  const BoundParams w(params);
  for (std::size_t m = 0; m < 2; ++m)
    h.z[m] = encode_rows(enc, w, kEncPrefix[m], data, m, rows);
  for (std::size_t r : rows) h.labels.push_back(data.labels[r]);
  return h;
}

// --- commands ----------------------------------------------------------------

int cmd_generate(const Cli& cli) {
  GeneratorConfig gen =
      config_stage([&] { return parse_generator(cli.section("generator"), cli.seed); });
  PairedDataset data = generate(gen);
  save_dataset(data, (cli.paths.out / "dataset.mmdt").string(),
               (cli.paths.out / "manifest.json").string());
  write_config_echo(cli, {{"generator", echo_generator(gen)}});
  std::cout << "generated " << data.size() << " pairs -> "
            << (cli.paths.out / "dataset.mmdt").string() << "\n";
  return 0;
}

void write_history_csv(const fs::path& path, const std::vector<HistoryRow>& rows) {
  std::ostringstream out;
  out << "epoch,term,bound,loss,lr\n";
  for (const HistoryRow& r : rows) {
    if (r.term == "total") continue;  // recoverable; keeps one row per term
    out << r.epoch << "," << r.term << ","
        << (r.bound ? fmt(*r.bound) : std::string()) << "," << fmt(r.loss) << ","
        << fmt(r.lr) << "\n";
  }
  write_text(path, out.str());
}

// The objective string in the meta is either "supervised" or a JSON graph;
// presets keep their name for report provenance.
std::string preset_of(const std::string& objective) {
  if (objective == "supervised") return "supervised";
  try {
    const json j = json::parse(objective);
    if (j.contains("preset")) return j.at("preset").get<std::string>();
  } catch (const json::exception&) {
  }
  return "custom";
}

int cmd_train(const Cli& cli) {
  TrainConfig t = config_stage([&] { return parse_training(cli); });
  if (cli.paths.dataset.empty())
    throw ConfigError("config: train needs a 'dataset' path");
  PairedDataset data = load_dataset(cli.paths.dataset);

  TrainResult result = train(t, data);

  const std::string objective =
      t.supervised ? std::string("supervised") : cli.cfg.at("objective").dump();
  const std::string model = !cli.model.empty() ? cli.model : preset_of(objective);
  const std::string checkpoint = (cli.paths.out / "checkpoint.mmdt").string();
  save_param_store(checkpoint, result.params);
  json meta = {{"model", model},
               {"objective", objective},
               {"seed", cli.seed},
               {"encoder", echo_encoder(t.encoder)}};
  write_text(meta_path(checkpoint), meta.dump(2) + "\n");
  write_history_csv(cli.paths.out / "history.csv", result.history);

  json resolved = {{"dataset", cli.paths.dataset},
                   {"model", model},
                   {"encoder", echo_encoder(t.encoder)},
                   {"training", echo_training(t)}};
  if (!t.supervised) resolved["objective"] = cli.cfg.at("objective");
  write_config_echo(cli, resolved);

  double last_total = 0.0;
  for (const HistoryRow& r : result.history)
    if (r.term == "total") last_total = r.loss;
  std::cout << "trained " << t.epochs << " epochs, final loss " << fmt(last_total)
            << " -> " << checkpoint << "\n";
  return 0;
}

int cmd_probe(const Cli& cli) {
  SearchSpace space = config_stage([&] { return parse_probe(cli.section("probe")); });
  if (cli.paths.dataset.empty() || cli.paths.checkpoint.empty())
    throw ConfigError("config: probe needs 'dataset' and 'checkpoint' paths");
  const CheckpointMeta meta = load_meta(cli.paths.checkpoint);
  ParamStore params = load_param_store(cli.paths.checkpoint);
  PairedDataset data = load_dataset(cli.paths.dataset);

  ProbeReport report = evaluate_representation(meta.encoder, params, data, space, cli.seed);

  const std::string preset = preset_of(meta.objective);
  std::ostringstream csv;
  csv << "model,modality,auc,seed,preset\n";
  const char* mods[] = {"m1", "m2"};
  for (std::size_t m = 0; m < 2; ++m)
    csv << meta.model << "," << mods[m] << "," << fmt(report.modality[m].holdout_auc)
        << "," << cli.seed << "," << preset << "\n";
  csv << meta.model << ",mean," << fmt(report.mean_auc) << "," << cli.seed << ","
      << preset << "\n";
  write_text(cli.paths.out / "probe.csv", csv.str());

  json best;
  for (std::size_t m = 0; m < 2; ++m) {
    const ProbeOutcome& o = report.modality[m];
    best[mods[m]] = {{"C", o.best.C},
                     {"penalty", penalty_name(o.best.penalty)},
                     {"l1_ratio", o.best.l1_ratio},
                     {"cv_auc", o.cv_auc},
                     {"holdout_auc", o.holdout_auc}};
  }
  write_text(cli.paths.out / "probe_best.json", best.dump(2) + "\n");

  write_config_echo(cli, {{"dataset", cli.paths.dataset},
                          {"checkpoint", cli.paths.checkpoint},
                          {"probe", echo_probe(space)}});
  std::cout << "probe holdout AUC m1 " << fmt(report.modality[0].holdout_auc)
            << " m2 " << fmt(report.modality[1].holdout_auc) << " mean "
            << fmt(report.mean_auc) << "\n";
  return 0;
}

int cmd_similarity(const Cli& cli) {
  const double var_keep =
      config_stage([&] { return parse_var_keep(cli.section("similarity")); });
  if (cli.paths.dataset.empty() || cli.paths.checkpoint.empty())
    throw ConfigError("config: similarity needs 'dataset' and 'checkpoint' paths");
  const CheckpointMeta meta = load_meta(cli.paths.checkpoint);
  ParamStore params = load_param_store(cli.paths.checkpoint);
  PairedDataset data = load_dataset(cli.paths.dataset);
  HoldoutLatents h = holdout_latents(meta.encoder, params, data);

  const std::string preset = preset_of(meta.objective);
  std::ostringstream csv;
  csv << "model,group,metric,value,seed,preset\n";
  auto row = [&](const std::string& group, const char* metric, bool present,
                 double value) {
    csv << meta.model << "," << group << "," << metric << ","
        << (present ? fmt(value) : std::string("absent")) << "," << cli.seed << ","
        << preset << "\n";
  };
  try {
    row("all", "cka", true, linear_cka(h.z[0], h.z[1]));
    row("all", "svcca", true, svcca(h.z[0], h.z[1], var_keep));
  } catch (const Error&) {
    row("all", "cka", false, 0.0);
    row("all", "svcca", false, 0.0);
  }
  SimilarityReport rep = group_similarity_report(h.z[0], h.z[1], h.labels, var_keep);
  for (const GroupSimilarity& g : rep.groups) {
    row(group_name(g.group), "cka", g.present, g.cka);
    row(group_name(g.group), "svcca", g.present, g.svcca);
  }
  write_text(cli.paths.out / "similarity.csv", csv.str());

  write_config_echo(cli, {{"dataset", cli.paths.dataset},
                          {"checkpoint", cli.paths.checkpoint},
                          {"similarity", {{"var_keep", var_keep}}}});
  std::cout << "similarity report -> " << (cli.paths.out / "similarity.csv").string()
            << "\n";
  return 0;
}

double percentile_of(std::vector<double> v, double pct) {
  std::sort(v.begin(), v.end());
  const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

int cmd_saliency(const Cli& cli) {
  IntrospectionConfig ic =
      config_stage([&] { return parse_introspection(cli.section("introspection")); });
  if (cli.paths.dataset.empty() || cli.paths.checkpoint.empty())
    throw ConfigError("config: saliency needs 'dataset' and 'checkpoint' paths");
  const CheckpointMeta meta = load_meta(cli.paths.checkpoint);
  ParamStore params = load_param_store(cli.paths.checkpoint);
  PairedDataset raw = load_dataset(cli.paths.dataset);
  raw.validate();
  if (raw.image_side != meta.encoder.image_side)
    throw ShapeError("dataset image_side does not match the checkpoint encoder");
  const PairedDataset data = znormalize(raw, compute_norm_stats(raw, Split::Train));
  const std::vector<std::size_t> rows = data.indices_of_split(Split::Holdout);
  if (rows.empty()) throw ContractError("dataset has no holdout rows");

  const EncoderConfig& enc = meta.encoder;
  const std::size_t side = enc.image_side, d_z = enc.d_z, n = rows.size();
  const Tensor mask = make_disk_mask(side);
  const BoundParams w(params);

  const fs::path dir = cli.paths.out / "saliency";
  fs::create_directories(dir);

  // maps[modality][subject][dim], post-processed. Subjects are independent;
  // each owns a seed substream so the schedule is thread-invariant.
  std::array<std::vector<std::vector<Tensor>>, 2> maps;
  for (std::size_t m = 0; m < 2; ++m) {
    maps[m].resize(n);
    parallel_for(n, [&](std::size_t i) {
      Rng rng(Rng::mix(cli.seed, "saliency.m" + std::to_string(m + 1) + "." +
                                     std::to_string(i)));
      const Tensor image({side, side}, data.images[m][rows[i]]);
      std::vector<Tensor> per_dim;
      per_dim.reserve(d_z);
      for (std::size_t dim = 0; dim < d_z; ++dim)
        per_dim.push_back(postprocess(
            smoothgrad(enc, w, kEncPrefix[m], image, dim, ic.sg, rng), mask));
      maps[m][i] = std::move(per_dim);
    });
  }

  // Mean map per dimension: raw values to CSV, percentile-thresholded to PGM.
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t dim = 0; dim < d_z; ++dim) {
      std::vector<double> mean(side * side, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t px = 0; px < mean.size(); ++px)
          mean[px] += maps[m][i][dim].data()[px] / static_cast<double>(n);
      Tensor mean_map({side, side}, std::move(mean));

      std::vector<double> in_mask;
      for (std::size_t px = 0; px < mask.size(); ++px)
        if (mask.data()[px] == 1.0) in_mask.push_back(mean_map.data()[px]);
      const double cut = percentile_of(in_mask, ic.percentile);
      std::vector<double> shown(mean_map.data());
      for (double& v : shown)
        if (v < cut) v = 0.0;

      std::ostringstream stem;
      stem << "m" << m + 1 << "_dim" << std::setw(2) << std::setfill('0') << dim;
      write_pgm(dir / (stem.str() + ".pgm"), Tensor({side, side}, std::move(shown)),
                0.0, 1.0);
      write_grid_csv(dir / (stem.str() + ".csv"), mean_map);
    }

  SaliencyPairing pairing = cross_modal_saliency_correlation(
      summary_matrix(maps[0], mask), summary_matrix(maps[1], mask));
  write_grid_csv(dir / "correlation.csv", pairing.correlation);

  // Group contrast (HC vs AD) on each modality's half of the winning pair.
  json peaks;
  const std::size_t pair_dim[2] = {pairing.best_dim1, pairing.best_dim2};
  for (std::size_t m = 0; m < 2; ++m) {
    std::vector<Tensor> subject_maps;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
      subject_maps.push_back(maps[m][i][pair_dim[m]]);
      labels.push_back(data.labels[rows[i]]);
    }
    GroupDiffMap diff_map = group_diff_map(subject_maps, labels,
                                           static_cast<int>(Group::HC),
                                           static_cast<int>(Group::AD));
    const std::string stem = "rbc_m" + std::to_string(m + 1);
    write_pgm(dir / (stem + ".pgm"), diff_map.rbc, -1.0, 1.0);
    write_grid_csv(dir / (stem + ".csv"), diff_map.rbc);
    peaks["m" + std::to_string(m + 1)] = {{"dim", pair_dim[m]},
                                          {"row", diff_map.peak_row},
                                          {"col", diff_map.peak_col}};
  }

  json summary = {{"model", meta.model},
                  {"seed", cli.seed},
                  {"preset", preset_of(meta.objective)},
                  {"percentile", ic.percentile},
                  {"best_pair",
                   {{"dim_m1", pairing.best_dim1},
                    {"dim_m2", pairing.best_dim2},
                    {"correlation", pairing.best_value}}},
                  {"group_diff_peaks", peaks}};
  write_text(cli.paths.out / "saliency.json", summary.dump(2) + "\n");

  write_config_echo(cli, {{"dataset", cli.paths.dataset},
                          {"checkpoint", cli.paths.checkpoint},
                          {"introspection", echo_introspection(ic)}});
  std::cout << "saliency maps for " << d_z << " dims x 2 modalities -> "
            << dir.string() << "\n";
  return 0;
}

// --- report ------------------------------------------------------------------

struct RunRow {
  std::string model, preset, seed;
  std::optional<double> auc_m1, auc_m2, mean_auc, cka, svcca;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

void read_probe_csv(const fs::path& path, RunRow& row) {
  std::ifstream in(path);
  if (!in) return;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    const auto f = split_csv_line(line);
    if (f.size() < 5) continue;
    row.model = f[0];
    row.seed = f[3];
    row.preset = f[4];
    if (f[1] == "m1") row.auc_m1 = std::stod(f[2]);
    if (f[1] == "m2") row.auc_m2 = std::stod(f[2]);
    if (f[1] == "mean") row.mean_auc = std::stod(f[2]);
  }
}

void read_similarity_csv(const fs::path& path, RunRow& row) {
  std::ifstream in(path);
  if (!in) return;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto f = split_csv_line(line);
    if (f.size() < 6 || f[1] != "all" || f[3] == "absent") continue;
    if (row.model.empty()) row.model = f[0];
    if (row.preset.empty()) row.preset = f[5];
    if (row.seed.empty()) row.seed = f[4];
    if (f[2] == "cka") row.cka = std::stod(f[3]);
    if (f[2] == "svcca") row.svcca = std::stod(f[3]);
  }
}

// Spearman rank correlation with midrank ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = mid;
      i = j + 1;
    }
    return r;
  };
  const std::vector<double> rx = ranks(x), ry = ranks(y);
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

int cmd_report(const Cli& cli) {
  const json j = config_stage([&]() -> json {
    const json section = cli.section("report");
    reject_unknown(section, {"runs", "runs_dir"}, "report");
    if (!section.contains("runs") && !section.contains("runs_dir"))
      throw ConfigError("config: report needs 'runs' (list) or 'runs_dir'");
    return section;
  });

  std::vector<fs::path> run_dirs;
  if (j.contains("runs"))
    for (const auto& r : j.at("runs")) run_dirs.emplace_back(r.get<std::string>());
  if (j.contains("runs_dir")) {
    std::vector<fs::path> found;
    for (const auto& entry : fs::directory_iterator(j.at("runs_dir").get<std::string>()))
      if (entry.is_directory()) found.push_back(entry.path());
    std::sort(found.begin(), found.end());
    run_dirs.insert(run_dirs.end(), found.begin(), found.end());
  }

  std::vector<RunRow> rows;
  for (const fs::path& dir : run_dirs) {
    RunRow row;
    read_probe_csv(dir / "probe.csv", row);
    read_similarity_csv(dir / "similarity.csv", row);
    if (row.model.empty()) row.model = dir.filename().string();
    rows.push_back(std::move(row));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const RunRow& a, const RunRow& b) {
    const double ka = a.mean_auc.value_or(-1.0), kb = b.mean_auc.value_or(-1.0);
    return ka > kb;
  });

  std::vector<double> cka_list, auc_list;
  for (const RunRow& r : rows)
    if (r.cka && r.mean_auc) {
      cka_list.push_back(*r.cka);
      auc_list.push_back(*r.mean_auc);
    }
  const bool have_corr = cka_list.size() >= 2;
  const double corr = have_corr ? spearman(cka_list, auc_list) : 0.0;

  auto cell = [](const std::optional<double>& v) {
    return v ? fmt(*v) : std::string("absent");
  };
  std::ostringstream csv, md;
  csv << "model,seed,preset,auc_m1,auc_m2,mean_auc,cka,svcca\n";
  md << "| model | seed | preset | AUC m1 | AUC m2 | mean AUC | CKA | SVCCA |\n"
     << "|---|---|---|---|---|---|---|---|\n";
  for (const RunRow& r : rows) {
    csv << r.model << "," << r.seed << "," << r.preset << "," << cell(r.auc_m1)
        << "," << cell(r.auc_m2) << "," << cell(r.mean_auc) << "," << cell(r.cka)
        << "," << cell(r.svcca) << "\n";
    md << "| " << r.model << " | " << r.seed << " | " << r.preset << " | "
       << cell(r.auc_m1) << " | " << cell(r.auc_m2) << " | " << cell(r.mean_auc)
       << " | " << cell(r.cka) << " | " << cell(r.svcca) << " |\n";
  }
  csv << "spearman_cka_vs_mean_auc," << (have_corr ? fmt(corr) : "absent") << ",,,,,,\n";
  md << "\nSpearman rank correlation, cross-modal CKA vs mean AUC: "
     << (have_corr ? fmt(corr) : "absent") << "\n";

  write_text(cli.paths.out / "report.csv", csv.str());
  write_text(cli.paths.out / "report.md", md.str());
  write_config_echo(cli, {{"report", j}});
  std::cout << "report over " << rows.size() << " runs -> "
            << (cli.paths.out / "report.csv").string() << "\n";
  return 0;
}

const std::vector<std::string> kTopKeys{
    "seed",     "out",   "model",        "dataset", "checkpoint", "generator",
    "encoder",  "objective", "training", "probe",   "introspection",
    "similarity", "report"};

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"multimodal contrastive fusion toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_flag;
  std::uint64_t seed_flag = 0;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"generate", "write a synthetic paired-modality dataset"},
      {"train", "train encoders under an objective graph"},
      {"probe", "hyperparameter-searched linear probes on holdout latents"},
      {"similarity", "CKA/SVCCA between modality representations per group"},
      {"saliency", "per-dimension SmoothGrad maps and group contrasts"},
      {"report", "aggregate runs into a sorted comparison table"}};
  for (const auto& [name, desc] : commands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--seed", seed_flag, "override the config seed");
    sub->add_option("--out", out_flag, "override the output directory");
  }

  std::vector<const char*> argv{"mmfuse"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    Cli cli;
    CLI::App* sub = app.get_subcommands().front();
    cli.command = sub->get_name();

    config_stage([&] {
      cli.cfg = json::parse(slurp(config_path));
      reject_unknown(cli.cfg, kTopKeys, "top level");
      read_into(cli.cfg, "seed", cli.seed);
      std::string out = cli.cfg.value("out", std::string());
      cli.model = cli.cfg.value("model", std::string());
      cli.paths.dataset = cli.cfg.value("dataset", std::string());
      cli.paths.checkpoint = cli.cfg.value("checkpoint", std::string());
      if (sub->count("--seed") > 0) cli.seed = seed_flag;
      if (sub->count("--out") > 0) out = out_flag;
      if (out.empty()) throw ConfigError("config: no output directory ('out' or --out)");
      cli.paths.out = out;
      return 0;
    });
    fs::create_directories(cli.paths.out);

    if (cli.command == "generate") return cmd_generate(cli);
    if (cli.command == "train") return cmd_train(cli);
    if (cli.command == "probe") return cmd_probe(cli);
    if (cli.command == "similarity") return cmd_similarity(cli);
    if (cli.command == "saliency") return cmd_saliency(cli);
    if (cli.command == "report") return cmd_report(cli);
    throw ContractError("unreachable subcommand");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mmfuse
