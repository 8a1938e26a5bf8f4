#include <doctest.h>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmfuse/cli.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

// Runs the CLI in-process with cout/cerr captured.
CliResult cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  std::streambuf* old_out = std::cout.rdbuf(out.rdbuf());
  std::streambuf* old_err = std::cerr.rdbuf(err.rdbuf());
  CliResult r;
  try {
    r.code = mmfuse::run_cli(args);
  } catch (...) {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    throw;
  }
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path fresh_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / "mmfuse_cli_tests" / tag;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
}

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE_MESSAGE(f.good(), "missing file: " << path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

std::vector<std::string> fields_of(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

json tiny_generator(std::uint64_t seed, std::size_t n_subjects = 48) {
  return {{"seed", seed},
          {"generator", {{"n_subjects", n_subjects}, {"image_side", 8}}}};
}

json tiny_train(const std::string& dataset, std::uint64_t seed, std::size_t epochs,
                const std::string& preset) {
  return {{"seed", seed},
          {"dataset", dataset},
          {"encoder",
           {{"image_side", 8},
            {"patch_side", 4},
            {"d_loc", 8},
            {"d_z", 8},
            {"hidden", json::array({8})}}},
          {"training",
           {{"epochs", epochs},
            {"batch_size", 16},
            {"critic", {{"embed_dim", 8}}}}},
          {"objective", {{"preset", preset}}}};
}

double mean_auc_of(const fs::path& probe_csv) {
  for (const std::string& line : lines_of(slurp(probe_csv))) {
    const auto f = fields_of(line);
    if (f.size() >= 3 && f[1] == "mean") return std::stod(f[2]);
  }
  REQUIRE_MESSAGE(false, "no mean row in " << probe_csv.string());
  return 0.0;
}

// One generated dataset plus one short preset-S training, shared by the
// report-command tests below. Built on first use.
struct Pipeline {
  fs::path root;
  std::string dataset, checkpoint;
};

const Pipeline& tiny_pipeline() {
  static const Pipeline p = [] {
    Pipeline q;
    q.root = fresh_dir("pipeline");
    const fs::path gen_cfg = q.root / "gen.json";
    write_file(gen_cfg, tiny_generator(7).dump());
    const fs::path data_dir = q.root / "data";
    REQUIRE(cli({"generate", "--config", gen_cfg.string(), "--out",
                 data_dir.string()})
                .code == 0);
    q.dataset = (data_dir / "dataset.mmdt").string();

    const fs::path train_cfg = q.root / "train.json";
    write_file(train_cfg, tiny_train(q.dataset, 7, 3, "S").dump());
    const fs::path train_dir = q.root / "train";
    REQUIRE(cli({"train", "--config", train_cfg.string(), "--out",
                 train_dir.string()})
                .code == 0);
    q.checkpoint = (train_dir / "checkpoint.mmdt").string();
    return q;
  }();
  return p;
}

}  // namespace

TEST_CASE("generate writes the dataset, a parseable manifest, and a config echo") {
  const fs::path root = fresh_dir("gen_smoke");
  write_file(root / "cfg.json", tiny_generator(3).dump());
  const CliResult r = cli({"generate", "--config", (root / "cfg.json").string(),
                           "--out", (root / "out").string()});
  CHECK(r.code == 0);
  CHECK(fs::exists(root / "out" / "dataset.mmdt"));
  const json manifest = json::parse(slurp(root / "out" / "manifest.json"));
  CHECK(manifest.is_object());
  const json echo = json::parse(slurp(root / "out" / "generate_config.json"));
  CHECK(echo.at("seed").get<std::uint64_t>() == 3);
  CHECK(echo.at("generator").at("n_subjects").get<std::size_t>() == 48);
  CHECK(echo.at("generator").contains("noise_sigma"));  // defaults filled in
}

TEST_CASE("generate is byte-identical for a fixed seed") {
  const fs::path root = fresh_dir("gen_det");
  write_file(root / "cfg.json", tiny_generator(11).dump());
  for (const char* run : {"a", "b"})
    CHECK(cli({"generate", "--config", (root / "cfg.json").string(), "--out",
               (root / run).string()})
              .code == 0);
  CHECK(slurp(root / "a" / "dataset.mmdt") == slurp(root / "b" / "dataset.mmdt"));
  CHECK(slurp(root / "a" / "manifest.json") == slurp(root / "b" / "manifest.json"));
}

TEST_CASE("the --seed flag overrides the config seed") {
  const fs::path root = fresh_dir("gen_seed_flag");
  write_file(root / "cfg.json", tiny_generator(11).dump());
  CHECK(cli({"generate", "--config", (root / "cfg.json").string(), "--out",
             (root / "base").string()})
            .code == 0);
  CHECK(cli({"generate", "--config", (root / "cfg.json").string(), "--seed", "12",
             "--out", (root / "override").string()})
            .code == 0);
  const json echo = json::parse(slurp(root / "override" / "generate_config.json"));
  CHECK(echo.at("seed").get<std::uint64_t>() == 12);
  CHECK(slurp(root / "base" / "dataset.mmdt") !=
        slurp(root / "override" / "dataset.mmdt"));
}

TEST_CASE("re-running from the echoed config reproduces the dataset") {
  const fs::path root = fresh_dir("gen_echo");
  write_file(root / "cfg.json", tiny_generator(5).dump());
  CHECK(cli({"generate", "--config", (root / "cfg.json").string(), "--out",
             (root / "first").string()})
            .code == 0);
  CHECK(cli({"generate", "--config",
             (root / "first" / "generate_config.json").string(), "--out",
             (root / "second").string()})
            .code == 0);
  CHECK(slurp(root / "first" / "dataset.mmdt") ==
        slurp(root / "second" / "dataset.mmdt"));
}

TEST_CASE("malformed config JSON exits 2 and reports the parse location") {
  const fs::path root = fresh_dir("bad_json");
  write_file(root / "cfg.json", "{ \"seed\": 1, oops");
  const CliResult r = cli({"generate", "--config", (root / "cfg.json").string(),
                           "--out", (root / "out").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("config error") != std::string::npos);
  CHECK(r.err.find("parse error at line") != std::string::npos);
}

TEST_CASE("unknown config keys are rejected with exit code 2") {
  const fs::path root = fresh_dir("bad_keys");
  json top = tiny_generator(1);
  top["bogus"] = 1;
  write_file(root / "top.json", top.dump());
  CliResult r = cli({"generate", "--config", (root / "top.json").string(), "--out",
                     (root / "out").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("unknown key 'bogus'") != std::string::npos);

  json section = tiny_generator(1);
  section["generator"]["n_subjectz"] = 10;
  write_file(root / "section.json", section.dump());
  r = cli({"generate", "--config", (root / "section.json").string(), "--out",
           (root / "out").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("unknown key 'n_subjectz'") != std::string::npos);
  CHECK(r.err.find("generator") != std::string::npos);
}

TEST_CASE("an unknown objective preset exits with the list of valid presets") {
  const fs::path root = fresh_dir("bad_preset");
  const Pipeline& p = tiny_pipeline();
  write_file(root / "cfg.json", tiny_train(p.dataset, 1, 1, "Q").dump());
  const CliResult r = cli({"train", "--config", (root / "cfg.json").string(),
                           "--out", (root / "out").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("unknown objective preset 'Q'") != std::string::npos);
  CHECK(r.err.find("valid:") != std::string::npos);
  CHECK(r.err.find("CL-CS") != std::string::npos);
  CHECK(r.err.find("S-AE") != std::string::npos);
}

TEST_CASE("usage errors exit 2 and --help exits 0") {
  CHECK(cli({}).code == 2);                      // no subcommand
  CHECK(cli({"frobnicate"}).code == 2);          // unknown subcommand
  CHECK(cli({"train"}).code == 2);               // missing --config
  const CliResult help = cli({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("Usage") != std::string::npos);
}

TEST_CASE("training preset S writes one history row per epoch and edge") {
  const Pipeline& p = tiny_pipeline();
  const fs::path root = fresh_dir("train_s");
  write_file(root / "cfg.json", tiny_train(p.dataset, 2, 4, "S").dump());
  const CliResult r = cli({"train", "--config", (root / "cfg.json").string(),
                           "--out", (root / "out").string()});
  CHECK(r.code == 0);
  CHECK(fs::exists(root / "out" / "checkpoint.mmdt"));

  const auto lines = lines_of(slurp(root / "out" / "history.csv"));
  REQUIRE(!lines.empty());
  CHECK(lines[0] == "epoch,term,bound,loss,lr");
  CHECK(lines.size() == 1 + 4 * 2);  // preset S has the two symmetric edges
  std::set<std::string> terms;
  for (std::size_t i = 1; i < lines.size(); ++i) terms.insert(fields_of(lines[i])[1]);
  CHECK(terms == std::set<std::string>{"S:1->2", "S:2->1"});

  const json meta = json::parse(slurp(root / "out" / "checkpoint.mmdt.meta.json"));
  CHECK(meta.at("model").get<std::string>() == "S");
  CHECK(meta.at("seed").get<std::uint64_t>() == 2);
  CHECK(meta.at("encoder").at("d_z").get<std::size_t>() == 8);
  CHECK(json::parse(meta.at("objective").get<std::string>()).at("preset") == "S");
}

TEST_CASE("training preset S-AE logs reconstruction terms for both modalities") {
  const Pipeline& p = tiny_pipeline();
  const fs::path root = fresh_dir("train_sae");
  write_file(root / "cfg.json", tiny_train(p.dataset, 2, 2, "S-AE").dump());
  CHECK(cli({"train", "--config", (root / "cfg.json").string(), "--out",
             (root / "out").string()})
            .code == 0);
  const auto lines = lines_of(slurp(root / "out" / "history.csv"));
  std::set<std::string> terms;
  for (std::size_t i = 1; i < lines.size(); ++i) terms.insert(fields_of(lines[i])[1]);
  CHECK(terms == std::set<std::string>{"S:1->2", "S:2->1", "recon1", "recon2"});
  CHECK(lines.size() == 1 + 2 * 4);
}

TEST_CASE("re-running from the echoed train config reproduces the checkpoint") {
  const Pipeline& p = tiny_pipeline();
  const fs::path root = fresh_dir("train_echo");
  write_file(root / "cfg.json", tiny_train(p.dataset, 4, 3, "S").dump());
  CHECK(cli({"train", "--config", (root / "cfg.json").string(), "--out",
             (root / "first").string()})
            .code == 0);
  CHECK(cli({"train", "--config",
             (root / "first" / "train_config.json").string(), "--out",
             (root / "second").string()})
            .code == 0);
  CHECK(slurp(root / "first" / "checkpoint.mmdt") ==
        slurp(root / "second" / "checkpoint.mmdt"));
  CHECK(slurp(root / "first" / "history.csv") ==
        slurp(root / "second" / "history.csv"));
}

TEST_CASE("probe writes provenance-stamped CSV and best-hyperparameter JSON") {
  const Pipeline& p = tiny_pipeline();
  const fs::path root = fresh_dir("probe_smoke");
  const json cfg = {{"dataset", p.dataset},
                    {"checkpoint", p.checkpoint},
                    {"probe",
                     {{"iterations", 4}, {"folds", 2}, {"fit_max_iter", 40}}}};
  write_file(root / "cfg.json", cfg.dump());
  const CliResult r = cli({"probe", "--config", (root / "cfg.json").string(),
                           "--seed", "11", "--out", (root / "out").string()});
  CHECK(r.code == 0);

  const auto lines = lines_of(slurp(root / "out" / "probe.csv"));
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "model,modality,auc,seed,preset");
  const char* mods[] = {"m1", "m2", "mean"};
  for (int i = 0; i < 3; ++i) {
    const auto f = fields_of(lines[1 + i]);
    REQUIRE(f.size() == 5);
    CHECK(f[0] == "S");
    CHECK(f[1] == mods[i]);
    const double auc = std::stod(f[2]);
    CHECK(auc >= 0.0);
    CHECK(auc <= 1.0);
    CHECK(f[3] == "11");
    CHECK(f[4] == "S");
  }

  const json best = json::parse(slurp(root / "out" / "probe_best.json"));
  for (const char* m : {"m1", "m2"}) {
    CHECK(best.at(m).at("C").get<double>() > 0.0);
    CHECK(best.at(m).contains("penalty"));
    CHECK(best.at(m).contains("l1_ratio"));
    CHECK(best.at(m).contains("cv_auc"));
    CHECK(best.at(m).contains("holdout_auc"));
  }
}

TEST_CASE("similarity reports one row per group and metric") {
  const Pipeline& p = tiny_pipeline();
  const fs::path root = fresh_dir("sim_smoke");
  const json cfg = {{"dataset", p.dataset}, {"checkpoint", p.checkpoint}};
  write_file(root / "cfg.json", cfg.dump());
  CHECK(cli({"similarity", "--config", (root / "cfg.json").string(), "--out",
             (root / "out").string()})
            .code == 0);

  const auto lines = lines_of(slurp(root / "out" / "similarity.csv"));
  REQUIRE(lines.size() >= 3);
  CHECK(lines[0] == "model,group,metric,value,seed,preset");
  std::set<std::pair<std::string, std::string>> seen;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = fields_of(lines[i]);
    REQUIRE(f.size() == 6);
    CHECK(f[0] == "S");
    CHECK((f[2] == "cka" || f[2] == "svcca"));
    if (f[3] != "absent") {
      const double v = std::stod(f[3]);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(seen.insert({f[1], f[2]}).second);  // no duplicate (group, metric)
  }
  CHECK(seen.count({"all", "cka"}) == 1);
  CHECK(seen.count({"all", "svcca"}) == 1);
}

TEST_CASE("saliency emits per-dimension maps for both modalities plus the pair JSON") {
  const Pipeline& p = tiny_pipeline();
  const fs::path root = fresh_dir("sal_smoke");
  const json cfg = {{"dataset", p.dataset},
                    {"checkpoint", p.checkpoint},
                    {"introspection", {{"sigma", 0.0}, {"n_samples", 1}}}};
  write_file(root / "cfg.json", cfg.dump());
  CHECK(cli({"saliency", "--config", (root / "cfg.json").string(), "--out",
             (root / "out").string()})
            .code == 0);

  const fs::path dir = root / "out" / "saliency";
  for (int m = 1; m <= 2; ++m)
    for (int dim = 0; dim < 8; ++dim) {  // d_z of the tiny encoder
      char stem[32];
      std::snprintf(stem, sizeof stem, "m%d_dim%02d", m, dim);
      CHECK(fs::exists(dir / (std::string(stem) + ".pgm")));
      CHECK(fs::exists(dir / (std::string(stem) + ".csv")));
    }
  CHECK(slurp(dir / "m1_dim00.pgm").rfind("P2\n8 8\n255", 0) == 0);
  CHECK(lines_of(slurp(dir / "correlation.csv")).size() == 8);
  for (int m = 1; m <= 2; ++m) {
    CHECK(fs::exists(dir / ("rbc_m" + std::to_string(m) + ".pgm")));
    CHECK(fs::exists(dir / ("rbc_m" + std::to_string(m) + ".csv")));
  }

  const json summary = json::parse(slurp(root / "out" / "saliency.json"));
  CHECK(summary.at("best_pair").at("dim_m1").get<std::size_t>() < 8);
  CHECK(summary.at("best_pair").at("dim_m2").get<std::size_t>() < 8);
  const double corr = summary.at("best_pair").at("correlation").get<double>();
  CHECK(corr >= -1.0);
  CHECK(corr <= 1.0);
  for (const char* m : {"m1", "m2"}) {
    CHECK(summary.at("group_diff_peaks").at(m).at("row").get<std::size_t>() < 8);
    CHECK(summary.at("group_diff_peaks").at(m).at("col").get<std::size_t>() < 8);
  }
}

TEST_CASE("missing input files and shape mismatches are runtime failures") {
  const Pipeline& p = tiny_pipeline();
  const fs::path root = fresh_dir("runtime_errors");

  write_file(root / "train.json",
             tiny_train((root / "no_such.mmdt").string(), 1, 1, "S").dump());
  CliResult r = cli({"train", "--config", (root / "train.json").string(), "--out",
                     (root / "out").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("error") != std::string::npos);

  // A dataset whose image side disagrees with the checkpoint encoder.
  json gen = tiny_generator(3);
  gen["generator"]["image_side"] = 16;
  write_file(root / "gen16.json", gen.dump());
  CHECK(cli({"generate", "--config", (root / "gen16.json").string(), "--out",
             (root / "data16").string()})
            .code == 0);
  const json sim = {{"dataset", (root / "data16" / "dataset.mmdt").string()},
                    {"checkpoint", p.checkpoint}};
  write_file(root / "sim.json", sim.dump());
  r = cli({"similarity", "--config", (root / "sim.json").string(), "--out",
           (root / "out").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("image_side") != std::string::npos);
}

TEST_CASE("report sorts runs by mean AUC and marks missing metrics absent") {
  const fs::path root = fresh_dir("report_fixture");
  auto run_dir = [&](const std::string& name, const std::string& probe,
                     const std::string& sim) {
    const fs::path d = root / name;
    fs::create_directories(d);
    if (!probe.empty()) write_file(d / "probe.csv", probe);
    if (!sim.empty()) write_file(d / "similarity.csv", sim);
    return d.string();
  };
  const std::string header = "model,modality,auc,seed,preset\n";
  const std::string sim_header = "model,group,metric,value,seed,preset\n";
  const std::string a = run_dir("a",
                                header + "alpha,m1,0.65,3,S\nalpha,m2,0.75,3,S\n"
                                         "alpha,mean,0.7,3,S\n",
                                sim_header + "alpha,all,cka,0.9,3,S\n"
                                             "alpha,all,svcca,0.8,3,S\n");
  const std::string b = run_dir("b",
                                header + "beta,m1,0.85,3,L\nbeta,m2,0.95,3,L\n"
                                         "beta,mean,0.9,3,L\n",
                                sim_header + "beta,all,cka,0.2,3,L\n"
                                             "beta,all,svcca,0.1,3,L\n");
  const std::string c = run_dir("c",
                                header + "gamma,m1,0.4,3,AE\ngamma,m2,0.6,3,AE\n"
                                         "gamma,mean,0.5,3,AE\n",
                                "");

  const json cfg = {{"report", {{"runs", json::array({a, b, c})}}}};
  write_file(root / "cfg.json", cfg.dump());
  const CliResult r = cli({"report", "--config", (root / "cfg.json").string(),
                           "--out", (root / "out").string()});
  CHECK(r.code == 0);  // run c has no similarity file, still exit 0

  const auto lines = lines_of(slurp(root / "out" / "report.csv"));
  REQUIRE(lines.size() == 5);  // header + 3 runs + correlation footer
  CHECK(lines[0] == "model,seed,preset,auc_m1,auc_m2,mean_auc,cka,svcca");
  // Sorted by mean AUC descending: 0.9, 0.7, 0.5.
  CHECK(fields_of(lines[1])[0] == "beta");
  CHECK(fields_of(lines[2])[0] == "alpha");
  CHECK(fields_of(lines[3])[0] == "gamma");
  const auto gamma = fields_of(lines[3]);
  CHECK(gamma[6] == "absent");
  CHECK(gamma[7] == "absent");
  // Two (cka, auc) pairs in exactly opposite order: Spearman is -1.
  const auto footer = fields_of(lines[4]);
  CHECK(footer[0] == "spearman_cka_vs_mean_auc");
  CHECK(std::stod(footer[1]) == doctest::Approx(-1.0).epsilon(1e-12));

  const std::string md = slurp(root / "out" / "report.md");
  CHECK(md.find("| beta |") != std::string::npos);
  CHECK(md.find("absent") != std::string::npos);

  // Two runs, two sorted rows.
  const json cfg2 = {{"report", {{"runs", json::array({a, b})}}}};
  write_file(root / "cfg2.json", cfg2.dump());
  CHECK(cli({"report", "--config", (root / "cfg2.json").string(), "--out",
             (root / "out2").string()})
            .code == 0);
  const auto lines2 = lines_of(slurp(root / "out2" / "report.csv"));
  REQUIRE(lines2.size() == 4);
  CHECK(fields_of(lines2[1])[0] == "beta");
  CHECK(fields_of(lines2[2])[0] == "alpha");
}

TEST_CASE("trained preset S out-probes its untrained initialization across seeds") {
  const fs::path root = fresh_dir("untrained_vs_trained");
  int wins = 0;
  for (std::uint64_t seed : {77ull, 101ull, 202ull, 303ull, 404ull}) {
    const fs::path run = root / std::to_string(seed);
    write_file(run / "gen.json", tiny_generator(seed, 160).dump());
    REQUIRE(cli({"generate", "--config", (run / "gen.json").string(), "--out",
                 (run / "data").string()})
                .code == 0);
    const std::string dataset = (run / "data" / "dataset.mmdt").string();

    json train = {{"seed", seed},
                  {"dataset", dataset},
                  {"encoder",
                   {{"image_side", 8},
                    {"patch_side", 4},
                    {"d_loc", 16},
                    {"d_z", 16},
                    {"hidden", json::array({32})}}},
                  {"training",
                   {{"epochs", 200},
                    {"batch_size", 32},
                    {"critic", {{"embed_dim", 16}}}}},
                  {"objective", {{"preset", "S"}}}};
    write_file(run / "train.json", train.dump());
    REQUIRE(cli({"train", "--config", (run / "train.json").string(), "--out",
                 (run / "trained").string()})
                .code == 0);
    train["training"]["epochs"] = 0;
    write_file(run / "train0.json", train.dump());
    REQUIRE(cli({"train", "--config", (run / "train0.json").string(), "--out",
                 (run / "untrained").string()})
                .code == 0);

    double auc[2];
    const char* variants[] = {"untrained", "trained"};
    for (int v = 0; v < 2; ++v) {
      const json probe = {
          {"dataset", dataset},
          {"checkpoint", (run / variants[v] / "checkpoint.mmdt").string()},
          {"probe",
           {{"iterations", 16}, {"folds", 3}, {"fit_max_iter", 150}}}};
      write_file(run / (std::string("probe_") + variants[v] + ".json"),
                 probe.dump());
      REQUIRE(cli({"probe", "--config",
                   (run / (std::string("probe_") + variants[v] + ".json")).string(),
                   "--seed", "42", "--out", (run / ("probe_" + std::string(variants[v]))).string()})
                  .code == 0);
      auc[v] = mean_auc_of(run / ("probe_" + std::string(variants[v])) / "probe.csv");
    }
    wins += auc[1] > auc[0];
  }
  CHECK(wins >= 4);
}
