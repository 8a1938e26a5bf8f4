#include "mmfuse/objectives.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "mmfuse/linalg.hpp"

namespace mmfuse {

using diff::Tensor;

void CriticConfig::validate() const {
  if (clip <= 0.0) throw ConfigError("critic: clip must be positive");
  if (penalty < 0.0) throw ConfigError("critic: penalty must be nonnegative");
  if (embed_dim == 0) throw ConfigError("critic: embed_dim must be positive");
}

namespace {

// Pulls values that equal ±c one ulp toward zero so scores stay strictly
// inside the open interval (−c, c). tanh saturates to exactly ±1 for large
// arguments, where its derivative underflows to 0 anyway, so passing the
// gradient through unchanged is exact.
Tensor strict_open(const Tensor& y, double c) {
  const double hi = std::nextafter(c, 0.0);
  const double lo = std::nextafter(-c, 0.0);
  std::vector<double> v = y.data();
  bool touched = false;
  for (auto& x : v) {
    if (x >= c) {
      x = hi;
      touched = true;
    } else if (x <= -c) {
      x = lo;
      touched = true;
    }
  }
  if (!touched) return y;
  return diff::custom_node(
      y.shape(), std::move(v), {y},
      [](const std::vector<double>& g, const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
      });
}

// Mask with ones where the column index equals the anchor's sample index,
// for anchors laid out sample-major over `groups` rows per sample.
Tensor positive_mask(std::size_t n, std::size_t groups, bool group_major) {
  std::vector<double> m(n * groups * n, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t row = group_major ? g * n + s : s * groups + g;
      m[row * n + s] = 1.0;
    }
  return Tensor({n * groups, n}, std::move(m));
}

NceResult nce_from_scores(const Tensor& scores, const Tensor& mask,
                          std::size_t n, const CriticConfig& cfg) {
  Tensor pos = diff::sum_axis(diff::mul(scores, mask), 1);
  Tensor lse = diff::logsumexp_axis(scores, 1);
  Tensor bound = diff::add_scalar(diff::mean(diff::sub(pos, lse)),
                                  std::log(static_cast<double>(n)));
  Tensor loss = diff::scale(bound, -1.0);
  if (cfg.penalty > 0.0)
    loss = diff::add(loss, diff::scale(diff::mean(diff::square(scores)), cfg.penalty));
  return {std::move(loss), std::move(bound)};
}

void check_grid(const char* op, const Tensor& c, const CriticConfig& cfg) {
  if (c.ndim() != 3 || c.shape()[2] != cfg.embed_dim)
    throw ShapeError(str(op, ": want locations [N, L, ", cfg.embed_dim,
                         "], got ", diff::shape_str(c.shape())));
}

double inv_sqrt_clamped(double x) { return 1.0 / std::sqrt(std::max(x, 1e-6)); }
double inv_sqrt_clamped_d(double x) {
  return x > 1e-6 ? -0.5 / (x * std::sqrt(x)) : 0.0;
}
double sqrt_floor(double x) { return std::sqrt(std::max(x, 0.0)); }
double sqrt_floor_d(double x) { return 0.5 / std::sqrt(std::max(x, 1e-6)); }

// Differentiable U g(Λ) Uᵀ of a symmetric matrix. Backward follows the
// divided-difference rule: dM = U (K ∘ UᵀGU) Uᵀ with K_kl the slope of g
// between λ_k and λ_l (g' on the diagonal and near-degenerate pairs).
Tensor sym_matrix_fn(const Tensor& M, double (*g)(double), double (*gp)(double)) {
  const std::size_t d = M.rows();
  linalg::EigResult eig = linalg::jacobi_eigh(linalg::Mat(d, d, M.data()));
  linalg::Mat F = linalg::sym_matrix_function(eig, g);

  auto U = std::make_shared<linalg::Mat>(std::move(eig.vectors));
  auto lam = std::make_shared<std::vector<double>>(std::move(eig.values));
  auto backward = [U, lam, g, gp, d](const std::vector<double>& gout,
                                     const std::vector<std::vector<double>*>& pg) {
    if (!pg[0]) return;
    const auto& uu = *U;
    const auto& lv = *lam;
    // B = Uᵀ sym(G) U
    std::vector<double> gs(d * d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        gs[i * d + j] = 0.5 * (gout[i * d + j] + gout[j * d + i]);
    std::vector<double> tmp(d * d, 0.0), b(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t k = 0; k < d; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += gs[i * d + j] * uu(j, k);
        tmp[i * d + k] = acc;
      }
    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t l = 0; l < d; ++l) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d; ++i) acc += uu(i, k) * tmp[i * d + l];
        b[k * d + l] = acc;
      }
    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t l = 0; l < d; ++l) {
        const double a = lv[k], bb = lv[l];
        const double span = std::abs(a - bb);
        const double scale = std::max({1.0, std::abs(a), std::abs(bb)});
        const double slope = span > 1e-9 * scale
                                 ? (g(a) - g(bb)) / (a - bb)
                                 : gp(0.5 * (a + bb));
        b[k * d + l] *= slope;
      }
    // dM = U B Uᵀ, accumulated
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t l = 0; l < d; ++l) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += uu(i, k) * b[k * d + l];
        tmp[i * d + l] = acc;
      }
    auto& dst = *pg[0];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t l = 0; l < d; ++l) acc += tmp[i * d + l] * uu(j, l);
        dst[i * d + j] += acc;
      }
  };
  return diff::custom_node({d, d}, std::move(F.a), {M}, std::move(backward));
}

Tensor centered(const Tensor& z) {
  const std::size_t n = z.rows();
  Tensor ones({1, n}, std::vector<double>(n, 1.0));
  Tensor mean_row = diff::scale(diff::matmul(ones, z), 1.0 / static_cast<double>(n));
  return diff::sub(z, diff::broadcast_rows(mean_row, n));
}

Tensor ridge_eye(std::size_t d, double ridge) {
  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = ridge;
  return Tensor({d, d}, std::move(v));
}

}  // namespace

Tensor critic_scores(const Tensor& U, const Tensor& V, const CriticConfig& cfg) {
  cfg.validate();
  if (U.ndim() != 2 || V.ndim() != 2 || U.cols() != cfg.embed_dim ||
      V.cols() != cfg.embed_dim)
    throw ShapeError(str("critic_scores: want [*, ", cfg.embed_dim, "] embeddings, got ",
                         diff::shape_str(U.shape()), " and ",
                         diff::shape_str(V.shape())));
  Tensor raw = diff::scale(diff::matmul(U, V, false, true),
                           1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
  Tensor clipped =
      diff::scale(diff::tanh(diff::scale(raw, 1.0 / cfg.clip)), cfg.clip);
  return strict_open(clipped, cfg.clip);
}

Tensor critic_score(const Tensor& u, const Tensor& v, const CriticConfig& cfg) {
  if (u.size() != v.size())
    throw ShapeError(str("critic_score: width mismatch ", diff::shape_str(u.shape()),
                         " vs ", diff::shape_str(v.shape())));
  Tensor s = critic_scores(diff::reshape(u, {1, u.size()}),
                           diff::reshape(v, {1, v.size()}), cfg);
  return diff::reshape(s, {1});
}

NceResult infonce_from_scores(const Tensor& scores, const CriticConfig& cfg) {
  if (scores.ndim() != 2 || scores.rows() != scores.cols())
    throw ShapeError(str("infonce_from_scores: want square [N, N], got ",
                         diff::shape_str(scores.shape())));
  const std::size_t n = scores.rows();
  return nce_from_scores(scores, positive_mask(n, 1, false), n, cfg);
}

NceResult infonce(const Tensor& U, const Tensor& V, const CriticConfig& cfg) {
  if (U.ndim() != 2 || V.ndim() != 2 || U.shape() != V.shape())
    throw ShapeError(str("infonce: anchors and positives must share [N, n], got ",
                         diff::shape_str(U.shape()), " and ",
                         diff::shape_str(V.shape())));
  const std::size_t n = U.rows();
  if (n == 0) throw ShapeError("infonce: empty batch");
  return infonce_from_scores(critic_scores(U, V, cfg), cfg);
}

NceResult location_infonce(const Tensor& C, const Tensor& T, const CriticConfig& cfg) {
  check_grid("location_infonce", C, cfg);
  const std::size_t n = C.shape()[0], L = C.shape()[1];
  if (T.ndim() != 2 || T.rows() != n || T.cols() != cfg.embed_dim)
    throw ShapeError(str("location_infonce: want targets [", n, ", ",
                         cfg.embed_dim, "], got ", diff::shape_str(T.shape())));
  Tensor anchors = diff::reshape(C, {n * L, cfg.embed_dim});
  Tensor scores = critic_scores(anchors, T, cfg);
  return nce_from_scores(scores, positive_mask(n, L, false), n, cfg);
}

NceResult cross_spatial_infonce(const Tensor& Ci, const Tensor& Cj,
                                const CriticConfig& cfg) {
  check_grid("cross_spatial_infonce", Ci, cfg);
  check_grid("cross_spatial_infonce", Cj, cfg);
  if (Ci.shape() != Cj.shape())
    throw ShapeError(str("cross_spatial_infonce: location grids disagree: ",
                         diff::shape_str(Ci.shape()), " vs ",
                         diff::shape_str(Cj.shape())));
  const std::size_t n = Ci.shape()[0], L = Ci.shape()[1];
  Tensor fi = diff::reshape(Ci, {n * L, cfg.embed_dim});
  Tensor fj = diff::reshape(Cj, {n * L, cfg.embed_dim});

  // One [N, N] score block per location: anchors and candidates both at ℓ.
  auto block_at = [&](const Tensor& flat, std::size_t l) {
    std::vector<Tensor> rows;
    rows.reserve(n);
    for (std::size_t m = 0; m < n; ++m)
      rows.push_back(diff::slice(flat, 0, m * L + l, 1));
    return diff::concat(rows, 0);
  };
  std::vector<Tensor> blocks;
  blocks.reserve(L);
  for (std::size_t l = 0; l < L; ++l)
    blocks.push_back(critic_scores(block_at(fi, l), block_at(fj, l), cfg));
  Tensor scores = diff::concat(blocks, 0);  // [L*N, N], location-major
  return nce_from_scores(scores, positive_mask(n, L, true), n, cfg);
}

Tensor cca_loss(const Tensor& Z1, const Tensor& Z2, double ridge) {
  if (Z1.ndim() != 2 || Z2.ndim() != 2 || Z1.rows() != Z2.rows())
    throw ShapeError(str("cca_loss: want [N, d] views with equal N, got ",
                         diff::shape_str(Z1.shape()), " and ",
                         diff::shape_str(Z2.shape())));
  if (Z1.rows() < 2) throw ShapeError("cca_loss: need at least two samples");
  if (ridge <= 0.0) throw ConfigError("cca_loss: ridge must be positive");
  const std::size_t n = Z1.rows();
  const double denom = 1.0 / static_cast<double>(n - 1);

  Tensor a = centered(Z1), b = centered(Z2);
  Tensor s11 = diff::add(diff::scale(diff::matmul(a, a, true, false), denom),
                         ridge_eye(Z1.cols(), ridge));
  Tensor s22 = diff::add(diff::scale(diff::matmul(b, b, true, false), denom),
                         ridge_eye(Z2.cols(), ridge));
  Tensor s12 = diff::scale(diff::matmul(a, b, true, false), denom);
  for (const Tensor* t : {&s11, &s22, &s12})
    for (double v : t->data())
      if (!std::isfinite(v)) throw DomainError("cca_loss: non-finite covariance");

  Tensor w1 = sym_matrix_fn(s11, inv_sqrt_clamped, inv_sqrt_clamped_d);
  Tensor w2 = sym_matrix_fn(s22, inv_sqrt_clamped, inv_sqrt_clamped_d);
  Tensor t = diff::matmul(diff::matmul(w1, s12), w2);
  // Nuclear norm of T: trace of (TᵀT)^{1/2}.
  Tensor gram = diff::matmul(t, t, true, false);
  Tensor root = sym_matrix_fn(gram, sqrt_floor, sqrt_floor_d);
  return diff::scale(diff::sum_all(diff::diag_of(root)), -1.0);
}

Tensor recon_loss(const Tensor& x, const Tensor& xhat) {
  if (x.shape() != xhat.shape())
    throw ShapeError(str("recon_loss: shape mismatch ", diff::shape_str(x.shape()),
                         " vs ", diff::shape_str(xhat.shape())));
  return diff::mean(diff::square(diff::sub(x, xhat)));
}

std::string Edge::kind() const {
  const bool cross = src_mod != dst_mod;
  if (src_level == Level::Location && dst_level == Level::Latent)
    return cross ? "CL" : "L";
  if (cross && src_level == Level::Location && dst_level == Level::Location)
    return "CS";
  if (cross && src_level == Level::Latent && dst_level == Level::Latent)
    return "S";
  throw ContractError(str("edge (modality ", src_mod + 1, " ",
                          src_level == Level::Location ? "location" : "latent",
                          " -> modality ", dst_mod + 1, " ",
                          dst_level == Level::Location ? "location" : "latent",
                          ") has no defined kind"));
}

std::string Edge::name() const {
  const std::string k = kind();
  if (k == "L") return str("L", src_mod + 1);
  return str(k, ":", src_mod + 1, "->", dst_mod + 1);
}

void ObjectiveGraph::validate() const {
  for (const auto& e : edges) {
    if (e.src_mod > 1 || e.dst_mod > 1)
      throw ContractError("objective graph: modality index must be 0 or 1");
    (void)e.kind();  // throws for undefined combinations
  }
  for (std::size_t i = 0; i < edges.size(); ++i)
    for (std::size_t j = i + 1; j < edges.size(); ++j)
      if (edges[i] == edges[j])
        throw ContractError(str("objective graph: duplicate edge ", edges[i].name()));
  if (aux.recon_weight < 0.0 || aux.cca_weight < 0.0 || aux.cca_ridge <= 0.0)
    throw ContractError("objective graph: bad auxiliary weights");
}

namespace {

Edge make_edge(std::size_t si, Level sl, std::size_t di, Level dl) {
  Edge e;
  e.src_mod = si;
  e.src_level = sl;
  e.dst_mod = di;
  e.dst_level = dl;
  return e;
}

const Level kLoc = Level::Location;
const Level kLat = Level::Latent;

}  // namespace

ObjectiveGraph ObjectiveGraph::preset(const std::string& name) {
  ObjectiveGraph g;
  auto L_edges = [&] {
    g.edges.push_back(make_edge(0, kLoc, 0, kLat));
    g.edges.push_back(make_edge(1, kLoc, 1, kLat));
  };
  auto S_edges = [&] {
    g.edges.push_back(make_edge(0, kLat, 1, kLat));
    g.edges.push_back(make_edge(1, kLat, 0, kLat));
  };
  auto CL_edges = [&] {
    g.edges.push_back(make_edge(0, kLoc, 1, kLat));
    g.edges.push_back(make_edge(1, kLoc, 0, kLat));
  };
  auto CS_edges = [&] {
    g.edges.push_back(make_edge(0, kLoc, 1, kLoc));
    g.edges.push_back(make_edge(1, kLoc, 0, kLoc));
  };
  if (name == "L") {
    L_edges();
  } else if (name == "S") {
    S_edges();
  } else if (name == "CL") {
    CL_edges();
  } else if (name == "CS") {
    CS_edges();
  } else if (name == "CL-CS") {
    CL_edges();
    CS_edges();
  } else if (name == "S-CS") {
    S_edges();
    CS_edges();
  } else if (name == "S-AE") {
    S_edges();
    g.aux.recon = {true, true};
  } else if (name == "L-CCA") {
    L_edges();
    g.aux.cca = true;
  } else if (name == "AE") {
    g.aux.recon = {true, true};
  } else {
    std::string known;
    for (const auto& p : preset_names()) known += (known.empty() ? "" : ", ") + p;
    throw ConfigError(str("unknown objective preset '", name, "'; valid: ", known));
  }
  g.validate();
  return g;
}

std::vector<std::string> ObjectiveGraph::preset_names() {
  return {"AE", "L", "S", "CL", "CS", "CL-CS", "S-CS", "S-AE", "L-CCA"};
}

namespace {

nlohmann::json level_json(Level l) {
  return l == Level::Location ? "location" : "latent";
}

Level level_from(const nlohmann::json& j) {
  const std::string s = j.get<std::string>();
  if (s == "location") return Level::Location;
  if (s == "latent") return Level::Latent;
  throw ConfigError(str("objective graph: unknown level '", s, "'"));
}

void reject_unknown(const nlohmann::json& j, std::vector<std::string> allowed,
                    const char* where) {
  for (const auto& [key, value] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(str("objective graph: unknown key '", key, "' in ", where));
}

}  // namespace

std::string graph_to_json(const ObjectiveGraph& g) {
  g.validate();
  nlohmann::json j;
  j["edges"] = nlohmann::json::array();
  for (const auto& e : g.edges)
    j["edges"].push_back({{"src", {{"modality", e.src_mod + 1},
                                   {"level", level_json(e.src_level)}}},
                          {"dst", {{"modality", e.dst_mod + 1},
                                   {"level", level_json(e.dst_level)}}}});
  j["aux"] = {{"recon", {g.aux.recon[0], g.aux.recon[1]}},
              {"cca", g.aux.cca},
              {"recon_weight", g.aux.recon_weight},
              {"cca_weight", g.aux.cca_weight},
              {"cca_ridge", g.aux.cca_ridge}};
  return j.dump(2);
}

ObjectiveGraph graph_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(str("objective graph: bad JSON: ", e.what()));
  }
  if (!j.is_object()) throw ConfigError("objective graph: top level must be an object");
  reject_unknown(j, {"preset", "edges", "aux"}, "graph");
  if (j.contains("preset") && j.contains("edges"))
    throw ConfigError("objective graph: give either a preset or explicit edges");

  ObjectiveGraph g;
  if (j.contains("preset")) g = ObjectiveGraph::preset(j["preset"].get<std::string>());
  if (j.contains("edges")) {
    for (const auto& je : j["edges"]) {
      reject_unknown(je, {"src", "dst"}, "edge");
      Edge e;
      for (bool src : {true, false}) {
        const auto& end = je.at(src ? "src" : "dst");
        reject_unknown(end, {"modality", "level"}, "edge endpoint");
        const int mod = end.at("modality").get<int>();
        if (mod != 1 && mod != 2)
          throw ConfigError(str("objective graph: modality must be 1 or 2, got ", mod));
        (src ? e.src_mod : e.dst_mod) = static_cast<std::size_t>(mod - 1);
        (src ? e.src_level : e.dst_level) = level_from(end.at("level"));
      }
      g.edges.push_back(e);
    }
  }
  if (j.contains("aux")) {
    const auto& ja = j["aux"];
    reject_unknown(ja, {"recon", "cca", "recon_weight", "cca_weight", "cca_ridge"},
                   "aux");
    if (ja.contains("recon")) {
      if (!ja["recon"].is_array() || ja["recon"].size() != 2)
        throw ConfigError("objective graph: aux.recon must be [bool, bool]");
      g.aux.recon = {ja["recon"][0].get<bool>(), ja["recon"][1].get<bool>()};
    }
    if (ja.contains("cca")) g.aux.cca = ja["cca"].get<bool>();
    if (ja.contains("recon_weight")) g.aux.recon_weight = ja["recon_weight"].get<double>();
    if (ja.contains("cca_weight")) g.aux.cca_weight = ja["cca_weight"].get<double>();
    if (ja.contains("cca_ridge")) g.aux.cca_ridge = ja["cca_ridge"].get<double>();
  }
  g.validate();
  return g;
}

BuiltLoss build_loss(const ObjectiveGraph& graph,
                     const std::array<ModalityBatch, 2>& batches,
                     const BoundParams& w, const EncoderConfig& enc_cfg,
                     const CriticConfig& critic) {
  graph.validate();
  critic.validate();
  if (graph.edges.empty() && !graph.aux.any())
    throw ContractError("build_loss: objective graph is empty");

  const std::size_t n = batches[0].enc.latent.rows();
  const std::size_t L = enc_cfg.n_locations();
  for (int m = 0; m < 2; ++m) {
    const auto& enc = batches[m].enc;
    if (enc.latent.rows() != n)
      throw ShapeError("build_loss: modalities disagree on batch size");
    if (enc.locations.rows() != n * L)
      throw ShapeError(str("build_loss: modality ", m + 1, " has ",
                           enc.locations.rows(), " location rows, want ", n * L));
  }

  // Shared per-(modality, level) projections, computed at most once.
  std::array<Tensor, 2> proj_loc;
  auto projected = [&](std::size_t m) -> const Tensor& {
    if (!proj_loc[m].defined()) {
      Tensor p = project_location(w, kProjPrefix[m], batches[m].enc.locations);
      proj_loc[m] = diff::reshape(p, {n, L, p.cols()});
    }
    return proj_loc[m];
  };
  auto latent = [&](std::size_t m) -> Tensor {
    return project_latent(batches[m].enc.latent);
  };

  BuiltLoss out;
  Tensor total = Tensor::scalar(0.0);
  auto accumulate = [&](const std::string& name, const Tensor& term,
                        std::optional<double> bound) {
    total = diff::add(total, term);
    out.terms.push_back({name, term.value(), bound});
  };

  for (const auto& e : graph.edges) {
    const std::string k = e.kind();
    NceResult r;
    if (k == "L" || k == "CL")
      r = location_infonce(projected(e.src_mod), latent(e.dst_mod), critic);
    else if (k == "CS")
      r = cross_spatial_infonce(projected(e.src_mod), projected(e.dst_mod), critic);
    else
      r = infonce(latent(e.src_mod), latent(e.dst_mod), critic);
    accumulate(e.name(), r.loss, r.bound.value());
  }

  for (int m = 0; m < 2; ++m) {
    if (!graph.aux.recon[m]) continue;
    if (!batches[m].images.defined())
      throw ContractError(str("build_loss: reconstruction for modality ", m + 1,
                              " needs the input images"));
    Tensor xhat = decode_batch(enc_cfg, w, kDecPrefix[m], batches[m].enc.latent);
    Tensor term = diff::scale(recon_loss(batches[m].images, xhat),
                              graph.aux.recon_weight);
    accumulate(str("recon", m + 1), term, std::nullopt);
  }
  if (graph.aux.cca) {
    Tensor term = diff::scale(cca_loss(latent(0), latent(1), graph.aux.cca_ridge),
                              graph.aux.cca_weight);
    accumulate("cca", term, std::nullopt);
  }

  out.total = std::move(total);
  return out;
}

}  // namespace mmfuse
