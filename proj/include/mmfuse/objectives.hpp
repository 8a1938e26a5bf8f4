#pragma once

// Contrastive training losses: the clipped separable critic, the InfoNCE
// lower bound over batches / location grids / cross-spatial pairs, the
// canonical-correlation and reconstruction auxiliary terms, and the
// objective graph that composes any subset of them into one loss.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mmfuse/autodiff.hpp"
#include "mmfuse/encoder.hpp"
#include "mmfuse/params.hpp"

namespace mmfuse {

struct CriticConfig {
  double clip = 20.0;      // c in c·tanh(s/c)
  double penalty = 4e-2;   // weight on mean squared (clipped) score
  std::size_t embed_dim = kEmbedWidth;
  void validate() const;
};

// Separable critic: s = uᵀv/√n squashed to c·tanh(s/c). Outputs lie strictly
// inside (−c, c) even where tanh rounds to ±1.
diff::Tensor critic_score(const diff::Tensor& u, const diff::Tensor& v,
                          const CriticConfig& cfg);
// All pairs: U [N, n] vs V [M, n] -> [N, M].
diff::Tensor critic_scores(const diff::Tensor& U, const diff::Tensor& V,
                           const CriticConfig& cfg);

struct NceResult {
  diff::Tensor loss;   // scalar: −bound + penalty·mean(score²)
  diff::Tensor bound;  // scalar mutual-information lower bound, ≤ log N
};

// Anchors U, positives V row-aligned; negatives are the other rows of V.
NceResult infonce(const diff::Tensor& U, const diff::Tensor& V,
                  const CriticConfig& cfg);

// Bound/loss from an explicit [N, N] score matrix (anchor rows, positives on
// the diagonal). The batched entry points reduce to this.
NceResult infonce_from_scores(const diff::Tensor& scores, const CriticConfig& cfg);

// Each (sample, location) anchor in C [N, L, n] contrasts against the
// per-sample targets T [N, n]; bounds average over locations.
NceResult location_infonce(const diff::Tensor& C, const diff::Tensor& T,
                           const CriticConfig& cfg);

// Anchor (sample m, location ℓ) in Ci contrasts against Cj features at the
// same location across the batch; positive is sample m.
NceResult cross_spatial_infonce(const diff::Tensor& Ci, const diff::Tensor& Cj,
                                const CriticConfig& cfg);

// −Σ canonical correlations of the two views, differentiable through the
// whitening. Covariances get +ridge·I; whitening eigenvalues clamp at 1e-6.
diff::Tensor cca_loss(const diff::Tensor& Z1, const diff::Tensor& Z2,
                      double ridge = 1e-3);

// Mean squared error.
diff::Tensor recon_loss(const diff::Tensor& x, const diff::Tensor& xhat);

enum class Level { Location, Latent };

// A contrastive edge between (modality, level) endpoints. Kind is derived:
//   L:  same modality, location→latent        CL: cross, location→latent
//   CS: cross, location→location              S:  cross, latent→latent
struct Edge {
  std::size_t src_mod = 0;  // 0-based; printed 1-based
  Level src_level = Level::Location;
  std::size_t dst_mod = 0;
  Level dst_level = Level::Latent;

  std::string kind() const;  // throws ContractError for undefined combinations
  std::string name() const;  // e.g. "L1", "CL:1->2", "CS:2->1", "S:1->2"
  bool operator==(const Edge&) const = default;
};

struct AuxTerms {
  std::array<bool, 2> recon{false, false};
  bool cca = false;
  double recon_weight = 1.0;
  double cca_weight = 1.0;
  double cca_ridge = 1e-3;
  bool any() const { return recon[0] || recon[1] || cca; }
};

struct ObjectiveGraph {
  std::vector<Edge> edges;
  AuxTerms aux;

  // Throws on duplicate edges, undefined edge kinds, or bad modalities.
  void validate() const;

  // AE, L, S, CL, CS, CL-CS, S-CS, S-AE, L-CCA.
  static ObjectiveGraph preset(const std::string& name);
  static std::vector<std::string> preset_names();
};

std::string graph_to_json(const ObjectiveGraph& g);
ObjectiveGraph graph_from_json(const std::string& text);

// Parameter-name prefixes build_loss expects in the bound store.
inline constexpr std::array<const char*, 2> kEncPrefix{"enc1.", "enc2."};
inline constexpr std::array<const char*, 2> kDecPrefix{"dec1.", "dec2."};
inline constexpr std::array<const char*, 2> kProjPrefix{"proj1.", "proj2."};

struct ModalityBatch {
  BatchOutput enc;      // encode_batch output for this modality
  diff::Tensor images;  // [N, S²] inputs; required only for reconstruction
};

struct TermReport {
  std::string name;
  double loss = 0.0;
  std::optional<double> bound;  // present for InfoNCE edges only
};

struct BuiltLoss {
  diff::Tensor total;  // tracked scalar
  std::vector<TermReport> terms;
};

// Composes every edge and auxiliary term into one scalar. Projection heads
// are read once per (modality, level) so all edges share them.
BuiltLoss build_loss(const ObjectiveGraph& graph,
                     const std::array<ModalityBatch, 2>& batches,
                     const BoundParams& w, const EncoderConfig& enc_cfg,
                     const CriticConfig& critic);

}  // namespace mmfuse
