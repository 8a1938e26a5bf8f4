#pragma once

// Patch-location encoder: a shared per-patch stack yields a grid of location
// features, an aggregator stack maps the flattened grid to the latent vector.
// Projection heads lift location features into the critic embedding space;
// the latent head is the identity. A mirrored decoder supports
// reconstruction objectives.

#include <string>
#include <vector>

#include "mmfuse/autodiff.hpp"
#include "mmfuse/params.hpp"

namespace mmfuse {

struct EncoderConfig {
  std::size_t image_side = 16;
  std::size_t patch_side = 4;
  std::size_t d_loc = 32;
  std::size_t d_z = 64;
  std::vector<std::size_t> hidden{64};

  std::size_t grid_side() const { return image_side / patch_side; }
  std::size_t n_locations() const { return grid_side() * grid_side(); }
  std::size_t patch_pixels() const { return patch_side * patch_side; }
  void validate() const;
};

// Critic embedding width shared by every projection head.
inline constexpr std::size_t kEmbedWidth = 64;

struct EncoderOutput {
  diff::Tensor locations;  // [L, d_loc]
  diff::Tensor latent;     // [d_z]
};

// Batched variant used by training; locations are sample-major
// (rows i*L .. i*L+L-1 belong to sample i).
struct BatchOutput {
  diff::Tensor locations;  // [N*L, d_loc]
  diff::Tensor latent;     // [N, d_z]
};

// Parameter layout under `prefix` (e.g. "enc1."):
//   patch.w<k>/patch.b<k>   per-patch stack  p² -> hidden… -> d_loc, relu all
//   agg.w<k>/agg.b<k>       aggregator       L·d_loc -> hidden… -> d_z,
//                           relu between, linear final
// Weights uniform in ±sqrt(6/(fan_in+fan_out)), biases zero.
void init_encoder_params(const EncoderConfig& cfg, Rng& rng, ParamStore& store,
                         const std::string& prefix);

// Decoder mirror under `prefix` (e.g. "dec1."):
//   agg.w<k>/agg.b<k>       d_z -> hidden… -> L·d_loc, relu all
//   patch.w<k>/patch.b<k>   d_loc -> hidden… -> p², relu between, linear final
void init_decoder_params(const EncoderConfig& cfg, Rng& rng, ParamStore& store,
                         const std::string& prefix);

// Location head φ under `prefix` (e.g. "proj1.loc."): affine(d_in→d_hidden),
// relu, affine(d_hidden→kEmbedWidth).
struct ProjectionConfig {
  std::size_t d_in = 32;
  std::size_t d_hidden = kEmbedWidth;
  std::size_t d_out = kEmbedWidth;
};
void init_projection_params(const ProjectionConfig& cfg, Rng& rng,
                            ParamStore& store, const std::string& prefix);

// Constant [S², L·p²] matrix routing flattened images to flattened patch
// stacks: images [N, S²] · P = patches [N, L·p²]. Each column has one 1.
diff::Tensor patch_routing(const EncoderConfig& cfg);

BatchOutput encode_batch(const EncoderConfig& cfg, const BoundParams& w,
                         const std::string& prefix,
                         const diff::Tensor& images /* [N, S²] */);

EncoderOutput encode(const EncoderConfig& cfg, const BoundParams& w,
                     const std::string& prefix,
                     const diff::Tensor& image /* [S, S] or [S²] */);

diff::Tensor decode_batch(const EncoderConfig& cfg, const BoundParams& w,
                          const std::string& prefix,
                          const diff::Tensor& latent /* [N, d_z] */);

// φ applied row-wise: [L, d_in] -> [L, kEmbedWidth].
diff::Tensor project_location(const BoundParams& w, const std::string& prefix,
                              const diff::Tensor& locations);

// ψ is the identity; kept as a named seam for future latent heads.
diff::Tensor project_latent(const diff::Tensor& z);

}  // namespace mmfuse
