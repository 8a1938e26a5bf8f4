#include "mmfuse/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace mmfuse {

using diff::Tensor;

void EncoderConfig::validate() const {
  if (image_side == 0 || patch_side == 0 || d_loc == 0 || d_z == 0)
    throw ConfigError("encoder: all dimensions must be positive");
  if (image_side % patch_side != 0)
    throw ConfigError(str("encoder: patch_side ", patch_side,
                          " does not divide image_side ", image_side));
  for (auto h : hidden)
    if (h == 0) throw ConfigError("encoder: zero hidden width");
}

namespace {

Tensor glorot_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = rng.uniform(-a, a);
  return Tensor({fan_in, fan_out}, std::move(v));
}

void init_stack(Rng& rng, ParamStore& store, const std::string& prefix,
                const std::vector<std::size_t>& widths) {
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    store.add(str(prefix, "w", k), glorot_uniform(rng, widths[k], widths[k + 1]));
    store.add(str(prefix, "b", k), Tensor::zeros({1, widths[k + 1]}));
  }
}

// x [N, widths[0]] -> [N, widths.back()]; relu after every layer except,
// when relu_last is false, the final one.
Tensor run_stack(const BoundParams& w, const std::string& prefix,
                 std::size_t n_layers, Tensor x, bool relu_last) {
  for (std::size_t k = 0; k < n_layers; ++k) {
    const Tensor& wk = w[str(prefix, "w", k)];
    const Tensor& bk = w[str(prefix, "b", k)];
    x = diff::add(diff::matmul(x, wk), diff::broadcast_rows(bk, x.rows()));
    if (relu_last || k + 1 < n_layers) x = diff::relu(x);
  }
  return x;
}

std::vector<std::size_t> patch_widths(const EncoderConfig& cfg) {
  std::vector<std::size_t> w{cfg.patch_pixels()};
  w.insert(w.end(), cfg.hidden.begin(), cfg.hidden.end());
  w.push_back(cfg.d_loc);
  return w;
}

std::vector<std::size_t> agg_widths(const EncoderConfig& cfg) {
  std::vector<std::size_t> w{cfg.n_locations() * cfg.d_loc};
  w.insert(w.end(), cfg.hidden.begin(), cfg.hidden.end());
  w.push_back(cfg.d_z);
  return w;
}

std::vector<std::size_t> reversed(std::vector<std::size_t> v) {
  std::reverse(v.begin(), v.end());
  return v;
}

}  // namespace

void init_encoder_params(const EncoderConfig& cfg, Rng& rng, ParamStore& store,
                         const std::string& prefix) {
  cfg.validate();
  init_stack(rng, store, prefix + "patch.", patch_widths(cfg));
  init_stack(rng, store, prefix + "agg.", agg_widths(cfg));
}

void init_decoder_params(const EncoderConfig& cfg, Rng& rng, ParamStore& store,
                         const std::string& prefix) {
  cfg.validate();
  init_stack(rng, store, prefix + "agg.", reversed(agg_widths(cfg)));
  init_stack(rng, store, prefix + "patch.", reversed(patch_widths(cfg)));
}

void init_projection_params(const ProjectionConfig& cfg, Rng& rng,
                            ParamStore& store, const std::string& prefix) {
  init_stack(rng, store, prefix, {cfg.d_in, cfg.d_hidden, cfg.d_out});
}

diff::Tensor patch_routing(const EncoderConfig& cfg) {
  const std::size_t S = cfg.image_side;
  const std::size_t p = cfg.patch_side;
  const std::size_t g = cfg.grid_side();
  std::vector<double> m(S * S * cfg.n_locations() * cfg.patch_pixels(), 0.0);
  const std::size_t cols = cfg.n_locations() * cfg.patch_pixels();
  for (std::size_t gr = 0; gr < g; ++gr)
    for (std::size_t gc = 0; gc < g; ++gc) {
      const std::size_t loc = gr * g + gc;
      for (std::size_t pr = 0; pr < p; ++pr)
        for (std::size_t pc = 0; pc < p; ++pc) {
          const std::size_t src = (gr * p + pr) * S + (gc * p + pc);
          const std::size_t dst = loc * p * p + pr * p + pc;
          m[src * cols + dst] = 1.0;
        }
    }
  return Tensor({S * S, cols}, std::move(m));
}

BatchOutput encode_batch(const EncoderConfig& cfg, const BoundParams& w,
                         const std::string& prefix, const Tensor& images) {
  cfg.validate();
  const std::size_t px = cfg.image_side * cfg.image_side;
  if (images.ndim() != 2 || images.cols() != px)
    throw ShapeError(str("encode_batch: want images [N, ", px, "], got ",
                         diff::shape_str(images.shape())));
  const std::size_t n = images.rows();
  const std::size_t L = cfg.n_locations();

  Tensor patches = diff::matmul(images, patch_routing(cfg));
  patches = diff::reshape(patches, {n * L, cfg.patch_pixels()});

  const std::size_t patch_layers = cfg.hidden.size() + 1;
  Tensor locations = run_stack(w, prefix + "patch.", patch_layers,
                               std::move(patches), /*relu_last=*/true);

  Tensor flat = diff::reshape(locations, {n, L * cfg.d_loc});
  Tensor latent = run_stack(w, prefix + "agg.", patch_layers, std::move(flat),
                            /*relu_last=*/false);
  return {std::move(locations), std::move(latent)};
}

EncoderOutput encode(const EncoderConfig& cfg, const BoundParams& w,
                     const std::string& prefix, const Tensor& image) {
  const std::size_t px = cfg.image_side * cfg.image_side;
  if (image.size() != px)
    throw ShapeError(str("encode: want ", px, " pixels, got ",
                         diff::shape_str(image.shape())));
  BatchOutput out = encode_batch(cfg, w, prefix, diff::reshape(image, {1, px}));
  return {out.locations,
          diff::reshape(out.latent, {cfg.d_z})};
}

diff::Tensor decode_batch(const EncoderConfig& cfg, const BoundParams& w,
                          const std::string& prefix, const Tensor& latent) {
  cfg.validate();
  if (latent.ndim() != 2 || latent.cols() != cfg.d_z)
    throw ShapeError(str("decode_batch: want latent [N, ", cfg.d_z, "], got ",
                         diff::shape_str(latent.shape())));
  const std::size_t n = latent.rows();
  const std::size_t L = cfg.n_locations();
  const std::size_t layers = cfg.hidden.size() + 1;

  Tensor flat = run_stack(w, prefix + "agg.", layers, latent, /*relu_last=*/true);
  Tensor per_loc = diff::reshape(flat, {n * L, cfg.d_loc});
  Tensor pixels = run_stack(w, prefix + "patch.", layers, std::move(per_loc),
                            /*relu_last=*/false);
  pixels = diff::reshape(pixels, {n, L * cfg.patch_pixels()});
  // The routing matrix is a permutation, so its transpose undoes it.
  return diff::matmul(pixels, patch_routing(cfg), false, /*trans_b=*/true);
}

diff::Tensor project_location(const BoundParams& w, const std::string& prefix,
                              const Tensor& locations) {
  if (locations.ndim() != 2)
    throw ShapeError(str("project_location: want [L, d], got ",
                         diff::shape_str(locations.shape())));
  const Tensor& w0 = w[prefix + "w0"];
  if (locations.cols() != w0.rows())
    throw ShapeError(str("project_location: input width ", locations.cols(),
                         " does not match head width ", w0.rows()));
  return run_stack(w, prefix, 2, locations, /*relu_last=*/false);
}

diff::Tensor project_latent(const Tensor& z) { return z; }

}  // namespace mmfuse
