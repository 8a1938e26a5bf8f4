#pragma once

// Saliency-based introspection of trained encoders: per-dimension SmoothGrad
// maps, mask-aware post-processing, cross-modal dimension pairing by Pearson
// correlation, and voxel-wise Mann-Whitney group contrasts with rank-biserial
// effect sizes.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mmfuse/encoder.hpp"
#include "mmfuse/params.hpp"

namespace mmfuse {

struct SmoothgradConfig {
  double sigma = 0.05;
  std::size_t n_samples = 5;
  void validate() const;
};

// Mean over n_samples noise draws of |∂ latent[dim] / ∂ pixel| evaluated at
// image + N(0, sigma²) i.i.d. per pixel. Returns an image-shaped map.
diff::Tensor smoothgrad(const EncoderConfig& cfg, const BoundParams& w,
                        const std::string& prefix, const diff::Tensor& image,
                        std::size_t dim, const SmoothgradConfig& sg, Rng& rng);

// Zero off-mask, min-max rescale over in-mask pixels (constant maps go to 0),
// Gaussian blur truncated at 4σ with the kernel renormalized over in-bounds
// taps, then re-zero off-mask. Output lies in [0,1]. Mask entries must be
// exactly 0 or 1 and at least one pixel must be inside.
diff::Tensor postprocess(const diff::Tensor& raw, const diff::Tensor& mask,
                         double sigma_gauss = 1.5);

// Centered disk covering roughly 60% of a side×side image.
diff::Tensor make_disk_mask(std::size_t side);

// Row s = subject s, column d = mean in-mask saliency of maps[s][d].
diff::Tensor summary_matrix(const std::vector<std::vector<diff::Tensor>>& maps,
                            const diff::Tensor& mask);

struct SaliencyPairing {
  diff::Tensor correlation;  // [d1, d2], Pearson across subjects, in [-1,1]
  std::size_t best_dim1 = 0;
  std::size_t best_dim2 = 0;
  double best_value = 0.0;
};

// Correlates per-subject summaries of every modality-1 dimension against
// every modality-2 dimension and reports the maximizing pair (ties keep the
// lexicographically first). Zero-variance dimensions correlate as 0.
SaliencyPairing cross_modal_saliency_correlation(const diff::Tensor& summaries1,
                                                 const diff::Tensor& summaries2);

struct MannWhitney {
  double u = 0.0;    // pairs with a > b, ties counted half
  double z = 0.0;    // normal approximation, midrank tie correction
  double rbc = 0.0;  // 2U/(nm) - 1; positive when a is stochastically larger
};

MannWhitney mann_whitney_rbc(const std::vector<double>& a,
                             const std::vector<double>& b);

struct GroupDiffMap {
  diff::Tensor rbc;  // effect size per pixel, in [-1,1]
  diff::Tensor u;
  diff::Tensor p;    // two-sided normal-approximation p-value
  std::size_t peak_row = 0;  // argmax |rbc|, ties keep the first pixel
  std::size_t peak_col = 0;
};

// Per-pixel contrast of the subjects labelled group_a against group_b.
GroupDiffMap group_diff_map(const std::vector<diff::Tensor>& maps,
                            const std::vector<int>& labels, int group_a,
                            int group_b);

// (argmax, argmin) of a probe weight vector; ties keep the lowest index.
std::pair<std::size_t, std::size_t> select_extreme_dims(
    const std::vector<double>& weights);

}  // namespace mmfuse
