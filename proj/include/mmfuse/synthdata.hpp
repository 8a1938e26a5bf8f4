#pragma once

// Synthetic paired-modality data with controllable shared/specific factor
// structure, the binary tensor container used for datasets and checkpoints,
// and the normalization/augmentation utilities.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmfuse/autodiff.hpp"
#include "mmfuse/common.hpp"
#include "mmfuse/params.hpp"

namespace mmfuse {

enum class Group : int { HC = 0, AD = 1, Other = 2 };
enum class Split : int { Train = 0, Val = 1, Holdout = 2 };

struct PairedDataset {
  std::size_t image_side = 0;
  // images[modality][pair] is a row-major side*side grid.
  std::array<std::vector<std::vector<double>>, 2> images;
  std::vector<int> labels;
  std::vector<int> subject_ids;
  std::vector<int> split;

  std::size_t size() const { return labels.size(); }
  std::vector<std::size_t> indices_of_split(Split s) const;
  // Modalities aligned, ids consistent, no subject spans two splits.
  void validate() const;
};

struct GeneratorConfig {
  std::size_t n_subjects = 512;
  std::size_t image_side = 16;
  std::size_t k_shared = 4;
  std::size_t k_spec1 = 3;
  std::size_t k_spec2 = 3;
  double noise_sigma = 0.25;
  double label_noise = 0.0;
  // HC / AD / other cohort mix and subject-level split mix.
  std::array<double, 3> group_ratios{0.70, 0.15, 0.15};
  std::array<double, 3> split_ratios{0.70, 0.15, 0.15};
  // How strongly the shared factors render into each modality; a small
  // second gain makes modality 2 the weak-signal view.
  double shared_gain1 = 1.0;
  double shared_gain2 = 0.4;
  std::size_t pairs_per_subject = 1;
  std::uint64_t seed = 1;

  void validate() const;
};

PairedDataset generate(const GeneratorConfig& cfg);
PairedDataset generate(const GeneratorConfig& cfg, std::uint64_t seed_override);

// --- Tensor container -------------------------------------------------------
// Little-endian; magic "MMDT", version u16=1, count u32, then per entry:
// name u16-length + ASCII bytes, dtype u8 (0 = f64), ndim u8, extents u64,
// raw f64 values.

using NamedTensors = std::vector<std::pair<std::string, diff::Tensor>>;

void save_tensors(const std::string& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::string& path);

void save_param_store(const std::string& path, const ParamStore& store);
ParamStore load_param_store(const std::string& path);

void save_dataset(const PairedDataset& data, const std::string& container_path,
                  const std::string& manifest_path);
PairedDataset load_dataset(const std::string& container_path);

// --- Normalization ----------------------------------------------------------

struct NormStats {
  std::array<double, 2> mean{0.0, 0.0};
  std::array<double, 2> stddev{1.0, 1.0};
};

// Per-modality scalar statistics over every pixel of the given split.
NormStats compute_norm_stats(const PairedDataset& data, Split from = Split::Train);
PairedDataset znormalize(const PairedDataset& data, const NormStats& stats);

// --- Augmentation -----------------------------------------------------------

struct AugmentFlags {
  bool flips = true;
  bool crops = true;
  double crop_fraction = 0.875;  // cropped side / original side
};

struct ImagePair {
  std::size_t side = 0;
  std::vector<double> m1, m2;
};

// One flip/crop draw per pair, applied to both modalities identically.
ImagePair augment(const ImagePair& pair, Rng& rng, const AugmentFlags& flags);

}  // namespace mmfuse
