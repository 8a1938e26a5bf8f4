#include "mmfuse/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <unordered_map>

#include <json.hpp>

namespace mmfuse {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'D', 'T'};
constexpr std::uint16_t kVersion = 1;

void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(buf, bits);
}

class Reader {
 public:
  Reader(std::string bytes, std::string path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::size_t offset() const { return off_; }

  void need(std::size_t n, const char* what) {
    if (off_ + n > bytes_.size())
      throw IoError(str(path_, ": truncated reading ", what, " at offset ",
                        off_, ": expected ", n, " bytes, ",
                        bytes_.size() - off_, " available"));
  }

  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i)
      v |= static_cast<std::uint16_t>(static_cast<unsigned char>(bytes_[off_ + i])) << (8 * i);
    off_ += 2;
    return v;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[off_ + i])) << (8 * i);
    off_ += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[off_ + i])) << (8 * i);
    off_ += 8;
    return v;
  }

  double f64(const char* what) {
    std::uint64_t bits = u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(off_, n);
    off_ += n;
    return s;
  }

  bool at_end() const { return off_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string path_;
  std::size_t off_ = 0;
};

bool is_ascii_name(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (static_cast<unsigned char>(c) < 0x20 || static_cast<unsigned char>(c) > 0x7e)
      return false;
  return true;
}

std::vector<double> flat_column(const std::vector<int>& v) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v[i]);
  return out;
}

}  // namespace

std::vector<std::size_t> PairedDataset::indices_of_split(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i)
    if (split[i] == static_cast<int>(s)) out.push_back(i);
  return out;
}

void PairedDataset::validate() const {
  const std::size_t n = labels.size();
  if (subject_ids.size() != n || split.size() != n || images[0].size() != n ||
      images[1].size() != n)
    throw ContractError("PairedDataset: column lengths disagree");
  const std::size_t px = image_side * image_side;
  for (int m = 0; m < 2; ++m)
    for (const auto& img : images[m])
      if (img.size() != px)
        throw ContractError("PairedDataset: image size does not match image_side");
  std::unordered_map<int, int> subject_split;
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, fresh] = subject_split.emplace(subject_ids[i], split[i]);
    if (!fresh && it->second != split[i])
      throw ContractError(str("PairedDataset: subject ", subject_ids[i],
                              " spans splits ", it->second, " and ", split[i]));
  }
}

void GeneratorConfig::validate() const {
  if (n_subjects == 0 || image_side == 0 || k_shared == 0)
    throw ConfigError("generator: n_subjects, image_side, k_shared must be positive");
  if (pairs_per_subject == 0)
    throw ConfigError("generator: pairs_per_subject must be positive");
  auto check_ratios = [](const std::array<double, 3>& r, const char* what) {
    double sum = r[0] + r[1] + r[2];
    for (double v : r)
      if (v < 0.0) throw ConfigError(str("generator: negative ", what, " ratio"));
    if (std::abs(sum - 1.0) > 1e-9)
      throw ConfigError(str("generator: ", what, " ratios sum to ", sum, ", want 1"));
  };
  check_ratios(group_ratios, "group");
  check_ratios(split_ratios, "split");
  if (group_ratios[0] <= 0.0 || group_ratios[1] <= 0.0)
    throw ConfigError("generator: HC and AD ratios must be positive");
  if (noise_sigma < 0.0 || label_noise < 0.0 || label_noise > 1.0)
    throw ConfigError("generator: bad noise_sigma or label_noise");
}

PairedDataset generate(const GeneratorConfig& cfg, std::uint64_t seed_override) {
  GeneratorConfig c = cfg;
  c.seed = seed_override;
  return generate(c);
}

PairedDataset generate(const GeneratorConfig& cfg) {
  cfg.validate();
  const std::size_t side = cfg.image_side;
  const std::size_t px = side * side;

  Rng basis_rng(Rng::mix(cfg.seed, "generator.bases"));
  // Gaussian-blob basis images, unit L2 norm, distinct sets per modality.
  // Centers within one modality keep a minimum separation so the factors
  // stay identifiable from pixels; badly overlapping blobs would leave some
  // factor directions unrecoverable for any downstream model.
  const double min_sep = side / 4.0;
  auto make_bases = [&](std::size_t count, std::vector<std::pair<double, double>>& centers) {
    std::vector<std::vector<double>> bases;
    for (std::size_t f = 0; f < count; ++f) {
      double cx = 0.0, cy = 0.0, best_gap = -1.0;
      for (int attempt = 0; attempt < 200; ++attempt) {
        const double x = basis_rng.uniform(0.15 * side, 0.85 * side);
        const double y = basis_rng.uniform(0.15 * side, 0.85 * side);
        double gap = std::numeric_limits<double>::infinity();
        for (const auto& [ox, oy] : centers)
          gap = std::min(gap, std::hypot(x - ox, y - oy));
        if (gap > best_gap) {
          best_gap = gap;
          cx = x;
          cy = y;
        }
        if (best_gap >= min_sep) break;
      }
      centers.emplace_back(cx, cy);
      const double w = basis_rng.uniform(side / 10.0, side / 6.0);
      std::vector<double> b(px);
      double norm = 0.0;
      for (std::size_t r = 0; r < side; ++r)
        for (std::size_t col = 0; col < side; ++col) {
          const double dr = (static_cast<double>(r) - cy);
          const double dc = (static_cast<double>(col) - cx);
          const double v = std::exp(-(dr * dr + dc * dc) / (2.0 * w * w));
          b[r * side + col] = v;
          norm += v * v;
        }
      norm = std::sqrt(std::max(norm, 1e-12));
      for (auto& v : b) v /= norm;
      bases.push_back(std::move(b));
    }
    return bases;
  };
  std::vector<std::pair<double, double>> centers1, centers2;
  auto shared1 = make_bases(cfg.k_shared, centers1);
  auto spec1 = make_bases(cfg.k_spec1, centers1);
  auto shared2 = make_bases(cfg.k_shared, centers2);
  auto spec2 = make_bases(cfg.k_spec2, centers2);

  Rng rng(Rng::mix(cfg.seed, "generator.subjects"));
  // Separate streams so toggling specific factors or label noise cannot
  // perturb the group/shared draws of later subjects.
  Rng spec_rng(Rng::mix(cfg.seed, "generator.specific"));
  Rng flip_rng(Rng::mix(cfg.seed, "generator.labelnoise"));
  // Label direction in shared-factor space, unit norm.
  std::vector<double> w(cfg.k_shared);
  double wn = 0.0;
  for (auto& v : w) {
    v = rng.normal();
    wn += v * v;
  }
  wn = std::sqrt(std::max(wn, 1e-12));
  for (auto& v : w) v /= wn;
  // w.s is standard normal; this cut keeps the AD side clearly separated.
  const double threshold = 0.93;
  const double other_shift = -0.8;

  PairedDataset data;
  data.image_side = side;

  std::vector<int> subject_group(cfg.n_subjects);
  std::vector<std::vector<double>> subject_shared(cfg.n_subjects);
  std::vector<std::vector<double>> subject_spec1(cfg.n_subjects);
  std::vector<std::vector<double>> subject_spec2(cfg.n_subjects);
  for (std::size_t i = 0; i < cfg.n_subjects; ++i) {
    const double u = rng.uniform();
    int group;
    if (u < cfg.group_ratios[0])
      group = static_cast<int>(Group::HC);
    else if (u < cfg.group_ratios[0] + cfg.group_ratios[1])
      group = static_cast<int>(Group::AD);
    else
      group = static_cast<int>(Group::Other);

    std::vector<double> s(cfg.k_shared);
    if (group == static_cast<int>(Group::Other)) {
      for (std::size_t f = 0; f < cfg.k_shared; ++f)
        s[f] = rng.normal() + other_shift * w[f];
    } else {
      // Condition the shared factors on the group by rejection.
      const bool want_ad = group == static_cast<int>(Group::AD);
      for (;;) {
        double dot = 0.0;
        for (std::size_t f = 0; f < cfg.k_shared; ++f) {
          s[f] = rng.normal();
          dot += s[f] * w[f];
        }
        if ((dot > threshold) == want_ad) break;
      }
    }
    const double flip_draw = flip_rng.uniform();  // always consume one draw
    if (group != static_cast<int>(Group::Other) && flip_draw < cfg.label_noise)
      group = group == static_cast<int>(Group::AD) ? static_cast<int>(Group::HC)
                                                   : static_cast<int>(Group::AD);
    subject_group[i] = group;
    subject_shared[i] = std::move(s);
    std::vector<double> t1(cfg.k_spec1), t2(cfg.k_spec2);
    for (auto& v : t1) v = spec_rng.normal();
    for (auto& v : t2) v = spec_rng.normal();
    subject_spec1[i] = std::move(t1);
    subject_spec2[i] = std::move(t2);
  }

  // Subject-level splits, stratified by group so small cohorts appear in
  // every split.
  std::vector<int> subject_split(cfg.n_subjects, static_cast<int>(Split::Train));
  Rng split_rng(Rng::mix(cfg.seed, "generator.split"));
  for (int g = 0; g < 3; ++g) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < cfg.n_subjects; ++i)
      if (subject_group[i] == g) members.push_back(i);
    for (std::size_t i = members.size(); i > 1; --i)
      std::swap(members[i - 1], members[split_rng.uniform_u64(i)]);
    const std::size_t n = members.size();
    const std::size_t n_hold = static_cast<std::size_t>(std::lround(cfg.split_ratios[2] * n));
    const std::size_t n_val = static_cast<std::size_t>(std::lround(cfg.split_ratios[1] * n));
    for (std::size_t i = 0; i < n; ++i) {
      if (i < n_hold)
        subject_split[members[i]] = static_cast<int>(Split::Holdout);
      else if (i < n_hold + n_val)
        subject_split[members[i]] = static_cast<int>(Split::Val);
    }
  }

  Rng noise_rng(Rng::mix(cfg.seed, "generator.noise"));
  for (std::size_t i = 0; i < cfg.n_subjects; ++i) {
    for (std::size_t p = 0; p < cfg.pairs_per_subject; ++p) {
      std::vector<double> img1(px, 0.0), img2(px, 0.0);
      for (std::size_t f = 0; f < cfg.k_shared; ++f) {
        const double s = subject_shared[i][f];
        for (std::size_t j = 0; j < px; ++j) {
          img1[j] += cfg.shared_gain1 * s * shared1[f][j];
          img2[j] += cfg.shared_gain2 * s * shared2[f][j];
        }
      }
      for (std::size_t f = 0; f < cfg.k_spec1; ++f)
        for (std::size_t j = 0; j < px; ++j)
          img1[j] += subject_spec1[i][f] * spec1[f][j];
      for (std::size_t f = 0; f < cfg.k_spec2; ++f)
        for (std::size_t j = 0; j < px; ++j)
          img2[j] += subject_spec2[i][f] * spec2[f][j];
      if (cfg.noise_sigma > 0.0)
        for (std::size_t j = 0; j < px; ++j) {
          img1[j] += cfg.noise_sigma * noise_rng.normal();
          img2[j] += cfg.noise_sigma * noise_rng.normal();
        }
      data.images[0].push_back(std::move(img1));
      data.images[1].push_back(std::move(img2));
      data.labels.push_back(subject_group[i]);
      data.subject_ids.push_back(static_cast<int>(i));
      data.split.push_back(subject_split[i]);
    }
  }
  data.validate();
  return data;
}

void save_tensors(const std::string& path, const NamedTensors& tensors) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u16(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  std::map<std::string, bool> seen;
  for (const auto& [name, tensor] : tensors) {
    if (!is_ascii_name(name))
      throw ContractError(str("save_tensors: name '", name,
                              "' is empty or not printable ASCII"));
    if (seen.count(name))
      throw ContractError(str("save_tensors: duplicate name '", name, "'"));
    seen[name] = true;
    if (!tensor.defined())
      throw ContractError(str("save_tensors: undefined tensor '", name, "'"));
    if (name.size() > 0xffff)
      throw ContractError(str("save_tensors: name too long: '", name, "'"));
    put_u16(buf, static_cast<std::uint16_t>(name.size()));
    buf.append(name);
    buf.push_back(0);  // dtype f64
    buf.push_back(static_cast<char>(tensor.shape().size()));
    for (auto d : tensor.shape()) put_u64(buf, d);
    for (double v : tensor.data()) put_f64(buf, v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(str("save_tensors: cannot open '", path, "'"));
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError(str("save_tensors: write failed for '", path, "'"));
}

NamedTensors load_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(str("load_tensors: cannot open '", path, "'"));
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path);

  const std::string magic = r.raw(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw IoError(str(path, ": bad magic at offset 0"));
  const std::uint16_t version = r.u16("version");
  if (version != kVersion)
    throw IoError(str(path, ": unsupported version ", version, " at offset 4"));
  const std::uint32_t count = r.u32("entry count");

  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint16_t name_len = r.u16("name length");
    const std::string name = r.raw(name_len, "name");
    if (!is_ascii_name(name))
      throw IoError(str(path, ": non-ASCII tensor name at offset ",
                        r.offset() - name_len));
    const std::string dtype = r.raw(1, "dtype");
    if (dtype[0] != 0)
      throw IoError(str(path, ": unknown dtype ", int(dtype[0]), " at offset ",
                        r.offset() - 1));
    const std::string ndim_s = r.raw(1, "ndim");
    const int ndim = static_cast<unsigned char>(ndim_s[0]);
    diff::Shape shape;
    std::size_t n = 1;
    for (int d = 0; d < ndim; ++d) {
      const std::uint64_t ext = r.u64("extent");
      if (ext == 0) throw IoError(str(path, ": zero extent at offset ", r.offset() - 8));
      shape.push_back(static_cast<std::size_t>(ext));
      n *= static_cast<std::size_t>(ext);
    }
    r.need(8 * n, "tensor values");
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = r.f64("value");
    out.emplace_back(name, diff::Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

void save_param_store(const std::string& path, const ParamStore& store) {
  NamedTensors tensors;
  for (const auto& name : store.names()) tensors.emplace_back(name, store.get(name));
  save_tensors(path, tensors);
}

ParamStore load_param_store(const std::string& path) {
  ParamStore store;
  for (auto& [name, tensor] : load_tensors(path)) store.add(name, std::move(tensor));
  return store;
}

void save_dataset(const PairedDataset& data, const std::string& container_path,
                  const std::string& manifest_path) {
  data.validate();
  const std::size_t n = data.size();
  const std::size_t side = data.image_side;
  NamedTensors tensors;
  for (int m = 0; m < 2; ++m) {
    std::vector<double> flat;
    flat.reserve(n * side * side);
    for (const auto& img : data.images[m])
      flat.insert(flat.end(), img.begin(), img.end());
    tensors.emplace_back(m == 0 ? "m1.images" : "m2.images",
                         diff::Tensor({n, side, side}, std::move(flat)));
  }
  tensors.emplace_back("labels", diff::Tensor({n}, flat_column(data.labels)));
  tensors.emplace_back("subject_ids", diff::Tensor({n}, flat_column(data.subject_ids)));
  tensors.emplace_back("split", diff::Tensor({n}, flat_column(data.split)));
  save_tensors(container_path, tensors);

  nlohmann::json manifest;
  manifest["format"] = "mmfuse.dataset";
  manifest["container"] = container_path.substr(container_path.find_last_of('/') + 1);
  manifest["image_side"] = side;
  manifest["n_pairs"] = n;
  manifest["tensors"] = {
      {"images", {"m1.images", "m2.images"}},
      {"labels", "labels"},
      {"subject_ids", "subject_ids"},
      {"split", "split"},
  };
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw IoError(str("save_dataset: cannot open '", manifest_path, "'"));
  out << manifest.dump(2) << "\n";
}

PairedDataset load_dataset(const std::string& container_path) {
  NamedTensors tensors = load_tensors(container_path);
  auto find = [&](const std::string& name) -> const diff::Tensor& {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw IoError(str(container_path, ": missing tensor '", name, "'"));
  };
  const diff::Tensor& m1 = find("m1.images");
  const diff::Tensor& m2 = find("m2.images");
  if (m1.ndim() != 3 || m2.ndim() != 3 || m1.shape() != m2.shape() ||
      m1.shape()[1] != m1.shape()[2])
    throw IoError(str(container_path, ": malformed image tensors"));
  PairedDataset data;
  const std::size_t n = m1.shape()[0];
  data.image_side = m1.shape()[1];
  const std::size_t px = data.image_side * data.image_side;
  for (int m = 0; m < 2; ++m) {
    const auto& flat = (m == 0 ? m1 : m2).data();
    for (std::size_t i = 0; i < n; ++i)
      data.images[m].emplace_back(flat.begin() + i * px, flat.begin() + (i + 1) * px);
  }
  auto int_column = [&](const std::string& name) {
    const diff::Tensor& t = find(name);
    if (t.size() != n)
      throw IoError(str(container_path, ": tensor '", name, "' has wrong length"));
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<int>(t.data()[i]);
    return out;
  };
  data.labels = int_column("labels");
  data.subject_ids = int_column("subject_ids");
  data.split = int_column("split");
  data.validate();
  return data;
}

NormStats compute_norm_stats(const PairedDataset& data, Split from) {
  auto idx = data.indices_of_split(from);
  if (idx.empty()) throw ContractError("compute_norm_stats: split is empty");
  NormStats stats;
  for (int m = 0; m < 2; ++m) {
    double sum = 0.0, count = 0.0;
    for (auto i : idx)
      for (double v : data.images[m][i]) {
        sum += v;
        count += 1.0;
      }
    const double mean = sum / count;
    double var = 0.0;
    for (auto i : idx)
      for (double v : data.images[m][i]) var += (v - mean) * (v - mean);
    var /= count;
    stats.mean[m] = mean;
    stats.stddev[m] = std::max(std::sqrt(var), 1e-8);
  }
  return stats;
}

PairedDataset znormalize(const PairedDataset& data, const NormStats& stats) {
  PairedDataset out = data;
  for (int m = 0; m < 2; ++m)
    for (auto& img : out.images[m])
      for (auto& v : img) v = (v - stats.mean[m]) / stats.stddev[m];
  return out;
}

ImagePair augment(const ImagePair& pair, Rng& rng, const AugmentFlags& flags) {
  const std::size_t side = pair.side;
  if (pair.m1.size() != side * side || pair.m2.size() != side * side)
    throw ContractError("augment: image sizes do not match side");
  ImagePair out = pair;
  if (flags.flips) {
    const bool flip_h = rng.uniform() < 0.5;
    const bool flip_v = rng.uniform() < 0.5;
    auto apply = [&](std::vector<double>& img) {
      if (flip_h)
        for (std::size_t r = 0; r < side; ++r)
          std::reverse(img.begin() + r * side, img.begin() + (r + 1) * side);
      if (flip_v)
        for (std::size_t r = 0; r < side / 2; ++r)
          for (std::size_t c = 0; c < side; ++c)
            std::swap(img[r * side + c], img[(side - 1 - r) * side + c]);
    };
    apply(out.m1);
    apply(out.m2);
  }
  if (flags.crops) {
    const std::size_t crop = static_cast<std::size_t>(std::lround(flags.crop_fraction * side));
    if (crop > side) throw ContractError(str("augment: crop side ", crop,
                                             " exceeds image side ", side));
    if (crop < side) {
      const std::size_t r0 = rng.uniform_u64(side - crop + 1);
      const std::size_t c0 = rng.uniform_u64(side - crop + 1);
      auto apply = [&](std::vector<double>& img) {
        std::vector<double> canvas(side * side, 0.0);
        for (std::size_t r = 0; r < crop; ++r)
          for (std::size_t c = 0; c < crop; ++c)
            canvas[(r0 + r) * side + (c0 + c)] = img[(r0 + r) * side + (c0 + c)];
        img = std::move(canvas);
      };
      apply(out.m1);
      apply(out.m2);
    }
  }
  return out;
}

}  // namespace mmfuse
