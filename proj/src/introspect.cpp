#include "mmfuse/introspect.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

namespace mmfuse {

using diff::Tensor;

void SmoothgradConfig::validate() const {
  if (!(sigma >= 0.0)) throw ContractError("smoothgrad: sigma must be >= 0");
  if (n_samples == 0) throw ContractError("smoothgrad: n_samples must be >= 1");
}

Tensor smoothgrad(const EncoderConfig& cfg, const BoundParams& w,
                  const std::string& prefix, const Tensor& image,
                  std::size_t dim, const SmoothgradConfig& sg, Rng& rng) {
  cfg.validate();
  sg.validate();
  if (dim >= cfg.d_z)
    throw ContractError("smoothgrad: latent dim " + std::to_string(dim) +
                        " out of range for d_z " + std::to_string(cfg.d_z));
  const std::size_t pixels = cfg.image_side * cfg.image_side;
  if (image.size() != pixels)
    throw ShapeError("smoothgrad: image has " + std::to_string(image.size()) +
                     " pixels, expected " + std::to_string(pixels));

  std::vector<double> acc(pixels, 0.0);
  for (std::size_t draw = 0; draw < sg.n_samples; ++draw) {
    std::vector<double> noisy = image.data();
    if (sg.sigma > 0.0)
      for (auto& v : noisy) v += rng.normal(0.0, sg.sigma);
    Tensor leaf = diff::make_leaf(Tensor({pixels}, std::move(noisy)));
    EncoderOutput out = encode(cfg, w, prefix, leaf);
    Tensor target = diff::slice(out.latent, 0, dim, 1);
    diff::GradientMap grads = diff::backward(diff::sum_all(target));
    const Tensor grad = grads.grad_of(leaf);
    const std::vector<double>& g = grad.data();
    for (std::size_t i = 0; i < pixels; ++i) acc[i] += std::abs(g[i]);
  }
  for (auto& v : acc) v /= static_cast<double>(sg.n_samples);
  return Tensor({cfg.image_side, cfg.image_side}, std::move(acc));
}

namespace {

void check_mask(const Tensor& map, const Tensor& mask) {
  if (map.ndim() != 2) throw ShapeError("postprocess: map must be 2-D");
  if (mask.shape() != map.shape())
    throw ShapeError("postprocess: mask shape does not match the map");
  std::size_t inside = 0;
  for (double m : mask.data()) {
    if (m != 0.0 && m != 1.0)
      throw ContractError("postprocess: mask entries must be 0 or 1");
    if (m == 1.0) ++inside;
  }
  if (inside == 0) throw ContractError("postprocess: mask is empty");
}

}  // namespace

Tensor postprocess(const Tensor& raw, const Tensor& mask, double sigma_gauss) {
  check_mask(raw, mask);
  if (!(sigma_gauss > 0.0))
    throw ContractError("postprocess: sigma_gauss must be positive");
  const std::size_t h = raw.rows(), w = raw.cols();
  const std::vector<double>& v = raw.data();
  const std::vector<double>& m = mask.data();
  for (double x : v)
    if (!std::isfinite(x)) throw DomainError("postprocess: non-finite saliency");

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (m[i] == 0.0) continue;
    lo = std::min(lo, v[i]);
    hi = std::max(hi, v[i]);
  }
  const double span = hi - lo;
  std::vector<double> scaled(v.size(), 0.0);
  if (span > 0.0)
    for (std::size_t i = 0; i < v.size(); ++i)
      if (m[i] == 1.0) scaled[i] = (v[i] - lo) / span;

  // Truncated Gaussian blur; the kernel is renormalized over in-bounds taps
  // so borders stay a convex combination of in-range values.
  const int radius = static_cast<int>(4.0 * sigma_gauss);
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1) *
                             static_cast<std::size_t>(2 * radius + 1));
  for (int di = -radius; di <= radius; ++di)
    for (int dj = -radius; dj <= radius; ++dj)
      kernel[static_cast<std::size_t>(di + radius) * (2 * radius + 1) +
             static_cast<std::size_t>(dj + radius)] =
          std::exp(-(di * di + dj * dj) / (2.0 * sigma_gauss * sigma_gauss));

  std::vector<double> out(v.size(), 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      if (m[i * w + j] == 0.0) continue;
      double num = 0.0, den = 0.0;
      for (int di = -radius; di <= radius; ++di) {
        const long long r = static_cast<long long>(i) + di;
        if (r < 0 || r >= static_cast<long long>(h)) continue;
        for (int dj = -radius; dj <= radius; ++dj) {
          const long long c = static_cast<long long>(j) + dj;
          if (c < 0 || c >= static_cast<long long>(w)) continue;
          const double k =
              kernel[static_cast<std::size_t>(di + radius) * (2 * radius + 1) +
                     static_cast<std::size_t>(dj + radius)];
          num += k * scaled[static_cast<std::size_t>(r) * w +
                            static_cast<std::size_t>(c)];
          den += k;
        }
      }
      out[i * w + j] = std::clamp(num / den, 0.0, 1.0);
    }
  return Tensor(raw.shape(), std::move(out));
}

Tensor make_disk_mask(std::size_t side) {
  if (side == 0) throw ContractError("make_disk_mask: side must be positive");
  const double c = (static_cast<double>(side) - 1.0) / 2.0;
  const double r2 = 0.6 * static_cast<double>(side * side) / M_PI;
  std::vector<double> m(side * side, 0.0);
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j) {
      const double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
      if (di * di + dj * dj <= r2) m[i * side + j] = 1.0;
    }
  return Tensor({side, side}, std::move(m));
}

Tensor summary_matrix(const std::vector<std::vector<Tensor>>& maps,
                      const Tensor& mask) {
  if (maps.empty()) throw ContractError("summary_matrix: no subjects");
  const std::size_t n = maps.size(), d = maps[0].size();
  if (d == 0) throw ContractError("summary_matrix: no dimensions");
  std::size_t inside = 0;
  for (double m : mask.data())
    if (m == 1.0) ++inside;
  std::vector<double> out(n * d);
  for (std::size_t s = 0; s < n; ++s) {
    if (maps[s].size() != d)
      throw ShapeError("summary_matrix: ragged per-subject map lists");
    for (std::size_t k = 0; k < d; ++k) {
      check_mask(maps[s][k], mask);
      const std::vector<double>& v = maps[s][k].data();
      double sum = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) sum += v[i] * mask.data()[i];
      out[s * d + k] = sum / static_cast<double>(inside);
    }
  }
  return Tensor({n, d}, std::move(out));
}

SaliencyPairing cross_modal_saliency_correlation(const Tensor& summaries1,
                                                 const Tensor& summaries2) {
  if (summaries1.ndim() != 2 || summaries2.ndim() != 2)
    throw ShapeError("saliency correlation: summaries must be 2-D");
  const std::size_t n = summaries1.rows();
  if (summaries2.rows() != n)
    throw ShapeError("saliency correlation: subject counts differ");
  if (n < 3)
    throw ContractError("saliency correlation: needs at least 3 subjects");
  const std::size_t d1 = summaries1.cols(), d2 = summaries2.cols();

  auto centered = [n](const Tensor& t) {
    const std::size_t d = t.cols();
    std::vector<double> c(t.data());
    for (std::size_t k = 0; k < d; ++k) {
      double mu = 0.0;
      for (std::size_t s = 0; s < n; ++s) mu += c[s * d + k];
      mu /= static_cast<double>(n);
      for (std::size_t s = 0; s < n; ++s) c[s * d + k] -= mu;
    }
    return c;
  };
  const std::vector<double> c1 = centered(summaries1), c2 = centered(summaries2);

  std::vector<double> corr(d1 * d2, 0.0);
  for (std::size_t a = 0; a < d1; ++a) {
    double saa = 0.0;
    for (std::size_t s = 0; s < n; ++s) saa += c1[s * d1 + a] * c1[s * d1 + a];
    for (std::size_t b = 0; b < d2; ++b) {
      double sbb = 0.0, sab = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        sbb += c2[s * d2 + b] * c2[s * d2 + b];
        sab += c1[s * d1 + a] * c2[s * d2 + b];
      }
      if (saa <= 0.0 || sbb <= 0.0) continue;  // zero-variance dimension
      corr[a * d2 + b] =
          std::clamp(sab / (std::sqrt(saa) * std::sqrt(sbb)), -1.0, 1.0);
    }
  }

  SaliencyPairing out;
  out.best_value = corr[0];
  for (std::size_t a = 0; a < d1; ++a)
    for (std::size_t b = 0; b < d2; ++b)
      if (corr[a * d2 + b] > out.best_value) {
        out.best_value = corr[a * d2 + b];
        out.best_dim1 = a;
        out.best_dim2 = b;
      }
  out.correlation = Tensor({d1, d2}, std::move(corr));
  return out;
}

MannWhitney mann_whitney_rbc(const std::vector<double>& a,
                             const std::vector<double>& b) {
  if (a.empty() || b.empty())
    throw ContractError("mann_whitney_rbc: both samples must be nonempty");
  const std::size_t na = a.size(), nb = b.size(), total = na + nb;
  std::vector<std::pair<double, int>> pool;  // value, 1 if from a
  pool.reserve(total);
  for (double v : a) {
    if (!std::isfinite(v)) throw DomainError("mann_whitney_rbc: non-finite value");
    pool.emplace_back(v, 1);
  }
  for (double v : b) {
    if (!std::isfinite(v)) throw DomainError("mann_whitney_rbc: non-finite value");
    pool.emplace_back(v, 0);
  }
  std::sort(pool.begin(), pool.end(),
            [](const auto& x, const auto& y) { return x.first < y.first; });

  // Midranks make rank-sum U equal pair counting with half-credit ties.
  double rank_a = 0.0, tie_term = 0.0;
  std::size_t i = 0;
  while (i < total) {
    std::size_t j = i;
    while (j + 1 < total && pool[j + 1].first == pool[i].first) ++j;
    const double t = static_cast<double>(j - i + 1);
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k)
      if (pool[k].second == 1) rank_a += midrank;
    tie_term += t * t * t - t;
    i = j + 1;
  }

  const double nm = static_cast<double>(na) * static_cast<double>(nb);
  MannWhitney r;
  r.u = rank_a - static_cast<double>(na) * static_cast<double>(na + 1) / 2.0;
  r.rbc = (2.0 * r.u - nm) / nm;
  const double nn = static_cast<double>(total);
  const double var =
      nm / 12.0 *
      (nn + 1.0 - tie_term / (nn * (nn - 1.0)));
  r.z = var > 0.0 ? (r.u - nm / 2.0) / std::sqrt(var) : 0.0;
  return r;
}

GroupDiffMap group_diff_map(const std::vector<Tensor>& maps,
                            const std::vector<int>& labels, int group_a,
                            int group_b) {
  if (maps.size() != labels.size())
    throw ContractError("group_diff_map: one label per map required");
  if (maps.empty()) throw ContractError("group_diff_map: no maps");
  const diff::Shape shape = maps[0].shape();
  if (maps[0].ndim() != 2) throw ShapeError("group_diff_map: maps must be 2-D");
  std::vector<std::size_t> ia, ib;
  for (std::size_t s = 0; s < maps.size(); ++s) {
    if (maps[s].shape() != shape)
      throw ShapeError("group_diff_map: maps disagree on shape");
    if (labels[s] == group_a) ia.push_back(s);
    else if (labels[s] == group_b) ib.push_back(s);
  }
  if (ia.empty() || ib.empty())
    throw ContractError("group_diff_map: both groups must be nonempty");

  const std::size_t pixels = maps[0].size();
  std::vector<double> rbc(pixels), u(pixels), p(pixels);
  parallel_for(pixels, [&](std::size_t px) {
    std::vector<double> va(ia.size()), vb(ib.size());
    for (std::size_t k = 0; k < ia.size(); ++k) va[k] = maps[ia[k]].data()[px];
    for (std::size_t k = 0; k < ib.size(); ++k) vb[k] = maps[ib[k]].data()[px];
    const MannWhitney mw = mann_whitney_rbc(va, vb);
    rbc[px] = mw.rbc;
    u[px] = mw.u;
    p[px] = std::erfc(std::abs(mw.z) / std::sqrt(2.0));
  });

  GroupDiffMap out;
  std::size_t peak = 0;
  for (std::size_t px = 1; px < pixels; ++px)
    if (std::abs(rbc[px]) > std::abs(rbc[peak])) peak = px;
  out.peak_row = peak / shape[1];
  out.peak_col = peak % shape[1];
  out.rbc = Tensor(shape, std::move(rbc));
  out.u = Tensor(shape, std::move(u));
  out.p = Tensor(shape, std::move(p));
  return out;
}

std::pair<std::size_t, std::size_t> select_extreme_dims(
    const std::vector<double>& weights) {
  if (weights.empty())
    throw ContractError("select_extreme_dims: empty weight vector");
  const auto hi = std::max_element(weights.begin(), weights.end());
  const auto lo = std::min_element(weights.begin(), weights.end());
  return {static_cast<std::size_t>(hi - weights.begin()),
          static_cast<std::size_t>(lo - weights.begin())};
}

}  // namespace mmfuse
