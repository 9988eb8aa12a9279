#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "mad/common.hpp"
#include "mad/rng.hpp"
#include "mad/tensor.hpp"

// Frequency-space toolkit: orthonormal 2-D DCT analysis/synthesis, a
// difference-of-Gaussians band mask over DCT indices, and the augmentation
// that randomizes one spectral component while preserving the other.

namespace mad {

// Per-channel DCT-II coefficients, channel-major, row-major within a channel.
// Orthonormal scaling, so coefficient energy equals pixel energy.
struct Spectrum {
  Shape src_shape;  // [H,W] or [C,H,W]; idct2 restores exactly this shape
  int channels = 0, h = 0, w = 0;
  std::vector<double> coeff;

  double& at(int c, int u, int v) { return coeff[(static_cast<size_t>(c) * h + u) * w + v]; }
  double at(int c, int u, int v) const { return coeff[(static_cast<size_t>(c) * h + u) * w + v]; }
};

namespace detail {

// N-point orthonormal DCT-II basis, basis[k*N+n] = s(k) cos(pi (2n+1) k / 2N),
// s(0) = sqrt(1/N), s(k>0) = sqrt(2/N). Cached per N; thread-safe.
inline std::shared_ptr<const std::vector<double>> dct_basis(int n) {
  static std::mutex mu;
  static std::map<int, std::shared_ptr<const std::vector<double>>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  auto basis = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * n);
  const double s0 = std::sqrt(1.0 / n), sk = std::sqrt(2.0 / n);
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      (*basis)[static_cast<size_t>(k) * n + i] =
          (k == 0 ? s0 : sk) * std::cos(M_PI * (2.0 * i + 1.0) * k / (2.0 * n));
  cache[n] = basis;
  return basis;
}

inline void spectrum_geometry(const Shape& s, int& c, int& h, int& w) {
  if (s.size() == 2) {
    c = 1;
    h = s[0];
    w = s[1];
  } else if (s.size() == 3) {
    c = s[0];
    h = s[1];
    w = s[2];
  } else {
    fail(errkind::kShape, "dct2 expects an [H,W] or [C,H,W] image, got " + shape_str(s));
  }
}

}  // namespace detail

// Separable orthonormal DCT-II per channel: rows first, then columns.
inline Spectrum dct2(const Tensor& image) {
  int c, h, w;
  detail::spectrum_geometry(image.shape(), c, h, w);
  auto bh = detail::dct_basis(h);
  auto bw = detail::dct_basis(w);
  Spectrum spec;
  spec.src_shape = image.shape();
  spec.channels = c;
  spec.h = h;
  spec.w = w;
  spec.coeff.assign(static_cast<size_t>(c) * h * w, 0.0);
  std::vector<double> tmp(static_cast<size_t>(h) * w);
  for (int ch = 0; ch < c; ++ch) {
    const double* x = image.data() + static_cast<size_t>(ch) * h * w;
    // tmp[u][m] = sum_n bh[u][n] x[n][m]
    std::fill(tmp.begin(), tmp.end(), 0.0);
    for (int u = 0; u < h; ++u)
      for (int n = 0; n < h; ++n) {
        const double b = (*bh)[static_cast<size_t>(u) * h + n];
        const double* row = x + static_cast<size_t>(n) * w;
        double* trow = tmp.data() + static_cast<size_t>(u) * w;
        for (int m = 0; m < w; ++m) trow[m] += b * row[m];
      }
    // out[u][v] = sum_m tmp[u][m] bw[v][m]
    double* out = spec.coeff.data() + static_cast<size_t>(ch) * h * w;
    for (int u = 0; u < h; ++u) {
      const double* trow = tmp.data() + static_cast<size_t>(u) * w;
      for (int v = 0; v < w; ++v) {
        const double* b = bw->data() + static_cast<size_t>(v) * w;
        double acc = 0.0;
        for (int m = 0; m < w; ++m) acc += trow[m] * b[m];
        out[static_cast<size_t>(u) * w + v] = acc;
      }
    }
  }
  return spec;
}

inline Tensor idct2(const Spectrum& spec) {
  const int c = spec.channels, h = spec.h, w = spec.w;
  check(c > 0 && h > 0 && w > 0 &&
            spec.coeff.size() == static_cast<size_t>(c) * h * w,
        errkind::kShape, "idct2 on malformed spectrum");
  auto bh = detail::dct_basis(h);
  auto bw = detail::dct_basis(w);
  Tensor image = Tensor::zeros(spec.src_shape);
  std::vector<double> tmp(static_cast<size_t>(h) * w);
  for (int ch = 0; ch < c; ++ch) {
    const double* s = spec.coeff.data() + static_cast<size_t>(ch) * h * w;
    // tmp[n][v] = sum_u bh[u][n] s[u][v]
    std::fill(tmp.begin(), tmp.end(), 0.0);
    for (int n = 0; n < h; ++n)
      for (int u = 0; u < h; ++u) {
        const double b = (*bh)[static_cast<size_t>(u) * h + n];
        const double* srow = s + static_cast<size_t>(u) * w;
        double* trow = tmp.data() + static_cast<size_t>(n) * w;
        for (int v = 0; v < w; ++v) trow[v] += b * srow[v];
      }
    // x[n][m] = sum_v tmp[n][v] bw[v][m]
    double* x = image.data() + static_cast<size_t>(ch) * h * w;
    for (int n = 0; n < h; ++n) {
      double* xrow = x + static_cast<size_t>(n) * w;
      const double* trow = tmp.data() + static_cast<size_t>(n) * w;
      for (int v = 0; v < w; ++v) {
        const double t = trow[v];
        const double* b = bw->data() + static_cast<size_t>(v) * w;
        for (int m = 0; m < w; ++m) xrow[m] += t * b[m];
      }
    }
  }
  return image;
}

// Difference-of-Gaussians weight over DCT indices: zero at the origin, rising
// through the pass band, vanishing at high frequency.
struct BandMask {
  int h = 0, w = 0;
  double r_lo = 0.0, r_hi = 0.0;
  std::vector<double> weights;

  double at(int u, int v) const { return weights[static_cast<size_t>(u) * w + v]; }
};

inline BandMask band_mask(int h, int w, double r_lo, double r_hi) {
  check(h >= 1 && w >= 1, errkind::kShape, "band_mask needs positive extents");
  check(r_lo > 0.0, errkind::kContract, "band_mask needs r_lo > 0");
  check(r_lo < r_hi, errkind::kContract, "band_mask needs r_lo < r_hi");
  BandMask m;
  m.h = h;
  m.w = w;
  m.r_lo = r_lo;
  m.r_hi = r_hi;
  m.weights.resize(static_cast<size_t>(h) * w);
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      const double r2 = static_cast<double>(u) * u + static_cast<double>(v) * v;
      m.weights[static_cast<size_t>(u) * w + v] =
          std::exp(-r2 / (2.0 * r_hi * r_hi)) - std::exp(-r2 / (2.0 * r_lo * r_lo));
    }
  return m;
}

// Multiplies every coefficient by (1 + sigma * n), n i.i.d. standard normal,
// drawn in storage order (channel-major, row-major).
inline Spectrum randomize_gaussian(const Spectrum& spec, double sigma, Rng& rng) {
  check(sigma >= 0.0, errkind::kContract, "randomize_gaussian needs sigma >= 0");
  Spectrum out = spec;
  if (sigma == 0.0) return out;
  for (double& c : out.coeff) c *= 1.0 + sigma * rng.normal();
  return out;
}

enum class ScgMode { kIntent, kLiteral };

inline const char* scg_mode_name(ScgMode m) { return m == ScgMode::kIntent ? "intent" : "literal"; }

inline ScgMode scg_mode_from_name(const std::string& s) {
  if (s == "intent") return ScgMode::kIntent;
  if (s == "literal") return ScgMode::kLiteral;
  fail(errkind::kConfig, "unknown augmentation mode '" + s + "' (want intent|literal)");
}

struct ScgConfig {
  double r_lo = 2.0;
  double r_hi = 0.0;  // <= 0 resolves to H/4 at call time
  ScgMode mode = ScgMode::kIntent;
  double sigma = 1.0;

  double resolved_r_hi(int h) const { return r_hi > 0.0 ? r_hi : h / 4.0; }
};

// Splits the spectrum with the band mask, randomizes one component, and
// recomposes. literal follows the printed composition (randomize the band-pass
// part); intent randomizes the complementary extremes and keeps the band-pass
// addend untouched. One normal draw per coefficient either way.
inline Tensor scg_augment(const Tensor& image, const ScgConfig& cfg, Rng& rng) {
  Spectrum s = dct2(image);
  const BandMask m = band_mask(s.h, s.w, cfg.r_lo, cfg.resolved_r_hi(s.h));
  const size_t plane = static_cast<size_t>(s.h) * s.w;
  Spectrum keep = s, randomized = s;
  for (int c = 0; c < s.channels; ++c)
    for (size_t i = 0; i < plane; ++i) {
      const double wgt = m.weights[i];
      const double sv = s.coeff[c * plane + i];
      const double band = wgt * sv, rest = (1.0 - wgt) * sv;
      if (cfg.mode == ScgMode::kLiteral) {
        randomized.coeff[c * plane + i] = band;
        keep.coeff[c * plane + i] = rest;
      } else {
        randomized.coeff[c * plane + i] = rest;
        keep.coeff[c * plane + i] = band;
      }
    }
  Spectrum rg = randomize_gaussian(randomized, cfg.sigma, rng);
  for (size_t i = 0; i < rg.coeff.size(); ++i) rg.coeff[i] += keep.coeff[i];
  return idct2(rg);
}

}  // namespace mad
