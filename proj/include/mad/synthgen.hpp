#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mad/common.hpp"
#include "mad/ioutil.hpp"
#include "mad/rng.hpp"
#include "mad/spectral.hpp"
#include "mad/tensor.hpp"

// Synthetic multi-domain detection data with controlled frequency placement:
// class-defining patterns occupy the mid-frequency pass band, domain styles
// (per-channel bias, smooth shading, fine texture) occupy the complementary
// extremes. Both sides are synthesized from pure DCT atoms, so band
// bookkeeping is exact rather than approximate.

namespace mad {

// Half-open pixel rectangle [x0,x1) x [y0,y1).
struct SampleBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool overlaps(const SampleBox& o) const {
    return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1;
  }
};

struct StyleParams {
  double bias_amp = 0.0;                      // per-channel brightness offset
  std::array<double, 3> bias_dir{1, 1, 1};    // sign/weight per channel
  double tilt_amp = 0.0;                      // smooth shading peak amplitude
  double tilt_angle = 0.0;                    // radians; splits shading x vs y
  double tex_amp = 0.0;                       // fine-texture pixel std
  double tex_radius = 12.0;                   // texture lives at index r > this
  bool per_sample_jitter = false;             // amplitudes jittered per sample
  double jitter_frac = 0.0;
  // Spurious correlations: each instance box gets an off-band brightness
  // patch (class_bias_amp) and an in-band motif texture (class_band_amp)
  // whose signed levels are a function of its class. The class-to-level map
  // is rotated by class_style_shift, so a held-out domain can break
  // (shift != 0) a correlation the source domains agree on (shift == 0).
  // The motif rides the class layer's band projection; the patch is held to
  // the band complement. Neither determines the label.
  double class_bias_amp = 0.0;
  double class_band_amp = 0.0;
  int class_style_shift = 0;
};

struct DomainSpec {
  int domain_id = 0;
  std::string preset = "custom";
  StyleParams style;
  uint64_t seed = 0;
};

inline DomainSpec make_domain_spec(int domain_id, const StyleParams& style, uint64_t seed) {
  check(style.bias_amp >= 0 && style.tilt_amp >= 0 && style.tex_amp >= 0 &&
            style.jitter_frac >= 0 && style.class_bias_amp >= 0 &&
            style.class_band_amp >= 0,
        errkind::kContract, "style amplitudes must be >= 0");
  check(style.tex_radius > 0, errkind::kContract, "texture radius must be > 0");
  DomainSpec s;
  s.domain_id = domain_id;
  s.style = style;
  s.seed = seed;
  return s;
}

// Preset table (documented constants):
//   bright: bias +0.30 on all channels
//   dark:   bias  0.30 with direction (-1,-1,-1)
//   tilted: shading 0.30 at 45 degrees
//   noisy:  texture std 0.15 beyond index radius 12
//   plain:  all amplitudes zero
inline DomainSpec make_domain_spec(int domain_id, const std::string& preset, uint64_t seed) {
  StyleParams p;
  if (preset == "bright") {
    p.bias_amp = 0.3;
  } else if (preset == "dark") {
    p.bias_amp = 0.3;
    p.bias_dir = {-1, -1, -1};
  } else if (preset == "tilted") {
    p.tilt_amp = 0.3;
    p.tilt_angle = M_PI / 4.0;
  } else if (preset == "noisy") {
    p.tex_amp = 0.15;
    p.tex_radius = 12.0;
  } else if (preset != "plain") {
    fail(errkind::kConfig, "unknown domain preset '" + preset + "'");
  }
  DomainSpec s = make_domain_spec(domain_id, p, seed);
  s.preset = preset;
  return s;
}

struct DataGeom {
  int c = 3, h = 32, w = 32;
  int k_classes = 4;
  double r_lo = 2.0, r_hi = 8.0;  // causal band: r_lo^2 < u^2+v^2 < r_hi^2
};

// One mid-band DCT index per class; pairwise distinct, all strictly inside
// the default (2, 8) band.
inline std::pair<int, int> class_atom(int cls) {
  static constexpr std::pair<int, int> atoms[4] = {{0, 5}, {5, 0}, {4, 4}, {6, 2}};
  check(cls >= 0 && cls < 4, errkind::kContract,
        "class id " + std::to_string(cls) + " outside the 4-entry pattern table");
  return atoms[cls];
}

constexpr double kClassPatternAmp = 1.0;
// Brightness levels for the class-correlated style patches, one per class.
constexpr double kClassStyleUnits[4] = {-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0};
constexpr int kBoxMinSide = 8;
constexpr int kBoxMaxSide = 14;
constexpr int kBoxRetries = 100;
constexpr double kBaseGray = 0.5;

// Full-canvas grating for one class: the class's DCT atom rescaled to peak
// amplitude ~1. Distinct classes are orthogonal under the pixel dot product.
inline Tensor class_grating(int cls, int h, int w) {
  auto [u, v] = class_atom(cls);
  check(u < h && v < w, errkind::kShape, "image too small for the class pattern table");
  Spectrum s;
  s.src_shape = {h, w};
  s.channels = 1;
  s.h = h;
  s.w = w;
  s.coeff.assign(static_cast<size_t>(h) * w, 0.0);
  const double su = u == 0 ? std::sqrt(1.0 / h) : std::sqrt(2.0 / h);
  const double sv = v == 0 ? std::sqrt(1.0 / w) : std::sqrt(2.0 / w);
  s.coeff[static_cast<size_t>(u) * w + v] = 1.0 / (su * sv);
  return idct2(s);
}

// Mid-band atom shared by all classes, distinct from every class atom; the
// spurious in-band motif is this grating scaled per instance.
inline Tensor band_motif_grating(int h, int w) {
  check(3 < h && 3 < w, errkind::kShape, "image too small for the band motif");
  Spectrum s;
  s.src_shape = {h, w};
  s.channels = 1;
  s.h = h;
  s.w = w;
  s.coeff.assign(static_cast<size_t>(h) * w, 0.0);
  s.coeff[static_cast<size_t>(3) * w + 3] = 1.0 / (std::sqrt(2.0 / h) * std::sqrt(2.0 / w));
  return idct2(s);
}

struct Sample {
  Tensor image;  // [C,H,W], values in [0,1]
  std::vector<SampleBox> boxes;
  std::vector<int> classes;
  int domain_id = 0;
};

// Optional decomposition of a rendered sample, for analysis and tests.
struct RenderLayers {
  Tensor style;  // [C,H,W] bias + shading + texture, without the gray base
  Tensor klass;  // [C,H,W] band-projected class patterns
};

namespace detail {

inline double hann(int i, int n) {
  const double s = std::sin(M_PI * (i + 0.5) / n);
  return s * s;
}

// Zeroes every coefficient outside the open band r_lo^2 < u^2+v^2 < r_hi^2.
inline void project_to_band(Spectrum& s, double r_lo, double r_hi) {
  const double lo2 = r_lo * r_lo, hi2 = r_hi * r_hi;
  for (int c = 0; c < s.channels; ++c)
    for (int u = 0; u < s.h; ++u)
      for (int v = 0; v < s.w; ++v) {
        const double r2 = static_cast<double>(u) * u + static_cast<double>(v) * v;
        if (!(r2 > lo2 && r2 < hi2)) s.at(c, u, v) = 0.0;
      }
}

// Complement projection: zeroes every coefficient inside the open band.
inline void project_off_band(Spectrum& s, double r_lo, double r_hi) {
  const double lo2 = r_lo * r_lo, hi2 = r_hi * r_hi;
  for (int c = 0; c < s.channels; ++c)
    for (int u = 0; u < s.h; ++u)
      for (int v = 0; v < s.w; ++v) {
        const double r2 = static_cast<double>(u) * u + static_cast<double>(v) * v;
        if (r2 > lo2 && r2 < hi2) s.at(c, u, v) = 0.0;
      }
}

}  // namespace detail

// Draw order per sample (fixed contract): jitter normals (only when enabled),
// then per instance up to 100 attempts of (bw, bh, x0, y0), then texture
// normals channel-major row-major over the shell r > tex_radius (only when
// tex_amp > 0).
inline Sample render_sample(const DomainSpec& spec, const std::vector<int>& class_ids,
                            const DataGeom& geom, Rng& rng, RenderLayers* layers = nullptr) {
  check(!class_ids.empty() && class_ids.size() <= 3, errkind::kContract,
        "render_sample takes 1..3 class ids");
  for (int cls : class_ids)
    check(cls >= 0 && cls < geom.k_classes, errkind::kContract,
          "class id out of range: " + std::to_string(cls));
  check(geom.k_classes >= 1 && geom.k_classes <= 4, errkind::kContract,
        "k_classes must be 1..4 (pattern table size)");
  check(geom.h >= kBoxMinSide && geom.w >= kBoxMinSide, errkind::kShape,
        "image smaller than the minimum box");

  const auto& st = spec.style;
  double jb = 1.0, jt = 1.0, jx = 1.0;
  if (st.per_sample_jitter) {
    jb = 1.0 + st.jitter_frac * rng.normal();
    jt = 1.0 + st.jitter_frac * rng.normal();
    jx = std::abs(1.0 + st.jitter_frac * rng.normal());
  }

  // Box placement: bounded rejection sampling, non-overlapping.
  std::vector<SampleBox> boxes;
  const int max_side_h = std::min(kBoxMaxSide, geom.h);
  const int max_side_w = std::min(kBoxMaxSide, geom.w);
  for (size_t inst = 0; inst < class_ids.size(); ++inst) {
    bool placed = false;
    for (int attempt = 0; attempt < kBoxRetries && !placed; ++attempt) {
      SampleBox b;
      const int bw = kBoxMinSide + static_cast<int>(rng.below(max_side_w - kBoxMinSide + 1));
      const int bh = kBoxMinSide + static_cast<int>(rng.below(max_side_h - kBoxMinSide + 1));
      b.x0 = static_cast<int>(rng.below(geom.w - bw + 1));
      b.y0 = static_cast<int>(rng.below(geom.h - bh + 1));
      b.x1 = b.x0 + bw;
      b.y1 = b.y0 + bh;
      bool clash = false;
      for (const auto& other : boxes) clash = clash || b.overlaps(other);
      if (!clash) {
        boxes.push_back(b);
        placed = true;
      }
    }
    check(placed, errkind::kContract,
          "box placement failed after " + std::to_string(kBoxRetries) + " attempts");
  }

  // Class layer: windowed gratings plus the optional spurious in-band motif,
  // then a hard projection onto the band so window leakage cannot escape it.
  Tensor klass = Tensor::zeros({geom.h, geom.w});
  const Tensor motif =
      st.class_band_amp != 0.0 ? band_motif_grating(geom.h, geom.w) : Tensor();
  for (size_t inst = 0; inst < class_ids.size(); ++inst) {
    const Tensor g = class_grating(class_ids[inst], geom.h, geom.w);
    const auto& b = boxes[inst];
    double motif_level = 0.0;
    if (motif.defined()) {
      const int slot = ((class_ids[inst] + st.class_style_shift) % 4 + 4) % 4;
      motif_level = st.class_band_amp * kClassStyleUnits[slot];
    }
    for (int y = b.y0; y < b.y1; ++y)
      for (int x = b.x0; x < b.x1; ++x) {
        const size_t px = static_cast<size_t>(y) * geom.w + x;
        const double win = detail::hann(y - b.y0, b.height()) *
                           detail::hann(x - b.x0, b.width());
        klass.data()[px] += kClassPatternAmp * win * g.data()[px];
        if (motif.defined()) klass.data()[px] += motif_level * win * motif.data()[px];
      }
  }
  {
    Spectrum ks = dct2(klass);
    detail::project_to_band(ks, geom.r_lo, geom.r_hi);
    klass = idct2(ks);
  }

  // Class-correlated style: windowed brightness patches over the instance
  // boxes, held to the complement of the causal band so the spurious signal
  // stays in style territory.
  Tensor cstyle;
  if (st.class_bias_amp != 0.0) {
    cstyle = Tensor::zeros({geom.h, geom.w});
    for (size_t inst = 0; inst < class_ids.size(); ++inst) {
      const int slot = ((class_ids[inst] + st.class_style_shift) % 4 + 4) % 4;
      const double level = st.class_bias_amp * kClassStyleUnits[slot];
      const auto& b = boxes[inst];
      for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x)
          cstyle.data()[static_cast<size_t>(y) * geom.w + x] +=
              level * detail::hann(y - b.y0, b.height()) *
              detail::hann(x - b.x0, b.width());
    }
    Spectrum cs = dct2(cstyle);
    detail::project_off_band(cs, geom.r_lo, geom.r_hi);
    cstyle = idct2(cs);
  }

  // Shading from the two r=1 atoms, rescaled to peak ~ tilt_amp.
  Tensor shade = Tensor::zeros({geom.h, geom.w});
  if (st.tilt_amp > 0) {
    Spectrum ts;
    ts.src_shape = {geom.h, geom.w};
    ts.channels = 1;
    ts.h = geom.h;
    ts.w = geom.w;
    ts.coeff.assign(static_cast<size_t>(geom.h) * geom.w, 0.0);
    const double s0h = std::sqrt(1.0 / geom.h), s1h = std::sqrt(2.0 / geom.h);
    const double s0w = std::sqrt(1.0 / geom.w), s1w = std::sqrt(2.0 / geom.w);
    ts.coeff[1] = st.tilt_amp * jt * std::cos(st.tilt_angle) / (s0h * s1w);          // (0,1)
    ts.coeff[static_cast<size_t>(geom.w)] =
        st.tilt_amp * jt * std::sin(st.tilt_angle) / (s1h * s0w);                    // (1,0)
    shade = idct2(ts);
  }

  // Texture: white noise on the shell r > tex_radius, scaled so the
  // pixel-space std is ~ tex_amp.
  Tensor noise;
  if (st.tex_amp > 0) {
    int n_shell = 0;
    const double rad2 = st.tex_radius * st.tex_radius;
    for (int u = 0; u < geom.h; ++u)
      for (int v = 0; v < geom.w; ++v)
        if (static_cast<double>(u) * u + static_cast<double>(v) * v > rad2) ++n_shell;
    check(n_shell > 0, errkind::kContract, "texture radius leaves no coefficients");
    const double scale =
        st.tex_amp * jx * std::sqrt(static_cast<double>(geom.h) * geom.w / n_shell);
    Spectrum ns;
    ns.src_shape = {geom.c, geom.h, geom.w};
    ns.channels = geom.c;
    ns.h = geom.h;
    ns.w = geom.w;
    ns.coeff.assign(static_cast<size_t>(geom.c) * geom.h * geom.w, 0.0);
    for (int c = 0; c < geom.c; ++c)
      for (int u = 0; u < geom.h; ++u)
        for (int v = 0; v < geom.w; ++v)
          if (static_cast<double>(u) * u + static_cast<double>(v) * v > rad2)
            ns.at(c, u, v) = scale * rng.normal();
    noise = idct2(ns);
  }

  Sample out;
  out.domain_id = spec.domain_id;
  out.boxes = std::move(boxes);
  out.classes = class_ids;
  out.image = Tensor::zeros({geom.c, geom.h, geom.w});
  if (layers) {
    layers->style = Tensor::zeros({geom.c, geom.h, geom.w});
    layers->klass = Tensor::zeros({geom.c, geom.h, geom.w});
  }
  const size_t plane = static_cast<size_t>(geom.h) * geom.w;
  for (int c = 0; c < geom.c; ++c) {
    const double bias = st.bias_amp * jb * st.bias_dir[static_cast<size_t>(c) % 3];
    for (size_t i = 0; i < plane; ++i) {
      const double style_v = bias + shade.data()[i] +
                             (cstyle.defined() ? cstyle.data()[i] : 0.0) +
                             (noise.defined() ? noise.data()[c * plane + i] : 0.0);
      const double v = kBaseGray + style_v + klass.data()[i];
      out.image.data()[c * plane + i] = std::min(1.0, std::max(0.0, v));
      if (layers) {
        layers->style.data()[c * plane + i] = style_v;
        layers->klass.data()[c * plane + i] = klass.data()[i];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk dataset
// ---------------------------------------------------------------------------

constexpr uint32_t kSampleMagic = 0x4D414453;  // "SDAM" little-endian, "MADS" bytes
constexpr uint32_t kDatasetVersion = 1;

inline std::string sample_filename(int domain_id, int index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "d%d_%05d.bin", domain_id, index);
  return buf;
}

// Byte layout (all little-endian):
//   header : u32 magic, u32 version, u32 C, u32 H, u32 W, u32 domain_id,
//            u32 n_boxes
//   payload: C*H*W f32 image (channel-major, row-major), then per box
//            i32 x0,y0,x1,y1, then n_boxes i32 class ids
//   footer : u32 CRC-32 of the payload bytes
inline std::vector<uint8_t> encode_sample(const Sample& s) {
  const auto& sh = s.image.shape();
  check(sh.size() == 3, errkind::kShape, "sample image must be [C,H,W]");
  check(s.boxes.size() == s.classes.size(), errkind::kContract,
        "box/class count mismatch");
  std::vector<uint8_t> out;
  put_u32(out, kSampleMagic);
  put_u32(out, kDatasetVersion);
  put_u32(out, static_cast<uint32_t>(sh[0]));
  put_u32(out, static_cast<uint32_t>(sh[1]));
  put_u32(out, static_cast<uint32_t>(sh[2]));
  put_u32(out, static_cast<uint32_t>(s.domain_id));
  put_u32(out, static_cast<uint32_t>(s.boxes.size()));
  const size_t payload_start = out.size();
  for (double v : s.image.values()) put_f32(out, static_cast<float>(v));
  for (const auto& b : s.boxes) {
    put_i32(out, b.x0);
    put_i32(out, b.y0);
    put_i32(out, b.x1);
    put_i32(out, b.y1);
  }
  for (int c : s.classes) put_i32(out, c);
  const uint32_t crc = crc32(out.data() + payload_start, out.size() - payload_start);
  put_u32(out, crc);
  return out;
}

inline Sample decode_sample(const std::vector<uint8_t>& bytes, const std::string& origin) {
  ByteReader r(bytes, origin);
  check(r.get_u32() == kSampleMagic, errkind::kCorrupt, "bad magic in " + origin);
  const uint32_t version = r.get_u32();
  check(version == kDatasetVersion, errkind::kVersion,
        "unsupported sample version " + std::to_string(version) + " in " + origin);
  const int c = static_cast<int>(r.get_u32());
  const int h = static_cast<int>(r.get_u32());
  const int w = static_cast<int>(r.get_u32());
  check(c >= 1 && c <= 16 && h >= 1 && h <= 4096 && w >= 1 && w <= 4096, errkind::kCorrupt,
        "implausible extents in " + origin);
  Sample s;
  s.domain_id = static_cast<int>(r.get_u32());
  const uint32_t n_boxes = r.get_u32();
  check(n_boxes <= 64, errkind::kCorrupt, "implausible box count in " + origin);
  const size_t payload_start = r.pos();
  const size_t payload_len = static_cast<size_t>(c) * h * w * 4 + n_boxes * 20;
  check(r.remaining() == payload_len + 4, errkind::kCorrupt,
        "length mismatch in " + origin + ": have " + std::to_string(r.remaining()) +
            " payload+crc bytes, want " + std::to_string(payload_len + 4));
  s.image = Tensor::zeros({c, h, w});
  for (size_t i = 0; i < s.image.numel(); ++i) s.image.data()[i] = r.get_f32();
  for (uint32_t i = 0; i < n_boxes; ++i) {
    SampleBox b;
    b.x0 = r.get_i32();
    b.y0 = r.get_i32();
    b.x1 = r.get_i32();
    b.y1 = r.get_i32();
    check(0 <= b.x0 && b.x0 < b.x1 && b.x1 <= w && 0 <= b.y0 && b.y0 < b.y1 && b.y1 <= h,
          errkind::kCorrupt, "box outside image bounds in " + origin);
    s.boxes.push_back(b);
  }
  for (uint32_t i = 0; i < n_boxes; ++i) s.classes.push_back(r.get_i32());
  const uint32_t want = crc32(bytes.data() + payload_start, payload_len);
  const uint32_t got = r.get_u32();
  check(want == got, errkind::kCorrupt, "checksum mismatch in " + origin);
  return s;
}

struct DatasetManifest {
  uint32_t format_version = kDatasetVersion;
  DataGeom geom;
  std::vector<DomainSpec> domains;
  int n_per_domain = 0;
  std::vector<double> class_weights;  // empty means balanced
};

inline nlohmann::json to_json(const DomainSpec& s) {
  return {{"domain_id", s.domain_id},
          {"preset", s.preset},
          {"bias_amp", s.style.bias_amp},
          {"bias_dir", s.style.bias_dir},
          {"tilt_amp", s.style.tilt_amp},
          {"tilt_angle", s.style.tilt_angle},
          {"tex_amp", s.style.tex_amp},
          {"tex_radius", s.style.tex_radius},
          {"per_sample_jitter", s.style.per_sample_jitter},
          {"jitter_frac", s.style.jitter_frac},
          {"class_bias_amp", s.style.class_bias_amp},
          {"class_band_amp", s.style.class_band_amp},
          {"class_style_shift", s.style.class_style_shift},
          {"seed", s.seed}};
}

inline DomainSpec domain_spec_from_json(const nlohmann::json& j) {
  DomainSpec s;
  s.domain_id = j.at("domain_id").get<int>();
  s.preset = j.at("preset").get<std::string>();
  s.style.bias_amp = j.at("bias_amp").get<double>();
  const auto dir = j.at("bias_dir");
  for (int i = 0; i < 3; ++i) s.style.bias_dir[i] = dir.at(i).get<double>();
  s.style.tilt_amp = j.at("tilt_amp").get<double>();
  s.style.tilt_angle = j.at("tilt_angle").get<double>();
  s.style.tex_amp = j.at("tex_amp").get<double>();
  s.style.tex_radius = j.at("tex_radius").get<double>();
  s.style.per_sample_jitter = j.at("per_sample_jitter").get<bool>();
  s.style.jitter_frac = j.at("jitter_frac").get<double>();
  s.style.class_bias_amp = j.value("class_bias_amp", 0.0);
  s.style.class_band_amp = j.value("class_band_amp", 0.0);
  s.style.class_style_shift = j.value("class_style_shift", 0);
  s.seed = j.at("seed").get<uint64_t>();
  return s;
}

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json domains = nlohmann::json::array();
  for (const auto& d : m.domains) domains.push_back(to_json(d));
  return {{"format_version", m.format_version},
          {"image", {{"c", m.geom.c}, {"h", m.geom.h}, {"w", m.geom.w}}},
          {"k_classes", m.geom.k_classes},
          {"r_lo", m.geom.r_lo},
          {"r_hi", m.geom.r_hi},
          {"domains", domains},
          {"n_per_domain", m.n_per_domain},
          {"class_weights", m.class_weights}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, const std::string& origin) {
  DatasetManifest m;
  try {
    m.format_version = j.at("format_version").get<uint32_t>();
    check(m.format_version == kDatasetVersion, errkind::kVersion,
          "unsupported dataset version " + std::to_string(m.format_version) + " in " + origin);
    m.geom.c = j.at("image").at("c").get<int>();
    m.geom.h = j.at("image").at("h").get<int>();
    m.geom.w = j.at("image").at("w").get<int>();
    m.geom.k_classes = j.at("k_classes").get<int>();
    m.geom.r_lo = j.at("r_lo").get<double>();
    m.geom.r_hi = j.at("r_hi").get<double>();
    for (const auto& d : j.at("domains")) m.domains.push_back(domain_spec_from_json(d));
    m.n_per_domain = j.at("n_per_domain").get<int>();
    m.class_weights = j.at("class_weights").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    fail(errkind::kCorrupt, "malformed manifest " + origin + ": " + e.what());
  }
  return m;
}

namespace detail {

inline int draw_class(const std::vector<double>& weights, int k_classes, Rng& rng) {
  if (weights.empty()) return static_cast<int>(rng.below(static_cast<uint64_t>(k_classes)));
  double total = 0.0;
  for (double w : weights) total += w;
  check(total > 0.0, errkind::kConfig, "class weights sum to zero");
  double u = rng.uniform() * total;
  for (size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(weights.size()) - 1;
}

}  // namespace detail

// Renders sample `index` of a domain from scratch. Pure in (spec, geom,
// weights, index), which is what makes datasets regenerable bit for bit.
inline Sample render_indexed_sample(const DomainSpec& spec, const DataGeom& geom,
                                    const std::vector<double>& weights, int index,
                                    RenderLayers* layers = nullptr) {
  Rng rng = Rng(spec.seed).fork(static_cast<uint64_t>(index));
  const int n_inst = 1 + static_cast<int>(rng.below(3));
  std::vector<int> ids;
  for (int i = 0; i < n_inst; ++i) ids.push_back(detail::draw_class(weights, geom.k_classes, rng));
  return render_sample(spec, ids, geom, rng, layers);
}

inline DatasetManifest generate_dataset(const std::vector<DomainSpec>& specs, int n_per_domain,
                                        const std::vector<double>& class_weights,
                                        const DataGeom& geom, const std::string& out_dir) {
  check(!specs.empty(), errkind::kContract, "need at least one domain spec");
  check(n_per_domain >= 1, errkind::kContract, "n_per_domain must be >= 1");
  check(class_weights.empty() ||
            class_weights.size() == static_cast<size_t>(geom.k_classes),
        errkind::kConfig, "class_weights must be empty or have k_classes entries");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  check(!ec, errkind::kIo, "cannot create " + out_dir + ": " + ec.message());

  DatasetManifest m;
  m.geom = geom;
  m.domains = specs;
  m.n_per_domain = n_per_domain;
  m.class_weights = class_weights;
  for (const auto& spec : specs)
    for (int i = 0; i < n_per_domain; ++i) {
      Sample s = render_indexed_sample(spec, geom, class_weights, i);
      const std::string path =
          (std::filesystem::path(out_dir) / sample_filename(spec.domain_id, i)).string();
      write_file(path, encode_sample(s));
    }
  write_text_file((std::filesystem::path(out_dir) / "manifest.json").string(),
                  to_json(m).dump(2) + "\n");
  return m;
}

// Lazily reads samples back; every read re-validates structure and checksum.
class Dataset {
 public:
  static Dataset open(const std::string& dir) {
    const std::string mpath = (std::filesystem::path(dir) / "manifest.json").string();
    if (!std::filesystem::exists(mpath))
      fail(errkind::kDatasetNotFound, "no manifest at " + mpath);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text_file(mpath));
    } catch (const nlohmann::json::exception& e) {
      fail(errkind::kCorrupt, "manifest " + mpath + " is not valid JSON: " + e.what());
    }
    Dataset d;
    d.dir_ = dir;
    d.manifest_ = manifest_from_json(j, mpath);
    for (const auto& spec : d.manifest_.domains)
      for (int i = 0; i < d.manifest_.n_per_domain; ++i) {
        const std::string p =
            (std::filesystem::path(dir) / sample_filename(spec.domain_id, i)).string();
        if (!std::filesystem::exists(p))
          fail(errkind::kDatasetNotFound, "manifest promises missing file " + p);
      }
    return d;
  }

  const DatasetManifest& manifest() const { return manifest_; }
  size_t size() const { return manifest_.domains.size() * manifest_.n_per_domain; }
  int n_domains() const { return static_cast<int>(manifest_.domains.size()); }

  // Samples are ordered domain-major: index = domain_pos * n_per_domain + i.
  Sample sample(size_t index) const {
    check(index < size(), errkind::kContract, "sample index out of range");
    const int n = manifest_.n_per_domain;
    const auto& spec = manifest_.domains[index / n];
    const std::string p =
        (std::filesystem::path(dir_) / sample_filename(spec.domain_id, static_cast<int>(index % n)))
            .string();
    Sample s = decode_sample(read_file(p), p);
    check(s.image.shape() ==
              Shape{manifest_.geom.c, manifest_.geom.h, manifest_.geom.w},
          errkind::kCorrupt, "sample extents disagree with manifest in " + p);
    return s;
  }

  int domain_pos(int domain_id) const {
    for (size_t i = 0; i < manifest_.domains.size(); ++i)
      if (manifest_.domains[i].domain_id == domain_id) return static_cast<int>(i);
    fail(errkind::kContract, "domain id not in dataset: " + std::to_string(domain_id));
  }

 private:
  std::string dir_;
  DatasetManifest manifest_;
};

struct Batch {
  Tensor images;  // [B,C,H,W]
  std::vector<std::vector<SampleBox>> boxes;
  std::vector<std::vector<int>> classes;
  std::vector<int> domain_ids;  // positional domain index, 0..K-1

  int size() const { return images.defined() ? images.extent(0) : 0; }
};

inline Batch assemble_batch(const Dataset& ds, const std::vector<size_t>& indices) {
  check(!indices.empty(), errkind::kContract, "empty batch");
  const auto& g = ds.manifest().geom;
  Batch b;
  b.images = Tensor::zeros({static_cast<int>(indices.size()), g.c, g.h, g.w});
  const size_t stride = static_cast<size_t>(g.c) * g.h * g.w;
  for (size_t k = 0; k < indices.size(); ++k) {
    Sample s = ds.sample(indices[k]);
    std::copy(s.image.data(), s.image.data() + stride, b.images.data() + k * stride);
    b.boxes.push_back(std::move(s.boxes));
    b.classes.push_back(std::move(s.classes));
    b.domain_ids.push_back(ds.domain_pos(s.domain_id));
  }
  return b;
}

// One shuffled pass over a dataset; the final short batch is kept.
class BatchStream {
 public:
  BatchStream(std::shared_ptr<const Dataset> ds, int batch_size, uint64_t shuffle_seed,
              bool shuffle = true)
      : ds_(std::move(ds)), batch_size_(batch_size) {
    check(batch_size >= 1, errkind::kContract, "batch size must be >= 1");
    order_.resize(ds_->size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (shuffle) {
      Rng rng(shuffle_seed);
      rng.shuffle(order_.begin(), order_.end());
    }
  }

  // Non-owning view over a dataset the caller keeps alive.
  BatchStream(const Dataset& ds, int batch_size, uint64_t shuffle_seed, bool shuffle = true)
      : BatchStream(std::shared_ptr<const Dataset>(std::shared_ptr<void>(), &ds), batch_size,
                    shuffle_seed, shuffle) {}

  std::optional<Batch> next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const size_t end = std::min(order_.size(), cursor_ + static_cast<size_t>(batch_size_));
    std::vector<size_t> idx(order_.begin() + static_cast<long>(cursor_),
                            order_.begin() + static_cast<long>(end));
    cursor_ = end;
    return assemble_batch(*ds_, idx);
  }

  const std::vector<size_t>& order() const { return order_; }

 private:
  std::shared_ptr<const Dataset> ds_;
  int batch_size_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
};

inline BatchStream load_dataset(const std::string& dir, int batch_size, uint64_t shuffle_seed) {
  return BatchStream(std::make_shared<const Dataset>(Dataset::open(dir)), batch_size,
                     shuffle_seed);
}

// Fraction of spectral energy inside the open (r_lo, r_hi) index band,
// channel-summed. Returns 0 when the image has no energy at all.
inline double band_energy_fraction(const Tensor& image, double r_lo, double r_hi) {
  Spectrum s = dct2(image);
  const double lo2 = r_lo * r_lo, hi2 = r_hi * r_hi;
  double inside = 0.0, total = 0.0;
  for (int c = 0; c < s.channels; ++c)
    for (int u = 0; u < s.h; ++u)
      for (int v = 0; v < s.w; ++v) {
        const double e = s.at(c, u, v) * s.at(c, u, v);
        total += e;
        const double r2 = static_cast<double>(u) * u + static_cast<double>(v) * v;
        if (r2 > lo2 && r2 < hi2) inside += e;
      }
  return total > 0.0 ? inside / total : 0.0;
}

}  // namespace mad
