#pragma once

// Loss terms for multi-view adversarial training and their composition.
// All functions are pure tape ops; reductions are means over the batch
// (instances count as the batch at the instance level).

#include <string>
#include <vector>

#include "mad/common.hpp"
#include "mad/tensor.hpp"

namespace mad {

enum class MvVariant { kRaw, kHinge };

inline const char* mv_variant_name(MvVariant v) {
  return v == MvVariant::kRaw ? "raw" : "hinge";
}
inline MvVariant mv_variant_from_name(const std::string& s) {
  if (s == "raw") return MvVariant::kRaw;
  if (s == "hinge") return MvVariant::kHinge;
  fail(errkind::kConfig, "unknown view-spread variant '" + s + "'");
}

// The raw spread objective is unbounded below, so the hinge form is the
// default: it only acts while squared distances are under tau.
struct MvConfig {
  MvVariant variant = MvVariant::kHinge;
  double tau = 4.0;
};

// (1/M) * sum_m MSE(features, recons[m]).  Callers pick the target's tape
// connectivity; training passes a detached feature copy.
inline Tensor loss_rc(Tape& t, const Tensor& features,
                      const std::vector<Tensor>& recons) {
  check(!recons.empty(), errkind::kContract, "loss_rc: no branches");
  Tensor s = mse(t, recons[0], features);
  for (std::size_t m = 1; m < recons.size(); ++m)
    s = add(t, s, mse(t, recons[m], features));
  return mul_scalar(t, s, 1.0 / static_cast<double>(recons.size()));
}

// Mean over branches of the domain cross-entropy.  Rank-4 logits are
// per-pixel maps with one label per image; rank-2 logits are per-row.
inline Tensor loss_dc(Tape& t, const std::vector<Tensor>& logits,
                      const std::vector<int>& domains) {
  check(!logits.empty(), errkind::kContract, "loss_dc: no branches");
  auto one = [&](const Tensor& l) {
    return l.shape().size() == 4 ? cross_entropy_map(t, l, domains)
                                 : cross_entropy_rows(t, l, domains);
  };
  Tensor s = one(logits[0]);
  for (std::size_t m = 1; m < logits.size(); ++m) s = add(t, s, one(logits[m]));
  return mul_scalar(t, s, 1.0 / static_cast<double>(logits.size()));
}

namespace detail {

// Per-sample squared distance between two same-shape latents, [B].
inline Tensor pair_sqdist(Tape& t, const Tensor& a, const Tensor& b) {
  Tensor d = sub(t, a, b);
  Tensor sq = mul(t, d, d);
  const int batch = a.extent(0);
  const int rest = static_cast<int>(a.numel() / batch);
  return row_sums(t, reshape(t, sq, {batch, rest}));
}

}  // namespace detail

// View-spread loss over M latents (any rank; leading dim is the batch).
//   raw:   -sum_{i != j} d2(i,j) / (M^2 - M), batch-averaged
//   hinge:  sum_{i != j} max(0, tau - d2(i,j)) / (M^2 - M), batch-averaged
// M = 1 has no pairs and scores 0 by convention.
inline Tensor loss_mv(Tape& t, const std::vector<Tensor>& latents,
                      const MvConfig& cfg = {}) {
  const int m = static_cast<int>(latents.size());
  check(m >= 1, errkind::kContract, "loss_mv: no latents");
  if (m == 1) return Tensor::zeros({1});
  for (int i = 1; i < m; ++i)
    check(latents[i].shape() == latents[0].shape(), errkind::kShape,
          "loss_mv: latent shape mismatch across branches");
  check(cfg.variant != MvVariant::kHinge || cfg.tau > 0.0, errkind::kConfig,
        "loss_mv: hinge tau must be positive");

  Tensor acc;  // [B]
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      if (i == j) continue;
      Tensor d2 = detail::pair_sqdist(t, latents[i], latents[j]);
      Tensor term =
          cfg.variant == MvVariant::kRaw
              ? mul_scalar(t, d2, -1.0)
              : relu(t, add_scalar(t, mul_scalar(t, d2, -1.0), cfg.tau));
      acc = acc.defined() ? add(t, acc, term) : term;
    }
  Tensor scaled = mul_scalar(t, acc, 1.0 / static_cast<double>(m * (m - 1)));
  return mean_all(t, scaled);
}

// Consistency between image-level and instance-level domain predictions.
// img_probs[i] is a post-softmax map [B, K, h, w]; ins_probs[j] is post-
// softmax rows [N, K]; instance_sample maps each instance row to its image.
// Each instance contributes the l2 gap to the pixel-mean prediction of its
// own image, summed over branch pairs (all-to-all, or i==j when paired_only)
// and averaged over instances.
inline Tensor loss_cst(Tape& t, const std::vector<Tensor>& img_probs,
                       const std::vector<Tensor>& ins_probs,
                       const std::vector<int>& instance_sample,
                       bool paired_only = false) {
  check(!img_probs.empty() && !ins_probs.empty(), errkind::kContract,
        "loss_cst: need branches at both levels");
  check(!instance_sample.empty(), errkind::kContract, "loss_cst: no instances");
  if (paired_only)
    check(img_probs.size() == ins_probs.size(), errkind::kContract,
          "loss_cst: paired_only requires equal branch counts");

  std::vector<Tensor> img_means;  // [B, K] pixel means per image branch
  img_means.reserve(img_probs.size());
  for (const Tensor& p : img_probs) {
    check(p.shape().size() == 4, errkind::kShape,
          "loss_cst: image predictions must be [B,K,h,w]");
    check(p.extent(2) * p.extent(3) > 0, errkind::kContract,
          "loss_cst: empty prediction map");
    img_means.push_back(global_avg_pool(t, p));
  }

  Tensor acc;  // [N]
  for (std::size_t i = 0; i < img_probs.size(); ++i) {
    Tensor per_instance = gather_rows(t, img_means[i], instance_sample);
    for (std::size_t j = 0; j < ins_probs.size(); ++j) {
      if (paired_only && i != j) continue;
      Tensor d = sub(t, per_instance, ins_probs[j]);
      Tensor norms = sqrt_zgrad(t, row_sums(t, mul(t, d, d)));
      acc = acc.defined() ? add(t, acc, norms) : norms;
    }
  }
  return mean_all(t, acc);
}

// Exact sums; kept as tape ops so the composition identities hold bitwise
// against the logged component values.
inline Tensor loss_mvdc(Tape& t, const Tensor& l_rc, const Tensor& l_dc,
                        const Tensor& l_mv) {
  return add(t, add(t, l_rc, l_dc), l_mv);
}

inline Tensor loss_mad(Tape& t, const Tensor& l_det, const Tensor& l_mvdc_img,
                       const Tensor& l_mvdc_ins, const Tensor& l_cst,
                       double lambda) {
  check(lambda >= 0.0, errkind::kContract, "loss_mad: lambda must be >= 0");
  Tensor s = add(t, add(t, l_mvdc_img, l_mvdc_ins), l_cst);
  return add(t, l_det, mul_scalar(t, s, lambda));
}

struct LossBreakdown {
  double l_det = 0.0;
  double l_rc_img = 0.0, l_rc_ins = 0.0;
  double l_dc_img = 0.0, l_dc_ins = 0.0;
  double l_mv_img = 0.0, l_mv_ins = 0.0;
  double l_cst = 0.0;
  double l_mvdc_img = 0.0, l_mvdc_ins = 0.0;
  double l_mad = 0.0;

  // Composition identities, required to hold bitwise on every logged step.
  bool consistent(double lambda) const {
    return l_mvdc_img == l_rc_img + l_dc_img + l_mv_img &&
           l_mvdc_ins == l_rc_ins + l_dc_ins + l_mv_ins &&
           l_mad == l_det + lambda * ((l_mvdc_img + l_mvdc_ins) + l_cst);
  }
};

inline const std::vector<std::string>& loss_csv_fields() {
  static const std::vector<std::string> fields = {
      "l_det",    "l_rc_img",   "l_rc_ins",   "l_dc_img", "l_dc_ins", "l_mv_img",
      "l_mv_ins", "l_cst",      "l_mvdc_img", "l_mvdc_ins", "l_mad"};
  return fields;
}

inline std::vector<double> loss_csv_values(const LossBreakdown& b) {
  return {b.l_det,    b.l_rc_img,   b.l_rc_ins,   b.l_dc_img, b.l_dc_ins,
          b.l_mv_img, b.l_mv_ins,   b.l_cst,      b.l_mvdc_img,
          b.l_mvdc_ins, b.l_mad};
}

}  // namespace mad
