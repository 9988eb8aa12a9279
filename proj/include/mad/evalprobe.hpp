#pragma once

// Evaluation helpers built on frozen models: checkpoint accuracy, the
// residual-capacity domain probe, an A-distance style separability proxy,
// view-divergence reports and config sweeps.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "mad/report.hpp"
#include "mad/trainer.hpp"

namespace mad {

// Accuracy of a saved model on a dataset split. The checkpoint's class arity
// must match the split's.
inline EpochEval evaluate_accuracy(const std::string& checkpoint_path,
                                   const Dataset& split, int batch_size = 16) {
  MadModel model = MadModel::load(checkpoint_path);
  check(model.config().k_classes == split.manifest().geom.k_classes,
        errkind::kConfig,
        "checkpoint k_classes " + std::to_string(model.config().k_classes) +
            " does not match the dataset's " +
            std::to_string(split.manifest().geom.k_classes));
  return evaluate_model(model, split, batch_size);
}

// ---------------------------------------------------------------------------
// Residual probe: measure how much domain signal survives in frozen features.

struct ProbeConfig {
  int epochs_per_phase = 20;
  double lr = 0.05;
  double momentum = 0.9;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  int k_domains = 0;
  double shallow_accuracy = 0.0;
  double deepened_accuracy = 0.0;
  std::vector<double> shallow_curve;   // mean cross-entropy per epoch
  std::vector<double> deepened_curve;
};

namespace detail {

inline double probe_accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const int n = logits.extent(0), k = logits.extent(1);
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const double* r = logits.data() + static_cast<std::size_t>(i) * k;
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (r[j] > r[best]) best = j;
    correct += (best == labels[static_cast<std::size_t>(i)]);
  }
  return static_cast<double>(correct) / std::max(n, 1);
}

// One probe training phase over cached features. `forward` maps a feature
// batch to logits using the phase's parameter group.
inline std::vector<double> probe_phase(
    const Tensor& feats, const std::vector<int>& labels, ParamGroup& params,
    const std::function<Tensor(Tape&, const Tensor&)>& forward,
    const ProbeConfig& cfg, Rng& rng) {
  const int n = feats.extent(0);
  std::vector<double> curve;
  for (int epoch = 0; epoch < cfg.epochs_per_phase; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[rng.below(static_cast<std::uint64_t>(i) + 1)]);

    double loss_sum = 0.0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int stop = std::min(n, start + cfg.batch_size);
      std::vector<int> idx(order.begin() + start, order.begin() + stop);
      std::vector<int> lab;
      for (int i : idx) lab.push_back(labels[static_cast<std::size_t>(i)]);
      Tape tape;
      Tensor xb = gather_rows(tape, feats, idx);
      Tensor loss = cross_entropy_rows(tape, forward(tape, xb), lab);
      loss_sum += loss.data()[0] * (stop - start);
      tape.backward(loss);
      sgd_update(params, cfg.lr, cfg.momentum);
    }
    curve.push_back(loss_sum / n);
  }
  return curve;
}

}  // namespace detail

// Probe over explicit features: phase 1 trains a linear domain classifier,
// phase 2 inserts a two-layer residual block (width 64, zero-initialized
// output so training resumes from the phase-1 optimum) and retrains
// everything. Accuracies are measured on the probe's own training features:
// this is a separability instrument, not a generalization test.
inline ProbeResult residual_probe_features(const Tensor& feats,
                                           const std::vector<int>& labels,
                                           int k_domains,
                                           const ProbeConfig& cfg = {}) {
  check(feats.shape().size() == 2, errkind::kShape,
        "residual_probe expects features [N, D]");
  check(k_domains >= 2, errkind::kContract,
        "residual_probe needs at least 2 domains");
  check(static_cast<std::size_t>(feats.extent(0)) == labels.size(),
        errkind::kShape, "residual_probe: one label per feature row");
  for (int l : labels)
    check(l >= 0 && l < k_domains, errkind::kContract,
          "residual_probe: domain label out of range");
  const int d = feats.extent(1);
  constexpr int kBlockWidth = 64;

  Rng rng(cfg.seed);
  Rng init_rng = rng.fork(1);
  Rng phase1_rng = rng.fork(2);
  Rng phase2_rng = rng.fork(3);

  ParamGroup params;
  Tensor w = params.add("w", Tensor::kaiming({d, k_domains}, d, init_rng));
  Tensor b = params.add("b", Tensor::zeros({k_domains}));

  ProbeResult out;
  out.k_domains = k_domains;

  auto shallow = [&](Tape& t, const Tensor& x) { return linear(t, x, w, b); };
  out.shallow_curve =
      detail::probe_phase(feats, labels, params, shallow, cfg, phase1_rng);
  {
    Tape tape;
    out.shallow_accuracy =
        detail::probe_accuracy(shallow(tape, feats), labels);
  }

  // residual block: h = x + relu(x w1 + b1) w2 + b2, with w2 = b2 = 0 so the
  // deepened probe starts exactly at the shallow optimum
  Tensor w1 = params.add("w1", Tensor::kaiming({d, kBlockWidth}, d, init_rng));
  Tensor b1 = params.add("b1", Tensor::zeros({kBlockWidth}));
  Tensor w2 = params.add("w2", Tensor::zeros({kBlockWidth, d}));
  Tensor b2 = params.add("b2", Tensor::zeros({d}));

  auto deepened = [&](Tape& t, const Tensor& x) {
    Tensor h = add(t, x, linear(t, relu(t, linear(t, x, w1, b1)), w2, b2));
    return linear(t, h, w, b);
  };
  out.deepened_curve =
      detail::probe_phase(feats, labels, params, deepened, cfg, phase2_rng);
  {
    Tape tape;
    out.deepened_accuracy =
        detail::probe_accuracy(deepened(tape, feats), labels);
  }
  return out;
}

// Image-level features for probing: globally pooled frozen extractor output.
inline Tensor pooled_image_features(const MadModel& model, const Dataset& ds,
                                    int batch_size = 16) {
  std::vector<double> rows;
  int d = 0;
  for (std::size_t start = 0; start < ds.size();
       start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start;
         i < std::min(ds.size(), start + static_cast<std::size_t>(batch_size));
         ++i)
      idx.push_back(i);
    Batch batch = assemble_batch(ds, idx);
    Tape tape;
    Tensor f = global_avg_pool(tape, model.extract_features(tape, batch.images));
    d = f.extent(1);
    rows.insert(rows.end(), f.data(), f.data() + f.numel());
  }
  Tensor out = Tensor::zeros({static_cast<int>(ds.size()), d});
  std::copy(rows.begin(), rows.end(), out.data());
  return out;
}

// Probe a model's frozen extractor against the dataset's domain labels.
inline ProbeResult residual_probe(const MadModel& model, const Dataset& ds,
                                  const ProbeConfig& cfg = {}) {
  const int k = static_cast<int>(ds.manifest().domains.size());
  check(k >= 2, errkind::kContract, "residual_probe needs at least 2 domains");
  Tensor feats = pooled_image_features(model, ds);
  std::vector<int> labels;  // samples are domain-major in the dataset
  for (std::size_t i = 0; i < ds.size(); ++i)
    labels.push_back(static_cast<int>(
        i / static_cast<std::size_t>(ds.manifest().n_per_domain)));
  return residual_probe_features(feats, labels, k, cfg);
}

// ---------------------------------------------------------------------------
// A-distance proxy: 2 (1 - 2 eps) for the held-out error eps of a linear
// domain discriminator. Group order does not matter: the two groups are
// canonically ordered by content hash before any randomness is drawn.

namespace detail {

inline std::uint64_t tensor_hash(const Tensor& t) {
  return fnv1a64(std::string(reinterpret_cast<const char*>(t.data()),
                             sizeof(double) * static_cast<std::size_t>(t.numel())));
}

}  // namespace detail

inline double a_distance_proxy(const Tensor& group_a, const Tensor& group_b,
                               std::uint64_t seed = 0) {
  check(group_a.shape().size() == 2 && group_b.shape().size() == 2,
        errkind::kShape, "a_distance_proxy expects [N, D] feature groups");
  check(group_a.extent(1) == group_b.extent(1), errkind::kShape,
        "a_distance_proxy: feature dims disagree");
  check(group_a.extent(0) >= 50 && group_b.extent(0) >= 50, errkind::kContract,
        "a_distance_proxy needs at least 50 samples per domain group");

  const Tensor* ga = &group_a;
  const Tensor* gb = &group_b;
  if (detail::tensor_hash(*ga) > detail::tensor_hash(*gb)) std::swap(ga, gb);

  const int d = ga->extent(1);
  Rng rng(seed);
  auto split = [&](const Tensor& g, std::uint64_t stream, std::vector<int>& train,
                   std::vector<int>& held) {
    Rng r = rng.fork(stream);
    const int n = g.extent(0);
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[r.below(static_cast<std::uint64_t>(i) + 1)]);
    for (int i = 0; i < n; ++i)
      (i < n / 2 ? train : held).push_back(order[static_cast<std::size_t>(i)]);
  };
  std::vector<int> tr_a, he_a, tr_b, he_b;
  split(*ga, 1, tr_a, he_a);
  split(*gb, 2, tr_b, he_b);

  auto stack = [&](const std::vector<int>& ia, const std::vector<int>& ib) {
    Tensor out = Tensor::zeros({static_cast<int>(ia.size() + ib.size()), d});
    double* p = out.data();
    for (int i : ia) {
      std::copy_n(ga->data() + static_cast<std::size_t>(i) * d, d, p);
      p += d;
    }
    for (int i : ib) {
      std::copy_n(gb->data() + static_cast<std::size_t>(i) * d, d, p);
      p += d;
    }
    return out;
  };
  Tensor train_x = stack(tr_a, tr_b);
  Tensor held_x = stack(he_a, he_b);
  std::vector<int> train_y(tr_a.size(), 0), held_y(he_a.size(), 0);
  train_y.insert(train_y.end(), tr_b.size(), 1);
  held_y.insert(held_y.end(), he_b.size(), 1);

  // standardize with train-half statistics
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0),
      sd(static_cast<std::size_t>(d), 0.0);
  const int nt = train_x.extent(0);
  for (int i = 0; i < nt; ++i)
    for (int j = 0; j < d; ++j)
      mean[static_cast<std::size_t>(j)] +=
          train_x.data()[static_cast<std::size_t>(i) * d + j];
  for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] /= nt;
  for (int i = 0; i < nt; ++i)
    for (int j = 0; j < d; ++j) {
      const double c = train_x.data()[static_cast<std::size_t>(i) * d + j] -
                       mean[static_cast<std::size_t>(j)];
      sd[static_cast<std::size_t>(j)] += c * c;
    }
  for (int j = 0; j < d; ++j)
    sd[static_cast<std::size_t>(j)] =
        std::max(std::sqrt(sd[static_cast<std::size_t>(j)] / nt), 1e-8);
  auto standardize = [&](Tensor& x) {
    for (int i = 0; i < x.extent(0); ++i)
      for (int j = 0; j < d; ++j) {
        double& v = x.data()[static_cast<std::size_t>(i) * d + j];
        v = (v - mean[static_cast<std::size_t>(j)]) / sd[static_cast<std::size_t>(j)];
      }
  };
  standardize(train_x);
  standardize(held_x);

  ParamGroup params;
  Tensor w = params.add("w", Tensor::zeros({d, 2}));
  Tensor b = params.add("b", Tensor::zeros({2}));
  for (int step = 0; step < 300; ++step) {
    Tape tape;
    Tensor loss = cross_entropy_rows(tape, linear(tape, train_x, w, b), train_y);
    tape.backward(loss);
    sgd_update(params, 0.5, 0.9);
  }

  Tape tape;
  Tensor logits = linear(tape, held_x, w, b);
  const int nh = held_x.extent(0);
  int errors = 0;
  for (int i = 0; i < nh; ++i) {
    const double* r = logits.data() + static_cast<std::size_t>(i) * 2;
    errors += ((r[1] > r[0] ? 1 : 0) != held_y[static_cast<std::size_t>(i)]);
  }
  const double eps = static_cast<double>(errors) / std::max(nh, 1);
  return std::clamp(2.0 * (1.0 - 2.0 * eps), 0.0, 2.0);
}

// ---------------------------------------------------------------------------
// View divergence: pairwise distances between branch latents plus a 2-D
// principal-component projection of pooled latents for plotting.

struct ViewPoint {
  int view = 0;
  int index = 0;
  double x = 0.0, y = 0.0;
};

struct ViewDivergence {
  std::vector<std::vector<double>> image_dist;     // M x M, empty if level off
  std::vector<std::vector<double>> instance_dist;  // M x M, empty if level off
  std::vector<ViewPoint> image_points;
  std::vector<ViewPoint> instance_points;
  std::string notice;  // set when M < 2
};

namespace detail {

// Jacobi eigensolver for a small dense symmetric matrix (row-major d x d).
// Returns eigenvalues; `vectors` receives eigenvectors as columns.
inline std::vector<double> jacobi_eigen(std::vector<double> a, int d,
                                        std::vector<double>& vectors) {
  vectors.assign(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) vectors[static_cast<std::size_t>(i) * d + i] = 1.0;
  auto at = [&](std::vector<double>& m, int r, int c) -> double& {
    return m[static_cast<std::size_t>(r) * d + c];
  };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < d; ++p)
      for (int q = p + 1; q < d; ++q) off += at(a, p, q) * at(a, p, q);
    if (off < 1e-24) break;
    for (int p = 0; p < d; ++p)
      for (int q = p + 1; q < d; ++q) {
        const double apq = at(a, p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (at(a, q, q) - at(a, p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < d; ++k) {
          const double akp = at(a, k, p), akq = at(a, k, q);
          at(a, k, p) = c * akp - s * akq;
          at(a, k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < d; ++k) {
          const double apk = at(a, p, k), aqk = at(a, q, k);
          at(a, p, k) = c * apk - s * aqk;
          at(a, q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < d; ++k) {
          const double vkp = at(vectors, k, p), vkq = at(vectors, k, q);
          at(vectors, k, p) = c * vkp - s * vkq;
          at(vectors, k, q) = s * vkp + c * vkq;
        }
      }
  }
  std::vector<double> eig(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) eig[static_cast<std::size_t>(i)] = at(a, i, i);
  return eig;
}

// Top-2 principal directions of the row set; sign fixed by making the
// largest-magnitude loading positive.
inline std::array<std::vector<double>, 2> top2_components(
    const std::vector<std::vector<double>>& rows) {
  const int d = static_cast<int>(rows[0].size());
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (const auto& r : rows)
    for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += r[static_cast<std::size_t>(j)];
  for (double& m : mean) m /= static_cast<double>(rows.size());

  std::vector<double> cov(static_cast<std::size_t>(d) * d, 0.0);
  for (const auto& r : rows)
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        cov[static_cast<std::size_t>(i) * d + j] +=
            (r[static_cast<std::size_t>(i)] - mean[static_cast<std::size_t>(i)]) *
            (r[static_cast<std::size_t>(j)] - mean[static_cast<std::size_t>(j)]);
  const double denom = std::max<double>(static_cast<double>(rows.size()) - 1.0, 1.0);
  for (double& v : cov) v /= denom;

  std::vector<double> vectors;
  const auto eig = jacobi_eigen(cov, d, vectors);
  std::array<int, 2> best{0, 0};
  for (int i = 1; i < d; ++i)
    if (eig[static_cast<std::size_t>(i)] > eig[static_cast<std::size_t>(best[0])])
      best[0] = i;
  best[1] = best[0] == 0 ? 1 : 0;
  for (int i = 0; i < d; ++i)
    if (i != best[0] &&
        eig[static_cast<std::size_t>(i)] > eig[static_cast<std::size_t>(best[1])])
      best[1] = i;

  std::array<std::vector<double>, 2> out;
  for (int k = 0; k < 2; ++k) {
    out[static_cast<std::size_t>(k)].resize(static_cast<std::size_t>(d));
    int arg = 0;
    for (int i = 0; i < d; ++i) {
      out[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)] =
          vectors[static_cast<std::size_t>(i) * d + best[static_cast<std::size_t>(k)]];
      if (std::abs(out[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)]) >
          std::abs(out[static_cast<std::size_t>(k)][static_cast<std::size_t>(arg)]))
        arg = i;
    }
    if (out[static_cast<std::size_t>(k)][static_cast<std::size_t>(arg)] < 0)
      for (double& v : out[static_cast<std::size_t>(k)]) v = -v;
  }
  return out;
}

// Mean squared distance between two latent stacks, matching the view-spread
// norm: sum over latent dims, mean over rows.
inline double mean_sqdist(const Tensor& a, const Tensor& b) {
  double sum = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double dlt = a.data()[i] - b.data()[i];
    sum += dlt * dlt;
  }
  return sum / static_cast<double>(a.extent(0));
}

inline std::vector<std::vector<double>> pair_matrix(
    const std::vector<Tensor>& latents) {
  const std::size_t m = latents.size();
  std::vector<std::vector<double>> out(m, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      const double v = mean_sqdist(latents[i], latents[j]);
      out[i][j] = v;
      out[j][i] = v;
    }
  return out;
}

inline std::vector<ViewPoint> project_points(
    const std::vector<std::vector<std::vector<double>>>& per_view_rows) {
  std::vector<std::vector<double>> all;
  for (const auto& view : per_view_rows)
    for (const auto& r : view) all.push_back(r);
  const auto pcs = top2_components(all);
  std::vector<ViewPoint> pts;
  for (std::size_t v = 0; v < per_view_rows.size(); ++v)
    for (std::size_t i = 0; i < per_view_rows[v].size(); ++i) {
      ViewPoint p;
      p.view = static_cast<int>(v);
      p.index = static_cast<int>(i);
      for (std::size_t j = 0; j < per_view_rows[v][i].size(); ++j) {
        p.x += per_view_rows[v][i][j] * pcs[0][j];
        p.y += per_view_rows[v][i][j] * pcs[1][j];
      }
      pts.push_back(p);
    }
  return pts;
}

// Rows for projection: one vector per sample per view. Image latents are
// spatially averaged; instance latents are taken as-is.
inline std::vector<std::vector<double>> latent_rows(const Tensor& z) {
  std::vector<std::vector<double>> rows;
  if (z.shape().size() == 4) {
    const int n = z.extent(0), c = z.extent(1);
    const std::int64_t plane = z.numel() / (static_cast<std::int64_t>(n) * c);
    for (int i = 0; i < n; ++i) {
      std::vector<double> r(static_cast<std::size_t>(c), 0.0);
      for (int ch = 0; ch < c; ++ch) {
        const double* p = z.data() + (static_cast<std::int64_t>(i) * c + ch) * plane;
        for (std::int64_t k = 0; k < plane; ++k) r[static_cast<std::size_t>(ch)] += p[k];
        r[static_cast<std::size_t>(ch)] /= static_cast<double>(plane);
      }
      rows.push_back(std::move(r));
    }
  } else {
    const int n = z.extent(0), c = z.extent(1);
    for (int i = 0; i < n; ++i)
      rows.push_back(std::vector<double>(
          z.data() + static_cast<std::size_t>(i) * c,
          z.data() + static_cast<std::size_t>(i) * c + c));
  }
  return rows;
}

}  // namespace detail

inline ViewDivergence view_divergence_report(const MadModel& model,
                                             const Batch& batch) {
  ViewDivergence out;
  const ModelConfig& mc = model.config();
  if (mc.m_views < 2) {
    out.notice = "m_views < 2: no view pairs to compare";
    return out;
  }

  Tape tape;
  Tensor f = model.extract_features(tape, batch.images);
  if (mc.image_views) {
    std::vector<Tensor> latents;
    std::vector<std::vector<std::vector<double>>> rows;
    for (int m = 0; m < mc.m_views; ++m) {
      Tensor z = model.branch_forward(tape, Level::kImage, f, m, 0.0).latent;
      rows.push_back(detail::latent_rows(z));
      latents.push_back(std::move(z));
    }
    out.image_dist = detail::pair_matrix(latents);
    out.image_points = detail::project_points(rows);
  }
  if (mc.instance_views) {
    Tensor inst = model.pool_instance_features(tape, f, batch.boxes);
    std::vector<Tensor> latents;
    std::vector<std::vector<std::vector<double>>> rows;
    for (int m = 0; m < mc.m_views; ++m) {
      Tensor z = model.branch_forward(tape, Level::kInstance, inst, m, 0.0).latent;
      rows.push_back(detail::latent_rows(z));
      latents.push_back(std::move(z));
    }
    out.instance_dist = detail::pair_matrix(latents);
    out.instance_points = detail::project_points(rows);
  }
  return out;
}

inline double mean_offdiagonal(const std::vector<std::vector<double>>& m) {
  check(m.size() >= 2, errkind::kContract, "mean_offdiagonal needs a 2x2 matrix");
  double sum = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j)
      if (i != j) {
        sum += m[i][j];
        ++count;
      }
  return sum / count;
}

// ---------------------------------------------------------------------------
// Config sweeps: a grid of named config overrides, each run over several
// seeds. Cells run through a launcher so the CLI can fan out to child
// processes while tests stay in-process.

struct SweepCellSpec {
  std::string name;
  nlohmann::json overrides;
};

struct SweepRun {
  std::string cell;
  std::uint64_t seed = 0;
  bool ok = false;
  double target_acc = 0.0;
  std::string run_dir;
  std::string error;
};

struct SweepCell {
  std::string name;
  nlohmann::json overrides;
  std::vector<std::uint64_t> seeds;
  double mean = 0.0;
  double stdev = 0.0;  // sample standard deviation over successful seeds
  int n_ok = 0;
};

struct SweepTable {
  std::vector<SweepCell> cells;
  std::vector<SweepRun> runs;
};

// Launches one training run for config `cfg` writing results to `run_dir`.
// Returns 0 on success.
using SweepLauncher = std::function<int(
    const nlohmann::json& cfg, const std::string& data_root,
    const std::string& run_dir)>;

inline SweepLauncher in_process_launcher() {
  return [](const nlohmann::json& cfg, const std::string& data_root,
            const std::string& run_dir) {
    train_run(train_config_from_json(cfg), data_root, run_dir);
    return 0;
  };
}

// Mean held-out accuracy over target domains: every test-split domain that is
// not a training source. Falls back to the overall accuracy when the run
// trained on all domains.
inline double target_accuracy_from_report(const nlohmann::json& report) {
  const auto& ev = report.at("final_eval");
  std::vector<int> sources;
  if (report.contains("config") && report["config"].contains("source_domains"))
    sources = report["config"]["source_domains"].get<std::vector<int>>();
  if (sources.empty()) return ev.at("overall").get<double>();
  double sum = 0.0;
  int count = 0;
  for (const auto& [key, acc] : ev.at("per_domain").items()) {
    const int dom = std::stoi(key);
    if (std::find(sources.begin(), sources.end(), dom) == sources.end()) {
      sum += acc.get<double>();
      ++count;
    }
  }
  check(count > 0, errkind::kContract,
        "no target domains in the held-out split");
  return sum / count;
}

// Component-ablation cells mirroring the usual build-up: nothing, frequency
// augmentation only, plus instance views, plus image views and consistency.
inline std::vector<SweepCellSpec> ablation_grid() {
  auto base = [](bool scg, bool ins, bool img, bool cst) {
    nlohmann::json j;
    j["scg"] = scg;
    j["instance_views"] = ins;
    j["image_views"] = img;
    j["consistency"] = cst;
    return j;
  };
  return {
      {"none", base(false, false, false, false)},
      {"scg", base(true, false, false, false)},
      {"scg_ins", base(true, true, false, false)},
      {"scg_ins_img_cst", base(true, true, true, true)},
  };
}

inline std::vector<SweepCellSpec> m_grid(const std::vector<int>& ms) {
  std::vector<SweepCellSpec> out;
  for (int m : ms) {
    nlohmann::json j;
    j["m_views"] = m;
    if (m == 0) {
      j["image_views"] = false;
      j["instance_views"] = false;
      j["consistency"] = false;
    }
    out.push_back({"m" + std::to_string(m), j});
  }
  return out;
}

inline std::vector<SweepCellSpec> lambda_grid(const std::vector<double>& ls) {
  std::vector<SweepCellSpec> out;
  for (double l : ls) {
    nlohmann::json j;
    j["lambda"] = l;
    out.push_back({"lambda" + fmt_num(l), j});
  }
  return out;
}

inline nlohmann::json sweep_table_to_json(const SweepTable& table) {
  nlohmann::json j;
  j["cells"] = nlohmann::json::array();
  for (const auto& c : table.cells) {
    nlohmann::json cj;
    cj["name"] = c.name;
    cj["overrides"] = c.overrides;
    cj["seeds"] = c.seeds;
    cj["mean"] = c.mean;
    cj["std"] = c.stdev;
    cj["n_ok"] = c.n_ok;
    j["cells"].push_back(cj);
  }
  j["runs"] = nlohmann::json::array();
  for (const auto& r : table.runs) {
    nlohmann::json rj;
    rj["cell"] = r.cell;
    rj["seed"] = r.seed;
    rj["ok"] = r.ok;
    rj["target_acc"] = r.target_acc;
    rj["run_dir"] = r.run_dir;
    rj["error"] = r.error;
    j["runs"].push_back(rj);
  }
  return j;
}

namespace detail {

inline std::string csv_safe(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r') c = ';';
  return s;
}

// CSV fields stay comma-free (messages are sanitized); the full structure
// including overrides lives in sweep_table.json.
inline void write_sweep_csvs(const SweepTable& table, const std::string& out_root) {
  std::ostringstream runs;
  runs << "cell,seed,ok,target_acc,run_dir,error\n";
  for (const auto& r : table.runs)
    runs << r.cell << "," << r.seed << "," << (r.ok ? 1 : 0) << ","
         << fmt_num(r.target_acc) << "," << csv_safe(r.run_dir) << ","
         << csv_safe(r.error) << "\n";
  write_text_file(out_root + "/sweep.csv", runs.str());

  std::ostringstream cells;
  cells << "cell,m_views,lambda,n_ok,mean,std,seeds\n";
  for (const auto& c : table.cells) {
    cells << c.name << ",";
    if (c.overrides.contains("m_views"))
      cells << c.overrides["m_views"].get<int>();
    cells << ",";
    if (c.overrides.contains("lambda"))
      cells << fmt_num(c.overrides["lambda"].get<double>());
    cells << "," << c.n_ok << "," << fmt_num(c.mean) << "," << fmt_num(c.stdev)
          << ",";
    for (std::size_t i = 0; i < c.seeds.size(); ++i)
      cells << (i ? " " : "") << c.seeds[i];
    cells << "\n";
  }
  write_text_file(out_root + "/sweep_summary.csv", cells.str());
  write_text_file(out_root + "/sweep_table.json",
                  sweep_table_to_json(table).dump(2) + "\n");
}

inline void write_sweep_plot(const SweepTable& table, const std::string& out_root) {
  Series s;
  s.label = "target accuracy";
  for (std::size_t i = 0; i < table.cells.size(); ++i) {
    if (table.cells[i].n_ok == 0) continue;
    s.x.push_back(static_cast<double>(i));
    s.y.push_back(table.cells[i].mean);
    s.err.push_back(table.cells[i].stdev);
  }
  if (s.x.empty()) return;
  std::string labels;
  for (std::size_t i = 0; i < table.cells.size(); ++i)
    labels += (i ? "  " : "") + std::to_string(i) + "=" + table.cells[i].name;
  write_text_file(out_root + "/sweep_plot.svg",
             line_plot("sweep: " + labels, "cell", "target accuracy", {s}));
}

}  // namespace detail

// Runs grid x seeds training jobs under out_root/<cell>/seed<k>/, collects
// target accuracies, and writes sweep.csv, sweep_summary.csv and
// sweep_plot.svg. Failed cells are recorded and the sweep continues.
inline SweepTable run_sweep(const nlohmann::json& base_cfg,
                            const std::vector<SweepCellSpec>& grid,
                            const std::vector<std::uint64_t>& seeds,
                            const std::string& data_root,
                            const std::string& out_root, int jobs,
                            const SweepLauncher& launch) {
  check(!grid.empty(), errkind::kContract, "run_sweep: empty grid");
  check(!seeds.empty(), errkind::kContract, "run_sweep: no seeds");
  check(jobs >= 1, errkind::kContract, "run_sweep: jobs must be >= 1");
  std::filesystem::create_directories(out_root);

  struct Job {
    std::size_t cell;
    std::uint64_t seed;
    nlohmann::json cfg;
    std::string run_dir;
  };
  std::vector<Job> jobs_list;
  for (std::size_t ci = 0; ci < grid.size(); ++ci)
    for (std::uint64_t seed : seeds) {
      nlohmann::json cfg = base_cfg;
      for (const auto& [k, v] : grid[ci].overrides.items()) cfg[k] = v;
      cfg["seed"] = seed;
      train_config_from_json(cfg);  // validate before launching
      jobs_list.push_back({ci, seed, cfg,
                           out_root + "/" + grid[ci].name + "/seed" +
                               std::to_string(seed)});
    }

  std::vector<SweepRun> results(jobs_list.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs_list.size()) return;
      const Job& job = jobs_list[i];
      SweepRun r;
      r.cell = grid[job.cell].name;
      r.seed = job.seed;
      r.run_dir = job.run_dir;
      try {
        std::filesystem::create_directories(job.run_dir);
        write_text_file(job.run_dir + "/cfg.json", job.cfg.dump(2) + "\n");
        const int rc = launch(job.cfg, data_root, job.run_dir);
        check(rc == 0, errkind::kIo,
              "launcher exited with code " + std::to_string(rc));
        const auto report = nlohmann::json::parse(
            read_text_file(job.run_dir + "/report.json"));
        r.target_acc = target_accuracy_from_report(report);
        r.ok = true;
      } catch (const std::exception& e) {
        r.ok = false;
        r.error = e.what();
      }
      results[i] = std::move(r);
    }
  };
  {
    std::vector<std::thread> pool;
    const int n_threads = std::min<int>(jobs, static_cast<int>(jobs_list.size()));
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  SweepTable table;
  table.runs = std::move(results);
  for (std::size_t ci = 0; ci < grid.size(); ++ci) {
    SweepCell cell;
    cell.name = grid[ci].name;
    cell.overrides = grid[ci].overrides;
    std::vector<double> accs;
    for (const auto& r : table.runs)
      if (r.cell == cell.name) {
        cell.seeds.push_back(r.seed);
        if (r.ok) accs.push_back(r.target_acc);
      }
    cell.n_ok = static_cast<int>(accs.size());
    if (!accs.empty()) {
      for (double a : accs) cell.mean += a;
      cell.mean /= static_cast<double>(accs.size());
      if (accs.size() > 1) {
        for (double a : accs)
          cell.stdev += (a - cell.mean) * (a - cell.mean);
        cell.stdev = std::sqrt(cell.stdev / (static_cast<double>(accs.size()) - 1.0));
      }
    }
    table.cells.push_back(std::move(cell));
  }

  detail::write_sweep_csvs(table, out_root);
  detail::write_sweep_plot(table, out_root);
  return table;
}

}  // namespace mad
