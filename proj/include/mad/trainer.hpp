#pragma once

// Deterministic minimax training loop: frequency augmentation, forward over
// all branches, one backward pass, SGD per parameter group.
//
// The trade-off weight lambda enters the optimization only through the
// reversal coefficient (mu_eff = mu * lambda).  A single backward over the
// unscaled sum of terms then gives every group exactly its own objective:
//   extractor         task - mu_eff * domain terms
//   encoders          domain + reconstruction + view-spread
//   decoders          reconstruction
//   domain classifiers domain + consistency
//   task head         task
// With lambda = 0 the classifiers keep training (the inner minimization)
// while the extractor receives no adversarial gradient.  The logged l_mad
// is composed separately with lambda for reporting.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mad/common.hpp"
#include "mad/ioutil.hpp"
#include "mad/losses.hpp"
#include "mad/model.hpp"
#include "mad/rng.hpp"
#include "mad/spectral.hpp"
#include "mad/synthgen.hpp"
#include "mad/tensor.hpp"

namespace mad {

struct TrainConfig {
  int epochs = 10;
  double lr = 0.002;
  int lr_drop_epoch = 7;
  double lr_drop_factor = 0.1;
  double momentum = 0.9;
  int batch_size = 16;
  double lambda = 0.1;
  double mu = 1.0;
  int m_views = 3;

  bool scg = true;
  ScgConfig scg_cfg;
  double scg_fraction = 0.5;  // share of each batch replaced by augmentations
  bool image_views = true;
  bool instance_views = true;
  bool autoencoders = true;  // reconstruction + view-spread terms
  bool consistency = true;
  bool cst_paired_only = false;
  MvConfig mv;

  std::uint64_t seed = 0;
  std::vector<int> source_domains;  // empty = every domain in the train set
};

inline double lr_schedule(int epoch, const TrainConfig& cfg) {
  check(epoch >= 0, errkind::kContract, "lr_schedule: negative epoch");
  return epoch < cfg.lr_drop_epoch ? cfg.lr : cfg.lr * cfg.lr_drop_factor;
}

// Named presets for the comparison methods; "custom" leaves fields as given.
//   erm   plain task training, no branches, no augmentation
//   dann  single adversarial branch per level, no autoencoders
//   mad   the full method
inline void apply_method(TrainConfig& cfg, const std::string& method) {
  if (method == "custom") return;
  if (method == "erm") {
    cfg.scg = false;
    cfg.image_views = false;
    cfg.instance_views = false;
    cfg.autoencoders = false;
    cfg.consistency = false;
    return;
  }
  if (method == "dann") {
    cfg.scg = false;
    cfg.image_views = true;
    cfg.instance_views = true;
    cfg.autoencoders = false;
    cfg.consistency = false;
    cfg.m_views = 1;
    return;
  }
  if (method == "mad") {
    cfg.scg = true;
    cfg.image_views = true;
    cfg.instance_views = true;
    cfg.autoencoders = true;
    cfg.consistency = true;
    return;
  }
  fail(errkind::kConfig, "unknown method '" + method + "'");
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["epochs"] = c.epochs;
  j["lr"] = c.lr;
  j["lr_drop_epoch"] = c.lr_drop_epoch;
  j["lr_drop_factor"] = c.lr_drop_factor;
  j["momentum"] = c.momentum;
  j["batch_size"] = c.batch_size;
  j["lambda"] = c.lambda;
  j["mu"] = c.mu;
  j["m_views"] = c.m_views;
  j["scg"] = c.scg;
  j["scg_cfg"] = {{"r_lo", c.scg_cfg.r_lo},
                  {"r_hi", c.scg_cfg.r_hi},
                  {"mode", scg_mode_name(c.scg_cfg.mode)},
                  {"sigma", c.scg_cfg.sigma}};
  j["scg_fraction"] = c.scg_fraction;
  j["image_views"] = c.image_views;
  j["instance_views"] = c.instance_views;
  j["autoencoders"] = c.autoencoders;
  j["consistency"] = c.consistency;
  j["cst_paired_only"] = c.cst_paired_only;
  j["mv"] = {{"variant", mv_variant_name(c.mv.variant)}, {"tau", c.mv.tau}};
  j["seed"] = c.seed;
  j["source_domains"] = c.source_domains;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("method")) apply_method(c, j["method"].get<std::string>());
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.lr_drop_epoch = j.value("lr_drop_epoch", c.lr_drop_epoch);
  c.lr_drop_factor = j.value("lr_drop_factor", c.lr_drop_factor);
  c.momentum = j.value("momentum", c.momentum);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lambda = j.value("lambda", c.lambda);
  c.mu = j.value("mu", c.mu);
  c.m_views = j.value("m_views", c.m_views);
  c.scg = j.value("scg", c.scg);
  if (j.contains("scg_cfg")) {
    const nlohmann::json& s = j["scg_cfg"];
    c.scg_cfg.r_lo = s.value("r_lo", c.scg_cfg.r_lo);
    c.scg_cfg.r_hi = s.value("r_hi", c.scg_cfg.r_hi);
    if (s.contains("mode")) c.scg_cfg.mode = scg_mode_from_name(s["mode"]);
    c.scg_cfg.sigma = s.value("sigma", c.scg_cfg.sigma);
  }
  c.scg_fraction = j.value("scg_fraction", c.scg_fraction);
  c.image_views = j.value("image_views", c.image_views);
  c.instance_views = j.value("instance_views", c.instance_views);
  c.autoencoders = j.value("autoencoders", c.autoencoders);
  c.consistency = j.value("consistency", c.consistency);
  c.cst_paired_only = j.value("cst_paired_only", c.cst_paired_only);
  if (j.contains("mv")) {
    const nlohmann::json& m = j["mv"];
    if (m.contains("variant")) c.mv.variant = mv_variant_from_name(m["variant"]);
    c.mv.tau = m.value("tau", c.mv.tau);
  }
  c.seed = j.value("seed", c.seed);
  if (j.contains("source_domains"))
    c.source_domains = j["source_domains"].get<std::vector<int>>();

  check(c.epochs >= 1, errkind::kConfig, "train config: epochs must be >= 1");
  check(c.batch_size >= 1, errkind::kConfig, "train config: batch_size must be >= 1");
  check(c.lr > 0.0, errkind::kConfig, "train config: lr must be positive");
  check(c.momentum >= 0.0 && c.momentum < 1.0, errkind::kConfig,
        "train config: momentum must lie in [0, 1)");
  check(c.lambda >= 0.0, errkind::kConfig, "train config: lambda must be >= 0");
  check(c.mu >= 0.0, errkind::kConfig, "train config: mu must be >= 0");
  check(c.m_views >= 0, errkind::kConfig, "train config: m_views must be >= 0");
  check(c.lr_drop_epoch >= 0, errkind::kConfig,
        "train config: lr_drop_epoch must be >= 0");
  check(c.lr_drop_factor > 0.0, errkind::kConfig,
        "train config: lr_drop_factor must be positive");
  if (c.consistency)
    check(c.image_views && c.instance_views, errkind::kConfig,
          "train config: consistency needs both view levels");
  return c;
}

struct EpochEval {
  double overall = 0.0;
  std::vector<std::pair<int, double>> per_domain;  // (domain_id, accuracy)
  int total_instances = 0;
};

struct RunReport {
  nlohmann::json config;
  std::string train_manifest_hash;
  std::string test_manifest_hash;  // empty when no held-out split
  int k_dc = 0;
  bool domain_losses_skipped = false;
  std::vector<LossBreakdown> epoch_losses;
  std::vector<double> epoch_lr;
  std::vector<EpochEval> epoch_evals;  // empty when no held-out split
  EpochEval final_eval;
  std::string checkpoint_path;
  int steps = 0;
  double wall_seconds = 0.0;  // reported in a sidecar, not in report.json
};

// Instance-classification accuracy over a dataset, grouped by domain id.
inline EpochEval evaluate_model(const MadModel& model, const Dataset& ds,
                                int batch_size) {
  check(ds.size() > 0, errkind::kContract, "evaluate: empty split");
  check(batch_size >= 1, errkind::kContract, "evaluate: batch_size must be >= 1");
  std::vector<int> domain_ids;
  std::vector<std::int64_t> correct, total;
  for (const DomainSpec& d : ds.manifest().domains) {
    domain_ids.push_back(d.domain_id);
    correct.push_back(0);
    total.push_back(0);
  }

  for (std::size_t start = 0; start < ds.size();
       start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start;
         i < std::min(ds.size(), start + static_cast<std::size_t>(batch_size));
         ++i)
      idx.push_back(i);
    Batch batch = assemble_batch(ds, idx);
    Tape tape;
    Tensor f = model.extract_features(tape, batch.images);
    Tensor inst = model.pool_instance_features(tape, f, batch.boxes);
    Tensor logits = model.task_forward(tape, inst);
    const int k = logits.extent(1);
    int row = 0;
    for (int i = 0; i < batch.size(); ++i) {
      const std::size_t dpos = static_cast<std::size_t>(batch.domain_ids[i]);
      for (std::size_t n = 0; n < batch.classes[i].size(); ++n, ++row) {
        const double* r = logits.data() + static_cast<std::size_t>(row) * k;
        int best = 0;
        for (int j = 1; j < k; ++j)
          if (r[j] > r[best]) best = j;
        total[dpos] += 1;
        if (best == batch.classes[i][n]) correct[dpos] += 1;
      }
    }
  }

  EpochEval ev;
  std::int64_t c_all = 0, t_all = 0;
  for (std::size_t i = 0; i < domain_ids.size(); ++i) {
    if (total[i] == 0) continue;
    ev.per_domain.push_back(
        {domain_ids[i], static_cast<double>(correct[i]) /
                            static_cast<double>(total[i])});
    c_all += correct[i];
    t_all += total[i];
  }
  ev.overall = t_all > 0 ? static_cast<double>(c_all) / static_cast<double>(t_all)
                         : 0.0;
  ev.total_instances = static_cast<int>(t_all);
  return ev;
}

namespace detail {

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline std::string manifest_hash(const std::string& dir) {
  return hash_hex(fnv1a64(read_text_file(dir + "/manifest.json")));
}

// One-from-each-domain round-robin over per-domain shuffled orders, so every
// batch mixes domains.  Leftover samples past the shortest domain are kept,
// appended in domain order.
inline std::vector<std::size_t> interleaved_order(
    const std::vector<std::vector<std::size_t>>& per_domain, Rng& rng) {
  std::vector<std::vector<std::size_t>> pools = per_domain;
  for (auto& pool : pools) rng.shuffle(pool.begin(), pool.end());
  std::vector<std::size_t> order;
  std::size_t total = 0;
  for (const auto& pool : pools) total += pool.size();
  order.reserve(total);
  for (std::size_t i = 0; order.size() < total; ++i)
    for (const auto& pool : pools)
      if (i < pool.size()) order.push_back(pool[i]);
  return order;
}

}  // namespace detail

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::shared_ptr<const Dataset> train_set)
      : cfg_(std::move(cfg)), train_(std::move(train_set)) {
    const DatasetManifest& man = train_->manifest();

    if (cfg_.source_domains.empty())
      for (const DomainSpec& d : man.domains) sources_.push_back(d.domain_id);
    else
      sources_ = cfg_.source_domains;

    // Domain class labels index the source list, not the manifest, so a
    // train set holding extra domains still yields labels in [0, k_dc).
    pos_to_class_.assign(man.domains.size(), -1);
    for (std::size_t si = 0; si < sources_.size(); ++si)
      pos_to_class_[static_cast<std::size_t>(train_->domain_pos(sources_[si]))] =
          static_cast<int>(si);

    single_source_scg_ = sources_.size() == 1 && cfg_.scg;
    k_dc_ = single_source_scg_ ? 2 : static_cast<int>(sources_.size());
    domain_losses_on_ = k_dc_ >= 2;

    const bool views = cfg_.m_views >= 1 &&
                       (cfg_.image_views || cfg_.instance_views) &&
                       (domain_losses_on_ || cfg_.autoencoders);
    ModelConfig mc;
    mc.in_channels = man.geom.c;
    mc.image_h = man.geom.h;
    mc.image_w = man.geom.w;
    mc.k_classes = man.geom.k_classes;
    mc.k_domains = std::max(k_dc_, 1);
    mc.m_views = std::max(cfg_.m_views, 1);
    mc.image_views = views && cfg_.image_views;
    mc.instance_views = views && cfg_.instance_views;
    mc.seed = Rng(cfg_.seed).fork(101).next_u64();
    model_ = std::make_unique<MadModel>(mc);

    img_on_ = mc.image_views;
    ins_on_ = mc.instance_views;
    cst_on_ = cfg_.consistency && img_on_ && ins_on_ && domain_losses_on_;
    mu_eff_ = cfg_.mu * cfg_.lambda;
  }

  MadModel& model() { return *model_; }
  const TrainConfig& config() const { return cfg_; }
  int k_dc() const { return k_dc_; }
  bool domain_losses_skipped() const { return !domain_losses_on_; }

  // In-place frequency augmentation of `count` batch positions chosen by
  // `rng`; returns one flag per sample.  Selected samples are augmented in
  // increasing position order so the draw sequence is reproducible.
  std::vector<bool> augment_half(Batch& batch, Rng& rng) const {
    const int b = batch.size();
    std::vector<int> positions(b);
    for (int i = 0; i < b; ++i) positions[i] = i;
    rng.shuffle(positions.begin(), positions.end());
    const int count = b / 2;
    std::vector<bool> augmented(b, false);
    for (int i = 0; i < count; ++i) augmented[positions[i]] = true;

    const int c = batch.images.extent(1), h = batch.images.extent(2),
              w = batch.images.extent(3);
    const int plane = c * h * w;
    for (int i = 0; i < b; ++i) {
      if (!augmented[i]) continue;
      Tensor img = Tensor::zeros({c, h, w});
      std::copy(batch.images.data() + i * plane,
                batch.images.data() + (i + 1) * plane, img.data());
      Tensor out = scg_augment(img, cfg_.scg_cfg, rng);
      std::copy(out.data(), out.data() + plane, batch.images.data() + i * plane);
    }
    return augmented;
  }

  LossBreakdown adversarial_step(Batch& batch, double lr, Rng& step_rng) {
    check(batch.size() >= 1, errkind::kContract, "adversarial_step: empty batch");
    std::vector<bool> augmented(batch.size(), false);
    if (cfg_.scg) augmented = augment_half(batch, step_rng);

    // Domain class per sample: positional id, or augmented/original when a
    // single source relies on augmentation to define the second domain.
    std::vector<int> img_domains(batch.size());
    for (int i = 0; i < batch.size(); ++i) {
      if (single_source_scg_) {
        img_domains[i] = augmented[i] ? 1 : 0;
      } else {
        const int cls = pos_to_class_[static_cast<std::size_t>(batch.domain_ids[i])];
        check(cls >= 0, errkind::kContract,
              "adversarial_step: batch sample from a non-source domain");
        img_domains[i] = cls;
      }
    }

    std::vector<int> inst_labels, inst_domains, inst_sample;
    for (int i = 0; i < batch.size(); ++i)
      for (std::size_t n = 0; n < batch.classes[i].size(); ++n) {
        inst_labels.push_back(batch.classes[i][n]);
        inst_domains.push_back(img_domains[i]);
        inst_sample.push_back(i);
      }

    Tape tape;
    Tensor f = model_->extract_features(tape, batch.images);
    Tensor inst = model_->pool_instance_features(tape, f, batch.boxes);
    Tensor l_det = cross_entropy_rows(tape, model_->task_forward(tape, inst),
                                      inst_labels);
    Tensor total = l_det;

    Tensor zero = Tensor::zeros({1});
    Tensor l_rc_img = zero, l_dc_img = zero, l_mv_img = zero;
    Tensor l_rc_ins = zero, l_dc_ins = zero, l_mv_ins = zero;
    Tensor l_cst = zero;
    std::vector<Tensor> img_probs, ins_probs;

    if (img_on_) {
      std::vector<Tensor> recons, logits, latents;
      Tensor fd = detach(f);
      for (int m = 0; m < model_->config().m_views; ++m) {
        BranchOut bo = model_->branch_forward(tape, Level::kImage, f, m, mu_eff_);
        recons.push_back(bo.recon);
        logits.push_back(bo.dc_logits);
        latents.push_back(bo.latent);
        if (cst_on_) img_probs.push_back(softmax_map(tape, bo.cst_logits));
      }
      if (cfg_.autoencoders) {
        l_rc_img = loss_rc(tape, fd, recons);
        l_mv_img = loss_mv(tape, latents, cfg_.mv);
        total = add(tape, total, l_rc_img);
        if (model_->config().m_views >= 2) total = add(tape, total, l_mv_img);
      }
      if (domain_losses_on_) {
        l_dc_img = loss_dc(tape, logits, img_domains);
        total = add(tape, total, l_dc_img);
      }
    }

    if (ins_on_) {
      std::vector<Tensor> recons, logits, latents;
      Tensor id = detach(inst);
      for (int m = 0; m < model_->config().m_views; ++m) {
        BranchOut bo =
            model_->branch_forward(tape, Level::kInstance, inst, m, mu_eff_);
        recons.push_back(bo.recon);
        logits.push_back(bo.dc_logits);
        latents.push_back(bo.latent);
        if (cst_on_) ins_probs.push_back(softmax_rows(tape, bo.cst_logits));
      }
      if (cfg_.autoencoders) {
        l_rc_ins = loss_rc(tape, id, recons);
        l_mv_ins = loss_mv(tape, latents, cfg_.mv);
        total = add(tape, total, l_rc_ins);
        if (model_->config().m_views >= 2) total = add(tape, total, l_mv_ins);
      }
      if (domain_losses_on_) {
        l_dc_ins = loss_dc(tape, logits, inst_domains);
        total = add(tape, total, l_dc_ins);
      }
    }

    if (cst_on_) {
      l_cst = loss_cst(tape, img_probs, ins_probs, inst_sample,
                       cfg_.cst_paired_only);
      total = add(tape, total, l_cst);
    }

    // Reporting composition; separate tape nodes so the backward pass sees
    // each term exactly once.
    Tensor mvdc_img = loss_mvdc(tape, l_rc_img, l_dc_img, l_mv_img);
    Tensor mvdc_ins = loss_mvdc(tape, l_rc_ins, l_dc_ins, l_mv_ins);
    Tensor mad_total = loss_mad(tape, l_det, mvdc_img, mvdc_ins, l_cst, cfg_.lambda);

    LossBreakdown b;
    b.l_det = l_det.scalar();
    b.l_rc_img = l_rc_img.scalar();
    b.l_rc_ins = l_rc_ins.scalar();
    b.l_dc_img = l_dc_img.scalar();
    b.l_dc_ins = l_dc_ins.scalar();
    b.l_mv_img = l_mv_img.scalar();
    b.l_mv_ins = l_mv_ins.scalar();
    b.l_cst = l_cst.scalar();
    b.l_mvdc_img = mvdc_img.scalar();
    b.l_mvdc_ins = mvdc_ins.scalar();
    b.l_mad = mad_total.scalar();
    check(b.consistent(cfg_.lambda), errkind::kContract,
          "loss breakdown composition identity violated");

    tape.backward(total);

    sgd_update(model_->extractor_group(), lr, cfg_.momentum);
    sgd_update(model_->task_group(), lr, cfg_.momentum);
    auto groups = model_->groups();
    for (std::size_t g = 1; g + 1 < groups.size(); g += 3) {
      ParamGroup& enc = *groups[g];
      ParamGroup& dec = *groups[g + 1];
      ParamGroup& cls = *groups[g + 2];
      if (cfg_.autoencoders || domain_losses_on_)
        sgd_update(enc, lr, cfg_.momentum);
      if (cfg_.autoencoders) sgd_update(dec, lr, cfg_.momentum);
      if (domain_losses_on_) sgd_update(cls, lr, cfg_.momentum);
      if (!cfg_.autoencoders) zero_grads(dec);
      if (!domain_losses_on_) zero_grads(cls);
    }
    return b;
  }

  // Instance-classification accuracy over a dataset, grouped by domain id.
  EpochEval evaluate(const Dataset& ds, int batch_size) {
    return evaluate_model(*model_, ds, batch_size);
  }

  // Full run; `log` (optional) receives one CSV row per step.
  RunReport train(const Dataset* held_out, std::ostream* log) {
    RunReport rep;
    rep.config = train_config_to_json(cfg_);
    rep.k_dc = k_dc_;
    rep.domain_losses_skipped = !domain_losses_on_;

    std::vector<std::vector<std::size_t>> per_domain;
    for (int d : sources_) {
      const std::size_t pos = static_cast<std::size_t>(train_->domain_pos(d));
      const std::size_t n = static_cast<std::size_t>(train_->manifest().n_per_domain);
      std::vector<std::size_t> idx(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = pos * n + i;
      per_domain.push_back(std::move(idx));
    }

    if (log != nullptr) {
      *log << "step,epoch";
      for (const std::string& f : loss_csv_fields()) *log << "," << f;
      *log << ",lr,seed\n";
    }

    Rng root(cfg_.seed);
    int step = 0;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const double lr = lr_schedule(epoch, cfg_);
      Rng order_rng = root.fork(10000 + static_cast<std::uint64_t>(epoch));
      std::vector<std::size_t> order =
          detail::interleaved_order(per_domain, order_rng);

      LossBreakdown sums;
      int steps_in_epoch = 0;
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(cfg_.batch_size)) {
        std::vector<std::size_t> idx(
            order.begin() + static_cast<std::ptrdiff_t>(start),
            order.begin() +
                static_cast<std::ptrdiff_t>(std::min(
                    order.size(), start + static_cast<std::size_t>(cfg_.batch_size))));
        Batch batch = assemble_batch(*train_, idx);
        Rng step_rng = root.fork(20000 + static_cast<std::uint64_t>(step));
        LossBreakdown b = adversarial_step(batch, lr, step_rng);

        if (log != nullptr) {
          *log << step << "," << epoch;
          for (double v : loss_csv_values(b)) *log << "," << fmt_g17(v);
          *log << "," << fmt_g17(lr) << "," << cfg_.seed << "\n";
        }
        accumulate(sums, b);
        ++steps_in_epoch;
        ++step;
      }
      rep.epoch_losses.push_back(scale(sums, 1.0 / std::max(steps_in_epoch, 1)));
      rep.epoch_lr.push_back(lr);
      if (held_out != nullptr)
        rep.epoch_evals.push_back(evaluate(*held_out, cfg_.batch_size));
    }
    rep.steps = step;
    if (held_out != nullptr) {
      rep.final_eval =
          rep.epoch_evals.empty() ? evaluate(*held_out, cfg_.batch_size)
                                  : rep.epoch_evals.back();
    }
    return rep;
  }

 private:
  static void accumulate(LossBreakdown& acc, const LossBreakdown& b) {
    const auto va = loss_csv_values(acc);
    const auto vb = loss_csv_values(b);
    LossBreakdown out;
    double* fields[] = {&out.l_det,    &out.l_rc_img,   &out.l_rc_ins,
                        &out.l_dc_img, &out.l_dc_ins,   &out.l_mv_img,
                        &out.l_mv_ins, &out.l_cst,      &out.l_mvdc_img,
                        &out.l_mvdc_ins, &out.l_mad};
    for (std::size_t i = 0; i < va.size(); ++i) *fields[i] = va[i] + vb[i];
    acc = out;
  }
  static LossBreakdown scale(const LossBreakdown& b, double s) {
    const auto vb = loss_csv_values(b);
    LossBreakdown out;
    double* fields[] = {&out.l_det,    &out.l_rc_img,   &out.l_rc_ins,
                        &out.l_dc_img, &out.l_dc_ins,   &out.l_mv_img,
                        &out.l_mv_ins, &out.l_cst,      &out.l_mvdc_img,
                        &out.l_mvdc_ins, &out.l_mad};
    for (std::size_t i = 0; i < vb.size(); ++i) *fields[i] = vb[i] * s;
    return out;
  }

  TrainConfig cfg_;
  std::shared_ptr<const Dataset> train_;
  std::vector<int> sources_;
  std::vector<int> pos_to_class_;
  std::unique_ptr<MadModel> model_;
  bool single_source_scg_ = false;
  int k_dc_ = 0;
  bool domain_losses_on_ = false;
  bool img_on_ = false, ins_on_ = false, cst_on_ = false;
  double mu_eff_ = 0.0;
};

inline nlohmann::json epoch_eval_to_json(const EpochEval& ev) {
  nlohmann::json j;
  j["overall"] = ev.overall;
  j["total_instances"] = ev.total_instances;
  nlohmann::json pd = nlohmann::json::object();
  for (const auto& [dom, acc] : ev.per_domain) pd[std::to_string(dom)] = acc;
  j["per_domain"] = pd;
  return j;
}

inline nlohmann::json run_report_to_json(const RunReport& rep) {
  nlohmann::json j;
  j["config"] = rep.config;
  j["dataset"] = {{"train_manifest_hash", rep.train_manifest_hash},
                  {"test_manifest_hash", rep.test_manifest_hash},
                  {"k_dc", rep.k_dc},
                  {"domain_losses_skipped", rep.domain_losses_skipped}};
  nlohmann::json epochs = nlohmann::json::array();
  for (std::size_t e = 0; e < rep.epoch_losses.size(); ++e) {
    nlohmann::json je;
    je["epoch"] = e;
    je["lr"] = rep.epoch_lr[e];
    nlohmann::json losses;
    const auto vals = loss_csv_values(rep.epoch_losses[e]);
    const auto& names = loss_csv_fields();
    for (std::size_t i = 0; i < names.size(); ++i) losses[names[i]] = vals[i];
    je["losses"] = losses;
    if (e < rep.epoch_evals.size()) je["eval"] = epoch_eval_to_json(rep.epoch_evals[e]);
    epochs.push_back(je);
  }
  j["epochs"] = epochs;
  j["final_eval"] = epoch_eval_to_json(rep.final_eval);
  j["checkpoint"] = rep.checkpoint_path;
  j["steps"] = rep.steps;
  return j;
}

// Runs training against a data root (either a dataset directory or a root
// holding train/ and optional test/), writing report.json, train_log.csv,
// model.ckpt, and a timing.json sidecar into out_dir.
inline RunReport train_run(const TrainConfig& cfg, const std::string& data_root,
                           const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::string train_dir = data_root;
  std::string test_dir;
  if (!fs::exists(fs::path(data_root) / "manifest.json")) {
    train_dir = (fs::path(data_root) / "train").string();
    if (fs::exists(fs::path(data_root) / "test" / "manifest.json"))
      test_dir = (fs::path(data_root) / "test").string();
  }

  auto train_set = std::make_shared<Dataset>(Dataset::open(train_dir));
  std::unique_ptr<Dataset> held_out;
  if (!test_dir.empty())
    held_out = std::make_unique<Dataset>(Dataset::open(test_dir));

  const auto t0 = std::chrono::steady_clock::now();
  Trainer trainer(cfg, train_set);
  fs::create_directories(out_dir);
  std::ofstream log((fs::path(out_dir) / "train_log.csv").string(),
                    std::ios::binary);
  check(log.good(), errkind::kIo, "cannot write train_log.csv in " + out_dir);
  RunReport rep = trainer.train(held_out.get(), &log);
  log.close();

  rep.train_manifest_hash = detail::manifest_hash(train_dir);
  if (!test_dir.empty()) rep.test_manifest_hash = detail::manifest_hash(test_dir);
  rep.checkpoint_path = "model.ckpt";
  nlohmann::json extra;
  extra["train_config"] = rep.config;
  trainer.model().save((fs::path(out_dir) / "model.ckpt").string(), extra);

  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text_file((fs::path(out_dir) / "report.json").string(),
                  run_report_to_json(rep).dump(2) + "\n");
  nlohmann::json timing;
  timing["wall_seconds"] = rep.wall_seconds;
  write_text_file((fs::path(out_dir) / "timing.json").string(),
                  timing.dump(2) + "\n");
  return rep;
}

}  // namespace mad
