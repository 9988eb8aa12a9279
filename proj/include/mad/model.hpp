#pragma once

// Network architecture: a shared convolutional feature extractor, M parallel
// view branches per feature level (image maps and pooled instances), and a
// task classification head.
//
// Each view branch is an autoencoder plus a domain classifier.  The branch
// forward pass routes gradients three ways:
//   * domain logits see the feature through gradient reversal, so the domain
//     loss trains the classifier normally while pushing the extractor the
//     opposite way;
//   * the autoencoder sees a detached copy of the feature, so reconstruction
//     and view-spread losses shape only encoder/decoder weights;
//   * consistency logits see a detached copy of the latent, so agreement
//     losses shape only the classifiers.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mad/checkpoint.hpp"
#include "mad/common.hpp"
#include "mad/rng.hpp"
#include "mad/synthgen.hpp"
#include "mad/tensor.hpp"

namespace mad {

// Feature maps are 1/8 the input resolution: three stride-2 blocks.
inline constexpr int kFeatureStride = 8;
inline constexpr int kFeatureChannels = 32;
inline constexpr int kLatentChannels = 16;

struct ModelConfig {
  int in_channels = 3;
  int image_h = 32;
  int image_w = 32;
  int k_classes = 4;   // task label arity
  int k_domains = 2;   // source-domain arity seen by domain classifiers
  int m_views = 3;     // branches per level
  bool image_views = true;
  bool instance_views = true;
  std::uint64_t seed = 0;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["in_channels"] = c.in_channels;
  j["image_h"] = c.image_h;
  j["image_w"] = c.image_w;
  j["k_classes"] = c.k_classes;
  j["k_domains"] = c.k_domains;
  j["m_views"] = c.m_views;
  j["image_views"] = c.image_views;
  j["instance_views"] = c.instance_views;
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.image_h = j.value("image_h", c.image_h);
  c.image_w = j.value("image_w", c.image_w);
  c.k_classes = j.value("k_classes", c.k_classes);
  c.k_domains = j.value("k_domains", c.k_domains);
  c.m_views = j.value("m_views", c.m_views);
  c.image_views = j.value("image_views", c.image_views);
  c.instance_views = j.value("instance_views", c.instance_views);
  c.seed = j.value("seed", c.seed);
  return c;
}

enum class Level { kImage, kInstance };

struct BranchOut {
  Tensor latent;      // encoder output
  Tensor recon;       // decoder output, same shape as the branch input
  Tensor dc_logits;   // domain logits, adversarial path
  Tensor cst_logits;  // domain logits on a detached latent
};

class MadModel {
 public:
  explicit MadModel(const ModelConfig& cfg) : cfg_(cfg) {
    check(cfg.in_channels > 0 && cfg.image_h > 0 && cfg.image_w > 0,
          errkind::kConfig, "model: non-positive input extents");
    check(cfg.image_h % kFeatureStride == 0 && cfg.image_w % kFeatureStride == 0,
          errkind::kConfig, "model: image extents must be divisible by 8");
    check(cfg.k_classes >= 1, errkind::kConfig, "model: k_classes must be >= 1");
    check(cfg.k_domains >= 1, errkind::kConfig, "model: k_domains must be >= 1");
    check(cfg.m_views >= 1, errkind::kConfig, "model: m_views must be >= 1");

    Rng rng(cfg.seed);
    init_extractor(rng);
    if (cfg.image_views)
      for (int m = 0; m < cfg.m_views; ++m) img_.push_back(make_image_branch(m, rng));
    if (cfg.instance_views)
      for (int m = 0; m < cfg.m_views; ++m) ins_.push_back(make_instance_branch(m, rng));
    init_task_head(rng);
    if (cfg.image_views && cfg.m_views >= 2) assert_dilations_distinct();
  }

  const ModelConfig& config() const { return cfg_; }
  int feature_h() const { return cfg_.image_h / kFeatureStride; }
  int feature_w() const { return cfg_.image_w / kFeatureStride; }

  // Groups in a fixed order; the same order is used for checkpoints.
  std::vector<const ParamGroup*> groups() const {
    std::vector<const ParamGroup*> out;
    collect(out);
    return out;
  }
  std::vector<ParamGroup*> groups() {
    std::vector<const ParamGroup*> c;
    collect(c);
    std::vector<ParamGroup*> out;
    out.reserve(c.size());
    for (const ParamGroup* g : c) out.push_back(const_cast<ParamGroup*>(g));
    return out;
  }

  ParamGroup& extractor_group() { return extractor_; }
  ParamGroup& task_group() { return task_; }

  // [B, C, H, W] -> [B, 32, H/8, W/8]
  Tensor extract_features(Tape& tape, const Tensor& images) const {
    check(images.shape().size() == 4, errkind::kShape, "extract_features: want rank 4");
    check(images.extent(1) == cfg_.in_channels, errkind::kShape,
          "extract_features: channel mismatch");
    check(images.extent(2) % kFeatureStride == 0 &&
              images.extent(3) % kFeatureStride == 0,
          errkind::kShape, "extract_features: extents must be divisible by 8");
    Tensor h = images;
    for (int i = 0; i < 3; ++i) {
      h = conv2d(tape, h, ex_w_[i], 2, 1, 1);
      h = channel_bias(tape, h, ex_b_[i]);
      h = relu(tape, h);
    }
    return h;
  }

  // Channelwise mean over each instance box, boxes mapped to feature cells by
  // dividing by the stride and rounding outward.  Output rows keep the input
  // order: all boxes of sample 0, then sample 1, and so on.
  Tensor pool_instance_features(Tape& tape, const Tensor& feature,
                                const std::vector<std::vector<SampleBox>>& boxes) const {
    check(feature.shape().size() == 4, errkind::kShape,
          "pool_instance_features: want rank 4");
    check(static_cast<int>(boxes.size()) == feature.extent(0), errkind::kContract,
          "pool_instance_features: box list count != batch size");
    const int fh = feature.extent(2), fw = feature.extent(3);
    std::vector<PoolRegion> regions;
    for (int b = 0; b < static_cast<int>(boxes.size()); ++b) {
      for (const SampleBox& box : boxes[b]) {
        PoolRegion r;
        r.sample = b;
        r.y0 = box.y0 / kFeatureStride;
        r.x0 = box.x0 / kFeatureStride;
        r.y1 = (box.y1 + kFeatureStride - 1) / kFeatureStride;
        r.x1 = (box.x1 + kFeatureStride - 1) / kFeatureStride;
        check(r.y0 < r.y1 && r.x0 < r.x1, errkind::kContract,
              "pool_instance_features: box projects to zero feature cells");
        check(r.y1 <= fh && r.x1 <= fw, errkind::kContract,
              "pool_instance_features: box outside the feature map");
        regions.push_back(r);
      }
    }
    check(!regions.empty(), errkind::kContract,
          "pool_instance_features: no boxes in batch");
    return region_avg_pool(tape, feature, regions);
  }

  // View branch forward.  `m` is the zero-based branch index; image branches
  // use dilation m+1.  `mu` scales the reversed gradient (0 disables it).
  BranchOut branch_forward(Tape& tape, Level level, const Tensor& feature, int m,
                           double mu) const {
    check(m >= 0 && m < cfg_.m_views, errkind::kContract,
          "branch_forward: branch index out of range");
    if (level == Level::kImage) {
      check(cfg_.image_views, errkind::kContract,
            "branch_forward: image views disabled");
      return image_branch_forward(tape, img_[static_cast<std::size_t>(m)], feature, mu);
    }
    check(cfg_.instance_views, errkind::kContract,
          "branch_forward: instance views disabled");
    return instance_branch_forward(tape, ins_[static_cast<std::size_t>(m)], feature, mu);
  }

  // [N, 32] pooled instance features -> [N, k_classes] task logits.
  Tensor task_forward(Tape& tape, const Tensor& inst_features) const {
    return linear(tape, inst_features, task_w_, task_b_);
  }

  void save(const std::string& path, const nlohmann::json& extra = {}) const {
    nlohmann::json hyper;
    hyper["model"] = model_config_to_json(cfg_);
    if (!extra.is_null() && !extra.empty()) hyper["extra"] = extra;
    save_checkpoint(path, hyper, groups());
  }

  static MadModel load(const std::string& path, nlohmann::json* extra = nullptr) {
    CheckpointData data = load_checkpoint(path);
    check(data.hyper.contains("model"), errkind::kCorrupt,
          "checkpoint lacks model hyper-parameters: " + path);
    MadModel model(model_config_from_json(data.hyper["model"]));
    std::vector<ParamGroup*> mine = model.groups();
    check(mine.size() == data.groups.size(), errkind::kCorrupt,
          "checkpoint group count mismatch in " + path);
    for (std::size_t g = 0; g < mine.size(); ++g) {
      check(mine[g]->role == data.groups[g].role, errkind::kCorrupt,
            "checkpoint group role mismatch in " + path);
      check(mine[g]->params.size() == data.groups[g].params.size(), errkind::kCorrupt,
            "checkpoint parameter count mismatch in " + path);
      for (std::size_t p = 0; p < mine[g]->params.size(); ++p) {
        Param& dst = mine[g]->params[p];
        const Param& src = data.groups[g].params[p];
        check(dst.name == src.name, errkind::kCorrupt,
              "checkpoint parameter name mismatch: " + src.name + " in " + path);
        check(dst.value.shape() == src.value.shape(), errkind::kCorrupt,
              "checkpoint shape mismatch for " + src.name + " in " + path);
        std::copy(src.value.data(), src.value.data() + src.value.numel(),
                  dst.value.data());
      }
    }
    if (extra != nullptr) *extra = data.hyper.value("extra", nlohmann::json::object());
    return model;
  }

 private:
  struct ImageBranch {
    ParamGroup enc{Role::kEncoder};
    ParamGroup dec{Role::kDecoder};
    ParamGroup cls{Role::kDomainClassifier};
    Tensor enc_pre_w, enc_pre_b;  // 1x1, 32 -> 16
    Tensor enc_dil_w, enc_dil_b;  // 3x3 dilated, 16 -> 16
    Tensor dec_dil_w, dec_dil_b;  // 3x3 dilated, 16 -> 16
    Tensor dec_post_w, dec_post_b;  // 1x1, 16 -> 32
    Tensor cls_w, cls_b;            // 1x1, 16 -> k_domains
    int dilation = 1;
  };
  struct InstanceBranch {
    ParamGroup enc{Role::kEncoder};
    ParamGroup dec{Role::kDecoder};
    ParamGroup cls{Role::kDomainClassifier};
    Tensor enc_w, enc_b;  // 32 -> 16
    Tensor dec_w, dec_b;  // 16 -> 32
    Tensor cls_w, cls_b;  // 16 -> k_domains
  };

  static Tensor conv_param(ParamGroup& g, const std::string& name, int co, int ci,
                           int k, Rng& rng) {
    return g.add(name, Tensor::kaiming({co, ci, k, k}, ci * k * k, rng));
  }
  static Tensor fc_param(ParamGroup& g, const std::string& name, int in, int out,
                         Rng& rng) {
    return g.add(name, Tensor::kaiming({in, out}, in, rng));
  }
  static Tensor bias_param(ParamGroup& g, const std::string& name, int n) {
    return g.add(name, Tensor::zeros({n}));
  }

  void init_extractor(Rng& rng) {
    const int widths[3] = {16, kFeatureChannels, kFeatureChannels};
    int ci = cfg_.in_channels;
    for (int i = 0; i < 3; ++i) {
      const std::string tag = "extractor.conv" + std::to_string(i + 1);
      ex_w_[i] = conv_param(extractor_, tag + ".weight", widths[i], ci, 3, rng);
      ex_b_[i] = bias_param(extractor_, tag + ".bias", widths[i]);
      ci = widths[i];
    }
  }

  ImageBranch make_image_branch(int m, Rng& rng) {
    ImageBranch b;
    b.dilation = m + 1;
    const std::string tag = "img.b" + std::to_string(m + 1);
    b.enc_pre_w = conv_param(b.enc, tag + ".enc.pre.weight", kLatentChannels,
                             kFeatureChannels, 1, rng);
    b.enc_pre_b = bias_param(b.enc, tag + ".enc.pre.bias", kLatentChannels);
    b.enc_dil_w = conv_param(b.enc, tag + ".enc.dil.weight", kLatentChannels,
                             kLatentChannels, 3, rng);
    b.enc_dil_b = bias_param(b.enc, tag + ".enc.dil.bias", kLatentChannels);
    b.dec_dil_w = conv_param(b.dec, tag + ".dec.dil.weight", kLatentChannels,
                             kLatentChannels, 3, rng);
    b.dec_dil_b = bias_param(b.dec, tag + ".dec.dil.bias", kLatentChannels);
    b.dec_post_w = conv_param(b.dec, tag + ".dec.post.weight", kFeatureChannels,
                              kLatentChannels, 1, rng);
    b.dec_post_b = bias_param(b.dec, tag + ".dec.post.bias", kFeatureChannels);
    b.cls_w = conv_param(b.cls, tag + ".cls.weight", cfg_.k_domains,
                         kLatentChannels, 1, rng);
    b.cls_b = bias_param(b.cls, tag + ".cls.bias", cfg_.k_domains);
    return b;
  }

  InstanceBranch make_instance_branch(int m, Rng& rng) {
    InstanceBranch b;
    const std::string tag = "ins.b" + std::to_string(m + 1);
    b.enc_w = fc_param(b.enc, tag + ".enc.weight", kFeatureChannels,
                       kLatentChannels, rng);
    b.enc_b = bias_param(b.enc, tag + ".enc.bias", kLatentChannels);
    b.dec_w = fc_param(b.dec, tag + ".dec.weight", kLatentChannels,
                       kFeatureChannels, rng);
    b.dec_b = bias_param(b.dec, tag + ".dec.bias", kFeatureChannels);
    b.cls_w = fc_param(b.cls, tag + ".cls.weight", kLatentChannels, cfg_.k_domains,
                       rng);
    b.cls_b = bias_param(b.cls, tag + ".cls.bias", cfg_.k_domains);
    return b;
  }

  void init_task_head(Rng& rng) {
    task_w_ = fc_param(task_, "task.weight", kFeatureChannels, cfg_.k_classes, rng);
    task_b_ = bias_param(task_, "task.bias", cfg_.k_classes);
  }

  Tensor image_encode(Tape& tape, const ImageBranch& b, const Tensor& x) const {
    Tensor h = conv2d(tape, x, b.enc_pre_w, 1, 1, 0);
    h = channel_bias(tape, h, b.enc_pre_b);
    h = relu(tape, h);
    h = conv2d(tape, h, b.enc_dil_w, 1, b.dilation, b.dilation);
    return channel_bias(tape, h, b.enc_dil_b);
  }

  BranchOut image_branch_forward(Tape& tape, const ImageBranch& b, const Tensor& x,
                                 double mu) const {
    check(x.shape().size() == 4 && x.extent(1) == kFeatureChannels, errkind::kShape,
          "branch_forward: want [B, 32, h, w] image features");
    BranchOut out;
    Tensor adv = image_encode(tape, b, grad_reverse(tape, x, mu));
    Tensor adv_logits = conv2d(tape, adv, b.cls_w, 1, 1, 0);
    out.dc_logits = channel_bias(tape, adv_logits, b.cls_b);

    out.latent = image_encode(tape, b, detach(x));
    Tensor h = conv2d(tape, relu(tape, out.latent), b.dec_dil_w, 1, b.dilation,
                      b.dilation);
    h = channel_bias(tape, h, b.dec_dil_b);
    h = relu(tape, h);
    h = conv2d(tape, h, b.dec_post_w, 1, 1, 0);
    out.recon = channel_bias(tape, h, b.dec_post_b);

    Tensor cst = conv2d(tape, detach(out.latent), b.cls_w, 1, 1, 0);
    out.cst_logits = channel_bias(tape, cst, b.cls_b);
    return out;
  }

  BranchOut instance_branch_forward(Tape& tape, const InstanceBranch& b,
                                    const Tensor& x, double mu) const {
    check(x.shape().size() == 2 && x.extent(1) == kFeatureChannels, errkind::kShape,
          "branch_forward: want [N, 32] instance features");
    BranchOut out;
    out.dc_logits =
        linear(tape, linear(tape, grad_reverse(tape, x, mu), b.enc_w, b.enc_b),
               b.cls_w, b.cls_b);
    out.latent = linear(tape, detach(x), b.enc_w, b.enc_b);
    out.recon = linear(tape, relu(tape, out.latent), b.dec_w, b.dec_b);
    out.cst_logits = linear(tape, detach(out.latent), b.cls_w, b.cls_b);
    return out;
  }

  // Branches must produce distinct latents for the same input, otherwise the
  // per-branch dilations are not wired through.
  void assert_dilations_distinct() const {
    Rng rng(0x9E3779B97F4A7C15ull);
    Tensor probe =
        Tensor::uniform({1, kFeatureChannels, feature_h(), feature_w()}, -1.0, 1.0, rng);
    std::vector<Tensor> latents;
    for (const ImageBranch& b : img_) {
      Tape tape;
      latents.push_back(image_encode(tape, b, probe));
    }
    for (std::size_t i = 0; i < latents.size(); ++i)
      for (std::size_t j = i + 1; j < latents.size(); ++j) {
        double diff = 0.0;
        for (int k = 0; k < latents[i].numel(); ++k)
          diff = std::max(diff, std::fabs(latents[i].data()[k] - latents[j].data()[k]));
        check(diff > 1e-12, errkind::kContract,
              "model: image branches produced identical latents at init");
      }
  }

  void collect(std::vector<const ParamGroup*>& out) const {
    out.push_back(&extractor_);
    for (const ImageBranch& b : img_) {
      out.push_back(&b.enc);
      out.push_back(&b.dec);
      out.push_back(&b.cls);
    }
    for (const InstanceBranch& b : ins_) {
      out.push_back(&b.enc);
      out.push_back(&b.dec);
      out.push_back(&b.cls);
    }
    out.push_back(&task_);
  }

  ModelConfig cfg_;
  ParamGroup extractor_{Role::kExtractor};
  Tensor ex_w_[3], ex_b_[3];
  std::vector<ImageBranch> img_;
  std::vector<InstanceBranch> ins_;
  ParamGroup task_{Role::kTaskHead};
  Tensor task_w_, task_b_;
};

}  // namespace mad
