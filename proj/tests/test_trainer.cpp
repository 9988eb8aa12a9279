#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "mad/trainer.hpp"

using namespace mad;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("mad_trainer_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

// Root with train/ (two separable domains) and test/ (same domains).
void make_root(const std::string& root, int n_train, int n_test,
               std::uint64_t seed) {
  const DataGeom geom;
  std::vector<DomainSpec> specs{make_domain_spec(0, "bright", seed + 1),
                                make_domain_spec(1, "dark", seed + 2)};
  generate_dataset(specs, n_train, {}, geom, root + "/train");
  generate_dataset(specs, n_test, {}, geom, root + "/test");
}

std::vector<double> copy_values(const ParamGroup& g) {
  std::vector<double> out;
  for (const Param& p : g.params)
    out.insert(out.end(), p.value.data(), p.value.data() + p.value.numel());
  return out;
}

std::vector<double> copy_grads(const ParamGroup& g) {
  std::vector<double> out;
  for (const Param& p : g.params) {
    if (p.value.has_grad()) {
      const auto& gv = p.value.grad_view();
      out.insert(out.end(), gv.begin(), gv.end());
    } else {
      out.insert(out.end(), static_cast<std::size_t>(p.value.numel()), 0.0);
    }
  }
  return out;
}

std::vector<double> copy_velocity(const ParamGroup& g) {
  std::vector<double> out;
  for (const Param& p : g.params) {
    if (p.velocity.empty())
      out.insert(out.end(), static_cast<std::size_t>(p.value.numel()), 0.0);
    else
      out.insert(out.end(), p.velocity.begin(), p.velocity.end());
  }
  return out;
}

bool any_nonzero(const std::vector<double>& v) {
  for (double x : v)
    if (x != 0.0) return true;
  return false;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig cfg;
  REQUIRE(lr_schedule(0, cfg) == 0.002);
  REQUIRE(lr_schedule(6, cfg) == 0.002);
  REQUIRE(lr_schedule(7, cfg) == 0.0002);
  REQUIRE(lr_schedule(9, cfg) == 0.0002);
  REQUIRE_THROWS_AS(lr_schedule(-1, cfg), Error);

  cfg.lr = 0.01;
  cfg.lr_drop_epoch = 2;
  cfg.lr_drop_factor = 0.5;
  REQUIRE(lr_schedule(1, cfg) == 0.01);
  REQUIRE(lr_schedule(2, cfg) == 0.005);
}

TEST_CASE("method presets and config parsing") {
  SECTION("defaults match the training protocol") {
    TrainConfig c = train_config_from_json(nlohmann::json::object());
    REQUIRE(c.epochs == 10);
    REQUIRE(c.lr == 0.002);
    REQUIRE(c.lr_drop_epoch == 7);
    REQUIRE(c.momentum == 0.9);
    REQUIRE(c.batch_size == 16);
    REQUIRE(c.lambda == 0.1);
    REQUIRE(c.m_views == 3);
    REQUIRE(c.mu == 1.0);
    REQUIRE(c.scg);
    REQUIRE(c.mv.variant == MvVariant::kHinge);
    REQUIRE(c.mv.tau == 4.0);
  }

  SECTION("presets") {
    TrainConfig erm;
    apply_method(erm, "erm");
    REQUIRE(!erm.scg);
    REQUIRE(!erm.image_views);
    REQUIRE(!erm.instance_views);
    REQUIRE(!erm.consistency);

    TrainConfig dann;
    apply_method(dann, "dann");
    REQUIRE(dann.image_views);
    REQUIRE(dann.instance_views);
    REQUIRE(!dann.autoencoders);
    REQUIRE(!dann.consistency);
    REQUIRE(dann.m_views == 1);

    TrainConfig mad;
    apply_method(mad, "mad");
    REQUIRE(mad.scg);
    REQUIRE(mad.autoencoders);
    REQUIRE(mad.consistency);

    TrainConfig c;
    REQUIRE_THROWS_AS(apply_method(c, "gan"), Error);
  }

  SECTION("json round-trip and method override") {
    nlohmann::json j;
    j["method"] = "dann";
    j["m_views"] = 2;  // explicit field wins over the preset
    j["lambda"] = 0.05;
    TrainConfig c = train_config_from_json(j);
    REQUIRE(!c.autoencoders);
    REQUIRE(c.m_views == 2);
    REQUIRE(c.lambda == 0.05);

    TrainConfig back = train_config_from_json(train_config_to_json(c));
    REQUIRE(train_config_to_json(back) == train_config_to_json(c));
  }

  SECTION("validation") {
    nlohmann::json j;
    j["momentum"] = 1.0;
    REQUIRE_THROWS_AS(train_config_from_json(j), Error);
    j = {{"lambda", -0.1}};
    REQUIRE_THROWS_AS(train_config_from_json(j), Error);
    j = {{"epochs", 0}};
    REQUIRE_THROWS_AS(train_config_from_json(j), Error);
    j = {{"consistency", true}, {"image_views", false}};
    REQUIRE_THROWS_AS(train_config_from_json(j), Error);
    j = {{"mv", {{"variant", "cubic"}}}};
    REQUIRE_THROWS_AS(train_config_from_json(j), Error);
  }
}

TEST_CASE("batch order interleaves domains") {
  std::vector<std::vector<std::size_t>> pools{{0, 1, 2, 3}, {10, 11, 12, 13}};
  Rng rng(5);
  const auto order = detail::interleaved_order(pools, rng);
  REQUIRE(order.size() == 8);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i % 2 == 0)
      REQUIRE(order[i] < 4);
    else
      REQUIRE(order[i] >= 10);
  }

  // uneven pools keep every sample
  pools = {{0, 1, 2, 3, 4, 5}, {10}};
  Rng rng2(5);
  const auto tail = detail::interleaved_order(pools, rng2);
  REQUIRE(tail.size() == 7);
}

TEST_CASE("frequency augmentation touches exactly half the batch") {
  TempDir dir("aug");
  make_root(dir.str(), 12, 4, 900);
  auto ds = std::make_shared<Dataset>(Dataset::open(dir.sub("train")));

  TrainConfig cfg;
  cfg.batch_size = 8;
  Trainer trainer(cfg, ds);

  std::vector<std::size_t> idx{0, 1, 2, 12, 13, 14, 3, 15};
  Batch batch = assemble_batch(*ds, idx);
  Batch before = assemble_batch(*ds, idx);

  Rng rng(77);
  const auto flags = trainer.augment_half(batch, rng);
  REQUIRE(flags.size() == 8);
  int n_aug = 0;
  const int plane = 3 * 32 * 32;
  for (int i = 0; i < 8; ++i) {
    const bool changed =
        std::memcmp(batch.images.data() + i * plane,
                    before.images.data() + i * plane, sizeof(double) * plane) != 0;
    if (flags[i]) ++n_aug;
    REQUIRE(changed == flags[i]);
  }
  REQUIRE(n_aug == 4);

  SECTION("selection and noise replay deterministically") {
    Batch again = assemble_batch(*ds, idx);
    Rng rng2(77);
    const auto flags2 = trainer.augment_half(again, rng2);
    REQUIRE(flags2 == flags);
    REQUIRE(std::memcmp(again.images.data(), batch.images.data(),
                        sizeof(double) * again.images.numel()) == 0);
  }
}

TEST_CASE("lambda and mu gate only the adversarial coupling") {
  TempDir dir("gate");
  make_root(dir.str(), 12, 4, 901);
  auto ds = std::make_shared<Dataset>(Dataset::open(dir.sub("train")));

  auto task_only_grad = [&](Trainer& trainer, const Batch& batch) {
    Tape tape;
    MadModel& m = trainer.model();
    Tensor f = m.extract_features(tape, batch.images);
    Tensor inst = m.pool_instance_features(tape, f, batch.boxes);
    std::vector<int> labels;
    for (const auto& cs : batch.classes) labels.insert(labels.end(), cs.begin(), cs.end());
    Tensor loss = cross_entropy_rows(tape, m.task_forward(tape, inst), labels);
    tape.backward(loss);
    auto g = copy_grads(m.extractor_group());
    for (auto* grp : m.groups()) zero_grads(*grp);
    return g;
  };

  auto run_case = [&](double lambda, double mu) {
    TrainConfig cfg;
    cfg.scg = false;
    cfg.lambda = lambda;
    cfg.mu = mu;
    cfg.m_views = 2;
    cfg.batch_size = 8;
    cfg.seed = 5;
    Trainer trainer(cfg, ds);

    std::vector<std::size_t> idx{0, 12, 1, 13, 2, 14, 3, 15};
    Batch batch = assemble_batch(*ds, idx);
    const auto g_task = task_only_grad(trainer, batch);

    Rng step_rng(1);
    trainer.adversarial_step(batch, 0.002, step_rng);
    const auto v_ext = copy_velocity(trainer.model().extractor_group());

    // one step from zero velocity leaves velocity equal to the gradient
    REQUIRE(v_ext.size() == g_task.size());
    bool equal = true;
    for (std::size_t i = 0; i < v_ext.size(); ++i)
      if (v_ext[i] != g_task[i]) equal = false;

    auto groups = trainer.model().groups();
    const bool cls_moved = any_nonzero(copy_velocity(*groups[3]));
    const bool dec_moved = any_nonzero(copy_velocity(*groups[2]));
    return std::tuple<bool, bool, bool>(equal, cls_moved, dec_moved);
  };

  SECTION("lambda = 0: extractor sees only the task gradient, branches train") {
    auto [ext_is_task, cls_moved, dec_moved] = run_case(0.0, 1.0);
    REQUIRE(ext_is_task);
    REQUIRE(cls_moved);
    REQUIRE(dec_moved);
  }

  SECTION("mu = 0: same, independent of lambda") {
    auto [ext_is_task, cls_moved, dec_moved] = run_case(0.1, 0.0);
    REQUIRE(ext_is_task);
    REQUIRE(cls_moved);
    REQUIRE(dec_moved);
  }

  SECTION("lambda > 0 changes the extractor gradient") {
    auto [ext_is_task, cls_moved, dec_moved] = run_case(0.1, 1.0);
    REQUIRE(!ext_is_task);
    REQUIRE(cls_moved);
    REQUIRE(dec_moved);
  }
}

TEST_CASE("single-source runs define domains through augmentation") {
  TempDir dir("single");
  const DataGeom geom;
  std::vector<DomainSpec> one{make_domain_spec(0, "bright", 42)};
  generate_dataset(one, 12, {}, geom, dir.sub("train"));
  auto ds = std::make_shared<Dataset>(Dataset::open(dir.sub("train")));

  SECTION("with augmentation on, k_dc is 2 and domain losses run") {
    TrainConfig cfg;
    cfg.batch_size = 6;
    cfg.m_views = 2;
    Trainer trainer(cfg, ds);
    REQUIRE(trainer.k_dc() == 2);
    REQUIRE(!trainer.domain_losses_skipped());

    std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
    Batch batch = assemble_batch(*ds, idx);
    Rng rng(3);
    LossBreakdown b = trainer.adversarial_step(batch, 0.002, rng);
    REQUIRE(b.l_dc_img > 0.0);
    REQUIRE(b.l_dc_ins > 0.0);
  }

  SECTION("with augmentation off, domain losses are skipped and logged zero") {
    TrainConfig cfg;
    cfg.scg = false;
    cfg.m_views = 2;
    cfg.batch_size = 6;
    Trainer trainer(cfg, ds);
    REQUIRE(trainer.k_dc() == 1);
    REQUIRE(trainer.domain_losses_skipped());

    std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
    Batch batch = assemble_batch(*ds, idx);
    Rng rng(3);
    LossBreakdown b = trainer.adversarial_step(batch, 0.002, rng);
    REQUIRE(b.l_dc_img == 0.0);
    REQUIRE(b.l_dc_ins == 0.0);
    REQUIRE(b.l_cst == 0.0);
    REQUIRE(b.l_rc_img > 0.0);  // autoencoders still train
  }
}

TEST_CASE("a corrupted parameter aborts the step with a named tensor") {
  TempDir dir("nan");
  make_root(dir.str(), 8, 4, 902);
  auto ds = std::make_shared<Dataset>(Dataset::open(dir.sub("train")));

  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.m_views = 1;
  Trainer trainer(cfg, ds);
  trainer.model().extractor_group().params[0].value.data()[0] =
      std::numeric_limits<double>::quiet_NaN();

  std::vector<std::size_t> idx{0, 8, 1, 9};
  Batch batch = assemble_batch(*ds, idx);
  Rng rng(1);
  try {
    trainer.adversarial_step(batch, 0.002, rng);
    FAIL("expected an error");
  } catch (const Error& e) {
    REQUIRE(e.kind() == errkind::kNumeric);
    REQUIRE(std::string(e.what()).find("conv") != std::string::npos);
  }
}

TEST_CASE("training runs are bitwise reproducible") {
  TempDir dir("repro");
  make_root(dir.str(), 12, 6, 903);

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.m_views = 2;
  cfg.seed = 17;

  RunReport r1 = train_run(cfg, dir.str(), dir.sub("out1"));
  RunReport r2 = train_run(cfg, dir.str(), dir.sub("out2"));

  REQUIRE(read_text_file(dir.sub("out1") + "/report.json") ==
          read_text_file(dir.sub("out2") + "/report.json"));
  REQUIRE(read_text_file(dir.sub("out1") + "/train_log.csv") ==
          read_text_file(dir.sub("out2") + "/train_log.csv"));
  REQUIRE(read_file(dir.sub("out1") + "/model.ckpt") ==
          read_file(dir.sub("out2") + "/model.ckpt"));
  REQUIRE(r1.steps == r2.steps);

  SECTION("a different seed produces a different trajectory") {
    TrainConfig other = cfg;
    other.seed = 18;
    RunReport r3 = train_run(other, dir.str(), dir.sub("out3"));
    REQUIRE(read_text_file(dir.sub("out1") + "/train_log.csv") !=
            read_text_file(dir.sub("out3") + "/train_log.csv"));
  }

  SECTION("report structure") {
    REQUIRE(r1.epoch_losses.size() == 2);
    REQUIRE(r1.epoch_lr == std::vector<double>{0.002, 0.002});
    REQUIRE(r1.epoch_evals.size() == 2);
    REQUIRE(!r1.train_manifest_hash.empty());
    REQUIRE(!r1.test_manifest_hash.empty());
    REQUIRE(r1.final_eval.total_instances > 0);
    for (const auto& [dom, acc] : r1.final_eval.per_domain) {
      REQUIRE(acc >= 0.0);
      REQUIRE(acc <= 1.0);
    }
    // composition identity on the logged epoch means
    for (const LossBreakdown& b : r1.epoch_losses) {
      REQUIRE(b.l_mad ==
              Catch::Approx(b.l_det + cfg.lambda * (b.l_mvdc_img + b.l_mvdc_ins +
                                                    b.l_cst))
                  .margin(1e-12));
    }
  }

  SECTION("csv header names every loss field") {
    std::ifstream log(dir.sub("out1") + "/train_log.csv");
    std::string header;
    std::getline(log, header);
    REQUIRE(header ==
            "step,epoch,l_det,l_rc_img,l_rc_ins,l_dc_img,l_dc_ins,l_mv_img,"
            "l_mv_ins,l_cst,l_mvdc_img,l_mvdc_ins,l_mad,lr,seed");
  }
}

TEST_CASE("the lr drop epoch is honoured in reports") {
  TempDir dir("drop");
  make_root(dir.str(), 8, 4, 904);

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr_drop_epoch = 1;
  cfg.batch_size = 8;
  cfg.m_views = 1;
  RunReport rep = train_run(cfg, dir.str(), dir.sub("out"));
  REQUIRE(rep.epoch_lr.size() == 3);
  REQUIRE(rep.epoch_lr[0] == 0.002);
  REQUIRE(rep.epoch_lr[1] == 0.0002);
  REQUIRE(rep.epoch_lr[2] == 0.0002);
}

TEST_CASE("the erm preset degenerates to plain task training") {
  TempDir dir("erm");
  make_root(dir.str(), 12, 4, 905);

  TrainConfig cfg;
  apply_method(cfg, "erm");
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 3;
  RunReport rep = train_run(cfg, dir.str(), dir.sub("out"));

  for (const LossBreakdown& b : rep.epoch_losses) {
    REQUIRE(b.l_rc_img == 0.0);
    REQUIRE(b.l_dc_img == 0.0);
    REQUIRE(b.l_mv_img == 0.0);
    REQUIRE(b.l_cst == 0.0);
    REQUIRE(b.l_mad == b.l_det);
    REQUIRE(b.l_det > 0.0);
  }

  nlohmann::json rj =
      nlohmann::json::parse(read_text_file(dir.sub("out") + "/report.json"));
  REQUIRE(rj["dataset"]["k_dc"] == 2);
  REQUIRE(!rj.contains("wall_seconds"));
  nlohmann::json tj =
      nlohmann::json::parse(read_text_file(dir.sub("out") + "/timing.json"));
  REQUIRE(tj["wall_seconds"].get<double>() > 0.0);
}

TEST_CASE("a tiny memorization run reaches high train-set accuracy") {
  TempDir dir("memorize");
  const DataGeom geom;
  std::vector<DomainSpec> specs{make_domain_spec(0, "plain", 55),
                                make_domain_spec(1, "plain", 56)};
  generate_dataset(specs, 4, {}, geom, dir.sub("train"));
  // held-out split equal to the train split: pure memorization check
  generate_dataset(specs, 4, {}, geom, dir.sub("test"));

  TrainConfig cfg;
  apply_method(cfg, "erm");
  cfg.epochs = 600;
  cfg.lr = 0.02;
  cfg.lr_drop_epoch = 600;
  cfg.batch_size = 8;
  cfg.seed = 9;
  RunReport rep = train_run(cfg, dir.str(), dir.sub("out"));
  REQUIRE(rep.final_eval.overall >= 0.95);
}
