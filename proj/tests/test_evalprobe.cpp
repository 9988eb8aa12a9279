#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "mad/evalprobe.hpp"

using namespace mad;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("mad_evalprobe_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

void make_root(const std::string& root, int n_train, int n_test,
               std::uint64_t seed) {
  const DataGeom geom;
  std::vector<DomainSpec> specs{make_domain_spec(0, "bright", seed + 1),
                                make_domain_spec(1, "dark", seed + 2)};
  generate_dataset(specs, n_train, {}, geom, root + "/train");
  generate_dataset(specs, n_test, {}, geom, root + "/test");
}

Tensor gaussian_rows(int n, int d, double mean, Rng& rng) {
  Tensor t = Tensor::zeros({n, d});
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = mean + rng.normal();
  return t;
}

}  // namespace

TEST_CASE("checkpoint accuracy matches the trainer's held-out evaluation") {
  TempDir dir("acc");
  make_root(dir.str(), 6, 4, 300);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.m_views = 1;
  RunReport rep = train_run(cfg, dir.str(), dir.sub("out"));

  Dataset test = Dataset::open(dir.sub("test"));
  // checkpoint_path is relative to the run dir so report.json stays portable
  EpochEval ev =
      evaluate_accuracy(dir.sub("out") + "/" + rep.checkpoint_path, test, 16);
  REQUIRE(ev.overall == rep.final_eval.overall);
  REQUIRE(ev.total_instances == rep.final_eval.total_instances);
  REQUIRE(ev.per_domain == rep.final_eval.per_domain);

  SECTION("class-arity mismatch is rejected") {
    ModelConfig mc;
    mc.k_classes = 3;
    mc.m_views = 1;
    MadModel other(mc);
    other.save(dir.sub("other.ckpt"));
    REQUIRE_THROWS_AS(evaluate_accuracy(dir.sub("other.ckpt"), test), Error);
  }
}

TEST_CASE("a random-init model scores at chance level") {
  TempDir dir("chance");
  const DataGeom geom;
  std::vector<DomainSpec> specs{make_domain_spec(0, "bright", 7),
                                make_domain_spec(1, "dark", 8)};
  generate_dataset(specs, 150, {}, geom, dir.sub("data"));
  Dataset ds = Dataset::open(dir.sub("data"));

  ModelConfig mc;
  mc.m_views = 1;
  mc.seed = 123;
  MadModel model(mc);
  EpochEval ev = evaluate_model(model, ds, 16);
  REQUIRE(ev.total_instances >= 500);
  REQUIRE(ev.overall == Catch::Approx(0.25).margin(0.05));

  // overall is the instance-weighted mean, so it lies between the extremes
  double lo = 1.0, hi = 0.0;
  for (const auto& [dom, acc] : ev.per_domain) {
    lo = std::min(lo, acc);
    hi = std::max(hi, acc);
  }
  REQUIRE(ev.overall >= lo);
  REQUIRE(ev.overall <= hi);
}

TEST_CASE("residual probe: no domain signal means chance accuracy") {
  Rng rng(42);
  const int n = 600, d = 8;
  Tensor feats = gaussian_rows(n, d, 0.0, rng);
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.below(2)));

  ProbeResult pr = residual_probe_features(feats, labels, 2);
  REQUIRE(pr.shallow_accuracy == Catch::Approx(0.5).margin(0.15));
  REQUIRE(pr.deepened_accuracy == Catch::Approx(0.5).margin(0.15));
  REQUIRE(pr.shallow_curve.size() == 20);
  REQUIRE(pr.deepened_curve.size() == 20);
}

TEST_CASE("residual probe: separable features saturate in phase 1") {
  Rng rng(43);
  const int n = 200, d = 8;
  Tensor a = gaussian_rows(n, d, -2.0, rng);
  Tensor b = gaussian_rows(n, d, +2.0, rng);
  Tensor feats = Tensor::zeros({2 * n, d});
  std::copy_n(a.data(), a.numel(), feats.data());
  std::copy_n(b.data(), b.numel(), feats.data() + a.numel());
  std::vector<int> labels(n, 0);
  labels.insert(labels.end(), n, 1);

  ProbeResult pr = residual_probe_features(feats, labels, 2);
  REQUIRE(pr.shallow_accuracy >= 0.95);
  // identity-initialized residual block cannot hurt beyond optimization noise
  REQUIRE(pr.deepened_accuracy >= pr.shallow_accuracy - 0.02);

  SECTION("contract checks") {
    REQUIRE_THROWS_AS(residual_probe_features(feats, labels, 1), Error);
    std::vector<int> bad = labels;
    bad[0] = 7;
    REQUIRE_THROWS_AS(residual_probe_features(feats, bad, 2), Error);
  }
}

TEST_CASE("probing a trained extractor through the dataset wrapper") {
  TempDir dir("probe");
  make_root(dir.str(), 30, 4, 301);
  Dataset train = Dataset::open(dir.sub("train"));

  ModelConfig mc;
  mc.m_views = 1;
  mc.seed = 5;
  MadModel model(mc);
  ProbeResult pr = residual_probe(model, train);
  REQUIRE(pr.k_domains == 2);
  REQUIRE(pr.shallow_accuracy >= 0.0);
  REQUIRE(pr.shallow_accuracy <= 1.0);
  REQUIRE(pr.deepened_accuracy >= pr.shallow_accuracy - 0.02);

  const DataGeom geom;
  std::vector<DomainSpec> one{make_domain_spec(0, "plain", 1)};
  generate_dataset(one, 4, {}, geom, dir.sub("single"));
  Dataset single = Dataset::open(dir.sub("single"));
  REQUIRE_THROWS_AS(residual_probe(model, single), Error);
}

TEST_CASE("a-distance proxy separates and saturates") {
  Rng rng(11);
  const int n = 120, d = 6;

  SECTION("identical distributions give a small value") {
    Tensor a = gaussian_rows(n, d, 0.0, rng);
    Tensor b = gaussian_rows(n, d, 0.0, rng);
    REQUIRE(a_distance_proxy(a, b) <= 0.4);
  }

  SECTION("disjoint point masses give nearly 2") {
    Tensor a = gaussian_rows(n, d, 0.0, rng);
    Tensor b = gaussian_rows(n, d, 8.0, rng);
    REQUIRE(a_distance_proxy(a, b) >= 1.9);
  }

  SECTION("symmetric under swapping groups, and always within range") {
    Tensor a = gaussian_rows(n, d, 0.0, rng);
    Tensor b = gaussian_rows(n, d, 0.7, rng);
    const double ab = a_distance_proxy(a, b, 3);
    const double ba = a_distance_proxy(b, a, 3);
    REQUIRE(ab == ba);
    REQUIRE(ab >= 0.0);
    REQUIRE(ab <= 2.0);
  }

  SECTION("contract checks") {
    Tensor small = gaussian_rows(20, d, 0.0, rng);
    Tensor full = gaussian_rows(n, d, 0.0, rng);
    REQUIRE_THROWS_AS(a_distance_proxy(small, full), Error);
    Tensor wrong = gaussian_rows(n, d + 1, 0.0, rng);
    REQUIRE_THROWS_AS(a_distance_proxy(full, wrong), Error);
  }
}

TEST_CASE("view divergence report") {
  TempDir dir("vdiv");
  make_root(dir.str(), 6, 4, 302);
  Dataset train = Dataset::open(dir.sub("train"));
  Batch batch = assemble_batch(train, {0, 1, 6, 7});

  SECTION("single view yields a notice, not an error") {
    ModelConfig mc;
    mc.m_views = 1;
    MadModel model(mc);
    ViewDivergence vd = view_divergence_report(model, batch);
    REQUIRE(!vd.notice.empty());
    REQUIRE(vd.image_dist.empty());
    REQUIRE(vd.instance_dist.empty());
  }

  SECTION("matrices are symmetric with an exactly zero diagonal") {
    ModelConfig mc;
    mc.m_views = 3;
    mc.seed = 21;
    MadModel model(mc);
    ViewDivergence vd = view_divergence_report(model, batch);
    REQUIRE(vd.notice.empty());
    REQUIRE(vd.image_dist.size() == 3);
    REQUIRE(vd.instance_dist.size() == 3);
    for (int i = 0; i < 3; ++i) {
      REQUIRE(vd.image_dist[i][i] == 0.0);
      REQUIRE(vd.instance_dist[i][i] == 0.0);
      for (int j = 0; j < 3; ++j) {
        REQUIRE(vd.image_dist[i][j] == vd.image_dist[j][i]);
        if (i != j) REQUIRE(vd.image_dist[i][j] > 0.0);
      }
    }
    REQUIRE(vd.image_points.size() == 3 * 4);
    std::size_t n_inst = 0;
    for (const auto& cs : batch.classes) n_inst += cs.size();
    REQUIRE(vd.instance_points.size() == 3 * n_inst);
    for (const auto& p : vd.image_points) {
      REQUIRE(std::isfinite(p.x));
      REQUIRE(std::isfinite(p.y));
    }
    REQUIRE(mean_offdiagonal(vd.image_dist) > 0.0);
  }
}

TEST_CASE("principal axes recover a planted direction") {
  // points spread along e0 with +-10, tiny noise elsewhere
  std::vector<std::vector<double>> rows;
  Rng rng(9);
  for (int i = 0; i < 80; ++i) {
    std::vector<double> r(5, 0.0);
    r[0] = (i % 2 ? 10.0 : -10.0) + 0.01 * rng.normal();
    r[2] = 0.5 * rng.normal();
    rows.push_back(r);
  }
  const auto pcs = detail::top2_components(rows);
  REQUIRE(std::abs(pcs[0][0]) == Catch::Approx(1.0).margin(1e-3));
  REQUIRE(std::abs(pcs[1][2]) == Catch::Approx(1.0).margin(0.05));
  // sign convention: dominant loading positive
  REQUIRE(pcs[0][0] > 0.0);
}

TEST_CASE("sweeps aggregate runs and tolerate failures") {
  TempDir dir("sweep");
  make_root(dir.str(), 6, 4, 303);

  nlohmann::json base;
  base["epochs"] = 1;
  base["batch_size"] = 8;
  base["m_views"] = 1;

  SECTION("grid x seeds bookkeeping and hand-checked std") {
    auto table = run_sweep(base, m_grid({1, 2}), {1, 2, 3}, dir.str(),
                           dir.sub("sw"), 1, in_process_launcher());
    REQUIRE(table.cells.size() == 2);
    REQUIRE(table.runs.size() == 6);
    for (const auto& r : table.runs) REQUIRE(r.ok);
    for (const auto& c : table.cells) {
      REQUIRE(c.n_ok == 3);
      REQUIRE(c.seeds == std::vector<std::uint64_t>{1, 2, 3});
      std::vector<double> accs;
      for (const auto& r : table.runs)
        if (r.cell == c.name) accs.push_back(r.target_acc);
      double mean = (accs[0] + accs[1] + accs[2]) / 3.0;
      double var = 0.0;
      for (double a : accs) var += (a - mean) * (a - mean);
      REQUIRE(c.mean == Catch::Approx(mean).margin(1e-12));
      REQUIRE(c.stdev == Catch::Approx(std::sqrt(var / 2.0)).margin(1e-12));
    }
    REQUIRE(fs::exists(dir.sub("sw") + "/sweep.csv"));
    REQUIRE(fs::exists(dir.sub("sw") + "/sweep_summary.csv"));
    REQUIRE(fs::exists(dir.sub("sw") + "/sweep_plot.svg"));
    const std::string csv = read_text_file(dir.sub("sw") + "/sweep.csv");
    REQUIRE(csv.rfind("cell,seed,ok,target_acc,run_dir,error", 0) == 0);
  }

  SECTION("a failing cell is recorded and the sweep continues") {
    std::vector<SweepCellSpec> grid = m_grid({1});
    nlohmann::json bad;
    bad["source_domains"] = {99};  // passes config checks, fails at run time
    grid.push_back({"broken", bad});
    auto table = run_sweep(base, grid, {1}, dir.str(), dir.sub("sw2"), 1,
                           in_process_launcher());
    REQUIRE(table.cells.size() == 2);
    REQUIRE(table.cells[0].n_ok == 1);
    REQUIRE(table.cells[1].n_ok == 0);
    bool found_error = false;
    for (const auto& r : table.runs)
      if (r.cell == "broken" && !r.ok && !r.error.empty()) found_error = true;
    REQUIRE(found_error);
  }
}

TEST_CASE("target accuracy extraction from run reports") {
  nlohmann::json rep;
  rep["config"]["source_domains"] = {0};
  rep["final_eval"]["overall"] = 0.8;
  rep["final_eval"]["per_domain"] = {{"0", 0.9}, {"1", 0.5}, {"2", 0.7}};
  REQUIRE(target_accuracy_from_report(rep) == Catch::Approx(0.6).margin(1e-12));

  rep["config"]["source_domains"] = nlohmann::json::array();
  REQUIRE(target_accuracy_from_report(rep) == 0.8);

  rep["config"]["source_domains"] = {0, 1, 2};
  REQUIRE_THROWS_AS(target_accuracy_from_report(rep), Error);
}

TEST_CASE("sweep grids") {
  const auto ab = ablation_grid();
  REQUIRE(ab.size() == 4);
  REQUIRE(ab[0].name == "none");
  REQUIRE(ab[3].overrides["consistency"] == true);

  const auto ms = m_grid({0, 3});
  REQUIRE(ms[0].overrides["image_views"] == false);
  REQUIRE(!ms[1].overrides.contains("image_views"));

  const auto ls = lambda_grid({0.05, 0.2});
  REQUIRE(ls[0].name == "lambda0.05");
  REQUIRE(ls[1].overrides["lambda"] == 0.2);
}
