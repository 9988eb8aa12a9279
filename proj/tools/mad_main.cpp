// Command-line entry point: data generation, augmentation, training,
// evaluation, probing, sweeps and report emission.
//
// Exit codes: 0 success, 1 runtime failure (single-line JSON on stderr),
// 2 usage error, 3 config validation error.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#ifndef _WIN32
#include <sys/wait.h>
#endif

#include "mad/evalprobe.hpp"
#include "mad/report.hpp"

namespace {

using namespace mad;

struct GlobalArgs {
  bool quiet = false;
  std::int64_t seed_override = -1;  // -1: keep the config's seed
};

void say(const GlobalArgs& g, const std::string& line) {
  if (!g.quiet) std::cout << line << "\n";
}

nlohmann::json load_config(const std::string& path) {
  if (!std::filesystem::exists(path))
    fail(errkind::kConfig, "config file not found: " + path);
  try {
    return nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail(errkind::kConfig, "config " + path + " is not valid JSON: " + e.what());
  }
}

std::string dataset_hash_or_empty(const std::string& dir) {
  const std::string direct = dir + "/manifest.json";
  const std::string train = dir + "/train/manifest.json";
  for (const std::string& p : {direct, train})
    if (std::filesystem::exists(p))
      return detail::hash_hex(fnv1a64(read_text_file(p)));
  return "";
}

// Written before any other artifact so every output is announced up front.
void write_run_meta(const std::string& out_dir,
                    const std::vector<std::string>& argv,
                    const std::string& config_text,
                    const std::string& dataset_hash,
                    const std::vector<std::string>& outputs) {
  std::filesystem::create_directories(out_dir);
  nlohmann::json j;
  j["argv"] = argv;
  j["config_hash"] =
      config_text.empty() ? "" : detail::hash_hex(fnv1a64(config_text));
  j["dataset_hash"] = dataset_hash;
  j["versions"] = {{"checkpoint", static_cast<int>(kCheckpointVersion)},
                   {"dataset", 1}};
  j["outputs"] = outputs;
  write_text_file(out_dir + "/run_meta.json", j.dump(2) + "\n");
}

// On failure, surviving partial outputs are renamed to <name>.incomplete.
void mark_incomplete(const std::string& out_dir,
                     const std::vector<std::string>& outputs) {
  for (const std::string& name : outputs) {
    const std::string p = out_dir + "/" + name;
    std::error_code ec;
    if (std::filesystem::exists(p, ec))
      std::filesystem::rename(p, p + ".incomplete", ec);
  }
}

struct DomainListEntry {
  DomainSpec spec;
};

// gen-data config: domain list, per-split sizes, geometry, and which domains
// feed the train split. Held-out samples come from a shifted seed stream so
// the splits never overlap.
void cmd_gen_data(const GlobalArgs& g, const std::string& config_path,
                  const std::string& out_dir,
                  const std::vector<std::string>& argv) {
  nlohmann::json cfg = load_config(config_path);
  const int n_train = cfg.value("n_train", 64);
  const int n_test = cfg.value("n_test", 32);
  std::uint64_t base_seed = cfg.value("seed", 1ull);
  if (g.seed_override >= 0) base_seed = static_cast<std::uint64_t>(g.seed_override);
  if (n_train < 1 || n_test < 1)
    fail(errkind::kConfig, "n_train and n_test must be >= 1");

  DataGeom geom;
  if (cfg.contains("geom")) {
    const auto& gj = cfg["geom"];
    geom.c = gj.value("c", geom.c);
    geom.h = gj.value("h", geom.h);
    geom.w = gj.value("w", geom.w);
    geom.k_classes = gj.value("k_classes", geom.k_classes);
    geom.r_lo = gj.value("r_lo", geom.r_lo);
    geom.r_hi = gj.value("r_hi", geom.r_hi);
  }
  std::vector<double> class_weights;
  if (cfg.contains("class_weights"))
    class_weights = cfg["class_weights"].get<std::vector<double>>();

  if (!cfg.contains("domains") || !cfg["domains"].is_array() ||
      cfg["domains"].empty())
    fail(errkind::kConfig, "gen-data config needs a non-empty 'domains' array");
  std::vector<DomainSpec> all;
  for (const auto& dj : cfg["domains"]) {
    if (!dj.contains("domain_id"))
      fail(errkind::kConfig, "every domain entry needs a 'domain_id'");
    const int id = dj["domain_id"].get<int>();
    const std::uint64_t dseed =
        dj.value("seed", base_seed * 100 + static_cast<std::uint64_t>(id) + 1);
    if (dj.contains("style")) {
      StyleParams sp;
      const auto& sj = dj["style"];
      sp.bias_amp = sj.value("bias_amp", sp.bias_amp);
      if (sj.contains("bias_dir"))
        sp.bias_dir = sj["bias_dir"].get<std::array<double, 3>>();
      sp.tilt_amp = sj.value("tilt_amp", sp.tilt_amp);
      sp.tilt_angle = sj.value("tilt_angle", sp.tilt_angle);
      sp.tex_amp = sj.value("tex_amp", sp.tex_amp);
      sp.tex_radius = sj.value("tex_radius", sp.tex_radius);
      sp.per_sample_jitter = sj.value("per_sample_jitter", sp.per_sample_jitter);
      sp.jitter_frac = sj.value("jitter_frac", sp.jitter_frac);
      sp.class_bias_amp = sj.value("class_bias_amp", sp.class_bias_amp);
      sp.class_band_amp = sj.value("class_band_amp", sp.class_band_amp);
      sp.class_style_shift = sj.value("class_style_shift", sp.class_style_shift);
      all.push_back(make_domain_spec(id, sp, dseed));
    } else {
      all.push_back(make_domain_spec(id, dj.value("preset", "plain"), dseed));
    }
  }

  std::vector<int> sources;
  if (cfg.contains("source_domains"))
    sources = cfg["source_domains"].get<std::vector<int>>();
  else
    for (std::size_t i = 0; i + 1 < all.size(); ++i)
      sources.push_back(all[i].domain_id);
  if (sources.empty()) fail(errkind::kConfig, "source_domains must be non-empty");

  std::vector<DomainSpec> train_specs;
  for (int id : sources) {
    bool found = false;
    for (const auto& s : all)
      if (s.domain_id == id) {
        train_specs.push_back(s);
        found = true;
      }
    if (!found)
      fail(errkind::kConfig,
           "source domain " + std::to_string(id) + " is not in 'domains'");
  }
  // held-out split: every domain, disjoint seed stream
  std::vector<DomainSpec> test_specs = all;
  for (auto& s : test_specs) s.seed += 1000003;

  const std::vector<std::string> outputs{"train", "test", "gen_config.json"};
  write_run_meta(out_dir, argv, cfg.dump(), "", outputs);
  try {
    generate_dataset(train_specs, n_train, class_weights, geom,
                     out_dir + "/train");
    generate_dataset(test_specs, n_test, class_weights, geom, out_dir + "/test");
    nlohmann::json echo = cfg;
    echo["seed"] = base_seed;
    echo["source_domains"] = sources;
    write_text_file(out_dir + "/gen_config.json", echo.dump(2) + "\n");
  } catch (...) {
    mark_incomplete(out_dir, outputs);
    throw;
  }
  say(g, "gen-data: wrote " + std::to_string(train_specs.size()) +
             " train domains x " + std::to_string(n_train) + " and " +
             std::to_string(test_specs.size()) + " test domains x " +
             std::to_string(n_test) + " under " + out_dir);
}

void cmd_augment(const GlobalArgs& g, const std::string& config_path,
                 const std::string& data_dir, const std::string& out_dir,
                 const std::vector<std::string>& argv) {
  nlohmann::json cfg = config_path.empty() ? nlohmann::json::object()
                                           : load_config(config_path);
  ScgConfig sc;
  sc.r_lo = cfg.value("r_lo", sc.r_lo);
  sc.r_hi = cfg.value("r_hi", sc.r_hi);
  sc.sigma = cfg.value("sigma", sc.sigma);
  if (cfg.contains("mode")) sc.mode = scg_mode_from_name(cfg["mode"].get<std::string>());
  std::uint64_t seed = cfg.value("seed", 0ull);
  if (g.seed_override >= 0) seed = static_cast<std::uint64_t>(g.seed_override);

  Dataset ds = Dataset::open(data_dir);
  const std::vector<std::string> outputs{"manifest.json", "augment_meta.json"};
  write_run_meta(out_dir, argv, cfg.dump(), dataset_hash_or_empty(data_dir),
                 outputs);
  try {
    std::filesystem::copy_file(
        data_dir + "/manifest.json", out_dir + "/manifest.json",
        std::filesystem::copy_options::overwrite_existing);
    Rng rng(seed);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      Sample s = ds.sample(i);
      Rng srng = rng.fork(static_cast<std::uint64_t>(i));
      s.image = scg_augment(s.image, sc, srng);
      const int n = ds.manifest().n_per_domain;
      write_file(out_dir + "/" +
                     sample_filename(s.domain_id, static_cast<int>(i) % n),
                 encode_sample(s));
    }
    nlohmann::json meta;
    meta["seed"] = seed;
    meta["r_lo"] = sc.r_lo;
    meta["r_hi"] = sc.r_hi;
    meta["sigma"] = sc.sigma;
    meta["mode"] = scg_mode_name(sc.mode);
    meta["samples"] = ds.size();
    write_text_file(out_dir + "/augment_meta.json", meta.dump(2) + "\n");
  } catch (...) {
    mark_incomplete(out_dir, outputs);
    throw;
  }
  say(g, "augment: wrote " + std::to_string(ds.size()) + " samples to " + out_dir);
}

void cmd_train(const GlobalArgs& g, const std::string& config_path,
               const std::string& data_root, const std::string& out_dir,
               const std::vector<std::string>& argv) {
  nlohmann::json cfg_json = load_config(config_path);
  TrainConfig cfg = train_config_from_json(cfg_json);
  if (g.seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(g.seed_override);

  const std::vector<std::string> outputs{"report.json", "train_log.csv",
                                         "model.ckpt", "timing.json"};
  write_run_meta(out_dir, argv, cfg_json.dump(),
                 dataset_hash_or_empty(data_root), outputs);
  try {
    RunReport rep = train_run(cfg, data_root, out_dir);
    say(g, "train: " + std::to_string(rep.steps) + " steps, final accuracy " +
               fmt_num(rep.final_eval.overall));
  } catch (...) {
    mark_incomplete(out_dir, outputs);
    throw;
  }
}

void cmd_eval(const GlobalArgs& g, const std::string& ckpt,
              const std::string& data_dir, const std::string& out_dir,
              int batch_size, const std::vector<std::string>& argv) {
  Dataset ds = Dataset::open(data_dir);
  const std::vector<std::string> outputs{"eval.json"};
  write_run_meta(out_dir, argv, "", dataset_hash_or_empty(data_dir), outputs);
  try {
    EpochEval ev = evaluate_accuracy(ckpt, ds, batch_size);
    nlohmann::json j = epoch_eval_to_json(ev);
    j["checkpoint"] = ckpt;
    write_text_file(out_dir + "/eval.json", j.dump(2) + "\n");
    say(g, "eval: overall accuracy " + fmt_num(ev.overall) + " over " +
               std::to_string(ev.total_instances) + " instances");
  } catch (...) {
    mark_incomplete(out_dir, outputs);
    throw;
  }
}

void cmd_probe(const GlobalArgs& g, const std::string& ckpt,
               const std::string& data_dir, const std::string& config_path,
               const std::string& out_dir,
               const std::vector<std::string>& argv) {
  nlohmann::json cfg = config_path.empty() ? nlohmann::json::object()
                                           : load_config(config_path);
  ProbeConfig pc;
  pc.epochs_per_phase = cfg.value("epochs_per_phase", pc.epochs_per_phase);
  pc.lr = cfg.value("lr", pc.lr);
  pc.momentum = cfg.value("momentum", pc.momentum);
  pc.batch_size = cfg.value("batch_size", pc.batch_size);
  pc.seed = cfg.value("seed", pc.seed);
  if (g.seed_override >= 0) pc.seed = static_cast<std::uint64_t>(g.seed_override);
  if (pc.epochs_per_phase < 1 || pc.lr <= 0 || pc.batch_size < 1)
    fail(errkind::kConfig, "probe config: epochs_per_phase, lr, batch_size must be positive");

  Dataset ds = Dataset::open(data_dir);
  MadModel model = MadModel::load(ckpt);
  const std::vector<std::string> outputs{"probe.json", "probe_curves.svg"};
  write_run_meta(out_dir, argv, cfg.dump(), dataset_hash_or_empty(data_dir),
                 outputs);
  try {
    ProbeResult pr = residual_probe(model, ds, pc);
    nlohmann::json j;
    j["k_domains"] = pr.k_domains;
    j["shallow_accuracy"] = pr.shallow_accuracy;
    j["deepened_accuracy"] = pr.deepened_accuracy;
    j["shallow_curve"] = pr.shallow_curve;
    j["deepened_curve"] = pr.deepened_curve;
    j["checkpoint"] = ckpt;
    write_text_file(out_dir + "/probe.json", j.dump(2) + "\n");

    Series s1, s2;
    s1.label = "shallow";
    s2.label = "deepened";
    for (std::size_t e = 0; e < pr.shallow_curve.size(); ++e) {
      s1.x.push_back(static_cast<double>(e));
      s1.y.push_back(pr.shallow_curve[e]);
    }
    for (std::size_t e = 0; e < pr.deepened_curve.size(); ++e) {
      s2.x.push_back(static_cast<double>(e));
      s2.y.push_back(pr.deepened_curve[e]);
    }
    write_text_file(out_dir + "/probe_curves.svg",
                    line_plot("domain probe loss", "epoch", "cross-entropy",
                              {s1, s2}));
    say(g, "probe: shallow " + fmt_num(pr.shallow_accuracy) + ", deepened " +
               fmt_num(pr.deepened_accuracy));
  } catch (...) {
    mark_incomplete(out_dir, outputs);
    throw;
  }
}

// Child runs are full CLI invocations so cells are isolated OS processes.
SweepLauncher process_launcher(const std::string& self_exe) {
  return [self_exe](const nlohmann::json&, const std::string& data_root,
                    const std::string& run_dir) {
    const std::string cmd = "\"" + self_exe + "\" --quiet train --config \"" +
                            run_dir + "/cfg.json\" --data \"" + data_root +
                            "\" --out \"" + run_dir + "\" > \"" + run_dir +
                            "/child.log\" 2>&1";
    const int status = std::system(cmd.c_str());
#ifdef _WIN32
    return status;
#else
    if (WIFEXITED(status)) return WEXITSTATUS(status);
    return status == 0 ? 0 : 1;
#endif
  };
}

void cmd_sweep(const GlobalArgs& g, const std::string& config_path,
               const std::string& data_root, const std::string& out_dir,
               int jobs, const std::string& self_exe,
               const std::vector<std::string>& argv) {
  nlohmann::json cfg = load_config(config_path);
  nlohmann::json base = cfg.value("base", nlohmann::json::object());
  train_config_from_json(base);  // surface config errors as exit 3

  std::vector<SweepCellSpec> grid;
  const std::string kind = cfg.value("grid", "cells");
  if (kind == "m") {
    std::vector<int> ms = cfg.value("ms", std::vector<int>{1, 2, 3});
    grid = m_grid(ms);
  } else if (kind == "lambda") {
    std::vector<double> ls =
        cfg.value("lambdas", std::vector<double>{0.05, 0.1, 0.2});
    grid = lambda_grid(ls);
  } else if (kind == "ablation") {
    grid = ablation_grid();
  } else if (kind == "cells") {
    if (!cfg.contains("cells") || !cfg["cells"].is_array() || cfg["cells"].empty())
      fail(errkind::kConfig,
           "sweep config needs 'grid' in {m, lambda, ablation} or a 'cells' array");
    for (const auto& c : cfg["cells"])
      grid.push_back({c.value("name", "cell" + std::to_string(grid.size())),
                      c.value("overrides", nlohmann::json::object())});
  } else {
    fail(errkind::kConfig, "unknown sweep grid '" + kind + "'");
  }

  std::vector<std::uint64_t> seeds =
      cfg.value("seeds", std::vector<std::uint64_t>{1, 2, 3});
  if (g.seed_override >= 0) {
    seeds.clear();
    seeds.push_back(static_cast<std::uint64_t>(g.seed_override));
  }

  const std::vector<std::string> outputs{"sweep.csv", "sweep_summary.csv",
                                         "sweep_table.json", "sweep_plot.svg"};
  write_run_meta(out_dir, argv, cfg.dump(), dataset_hash_or_empty(data_root),
                 outputs);
  try {
    SweepTable table = run_sweep(base, grid, seeds, data_root, out_dir, jobs,
                                 process_launcher(self_exe));
    int failures = 0;
    for (const auto& r : table.runs) failures += r.ok ? 0 : 1;
    say(g, "sweep: " + std::to_string(table.runs.size()) + " runs, " +
               std::to_string(failures) + " failed");
  } catch (...) {
    mark_incomplete(out_dir, outputs);
    throw;
  }
}

void cmd_report(const GlobalArgs& g, const std::vector<std::string>& run_dirs,
                const std::string& out_dir,
                const std::vector<std::string>& argv) {
  const std::vector<std::string> outputs{"report.md"};
  write_run_meta(out_dir, argv, "", "", outputs);
  try {
    emit_report(run_dirs, out_dir);
    say(g, "report: wrote " + out_dir + "/report.md");
  } catch (...) {
    mark_incomplete(out_dir, outputs);
    throw;
  }
}

int exit_code_for(const Error& e) {
  const std::string kind = e.kind();
  if (kind == errkind::kConfig) return 3;
  if (kind == errkind::kUsage) return 2;
  return 1;
}

void print_error_json(const std::string& kind, const std::string& message) {
  nlohmann::json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> argv_vec(argv, argv + argc);
  GlobalArgs g;

  CLI::App app{"multi-view adversarial domain generalization toolkit"};
  app.require_subcommand(1);
  app.add_flag("--quiet", g.quiet, "suppress progress output");
  app.add_option("--seed", g.seed_override,
                 "override the config seed for this invocation");

  std::string config_path, data_path, out_path, ckpt_path;
  int batch_size = 16;
  int jobs = 1;
  std::vector<std::string> run_dirs;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic benchmark");
  gen->add_option("--config", config_path, "benchmark config JSON")->required();
  gen->add_option("--out", out_path, "output root (train/ and test/)")->required();

  CLI::App* aug = app.add_subcommand("augment", "write an augmented copy of a dataset");
  aug->add_option("--config", config_path, "augmentation config JSON");
  aug->add_option("--data", data_path, "dataset directory")->required();
  aug->add_option("--out", out_path, "output dataset directory")->required();

  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "training config JSON")->required();
  train->add_option("--data", data_path, "dataset root or directory")->required();
  train->add_option("--out", out_path, "run output directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  eval->add_option("--data", data_path, "dataset directory")->required();
  eval->add_option("--out", out_path, "output directory")->required();
  eval->add_option("--batch", batch_size, "evaluation batch size");

  CLI::App* probe = app.add_subcommand("probe", "residual domain probe on frozen features");
  probe->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  probe->add_option("--data", data_path, "dataset directory")->required();
  probe->add_option("--config", config_path, "probe config JSON");
  probe->add_option("--out", out_path, "output directory")->required();

  CLI::App* sweep = app.add_subcommand("sweep", "train over a config grid");
  sweep->add_option("--config", config_path, "sweep config JSON")->required();
  sweep->add_option("--data", data_path, "dataset root")->required();
  sweep->add_option("--out", out_path, "sweep output directory")->required();
  sweep->add_option("--jobs", jobs, "parallel child processes");

  CLI::App* report = app.add_subcommand("report", "consolidated markdown + SVG report");
  report->add_option("--out", out_path, "report output directory")->required();
  report->add_option("dirs", run_dirs, "run or sweep directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) cmd_gen_data(g, config_path, out_path, argv_vec);
    if (aug->parsed()) cmd_augment(g, config_path, data_path, out_path, argv_vec);
    if (train->parsed()) cmd_train(g, config_path, data_path, out_path, argv_vec);
    if (eval->parsed()) cmd_eval(g, ckpt_path, data_path, out_path, batch_size, argv_vec);
    if (probe->parsed()) cmd_probe(g, ckpt_path, data_path, config_path, out_path, argv_vec);
    if (sweep->parsed()) cmd_sweep(g, config_path, data_path, out_path, jobs, argv_vec[0], argv_vec);
    if (report->parsed()) cmd_report(g, run_dirs, out_path, argv_vec);
  } catch (const Error& e) {
    print_error_json(e.kind(), e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    print_error_json("runtime", e.what());
    return 1;
  }
  return 0;
}
