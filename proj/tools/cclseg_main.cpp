#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "cclseg/membench.hpp"
#include "cclseg/trainer.hpp"

using namespace cclseg;

namespace {

TrainConfig build_config(const std::string& config_path,
                         const std::vector<std::string>& overrides) {
  TrainConfig cfg;
  if (!config_path.empty()) cfg = TrainConfig::load(config_path, /*env=*/true);
  else cfg.apply_env();
  if (!overrides.empty()) {
    io::Manifest m = cfg.to_manifest();
    for (const std::string& kv : overrides) {
      const auto eq = kv.find('=');
      CCLSEG_REQUIRE(eq != std::string::npos, "--set expects key=value, got: " + kv);
      const std::string key = kv.substr(0, eq);
      CCLSEG_REQUIRE(m.has(key), "--set: unknown config key '" + key + "'");
      m.set(key, kv.substr(eq + 1));
    }
    cfg = TrainConfig::from_manifest(m);
  }
  return cfg;
}

void print_eval(const EvalResult& ev, int fold) {
  std::cout << metrics_table("target fold " + std::to_string(fold), ev.target);
  if (!ev.source.per_class.empty())
    std::cout << metrics_table("source fold " + std::to_string(fold), ev.source);
}

int cmd_gen_data(const std::string& out, uint64_t seed, SynthParams params) {
  auto corpus = generate_corpus(params, seed);
  save_corpus(out, corpus, params, seed);
  int per_domain[3] = {0, 0, 0};
  for (const auto& s : corpus) per_domain[static_cast<int>(s.domain)]++;
  std::cout << "wrote " << corpus.size() << " slices to " << out << " (source "
            << per_domain[0] << ", target " << per_domain[1] << ", aux "
            << per_domain[2] << ")\n";
  return 0;
}

int cmd_train(TrainConfig cfg, const std::string& resume) {
  Trainer trainer(cfg, load_corpus(cfg.corpus_dir));
  if (!resume.empty()) {
    trainer.load_checkpoint(resume);
    std::cout << "resumed at epoch " << trainer.epoch() << "\n";
  }
  EvalResult ev = trainer.run();
  print_eval(ev, cfg.fold);
  std::cout << "artifacts in " << cfg.out_dir << "\n";
  return 0;
}

int cmd_evaluate(const std::string& run_dir, const std::string& checkpoint,
                 const std::string& out_dir) {
  TrainConfig cfg = TrainConfig::load(run_dir + "/config.txt", /*env=*/false);
  cfg.out_dir = out_dir.empty() ? run_dir + "/eval" : out_dir;
  Trainer trainer(cfg, load_corpus(cfg.corpus_dir));
  trainer.load_checkpoint(checkpoint.empty() ? run_dir + "/checkpoint_final"
                                             : checkpoint);
  EvalResult ev = trainer.evaluate();
  io::make_dirs(cfg.out_dir);
  io::write_text_file(cfg.out_dir + "/metrics_target.csv", metrics_csv(ev.target));
  if (!ev.source.per_class.empty())
    io::write_text_file(cfg.out_dir + "/metrics_source.csv", metrics_csv(ev.source));
  trainer.write_overlays(cfg.out_dir + "/overlays");
  print_eval(ev, cfg.fold);
  return 0;
}

int cmd_ablate(TrainConfig base, int seeds) {
  struct Rung {
    const char* name;
    bool ccl, cnr, mpccl;
  };
  const Rung lattice[] = {{"fuda", false, false, false},
                          {"fuda+ccl", true, false, false},
                          {"fuda+ccl+cnr", true, true, false},
                          {"fuda+ccl+cnr+mpccl", true, true, true}};
  io::make_dirs(base.out_dir);
  std::string csv = "config,seed,target_dice_mean,target_hd95_mean\n";
  std::vector<std::vector<double>> dice(4);
  for (int s = 0; s < seeds; ++s) {
    for (int r = 0; r < 4; ++r) {
      TrainConfig cfg = base;
      cfg.seed = base.seed + static_cast<uint64_t>(s);
      cfg.use_style = true;
      cfg.use_ccl = lattice[r].ccl;
      cfg.use_cnr = lattice[r].cnr;
      cfg.use_mpccl = lattice[r].mpccl;
      cfg.out_dir = base.out_dir + "/" + lattice[r].name + "_seed" + std::to_string(s);
      Trainer trainer(cfg, load_corpus(cfg.corpus_dir));
      EvalResult ev = trainer.run();
      dice[static_cast<size_t>(r)].push_back(ev.target.average.dice_mean);
      char row[160];
      std::snprintf(row, sizeof(row), "%s,%d,%.6f,%.6f\n", lattice[r].name, s,
                    ev.target.average.dice_mean, ev.target.average.hd95_mean);
      csv += row;
      std::cout << lattice[r].name << " seed " << s << ": dice "
                << ev.target.average.dice_mean << "\n";
    }
  }
  int monotone_seeds = 0;
  std::string summary;
  for (int s = 0; s < seeds; ++s) {
    bool ok = true;
    for (int r = 1; r < 4; ++r)
      ok = ok && dice[static_cast<size_t>(r)][static_cast<size_t>(s)] >=
                     dice[static_cast<size_t>(r - 1)][static_cast<size_t>(s)];
    monotone_seeds += ok;
    summary += "seed " + std::to_string(s) + ": " +
               (ok ? "nondecreasing" : "ORDER VIOLATION") + "\n";
  }
  summary += "monotone in " + std::to_string(monotone_seeds) + "/" +
             std::to_string(seeds) + " seeds\n";
  io::write_text_file(base.out_dir + "/ablation.csv", csv);
  io::write_text_file(base.out_dir + "/ablation_summary.txt", summary);
  std::cout << summary;
  return 0;
}

int cmd_bench(const std::string& out, std::vector<Index> sizes, Index channels,
              Index classes, int partitions, double tau, uint64_t seed) {
  BenchSweep sweep = run_sweep(sizes, channels, classes, partitions, tau, seed);
  io::make_dirs(out);
  io::write_text_file(out + "/membench.csv", sweep.csv());
  io::write_text_file(out + "/membench.svg", sweep.svg());
  std::cout << "pixelwise pairwise slope: " << sweep.pixelwise_pairwise_slope
            << "\ncentroid pairwise slope: " << sweep.centroid_pairwise_slope
            << "\nwrote " << out << "/membench.csv\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<MetricsReport> folds;
  for (const std::string& path : inputs)
    folds.push_back(metrics_from_csv(io::read_text_file(path)));
  MetricsReport agg = aggregate(folds);
  io::make_dirs(out);
  io::write_text_file(out + "/aggregate.csv", metrics_csv(agg));
  const std::string table =
      metrics_table("aggregate over " + std::to_string(folds.size()) + " reports", agg);
  io::write_text_file(out + "/aggregate.txt", table);
  // carry overlay renderings from the first run that has them
  for (const std::string& path : inputs) {
    const auto dir = std::filesystem::path(path).parent_path() / "overlays";
    if (std::filesystem::exists(dir)) {
      std::filesystem::create_directories(out + "/overlays");
      for (const auto& e : std::filesystem::directory_iterator(dir))
        std::filesystem::copy_file(e.path(),
                                   out + "/overlays/" + e.path().filename().string(),
                                   std::filesystem::copy_options::overwrite_existing);
      break;
    }
  }
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"centroid-contrastive domain adaptation for synthetic cardiac-like segmentation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic two-domain corpus");
  std::string gen_out = "corpus";
  uint64_t gen_seed = 1;
  SynthParams params;
  gen->add_option("--out", gen_out, "corpus directory");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--size", params.image_size, "square image size");
  gen->add_option("--source-subjects", params.source_subjects);
  gen->add_option("--target-subjects", params.target_subjects);
  gen->add_option("--aux-subjects", params.aux_subjects);
  gen->add_option("--min-slices", params.min_slices);
  gen->add_option("--max-slices", params.max_slices);
  gen->add_option("--folds", params.folds);

  // shared config options
  std::string config_path, resume_dir;
  std::vector<std::string> overrides;
  auto add_cfg = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key=value config file");
    cmd->add_option("--set", overrides, "override a config key (key=value)")
        ->take_all();
  };

  auto* pre = app.add_subcommand("pretrain-style",
                                 "train the style module on source+aux only");
  add_cfg(pre);

  auto* train = app.add_subcommand("train", "two-phase adaptation training");
  add_cfg(train);
  train->add_option("--resume", resume_dir, "checkpoint directory to resume from");

  auto* eval = app.add_subcommand("evaluate", "evaluate a finished run");
  std::string eval_run, eval_ckpt, eval_out;
  eval->add_option("--run", eval_run, "run directory (with config.txt)")->required();
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint dir (default: run/checkpoint_final)");
  eval->add_option("--out", eval_out, "output directory (default: run/eval)");

  auto* ablate = app.add_subcommand("ablate", "run the component lattice over seeds");
  add_cfg(ablate);
  int ablate_seeds = 3;
  ablate->add_option("--seeds", ablate_seeds, "number of seeds");

  auto* bench = app.add_subcommand("bench-mem", "contrastive-loss memory profile");
  std::string bench_out = "bench";
  std::vector<Index> bench_sizes{8, 12, 16, 24, 32, 48};
  Index bench_channels = 32, bench_classes = 4;
  int bench_parts = 4;
  double bench_tau = 0.1;
  uint64_t bench_seed = 1;
  bench->add_option("--out", bench_out);
  bench->add_option("--sizes", bench_sizes, "square sizes to sweep");
  bench->add_option("--channels", bench_channels);
  bench->add_option("--classes", bench_classes);
  bench->add_option("--partitions", bench_parts);
  bench->add_option("--tau", bench_tau);
  bench->add_option("--seed", bench_seed);

  auto* report = app.add_subcommand("report", "aggregate per-fold metric CSVs");
  std::vector<std::string> report_inputs;
  std::string report_out = "report";
  report->add_option("--inputs", report_inputs, "metrics_target.csv paths")->required();
  report->add_option("--out", report_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_out, gen_seed, params);
    if (pre->parsed()) {
      TrainConfig cfg = build_config(config_path, overrides);
      auto res = pretrain_style(load_corpus(cfg.corpus_dir), cfg);
      std::cout << "style pretraining: first-epoch loss " << res.first_epoch_loss
                << ", last-epoch loss " << res.last_epoch_loss << "\ncheckpoint: "
                << res.checkpoint_dir << "\n";
      return 0;
    }
    if (train->parsed()) return cmd_train(build_config(config_path, overrides), resume_dir);
    if (eval->parsed()) return cmd_evaluate(eval_run, eval_ckpt, eval_out);
    if (ablate->parsed()) return cmd_ablate(build_config(config_path, overrides), ablate_seeds);
    if (bench->parsed())
      return cmd_bench(bench_out, bench_sizes, bench_channels, bench_classes,
                       bench_parts, bench_tau, bench_seed);
    if (report->parsed()) return cmd_report(report_inputs, report_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
