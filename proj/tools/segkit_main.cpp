// segkit: desk-scale cardiac segmentation experiments from one binary.
// Subcommands: train, eval, ensemble, synth, gradcheck, losscompare.
// Exit codes: 0 success, 1 runtime/training failure, 2 usage/config error.

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "segkit/config.hpp"
#include "segkit/ensemble.hpp"
#include "segkit/gradcheck.hpp"
#include "segkit/trainer.hpp"

namespace fs = std::filesystem;
using namespace segkit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct GlobalOpts {
  std::string config_path;
  std::string out_dir;
  bool dry_run = false;
  bool seed_set = false;
  uint64_t seed = 0;
};

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) {
    throw std::invalid_argument(what + " not found: " + path);
  }
}

ExperimentConfig load_config(const GlobalOpts& g) {
  if (g.config_path.empty()) {
    throw std::invalid_argument("--config is required for this command");
  }
  require_file(g.config_path, "config file");
  ExperimentConfig cfg = ExperimentConfig::parse_file(g.config_path);
  if (g.seed_set) cfg.setup.train.seed = g.seed;
  if (!g.out_dir.empty()) cfg.output_dir = g.out_dir;
  return cfg;
}

DatasetManifest load_manifest_checked(const std::string& path) {
  require_file(path, "manifest");
  return DatasetManifest::load(path);
}

void write_report(const MetricsReport& report, const std::string& dir,
                  const std::string& stem) {
  fs::create_directories(dir);
  std::ofstream csv(fs::path(dir) / (stem + ".csv"), std::ios::trunc);
  csv << report.to_csv();
  std::ofstream table(fs::path(dir) / (stem + ".txt"), std::ios::trunc);
  table << report.to_table();
}

int cmd_train(const GlobalOpts& g, const std::string& resume) {
  ExperimentConfig cfg = load_config(g);
  if (cfg.manifest_path.empty()) {
    throw std::invalid_argument("config has no [data] manifest entry");
  }
  std::string manifest_path = cfg.manifest_path;
  if (!fs::path(manifest_path).is_absolute()) {
    manifest_path = (fs::path(g.config_path).parent_path() / manifest_path).string();
  }
  DatasetManifest manifest = load_manifest_checked(manifest_path);

  if (g.dry_run) {
    std::cout << "dry-run: would train into " << cfg.output_dir << " on "
              << manifest.entries.size() << " samples\n"
              << cfg.to_ini();
    return kExitOk;
  }

  fs::create_directories(cfg.output_dir);
  {
    std::ofstream resolved(fs::path(cfg.output_dir) / "config.resolved.ini", std::ios::trunc);
    resolved << cfg.to_ini();
  }
  try {
    TrainResult r = train(cfg.setup, manifest, cfg.output_dir, resume);
    std::cout << "trained " << r.epochs_run << " epochs; best val dice "
              << (r.best_val_dice >= 0 ? std::to_string(r.best_val_dice) : "n/a") << " at epoch "
              << r.best_epoch << "\n"
              << "log: " << r.log_path << "\n"
              << "checkpoints: " << r.best_checkpoint << ", " << r.last_checkpoint << "\n";
    return kExitOk;
  } catch (const std::invalid_argument&) {
    throw;  // config-level problem
  } catch (const std::exception& e) {
    std::cerr << "training failed: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int cmd_eval(const GlobalOpts& g, const std::string& checkpoint, const std::string& manifest_path,
             const std::string& split_name, double threshold, double spacing_row,
             double spacing_col) {
  require_file(checkpoint, "checkpoint");
  DatasetManifest manifest = load_manifest_checked(manifest_path);
  Split split = split_from_string(split_name);
  std::string out = g.out_dir.empty() ? "." : g.out_dir;

  DataConfig data_cfg;  // CLAHE defaults; eval applies no geometric augmentation
  std::optional<PixelSpacing> spacing;
  if (spacing_row > 0 && spacing_col > 0) spacing = PixelSpacing{spacing_row, spacing_col};

  if (g.dry_run) {
    std::cout << "dry-run: would evaluate " << checkpoint << " on split " << split_name << " ("
              << manifest.indices_of(split).size() << " samples) into " << out << "\n";
    return kExitOk;
  }

  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  MetricsReport report = evaluate(ck.model, manifest, split, data_cfg, threshold, spacing,
                                  (fs::path(out) / "pred_masks").string());
  write_report(report, out, "metrics_" + split_name);
  std::cout << report.to_table();
  return kExitOk;
}

int cmd_ensemble(const GlobalOpts& g, const std::vector<std::string>& checkpoints,
                 const std::string& mode_name, const std::string& manifest_path,
                 const std::string& split_name, double threshold) {
  if (checkpoints.size() < 2) {
    throw std::invalid_argument("ensemble needs >= 2 checkpoints, got " +
                                std::to_string(checkpoints.size()));
  }
  EnsembleMode mode = ensemble_mode_from_string(mode_name);
  for (const auto& c : checkpoints) require_file(c, "checkpoint");
  DatasetManifest manifest = load_manifest_checked(manifest_path);
  Split split = split_from_string(split_name);
  std::string out = g.out_dir.empty() ? "." : g.out_dir;

  if (checkpoints.size() % 2 == 0) {
    std::cerr << "warning: even ensemble size " << checkpoints.size()
              << "; exact ties resolve to background\n";
  }
  if (g.dry_run) {
    std::cout << "dry-run: would fuse " << checkpoints.size() << " models by " << mode_name
              << " over split " << split_name << " into " << out << "\n";
    return kExitOk;
  }

  std::vector<Model> models;
  for (const auto& c : checkpoints) models.push_back(load_checkpoint(c).model);
  DataConfig data_cfg;
  MetricsReport report = ensemble_evaluate(models, manifest, split, data_cfg, mode, threshold,
                                           (fs::path(out) / "fused_masks").string());
  write_report(report, out, "metrics_ensemble_" + split_name);
  std::cout << report.to_table();
  return kExitOk;
}

int cmd_synth(const GlobalOpts& g, int n, int size, double ratio_lo, double ratio_hi,
              int patients) {
  if (n < 1) throw std::invalid_argument("synth: --n must be >= 1");
  SynthConfig cfg;
  cfg.count = n;
  cfg.image_size = size;
  cfg.ratio_lo = ratio_lo;
  cfg.ratio_hi = ratio_hi;
  cfg.seed = g.seed_set ? g.seed : 1;
  cfg.patients = patients;
  cfg.out_dir = g.out_dir.empty() ? "synth_data" : g.out_dir;
  if (g.dry_run) {
    std::cout << "dry-run: would write " << n << " samples of " << size << "x" << size
              << " with mask ratio in [" << ratio_lo << ", " << ratio_hi << "] to " << cfg.out_dir
              << "\n";
    return kExitOk;
  }
  DatasetManifest manifest = synth_dataset(cfg);
  std::cout << "wrote " << manifest.entries.size() << " samples under " << cfg.out_dir << "\n"
            << "manifest: " << (fs::path(cfg.out_dir) / "manifest.json").string() << "\n";
  return kExitOk;
}

int cmd_gradcheck(const GlobalOpts& g, const std::vector<std::string>& ops, int trials,
                  bool inject_broken) {
  if (g.dry_run) {
    std::cout << "dry-run: would run the finite-difference suite, " << trials
              << " trials per entry\n";
    return kExitOk;
  }
  uint64_t seed = g.seed_set ? g.seed : 20240101;
  auto results = run_gradcheck_suite(seed, trials, ops, inject_broken);
  if (results.empty()) {
    throw std::invalid_argument("gradcheck: no suite entries match the given --ops filter");
  }
  bool all_pass = true;
  std::printf("%-32s %14s  %s\n", "op/loss", "max_rel_err", "status");
  for (const auto& r : results) {
    std::printf("%-32s %14.3e  %s\n", r.name.c_str(), r.max_rel_err, r.pass ? "PASS" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  return all_pass ? kExitOk : kExitRuntime;
}

int cmd_losscompare(const GlobalOpts& g, const std::string& losses_csv,
                    const std::string& seeds_csv) {
  ExperimentConfig cfg = load_config(g);
  if (cfg.manifest_path.empty()) {
    throw std::invalid_argument("config has no [data] manifest entry");
  }
  std::string manifest_path = cfg.manifest_path;
  if (!fs::path(manifest_path).is_absolute()) {
    manifest_path = (fs::path(g.config_path).parent_path() / manifest_path).string();
  }
  DatasetManifest manifest = load_manifest_checked(manifest_path);

  std::vector<LossKind> losses;
  {
    std::stringstream ss(losses_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) losses.push_back(loss_kind_from_string(item));
    }
  }
  std::vector<uint64_t> seeds;
  {
    std::stringstream ss(seeds_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) seeds.push_back(std::stoull(item));
    }
  }
  if (losses.empty()) throw std::invalid_argument("losscompare: no losses given");
  if (seeds.empty()) throw std::invalid_argument("losscompare: no seeds given");

  if (g.dry_run) {
    std::cout << "dry-run: would train " << losses.size() * seeds.size() << " models ("
              << losses.size() << " losses x " << seeds.size() << " seeds) under "
              << cfg.output_dir << "\n";
    return kExitOk;
  }

  fs::create_directories(cfg.output_dir);
  std::ofstream table_csv(fs::path(cfg.output_dir) / "losscompare.csv", std::ios::trunc);
  table_csv << "loss,seed,best_val_dice\n";
  std::printf("%-16s %-24s %s\n", "loss", "best val dice mean (std)", "per-seed");
  bool any_failed = false;
  for (LossKind kind : losses) {
    std::vector<double> dices;
    std::string per_seed;
    for (uint64_t seed : seeds) {
      ExperimentSetup setup = cfg.setup;
      setup.loss.kind = kind;
      setup.train.seed = seed;
      std::string cell_dir = (fs::path(cfg.output_dir) / ("loss_" + to_string(kind)) /
                              ("seed_" + std::to_string(seed)))
                                 .string();
      try {
        TrainResult r = train(setup, manifest, cell_dir);
        dices.push_back(r.best_val_dice);
        table_csv << to_string(kind) << "," << seed << "," << r.best_val_dice << "\n";
        table_csv.flush();
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f ", r.best_val_dice);
        per_seed += buf;
      } catch (const std::exception& e) {
        std::cerr << "cell (" << to_string(kind) << ", seed " << seed << ") failed: " << e.what()
                  << "\n";
        any_failed = true;
      }
    }
    if (!dices.empty()) {
      double mean = 0.0;
      for (double d : dices) mean += d;
      mean /= static_cast<double>(dices.size());
      double var = 0.0;
      for (double d : dices) var += (d - mean) * (d - mean);
      double stdev = std::sqrt(var / static_cast<double>(dices.size()));
      char cell[48];
      std::snprintf(cell, sizeof(cell), "%.4f (%.4f)", mean, stdev);
      std::printf("%-16s %-24s %s\n", to_string(kind).c_str(), cell, per_seed.c_str());
    }
  }
  return any_failed ? kExitRuntime : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"segkit: desk-scale right-ventricle segmentation toolkit"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "experiment config file");
  app.add_option("--out", g.out_dir, "output directory override");
  auto* seed_opt = app.add_option("--seed", g.seed, "top-level seed override");
  app.add_flag("--dry-run", g.dry_run, "print the resolved plan, touch no files");

  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  std::string resume;
  train_cmd->add_option("--resume", resume, "continue from a last-checkpoint");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint over a split");
  std::string ckpt, manifest_path, split_name = "val";
  double threshold = 0.5, spacing_row = 0.0, spacing_col = 0.0;
  eval_cmd->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--manifest", manifest_path, "dataset manifest")->required();
  eval_cmd->add_option("--split", split_name, "train|val|test");
  eval_cmd->add_option("--threshold", threshold, "binarization threshold");
  eval_cmd->add_option("--spacing-row", spacing_row, "row spacing, mm per px");
  eval_cmd->add_option("--spacing-col", spacing_col, "column spacing, mm per px");

  auto* ens_cmd = app.add_subcommand("ensemble", "fuse several checkpoints over a split");
  std::vector<std::string> ckpts;
  std::string mode = "majority", ens_manifest, ens_split = "val";
  double ens_threshold = 0.5;
  ens_cmd->add_option("--checkpoints", ckpts, "two or more checkpoint paths")->required();
  ens_cmd->add_option("--mode", mode, "majority|avgprob");
  ens_cmd->add_option("--manifest", ens_manifest, "dataset manifest")->required();
  ens_cmd->add_option("--split", ens_split, "train|val|test");
  ens_cmd->add_option("--threshold", ens_threshold, "binarization threshold");

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic crescent dataset");
  int n = 200, size = 64, patients = 16;
  double ratio_lo = 0.01, ratio_hi = 0.08;
  synth_cmd->add_option("--n", n, "sample count");
  synth_cmd->add_option("--size", size, "square image size");
  synth_cmd->add_option("--ratio-lo", ratio_lo, "minimum mask foreground ratio");
  synth_cmd->add_option("--ratio-hi", ratio_hi, "maximum mask foreground ratio");
  synth_cmd->add_option("--patients", patients, "synthetic patient count");

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::vector<std::string> ops;
  int trials = 20;
  bool inject_broken = false;
  grad_cmd->add_option("--ops", ops, "run only entries whose name contains any filter");
  grad_cmd->add_option("--trials", trials, "random instances per entry");
  grad_cmd->add_flag("--inject-broken", inject_broken,
                     "append a deliberately wrong adjoint as a negative control");

  auto* losscmp_cmd = app.add_subcommand("losscompare", "train one model per (loss, seed)");
  std::string losses_csv = "bce_dice,bce_dice_inv,focal,switching", seeds_csv = "1,2,3";
  losscmp_cmd->add_option("--losses", losses_csv, "comma-separated loss kinds");
  losscmp_cmd->add_option("--seeds", seeds_csv, "comma-separated seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }
  g.seed_set = seed_opt->count() > 0;

  try {
    if (train_cmd->parsed()) return cmd_train(g, resume);
    if (eval_cmd->parsed()) {
      return cmd_eval(g, ckpt, manifest_path, split_name, threshold, spacing_row, spacing_col);
    }
    if (ens_cmd->parsed()) {
      return cmd_ensemble(g, ckpts, mode, ens_manifest, ens_split, ens_threshold);
    }
    if (synth_cmd->parsed()) return cmd_synth(g, n, size, ratio_lo, ratio_hi, patients);
    if (grad_cmd->parsed()) return cmd_gradcheck(g, ops, trials, inject_broken);
    if (losscmp_cmd->parsed()) return cmd_losscompare(g, losses_csv, seeds_csv);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
