#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pseudoseg/errors.hpp"
#include "pseudoseg/runner.hpp"
#include "pseudoseg/shapes.hpp"

namespace {

using pseudoseg::run::ExperimentConfig;

struct CommonOpts {
  std::string config_file;
  std::int64_t seed = -1;
  std::string mode;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_file, "Experiment config file (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", opts.seed, "Override train seed and split seed");
  cmd->add_option("--mode", opts.mode,
                  "Override train mode (supervised_only|unlabeled|image_level)");
  cmd->add_option("--out", opts.out, "Override output directory");
}

ExperimentConfig load_config(const CommonOpts& opts) {
  ExperimentConfig cfg = ExperimentConfig::load(opts.config_file);
  if (opts.seed >= 0) {
    cfg.train.seed = static_cast<std::uint64_t>(opts.seed);
    cfg.dataset.split_seed = static_cast<std::uint64_t>(opts.seed);
  }
  if (!opts.mode.empty()) cfg.train.mode = pseudoseg::train::parse_mode(opts.mode);
  if (!opts.out.empty()) cfg.output_dir = opts.out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PseudoSeg: one-stage semi-supervised semantic segmentation trainer"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string study;
  std::string checkpoint;
  std::vector<std::uint64_t> split_seeds = {1, 2, 3};
  bool materialize = false;

  auto* cmd_splits = app.add_subcommand("make-splits", "Sample class-covered low-data splits");
  add_common(cmd_splits, opts);
  cmd_splits->add_option("--split-seeds", split_seeds, "Split seeds to sample (default 1 2 3)");
  cmd_splits->add_flag("--materialize", materialize,
                       "Also write the dataset to dataset.root in the VOC layout");

  auto* cmd_train = app.add_subcommand("train", "Train a model");
  add_common(cmd_train, opts);

  auto* cmd_eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(cmd_eval, opts);
  cmd_eval->add_option("--checkpoint", checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);

  auto* cmd_ablate = app.add_subcommand("ablate", "Run a single-factor ablation study");
  add_common(cmd_ablate, opts);
  cmd_ablate
      ->add_option("--study", study,
                   "sources|hypercolumn|soft_hard|sharpening|jitter_strength|backbone")
      ->required();

  auto* cmd_selftrain =
      app.add_subcommand("selftrain", "Teacher/student self-training comparison");
  add_common(cmd_selftrain, opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_splits->parsed()) {
      ExperimentConfig cfg = load_config(opts);
      if (opts.seed >= 0) split_seeds = {static_cast<std::uint64_t>(opts.seed)};
      if (materialize) {
        pseudoseg::check_config(!cfg.dataset.root.empty(),
                                "make-splits --materialize: dataset.root is required");
        const auto source = pseudoseg::run::build_source(cfg);
        pseudoseg::data::materialize_shapes_dataset(*source, cfg.dataset.root);
        std::cout << "materialized dataset at " << cfg.dataset.root << "\n";
      }
      const auto files = pseudoseg::run::cmd_make_splits(cfg, split_seeds);
      for (const auto& f : files) std::cout << f.string() << "\n";
    } else if (cmd_train->parsed()) {
      ExperimentConfig cfg = load_config(opts);
      const auto outcome = pseudoseg::run::run_train(cfg);
      std::cout << "final miou=" << outcome.final_eval.miou
                << " ece=" << outcome.final_eval.ece << " best miou=" << outcome.best_miou
                << "\n";
      if (!outcome.metrics_file.empty())
        std::cout << "metrics: " << outcome.metrics_file.string() << "\n";
    } else if (cmd_eval->parsed()) {
      ExperimentConfig cfg = load_config(opts);
      const auto report = pseudoseg::run::run_eval(checkpoint, cfg);
      std::cout << report.dump(2) << "\n";
    } else if (cmd_ablate->parsed()) {
      ExperimentConfig cfg = load_config(opts);
      const auto rows = pseudoseg::run::run_ablate(cfg, study);
      std::cout << rows.dump(2) << "\n";
    } else if (cmd_selftrain->parsed()) {
      ExperimentConfig cfg = load_config(opts);
      const auto table = pseudoseg::run::run_selftrain(cfg);
      std::cout << table.dump(2) << "\n";
    }
  } catch (const pseudoseg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pseudoseg::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const pseudoseg::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
