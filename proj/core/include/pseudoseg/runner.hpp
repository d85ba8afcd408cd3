#pragma once

#include <memory>

#include "pseudoseg/config.hpp"

namespace pseudoseg::run {

struct TrainOutcome {
  train::EvalResult final_eval;
  double best_miou = 0.0;
  std::map<std::string, double> variant_ece;  // pseudo-label ECE on val data
  std::filesystem::path best_checkpoint;
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics_file;
};

std::unique_ptr<data::DataSource> build_source(const ExperimentConfig& cfg);
data::DatasetSplit build_split(const ExperimentConfig& cfg, const data::DataSource& source);

// Full training run: echoes the resolved config, streams one JSON object per
// evaluation event to metrics.jsonl, checkpoints periodically plus best/final
// by validation mIoU.
TrainOutcome run_train(const ExperimentConfig& cfg);

// Writes labeled/unlabeled id lists for each requested split seed.
std::vector<std::filesystem::path> cmd_make_splits(const ExperimentConfig& cfg,
                                                   const std::vector<std::uint64_t>& seeds);

// Evaluates a checkpoint: overall mIoU, per-class IoU, decoder ECE and
// pseudo-label ECE per fusion variant.
nlohmann::json run_eval(const std::filesystem::path& checkpoint, const ExperimentConfig& cfg);

// Single-factor sweeps; one row per (arm, seed) with paired seeds.
nlohmann::json run_ablate(const ExperimentConfig& cfg, const std::string& study);

// Teacher -> offline pseudo labels -> student, compared against the one-stage
// training on the same split.
nlohmann::json run_selftrain(const ExperimentConfig& cfg);

void write_json(const std::filesystem::path& file, const nlohmann::json& j);
void write_csv(const std::filesystem::path& file, const nlohmann::json& rows);

}  // namespace pseudoseg::run
