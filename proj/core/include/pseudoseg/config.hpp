#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pseudoseg/model.hpp"
#include "pseudoseg/shapes.hpp"
#include "pseudoseg/split.hpp"
#include "pseudoseg/trainer.hpp"

namespace pseudoseg::run {

struct DatasetConfig {
  std::string source = "shapes";  // shapes | voc_dir
  std::string root;               // voc_dir root (ignored for shapes)
  int num_classes = 4;
  int canvas_h = 64, canvas_w = 64;
  int n_train = 528, n_val = 64;
  std::uint64_t dataset_seed = 7;
  std::string fraction = "1/1";
  std::uint64_t split_seed = 1;
  int min_class_pixels = 64;
  int max_retries = 100;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::string backbone = "desk4";
  bool hypercolumn = true;
  train::TrainConfig train;
  bool mean_color_auto = true;  // resolve augment.mean_color from the dataset
  std::string output_dir;

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& file);
  nlohmann::json to_json() const;
  void validate() const;

  net::ModelConfig model_config() const;
  std::uint64_t hash() const;
};

// Dotted paths of leaves that differ between two config JSON trees.
std::vector<std::string> config_diff(const nlohmann::json& a, const nlohmann::json& b);

}  // namespace pseudoseg::run
