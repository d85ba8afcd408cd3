#pragma once

#include <filesystem>

#include "pseudoseg/trainer.hpp"

namespace pseudoseg::train {

struct OfflineLabelEntry {
  std::string id;
  double ignore_fraction = 0.0;
};

// Offline teacher labels: decoder softmax hardened at the confidence
// threshold; low-confidence pixels become ignore regions. Masks are written
// as index PNGs under out_dir/masks plus a manifest.json.
std::vector<OfflineLabelEntry> generate_offline_pseudo_labels(
    Trainer& teacher, const std::vector<std::string>& ids, double threshold,
    const std::filesystem::path& out_dir);

// Loads masks written by generate_offline_pseudo_labels.
std::vector<std::pair<std::string, data::LabelMask>> load_offline_pseudo_labels(
    const std::filesystem::path& out_dir, const std::vector<std::string>& ids);

}  // namespace pseudoseg::train
