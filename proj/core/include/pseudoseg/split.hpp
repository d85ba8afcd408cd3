#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pseudoseg/image.hpp"
#include "pseudoseg/rng.hpp"

namespace pseudoseg::data {

// Exact fraction of the training pool used as pixel-labeled data.
struct Fraction {
  std::int64_t num = 1;
  std::int64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
  static Fraction parse(const std::string& text);
};

struct DatasetSplit {
  std::vector<std::string> labeled_ids;
  std::vector<std::string> unlabeled_ids;
  std::uint64_t seed = 0;
  Fraction fraction;
};

// Per-id class pixel tallies, as produced by class_pixel_counts().
using ClassCountsFn = std::function<std::vector<std::int64_t>(const std::string&)>;

// Samples ceil(fraction * |ids|) labeled ids such that every class keeps at
// least min_class_pixels pixels, retrying with derived seeds. Throws
// SamplingError naming the uncovered classes when max_retries is exhausted.
DatasetSplit sample_low_data_split(const std::vector<std::string>& ids,
                                   const ClassCountsFn& class_counts, int num_classes,
                                   Fraction fraction, std::uint64_t seed,
                                   int min_class_pixels = 64, int max_retries = 100);

void save_id_list(const std::filesystem::path& file, const std::vector<std::string>& ids);
std::vector<std::string> load_id_list(const std::filesystem::path& file);

}  // namespace pseudoseg::data
