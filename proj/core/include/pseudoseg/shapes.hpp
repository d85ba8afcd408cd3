#pragma once

#include <filesystem>

#include "pseudoseg/image.hpp"
#include "pseudoseg/rng.hpp"

namespace pseudoseg::data {

// Desk-scale synthetic segmentation set: 1-4 non-overlapping colored shapes
// (circle, square, triangle = classes 1..3) on a noise-textured background
// (class 0). Pixels are quantized to the 8-bit grid so PNG round-trips are
// exact.
struct ShapesSample {
  DenseImage image;
  LabelMask mask;
  ImageLevelLabels labels;
};

ShapesSample generate_shapes_sample(Rng& rng, int height, int width, int num_classes);

struct ShapesConfig {
  int height = 64;
  int width = 64;
  int num_classes = 4;
  int n_train = 528;
  int n_val = 64;
  std::uint64_t seed = 0;
};

class ShapesSource : public DataSource {
 public:
  explicit ShapesSource(const ShapesConfig& cfg);

  const std::vector<std::string>& train_ids() const override { return train_ids_; }
  const std::vector<std::string>& val_ids() const override { return val_ids_; }
  Sample get(const std::string& id) const override;
  int num_classes() const override { return cfg_.num_classes; }
  std::array<double, 3> mean_color() const override { return mean_color_; }

 private:
  ShapesConfig cfg_;
  std::vector<std::string> train_ids_;
  std::vector<std::string> val_ids_;
  std::array<double, 3> mean_color_{0.5, 0.5, 0.5};
};

// Writes the VOC-style layout: images/*.png, masks/*.png,
// splits/{train,val}.txt and labels.json (stem -> image-level label vector).
void materialize_shapes_dataset(const DataSource& source, const std::filesystem::path& root);

}  // namespace pseudoseg::data
