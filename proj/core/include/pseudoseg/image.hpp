#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pseudoseg/tensor.hpp"

namespace pseudoseg::data {

// Sentinel for unannotated pixels. Excluded from every loss and metric.
inline constexpr int kIgnoreValue = 255;

// H x W x 3 image with values in [0,1].
struct DenseImage {
  Tensor pixels;  // {H,W,3}

  int height() const { return pixels.ndim() == 3 ? pixels.dim(0) : 0; }
  int width() const { return pixels.ndim() == 3 ? pixels.dim(1) : 0; }
};

// Per-pixel class indices in {0..C-1} plus kIgnoreValue. Class 0 is background.
struct LabelMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> classes;  // row-major

  std::uint8_t at(int i, int j) const { return classes[static_cast<std::size_t>(i) * width + j]; }
  std::uint8_t& at(int i, int j) { return classes[static_cast<std::size_t>(i) * width + j]; }
  std::int64_t size() const { return static_cast<std::int64_t>(classes.size()); }

  static LabelMask filled(int height, int width, std::uint8_t value) {
    LabelMask m;
    m.height = height;
    m.width = width;
    m.classes.assign(static_cast<std::size_t>(height) * width, value);
    return m;
  }
};

// Presence flags for the C-1 foreground classes.
struct ImageLevelLabels {
  std::vector<std::uint8_t> present;

  bool any() const {
    for (auto p : present)
      if (p) return true;
    return false;
  }
};

struct Sample {
  std::string id;
  DenseImage image;
  std::optional<LabelMask> mask;
  std::optional<ImageLevelLabels> labels;
};

void validate_image(const DenseImage& img);
void validate_mask(const LabelMask& mask, int num_classes);

// present[c] is true iff class c+1 occupies at least one pixel.
ImageLevelLabels image_level_labels(const LabelMask& mask, int num_classes);

// Pixel tallies indexed by class; index num_classes holds the ignore count.
std::vector<std::int64_t> class_pixel_counts(const LabelMask& mask, int num_classes);

// Immutable dataset view. Implementations must be safe for concurrent get().
class DataSource {
 public:
  virtual ~DataSource() = default;
  virtual const std::vector<std::string>& train_ids() const = 0;
  virtual const std::vector<std::string>& val_ids() const = 0;
  virtual Sample get(const std::string& id) const = 0;
  virtual int num_classes() const = 0;
  virtual std::array<double, 3> mean_color() const = 0;

  // Like get(), but demands pixel labels. Throws DataError naming the id
  // when the mask is missing.
  Sample get_labeled(const std::string& id) const;
};

// Base source with per-id mask substitutions (offline pseudo labels).
class OverlaySource : public DataSource {
 public:
  OverlaySource(const DataSource& base, std::vector<std::pair<std::string, LabelMask>> overrides);

  const std::vector<std::string>& train_ids() const override { return base_.train_ids(); }
  const std::vector<std::string>& val_ids() const override { return base_.val_ids(); }
  Sample get(const std::string& id) const override;
  int num_classes() const override { return base_.num_classes(); }
  std::array<double, 3> mean_color() const override { return base_.mean_color(); }

 private:
  const DataSource& base_;
  std::vector<std::pair<std::string, LabelMask>> overrides_;  // sorted by id
};

}  // namespace pseudoseg::data
