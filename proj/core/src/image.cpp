#include "pseudoseg/image.hpp"

#include <algorithm>
#include <cmath>

#include "pseudoseg/errors.hpp"

namespace pseudoseg::data {

void validate_image(const DenseImage& img) {
  if (img.pixels.ndim() != 3 || img.pixels.dim(2) != 3)
    throw DataError("image: expected {H,W,3}, got " + img.pixels.shape_str());
  if (img.height() < 16 || img.width() < 16)
    throw DataError("image: dimensions must be at least 16x16, got " +
                    std::to_string(img.height()) + "x" + std::to_string(img.width()));
  for (std::int64_t i = 0; i < img.pixels.size(); ++i) {
    const double v = img.pixels[i];
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw DataError("image: pixel value out of [0,1] at flat index " + std::to_string(i));
  }
}

void validate_mask(const LabelMask& mask, int num_classes) {
  if (mask.size() != static_cast<std::int64_t>(mask.height) * mask.width)
    throw DataError("mask: size does not match dimensions");
  for (std::int64_t i = 0; i < mask.size(); ++i) {
    const int v = mask.classes[static_cast<std::size_t>(i)];
    if (v != kIgnoreValue && v >= num_classes)
      throw DataError("mask: class value " + std::to_string(v) + " outside {0.." +
                      std::to_string(num_classes - 1) + "} u {255}");
  }
}

ImageLevelLabels image_level_labels(const LabelMask& mask, int num_classes) {
  ImageLevelLabels out;
  out.present.assign(static_cast<std::size_t>(num_classes - 1), 0);
  for (auto v : mask.classes) {
    if (v != kIgnoreValue && v >= 1 && v < num_classes) out.present[v - 1] = 1;
  }
  return out;
}

std::vector<std::int64_t> class_pixel_counts(const LabelMask& mask, int num_classes) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes) + 1, 0);
  for (auto v : mask.classes) {
    if (v == kIgnoreValue)
      ++counts[static_cast<std::size_t>(num_classes)];
    else if (v < num_classes)
      ++counts[v];
  }
  return counts;
}

Sample DataSource::get_labeled(const std::string& id) const {
  Sample s = get(id);
  if (!s.mask) throw DataError("missing mask for labeled sample '" + id + "'");
  return s;
}

OverlaySource::OverlaySource(const DataSource& base,
                             std::vector<std::pair<std::string, LabelMask>> overrides)
    : base_(base), overrides_(std::move(overrides)) {
  std::sort(overrides_.begin(), overrides_.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
}

Sample OverlaySource::get(const std::string& id) const {
  Sample s = base_.get(id);
  auto it = std::lower_bound(overrides_.begin(), overrides_.end(), id,
                             [](const auto& a, const std::string& key) { return a.first < key; });
  if (it != overrides_.end() && it->first == id) {
    s.mask = it->second;
    s.labels = image_level_labels(*s.mask, base_.num_classes());
  }
  return s;
}

}  // namespace pseudoseg::data
