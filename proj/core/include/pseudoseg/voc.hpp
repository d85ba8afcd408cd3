#pragma once

#include <filesystem>
#include <map>

#include "pseudoseg/image.hpp"

namespace pseudoseg::data {

// VOC-style directory: root/images/*.png|jpg, root/masks/*.png,
// root/splits/{train,val}.txt. Masks are index images; palette-encoded masks
// are decoded through the standard VOC colormap. Samples load lazily.
class VocSource : public DataSource {
 public:
  VocSource(const std::filesystem::path& root, int num_classes);

  const std::vector<std::string>& train_ids() const override { return train_ids_; }
  const std::vector<std::string>& val_ids() const override { return val_ids_; }
  Sample get(const std::string& id) const override;
  int num_classes() const override { return num_classes_; }
  std::array<double, 3> mean_color() const override { return mean_color_; }

  bool has_mask(const std::string& id) const;

 private:
  DenseImage load_image(const std::string& id) const;

  std::filesystem::path root_;
  int num_classes_;
  std::vector<std::string> train_ids_;
  std::vector<std::string> val_ids_;
  std::map<std::string, std::vector<std::uint8_t>> image_labels_;  // from labels.json
  std::array<double, 3> mean_color_{0.5, 0.5, 0.5};
};

// The 256-entry VOC colormap (bit-reversal construction).
std::array<std::array<std::uint8_t, 3>, 256> voc_colormap();

}  // namespace pseudoseg::data
