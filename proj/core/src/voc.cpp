#include "pseudoseg/voc.hpp"

#include <fstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "pseudoseg/errors.hpp"

namespace pseudoseg::data {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> read_id_list(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open split list " + file.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

fs::path find_image(const fs::path& dir, const std::string& stem) {
  for (const char* ext : {".png", ".jpg", ".jpeg"}) {
    fs::path p = dir / (stem + ext);
    if (fs::exists(p)) return p;
  }
  return {};
}

}  // namespace

std::array<std::array<std::uint8_t, 3>, 256> voc_colormap() {
  std::array<std::array<std::uint8_t, 3>, 256> map{};
  for (int i = 0; i < 256; ++i) {
    int r = 0, g = 0, b = 0, c = i;
    for (int j = 0; j < 8; ++j) {
      r |= ((c >> 0) & 1) << (7 - j);
      g |= ((c >> 1) & 1) << (7 - j);
      b |= ((c >> 2) & 1) << (7 - j);
      c >>= 3;
    }
    map[static_cast<std::size_t>(i)] = {static_cast<std::uint8_t>(r),
                                        static_cast<std::uint8_t>(g),
                                        static_cast<std::uint8_t>(b)};
  }
  return map;
}

VocSource::VocSource(const fs::path& root, int num_classes)
    : root_(root), num_classes_(num_classes) {
  check_config(num_classes >= 2, "voc: need at least 2 classes");
  if (!fs::is_directory(root_)) throw DataError("voc: root is not a directory: " + root_.string());
  train_ids_ = read_id_list(root_ / "splits" / "train.txt");
  const fs::path val = root_ / "splits" / "val.txt";
  if (fs::exists(val)) val_ids_ = read_id_list(val);

  const fs::path labels_file = root_ / "labels.json";
  if (fs::exists(labels_file)) {
    std::ifstream in(labels_file);
    nlohmann::json j;
    in >> j;
    for (auto it = j.begin(); it != j.end(); ++it) {
      std::vector<std::uint8_t> flags;
      for (const auto& v : it.value()) flags.push_back(v.get<int>() ? 1 : 0);
      image_labels_[it.key()] = std::move(flags);
    }
  }

  // Mean color from a bounded image probe; masks stay lazy so ingestion
  // errors surface at get().
  const int probe = std::min<int>(static_cast<int>(train_ids_.size()), 8);
  std::array<double, 3> acc{0, 0, 0};
  std::int64_t n = 0;
  for (int i = 0; i < probe; ++i) {
    const DenseImage img = load_image(train_ids_[static_cast<std::size_t>(i)]);
    for (std::int64_t p = 0; p < img.pixels.size(); p += 3) {
      acc[0] += img.pixels[p];
      acc[1] += img.pixels[p + 1];
      acc[2] += img.pixels[p + 2];
      ++n;
    }
  }
  if (n > 0)
    for (int c = 0; c < 3; ++c) mean_color_[c] = acc[static_cast<std::size_t>(c)] / n;
}

DenseImage VocSource::load_image(const std::string& id) const {
  const fs::path img_path = find_image(root_ / "images", id);
  if (img_path.empty()) throw DataError("voc: no image file for id '" + id + "'");
  cv::Mat img = cv::imread(img_path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw DataError("voc: failed to decode image " + img_path.string());
  DenseImage out;
  out.pixels = Tensor({img.rows, img.cols, 3});
  for (int y = 0; y < img.rows; ++y)
    for (int x = 0; x < img.cols; ++x) {
      const auto& px = img.at<cv::Vec3b>(y, x);
      out.pixels.at(y, x, 0) = px[2] / 255.0;  // BGR -> RGB
      out.pixels.at(y, x, 1) = px[1] / 255.0;
      out.pixels.at(y, x, 2) = px[0] / 255.0;
    }
  validate_image(out);
  return out;
}

bool VocSource::has_mask(const std::string& id) const {
  return fs::exists(root_ / "masks" / (id + ".png"));
}

Sample VocSource::get(const std::string& id) const {
  Sample out;
  out.id = id;
  out.image = load_image(id);

  const fs::path mask_path = root_ / "masks" / (id + ".png");
  if (fs::exists(mask_path)) {
    cv::Mat m = cv::imread(mask_path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw DataError("voc: failed to decode mask " + mask_path.string());
    LabelMask mask;
    mask.height = m.rows;
    mask.width = m.cols;
    mask.classes.resize(static_cast<std::size_t>(m.rows) * m.cols);
    if (m.channels() == 1) {
      for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) mask.at(y, x) = m.at<std::uint8_t>(y, x);
    } else if (m.channels() == 3 || m.channels() == 4) {
      // Palette PNGs decode to color; invert the VOC colormap.
      static const auto cmap = voc_colormap();
      std::map<std::uint32_t, std::uint8_t> inverse;
      for (int i = 0; i < 256; ++i) {
        const auto& c = cmap[static_cast<std::size_t>(i)];
        inverse[(c[0] << 16) | (c[1] << 8) | c[2]] = static_cast<std::uint8_t>(i);
      }
      for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
          cv::Vec3b px = m.channels() == 3 ? m.at<cv::Vec3b>(y, x)
                                           : cv::Vec3b(m.at<cv::Vec4b>(y, x)[0],
                                                       m.at<cv::Vec4b>(y, x)[1],
                                                       m.at<cv::Vec4b>(y, x)[2]);
          const std::uint32_t key = (px[2] << 16) | (px[1] << 8) | px[0];
          auto it = inverse.find(key);
          if (it == inverse.end())
            throw DataError("voc: mask color not in VOC palette in " + mask_path.string());
          mask.at(y, x) = it->second;
        }
    } else {
      throw DataError("voc: unsupported mask channel count in " + mask_path.string());
    }
    if (mask.height != out.image.height() || mask.width != out.image.width())
      throw DataError("voc: mask size mismatch for id '" + id + "'");
    validate_mask(mask, num_classes_);
    out.labels = image_level_labels(mask, num_classes_);
    out.mask = std::move(mask);
  } else {
    auto it = image_labels_.find(id);
    if (it != image_labels_.end()) {
      ImageLevelLabels lab;
      lab.present = it->second;
      lab.present.resize(static_cast<std::size_t>(num_classes_ - 1), 0);
      out.labels = std::move(lab);
    }
  }
  return out;
}

}  // namespace pseudoseg::data
