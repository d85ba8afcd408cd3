#include "pseudoseg/selftrain.hpp"

#include <fstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "pseudoseg/errors.hpp"

namespace pseudoseg::train {

namespace fs = std::filesystem;

std::vector<OfflineLabelEntry> generate_offline_pseudo_labels(Trainer& teacher,
                                                              const std::vector<std::string>& ids,
                                                              double threshold,
                                                              const fs::path& out_dir) {
  fs::create_directories(out_dir / "masks");
  std::vector<OfflineLabelEntry> entries;
  entries.reserve(ids.size());
  nlohmann::json manifest = nlohmann::json::array();

  for (const auto& id : ids) {
    const data::Sample sample = teacher.source().get(id);
    const Tensor probs = teacher.predict_probs(sample.image);
    const data::LabelMask mask = sgc::harden(probs, threshold);

    std::int64_t ignored = 0;
    for (auto v : mask.classes)
      if (v == data::kIgnoreValue) ++ignored;
    OfflineLabelEntry entry;
    entry.id = id;
    entry.ignore_fraction = static_cast<double>(ignored) / static_cast<double>(mask.size());
    entries.push_back(entry);

    cv::Mat m(mask.height, mask.width, CV_8UC1);
    for (int y = 0; y < mask.height; ++y)
      for (int x = 0; x < mask.width; ++x) m.at<std::uint8_t>(y, x) = mask.at(y, x);
    cv::imwrite((out_dir / "masks" / (id + ".png")).string(), m);

    manifest.push_back({{"id", id}, {"ignore_fraction", entry.ignore_fraction}});
  }

  std::ofstream out(out_dir / "manifest.json");
  out << manifest.dump(2) << "\n";
  return entries;
}

std::vector<std::pair<std::string, data::LabelMask>> load_offline_pseudo_labels(
    const fs::path& out_dir, const std::vector<std::string>& ids) {
  std::vector<std::pair<std::string, data::LabelMask>> out;
  for (const auto& id : ids) {
    const fs::path file = out_dir / "masks" / (id + ".png");
    cv::Mat m = cv::imread(file.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw DataError("missing offline pseudo label for '" + id + "'");
    data::LabelMask mask = data::LabelMask::filled(m.rows, m.cols, 0);
    for (int y = 0; y < m.rows; ++y)
      for (int x = 0; x < m.cols; ++x) mask.at(y, x) = m.at<std::uint8_t>(y, x);
    out.emplace_back(id, std::move(mask));
  }
  return out;
}

}  // namespace pseudoseg::train
