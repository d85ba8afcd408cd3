#include "pseudoseg/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <opencv2/imgcodecs.hpp>

#include "pseudoseg/color.hpp"
#include "pseudoseg/errors.hpp"

#include <nlohmann/json.hpp>

namespace pseudoseg::data {

namespace {

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// Smoothly interpolated lattice noise, one octave.
struct NoiseOctave {
  int cell;
  int gh, gw;
  std::vector<double> lattice;

  NoiseOctave(Rng& rng, int height, int width, int cell_size) : cell(cell_size) {
    gh = height / cell + 2;
    gw = width / cell + 2;
    lattice.resize(static_cast<std::size_t>(gh) * gw);
    for (auto& v : lattice) v = uniform(rng, 0.0, 1.0);
  }

  double at(int y, int x) const {
    const double fy = static_cast<double>(y) / cell;
    const double fx = static_cast<double>(x) / cell;
    const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
    const double ty = fy - y0, tx = fx - x0;
    const double sy = ty * ty * (3 - 2 * ty);  // smoothstep
    const double sx = tx * tx * (3 - 2 * tx);
    auto g = [&](int i, int j) { return lattice[static_cast<std::size_t>(i) * gw + j]; };
    const double top = g(y0, x0) + (g(y0, x0 + 1) - g(y0, x0)) * sx;
    const double bot = g(y0 + 1, x0) + (g(y0 + 1, x0 + 1) - g(y0 + 1, x0)) * sx;
    return top + (bot - top) * sy;
  }
};

enum class ShapeKind { circle = 0, square = 1, triangle = 2 };

struct PlacedShape {
  ShapeKind kind;
  double cy, cx, r;
  std::array<double, 3> color;

  bool contains(int y, int x) const {
    const double dy = y - cy, dx = x - cx;
    switch (kind) {
      case ShapeKind::circle:
        return dy * dy + dx * dx <= r * r;
      case ShapeKind::square: {
        const double a = r * 0.82;
        return std::fabs(dy) <= a && std::fabs(dx) <= a;
      }
      case ShapeKind::triangle: {
        // Equilateral, apex up, inscribed in the radius-r circle.
        const double x0 = 0.0, y0 = -r;
        const double x1 = -r * 0.8660254037844386, y1 = r * 0.5;
        const double x2 = r * 0.8660254037844386, y2 = r * 0.5;
        auto side = [&](double ax, double ay, double bx, double by) {
          return (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
        };
        const double s0 = side(x0, y0, x1, y1);
        const double s1 = side(x1, y1, x2, y2);
        const double s2 = side(x2, y2, x0, y0);
        return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
      }
    }
    return false;
  }
};

// Base hues per foreground class; jittered per shape.
constexpr double kClassHue[3] = {0.0, 0.33, 0.62};

}  // namespace

ShapesSample generate_shapes_sample(Rng& rng, int height, int width, int num_classes) {
  if (num_classes < 2 || num_classes > 4)
    throw ConfigError("shapes: num_classes must be in {2,3,4}, got " +
                      std::to_string(num_classes));
  if (height < 64 || width < 64)
    throw ConfigError("shapes: canvas must be at least 64x64, got " + std::to_string(height) +
                      "x" + std::to_string(width));

  // Background: two muted colors blended by multi-octave noise.
  NoiseOctave oct1(rng, height, width, 16);
  NoiseOctave oct2(rng, height, width, 8);
  NoiseOctave oct3(rng, height, width, 4);
  const double bg_hue_a = uniform(rng, 0.0, 1.0);
  const double bg_hue_b = uniform(rng, 0.0, 1.0);
  const auto bg_a = hsv_to_rgb(bg_hue_a, uniform(rng, 0.05, 0.35), uniform(rng, 0.25, 0.85));
  const auto bg_b = hsv_to_rgb(bg_hue_b, uniform(rng, 0.05, 0.35), uniform(rng, 0.25, 0.85));

  // Shapes, rejection-placed so they never overlap.
  const int n_shapes = uniform_int(rng, 1, 4);
  const double rmin = 0.12 * std::min(height, width);
  const double rmax = 0.22 * std::min(height, width);
  std::vector<PlacedShape> shapes;
  for (int s = 0; s < n_shapes; ++s) {
    const int kind_max = num_classes - 2;  // C=2 -> circles only, C=4 -> all three
    const auto kind = static_cast<ShapeKind>(uniform_int(rng, 0, kind_max));
    const double r = uniform(rng, rmin, rmax);
    bool placed = false;
    for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
      const double cy = uniform(rng, r + 2.0, height - r - 2.0);
      const double cx = uniform(rng, r + 2.0, width - r - 2.0);
      bool clash = false;
      for (const auto& other : shapes) {
        const double dy = cy - other.cy, dx = cx - other.cx;
        if (std::sqrt(dy * dy + dx * dx) < r + other.r + 3.0) {
          clash = true;
          break;
        }
      }
      if (!clash) {
        PlacedShape ps;
        ps.kind = kind;
        ps.cy = cy;
        ps.cx = cx;
        ps.r = r;
        const double hue = kClassHue[static_cast<int>(kind)] + uniform(rng, -0.05, 0.05);
        ps.color = hsv_to_rgb(hue, uniform(rng, 0.55, 0.95), uniform(rng, 0.6, 1.0));
        shapes.push_back(ps);
        placed = true;
      }
    }
  }

  ShapesSample out;
  out.image.pixels = Tensor({height, width, 3});
  out.mask = LabelMask::filled(height, width, 0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double t = 0.57 * oct1.at(y, x) + 0.29 * oct2.at(y, x) + 0.14 * oct3.at(y, x);
      std::array<double, 3> px;
      for (int c = 0; c < 3; ++c) px[c] = bg_a[c] + (bg_b[c] - bg_a[c]) * t;
      for (const auto& sh : shapes) {
        if (sh.contains(y, x)) {
          // Mild shading from the fine noise octave keeps shapes non-flat.
          const double shade = 0.9 + 0.2 * oct3.at(y, x);
          for (int c = 0; c < 3; ++c) px[c] = sh.color[c] * shade;
          out.mask.at(y, x) = static_cast<std::uint8_t>(static_cast<int>(sh.kind) + 1);
          break;
        }
      }
      for (int c = 0; c < 3; ++c) {
        const double q = std::round(std::clamp(px[c], 0.0, 1.0) * 255.0) / 255.0;
        out.image.pixels.at(y, x, c) = q;
      }
    }
  }
  out.labels = image_level_labels(out.mask, num_classes);
  return out;
}

ShapesSource::ShapesSource(const ShapesConfig& cfg) : cfg_(cfg) {
  check_config(cfg.n_train >= 1 && cfg.n_val >= 0, "shapes: need at least one training image");
  char buf[32];
  for (int i = 0; i < cfg.n_train; ++i) {
    std::snprintf(buf, sizeof(buf), "train_%06d", i);
    train_ids_.emplace_back(buf);
  }
  for (int i = 0; i < cfg.n_val; ++i) {
    std::snprintf(buf, sizeof(buf), "val_%06d", i);
    val_ids_.emplace_back(buf);
  }
  // Dataset mean color over a bounded prefix of the training pool.
  const int probe = std::min(cfg.n_train, 64);
  std::array<double, 3> acc{0, 0, 0};
  std::int64_t n = 0;
  for (int i = 0; i < probe; ++i) {
    const Sample s = get(train_ids_[static_cast<std::size_t>(i)]);
    const Tensor& px = s.image.pixels;
    for (std::int64_t p = 0; p < px.size(); p += 3) {
      acc[0] += px[p];
      acc[1] += px[p + 1];
      acc[2] += px[p + 2];
      ++n;
    }
  }
  if (n > 0)
    for (int c = 0; c < 3; ++c) mean_color_[c] = acc[static_cast<std::size_t>(c)] / n;
}

Sample ShapesSource::get(const std::string& id) const {
  std::uint64_t salt = 0;
  int index = -1;
  if (id.rfind("train_", 0) == 0) {
    salt = 1;
    index = std::stoi(id.substr(6));
  } else if (id.rfind("val_", 0) == 0) {
    salt = 2;
    index = std::stoi(id.substr(4));
  }
  if (index < 0) throw DataError("shapes: unknown sample id '" + id + "'");
  Rng rng = make_rng(derive_seed(cfg_.seed, salt, static_cast<std::uint64_t>(index)));
  ShapesSample s = generate_shapes_sample(rng, cfg_.height, cfg_.width, cfg_.num_classes);
  Sample out;
  out.id = id;
  out.image = std::move(s.image);
  out.mask = std::move(s.mask);
  out.labels = std::move(s.labels);
  return out;
}

void materialize_shapes_dataset(const DataSource& source, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  fs::create_directories(root / "splits");

  nlohmann::json labels_json = nlohmann::json::object();
  auto write_sample = [&](const std::string& id) {
    const Sample s = source.get(id);
    const int h = s.image.height(), w = s.image.width();
    cv::Mat img(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        auto& px = img.at<cv::Vec3b>(y, x);
        // OpenCV stores BGR.
        px[2] = static_cast<std::uint8_t>(std::lround(s.image.pixels.at(y, x, 0) * 255.0));
        px[1] = static_cast<std::uint8_t>(std::lround(s.image.pixels.at(y, x, 1) * 255.0));
        px[0] = static_cast<std::uint8_t>(std::lround(s.image.pixels.at(y, x, 2) * 255.0));
      }
    cv::imwrite((root / "images" / (id + ".png")).string(), img);
    if (s.mask) {
      cv::Mat m(h, w, CV_8UC1);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) m.at<std::uint8_t>(y, x) = s.mask->at(y, x);
      cv::imwrite((root / "masks" / (id + ".png")).string(), m);
    }
    if (s.labels) {
      auto arr = nlohmann::json::array();
      for (auto p : s.labels->present) arr.push_back(static_cast<int>(p));
      labels_json[id] = arr;
    }
  };

  std::ofstream train_list(root / "splits" / "train.txt");
  for (const auto& id : source.train_ids()) {
    write_sample(id);
    train_list << id << "\n";
  }
  std::ofstream val_list(root / "splits" / "val.txt");
  for (const auto& id : source.val_ids()) {
    write_sample(id);
    val_list << id << "\n";
  }
  std::ofstream labels_out(root / "labels.json");
  labels_out << labels_json.dump(2) << "\n";
}

}  // namespace pseudoseg::data
