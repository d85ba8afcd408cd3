#include "pseudoseg/augment.hpp"

#include <algorithm>
#include <cmath>

#include "pseudoseg/autodiff.hpp"
#include "pseudoseg/color.hpp"
#include "pseudoseg/errors.hpp"

namespace pseudoseg::aug {

using data::DenseImage;
using data::LabelMask;

void AugmentConfig::validate() const {
  check_config(jitter_strength >= 0.0, "augment.jitter_strength must be >= 0");
  check_config(scale_lo > 0.0 && scale_hi >= scale_lo, "augment.scale range invalid");
  check_config(crop_h >= 16 && crop_w >= 16, "augment.crop size must be at least 16");
  check_config(hflip_prob >= 0.0 && hflip_prob <= 1.0, "augment.hflip_prob must be in [0,1]");
}

namespace {

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

DenseImage hflip_image(const DenseImage& x) {
  const int h = x.height(), w = x.width();
  DenseImage out;
  out.pixels = Tensor({h, w, 3});
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      for (int c = 0; c < 3; ++c) out.pixels.at(y, xx, c) = x.pixels.at(y, w - 1 - xx, c);
  return out;
}

LabelMask hflip_mask(const LabelMask& m) {
  LabelMask out = LabelMask::filled(m.height, m.width, 0);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) out.at(y, x) = m.at(y, m.width - 1 - x);
  return out;
}

}  // namespace

DenseImage resize_image(const DenseImage& x, int out_h, int out_w) {
  DenseImage out;
  out.pixels = ad::bilinear_resize_plain(x.pixels, out_h, out_w);
  return out;
}

LabelMask resize_mask_nearest(const LabelMask& m, int out_h, int out_w) {
  LabelMask out = LabelMask::filled(out_h, out_w, 0);
  for (int i = 0; i < out_h; ++i) {
    // Half-pixel centers, matching the bilinear image path.
    int sy = static_cast<int>(std::floor((i + 0.5) * m.height / out_h));
    sy = std::clamp(sy, 0, m.height - 1);
    for (int j = 0; j < out_w; ++j) {
      int sx = static_cast<int>(std::floor((j + 0.5) * m.width / out_w));
      sx = std::clamp(sx, 0, m.width - 1);
      out.at(i, j) = m.at(sy, sx);
    }
  }
  return out;
}

WeakAugmented weak_augment(const data::DenseImage& x, const data::LabelMask* mask,
                           const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  WeakAugmented out;
  GeometryRecord geo;

  geo.hflip = uniform(rng, 0.0, 1.0) < cfg.hflip_prob;
  DenseImage img = geo.hflip ? hflip_image(x) : x;
  LabelMask msk;
  if (mask) msk = geo.hflip ? hflip_mask(*mask) : *mask;

  geo.scale = uniform(rng, cfg.scale_lo, cfg.scale_hi);
  geo.scaled_h = std::max(1, static_cast<int>(std::lround(x.height() * geo.scale)));
  geo.scaled_w = std::max(1, static_cast<int>(std::lround(x.width() * geo.scale)));
  if (geo.scaled_h != img.height() || geo.scaled_w != img.width()) {
    img = resize_image(img, geo.scaled_h, geo.scaled_w);
    if (mask) msk = resize_mask_nearest(msk, geo.scaled_h, geo.scaled_w);
  }

  const int pad_h = std::max(0, cfg.crop_h - geo.scaled_h);
  const int pad_w = std::max(0, cfg.crop_w - geo.scaled_w);
  const int full_h = geo.scaled_h + pad_h;
  const int full_w = geo.scaled_w + pad_w;
  geo.crop_y = pad_h < 1 && full_h > cfg.crop_h
                   ? std::uniform_int_distribution<int>(0, full_h - cfg.crop_h)(rng)
                   : 0;
  geo.crop_x = pad_w < 1 && full_w > cfg.crop_w
                   ? std::uniform_int_distribution<int>(0, full_w - cfg.crop_w)(rng)
                   : 0;

  DenseImage cropped;
  cropped.pixels = Tensor({cfg.crop_h, cfg.crop_w, 3});
  for (int i = 0; i < cfg.crop_h; ++i)
    for (int j = 0; j < cfg.crop_w; ++j) {
      const int sy = i + geo.crop_y, sx = j + geo.crop_x;
      const bool inside = sy < geo.scaled_h && sx < geo.scaled_w;
      for (int c = 0; c < 3; ++c)
        cropped.pixels.at(i, j, c) =
            inside ? img.pixels.at(sy, sx, c) : cfg.mean_color[static_cast<std::size_t>(c)];
    }
  out.image = std::move(cropped);

  if (mask) {
    LabelMask mc = LabelMask::filled(cfg.crop_h, cfg.crop_w, data::kIgnoreValue);
    for (int i = 0; i < cfg.crop_h; ++i)
      for (int j = 0; j < cfg.crop_w; ++j) {
        const int sy = i + geo.crop_y, sx = j + geo.crop_x;
        if (sy < geo.scaled_h && sx < geo.scaled_w) mc.at(i, j) = msk.at(sy, sx);
      }
    out.mask = std::move(mc);
  }
  out.geometry = geo;
  return out;
}

LabelMask apply_geometry(const LabelMask& mask, const GeometryRecord& geo, int crop_h,
                         int crop_w) {
  LabelMask m = geo.hflip ? hflip_mask(mask) : mask;
  if (geo.scaled_h != m.height || geo.scaled_w != m.width)
    m = resize_mask_nearest(m, geo.scaled_h, geo.scaled_w);
  LabelMask out = LabelMask::filled(crop_h, crop_w, data::kIgnoreValue);
  for (int i = 0; i < crop_h; ++i)
    for (int j = 0; j < crop_w; ++j) {
      const int sy = i + geo.crop_y, sx = j + geo.crop_x;
      if (sy >= 0 && sy < geo.scaled_h && sx >= 0 && sx < geo.scaled_w)
        out.at(i, j) = m.at(sy, sx);
    }
  return out;
}

namespace {

enum class JitterOp { brightness, contrast, saturation, hue };

double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

void apply_jitter_op(Tensor& px, JitterOp op, double factor) {
  const std::int64_t n = px.size() / 3;
  auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
  switch (op) {
    case JitterOp::brightness:
      for (std::int64_t i = 0; i < n * 3; ++i) px[i] = clamp01(px[i] * factor);
      break;
    case JitterOp::contrast: {
      double mean = 0.0;
      for (std::int64_t i = 0; i < n; ++i)
        mean += luminance(px[i * 3], px[i * 3 + 1], px[i * 3 + 2]);
      mean /= static_cast<double>(n);
      for (std::int64_t i = 0; i < n * 3; ++i)
        px[i] = clamp01(px[i] * factor + mean * (1.0 - factor));
      break;
    }
    case JitterOp::saturation:
      for (std::int64_t i = 0; i < n; ++i) {
        const double gray = luminance(px[i * 3], px[i * 3 + 1], px[i * 3 + 2]);
        for (int c = 0; c < 3; ++c)
          px[i * 3 + c] = clamp01(px[i * 3 + c] * factor + gray * (1.0 - factor));
      }
      break;
    case JitterOp::hue:
      // factor is the hue shift here
      for (std::int64_t i = 0; i < n; ++i) {
        const auto hsv = data::rgb_to_hsv(px[i * 3], px[i * 3 + 1], px[i * 3 + 2]);
        const auto rgb = data::hsv_to_rgb(hsv[0] + factor, hsv[1], hsv[2]);
        for (int c = 0; c < 3; ++c) px[i * 3 + c] = clamp01(rgb[static_cast<std::size_t>(c)]);
      }
      break;
  }
}

}  // namespace

DenseImage color_jitter(const DenseImage& x, double strength, Rng& rng) {
  check_config(strength >= 0.0, "color_jitter: strength must be >= 0");
  DenseImage out;
  out.pixels = x.pixels;
  if (strength == 0.0) return out;  // exact identity, but keep rng untouched too

  const double lo = std::max(0.0, 1.0 - 0.8 * strength);
  const double hi = 1.0 + 0.8 * strength;
  const double brightness = uniform(rng, lo, hi);
  const double contrast = uniform(rng, lo, hi);
  const double saturation = uniform(rng, lo, hi);
  const double hue_shift = uniform(rng, -0.2 * strength, 0.2 * strength);

  JitterOp order[4] = {JitterOp::brightness, JitterOp::contrast, JitterOp::saturation,
                       JitterOp::hue};
  for (int i = 3; i > 0; --i) {
    const int j = std::uniform_int_distribution<int>(0, i)(rng);
    std::swap(order[i], order[j]);
  }
  for (const JitterOp op : order) {
    const double f = op == JitterOp::hue         ? hue_shift
                     : op == JitterOp::brightness ? brightness
                     : op == JitterOp::contrast   ? contrast
                                                  : saturation;
    apply_jitter_op(out.pixels, op, f);
  }
  return out;
}

CutoutResult cutout_at(const DenseImage& x, int center_y, int center_x, int size,
                       const std::array<double, 3>& fill) {
  check_config(size >= 1, "cutout: size must be >= 1");
  const int h = x.height(), w = x.width();
  CutoutResult out;
  out.image.pixels = x.pixels;
  out.erased.assign(static_cast<std::size_t>(h) * w, 0);

  // The square extends from center - size/2 and is clipped at the borders.
  const int y0 = std::max(0, center_y - size / 2);
  const int x0 = std::max(0, center_x - size / 2);
  const int y1 = std::min(h, center_y - size / 2 + size);
  const int x1 = std::min(w, center_x - size / 2 + size);
  for (int y = y0; y < y1; ++y)
    for (int xx = x0; xx < x1; ++xx) {
      for (int c = 0; c < 3; ++c)
        out.image.pixels.at(y, xx, c) = fill[static_cast<std::size_t>(c)];
      out.erased[static_cast<std::size_t>(y) * w + xx] = 1;
      ++out.erased_count;
    }
  return out;
}

CutoutResult cutout(const DenseImage& x, int size, Rng& rng, const std::array<double, 3>& fill) {
  const int cy = std::uniform_int_distribution<int>(0, x.height() - 1)(rng);
  const int cx = std::uniform_int_distribution<int>(0, x.width() - 1)(rng);
  return cutout_at(x, cy, cx, size, fill);
}

StrongAugmented strong_augment(const DenseImage& weak, const AugmentConfig& cfg, Rng& rng) {
  StrongAugmented out;
  DenseImage jittered = color_jitter(weak, cfg.jitter_strength, rng);
  if (cfg.cutout_size >= 1) {
    CutoutResult cut = cutout(jittered, cfg.cutout_size, rng, cfg.mean_color);
    out.image = std::move(cut.image);
    out.cutout_mask = std::move(cut.erased);
  } else {
    out.image = std::move(jittered);
    out.cutout_mask.assign(static_cast<std::size_t>(weak.height()) * weak.width(), 0);
  }
  return out;
}

}  // namespace pseudoseg::aug
