#pragma once

#include <array>
#include <optional>
#include <vector>

#include "pseudoseg/image.hpp"
#include "pseudoseg/rng.hpp"

namespace pseudoseg::aug {

// Weak augmentation is geometric (flip/scale/crop) and is applied once per
// sample; strong augmentation is photometric-only plus CutOut on top of the
// weak view, so weak and strong stay pixel-aligned.
struct AugmentConfig {
  double jitter_strength = 1.0;
  int cutout_size = 50;
  double scale_lo = 0.5;
  double scale_hi = 2.0;
  int crop_h = 128;
  int crop_w = 128;
  double hflip_prob = 0.5;
  // CutOut fill and geometric padding color; set to the dataset mean.
  std::array<double, 3> mean_color = {0.5, 0.5, 0.5};

  void validate() const;
};

struct GeometryRecord {
  bool hflip = false;
  double scale = 1.0;
  int scaled_h = 0, scaled_w = 0;  // size after resampling
  int crop_y = 0, crop_x = 0;      // offsets in the (padded) scaled frame
};

struct WeakAugmented {
  data::DenseImage image;
  std::optional<data::LabelMask> mask;
  GeometryRecord geometry;
};

WeakAugmented weak_augment(const data::DenseImage& x, const data::LabelMask* mask,
                           const AugmentConfig& cfg, Rng& rng);

// Replays a geometry record on a mask (nearest-neighbor, ignore padding).
// Used to verify the joint image/mask transform.
data::LabelMask apply_geometry(const data::LabelMask& mask, const GeometryRecord& geo,
                               int crop_h, int crop_w);

// SimCLR-parameterized photometric jitter: brightness/contrast/saturation
// factors in [max(0,1-0.8s), 1+0.8s], hue shift in [-0.2s, 0.2s], applied in
// random order. s=0 is the exact identity.
data::DenseImage color_jitter(const data::DenseImage& x, double strength, Rng& rng);

struct CutoutResult {
  data::DenseImage image;
  std::vector<std::uint8_t> erased;  // H*W row-major, 1 = erased
  std::int64_t erased_count = 0;
};

CutoutResult cutout(const data::DenseImage& x, int size, Rng& rng,
                    const std::array<double, 3>& fill);
// Deterministic placement by center pixel; the square is clipped at borders.
CutoutResult cutout_at(const data::DenseImage& x, int center_y, int center_x, int size,
                       const std::array<double, 3>& fill);

struct StrongAugmented {
  data::DenseImage image;
  std::vector<std::uint8_t> cutout_mask;  // empty when cutout is disabled
};

// color_jitter then cutout; cutout_size < 1 disables the cutout step.
StrongAugmented strong_augment(const data::DenseImage& weak, const AugmentConfig& cfg, Rng& rng);

// Bilinear (images) and nearest-neighbor (masks) resampling helpers.
data::DenseImage resize_image(const data::DenseImage& x, int out_h, int out_w);
data::LabelMask resize_mask_nearest(const data::LabelMask& m, int out_h, int out_w);

}  // namespace pseudoseg::aug
