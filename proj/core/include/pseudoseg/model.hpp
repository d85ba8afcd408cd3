#pragma once

#include <string>
#include <vector>

#include "pseudoseg/augment.hpp"
#include "pseudoseg/image.hpp"
#include "pseudoseg/params.hpp"

namespace pseudoseg::net {

// Per-class spatial score field (Grad-CAM, fused value maps, SGC output).
// `normalized` records that each foreground channel was max-normalized to 1.
struct ScoreMap {
  Tensor scores;  // {H',W',K}
  bool normalized = false;

  int height() const { return scores.dim(0); }
  int width() const { return scores.dim(1); }
  int channels() const { return scores.dim(2); }
};

struct ModelConfig {
  int num_classes = 4;
  std::string backbone = "desk4";  // desk4 | desk4_wide | desk4_tiny
  std::vector<int> stage_channels = {16, 32, 48, 64};
  int decoder_channels = 32;
  int decoder_skip_channels = 16;  // stage-1 skip reduction at stride 2
  bool hypercolumn = true;  // false: SGC similarity uses the last stage only

  void validate() const;
  static ModelConfig preset(const std::string& backbone, int num_classes);
  int hypercolumn_dim() const {
    return hypercolumn ? stage_channels[2] + stage_channels[3] : stage_channels[3];
  }
};

// Everything one forward pass produces that downstream consumers need.
struct FeaturePack {
  ad::Value stage1;          // {H/2,W/2,C1}
  ad::Value stage3;          // {H',W',C3}
  ad::Value stage4;          // {H',W',C4}
  ad::Value pooled;          // {1,C4}
  ad::Value decoder_logits;  // {H,W,C}, upsampled to input resolution
  ad::Value class_logits;    // {1,C-1}
  int in_h = 0, in_w = 0;
};

// Small 4-stage encoder (output stride 4) + light decoder with a stride-2
// skip refinement + one-layer classification head over pooled features.
class SegModel {
 public:
  SegModel(const ModelConfig& cfg, ParamStore& store, Rng& rng);

  FeaturePack forward(ad::Tape& tape, BoundParams& params, const data::DenseImage& x) const;
  // Feature embedding used for SGC similarity, detached from the encoder
  // so no gradient can flow back through it.
  ad::Value hypercolumn(ad::Tape& tape, const FeaturePack& fp) const;

  // Grad-CAM for one foreground class (1-based class index into 1..C-1):
  // channel weights are the spatial mean of d(class logit)/d(stage4), and the
  // map is ReLU of the weighted channel sum. Runs on its own tape so the
  // output is a plain, detached score map.
  ScoreMap grad_cam(const Tensor& stage4_value, int class_index) const;
  // Channel weights only (exposed for gradient checking).
  Tensor grad_cam_channel_weights(const Tensor& stage4_value, int class_index) const;

  // Classifier presence probabilities from pooled features.
  ad::Value classify(ad::Tape& tape, BoundParams& params, ad::Value pooled) const;

  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  ParamStore* store_;
  // layer parameter handles
  struct ConvIdx {
    int w = -1, b = -1;
    int ksize = 3, stride = 1, pad = 1;
  };
  ConvIdx stem_, enc2_, enc3_, enc4_, dec1_, skip_, dec2_, dec3_;
  int cls_w_ = -1, cls_b_ = -1;
};

// Builds the C-channel value maps from per-class foreground CAMs:
// max-normalize each present channel to 1, zero absent classes, and set the
// background channel (index 0) to 1 - max over foreground per pixel.
ScoreMap build_value_maps(const std::vector<ScoreMap>& cams,
                          const std::vector<std::uint8_t>& present, double eps = 1e-8);

}  // namespace pseudoseg::net
