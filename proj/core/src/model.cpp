#include "pseudoseg/model.hpp"

#include <cmath>

#include "pseudoseg/errors.hpp"

namespace pseudoseg::net {

void ModelConfig::validate() const {
  check_config(num_classes >= 2, "model.num_classes must be >= 2");
  check_config(stage_channels.size() == 4, "model.stage_channels must have 4 entries");
  for (int c : stage_channels) check_config(c >= 1, "model.stage_channels entries must be >= 1");
  check_config(decoder_channels >= 1, "model.decoder_channels must be >= 1");
}

ModelConfig ModelConfig::preset(const std::string& backbone, int num_classes) {
  ModelConfig cfg;
  cfg.num_classes = num_classes;
  cfg.backbone = backbone;
  if (backbone == "desk4") {
    cfg.stage_channels = {16, 32, 48, 64};
    cfg.decoder_channels = 32;
    cfg.decoder_skip_channels = 16;
  } else if (backbone == "desk4_wide") {
    cfg.stage_channels = {24, 48, 64, 96};
    cfg.decoder_channels = 48;
    cfg.decoder_skip_channels = 24;
  } else if (backbone == "desk4_tiny") {
    // Small enough for finite-difference gradient checks.
    cfg.stage_channels = {4, 6, 8, 10};
    cfg.decoder_channels = 6;
    cfg.decoder_skip_channels = 4;
  } else {
    throw ConfigError("unknown backbone preset '" + backbone +
                      "' (expected desk4|desk4_wide|desk4_tiny)");
  }
  return cfg;
}

SegModel::SegModel(const ModelConfig& cfg, ParamStore& store, Rng& rng)
    : cfg_(cfg), store_(&store) {
  cfg_.validate();
  auto add_conv = [&](const char* name, int cin, int cout, int ksize, int stride,
                      int pad) -> ConvIdx {
    ConvIdx idx;
    idx.ksize = ksize;
    idx.stride = stride;
    idx.pad = pad;
    const int fan_in = ksize * ksize * cin;
    idx.w = store.add(std::string(name) + ".w", he_normal({fan_in, cout}, fan_in, rng));
    idx.b = store.add(std::string(name) + ".b", Tensor({cout}));
    return idx;
  };
  const auto& ch = cfg_.stage_channels;
  stem_ = add_conv("encoder.stage1", 3, ch[0], 3, 2, 1);
  enc2_ = add_conv("encoder.stage2", ch[0], ch[1], 3, 2, 1);
  enc3_ = add_conv("encoder.stage3", ch[1], ch[2], 3, 1, 1);
  enc4_ = add_conv("encoder.stage4", ch[2], ch[3], 3, 1, 1);
  dec1_ = add_conv("decoder.conv1", ch[3], cfg_.decoder_channels, 3, 1, 1);
  skip_ = add_conv("decoder.skip", ch[0], cfg_.decoder_skip_channels, 1, 1, 0);
  dec2_ = add_conv("decoder.conv2", cfg_.decoder_channels + cfg_.decoder_skip_channels,
                   cfg_.decoder_channels, 3, 1, 1);
  dec3_ = add_conv("decoder.logits", cfg_.decoder_channels, cfg_.num_classes, 1, 1, 0);
  cls_w_ = store.add("classifier.w",
                     he_normal({ch[3], cfg_.num_classes - 1}, ch[3], rng));
  cls_b_ = store.add("classifier.b", Tensor({cfg_.num_classes - 1}));
}

FeaturePack SegModel::forward(ad::Tape& tape, BoundParams& params,
                              const data::DenseImage& x) const {
  check_contract(x.pixels.ndim() == 3 && x.pixels.dim(2) == 3,
                 "SegModel::forward: input must be {H,W,3}");
  FeaturePack fp;
  fp.in_h = x.height();
  fp.in_w = x.width();

  auto conv = [&](ad::Value in, const ConvIdx& c) {
    return ad::conv2d(in, params[c.w], params[c.b], c.ksize, c.stride, c.pad);
  };

  ad::Value in = tape.constant(x.pixels);
  ad::Value s1 = ad::relu(conv(in, stem_));
  ad::Value s2 = ad::relu(conv(s1, enc2_));
  ad::Value s3 = ad::relu(conv(s2, enc3_));
  ad::Value s4 = ad::relu(conv(s3, enc4_));
  fp.stage1 = s1;
  fp.stage3 = s3;
  fp.stage4 = s4;

  // Decoder: refine at stride 2 with a reduced stage-1 skip before the final
  // upsampling, so boundaries are not quantized to the stride-4 grid.
  ad::Value d1 = ad::relu(conv(s4, dec1_));
  ad::Value d1_up = ad::upsample_bilinear(d1, s1.v().dim(0), s1.v().dim(1));
  ad::Value skip = ad::relu(conv(s1, skip_));
  ad::Value d2 = ad::relu(conv(ad::concat_cols(d1_up, skip), dec2_));
  ad::Value logits_half = conv(d2, dec3_);
  fp.decoder_logits = ad::upsample_bilinear(logits_half, fp.in_h, fp.in_w);

  fp.pooled = ad::spatial_mean(s4);
  fp.class_logits = classify(tape, params, fp.pooled);
  return fp;
}

ad::Value SegModel::classify(ad::Tape& tape, BoundParams& params, ad::Value pooled) const {
  (void)tape;
  return ad::linear(pooled, params[cls_w_], params[cls_b_]);
}

ad::Value SegModel::hypercolumn(ad::Tape& tape, const FeaturePack& fp) const {
  check_contract(fp.stage3.valid() && fp.stage4.valid(), "hypercolumn: stage features missing");
  if (!cfg_.hypercolumn) return ad::stop_grad(fp.stage4);
  ad::Value cat = ad::concat_cols(fp.stage3, fp.stage4);
  return ad::stop_grad(cat);
}

Tensor SegModel::grad_cam_channel_weights(const Tensor& stage4_value, int class_index) const {
  check_contract(class_index >= 1 && class_index <= cfg_.num_classes - 1,
                 "grad_cam: class index out of range");
  // Tiny dedicated tape: stage4 leaf -> GAP -> classifier -> one logit.
  ad::Tape tape;
  ad::Value feat = tape.leaf(stage4_value, /*requires_grad=*/true);
  ad::Value pooled = ad::spatial_mean(feat);
  ad::Value w = tape.external(&store_->at(cls_w_).value, false);
  ad::Value b = tape.external(&store_->at(cls_b_).value, false);
  ad::Value logits = ad::linear(pooled, w, b);
  ad::Value target = ad::pick(logits, 0, class_index - 1);
  tape.backward(target);
  const Tensor g = tape.grad(feat);  // {H',W',D}

  const int d = stage4_value.dim(2);
  const std::int64_t l = stage4_value.rows();
  Tensor weights({d});
  for (std::int64_t i = 0; i < l; ++i)
    for (int k = 0; k < d; ++k) weights[k] += g[i * d + k];
  for (int k = 0; k < d; ++k) weights[k] /= static_cast<double>(l);
  return weights;
}

ScoreMap SegModel::grad_cam(const Tensor& stage4_value, int class_index) const {
  const Tensor weights = grad_cam_channel_weights(stage4_value, class_index);
  const int h = stage4_value.dim(0), w = stage4_value.dim(1), d = stage4_value.dim(2);
  ScoreMap cam;
  cam.scores = Tensor({h, w, 1});
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
    double acc = 0.0;
    for (int k = 0; k < d; ++k) acc += weights[k] * stage4_value[i * d + k];
    cam.scores[i] = std::max(0.0, acc);
  }
  return cam;
}

ScoreMap build_value_maps(const std::vector<ScoreMap>& cams,
                          const std::vector<std::uint8_t>& present, double eps) {
  check_contract(!cams.empty(), "build_value_maps: no CAMs");
  check_contract(present.size() == cams.size(), "build_value_maps: presence size mismatch");
  const int h = cams[0].height(), w = cams[0].width();
  const int fg = static_cast<int>(cams.size());
  for (const auto& cam : cams)
    check_contract(cam.height() == h && cam.width() == w && cam.channels() == 1,
                   "build_value_maps: CAM shape mismatch");

  ScoreMap out;
  out.scores = Tensor({h, w, fg + 1});
  out.normalized = true;
  const std::int64_t l = static_cast<std::int64_t>(h) * w;
  for (int c = 0; c < fg; ++c) {
    if (!present[static_cast<std::size_t>(c)]) continue;  // absent classes stay zero
    const Tensor& cam = cams[static_cast<std::size_t>(c)].scores;
    double mx = 0.0;
    for (std::int64_t i = 0; i < l; ++i) mx = std::max(mx, cam[i]);
    if (mx <= eps) continue;  // identically-dead channel stays zero
    for (std::int64_t i = 0; i < l; ++i) out.scores[i * (fg + 1) + c + 1] = cam[i] / mx;
  }
  // Background score: one minus the strongest foreground response.
  for (std::int64_t i = 0; i < l; ++i) {
    double mx = 0.0;
    for (int c = 1; c <= fg; ++c) mx = std::max(mx, out.scores[i * (fg + 1) + c]);
    out.scores[i * (fg + 1)] = 1.0 - mx;
  }
  return out;
}

}  // namespace pseudoseg::net
