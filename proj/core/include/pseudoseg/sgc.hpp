#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>

#include "pseudoseg/image.hpp"
#include "pseudoseg/params.hpp"

namespace pseudoseg::sgc {

inline constexpr double kNormEps = 1e-8;

struct FusionConfig {
  double gamma = 0.5;        // decoder weight in the probability mix
  double temperature = 0.5;  // sharpening temperature, in (0,1]
  enum class Mode { soft, hard } mode = Mode::soft;
  double hard_threshold = 0.5;

  void validate() const;
  // "low_data": gamma 0.5, T 0.5. "high_data": gamma 0.3, T 0.7.
  static FusionConfig preset(const std::string& name);
};

// Per-pixel categorical distribution over C classes; rows sum to 1.
struct PseudoLabel {
  Tensor probs;  // {H,W,C}
  std::optional<data::LabelMask> hardened;
};

// Learnable attention triplet: key/query projections over hypercolumn
// features plus the output class-to-class map. Trained only by the SGC loss.
class AttentionParams {
 public:
  AttentionParams(int feature_dim, int embed_dim, int num_classes, net::ParamStore& store,
                  Rng& rng);

  // Score propagation across all region pairs:
  //   out_i = (m_i + sum_j softmax_j(<Wk h_i, Wv h_j>) m_j) . Wc
  // m is {H,W,C} or {L,C}; h matches spatially with the feature dim last.
  ad::Value propagate(ad::Tape& tape, net::BoundParams& params, ad::Value m, ad::Value h) const;

  // Same computation on plain tensors (runs a private tape).
  Tensor propagate_plain(const Tensor& m, const Tensor& h) const;

  int feature_dim() const { return feature_dim_; }
  int embed_dim() const { return embed_dim_; }
  int num_classes() const { return num_classes_; }

 private:
  int feature_dim_, embed_dim_, num_classes_;
  net::ParamStore* store_;
  int w_k_ = -1, w_v_ = -1, w_c_ = -1;
};

// Joint magnitude sqrt(sum_i p_i^2 + m_i^2) with an epsilon floor; the
// shared temperature that softens both logit vectors before fusing.
double norm_factor(std::span<const double> p, std::span<const double> m, double eps = kNormEps);

// p^(1/T) renormalized. Keeps the argmax; reduces entropy for T < 1.
std::vector<double> sharpen(std::span<const double> p, double temperature);

// Calibrated fusion (graph form): per pixel,
//   Sharpen(gamma Softmax(p/Norm) + (1-gamma) Softmax(m/Norm), T).
ad::Value fuse_graph(ad::Tape& tape, ad::Value p_logits, ad::Value m_logits,
                     const FusionConfig& cfg);
ad::Value sharpen_graph(ad::Value probs, double temperature);

// Plain-tensor entry point; hardens when cfg.mode == hard.
PseudoLabel fuse(const Tensor& p_logits, const Tensor& m_logits, const FusionConfig& cfg);

// argmax where confidence strictly exceeds the threshold, ignore elsewhere.
data::LabelMask harden(const Tensor& probs, double threshold);

// Ablation arms around the full fusion pipeline.
enum class FusionVariant {
  decoder_only,
  sgc_only,
  mix_no_norm,
  mix_no_sharpen,
  full_no_norm_no_sharpen,
  hard_decoder,
  full,
};

FusionVariant parse_variant(const std::string& name);
std::string variant_name(FusionVariant v);
PseudoLabel fusion_variant(const Tensor& p_logits, const Tensor& m_logits,
                           const FusionConfig& cfg, FusionVariant variant);

// Simple binary container (magic + shape header + 32-bit floats) for score
// map and pseudo-label dumps.
void save_score_map(const std::filesystem::path& file, const Tensor& t);
Tensor load_score_map(const std::filesystem::path& file);

}  // namespace pseudoseg::sgc
