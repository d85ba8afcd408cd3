#pragma once

#include <map>
#include <memory>
#include <string>

#include "pseudoseg/losses.hpp"
#include "pseudoseg/model.hpp"
#include "pseudoseg/split.hpp"

namespace pseudoseg::train {

enum class TrainMode { supervised_only, unlabeled, image_level };

TrainMode parse_mode(const std::string& name);
std::string mode_name(TrainMode mode);

struct TrainConfig {
  int iterations = 2000;
  double base_lr = 0.007;
  double lr_power = 0.9;
  double momentum = 0.9;
  int labeled_batch = 8;
  int unlabeled_batch = 8;
  TrainMode mode = TrainMode::unlabeled;
  sgc::FusionConfig fusion;
  aug::AugmentConfig augment;
  std::uint64_t seed = 1;
  int eval_interval = 100;
  int checkpoint_interval = 500;
  int attention_embed_dim = 16;
  // Pseudo-label source; "full" is the calibrated fusion, the others are
  // ablation arms.
  std::string pseudo_label_source = "full";
  int threads = 0;  // 0 = OpenMP default

  void validate() const;
};

// Per-batch loss report. Each term averages its un-normalized sum over the
// batch-wide count of contributing elements; total is the plain (unit-weight)
// sum of the four terms.
struct LossReport {
  double l_s = 0, l_u = 0, l_x = 0, l_sa = 0, total = 0;
  std::int64_t valid_s = 0, valid_u = 0, valid_x = 0, valid_sa = 0;
};

struct EvalResult {
  double miou = 0.0;
  double ece = 0.0;
  std::vector<double> per_class;
};

struct StopGradAudit {
  // Gradient magnitude leaked from L_sa into non-attention parameters;
  // must be exactly zero.
  double max_theta_grad_from_lsa = 0.0;
  // L_sa gradient actually reaching the attention parameters (nonzero for
  // generic inputs).
  double max_attention_grad_from_lsa = 0.0;
  // Gradient reaching weak-view activations through the pseudo label;
  // must be exactly zero.
  double max_weak_activation_grad = 0.0;

  bool clean() const {
    return max_theta_grad_from_lsa == 0.0 && max_weak_activation_grad == 0.0;
  }
};

// One-stage trainer: joint L_s + L_u + L_x + L_sa optimization with the
// pseudo label built from the weak view and treated as a constant, and L_sa
// updating only the attention parameters.
class Trainer {
 public:
  Trainer(const data::DataSource& source, data::DatasetSplit split,
          const net::ModelConfig& model_cfg, const TrainConfig& cfg);

  LossReport train_step(std::int64_t iter);

  // Builds the full differentiable pipeline (pseudo label on-tape behind an
  // explicit stop-gradient) for one random batch and verifies both gradient
  // boundaries. Does not update parameters.
  StopGradAudit audit_stop_gradient(std::int64_t iter);

  // Decoder mIoU and ECE on the validation split (no augmentation).
  EvalResult evaluate();

  // ECE of pseudo labels per fusion variant against held-out ground truth.
  std::map<std::string, double> pseudo_label_ece(const std::vector<sgc::FusionVariant>& variants);

  // Pseudo-label pipeline for one weakly augmented (or clean) image. When
  // gt_labels is null, class presence comes from the classifier head.
  sgc::PseudoLabel make_pseudo_label(const data::DenseImage& image,
                                     const data::ImageLevelLabels* gt_labels,
                                     sgc::FusionVariant variant, Tensor* p_logits_out = nullptr,
                                     Tensor* m_logits_out = nullptr);

  // Decoder class probabilities for a clean image (no augmentation).
  Tensor predict_probs(const data::DenseImage& image);

  net::ParamStore& theta() { return theta_; }
  net::ParamStore& attention_store() { return attn_store_; }
  const net::SegModel& model() const { return *model_; }
  const sgc::AttentionParams& attention() const { return *attn_; }
  const data::DataSource& source() const { return *source_; }
  const data::DatasetSplit& split() const { return split_; }
  const TrainConfig& config() const { return cfg_; }
  const net::ModelConfig& model_config() const { return model_->config(); }

 private:
  struct Slot;

  void build_labeled_slot(Slot& slot, const std::string& id, std::int64_t iter, int index);
  void build_unlabeled_slot(Slot& slot, const std::string& id, std::int64_t iter, int index);
  net::ScoreMap value_maps_from_stage4(const Tensor& stage4,
                                       const std::vector<std::uint8_t>& present) const;
  std::vector<std::uint8_t> class_presence(const Tensor& class_logits,
                                           const data::ImageLevelLabels* gt_labels) const;

  const data::DataSource* source_;
  data::DatasetSplit split_;
  TrainConfig cfg_;
  net::ParamStore theta_;
  net::ParamStore attn_store_;
  std::unique_ptr<net::SegModel> model_;
  std::unique_ptr<sgc::AttentionParams> attn_;
  sgc::FusionVariant variant_;
};

}  // namespace pseudoseg::train
