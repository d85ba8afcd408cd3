#include "pseudoseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

#include "pseudoseg/errors.hpp"
#include "pseudoseg/metrics.hpp"

namespace pseudoseg::train {

TrainMode parse_mode(const std::string& name) {
  if (name == "supervised_only") return TrainMode::supervised_only;
  if (name == "unlabeled") return TrainMode::unlabeled;
  if (name == "image_level") return TrainMode::image_level;
  throw ConfigError("unknown train mode '" + name +
                    "' (expected supervised_only|unlabeled|image_level)");
}

std::string mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::supervised_only: return "supervised_only";
    case TrainMode::unlabeled: return "unlabeled";
    case TrainMode::image_level: return "image_level";
  }
  return "?";
}

void TrainConfig::validate() const {
  check_config(iterations >= 1, "train.iterations must be >= 1");
  check_config(base_lr > 0.0, "train.base_lr must be > 0");
  check_config(lr_power > 0.0, "train.lr_power must be > 0");
  check_config(momentum >= 0.0 && momentum < 1.0, "train.momentum must be in [0,1)");
  check_config(labeled_batch >= 1, "train.labeled_batch must be >= 1");
  check_config(unlabeled_batch >= 1, "train.unlabeled_batch must be >= 1");
  check_config(eval_interval >= 1, "train.eval_interval must be >= 1");
  check_config(checkpoint_interval >= 1, "train.checkpoint_interval must be >= 1");
  check_config(attention_embed_dim >= 1, "train.attention_embed_dim must be >= 1");
  fusion.validate();
  augment.validate();
  sgc::parse_variant(pseudo_label_source);
}

struct Trainer::Slot {
  std::unique_ptr<ad::Tape> tape;
  std::unique_ptr<net::BoundParams> theta_b;
  std::unique_ptr<net::BoundParams> attn_b;
  std::optional<MaskedLoss> ls, lu, lx, lsa;
  std::string id;
};

Trainer::Trainer(const data::DataSource& source, data::DatasetSplit split,
                 const net::ModelConfig& model_cfg, const TrainConfig& cfg)
    : source_(&source), split_(std::move(split)), cfg_(cfg) {
  cfg_.validate();
  check_config(!split_.labeled_ids.empty(), "trainer: labeled split is empty");
  if (cfg_.mode != TrainMode::supervised_only)
    check_config(!split_.unlabeled_ids.empty(),
                 "trainer: unlabeled split is empty but mode needs unlabeled data");
  variant_ = sgc::parse_variant(cfg_.pseudo_label_source);

  Rng init_rng = make_rng(cfg_.seed, 0x1717);
  theta_ = net::ParamStore();
  model_ = std::make_unique<net::SegModel>(model_cfg, theta_, init_rng);
  attn_ = std::make_unique<sgc::AttentionParams>(model_cfg.hypercolumn_dim(),
                                                 cfg_.attention_embed_dim,
                                                 model_cfg.num_classes, attn_store_, init_rng);
}

net::ScoreMap Trainer::value_maps_from_stage4(const Tensor& stage4,
                                              const std::vector<std::uint8_t>& present) const {
  const int c = model_->config().num_classes;
  std::vector<net::ScoreMap> cams;
  cams.reserve(static_cast<std::size_t>(c) - 1);
  for (int k = 1; k < c; ++k) {
    if (present[static_cast<std::size_t>(k - 1)]) {
      cams.push_back(model_->grad_cam(stage4, k));
    } else {
      net::ScoreMap zero;
      zero.scores = Tensor({stage4.dim(0), stage4.dim(1), 1});
      cams.push_back(std::move(zero));
    }
  }
  return net::build_value_maps(cams, present);
}

std::vector<std::uint8_t> Trainer::class_presence(const Tensor& class_logits,
                                                  const data::ImageLevelLabels* gt_labels) const {
  const int fg = model_->config().num_classes - 1;
  std::vector<std::uint8_t> present(static_cast<std::size_t>(fg), 0);
  if (gt_labels) {
    for (int k = 0; k < fg && k < static_cast<int>(gt_labels->present.size()); ++k)
      present[static_cast<std::size_t>(k)] = gt_labels->present[static_cast<std::size_t>(k)];
  } else {
    // sigmoid(z) > 0.5 <=> z > 0
    for (int k = 0; k < fg; ++k)
      present[static_cast<std::size_t>(k)] = class_logits[k] > 0.0 ? 1 : 0;
  }
  return present;
}

sgc::PseudoLabel Trainer::make_pseudo_label(const data::DenseImage& image,
                                            const data::ImageLevelLabels* gt_labels,
                                            sgc::FusionVariant variant, Tensor* p_logits_out,
                                            Tensor* m_logits_out) {
  ad::Tape tape;
  net::BoundParams theta_b(tape, theta_, /*requires_grad=*/false);
  const net::FeaturePack fp = model_->forward(tape, theta_b, image);
  const Tensor p_logits = fp.decoder_logits.v();

  const auto present = class_presence(fp.class_logits.v(), gt_labels);
  const net::ScoreMap value_maps = value_maps_from_stage4(fp.stage4.v(), present);
  ad::Value h = model_->hypercolumn(tape, fp);
  net::BoundParams attn_b(tape, attn_store_, /*requires_grad=*/false);
  const ad::Value m_hat =
      attn_->propagate(tape, attn_b, tape.constant(value_maps.scores), h);
  const Tensor m_logits = ad::bilinear_resize_plain(m_hat.v(), image.height(), image.width());

  if (p_logits_out) *p_logits_out = p_logits;
  if (m_logits_out) *m_logits_out = m_logits;
  return sgc::fusion_variant(p_logits, m_logits, cfg_.fusion, variant);
}

void Trainer::build_labeled_slot(Slot& slot, const std::string& id, std::int64_t iter,
                                 int index) {
  Rng aug_rng = make_rng(derive_seed(cfg_.seed, 0xA001,
                                     static_cast<std::uint64_t>(iter) * 1024 +
                                         static_cast<std::uint64_t>(index)));
  const data::Sample sample = source_->get_labeled(id);
  const auto wa = aug::weak_augment(sample.image, &*sample.mask, cfg_.augment, aug_rng);

  slot.id = id;
  slot.tape = std::make_unique<ad::Tape>();
  slot.theta_b = std::make_unique<net::BoundParams>(*slot.tape, theta_, true);
  const net::FeaturePack fp = model_->forward(*slot.tape, *slot.theta_b, wa.image);
  slot.ls = supervised_ce_graph(*slot.tape, fp.decoder_logits, *wa.mask);

  if (cfg_.mode == TrainMode::supervised_only) return;

  const int c = model_->config().num_classes;
  const auto img_labels = data::image_level_labels(*wa.mask, c);
  slot.lx = classification_bce_graph(*slot.tape, fp.class_logits, img_labels);

  // SGC branch. The value maps and the hypercolumn enter as constants, so
  // L_sa can only reach the attention parameters.
  const net::ScoreMap value_maps = value_maps_from_stage4(fp.stage4.v(), img_labels.present);
  ad::Value h = model_->hypercolumn(*slot.tape, fp);
  slot.attn_b = std::make_unique<net::BoundParams>(*slot.tape, attn_store_, true);
  ad::Value sgc_out =
      attn_->propagate(*slot.tape, *slot.attn_b, slot.tape->constant(value_maps.scores), h);
  ad::Value probs_low = ad::softmax_rows(sgc_out);
  ad::Value probs = ad::upsample_bilinear(probs_low, wa.image.height(), wa.image.width());
  slot.lsa = nll_on_probs_graph(*slot.tape, probs, *wa.mask);
}

void Trainer::build_unlabeled_slot(Slot& slot, const std::string& id, std::int64_t iter,
                                   int index) {
  Rng aug_rng = make_rng(derive_seed(cfg_.seed, 0xA002,
                                     static_cast<std::uint64_t>(iter) * 1024 +
                                         static_cast<std::uint64_t>(index)));
  const data::Sample sample = source_->get(id);
  const auto wa =
      aug::weak_augment(sample.image, sample.mask ? &*sample.mask : nullptr, cfg_.augment,
                        aug_rng);

  const data::ImageLevelLabels* gt = nullptr;
  if (cfg_.mode == TrainMode::image_level && sample.labels) gt = &*sample.labels;

  // Pseudo label from the weak view, detached from the graph by construction.
  sgc::PseudoLabel pseudo = make_pseudo_label(wa.image, gt, variant_);

  const auto strong = aug::strong_augment(wa.image, cfg_.augment, aug_rng);

  slot.id = id;
  slot.tape = std::make_unique<ad::Tape>();
  slot.theta_b = std::make_unique<net::BoundParams>(*slot.tape, theta_, true);
  const net::FeaturePack fp = model_->forward(*slot.tape, *slot.theta_b, strong.image);
  slot.lu = consistency_ce_graph(*slot.tape, fp.decoder_logits, pseudo.probs,
                                 strong.cutout_mask,
                                 pseudo.hardened ? &*pseudo.hardened : nullptr);
  if (gt) slot.lx = classification_bce_graph(*slot.tape, fp.class_logits, *gt);
}

namespace {

void sgd_step(net::ParamStore& store, double lr, double momentum) {
  for (auto& p : store.params()) {
    for (std::int64_t i = 0; i < p.value.size(); ++i) {
      p.momentum[i] = momentum * p.momentum[i] + p.grad[i];
      p.value[i] -= lr * p.momentum[i];
    }
    p.grad.zero();
  }
}

std::vector<std::string> pick_ids(const std::vector<std::string>& pool, int count, Rng& rng) {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(count));
  std::uniform_int_distribution<std::size_t> dist(0, pool.size() - 1);
  for (int i = 0; i < count; ++i) out.push_back(pool[dist(rng)]);
  return out;
}

}  // namespace

LossReport Trainer::train_step(std::int64_t iter) {
  const int nl = cfg_.labeled_batch;
  const int nu = cfg_.mode == TrainMode::supervised_only ? 0 : cfg_.unlabeled_batch;

  Rng batch_rng = make_rng(derive_seed(cfg_.seed, 0xBA7C4, static_cast<std::uint64_t>(iter)));
  const auto labeled_ids = pick_ids(split_.labeled_ids, nl, batch_rng);
  const auto unlabeled_ids =
      nu > 0 ? pick_ids(split_.unlabeled_ids, nu, batch_rng) : std::vector<std::string>{};

  std::vector<Slot> slots(static_cast<std::size_t>(nl + nu));

#pragma omp parallel for schedule(static)
  for (int j = 0; j < nl + nu; ++j) {
    if (j < nl)
      build_labeled_slot(slots[static_cast<std::size_t>(j)],
                         labeled_ids[static_cast<std::size_t>(j)], iter, j);
    else
      build_unlabeled_slot(slots[static_cast<std::size_t>(j)],
                           unlabeled_ids[static_cast<std::size_t>(j - nl)], iter, j);
  }

  // Batch-wide counts, then NaN screening before any parameter is touched.
  LossReport report;
  double sum_s = 0, sum_u = 0, sum_x = 0, sum_sa = 0;
  for (const auto& slot : slots) {
    if (slot.ls) {
      sum_s += slot.ls->loss_sum.v()[0];
      report.valid_s += slot.ls->valid_count;
    }
    if (slot.lu) {
      sum_u += slot.lu->loss_sum.v()[0];
      report.valid_u += slot.lu->valid_count;
    }
    if (slot.lx) {
      sum_x += slot.lx->loss_sum.v()[0];
      report.valid_x += slot.lx->valid_count;
    }
    if (slot.lsa) {
      sum_sa += slot.lsa->loss_sum.v()[0];
      report.valid_sa += slot.lsa->valid_count;
    }
  }
  if (!std::isfinite(sum_s) || !std::isfinite(sum_u) || !std::isfinite(sum_x) ||
      !std::isfinite(sum_sa)) {
    std::ostringstream msg;
    msg << "NaN loss at iteration " << iter << "; batch ids:";
    for (const auto& slot : slots) msg << " " << slot.id;
    throw NumericError(msg.str());
  }

  report.l_s = report.valid_s ? sum_s / static_cast<double>(report.valid_s) : 0.0;
  report.l_u = report.valid_u ? sum_u / static_cast<double>(report.valid_u) : 0.0;
  report.l_x = report.valid_x ? sum_x / static_cast<double>(report.valid_x) : 0.0;
  report.l_sa = report.valid_sa ? sum_sa / static_cast<double>(report.valid_sa) : 0.0;
  report.total = report.l_s + report.l_u + report.l_x + report.l_sa;

#pragma omp parallel for schedule(static)
  for (int j = 0; j < nl + nu; ++j) {
    auto& slot = slots[static_cast<std::size_t>(j)];
    std::vector<std::pair<ad::Value, double>> seeds;
    if (slot.ls && report.valid_s)
      seeds.emplace_back(slot.ls->loss_sum, 1.0 / static_cast<double>(report.valid_s));
    if (slot.lu && report.valid_u)
      seeds.emplace_back(slot.lu->loss_sum, 1.0 / static_cast<double>(report.valid_u));
    if (slot.lx && report.valid_x)
      seeds.emplace_back(slot.lx->loss_sum, 1.0 / static_cast<double>(report.valid_x));
    if (slot.lsa && report.valid_sa)
      seeds.emplace_back(slot.lsa->loss_sum, 1.0 / static_cast<double>(report.valid_sa));
    if (!seeds.empty()) slot.tape->backward(seeds);
  }

  // Fixed reduction order keeps training bit-reproducible.
  for (auto& slot : slots) {
    slot.theta_b->accumulate_grads();
    if (slot.attn_b) slot.attn_b->accumulate_grads();
  }

  const double lr = poly_lr(cfg_.base_lr, iter, cfg_.iterations, cfg_.lr_power);
  sgd_step(theta_, lr, cfg_.momentum);
  sgd_step(attn_store_, lr, cfg_.momentum);
  return report;
}

StopGradAudit Trainer::audit_stop_gradient(std::int64_t iter) {
  StopGradAudit audit;
  Rng batch_rng = make_rng(derive_seed(cfg_.seed, 0xAD17, static_cast<std::uint64_t>(iter)));
  const std::string labeled_id = pick_ids(split_.labeled_ids, 1, batch_rng)[0];
  const std::string unlabeled_id = split_.unlabeled_ids.empty()
                                       ? labeled_id
                                       : pick_ids(split_.unlabeled_ids, 1, batch_rng)[0];

  {  // L_sa reaches attention parameters only.
    Slot slot;
    build_labeled_slot(slot, labeled_id, iter, 0);
    check_contract(slot.lsa.has_value(), "audit: L_sa missing (supervised_only mode?)");
    slot.tape->backward({{slot.lsa->loss_sum,
                          1.0 / std::max<std::int64_t>(1, slot.lsa->valid_count)}});
    audit.max_theta_grad_from_lsa = slot.theta_b->max_abs_grad();
    audit.max_attention_grad_from_lsa = slot.attn_b->max_abs_grad();
  }

  {  // Pseudo label on-tape behind stop_grad: no gradient into the weak view.
    Rng aug_rng = make_rng(derive_seed(cfg_.seed, 0xAD18, static_cast<std::uint64_t>(iter)));
    const data::Sample sample = source_->get(unlabeled_id);
    const auto wa = aug::weak_augment(sample.image, nullptr, cfg_.augment, aug_rng);

    ad::Tape tape;
    net::BoundParams theta_b(tape, theta_, true);
    const net::FeaturePack fp_weak = model_->forward(tape, theta_b, wa.image);

    const auto present = class_presence(fp_weak.class_logits.v(), nullptr);
    const net::ScoreMap value_maps = value_maps_from_stage4(fp_weak.stage4.v(), present);
    ad::Value h = model_->hypercolumn(tape, fp_weak);
    net::BoundParams attn_b(tape, attn_store_, false);
    ad::Value m_hat = attn_->propagate(tape, attn_b, tape.constant(value_maps.scores), h);
    ad::Value m_logits = ad::upsample_bilinear(m_hat, wa.image.height(), wa.image.width());
    ad::Value fused = sgc::fuse_graph(tape, fp_weak.decoder_logits, m_logits, cfg_.fusion);
    ad::Value pseudo = ad::stop_grad(fused);

    const auto strong = aug::strong_augment(wa.image, cfg_.augment, aug_rng);
    const net::FeaturePack fp_strong = model_->forward(tape, theta_b, strong.image);
    MaskedLoss lu = consistency_ce_graph_value(tape, fp_strong.decoder_logits, pseudo,
                                               strong.cutout_mask);
    tape.backward({{lu.loss_sum, 1.0 / std::max<std::int64_t>(1, lu.valid_count)}});

    auto max_abs = [](const ad::Value& v) {
      if (!v.node()->grad_ready) return 0.0;
      double mx = 0.0;
      for (std::int64_t i = 0; i < v.node()->grad.size(); ++i)
        mx = std::max(mx, std::fabs(v.node()->grad[i]));
      return mx;
    };
    audit.max_weak_activation_grad =
        std::max({max_abs(fp_weak.decoder_logits), max_abs(fp_weak.stage4),
                  max_abs(fp_weak.stage3), max_abs(fp_weak.class_logits)});
  }
  return audit;
}

Tensor Trainer::predict_probs(const data::DenseImage& image) {
  ad::Tape tape;
  net::BoundParams theta_b(tape, theta_, false);
  const net::FeaturePack fp = model_->forward(tape, theta_b, image);
  return ad::softmax_rows_plain(fp.decoder_logits.v());
}

EvalResult Trainer::evaluate() {
  const auto& ids = source_->val_ids();
  check_contract(!ids.empty(), "evaluate: validation split is empty");
  const int c = model_->config().num_classes;
  const int n = static_cast<int>(ids.size());

  std::vector<metrics::ConfusionMatrix> cms(static_cast<std::size_t>(n),
                                            metrics::ConfusionMatrix(c));
  std::vector<metrics::CalibrationBins> bins(static_cast<std::size_t>(n),
                                             metrics::CalibrationBins(15));

#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    const data::Sample sample = source_->get_labeled(ids[static_cast<std::size_t>(i)]);
    const Tensor probs = predict_probs(sample.image);
    const int h = sample.image.height(), w = sample.image.width();
    data::LabelMask pred = data::LabelMask::filled(h, w, 0);
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(h) * w; ++p) {
      int best = 0;
      double best_p = probs[p * c];
      for (int k = 1; k < c; ++k)
        if (probs[p * c + k] > best_p) {
          best_p = probs[p * c + k];
          best = k;
        }
      pred.classes[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
    }
    cms[static_cast<std::size_t>(i)].add(*sample.mask, pred);
    metrics::score_calibration(probs, *sample.mask, bins[static_cast<std::size_t>(i)]);
  }

  metrics::ConfusionMatrix cm(c);
  metrics::CalibrationBins all_bins(15);
  for (int i = 0; i < n; ++i) {
    cm.merge(cms[static_cast<std::size_t>(i)]);
    all_bins.merge(bins[static_cast<std::size_t>(i)]);
  }
  const auto m = metrics::miou(cm);
  EvalResult out;
  out.miou = m.miou;
  out.per_class = m.per_class;
  out.ece = all_bins.ece();
  return out;
}

std::map<std::string, double> Trainer::pseudo_label_ece(
    const std::vector<sgc::FusionVariant>& variants) {
  const auto& ids = source_->val_ids();
  check_contract(!ids.empty(), "pseudo_label_ece: validation split is empty");
  const int n = static_cast<int>(ids.size());
  const int nv = static_cast<int>(variants.size());

  std::vector<metrics::CalibrationBins> bins(static_cast<std::size_t>(n) * nv,
                                             metrics::CalibrationBins(15));

#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    const data::Sample sample = source_->get_labeled(ids[static_cast<std::size_t>(i)]);
    const data::ImageLevelLabels* gt =
        cfg_.mode == TrainMode::image_level && sample.labels ? &*sample.labels : nullptr;
    Tensor p_logits, m_logits;
    make_pseudo_label(sample.image, gt, sgc::FusionVariant::full, &p_logits, &m_logits);
    for (int v = 0; v < nv; ++v) {
      const auto pl = sgc::fusion_variant(p_logits, m_logits, cfg_.fusion,
                                          variants[static_cast<std::size_t>(v)]);
      auto& bin = bins[static_cast<std::size_t>(i) * nv + v];
      if (pl.hardened) {
        const int c = pl.probs.dim(2);
        for (std::int64_t p = 0; p < pl.probs.rows(); ++p) {
          const int t = sample.mask->classes[static_cast<std::size_t>(p)];
          const int hard = pl.hardened->classes[static_cast<std::size_t>(p)];
          if (t == data::kIgnoreValue || hard == data::kIgnoreValue) continue;
          double conf = pl.probs[p * c + hard];
          bin.add(std::min(std::max(conf, 1e-12), 1.0), hard == t);
        }
      } else {
        metrics::score_calibration(pl.probs, *sample.mask, bin);
      }
    }
  }

  std::map<std::string, double> out;
  for (int v = 0; v < nv; ++v) {
    metrics::CalibrationBins merged(15);
    for (int i = 0; i < n; ++i) merged.merge(bins[static_cast<std::size_t>(i) * nv + v]);
    out[sgc::variant_name(variants[static_cast<std::size_t>(v)])] = merged.ece();
  }
  return out;
}

}  // namespace pseudoseg::train
