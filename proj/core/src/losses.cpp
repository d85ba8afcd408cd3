#include "pseudoseg/losses.hpp"

#include <algorithm>
#include <cmath>

#include "pseudoseg/errors.hpp"

namespace pseudoseg::train {

namespace {

// -sum_i w_i sum_c t_ic * logp_ic from a log-probability value and a constant
// target/weight pair.
MaskedLoss weighted_nll(ad::Tape& tape, ad::Value log_probs, Tensor targets, Tensor weights,
                        std::int64_t valid_count) {
  ad::Value t = tape.constant(std::move(targets));
  ad::Value w = tape.constant(std::move(weights));
  ad::Value per_pixel = ad::row_sum(ad::mul(log_probs, t));  // {L,1}
  ad::Value weighted = ad::mul(per_pixel, w);
  MaskedLoss out;
  out.loss_sum = ad::scale(ad::sum(weighted), -1.0);
  out.valid_count = valid_count;
  return out;
}

void check_mask_shape(const Tensor& logits, const data::LabelMask& y, const char* who) {
  check_contract(logits.ndim() == 3, std::string(who) + ": logits must be {H,W,C}");
  check_contract(logits.dim(0) == y.height && logits.dim(1) == y.width,
                 std::string(who) + ": mask/logits size mismatch");
}

}  // namespace

MaskedLoss supervised_ce_graph(ad::Tape& tape, ad::Value logits, const data::LabelMask& y) {
  check_mask_shape(logits.v(), y, "supervised_ce");
  const int c = logits.v().dim(2);
  const std::int64_t l = logits.v().rows();
  Tensor targets(logits.v().shape());
  Tensor weights({static_cast<int>(l), 1});
  std::int64_t valid = 0;
  for (std::int64_t i = 0; i < l; ++i) {
    const int t = y.classes[static_cast<std::size_t>(i)];
    if (t == data::kIgnoreValue) continue;
    check_contract(t < c, "supervised_ce: label outside class range");
    targets[i * c + t] = 1.0;
    weights[i] = 1.0;
    ++valid;
  }
  return weighted_nll(tape, ad::log_softmax_rows(logits), std::move(targets),
                      std::move(weights), valid);
}

MaskedLoss consistency_ce_graph(ad::Tape& tape, ad::Value strong_logits,
                                const Tensor& target_probs,
                                const std::vector<std::uint8_t>& cutout_mask,
                                const data::LabelMask* hardened) {
  check_contract(strong_logits.v().same_shape(target_probs),
                 "consistency_ce: target/logits shape mismatch");
  const int c = strong_logits.v().dim(2);
  const std::int64_t l = strong_logits.v().rows();
  check_contract(cutout_mask.empty() || static_cast<std::int64_t>(cutout_mask.size()) == l,
                 "consistency_ce: cutout mask size mismatch");
  Tensor targets(strong_logits.v().shape());
  Tensor weights({static_cast<int>(l), 1});
  std::int64_t valid = 0;
  for (std::int64_t i = 0; i < l; ++i) {
    if (!cutout_mask.empty() && cutout_mask[static_cast<std::size_t>(i)]) continue;
    if (hardened) {
      const int t = hardened->classes[static_cast<std::size_t>(i)];
      if (t == data::kIgnoreValue) continue;
      targets[i * c + t] = 1.0;
    } else {
      for (int k = 0; k < c; ++k) targets[i * c + k] = target_probs[i * c + k];
    }
    weights[i] = 1.0;
    ++valid;
  }
  return weighted_nll(tape, ad::log_softmax_rows(strong_logits), std::move(targets),
                      std::move(weights), valid);
}

MaskedLoss consistency_ce_graph_value(ad::Tape& tape, ad::Value strong_logits,
                                      ad::Value target_probs,
                                      const std::vector<std::uint8_t>& cutout_mask) {
  check_contract(strong_logits.v().same_shape(target_probs.v()),
                 "consistency_ce: target/logits shape mismatch");
  const std::int64_t l = strong_logits.v().rows();
  Tensor weights({static_cast<int>(l), 1});
  std::int64_t valid = 0;
  for (std::int64_t i = 0; i < l; ++i) {
    if (!cutout_mask.empty() && cutout_mask[static_cast<std::size_t>(i)]) continue;
    weights[i] = 1.0;
    ++valid;
  }
  ad::Value per_pixel = ad::row_sum(ad::mul(ad::log_softmax_rows(strong_logits), target_probs));
  ad::Value weighted = ad::mul(per_pixel, tape.constant(std::move(weights)));
  MaskedLoss out;
  out.loss_sum = ad::scale(ad::sum(weighted), -1.0);
  out.valid_count = valid;
  return out;
}

MaskedLoss classification_bce_graph(ad::Tape& tape, ad::Value class_logits,
                                    const data::ImageLevelLabels& labels) {
  const Tensor& z = class_logits.v();
  const auto k = static_cast<std::int64_t>(labels.present.size());
  check_contract(z.size() == k, "classification_bce: logits/labels size mismatch");

  Tensor targets(z.shape());
  for (std::int64_t i = 0; i < k; ++i)
    targets[i] = labels.present[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

  // Stable BCE-with-logits: max(z,0) - z*t + log1p(exp(-|z|)).
  double total = 0.0;
  for (std::int64_t i = 0; i < k; ++i)
    total += std::max(z[i], 0.0) - z[i] * targets[i] + std::log1p(std::exp(-std::fabs(z[i])));

  ad::Node* n = tape.make_node(Tensor::scalar(total), {class_logits.node()});
  if (n->requires_grad) {
    n->saved.push_back(std::move(targets));
    ad::Node* nz = class_logits.node();
    n->backward = [n, nz, k] {
      Tensor& gz = nz->grad_ref();
      const Tensor& t = n->saved[0];
      const double g = n->grad[0];
      for (std::int64_t i = 0; i < k; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-nz->value()[i]));
        gz[i] += g * (s - t[i]);
      }
    };
  }
  MaskedLoss out;
  out.loss_sum = ad::Value(class_logits.tape(), n);
  out.valid_count = k;
  return out;
}

MaskedLoss nll_on_probs_graph(ad::Tape& tape, ad::Value probs, const data::LabelMask& y) {
  check_mask_shape(probs.v(), y, "nll_on_probs");
  const int c = probs.v().dim(2);
  const std::int64_t l = probs.v().rows();
  Tensor targets(probs.v().shape());
  Tensor weights({static_cast<int>(l), 1});
  std::int64_t valid = 0;
  for (std::int64_t i = 0; i < l; ++i) {
    const int t = y.classes[static_cast<std::size_t>(i)];
    if (t == data::kIgnoreValue) continue;
    check_contract(t < c, "nll_on_probs: label outside class range");
    targets[i * c + t] = 1.0;
    weights[i] = 1.0;
    ++valid;
  }
  return weighted_nll(tape, ad::log_clamped(probs, 1e-30), std::move(targets),
                      std::move(weights), valid);
}

namespace {

double mean_or_zero(const MaskedLoss& ml) {
  return ml.valid_count > 0 ? ml.loss_sum.v()[0] / static_cast<double>(ml.valid_count) : 0.0;
}

}  // namespace

double supervised_loss(const Tensor& logits, const data::LabelMask& y) {
  ad::Tape tape;
  return mean_or_zero(supervised_ce_graph(tape, tape.constant(logits), y));
}

double consistency_loss(const Tensor& strong_logits, const sgc::PseudoLabel& y_tilde,
                        const std::vector<std::uint8_t>& cutout_mask) {
  ad::Tape tape;
  return mean_or_zero(consistency_ce_graph(tape, tape.constant(strong_logits), y_tilde.probs,
                                           cutout_mask,
                                           y_tilde.hardened ? &*y_tilde.hardened : nullptr));
}

double classification_loss(const Tensor& class_logits, const data::ImageLevelLabels& labels) {
  ad::Tape tape;
  return mean_or_zero(classification_bce_graph(tape, tape.constant(class_logits), labels));
}

double sgc_loss(const Tensor& sgc_probs, const data::LabelMask& y) {
  ad::Tape tape;
  return mean_or_zero(nll_on_probs_graph(tape, tape.constant(sgc_probs), y));
}

double poly_lr(double base_lr, std::int64_t iter, std::int64_t total, double power) {
  check_contract(total >= 1, "poly_lr: total must be >= 1");
  const double t = std::clamp(static_cast<double>(iter) / static_cast<double>(total), 0.0, 1.0);
  return base_lr * std::pow(1.0 - t, power);
}

}  // namespace pseudoseg::train
