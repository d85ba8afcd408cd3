#pragma once

#include <cstdint>
#include <vector>

#include "pseudoseg/autodiff.hpp"
#include "pseudoseg/image.hpp"
#include "pseudoseg/sgc.hpp"

namespace pseudoseg::train {

// Un-normalized loss sum plus the number of contributing elements. Batch
// averaging divides once by the batch-wide count (the N x |D| reading), so
// images with no valid pixels simply contribute nothing.
struct MaskedLoss {
  ad::Value loss_sum;
  std::int64_t valid_count = 0;
};

// Pixel-wise cross-entropy against an index mask; ignore pixels are skipped.
MaskedLoss supervised_ce_graph(ad::Tape& tape, ad::Value logits, const data::LabelMask& y);

// Soft cross-entropy of the strong-view prediction against a constant pseudo
// label. CutOut pixels are excluded; a hardened mask additionally excludes
// its ignore regions and replaces the target with one-hot rows.
MaskedLoss consistency_ce_graph(ad::Tape& tape, ad::Value strong_logits,
                                const Tensor& target_probs,
                                const std::vector<std::uint8_t>& cutout_mask,
                                const data::LabelMask* hardened);

// Same as consistency_ce_graph but against an on-tape (already detached)
// pseudo-label value. Used by the stop-gradient audit.
MaskedLoss consistency_ce_graph_value(ad::Tape& tape, ad::Value strong_logits,
                                      ad::Value target_probs,
                                      const std::vector<std::uint8_t>& cutout_mask);

// Multi-label binary cross-entropy with logits; count = number of classes.
MaskedLoss classification_bce_graph(ad::Tape& tape, ad::Value class_logits,
                                    const data::ImageLevelLabels& labels);

// Pixel-wise negative log-likelihood on probabilities (the SGC branch is
// already softmaxed at native resolution and resized).
MaskedLoss nll_on_probs_graph(ad::Tape& tape, ad::Value probs, const data::LabelMask& y);

// Scalar wrappers matching the per-operation contracts (mean over valid
// elements, 0 when nothing is valid).
double supervised_loss(const Tensor& logits, const data::LabelMask& y);
double consistency_loss(const Tensor& strong_logits, const sgc::PseudoLabel& y_tilde,
                        const std::vector<std::uint8_t>& cutout_mask);
double classification_loss(const Tensor& class_logits, const data::ImageLevelLabels& labels);
double sgc_loss(const Tensor& sgc_probs, const data::LabelMask& y);

// Polynomial decay: base * (1 - iter/total)^power. Non-increasing, 0 at the
// final iteration.
double poly_lr(double base_lr, std::int64_t iter, std::int64_t total, double power);

}  // namespace pseudoseg::train
