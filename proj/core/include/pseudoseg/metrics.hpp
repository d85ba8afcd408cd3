#pragma once

#include <cstdint>
#include <vector>

#include "pseudoseg/image.hpp"

namespace pseudoseg::metrics {

// Rows = ground truth, columns = prediction. Pixels whose ground truth is the
// ignore value are skipped. Accumulators merge, so per-image tallies can be
// computed in parallel and reduced.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void add_pixel(int truth, int pred);
  void add(const data::LabelMask& truth, const data::LabelMask& pred);
  void merge(const ConfusionMatrix& other);

  int num_classes() const { return num_classes_; }
  std::int64_t total() const;
  std::int64_t count(int truth, int pred) const {
    return counts_[static_cast<std::size_t>(truth) * num_classes_ + pred];
  }

 private:
  int num_classes_;
  std::vector<std::int64_t> counts_;
};

struct MiouResult {
  double miou = 0.0;
  std::vector<double> per_class;   // NaN for classes with zero union
  std::vector<bool> in_mean;
};

// Per-class IoU = diag / (row + col - diag); classes with zero union are
// excluded from the mean. Throws NumericError on an empty matrix.
MiouResult miou(const ConfusionMatrix& cm);

// Equal-width confidence bins over (0,1].
class CalibrationBins {
 public:
  explicit CalibrationBins(int bins = 15);

  void add(double confidence, bool correct);
  void merge(const CalibrationBins& other);

  std::int64_t total() const;
  // sum_b (n_b/N) |acc_b - conf_b|. Throws NumericError when empty.
  double ece() const;
  int bins() const { return static_cast<int>(count_.size()); }
  std::int64_t bin_count(int b) const { return count_[static_cast<std::size_t>(b)]; }

 private:
  std::vector<std::int64_t> count_;
  std::vector<double> sum_confidence_;
  std::vector<std::int64_t> sum_correct_;
};

// Scores the per-pixel argmax/confidence of a {H,W,C} probability map against
// ground truth, skipping ignored pixels.
void score_calibration(const Tensor& probs, const data::LabelMask& truth, CalibrationBins& bins);

}  // namespace pseudoseg::metrics
