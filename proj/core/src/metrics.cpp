#include "pseudoseg/metrics.hpp"

#include <cmath>
#include <limits>

#include "pseudoseg/errors.hpp"

namespace pseudoseg::metrics {

ConfusionMatrix::ConfusionMatrix(int num_classes) : num_classes_(num_classes) {
  check_contract(num_classes >= 2, "ConfusionMatrix: need at least 2 classes");
  counts_.assign(static_cast<std::size_t>(num_classes) * num_classes, 0);
}

void ConfusionMatrix::add_pixel(int truth, int pred) {
  if (truth == data::kIgnoreValue) return;
  check_contract(truth >= 0 && truth < num_classes_, "ConfusionMatrix: truth out of range");
  check_contract(pred >= 0 && pred < num_classes_, "ConfusionMatrix: pred out of range");
  ++counts_[static_cast<std::size_t>(truth) * num_classes_ + pred];
}

void ConfusionMatrix::add(const data::LabelMask& truth, const data::LabelMask& pred) {
  check_contract(truth.height == pred.height && truth.width == pred.width,
                 "ConfusionMatrix: mask size mismatch");
  for (std::int64_t i = 0; i < truth.size(); ++i) {
    const int t = truth.classes[static_cast<std::size_t>(i)];
    if (t == data::kIgnoreValue) continue;
    add_pixel(t, pred.classes[static_cast<std::size_t>(i)]);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  check_contract(other.num_classes_ == num_classes_, "ConfusionMatrix: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t n = 0;
  for (auto c : counts_) n += c;
  return n;
}

MiouResult miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw NumericError("miou: no valid pixels accumulated");
  const int c = cm.num_classes();
  MiouResult out;
  out.per_class.assign(static_cast<std::size_t>(c), std::numeric_limits<double>::quiet_NaN());
  out.in_mean.assign(static_cast<std::size_t>(c), false);
  double sum = 0.0;
  int used = 0;
  for (int k = 0; k < c; ++k) {
    std::int64_t row = 0, col = 0;
    for (int j = 0; j < c; ++j) {
      row += cm.count(k, j);
      col += cm.count(j, k);
    }
    const std::int64_t inter = cm.count(k, k);
    const std::int64_t uni = row + col - inter;
    if (uni == 0) continue;  // class absent from both; excluded from the mean
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    out.per_class[static_cast<std::size_t>(k)] = iou;
    out.in_mean[static_cast<std::size_t>(k)] = true;
    sum += iou;
    ++used;
  }
  check_contract(used > 0, "miou: all classes have empty union");
  out.miou = sum / used;
  return out;
}

CalibrationBins::CalibrationBins(int bins) {
  check_contract(bins >= 1, "CalibrationBins: need at least one bin");
  count_.assign(static_cast<std::size_t>(bins), 0);
  sum_confidence_.assign(static_cast<std::size_t>(bins), 0.0);
  sum_correct_.assign(static_cast<std::size_t>(bins), 0);
}

void CalibrationBins::add(double confidence, bool correct) {
  check_contract(confidence > 0.0 && confidence <= 1.0,
                 "CalibrationBins: confidence must be in (0,1]");
  const int b = std::min(static_cast<int>(confidence * bins()), bins() - 1);
  ++count_[static_cast<std::size_t>(b)];
  sum_confidence_[static_cast<std::size_t>(b)] += confidence;
  sum_correct_[static_cast<std::size_t>(b)] += correct ? 1 : 0;
}

void CalibrationBins::merge(const CalibrationBins& other) {
  check_contract(other.bins() == bins(), "CalibrationBins: bin count mismatch");
  for (std::size_t i = 0; i < count_.size(); ++i) {
    count_[i] += other.count_[i];
    sum_confidence_[i] += other.sum_confidence_[i];
    sum_correct_[i] += other.sum_correct_[i];
  }
}

std::int64_t CalibrationBins::total() const {
  std::int64_t n = 0;
  for (auto c : count_) n += c;
  return n;
}

double CalibrationBins::ece() const {
  const std::int64_t n = total();
  if (n == 0) throw NumericError("ece: no scored predictions");
  double e = 0.0;
  for (std::size_t b = 0; b < count_.size(); ++b) {
    if (count_[b] == 0) continue;
    const double acc = static_cast<double>(sum_correct_[b]) / count_[b];
    const double conf = sum_confidence_[b] / count_[b];
    e += (static_cast<double>(count_[b]) / n) * std::fabs(acc - conf);
  }
  return e;
}

void score_calibration(const Tensor& probs, const data::LabelMask& truth,
                       CalibrationBins& bins) {
  check_contract(probs.ndim() == 3, "score_calibration: probs must be {H,W,C}");
  check_contract(probs.dim(0) == truth.height && probs.dim(1) == truth.width,
                 "score_calibration: size mismatch");
  const int c = probs.dim(2);
  for (std::int64_t i = 0; i < truth.size(); ++i) {
    const int t = truth.classes[static_cast<std::size_t>(i)];
    if (t == data::kIgnoreValue) continue;
    int best = 0;
    double best_p = probs[i * c];
    for (int k = 1; k < c; ++k)
      if (probs[i * c + k] > best_p) {
        best_p = probs[i * c + k];
        best = k;
      }
    bins.add(std::min(std::max(best_p, 1e-12), 1.0), best == t);
  }
}

}  // namespace pseudoseg::metrics
