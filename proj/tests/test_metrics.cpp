#include <cmath>
#include <set>

#include <doctest.h>

#include "pseudoseg/metrics.hpp"
#include "pseudoseg/rng.hpp"

using namespace pseudoseg;

namespace {

data::LabelMask random_mask(int h, int w, int classes, Rng& rng, bool with_ignore = false) {
  data::LabelMask m = data::LabelMask::filled(h, w, 0);
  std::uniform_int_distribution<int> dist(0, classes - 1 + (with_ignore ? 1 : 0));
  for (auto& v : m.classes) {
    const int d = dist(rng);
    v = d >= classes ? static_cast<std::uint8_t>(data::kIgnoreValue)
                     : static_cast<std::uint8_t>(d);
  }
  return m;
}

// Brute-force per-class IoU from pixel sets.
double miou_sets_oracle(const data::LabelMask& truth, const data::LabelMask& pred, int classes) {
  double sum = 0.0;
  int used = 0;
  for (int c = 0; c < classes; ++c) {
    std::set<std::int64_t> ts, ps;
    for (std::int64_t i = 0; i < truth.size(); ++i) {
      if (truth.classes[static_cast<std::size_t>(i)] == data::kIgnoreValue) continue;
      if (truth.classes[static_cast<std::size_t>(i)] == c) ts.insert(i);
      if (pred.classes[static_cast<std::size_t>(i)] == c) ps.insert(i);
    }
    std::set<std::int64_t> inter;
    for (auto i : ts)
      if (ps.count(i)) inter.insert(i);
    const std::size_t uni = ts.size() + ps.size() - inter.size();
    if (uni == 0) continue;
    sum += static_cast<double>(inter.size()) / static_cast<double>(uni);
    ++used;
  }
  return used ? sum / used : 0.0;
}

}  // namespace

TEST_CASE("miou basics") {
  SUBCASE("perfect prediction scores 1") {
    Rng rng = make_rng(1);
    const auto truth = random_mask(8, 8, 3, rng);
    metrics::ConfusionMatrix cm(3);
    cm.add(truth, truth);
    CHECK(metrics::miou(cm).miou == doctest::Approx(1.0));
  }
  SUBCASE("disjoint prediction scores 0 for that class") {
    data::LabelMask truth = data::LabelMask::filled(4, 4, 1);
    data::LabelMask pred = data::LabelMask::filled(4, 4, 2);
    metrics::ConfusionMatrix cm(3);
    cm.add(truth, pred);
    const auto r = metrics::miou(cm);
    CHECK(r.per_class[1] == doctest::Approx(0.0));
    CHECK(r.per_class[2] == doctest::Approx(0.0));
    CHECK_FALSE(r.in_mean[0]);  // background absent from both
  }
  SUBCASE("empty matrix is an undefined-metric error") {
    metrics::ConfusionMatrix cm(3);
    CHECK_THROWS_AS(metrics::miou(cm), NumericError);
  }
}

TEST_CASE("miou equals the brute-force set oracle on 50 random masks") {
  Rng rng = make_rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto truth = random_mask(8, 8, 3, rng, trial % 2 == 1);
    const auto pred = random_mask(8, 8, 3, rng);
    metrics::ConfusionMatrix cm(3);
    cm.add(truth, pred);
    if (cm.total() == 0) continue;
    CHECK(metrics::miou(cm).miou ==
          doctest::Approx(miou_sets_oracle(truth, pred, 3)).epsilon(1e-12));
  }
}

TEST_CASE("miou is invariant under joint class permutation") {
  Rng rng = make_rng(3);
  const auto truth = random_mask(10, 10, 3, rng);
  const auto pred = random_mask(10, 10, 3, rng);
  const int perm[3] = {2, 0, 1};
  data::LabelMask truth_p = truth, pred_p = pred;
  for (std::int64_t i = 0; i < truth.size(); ++i) {
    truth_p.classes[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(perm[truth.classes[static_cast<std::size_t>(i)]]);
    pred_p.classes[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(perm[pred.classes[static_cast<std::size_t>(i)]]);
  }
  metrics::ConfusionMatrix a(3), b(3);
  a.add(truth, pred);
  b.add(truth_p, pred_p);
  CHECK(metrics::miou(a).miou == doctest::Approx(metrics::miou(b).miou).epsilon(1e-12));
}

TEST_CASE("confusion accumulation is associative") {
  Rng rng = make_rng(4);
  metrics::ConfusionMatrix global(3);
  metrics::ConfusionMatrix merged(3);
  for (int img = 0; img < 5; ++img) {
    const auto truth = random_mask(6, 6, 3, rng, true);
    const auto pred = random_mask(6, 6, 3, rng);
    global.add(truth, pred);
    metrics::ConfusionMatrix local(3);
    local.add(truth, pred);
    merged.merge(local);
  }
  for (int t = 0; t < 3; ++t)
    for (int p = 0; p < 3; ++p) CHECK(global.count(t, p) == merged.count(t, p));
}

TEST_CASE("ece pinned cases") {
  SUBCASE("all confident and correct -> 0") {
    metrics::CalibrationBins bins(15);
    for (int i = 0; i < 100; ++i) bins.add(1.0, true);
    CHECK(bins.ece() == doctest::Approx(0.0));
  }
  SUBCASE("all confidence 1.0, half correct -> exactly 0.5") {
    metrics::CalibrationBins bins(15);
    for (int i = 0; i < 100; ++i) bins.add(1.0, i % 2 == 0);
    CHECK(bins.ece() == 0.5);
  }
  SUBCASE("empty bins are an undefined-metric error") {
    metrics::CalibrationBins bins(15);
    CHECK_THROWS_AS(bins.ece(), NumericError);
  }
  SUBCASE("ece lies in [0,1]") {
    Rng rng = make_rng(5);
    metrics::CalibrationBins bins(15);
    std::uniform_real_distribution<double> conf(0.01, 1.0);
    std::bernoulli_distribution correct(0.3);
    for (int i = 0; i < 1000; ++i) bins.add(conf(rng), correct(rng));
    CHECK(bins.ece() >= 0.0);
    CHECK(bins.ece() <= 1.0);
  }
}

TEST_CASE("perfectly calibrated draws converge to ece near 0") {
  // confidence p, correct with probability p: Monte-Carlo oracle at N=1e5.
  Rng rng = make_rng(6);
  metrics::CalibrationBins bins(15);
  std::uniform_real_distribution<double> conf(0.01, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100000; ++i) {
    const double p = conf(rng);
    bins.add(p, u(rng) < p);
  }
  CHECK(bins.ece() < 0.02);
}

TEST_CASE("adding a perfectly calibrated bin never raises ece above the weighted bound") {
  // definition-level check: ece after adding zero-gap mass equals
  // old_ece * N_old / (N_old + N_new).
  metrics::CalibrationBins bins(15);
  for (int i = 0; i < 50; ++i) bins.add(1.0, i % 2 == 0);  // gap 0.5 at the top bin
  const double before = bins.ece();
  metrics::CalibrationBins calibrated(15);
  // fill a different bin with zero-gap data: confidence 0.5 exactly, half correct
  for (int i = 0; i < 50; ++i) calibrated.add(0.5, i % 2 == 0);
  CHECK(calibrated.ece() == doctest::Approx(0.0));
  bins.merge(calibrated);
  CHECK(bins.ece() == doctest::Approx(before * 0.5).epsilon(1e-12));
  CHECK(bins.ece() <= before);
}

TEST_CASE("calibration bins merge matches one-pass accumulation") {
  Rng rng = make_rng(7);
  metrics::CalibrationBins one(15), a(15), b(15);
  std::uniform_real_distribution<double> conf(0.01, 1.0);
  std::bernoulli_distribution correct(0.6);
  for (int i = 0; i < 500; ++i) {
    const double c = conf(rng);
    const bool ok = correct(rng);
    one.add(c, ok);
    (i % 2 ? a : b).add(c, ok);
  }
  a.merge(b);
  CHECK(a.total() == one.total());
  CHECK(a.ece() == doctest::Approx(one.ece()).epsilon(1e-12));
}

TEST_CASE("score_calibration skips ignored pixels") {
  Tensor probs({1, 2, 2});
  probs[0] = 0.9;
  probs[1] = 0.1;  // pixel 0: class 0 at 0.9
  probs[2] = 0.2;
  probs[3] = 0.8;  // pixel 1: class 1 at 0.8
  data::LabelMask truth = data::LabelMask::filled(1, 2, 0);
  truth.at(0, 1) = data::kIgnoreValue;
  metrics::CalibrationBins bins(15);
  metrics::score_calibration(probs, truth, bins);
  CHECK(bins.total() == 1);
}
