#include <cmath>

#include <doctest.h>

#include "pseudoseg/model.hpp"
#include "pseudoseg/shapes.hpp"

using namespace pseudoseg;

namespace {

struct TinyModel {
  net::ParamStore store;
  std::unique_ptr<net::SegModel> model;

  explicit TinyModel(int num_classes = 3, std::uint64_t seed = 77) {
    Rng rng = make_rng(seed);
    model = std::make_unique<net::SegModel>(net::ModelConfig::preset("desk4_tiny", num_classes),
                                            store, rng);
  }
};

data::DenseImage test_image(int h, int w, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  data::DenseImage img;
  img.pixels = Tensor({h, w, 3});
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (std::int64_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = dist(rng);
  return img;
}

}  // namespace

TEST_CASE("forward produces the contracted shapes") {
  TinyModel tm(4);
  const auto img = test_image(32, 24, 1);
  ad::Tape tape;
  net::BoundParams params(tape, tm.store, false);
  const auto fp = tm.model->forward(tape, params, img);
  CHECK(fp.decoder_logits.v().shape() == std::vector<int>{32, 24, 4});
  CHECK(fp.stage3.v().dim(0) == 8);   // output stride 4
  CHECK(fp.stage3.v().dim(1) == 6);
  CHECK(fp.stage4.v().dim(2) == 10);  // desk4_tiny last stage width
  CHECK(fp.class_logits.v().shape() == std::vector<int>{1, 3});
  CHECK(fp.pooled.v().shape() == std::vector<int>{1, 10});
}

TEST_CASE("forward is deterministic in evaluation") {
  TinyModel tm;
  const auto img = test_image(24, 24, 2);
  Tensor first;
  for (int round = 0; round < 2; ++round) {
    ad::Tape tape;
    net::BoundParams params(tape, tm.store, false);
    const auto fp = tm.model->forward(tape, params, img);
    if (round == 0)
      first = fp.decoder_logits.v();
    else
      for (std::int64_t i = 0; i < first.size(); ++i)
        CHECK(first[i] == fp.decoder_logits.v()[i]);
  }
}

TEST_CASE("hypercolumn concatenates the last two stages") {
  TinyModel tm;
  const auto img = test_image(24, 24, 3);
  ad::Tape tape;
  net::BoundParams params(tape, tm.store, false);
  const auto fp = tm.model->forward(tape, params, img);
  const auto h = tm.model->hypercolumn(tape, fp);
  CHECK(h.v().dim(2) == 8 + 10);
  // channel-concatenation: first block is stage3, second stage4
  const auto& s3 = fp.stage3.v();
  const auto& s4 = fp.stage4.v();
  for (int i = 0; i < 4; ++i) {
    CHECK(h.v().at(1, 2, i) == s3.at(1, 2, i));
    CHECK(h.v().at(1, 2, 8 + i) == s4.at(1, 2, i));
  }

  net::ParamStore store2;
  Rng rng = make_rng(5);
  auto cfg = net::ModelConfig::preset("desk4_tiny", 3);
  cfg.hypercolumn = false;  // ablation arm: last stage only
  net::SegModel last_only(cfg, store2, rng);
  ad::Tape tape2;
  net::BoundParams params2(tape2, store2, false);
  const auto fp2 = last_only.forward(tape2, params2, img);
  CHECK(last_only.hypercolumn(tape2, fp2).v().dim(2) == 10);
}

TEST_CASE("model gradients match central finite differences") {
  // <=5k parameter model, 64-bit arithmetic, relative error < 1e-4.
  TinyModel tm(3, 123);
  CHECK(tm.store.num_scalars() <= 5000);
  const auto img = test_image(16, 16, 4);

  auto loss_of = [&](bool with_grad, Tensor* grad_out, int param_idx) {
    ad::Tape tape;
    net::BoundParams params(tape, tm.store, with_grad);
    const auto fp = tm.model->forward(tape, params, img);
    // scalar probe: sum of decoder logits plus sum of classifier logits
    ad::Value s = ad::add(ad::sum(fp.decoder_logits), ad::sum(fp.class_logits));
    if (with_grad) {
      tape.backward(s);
      *grad_out = tape.grad(params[param_idx]);
    }
    return s.v()[0];
  };

  Rng rng = make_rng(6);
  const double h = 1e-6;
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int pi =
        std::uniform_int_distribution<int>(0, static_cast<int>(tm.store.size()) - 1)(rng);
    auto& param = tm.store.at(pi);
    const std::int64_t ei =
        std::uniform_int_distribution<std::int64_t>(0, param.value.size() - 1)(rng);

    Tensor analytic;
    loss_of(true, &analytic, pi);

    const double keep = param.value[ei];
    param.value[ei] = keep + h;
    const double up = loss_of(false, nullptr, pi);
    param.value[ei] = keep - h;
    const double dn = loss_of(false, nullptr, pi);
    param.value[ei] = keep;

    const double numeric = (up - dn) / (2 * h);
    const double denom = std::max({1.0, std::fabs(numeric), std::fabs(analytic[ei])});
    CHECK(std::fabs(numeric - analytic[ei]) / denom < 1e-4);
    ++checked;
  }
  CHECK(checked == 20);
}

TEST_CASE("grad_cam basics") {
  TinyModel tm(4);
  const auto img = test_image(24, 24, 7);
  ad::Tape tape;
  net::BoundParams params(tape, tm.store, false);
  const auto fp = tm.model->forward(tape, params, img);
  const Tensor stage4 = fp.stage4.v();

  SUBCASE("maps are non-negative and class-indexed") {
    for (int c = 1; c <= 3; ++c) {
      const auto cam = tm.model->grad_cam(stage4, c);
      CHECK(cam.scores.dim(0) == stage4.dim(0));
      CHECK(cam.scores.dim(2) == 1);
      for (std::int64_t i = 0; i < cam.scores.size(); ++i) CHECK(cam.scores[i] >= 0.0);
    }
    CHECK_THROWS_AS(tm.model->grad_cam(stage4, 0), ContractError);
    CHECK_THROWS_AS(tm.model->grad_cam(stage4, 4), ContractError);
  }

  SUBCASE("channel weights match finite differences on the class logit") {
    // The weights are the spatial mean of d(logit_c)/d(stage4 features);
    // perturb feature entries and compare the induced logit change.
    const int class_index = 2;
    const Tensor weights = tm.model->grad_cam_channel_weights(stage4, class_index);
    const std::int64_t l = stage4.rows();
    const int d = stage4.dim(2);

    auto logit_of = [&](const Tensor& feat) {
      ad::Tape t2;
      net::BoundParams p2(t2, tm.store, false);
      ad::Value pooled = ad::spatial_mean(t2.leaf(feat, false));
      ad::Value logits = tm.model->classify(t2, p2, pooled);
      return logits.v()[class_index - 1];
    };

    Rng rng = make_rng(8);
    const double h = 1e-6;
    for (int trial = 0; trial < 20; ++trial) {
      const std::int64_t idx =
          std::uniform_int_distribution<std::int64_t>(0, stage4.size() - 1)(rng);
      Tensor up = stage4, dn = stage4;
      up[idx] += h;
      dn[idx] -= h;
      const double numeric = (logit_of(up) - logit_of(dn)) / (2 * h);
      // d(logit)/d(feat[pos,ch]) is constant over positions here, so the
      // spatial mean equals the pointwise derivative.
      const double analytic = weights[idx % d];
      const double denom = std::max({1.0, std::fabs(numeric), std::fabs(analytic)});
      CHECK(std::fabs(numeric - analytic) / denom < 1e-4);
    }
  }

  SUBCASE("zero classifier weights give an identically zero CAM") {
    TinyModel dead(4, 5);
    for (auto& p : dead.store.params())
      if (p.name == "classifier.w") p.value.zero();
    ad::Tape t3;
    net::BoundParams p3(t3, dead.store, false);
    const auto fp3 = dead.model->forward(t3, p3, img);
    const auto cam = dead.model->grad_cam(fp3.stage4.v(), 1);
    for (std::int64_t i = 0; i < cam.scores.size(); ++i) CHECK(cam.scores[i] == 0.0);
  }
}

TEST_CASE("build_value_maps normalization, gating and background") {
  const int h = 4, w = 5;
  auto cam_with = [&](double peak, int at) {
    net::ScoreMap cam;
    cam.scores = Tensor({h, w, 1});
    cam.scores[at] = peak;
    cam.scores[(at + 3) % (h * w)] = peak / 2;
    return cam;
  };

  SUBCASE("all-zero CAMs give background one everywhere") {
    std::vector<net::ScoreMap> cams(3);
    for (auto& c : cams) c.scores = Tensor({h, w, 1});
    const auto vm = net::build_value_maps(cams, {1, 1, 1});
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
      CHECK(vm.scores[i * 4] == 1.0);
      for (int c = 1; c < 4; ++c) CHECK(vm.scores[i * 4 + c] == 0.0);
    }
  }

  SUBCASE("a single peak of 5 normalizes to exactly 1") {
    std::vector<net::ScoreMap> cams = {cam_with(5.0, 7), cam_with(0.0, 0), cam_with(0.0, 0)};
    const auto vm = net::build_value_maps(cams, {1, 0, 0});
    CHECK(vm.scores[7 * 4 + 1] == 1.0);
    CHECK(vm.normalized);
  }

  SUBCASE("absent classes are exactly zero even with live CAMs") {
    std::vector<net::ScoreMap> cams = {cam_with(2.0, 3), cam_with(4.0, 6), cam_with(1.0, 9)};
    const auto vm = net::build_value_maps(cams, {1, 0, 1});
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i)
      CHECK(vm.scores[i * 4 + 2] == 0.0);
  }

  SUBCASE("background equals one minus the per-pixel foreground max (brute force)") {
    std::vector<net::ScoreMap> cams = {cam_with(2.0, 3), cam_with(4.0, 3), cam_with(1.0, 9)};
    const auto vm = net::build_value_maps(cams, {1, 1, 1});
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
      double mx = 0.0;
      for (int c = 1; c < 4; ++c) mx = std::max(mx, vm.scores[i * 4 + c]);
      CHECK(vm.scores[i * 4] == doctest::Approx(1.0 - mx).epsilon(1e-12));
      for (int c = 0; c < 4; ++c) {
        CHECK(vm.scores[i * 4 + c] >= 0.0);
        CHECK(vm.scores[i * 4 + c] <= 1.0);
      }
    }
  }
}

TEST_CASE("classifier head basics") {
  TinyModel tm(4);
  SUBCASE("zero pooled features and zero bias give zero logits") {
    ad::Tape tape;
    net::BoundParams params(tape, tm.store, false);
    ad::Value pooled = tape.constant(Tensor({1, 10}));
    const auto logits = tm.model->classify(tape, params, pooled);
    REQUIRE(logits.v().size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(logits.v()[i] == 0.0);  // bias starts at zero
  }
}
