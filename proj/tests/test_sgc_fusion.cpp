#include <cmath>
#include <filesystem>

#include <doctest.h>

#include "pseudoseg/sgc.hpp"

using namespace pseudoseg;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

// Explicit O(L^2) evaluation of the propagation equation:
//   out_i = (m_i + sum_j softmax_j(<Wk h_i, Wv h_j>) m_j) . Wc
Tensor propagate_loop_oracle(const Tensor& m, const Tensor& h, const Tensor& wk,
                             const Tensor& wv, const Tensor& wc) {
  const int l = m.dim(0), c = m.dim(1), d = h.dim(1), e = wk.dim(1);
  auto embed = [&](const Tensor& w, int i) {
    std::vector<double> out(static_cast<std::size_t>(e), 0.0);
    for (int k = 0; k < e; ++k)
      for (int dd = 0; dd < d; ++dd) out[static_cast<std::size_t>(k)] += h.at(i, dd) * w.at(dd, k);
    return out;
  };
  Tensor out({l, c});
  for (int i = 0; i < l; ++i) {
    const auto ki = embed(wk, i);
    std::vector<double> scores(static_cast<std::size_t>(l));
    double mx = -1e300;
    for (int j = 0; j < l; ++j) {
      const auto qj = embed(wv, j);
      double dot = 0.0;
      for (int k = 0; k < e; ++k) dot += ki[static_cast<std::size_t>(k)] * qj[static_cast<std::size_t>(k)];
      scores[static_cast<std::size_t>(j)] = dot;
      mx = std::max(mx, dot);
    }
    double z = 0.0;
    for (auto& s : scores) {
      s = std::exp(s - mx);
      z += s;
    }
    std::vector<double> propagated(static_cast<std::size_t>(c), 0.0);
    for (int j = 0; j < l; ++j)
      for (int k = 0; k < c; ++k)
        propagated[static_cast<std::size_t>(k)] += scores[static_cast<std::size_t>(j)] / z * m.at(j, k);
    for (int k = 0; k < c; ++k) propagated[static_cast<std::size_t>(k)] += m.at(i, k);
    for (int k = 0; k < c; ++k) {
      double acc = 0.0;
      for (int k2 = 0; k2 < c; ++k2) acc += propagated[static_cast<std::size_t>(k2)] * wc.at(k2, k);
      out.at(i, k) = acc;
    }
  }
  return out;
}

struct AttnFixture {
  net::ParamStore store;
  std::unique_ptr<sgc::AttentionParams> attn;

  AttnFixture(int d, int e, int c, std::uint64_t seed) {
    Rng rng = make_rng(seed);
    attn = std::make_unique<sgc::AttentionParams>(d, e, c, store, rng);
  }

  Tensor& param(const std::string& name) {
    for (auto& p : store.params())
      if (p.name == name) return p.value;
    throw std::runtime_error("no param " + name);
  }
};

std::vector<double> random_simplex(int c, Rng& rng) {
  std::vector<double> p(static_cast<std::size_t>(c));
  std::uniform_real_distribution<double> dist(1e-6, 1.0);
  double z = 0.0;
  for (auto& v : p) {
    v = dist(rng);
    z += v;
  }
  for (auto& v : p) v /= z;
  return p;
}

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

}  // namespace

TEST_CASE("sgc_propagate single-region case doubles the input under identity Wc") {
  AttnFixture fx(4, 3, 2, 1);
  // Wc starts as identity by construction.
  Rng rng = make_rng(2);
  const Tensor m = random_tensor({1, 2}, rng, 0.0, 1.0);
  const Tensor h = random_tensor({1, 4}, rng, -1.0, 1.0);
  const Tensor out = fx.attn->propagate_plain(m, h);
  CHECK(out.at(0, 0) == doctest::Approx(2 * m.at(0, 0)).epsilon(1e-12));
  CHECK(out.at(0, 1) == doctest::Approx(2 * m.at(0, 1)).epsilon(1e-12));
}

TEST_CASE("sgc_propagate with constant features averages uniformly") {
  AttnFixture fx(4, 3, 3, 3);
  const int l = 5;
  Rng rng = make_rng(4);
  const Tensor m = random_tensor({l, 3}, rng, 0.0, 1.0);
  Tensor h({l, 4});
  for (int i = 0; i < l; ++i)
    for (int d = 0; d < 4; ++d) h.at(i, d) = 0.3 * (d + 1);  // identical rows
  const Tensor out = fx.attn->propagate_plain(m, h);
  for (int k = 0; k < 3; ++k) {
    double mean = 0.0;
    for (int j = 0; j < l; ++j) mean += m.at(j, k) / l;
    for (int i = 0; i < l; ++i)
      CHECK(out.at(i, k) == doctest::Approx(m.at(i, k) + mean).epsilon(1e-9));
  }
}

TEST_CASE("sgc_propagate matches the explicit double-loop oracle") {
  Rng rng = make_rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const int l = std::uniform_int_distribution<int>(1, 16)(rng);
    const int c = std::uniform_int_distribution<int>(2, 5)(rng);
    const int d = std::uniform_int_distribution<int>(2, 8)(rng);
    const int e = std::uniform_int_distribution<int>(1, 6)(rng);
    AttnFixture fx(d, e, c, derive_seed(6, static_cast<std::uint64_t>(trial)));
    // randomize Wc away from identity
    Rng wrng = make_rng(derive_seed(7, static_cast<std::uint64_t>(trial)));
    fx.param("attention.w_c") = random_tensor({c, c}, wrng, -1.0, 1.0);

    const Tensor m = random_tensor({l, c}, wrng, 0.0, 1.0);
    const Tensor h = random_tensor({l, d}, wrng, -1.5, 1.5);
    const Tensor fast = fx.attn->propagate_plain(m, h);
    const Tensor slow = propagate_loop_oracle(m, h, fx.param("attention.w_k"),
                                              fx.param("attention.w_v"),
                                              fx.param("attention.w_c"));
    REQUIRE(fast.shape() == slow.shape());
    for (std::int64_t i = 0; i < fast.size(); ++i)
      CHECK(std::fabs(fast[i] - slow[i]) < 1e-6);
  }
}

TEST_CASE("norm_factor") {
  const std::vector<double> p1 = {3.0}, m1 = {4.0};
  CHECK(sgc::norm_factor(p1, m1) == doctest::Approx(5.0).epsilon(1e-12));

  const std::vector<double> z = {0.0, 0.0};
  CHECK(sgc::norm_factor(z, z) == sgc::kNormEps);

  const std::vector<double> p2 = {2.0, 0.0}, m2 = {1.0, 1.0};
  CHECK(sgc::norm_factor(p2, m2) == doctest::Approx(std::sqrt(6.0)).epsilon(1e-12));

  // symmetry
  Rng rng = make_rng(8);
  for (int t = 0; t < 50; ++t) {
    const Tensor a = random_tensor({4}, rng, -2, 2), b = random_tensor({4}, rng, -2, 2);
    std::vector<double> av(a.data(), a.data() + 4), bv(b.data(), b.data() + 4);
    CHECK(sgc::norm_factor(av, bv) == sgc::norm_factor(bv, av));
  }
}

TEST_CASE("sharpen examples and properties") {
  SUBCASE("T=1 is the identity") {
    Rng rng = make_rng(9);
    for (int t = 0; t < 100; ++t) {
      const auto p = random_simplex(4, rng);
      const auto s = sgc::sharpen(p, 1.0);
      for (std::size_t i = 0; i < p.size(); ++i) CHECK(s[i] == p[i]);
    }
  }
  SUBCASE("uniform stays uniform") {
    const std::vector<double> p = {0.5, 0.5};
    for (double t : {0.1, 0.5, 0.9, 1.0}) {
      const auto s = sgc::sharpen(p, t);
      CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-12));
      CHECK(s[1] == doctest::Approx(0.5).epsilon(1e-12));
    }
  }
  SUBCASE("hand-computed T=0.5 example") {
    const std::vector<double> p = {0.8, 0.2};
    const auto s = sgc::sharpen(p, 0.5);
    CHECK(s[0] == doctest::Approx(0.64 / 0.68).epsilon(1e-9));   // 0.9412
    CHECK(s[1] == doctest::Approx(0.04 / 0.68).epsilon(1e-9));   // 0.0588
  }
  SUBCASE("argmax invariance and entropy monotonicity over 10k simplex draws") {
    Rng rng = make_rng(10);
    std::uniform_real_distribution<double> tdist(0.05, 1.0);
    int checked = 0;
    for (int t = 0; t < 10000; ++t) {
      const int c = std::uniform_int_distribution<int>(2, 6)(rng);
      const auto p = random_simplex(c, rng);
      const double temp = tdist(rng);
      const auto s = sgc::sharpen(p, temp);

      double sum = 0.0;
      for (double v : s) sum += v;
      REQUIRE(std::fabs(sum - 1.0) < 1e-9);

      const auto amax = [](const std::vector<double>& v) {
        return std::distance(v.begin(), std::max_element(v.begin(), v.end()));
      };
      // skip near-ties where argmax is numerically ambiguous
      std::vector<double> sorted = p;
      std::sort(sorted.rbegin(), sorted.rend());
      if (sorted[0] - sorted[1] > 1e-9) {
        CHECK(amax(s) == amax(p));
        ++checked;
      }
      CHECK(entropy(s) <= entropy(p) + 1e-12);
    }
    CHECK(checked > 9000);
  }
  SUBCASE("invalid temperature") {
    CHECK_THROWS_AS(sgc::sharpen(std::vector<double>{1.0}, 0.0), ConfigError);
    CHECK_THROWS_AS(sgc::sharpen(std::vector<double>{1.0}, -1.0), ConfigError);
  }
}

TEST_CASE("fuse boundary cases and the hand-derived pixel") {
  sgc::FusionConfig cfg;

  SUBCASE("gamma=1, T=1 reduces to the normalized decoder softmax") {
    Rng rng = make_rng(11);
    const Tensor p = random_tensor({3, 4, 3}, rng, -2, 2);
    const Tensor m = random_tensor({3, 4, 3}, rng, -2, 2);
    cfg.gamma = 1.0;
    cfg.temperature = 1.0;
    const auto out = sgc::fuse(p, m, cfg);
    // expected: softmax(p / Norm(p,m)) pixel-wise
    for (std::int64_t i = 0; i < p.rows(); ++i) {
      std::vector<double> pv(p.data() + i * 3, p.data() + i * 3 + 3);
      std::vector<double> mv(m.data() + i * 3, m.data() + i * 3 + 3);
      const double n = sgc::norm_factor(pv, mv);
      double z = 0.0;
      std::vector<double> e(3);
      for (int k = 0; k < 3; ++k) {
        e[static_cast<std::size_t>(k)] = std::exp(pv[static_cast<std::size_t>(k)] / n);
        z += e[static_cast<std::size_t>(k)];
      }
      for (int k = 0; k < 3; ++k)
        CHECK(out.probs[i * 3 + k] ==
              doctest::Approx(e[static_cast<std::size_t>(k)] / z).epsilon(1e-9));
    }
  }

  SUBCASE("gamma=0, T=1 reduces to the normalized SGC softmax") {
    Rng rng = make_rng(12);
    const Tensor p = random_tensor({2, 2, 4}, rng, -2, 2);
    const Tensor m = random_tensor({2, 2, 4}, rng, -2, 2);
    cfg.gamma = 0.0;
    cfg.temperature = 1.0;
    const auto out = sgc::fuse(p, m, cfg);
    sgc::FusionConfig swapped = cfg;
    swapped.gamma = 1.0;
    const auto expect = sgc::fuse(m, p, swapped);
    for (std::int64_t i = 0; i < out.probs.size(); ++i)
      CHECK(out.probs[i] == doctest::Approx(expect.probs[i]).epsilon(1e-12));
  }

  SUBCASE("hand-derived pixel: p=[2,0], m=[1,1], gamma=0.5, T=0.5 -> [0.687, 0.313]") {
    Tensor p({1, 1, 2}, {2.0, 0.0});
    Tensor m({1, 1, 2}, {1.0, 1.0});
    cfg.gamma = 0.5;
    cfg.temperature = 0.5;
    const auto out = sgc::fuse(p, m, cfg);
    CHECK(std::fabs(out.probs[0] - 0.687) < 1e-3);
    CHECK(std::fabs(out.probs[1] - 0.313) < 1e-3);
    // the intermediate gamma-mix is [0.5968, 0.4032]
    sgc::FusionConfig nosharp = cfg;
    nosharp.temperature = 1.0;
    const auto mix = sgc::fuse(p, m, nosharp);
    CHECK(std::fabs(mix.probs[0] - 0.5968) < 1e-3);
    CHECK(std::fabs(mix.probs[1] - 0.4032) < 1e-3);
  }

  SUBCASE("simplex invariant on 10k random pixels") {
    Rng rng = make_rng(13);
    cfg.gamma = 0.5;
    cfg.temperature = 0.5;
    const Tensor p = random_tensor({100, 100, 4}, rng, -4, 4);
    const Tensor m = random_tensor({100, 100, 4}, rng, -4, 4);
    const auto out = sgc::fuse(p, m, cfg);
    for (std::int64_t i = 0; i < out.probs.rows(); ++i) {
      double sum = 0.0;
      for (int k = 0; k < 4; ++k) {
        CHECK(out.probs[i * 4 + k] >= 0.0);
        sum += out.probs[i * 4 + k];
      }
      CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("fuse gradients match finite differences") {
  Rng rng = make_rng(14);
  const Tensor p0 = random_tensor({3, 3, 3}, rng, -2, 2);
  const Tensor m0 = random_tensor({3, 3, 3}, rng, -2, 2);
  const Tensor w = random_tensor({3, 3, 3}, rng, -1, 1);
  sgc::FusionConfig cfg;  // gamma 0.5, T 0.5

  auto scalar_of = [&](const Tensor& p, const Tensor& m, Tensor* gp, Tensor* gm) {
    ad::Tape tape;
    ad::Value vp = tape.leaf(p, gp != nullptr);
    ad::Value vm = tape.leaf(m, gm != nullptr);
    ad::Value y = sgc::fuse_graph(tape, vp, vm, cfg);
    ad::Value s = ad::sum(ad::mul(y, tape.constant(w)));
    if (gp) {
      tape.backward(s);
      *gp = tape.grad(vp);
      *gm = tape.grad(vm);
    }
    return s.v()[0];
  };

  Tensor gp, gm;
  scalar_of(p0, m0, &gp, &gm);
  const double h = 1e-6;
  for (int trial = 0; trial < 24; ++trial) {
    const std::int64_t idx =
        std::uniform_int_distribution<std::int64_t>(0, p0.size() - 1)(rng);
    const bool on_p = trial % 2 == 0;
    Tensor pu = p0, pd = p0, mu = m0, md = m0;
    (on_p ? pu : mu)[idx] += h;
    (on_p ? pd : md)[idx] -= h;
    const double numeric =
        (scalar_of(pu, mu, nullptr, nullptr) - scalar_of(pd, md, nullptr, nullptr)) / (2 * h);
    const double analytic = on_p ? gp[idx] : gm[idx];
    const double denom = std::max({1.0, std::fabs(numeric), std::fabs(analytic)});
    CHECK(std::fabs(numeric - analytic) / denom < 1e-4);
  }
}

TEST_CASE("harden") {
  SUBCASE("uniform distribution at threshold 0.5 is ignored (strict inequality)") {
    Tensor probs({1, 1, 2}, {0.5, 0.5});
    const auto mask = sgc::harden(probs, 0.5);
    CHECK(static_cast<int>(mask.at(0, 0)) == data::kIgnoreValue);
  }
  SUBCASE("one-hot input keeps every pixel") {
    Tensor probs({1, 2, 3});
    probs[0 * 3 + 2] = 1.0;
    probs[1 * 3 + 0] = 1.0;
    const auto mask = sgc::harden(probs, 0.5);
    CHECK(static_cast<int>(mask.at(0, 0)) == 2);
    CHECK(static_cast<int>(mask.at(0, 1)) == 0);
  }
  SUBCASE("the fused hand example keeps class 0 at threshold 0.5") {
    Tensor p({1, 1, 2}, {2.0, 0.0});
    Tensor m({1, 1, 2}, {1.0, 1.0});
    sgc::FusionConfig cfg;
    const auto out = sgc::fuse(p, m, cfg);
    const auto mask = sgc::harden(out.probs, 0.5);
    CHECK(static_cast<int>(mask.at(0, 0)) == 0);  // 0.687 > 0.5
  }
}

TEST_CASE("fusion variants") {
  Rng rng = make_rng(15);
  const Tensor p = random_tensor({4, 4, 3}, rng, -2, 2);
  const Tensor m = random_tensor({4, 4, 3}, rng, -2, 2);
  sgc::FusionConfig cfg;

  SUBCASE("decoder_only is the plain softmax") {
    const auto out = sgc::fusion_variant(p, m, cfg, sgc::FusionVariant::decoder_only);
    const Tensor expect = ad::softmax_rows_plain(p);
    for (std::int64_t i = 0; i < expect.size(); ++i) CHECK(out.probs[i] == expect[i]);
  }
  SUBCASE("full equals fuse bit-for-bit") {
    const auto a = sgc::fusion_variant(p, m, cfg, sgc::FusionVariant::full);
    const auto b = sgc::fuse(p, m, cfg);
    for (std::int64_t i = 0; i < a.probs.size(); ++i) CHECK(a.probs[i] == b.probs[i]);
  }
  SUBCASE("mix_no_sharpen equals fuse at T=1") {
    const auto a = sgc::fusion_variant(p, m, cfg, sgc::FusionVariant::mix_no_sharpen);
    sgc::FusionConfig t1 = cfg;
    t1.temperature = 1.0;
    const auto b = sgc::fuse(p, m, t1);
    for (std::int64_t i = 0; i < a.probs.size(); ++i) CHECK(a.probs[i] == b.probs[i]);
  }
  SUBCASE("hard_decoder hardens the decoder softmax") {
    const auto out = sgc::fusion_variant(p, m, cfg, sgc::FusionVariant::hard_decoder);
    REQUIRE(out.hardened.has_value());
    const auto expect = sgc::harden(ad::softmax_rows_plain(p), cfg.hard_threshold);
    CHECK(out.hardened->classes == expect.classes);
  }
  SUBCASE("every variant output stays on the simplex") {
    for (auto v : {sgc::FusionVariant::decoder_only, sgc::FusionVariant::sgc_only,
                   sgc::FusionVariant::mix_no_norm, sgc::FusionVariant::mix_no_sharpen,
                   sgc::FusionVariant::full_no_norm_no_sharpen, sgc::FusionVariant::full}) {
      const auto out = sgc::fusion_variant(p, m, cfg, v);
      for (std::int64_t i = 0; i < out.probs.rows(); ++i) {
        double sum = 0.0;
        for (int k = 0; k < 3; ++k) sum += out.probs[i * 3 + k];
        CHECK(std::fabs(sum - 1.0) < 1e-6);
      }
    }
  }
  SUBCASE("unknown variant name is a config error") {
    CHECK_THROWS_AS(sgc::parse_variant("bogus"), ConfigError);
  }
}

TEST_CASE("score map container round-trips shape and data") {
  Rng rng = make_rng(16);
  const Tensor t = random_tensor({5, 7, 3}, rng, -1, 1);
  const auto file = std::filesystem::temp_directory_path() / "pseudoseg_scoremap_test.bin";
  sgc::save_score_map(file, t);
  const Tensor back = sgc::load_score_map(file);
  CHECK(back.shape() == t.shape());
  for (std::int64_t i = 0; i < t.size(); ++i)
    CHECK(back[i] == doctest::Approx(t[i]).epsilon(1e-6));  // 32-bit storage
  std::filesystem::remove(file);
}
