#include <benchmark/benchmark.h>

#include "pseudoseg/model.hpp"
#include "pseudoseg/sgc.hpp"
#include "pseudoseg/shapes.hpp"

using namespace pseudoseg;

namespace {

data::DenseImage make_image(int size) {
  Rng rng = make_rng(7);
  auto s = data::generate_shapes_sample(rng, size, size, 4);
  return s.image;
}

void BM_ForwardBackward(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  net::ParamStore store;
  Rng rng = make_rng(1);
  net::SegModel model(net::ModelConfig::preset("desk4", 4), store, rng);
  const data::DenseImage img = make_image(size);
  for (auto _ : state) {
    ad::Tape tape;
    net::BoundParams params(tape, store, true);
    auto fp = model.forward(tape, params, img);
    auto loss = ad::sum(fp.decoder_logits);
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.grad(fp.decoder_logits));
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ForwardOnly(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  net::ParamStore store;
  Rng rng = make_rng(1);
  net::SegModel model(net::ModelConfig::preset("desk4", 4), store, rng);
  const data::DenseImage img = make_image(size);
  for (auto _ : state) {
    ad::Tape tape;
    net::BoundParams params(tape, store, false);
    auto fp = model.forward(tape, params, img);
    benchmark::DoNotOptimize(fp.decoder_logits.v().data());
  }
}
BENCHMARK(BM_ForwardOnly)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_SgcPropagate(benchmark::State& state) {
  const int l = static_cast<int>(state.range(0));
  net::ParamStore store;
  Rng rng = make_rng(2);
  sgc::AttentionParams attn(64, 16, 4, store, rng);
  Tensor m({l, 4}, 0.25);
  Tensor h({l, 64});
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (std::int64_t i = 0; i < h.size(); ++i) h[i] = dist(rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(attn.propagate_plain(m, h).data());
  }
}
BENCHMARK(BM_SgcPropagate)->Arg(64)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_Fuse(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  Rng rng = make_rng(3);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  Tensor p({size, size, 4}), m({size, size, 4});
  for (std::int64_t i = 0; i < p.size(); ++i) {
    p[i] = dist(rng);
    m[i] = dist(rng);
  }
  const auto cfg = sgc::FusionConfig::preset("low_data");
  for (auto _ : state) {
    benchmark::DoNotOptimize(sgc::fuse(p, m, cfg).probs.data());
  }
}
BENCHMARK(BM_Fuse)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ShapesSample(benchmark::State& state) {
  Rng rng = make_rng(4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(data::generate_shapes_sample(rng, 64, 64, 4).image.pixels.data());
  }
}
BENCHMARK(BM_ShapesSample)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
