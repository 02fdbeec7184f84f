#include <benchmark/benchmark.h>

#include <random>

#include "ratekd/kernels.hpp"
#include "ratekd/lif.hpp"
#include "ratekd/train.hpp"

using namespace ratekd;

namespace {

Tensor noise(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  Tensor t(s);
  for (auto& v : t.values()) v = static_cast<Real>(n(rng));
  return t;
}

void BM_Conv2d(benchmark::State& st) {
  const int c = static_cast<int>(st.range(0));
  const Tensor x = noise(Shape{64, c, 14, 14}, 1);
  const Tensor w = noise(Shape{c, c, 3, 3}, 2);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::conv2d_forward(x, w, nullptr, 1, 1));
  st.SetItemsProcessed(st.iterations() * 64);
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_LifSimulate(benchmark::State& st) {
  const int T = static_cast<int>(st.range(0));
  const Tensor currents = noise(Shape{T * 64, 32, 14, 14}, 3);
  RateSummary sum;
  for (auto _ : st) benchmark::DoNotOptimize(lif_simulate(currents, T, LifConfig{}, &sum));
}
BENCHMARK(BM_LifSimulate)->Arg(2)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

// one SGD step on resnet-mini at MNIST size; range(1) selects BPTT
void BM_TrainStep(benchmark::State& st) {
  const int T = static_cast<int>(st.range(0));
  const bool bptt = st.range(1) != 0;
  auto snn = build_snn(ArchSpec::resnet_mini(1, 28, 28, 10), LifConfig{}, 1);
  Sgd opt(trainable(*snn), Real(0.9), Real(5e-4));
  std::mt19937_64 rng(4);
  Tensor images = noise(Shape{64, 1, 28, 28}, 5);
  std::vector<int> labels(64);
  for (auto& l : labels) l = static_cast<int>(rng() % 10);
  const EncodedBatch enc = encode_direct(images, T);
  for (auto _ : st) {
    auto r = bptt ? bptt_train_step(*snn, opt, enc, labels, Real(1e-3)) : rate_train_step(*snn, opt, enc, labels, Real(1e-3));
    benchmark::DoNotOptimize(r);
  }
}
BENCHMARK(BM_TrainStep)->ArgsProduct({{1, 2, 4, 8}, {0, 1}})->ArgNames({"T", "bptt"})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
