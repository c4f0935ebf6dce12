#include <benchmark/benchmark.h>

#include <random>

#include "imcx/nn.hpp"
#include "imcx/synthgen.hpp"
#include "imcx/trainer.hpp"
#include "imcx/xmethods.hpp"

namespace {

imcx::Tensor random_tensor(int c, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  imcx::Tensor t(c, h, w);
  for (double& v : t.data) v = u(rng);
  return t;
}

imcx::nn::Network conv_net(int in, int out, int size) {
  imcx::nn::LayerList l;
  l.push_back(std::make_unique<imcx::nn::Conv2d>("conv", in, out, 3, 1, 1));
  imcx::nn::Network net(in, std::move(l));
  imcx::nn::initialize(net, 1);
  (void)size;
  return net;
}

// Args: input channels, output channels, spatial size (the four smallcnn blocks at 256 px).
void BM_ConvForward(benchmark::State& state) {
  const auto net = conv_net(state.range(0), state.range(1), state.range(2));
  const auto x = random_tensor(state.range(0), state.range(2), state.range(2), 2);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x));
}
BENCHMARK(BM_ConvForward)->Args({1, 16, 256})->Args({16, 32, 128})->Args({32, 64, 64})->Args({64, 128, 32})
    ->Unit(benchmark::kMillisecond);

void BM_ConvBackward(benchmark::State& state) {
  auto net = conv_net(state.range(0), state.range(1), state.range(2));
  const auto x = random_tensor(state.range(0), state.range(2), state.range(2), 2);
  const auto traces = net.forward_traced(x);
  const auto g = random_tensor(state.range(1), state.range(2), state.range(2), 3);
  for (auto _ : state) benchmark::DoNotOptimize(net.backward(traces, g));
}
BENCHMARK(BM_ConvBackward)->Args({1, 16, 256})->Args({16, 32, 128})->Args({32, 64, 64})->Args({64, 128, 32})
    ->Unit(benchmark::kMillisecond);

void BM_SmallCnnTrainStep(benchmark::State& state) {
  imcx::TrainConfig cfg;
  auto net = imcx::build_model(cfg, 1);
  const auto x = random_tensor(1, state.range(0), state.range(0), 4);
  imcx::Tensor g(2, 1, 1);
  g.data = {0.5, -0.5};
  for (auto _ : state) {
    const auto traces = net.forward_traced(x);
    benchmark::DoNotOptimize(net.backward(traces, g));
  }
}
BENCHMARK(BM_SmallCnnTrainStep)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_Explain(benchmark::State& state) {
  imcx::TrainConfig cfg;
  const auto net = imcx::build_model(cfg, 1);
  const auto x = random_tensor(1, 256, 256, 5);
  const auto method = imcx::xai::kAllMethods[static_cast<std::size_t>(state.range(0))];
  state.SetLabel(std::string(imcx::xai::to_string(method)));
  for (auto _ : state) benchmark::DoNotOptimize(imcx::xai::explain(net, x, method, 1));
}
BENCHMARK(BM_Explain)->DenseRange(0, 8)->Unit(benchmark::kMillisecond);

void BM_GenerateTissue(benchmark::State& state) {
  auto params = imcx::synth::TissueParams::defaults();
  params.image_size = static_cast<int>(state.range(0));
  params.fiber_count = static_cast<int>(state.range(0) * state.range(0) / 3300);
  for (auto _ : state) {
    benchmark::DoNotOptimize(imcx::synth::generate_tissue(params, imcx::ClassLabel::patient, 7));
  }
}
BENCHMARK(BM_GenerateTissue)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
