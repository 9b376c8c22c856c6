#include <benchmark/benchmark.h>

#include "drsf/dfdr.hpp"
#include "drsf/harness.hpp"
#include "drsf/ops.hpp"

using namespace drsf;

namespace {

Tensor random_tensor(RngStream& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

// Args: channels, spatial size. Batch is fixed at 8.
void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  RngStream rng(1);
  const Tensor x0 = random_tensor(rng, {8, c, hw, hw});
  const Tensor k0 = random_tensor(rng, {c, c, 3, 3});
  const Tensor b0 = random_tensor(rng, {c});
  for (auto _ : state) {
    Tape tape;
    const Tensor x = tape.variable(x0), k = tape.variable(k0), b = tape.variable(b0);
    tape.backward(sum(conv2d(x, k, b)));
    benchmark::DoNotOptimize(tape.gradient(k));
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({8, 16})->Args({16, 16})->Args({32, 8})->Unit(benchmark::kMicrosecond);

void BM_DfdrLayerTrain(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  RngStream rng(2);
  const Tensor f0 = random_tensor(rng, {8, c, 8, 8});
  const dfdr::AffineParams affine{Tensor({c}, std::vector<double>(c, 1.0)), Tensor({c}, std::vector<double>(c, 0.0)),
                                  dfdr::kDefaultEpsilon};
  const dfdr::CraParams cra{random_tensor(rng, {c, 2}), Tensor({c}, std::vector<double>(c, 1.0)),
                            Tensor({c}, std::vector<double>(c, 0.0)), dfdr::RunningStats::identity(c)};
  for (auto _ : state) {
    Tape tape;
    const Tensor f = tape.variable(f0);
    const dfdr::LayerOutput out = dfdr::dfdr_layer_forward(f, affine, cra, Mode::train);
    tape.backward(sum(out.gain));
    benchmark::DoNotOptimize(tape.gradient(f));
  }
}
BENCHMARK(BM_DfdrLayerTrain)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

// One full training step on the reduced profile with every loss enabled.
void BM_TrainStep(benchmark::State& state) {
  harness::ExperimentConfig cfg;
  cfg.stage_channels = {8, 16, 32};
  cfg.dfdr_mask = {true, true, true};
  cfg.benchmark.image_size = 16;
  cfg.benchmark.train_size = 32;
  cfg.benchmark.test_size = 4;
  const synth::Benchmark bench = harness::load_benchmark_for(cfg);
  model::Model model(cfg.model_config(), 0);
  harness::Trainer trainer(cfg, model);
  RngStream data(3), fusion(4);
  for (auto _ : state) {
    state.PauseTiming();
    const auto idx = harness::sample_indices(bench.source_train.size(), cfg.batch_size, data);
    const harness::DomainBatch src = harness::make_batch(bench.source_train, idx, cfg.task_mode);
    std::vector<harness::DomainBatch> pseudo;
    for (const auto& ds : bench.pseudo) pseudo.push_back(harness::make_batch(ds, idx, cfg.task_mode));
    state.ResumeTiming();
    benchmark::DoNotOptimize(trainer.train_step(src, pseudo, fusion));
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
