#include <ATen/CPUGeneratorImpl.h>
#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "mmfa/animator.hpp"
#include "mmfa/dataset.hpp"
#include "mmfa/geometry.hpp"
#include "mmfa/image_io.hpp"
#include "mmfa/log.hpp"
#include "mmfa/pipeline.hpp"

using namespace mmfa;

namespace {

const auto kF32 = torch::TensorOptions().dtype(torch::kFloat32);

void BM_ComposeKeypoints(benchmark::State& state) {
  const int64_t b = state.range(0), k = 20;
  auto pc = torch::rand({b, k, 3}, kF32);
  auto r = geometry::rotation_from_euler(torch::rand({b}, kF32), torch::rand({b}, kF32), torch::rand({b}, kF32));
  geometry::MotionParams m{r, torch::zeros({b, 2}, kF32), torch::ones({b}, kF32), torch::zeros({b, k, 3}, kF32)};
  for (auto _ : state) benchmark::DoNotOptimize(geometry::compose_keypoints({pc}, m).points);
  state.SetItemsProcessed(state.iterations() * b);
}
BENCHMARK(BM_ComposeKeypoints)->Arg(1)->Arg(64);

void BM_DenseFlowWarp3d(benchmark::State& state) {
  const int64_t k = 20, d = 16, s = state.range(0);
  std::array<int64_t, 3> sizes{d, s, s};
  auto grid = geometry::identity_grid(sizes, kF32);
  auto candidates = grid.unsqueeze(0).unsqueeze(0).expand({1, k + 1, d, s, s, 3}).contiguous();
  auto masks = torch::softmax(torch::rand({1, k + 1, d, s, s}, kF32), 1);
  auto volume = torch::rand({1, 32, d, s, s}, kF32);
  for (auto _ : state) benchmark::DoNotOptimize(geometry::warp(volume, geometry::dense_flow(candidates, masks)));
}
BENCHMARK(BM_DenseFlowWarp3d)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Reenact64(benchmark::State& state) {
  log::set_level(log::Level::kWarn);
  torch::manual_seed(0);
  animator::Animator an(model::AnimationModel(nets::NetConfig{}), std::nullopt, nets::make_pose_provider("auto"));
  auto s = torch::rand({3, 64, 64}), d = torch::rand({3, 64, 64});
  for (auto _ : state) benchmark::DoNotOptimize(an.reenact(s, d));
}
BENCHMARK(BM_Reenact64)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  log::set_level(log::Level::kWarn);
  synth::SynthConfig sc;
  sc.sequences = 2;
  sc.frames = 4;
  auto ds = data::synthesize_dataset(sc);
  pipeline::RunConfig rc;
  rc.batch_size = state.range(0);
  pipeline::TrainingState st(rc);
  for (auto _ : state) {
    auto batch = pipeline::sample_batch(ds, st.rng, rc.batch_size);
    benchmark::DoNotOptimize(pipeline::train_step(st, batch));
  }
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond)->Iterations(5);

void BM_PngRoundTrip(benchmark::State& state) {
  const int64_t s = state.range(0);
  auto image = torch::rand({3, s, s});
  for (auto _ : state) benchmark::DoNotOptimize(io::decode_png(io::encode_png(image)));
}
BENCHMARK(BM_PngRoundTrip)->Arg(64)->Arg(256);

}  // namespace
BENCHMARK_MAIN();
