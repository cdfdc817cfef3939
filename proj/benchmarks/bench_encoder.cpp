#include <benchmark/benchmark.h>

#include <random>

#include "rwkv_clip/contrastive.hpp"
#include "rwkv_clip/model.hpp"

namespace {

using namespace rwkv_clip;

// Desk-scale image tower forward, inference mode.
void BM_ImageTowerForward(benchmark::State& state) {
  std::mt19937_64 rng(1);
  auto tower = TowerParams::init(EncoderConfig::desk_image(), rng);
  auto images = Tensor::uniform({static_cast<std::size_t>(state.range(0)), 32, 32, 3}, rng, 0.0, 1.0);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(encoder_forward(images, tower));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ImageTowerForward)->Arg(1)->Arg(64)->Unit(benchmark::kMillisecond);

// One full training step worth of forward and backward on both towers.
void BM_TrainStepForwardBackward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  ClipModel model = ClipModel::init(ModelConfig{}, 3);
  std::mt19937_64 rng(2);
  auto images = Tensor::uniform({batch, 32, 32, 3}, rng, 0.0, 1.0);
  std::vector<std::string> texts(batch, "red circle on blue");
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    BatchEmbeddings e{model.encode_images(images), model.encode_texts(texts)};
    tape.backward(clip_loss_mean(e, model.temperature));
    model.for_each_param([](const std::string&, Tensor& t, ParamKind) { t.zero_grad(); });
  }
}
BENCHMARK(BM_TrainStepForwardBackward)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
