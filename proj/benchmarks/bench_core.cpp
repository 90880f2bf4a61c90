#include <benchmark/benchmark.h>

#include <random>

#include "odeflow/autodiff.hpp"
#include "odeflow/data.hpp"
#include "odeflow/distill.hpp"
#include "odeflow/dynamics.hpp"
#include "odeflow/fields.hpp"
#include "odeflow/integrator.hpp"
#include "odeflow/models.hpp"
#include "odeflow/parallel.hpp"

using namespace odeflow;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Desk-scale model: 32x32 images, 8x8 patches, D = 64, 4 heads.
const ModelConfig kModel{};

void BM_MatmulForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Parameter a("a", random_tensor({n, n}, 1));
  Parameter b("b", random_tensor({n, n}, 2));
  for (auto _ : state) {
    a.zero_grad();
    b.zero_grad();
    Tape t;
    Var loss = sum(matmul(t.parameter(a), t.parameter(b)));
    t.backward(loss);
    benchmark::DoNotOptimize(a.grad.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(3 * n * n * n));
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(16)->Arg(64)->Arg(256);

void BM_PsiForward(benchmark::State& state) {
  OdeViT m(kModel, 1);
  const Tensor x = random_tensor({m.embedder.tokens(), kModel.dim}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(psi(x, m.block));
}
BENCHMARK(BM_PsiForward);

void BM_PsiVjp(benchmark::State& state) {
  OdeViT m(kModel, 1);
  const BlockField f(m.block);
  const Tensor x = random_tensor({m.embedder.tokens(), kModel.dim}, 2);
  const Tensor c = random_tensor(x.shape(), 3);
  for (auto _ : state) benchmark::DoNotOptimize(f.vjp(x, c));
}
BENCHMARK(BM_PsiVjp);

void BM_EulerIntegrate(benchmark::State& state) {
  OdeViT m(kModel, 1);
  const BlockField f(m.block);
  const Tensor x = random_tensor({m.embedder.tokens(), kModel.dim}, 2);
  const int steps = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(euler_integrate(f, x, steps, 1.0, false));
}
BENCHMARK(BM_EulerIntegrate)->Arg(12)->Arg(24)->Arg(48);

void BM_RolloutBackward(benchmark::State& state) {
  OdeViT m(kModel, 1);
  const auto batch = static_cast<std::size_t>(state.range(0));
  const Tensor x0 = random_tensor({batch * m.embedder.tokens(), kModel.dim}, 2);
  const Tensor target(x0.shape());
  for (auto _ : state) {
    for (Parameter* p : m.block.parameters()) p->zero_grad();
    Tape t;
    const StudentRollout r = rollout(t, m, t.constant(x0), batch);
    t.backward(mse(r.states.back(), t.constant(target)));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_RolloutBackward)->Arg(8)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_PredictStudent(benchmark::State& state) {
  OdeViT m(kModel, 1);
  const DatasetSplit eval = gen_synthetic(static_cast<std::size_t>(state.range(0)), 4, 32, 5, SplitTag::Eval);
  m.embedder.pixel_stats = eval.stats;
  for (auto _ : state) benchmark::DoNotOptimize(predict_student(m, eval, kModel.steps, kModel.horizon));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PredictStudent)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace

int main(int argc, char** argv) {
  retain_heap_memory();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
