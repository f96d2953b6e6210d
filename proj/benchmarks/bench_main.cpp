#include <benchmark/benchmark.h>

#include "vnmt/flows.hpp"
#include "vnmt/objective.hpp"
#include "vnmt/train.hpp"

using namespace vnmt;

namespace {

Tensor noise(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return Tensor::vector(std::move(v));
}

FlowStack make_stack(FlowKind kind, std::size_t d, std::size_t k, Rng& rng) {
  FlowStack stack{kind, {}};
  for (std::size_t i = 0; i < k; ++i) {
    switch (kind) {
      case FlowKind::planar:
        stack.steps.emplace_back(PlanarParams{noise(d, rng), noise(d, rng), Tensor::scalar(rng.normal())});
        break;
      case FlowKind::sylvester: {
        const std::size_t m = d / 2;
        stack.steps.emplace_back(make_sylvester_params(ops::reshape(noise(d * m, rng), {d, m}),
                                                       ops::reshape(noise(m * m, rng), {m, m}),
                                                       ops::reshape(noise(m * m, rng), {m, m}), noise(m, rng)));
        break;
      }
      case FlowKind::coupling:
        stack.steps.emplace_back(
            CouplingStep{ops::scale(ops::reshape(noise(d * d / 2, rng), {d / 2, d}), 0.1), noise(d, rng), parity_for_step(i)});
        break;
    }
  }
  return stack;
}

void BM_FlowStackForward(benchmark::State& state) {
  const auto kind = static_cast<FlowKind>(state.range(0));
  const auto d = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  const FlowStack stack = make_stack(kind, d, 4, rng);
  const Tensor z0 = noise(d, rng);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(stack_forward(z0, Tensor::scalar(0.0), stack).log_q.item());
  state.SetLabel(to_string(kind));
}
BENCHMARK(BM_FlowStackForward)->ArgsProduct({{0, 1, 2}, {16, 64}});

ModelConfig bench_model(std::size_t flows) {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 32;
  c.n_layers_enc = 1;
  c.n_layers_dec = 1;
  c.d_ffn = 64;
  c.latent_dim = 8;
  c.flow_count = flows;
  return c;
}

std::vector<SentencePair> bench_batch() {
  TaskSpec spec;
  return generate_corpus(spec, 16, 3).pairs;
}

void BM_ElboLoss(benchmark::State& state) {
  const Model model(bench_model(static_cast<std::size_t>(state.range(0))), 1);
  const auto batch = bench_batch();
  Rng rng(2);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(elbo_loss(model, batch, {}, 1.0, rng).recon_nll);
}
BENCHMARK(BM_ElboLoss)->Arg(0)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_TrainingStep(benchmark::State& state) {
  Model model(bench_model(static_cast<std::size_t>(state.range(0))), 1);
  const auto batch = bench_batch();
  Adam adam(1e-3);
  Rng rng(3);
  for (auto _ : state) {
    const auto terms = elbo_loss(model, batch, {}, 1.0, rng);
    backward(terms.loss);
    Adam::clip_grad_norm(model.parameters(), 1.0);
    adam.step(model.parameters());
    for (auto& p : model.parameters()) p.value.zero_grad();
  }
}
BENCHMARK(BM_TrainingStep)->Arg(0)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_BeamSearch(benchmark::State& state) {
  const Model model(bench_model(4), 1);
  const auto batch = bench_batch();
  std::size_t i = 0;
  for (auto _ : state) {
    const auto& src = batch[i++ % batch.size()].src;
    benchmark::DoNotOptimize(translate(model, src, static_cast<std::size_t>(state.range(0)), 14).score);
  }
}
BENCHMARK(BM_BeamSearch)->Arg(1)->Arg(5)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
