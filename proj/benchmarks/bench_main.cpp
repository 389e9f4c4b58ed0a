#include <benchmark/benchmark.h>

#include "mechshift/discovery.hpp"
#include "mechshift/training.hpp"

using namespace mechshift;

namespace {

Weights bench_weights(AttentionMode mode) {
  ModelConfig c;
  c.vocab_size = Vocabulary::standard().size();
  c.attention_mode = mode;
  return Weights::random(c, 1);
}

}  // namespace

static void BM_ForwardTrace(benchmark::State& state) {
  const Weights w = bench_weights(AttentionMode::kCausal);
  const auto tokens = gen_ioi(1, 0)[0].clean;
  for (auto _ : state) benchmark::DoNotOptimize(forward(w, tokens).logits[0]);
}
BENCHMARK(BM_ForwardTrace);

static void BM_BatchedForwardBackward(benchmark::State& state) {
  const Weights w = bench_weights(AttentionMode::kCausal);
  const int batch = static_cast<int>(state.range(0));
  std::vector<int> tokens, targets;
  for (const PromptPair& p : gen_countdown(batch, 0)) {
    tokens.insert(tokens.end(), p.clean.begin(), p.clean.end() - 1);
    targets.insert(targets.end(), p.clean.begin() + 1, p.clean.end());
  }
  const int len = static_cast<int>(tokens.size()) / batch;
  for (auto _ : state) {
    Tape tape;
    const ParamVars params = bind_params(tape, w, true);
    const Var loss = cross_entropy(run_batched(params, w.config, tokens, len, AttentionMode::kCausal), targets);
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.grad(params.unembedding)[0]);
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_BatchedForwardBackward)->Arg(1)->Arg(16);

static void BM_EapIg(benchmark::State& state) {
  const Weights w = bench_weights(AttentionMode::kCausal);
  const CompGraph g = build_graph(w.config);
  const auto inputs = analysis_inputs(gen_ioi(4, 0), RunMode::kAr);
  for (auto _ : state) benchmark::DoNotOptimize(eap_ig_scores(w, g, inputs, static_cast<int>(state.range(0))).scores[0]);
  state.SetItemsProcessed(state.iterations() * static_cast<long>(inputs.size()));
}
BENCHMARK(BM_EapIg)->Arg(1)->Arg(5);

static void BM_ExactPatchEffects(benchmark::State& state) {
  const Weights w = bench_weights(AttentionMode::kCausal);
  const CompGraph g = build_graph(w.config);
  const auto inputs = analysis_inputs(gen_ioi(1, 0), RunMode::kAr);
  for (auto _ : state) benchmark::DoNotOptimize(exact_patch_effects(w, g, inputs)[0]);
}
BENCHMARK(BM_ExactPatchEffects)->Unit(benchmark::kMillisecond);

static void BM_MdmDecode(benchmark::State& state) {
  const Weights w = bench_weights(AttentionMode::kFull);
  const PromptPair p = gen_countdown(1, 0)[0];
  for (auto _ : state) benchmark::DoNotOptimize(decode_mdm(w, p.clean_prompt(), p.gen_len, p.steps).tokens[0]);
}
BENCHMARK(BM_MdmDecode);
BENCHMARK_MAIN();
