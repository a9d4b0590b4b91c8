#include <benchmark/benchmark.h>

#include <random>

#include "fusionrec/evaluation.hpp"
#include "fusionrec/recall.hpp"
#include "fusionrec/synthetic.hpp"
#include "fusionrec/universal.hpp"

using namespace fusionrec;

namespace {

struct Fixture {
  SyntheticData data;
  ModelDims dims;
  Model<float> model;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    SyntheticConfig c;
    c.seed = 1;
    c.users = 500;
    c.items = 500;
    Fixture out{generate_synthetic(c), {}, {}};
    out.dims.fusion.d_id = 16;
    out.dims.fusion.d_sem = c.d_sem;
    out.dims.fusion.experts = 4;
    out.dims.fusion.active_experts = 2;
    out.dims.stack.layers = 2;
    out.dims.stack.heads = 2;
    out.dims.stack.d_ff = 64;
    out.dims.stack.max_len = 20;
    out.model = init_model(out.data.catalog, out.dims, Phase::kUniversal, 1, &out.data.token_init);
    return out;
  }();
  return f;
}

void BM_FuseCatalog(benchmark::State& state) {
  const Fixture& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(item_embeddings<float>(f.model));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(f.data.catalog.size()));
}
BENCHMARK(BM_FuseCatalog)->Unit(benchmark::kMillisecond);

void BM_UniversalStep(benchmark::State& state) {
  const Fixture& f = fixture();
  BatchStream stream(f.data.corpus, f.data.catalog,
                     {f.dims.stack.max_len, static_cast<int32_t>(state.range(0)), 32}, 1);
  ParamSet<float> params = f.model.params;
  for (auto _ : state) {
    const Batch batch = stream.next();
    ad::Tape<float> tape;
    ParamBinder<float> bind(tape, params);
    const ad::Var loss = universal_batch_loss<float>(bind, f.dims, f.data.catalog, batch);
    tape.backward(loss);
    benchmark::DoNotOptimize(bind.gradients());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_UniversalStep)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_UserEmbeddings(benchmark::State& state) {
  const Fixture& f = fixture();
  std::vector<std::vector<int32_t>> sequences;
  std::mt19937_64 rng(3);
  for (int r = 0; r < 256; ++r) {
    std::vector<int32_t> s(20);
    for (auto& x : s) x = 1 + static_cast<int32_t>(rng() % f.data.catalog.size());
    sequences.push_back(std::move(s));
  }
  for (auto _ : state) benchmark::DoNotOptimize(user_embeddings(f.model, Phase::kUniversal, sequences));
  state.SetItemsProcessed(state.iterations() * 256);
}
BENCHMARK(BM_UserEmbeddings)->Unit(benchmark::kMillisecond);

void BM_IndexQuery(benchmark::State& state) {
  const auto n = static_cast<int>(state.range(0));
  EmbeddingStore items(EmbeddingKind::kItem, 64);
  std::mt19937_64 rng(5);
  std::normal_distribution<float> normal;
  std::vector<float> v(64);
  for (int i = 0; i < n; ++i) {
    for (auto& x : v) x = normal(rng);
    items.add("i" + std::to_string(i), v);
  }
  const SimilarityIndex index = SimilarityIndex::build(items);
  for (auto& x : v) x = normal(rng);
  for (auto _ : state) benchmark::DoNotOptimize(index.query(v, 50));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_IndexQuery)->Arg(1000)->Arg(20000);

}  // namespace

BENCHMARK_MAIN();
