#include <benchmark/benchmark.h>

#include "meanvc/meanflow.hpp"
#include "meanvc/net.hpp"
#include "meanvc/rng.hpp"
#include "meanvc/stream.hpp"

namespace {

using namespace meanvc;

ModelConfig bench_config() {
  ModelConfig cfg;
  cfg.n_blocks = 4;
  cfg.hidden = 64;
  return cfg;
}

void BM_Matmul(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(7);
  Tensor a = rng.normal_tensor({n, n});
  Tensor b = rng.normal_tensor({n, n});
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_ChunkForward(benchmark::State& state) {
  ModelConfig cfg = bench_config();
  ParamStore params = net::init_params(cfg, 3);
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t k = cfg.chunk.history_k;
  Rng rng(11);
  Tensor clean = rng.normal_tensor({k * fpc, static_cast<std::size_t>(cfg.mel_bins)});
  Tensor z = rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.mel_bins)});
  Tensor cond_c =
      rng.normal_tensor({k * fpc, static_cast<std::size_t>(cfg.cond_dim())});
  Tensor cond_n =
      rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.cond_dim())});
  std::vector<int> ids{0, 1, 2};
  for (auto _ : state) {
    Tensor u = net::forward_u(params, cfg, clean, ids, z, {3}, cond_c, cond_n,
                              0.0, 1.0);
    benchmark::DoNotOptimize(u.data());
  }
}
BENCHMARK(BM_ChunkForward);

void BM_MfTargetJvp(benchmark::State& state) {
  ModelConfig cfg = bench_config();
  ParamStore params = net::init_params(cfg, 3);
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  Rng rng(13);
  Tensor clean = rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.mel_bins)});
  Tensor z = rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.mel_bins)});
  Tensor v = rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.mel_bins)});
  Tensor cond = rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.cond_dim())});
  TimePair pair{0.2, 0.8};
  for (auto _ : state) {
    Tensor u = mf_target(params, cfg, clean, {0}, z, {1}, cond, cond, pair, v);
    benchmark::DoNotOptimize(u.data());
  }
}
BENCHMARK(BM_MfTargetJvp);

}  // namespace

BENCHMARK_MAIN();
