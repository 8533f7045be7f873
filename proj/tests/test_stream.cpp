#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "helpers.hpp"
#include "meanvc/net.hpp"
#include "meanvc/rng.hpp"
#include "meanvc/stream.hpp"

using namespace meanvc;
using meanvc::testutil::tiny_config;

namespace {

// Parameters with every head randomized so masking bugs cannot hide behind
// zero-initialized projections.
ParamStore lively_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamStore params = net::init_params(cfg, seed);
  Rng wr(derive_seed(seed, 777));
  for (auto& e : params.entries())
    e.value = wr.normal_tensor(e.value.shape(), 0.05);
  return params;
}

Tensor chunk_rows(const Tensor& t, std::size_t c, std::size_t fpc) {
  Tensor out({fpc, t.cols()});
  for (std::size_t f = 0; f < fpc; ++f)
    for (std::size_t j = 0; j < t.cols(); ++j)
      out.at(f, j) = t.at(c * fpc + f, j);
  return out;
}

}  // namespace

TEST_CASE("teacher-forced streaming matches the offline pass bit for bit") {
  ModelConfig cfg = tiny_config();
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t bins = static_cast<std::size_t>(cfg.mel_bins);
  for (std::size_t k : {1, 3}) {
    cfg.chunk.history_k = k;
    const ParamStore params = lively_params(cfg, 3 + k);
    for (std::size_t n = 1; n <= 4; ++n) {
      Rng rng(derive_seed(10 * k + n, 1));
      const Tensor bnf =
          rng.normal_tensor({n * fpc, static_cast<std::size_t>(cfg.bnf_dim)});
      const Tensor ref = rng.normal_tensor({5, bins});
      const Tensor spk =
          rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});
      const Tensor truth = rng.normal_tensor({n * fpc, bins});
      std::vector<MelChunk> ctx(n);
      for (std::size_t c = 0; c < n; ++c) {
        ctx[c].frames = chunk_rows(truth, c, fpc);
        ctx[c].index = static_cast<int>(c);
        ctx[c].role = ChunkRole::kClean;
      }
      const std::uint64_t seed = 99 + n;
      const Tensor offline =
          offline_generate(params, cfg, bnf, ref, spk, seed, ctx);

      StreamState st = init_stream(params, cfg, spk, seed);
      Tensor streamed({n * fpc, bins});
      for (std::size_t c = 0; c < n; ++c) {
        PushOptions opts;
        opts.teacher_mel = &ctx[c].frames;
        const Tensor out = push_chunk(st, chunk_rows(bnf, c, fpc), ref, opts);
        for (std::size_t f = 0; f < fpc; ++f)
          for (std::size_t j = 0; j < bins; ++j)
            streamed.at(c * fpc + f, j) = out.at(f, j);
      }
      REQUIRE(offline.rows() == streamed.rows());
      for (std::size_t i = 0; i < offline.size(); ++i)
        CHECK(offline[i] == streamed[i]);
    }
  }
}

TEST_CASE("offline generation truncates a ragged tail like the stream does") {
  ModelConfig cfg = tiny_config();
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t bins = static_cast<std::size_t>(cfg.mel_bins);
  const ParamStore params = lively_params(cfg, 11);
  Rng rng(12);
  const std::size_t len = 3 * fpc - 1;  // last chunk is padded
  const Tensor bnf =
      rng.normal_tensor({len, static_cast<std::size_t>(cfg.bnf_dim)});
  const Tensor ref = rng.normal_tensor({4, bins});
  const Tensor spk = rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});
  std::vector<MelChunk> ctx(3);
  for (std::size_t c = 0; c < 3; ++c) {
    ctx[c].frames = rng.normal_tensor({fpc, bins});
    ctx[c].index = static_cast<int>(c);
  }
  const Tensor offline = offline_generate(params, cfg, bnf, ref, spk, 7, ctx);
  CHECK(offline.rows() == len);

  // stream the same input with the final bnf chunk zero-padded
  Tensor bnf_pad({3 * fpc, static_cast<std::size_t>(cfg.bnf_dim)});
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < bnf_pad.cols(); ++j)
      bnf_pad.at(i, j) = bnf.at(i, j);
  StreamState st = init_stream(params, cfg, spk, 7);
  std::vector<double> streamed;
  for (std::size_t c = 0; c < 3; ++c) {
    PushOptions opts;
    opts.teacher_mel = &ctx[c].frames;
    const Tensor out = push_chunk(st, chunk_rows(bnf_pad, c, fpc), ref, opts);
    for (std::size_t i = 0; i < out.size(); ++i) streamed.push_back(out[i]);
  }
  for (std::size_t i = 0; i < offline.size(); ++i)
    CHECK(offline[i] == streamed[i]);
}

TEST_CASE("cache keeps at most the history window") {
  ModelConfig cfg = tiny_config();
  cfg.chunk.history_k = 2;
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const ParamStore params = lively_params(cfg, 21);
  Rng rng(22);
  const Tensor ref =
      rng.normal_tensor({4, static_cast<std::size_t>(cfg.mel_bins)});
  const Tensor spk = rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});
  StreamState st = init_stream(params, cfg, spk, 5);
  for (int c = 0; c < 4; ++c) {
    push_chunk(st, rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.bnf_dim)}),
               ref);
    CHECK(st.cache.size() == std::min<std::size_t>(c + 1, 2));
  }
  CHECK(st.cache.front().index == 2);
  CHECK(st.cache.back().index == 3);
  CHECK(st.next_index == 4);
}

TEST_CASE("earlier chunks never depend on later bnf input") {
  ModelConfig cfg = tiny_config();
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t bins = static_cast<std::size_t>(cfg.mel_bins);
  const ParamStore params = lively_params(cfg, 31);
  Rng rng(32);
  const Tensor bnf =
      rng.normal_tensor({4 * fpc, static_cast<std::size_t>(cfg.bnf_dim)});
  Tensor bnf2 = bnf;
  for (std::size_t f = 0; f < fpc; ++f)
    for (std::size_t j = 0; j < bnf2.cols(); ++j)
      bnf2.at(2 * fpc + f, j) += 3.0;
  const Tensor ref = rng.normal_tensor({4, bins});
  const Tensor spk = rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});

  auto run = [&](const Tensor& in) {
    StreamState st = init_stream(params, cfg, spk, 17);
    std::vector<Tensor> outs;
    for (std::size_t c = 0; c < 4; ++c)
      outs.push_back(push_chunk(st, chunk_rows(in, c, fpc), ref));
    return outs;
  };
  const std::vector<Tensor> a = run(bnf);
  const std::vector<Tensor> b = run(bnf2);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < a[c].size(); ++i) CHECK(a[c][i] == b[c][i]);
  bool changed = false;
  for (std::size_t i = 0; i < a[2].size(); ++i)
    changed = changed || a[2][i] != b[2][i];
  CHECK(changed);
}

TEST_CASE("each pushed chunk costs exactly one network evaluation") {
  ModelConfig cfg = tiny_config();
  const ParamStore params = lively_params(cfg, 41);
  Rng rng(42);
  const Tensor ref =
      rng.normal_tensor({4, static_cast<std::size_t>(cfg.mel_bins)});
  const Tensor spk = rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});
  StreamState st = init_stream(params, cfg, spk, 1);
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  for (int c = 0; c < 3; ++c) {
    net::reset_forward_count();
    push_chunk(st,
               rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.bnf_dim)}),
               ref);
    CHECK(net::forward_count() == 1);
  }
}

TEST_CASE("stream input validation") {
  ModelConfig cfg = tiny_config();
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const ParamStore params = lively_params(cfg, 51);
  Rng rng(52);
  const Tensor ref =
      rng.normal_tensor({4, static_cast<std::size_t>(cfg.mel_bins)});
  const Tensor spk = rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});
  const Tensor bnf_chunk =
      rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.bnf_dim)});

  SUBCASE("uninitialized stream rejects pushes") {
    StreamState st;
    CHECK_THROWS_AS(push_chunk(st, bnf_chunk, ref), std::runtime_error);
  }
  SUBCASE("wrong chunk shape is rejected") {
    StreamState st = init_stream(params, cfg, spk, 1);
    CHECK_THROWS_AS(
        push_chunk(st,
                   rng.normal_tensor(
                       {fpc + 1, static_cast<std::size_t>(cfg.bnf_dim)}),
                   ref),
        std::invalid_argument);
  }
  SUBCASE("speaker embedding size must match") {
    CHECK_THROWS_AS(
        init_stream(params, cfg,
                    Tensor({static_cast<std::size_t>(cfg.spk_dim) + 1}), 1),
        std::invalid_argument);
  }
  SUBCASE("oversized cold-start cache is an error") {
    std::vector<MelChunk> big(cfg.chunk.history_k + 1);
    for (std::size_t i = 0; i < big.size(); ++i) {
      big[i].frames =
          Tensor({fpc, static_cast<std::size_t>(cfg.mel_bins)});
      big[i].index = static_cast<int>(i);
    }
    CHECK_THROWS_AS(init_stream(params, cfg, spk, 1, big),
                    std::invalid_argument);
  }
  SUBCASE("cold-start chunks must have chunk shape") {
    std::vector<MelChunk> bad(1);
    bad[0].frames =
        Tensor({fpc + 1, static_cast<std::size_t>(cfg.mel_bins)});
    CHECK_THROWS_AS(init_stream(params, cfg, spk, 1, bad),
                    std::invalid_argument);
  }
  SUBCASE("source cache mode requires a source chunk") {
    StreamState st = init_stream(params, cfg, spk, 1, {}, CacheMode::kSource);
    CHECK_THROWS_AS(push_chunk(st, bnf_chunk, ref), std::invalid_argument);
  }
}

TEST_CASE("cache-mode selection controls what future chunks condition on") {
  ModelConfig cfg = tiny_config();
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t bins = static_cast<std::size_t>(cfg.mel_bins);
  const ParamStore params = lively_params(cfg, 61);
  Rng rng(62);
  const Tensor ref = rng.normal_tensor({4, bins});
  const Tensor spk = rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});
  const Tensor b0 =
      rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.bnf_dim)});
  const Tensor b1 =
      rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.bnf_dim)});
  const Tensor src = rng.normal_tensor({fpc, bins});

  StreamState gen = init_stream(params, cfg, spk, 9);
  StreamState srcst = init_stream(params, cfg, spk, 9, {}, CacheMode::kSource);
  PushOptions src_opts;
  src_opts.source_mel = &src;
  const Tensor g0 = push_chunk(gen, b0, ref);
  const Tensor s0 = push_chunk(srcst, b0, ref, src_opts);
  // the first forward is identical; only the cached context differs
  for (std::size_t i = 0; i < g0.size(); ++i) CHECK(g0[i] == s0[i]);
  for (std::size_t i = 0; i < src.size(); ++i)
    CHECK(srcst.cache.back().mel[i] == src[i]);
  for (std::size_t i = 0; i < g0.size(); ++i)
    CHECK(gen.cache.back().mel[i] == g0[i]);

  const Tensor g1 = push_chunk(gen, b1, ref);
  const Tensor s1 = push_chunk(srcst, b1, ref, src_opts);
  bool differs = false;
  for (std::size_t i = 0; i < g1.size(); ++i) differs = differs || g1[i] != s1[i];
  CHECK(differs);
}

TEST_CASE("teacher forcing caches the teacher chunk") {
  ModelConfig cfg = tiny_config();
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const ParamStore params = lively_params(cfg, 71);
  Rng rng(72);
  const Tensor ref =
      rng.normal_tensor({4, static_cast<std::size_t>(cfg.mel_bins)});
  const Tensor spk = rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});
  const Tensor teacher =
      rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.mel_bins)});
  StreamState st = init_stream(params, cfg, spk, 3);
  PushOptions opts;
  opts.teacher_mel = &teacher;
  push_chunk(st,
             rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.bnf_dim)}),
             ref, opts);
  for (std::size_t i = 0; i < teacher.size(); ++i)
    CHECK(st.cache.back().mel[i] == teacher[i]);
}

TEST_CASE("cold-start chunks seed the context and the chunk counter") {
  ModelConfig cfg = tiny_config();
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const ParamStore params = lively_params(cfg, 81);
  Rng rng(82);
  const Tensor ref =
      rng.normal_tensor({4, static_cast<std::size_t>(cfg.mel_bins)});
  const Tensor spk = rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});
  std::vector<MelChunk> warm(1);
  warm[0].frames =
      rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.mel_bins)});
  warm[0].index = 0;
  StreamState st = init_stream(params, cfg, spk, 13, warm);
  CHECK(st.next_index == 1);
  CHECK(st.cache.size() == 1);
  // cold-start context carries zero conditioning by contract
  for (std::size_t i = 0; i < st.cache[0].cond.size(); ++i)
    CHECK(st.cache[0].cond[i] == 0.0);

  const Tensor bnf_chunk =
      rng.normal_tensor({fpc, static_cast<std::size_t>(cfg.bnf_dim)});
  const Tensor warm_out = push_chunk(st, bnf_chunk, ref);
  // a cold stream generating its chunk 1 with an empty cache disagrees
  StreamState cold = init_stream(params, cfg, spk, 13);
  push_chunk(cold, bnf_chunk, ref);
  const Tensor cold_out = push_chunk(cold, bnf_chunk, ref);
  bool differs = false;
  for (std::size_t i = 0; i < warm_out.size(); ++i)
    differs = differs || warm_out[i] != cold_out[i];
  CHECK(differs);
}

TEST_CASE("chunk generation from fixed conditioning is deterministic") {
  ModelConfig cfg = tiny_config();
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const ParamStore params = lively_params(cfg, 91);
  Rng rng(92);
  const Tensor cond =
      rng.normal_tensor({3 * fpc, static_cast<std::size_t>(cfg.cond_dim())});
  const Tensor a = generate_chunks(params, cfg, cond, 3, 5);
  const Tensor b = generate_chunks(params, cfg, cond, 3, 5);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  const Tensor c = generate_chunks(params, cfg, cond, 3, 6);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs = differs || a[i] != c[i];
  CHECK(differs);
  // a multi-step Euler sweep is a different sampler
  const Tensor e = generate_chunks(params, cfg, cond, 3, 5, 4);
  differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs = differs || a[i] != e[i];
  CHECK(differs);

  CHECK_THROWS_AS(generate_chunks(params, cfg, cond, 0, 5),
                  std::invalid_argument);
  CHECK_THROWS_AS(generate_chunks(params, cfg, cond, 2, 5),
                  std::invalid_argument);
  CHECK_THROWS_AS(generate_chunks(params, cfg, cond, 3, 5, -1),
                  std::invalid_argument);
}

TEST_CASE("offline generation validates its inputs") {
  ModelConfig cfg = tiny_config();
  const ParamStore params = lively_params(cfg, 95);
  Rng rng(96);
  const Tensor ref =
      rng.normal_tensor({4, static_cast<std::size_t>(cfg.mel_bins)});
  const Tensor spk = rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});
  const Tensor bnf =
      rng.normal_tensor({4, static_cast<std::size_t>(cfg.bnf_dim)});
  CHECK_THROWS_AS(
      offline_generate(params, cfg,
                       Tensor({0, static_cast<std::size_t>(cfg.bnf_dim)}), ref,
                       spk, 1, {}),
      std::invalid_argument);
  // 4 frames at fpc 2 means two context chunks, not one
  std::vector<MelChunk> one(1);
  one[0].frames = rng.normal_tensor(
      {cfg.chunk.frames_per_chunk, static_cast<std::size_t>(cfg.mel_bins)});
  CHECK_THROWS_AS(offline_generate(params, cfg, bnf, ref, spk, 1, one),
                  std::invalid_argument);
}

TEST_CASE("frame files round-trip through the MVF1 format") {
  Rng rng(97);
  const Tensor frames = rng.normal_tensor({7, 5});
  const std::string path = "/tmp/meanvc_test_frames.mvf";
  write_frames(path, frames);
  const Tensor back = read_frames(path);
  REQUIRE(back.rows() == 7);
  REQUIRE(back.cols() == 5);
  for (std::size_t i = 0; i < frames.size(); ++i)
    CHECK(back[i] == doctest::Approx(frames[i]).epsilon(1e-6));
  std::remove(path.c_str());

  CHECK_THROWS(write_frames(path, Tensor({4})));
  const std::string bad = "/tmp/meanvc_test_bad.mvf";
  std::ofstream(bad, std::ios::binary) << "XXXX\x05\x00\x00\x00";
  CHECK_THROWS(read_frames(bad));
  std::remove(bad.c_str());
}
