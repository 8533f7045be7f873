#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "meanvc/chunking.hpp"
#include "meanvc/net.hpp"

namespace meanvc {

// What gets cached as clean context after each generated chunk: the chunk we
// just generated (default), or a caller-supplied source mel chunk.
enum class CacheMode { kGenerated, kSource };

struct CacheEntry {
  int index = 0;
  Tensor mel;   // [fpc, bins]
  Tensor cond;  // [fpc, cond_dim]; zeros for pre-seeded cold-start chunks
};

// Rolling state for chunk-wise autoregressive 1-NFE inference. Owned by a
// single consumer; distinct streams share read-only params.
struct StreamState {
  ModelConfig cfg;
  const ParamStore* params = nullptr;
  Tensor spk;
  std::uint64_t seed = 0;
  CacheMode cache_mode = CacheMode::kGenerated;
  std::deque<CacheEntry> cache;
  int next_index = 0;
  bool initialized = false;
};

StreamState init_stream(const ParamStore& params, const ModelConfig& cfg,
                        Tensor spk, std::uint64_t seed,
                        const std::vector<MelChunk>& initial_cache = {},
                        CacheMode mode = CacheMode::kGenerated);

struct PushOptions {
  // Teacher forcing: cache this ground-truth chunk instead of the output.
  const Tensor* teacher_mel = nullptr;
  // Required when the stream runs in CacheMode::kSource.
  const Tensor* source_mel = nullptr;
};

// Generates one mel chunk from one bnf chunk (exactly one network forward),
// then rotates the clean-chunk cache.
Tensor push_chunk(StreamState& state, const Tensor& bnf_chunk,
                  const Tensor& ref_mel, const PushOptions& opts = {});

// Teacher-forced reference path: one masked full-sequence evaluation per
// noisy chunk position. clean_context must hold one ground-truth chunk per
// chunk of bnf. Matches streaming teacher-forced output bit for bit under
// matched seeds.
Tensor offline_generate(const ParamStore& params, const ModelConfig& cfg,
                        const Tensor& bnf, const Tensor& ref_mel,
                        const Tensor& spk, std::uint64_t seed,
                        const std::vector<MelChunk>& clean_context);

// Chunk-wise generation from precomputed conditioning, caching generated
// chunks. euler_steps 0 runs the 1-NFE mean-flow sampler; otherwise an
// n-step Euler sweep per chunk.
Tensor generate_chunks(const ParamStore& params, const ModelConfig& cfg,
                       const Tensor& cond, std::size_t n_chunks,
                       std::uint64_t seed, int euler_steps = 0);

std::uint64_t chunk_seed(std::uint64_t stream_seed, int chunk_index);

// Frame file format: magic "MVF1", u32 frame dim, then consecutive 32-bit
// little-endian float frames. Used for both bnf input and mel output.
void write_frames(const std::string& path, const Tensor& frames);
Tensor read_frames(const std::string& path);

}  // namespace meanvc
