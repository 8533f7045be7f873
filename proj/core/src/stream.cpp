#include "meanvc/stream.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <utility>

#include "meanvc/flow.hpp"
#include "meanvc/meanflow.hpp"
#include "meanvc/rng.hpp"

namespace meanvc {

namespace {

struct Context {
  Tensor frames;
  Tensor cond;
  std::vector<int> ids;
};

Context stack_cache(const std::deque<CacheEntry>& cache, std::size_t bins,
                    std::size_t cond_dim, std::size_t fpc) {
  Context ctx;
  const std::size_t nc = cache.size();
  ctx.frames = Tensor({nc * fpc, bins});
  ctx.cond = Tensor({nc * fpc, cond_dim});
  ctx.ids.reserve(nc);
  std::size_t row = 0;
  for (const CacheEntry& e : cache) {
    ctx.ids.push_back(e.index);
    for (std::size_t f = 0; f < fpc; ++f, ++row) {
      for (std::size_t j = 0; j < bins; ++j)
        ctx.frames.at(row, j) = e.mel.at(f, j);
      for (std::size_t j = 0; j < cond_dim; ++j)
        ctx.cond.at(row, j) = e.cond.at(f, j);
    }
  }
  return ctx;
}

void evict(std::deque<CacheEntry>& cache, std::size_t k) {
  while (cache.size() > k) cache.pop_front();
}

}  // namespace

std::uint64_t chunk_seed(std::uint64_t stream_seed, int chunk_index) {
  return derive_seed(stream_seed, static_cast<std::uint64_t>(chunk_index));
}

StreamState init_stream(const ParamStore& params, const ModelConfig& cfg,
                        Tensor spk, std::uint64_t seed,
                        const std::vector<MelChunk>& initial_cache,
                        CacheMode mode) {
  cfg.validate();
  if (spk.size() != static_cast<std::size_t>(cfg.spk_dim)) {
    throw std::invalid_argument("init_stream: speaker embedding size mismatch");
  }
  StreamState st;
  st.cfg = cfg;
  st.params = &params;
  st.spk = std::move(spk);
  st.seed = seed;
  st.cache_mode = mode;
  if (initial_cache.size() > cfg.chunk.history_k) {
    throw std::invalid_argument("init_stream: initial cache larger than K");
  }
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  for (const MelChunk& ch : initial_cache) {
    if (ch.frames.rows() != fpc ||
        ch.frames.cols() != static_cast<std::size_t>(cfg.mel_bins)) {
      throw std::invalid_argument("init_stream: bad cold-start chunk shape");
    }
    CacheEntry e;
    e.index = ch.index;
    e.mel = ch.frames;
    // Cold-start chunks carry no conversion features; condition on zeros.
    e.cond = Tensor({fpc, static_cast<std::size_t>(cfg.cond_dim())});
    st.cache.push_back(std::move(e));
    st.next_index = ch.index + 1;
  }
  st.initialized = true;
  return st;
}

Tensor push_chunk(StreamState& state, const Tensor& bnf_chunk,
                  const Tensor& ref_mel, const PushOptions& opts) {
  if (!state.initialized || state.params == nullptr) {
    throw std::runtime_error("push_chunk: stream not initialized");
  }
  const ModelConfig& cfg = state.cfg;
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t bins = static_cast<std::size_t>(cfg.mel_bins);
  if (bnf_chunk.rows() != fpc ||
      bnf_chunk.cols() != static_cast<std::size_t>(cfg.bnf_dim)) {
    throw std::invalid_argument(
        "push_chunk: bnf chunk must be [frames_per_chunk, bnf_dim]");
  }
  if (state.cache_mode == CacheMode::kSource && opts.teacher_mel == nullptr &&
      opts.source_mel == nullptr) {
    throw std::invalid_argument(
        "push_chunk: source cache mode needs a source chunk");
  }

  const int c = state.next_index++;
  const Tensor timbre =
      net::timbre_encode(*state.params, cfg, bnf_chunk, ref_mel);
  const Tensor cond = net::assemble_condition(cfg, timbre, state.spk);
  const Context ctx = stack_cache(state.cache, bins,
                                  static_cast<std::size_t>(cfg.cond_dim()), fpc);
  const VelocityFn f = net::make_chunk_velocity_fn(
      *state.params, cfg, ctx.frames, ctx.ids, c, ctx.cond, cond);
  Tensor out = one_nfe_sample(f, {fpc, bins}, chunk_seed(state.seed, c));

  CacheEntry e;
  e.index = c;
  e.cond = cond;
  if (opts.teacher_mel != nullptr) {
    require_same_shape(*opts.teacher_mel, out, "push_chunk teacher");
    e.mel = *opts.teacher_mel;
  } else if (state.cache_mode == CacheMode::kSource) {
    require_same_shape(*opts.source_mel, out, "push_chunk source");
    e.mel = *opts.source_mel;
  } else {
    e.mel = out;
  }
  state.cache.push_back(std::move(e));
  evict(state.cache, cfg.chunk.history_k);
  return out;
}

Tensor offline_generate(const ParamStore& params, const ModelConfig& cfg,
                        const Tensor& bnf, const Tensor& ref_mel,
                        const Tensor& spk, std::uint64_t seed,
                        const std::vector<MelChunk>& clean_context) {
  cfg.validate();
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t bins = static_cast<std::size_t>(cfg.mel_bins);
  const std::size_t len = bnf.rows();
  if (len == 0) throw std::invalid_argument("offline_generate: empty input");
  if (bnf.cols() != static_cast<std::size_t>(cfg.bnf_dim)) {
    throw std::invalid_argument("offline_generate: bnf width mismatch");
  }
  const std::size_t n_chunks = (len + fpc - 1) / fpc;
  if (clean_context.size() != n_chunks) {
    throw std::invalid_argument(
        "offline_generate: clean context misaligned with chunk count");
  }
  const std::size_t nf = n_chunks * fpc;
  Tensor bnf_pad({nf, bnf.cols()});
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < bnf.cols(); ++j)
      bnf_pad.at(i, j) = bnf.at(i, j);

  const Tensor timbre = net::timbre_encode(params, cfg, bnf_pad, ref_mel);
  const Tensor cond = net::assemble_condition(cfg, timbre, spk);

  Tensor clean({nf, bins});
  std::vector<int> ids(n_chunks);
  for (std::size_t c = 0; c < n_chunks; ++c) {
    const MelChunk& ch = clean_context[c];
    if (ch.frames.rows() != fpc || ch.frames.cols() != bins) {
      throw std::invalid_argument("offline_generate: bad context chunk shape");
    }
    ids[c] = static_cast<int>(c);
    for (std::size_t f = 0; f < fpc; ++f)
      for (std::size_t j = 0; j < bins; ++j)
        clean.at(c * fpc + f, j) = ch.frames.at(f, j);
  }

  // Each noisy chunk sees only its clean history plus itself, so every chunk
  // position can be denoised in one joint teacher-forced evaluation using the
  // same per-chunk noise seeds as the streaming path.
  Tensor z1({nf, bins});
  for (std::size_t c = 0; c < n_chunks; ++c) {
    Rng rng(chunk_seed(seed, static_cast<int>(c)));
    Tensor zc = rng.normal_tensor({fpc, bins});
    for (std::size_t f = 0; f < fpc; ++f)
      for (std::size_t j = 0; j < bins; ++j)
        z1.at(c * fpc + f, j) = zc.at(f, j);
  }
  const Tensor u =
      net::forward_u(params, cfg, clean, ids, z1, ids, cond, cond, 0.0, 1.0);
  Tensor out({len, bins});
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < bins; ++j)
      out.at(i, j) = z1.at(i, j) - u.at(i, j);
  return out;
}

Tensor generate_chunks(const ParamStore& params, const ModelConfig& cfg,
                       const Tensor& cond, std::size_t n_chunks,
                       std::uint64_t seed, int euler_steps) {
  cfg.validate();
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t bins = static_cast<std::size_t>(cfg.mel_bins);
  const std::size_t cd = static_cast<std::size_t>(cfg.cond_dim());
  if (n_chunks == 0) {
    throw std::invalid_argument("generate_chunks: zero chunks");
  }
  if (cond.rows() != n_chunks * fpc || cond.cols() != cd) {
    throw std::invalid_argument("generate_chunks: conditioning shape mismatch");
  }
  if (euler_steps < 0) {
    throw std::invalid_argument("generate_chunks: negative step count");
  }
  Tensor out({n_chunks * fpc, bins});
  std::deque<CacheEntry> cache;
  for (std::size_t c = 0; c < n_chunks; ++c) {
    Tensor cond_c({fpc, cd});
    for (std::size_t f = 0; f < fpc; ++f)
      for (std::size_t j = 0; j < cd; ++j)
        cond_c.at(f, j) = cond.at(c * fpc + f, j);
    const Context ctx = stack_cache(cache, bins, cd, fpc);
    const VelocityFn f = net::make_chunk_velocity_fn(
        params, cfg, ctx.frames, ctx.ids, static_cast<int>(c), ctx.cond,
        cond_c);
    const std::uint64_t cs = chunk_seed(seed, static_cast<int>(c));
    Tensor mel = euler_steps == 0 ? one_nfe_sample(f, {fpc, bins}, cs)
                                  : euler_sample(f, {fpc, bins}, euler_steps, cs);
    for (std::size_t fr = 0; fr < fpc; ++fr)
      for (std::size_t j = 0; j < bins; ++j)
        out.at(c * fpc + fr, j) = mel.at(fr, j);
    CacheEntry e;
    e.index = static_cast<int>(c);
    e.mel = std::move(mel);
    e.cond = std::move(cond_c);
    cache.push_back(std::move(e));
    evict(cache, cfg.chunk.history_k);
  }
  return out;
}

void write_frames(const std::string& path, const Tensor& frames) {
  if (frames.rank() != 2 || frames.cols() == 0) {
    throw std::invalid_argument("write_frames: need a [frames, dim] tensor");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_frames: cannot open " + path);
  f.write("MVF1", 4);
  const std::uint32_t dim = static_cast<std::uint32_t>(frames.cols());
  f.write(reinterpret_cast<const char*>(&dim), 4);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const float v = static_cast<float>(frames[i]);
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  if (!f) throw std::runtime_error("write_frames: write failed for " + path);
}

Tensor read_frames(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_frames: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "MVF1", 4) != 0) {
    throw std::runtime_error("read_frames: bad magic in " + path);
  }
  std::uint32_t dim = 0;
  f.read(reinterpret_cast<char*>(&dim), 4);
  if (!f || dim == 0) throw std::runtime_error("read_frames: bad frame dim");
  std::vector<double> data;
  float v = 0.0f;
  while (f.read(reinterpret_cast<char*>(&v), 4)) data.push_back(v);
  if (data.size() % dim != 0) {
    throw std::runtime_error("read_frames: truncated frame data");
  }
  const std::size_t rows = data.size() / dim;
  return Tensor({rows, static_cast<std::size_t>(dim)}, std::move(data));
}

}  // namespace meanvc
