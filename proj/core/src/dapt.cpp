#include "meanvc/dapt.hpp"

#include <cmath>
#include <deque>
#include <stdexcept>
#include <string>

#include "meanvc/optim.hpp"
#include "meanvc/rng.hpp"
#include "meanvc/stream.hpp"

namespace meanvc {

namespace {

std::string pool_name(int tap, const char* suffix) {
  return "disc.p" + std::to_string(tap) + suffix;
}

// Frame-level permission matrix for scoring: chunk a sees itself and up to
// history_k preceding chunks.
ChunkMask causal_window_mask(std::size_t n_chunks, const ChunkSpec& spec) {
  ChunkMask m;
  m.n_noisy_chunks = n_chunks;
  m.frames_per_chunk = spec.frames_per_chunk;
  m.side = n_chunks * spec.frames_per_chunk;
  m.allow.assign(m.side * m.side, 0);
  const long k = static_cast<long>(spec.history_k);
  for (std::size_t r = 0; r < m.side; ++r) {
    const long rc = static_cast<long>(r / spec.frames_per_chunk);
    for (std::size_t c = 0; c < m.side; ++c) {
      const long cc = static_cast<long>(c / spec.frames_per_chunk);
      if (cc <= rc && cc >= rc - k) m.allow[r * m.side + c] = 1;
    }
  }
  return m;
}

struct PaddedItem {
  Tensor mel;   // [N*fpc, bins]
  Tensor cond;  // [N*fpc, cond_dim]
  std::size_t n_chunks = 0;
};

PaddedItem pad_and_condition(const ParamStore& g_params, const ModelConfig& cfg,
                             const TrainItem& item) {
  if (item.mel.rows() == 0 || item.bnf.rows() != item.mel.rows()) {
    throw std::invalid_argument("dapt: bad training item");
  }
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t len = item.mel.rows();
  PaddedItem out;
  out.n_chunks = (len + fpc - 1) / fpc;
  const std::size_t nf = out.n_chunks * fpc;
  out.mel = Tensor({nf, item.mel.cols()});
  Tensor bnf({nf, item.bnf.cols()});
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < item.mel.cols(); ++j)
      out.mel.at(i, j) = item.mel.at(i, j);
    for (std::size_t j = 0; j < item.bnf.cols(); ++j)
      bnf.at(i, j) = item.bnf.at(i, j);
  }
  const Tensor timbre = net::timbre_encode(g_params, cfg, bnf, item.ref_mel);
  out.cond = net::assemble_condition(cfg, timbre, item.spk);
  return out;
}

struct Context {
  Tensor frames;
  Tensor cond;
  std::vector<int> ids;
};

struct CachedChunk {
  int index = 0;
  Tensor mel;
  Tensor cond;
};

Context stack_context(const std::deque<CachedChunk>& cache, std::size_t bins,
                      std::size_t cd, std::size_t fpc) {
  Context ctx;
  ctx.frames = Tensor({cache.size() * fpc, bins});
  ctx.cond = Tensor({cache.size() * fpc, cd});
  std::size_t row = 0;
  for (const CachedChunk& e : cache) {
    ctx.ids.push_back(e.index);
    for (std::size_t f = 0; f < fpc; ++f, ++row) {
      for (std::size_t j = 0; j < bins; ++j)
        ctx.frames.at(row, j) = e.mel.at(f, j);
      for (std::size_t j = 0; j < cd; ++j) ctx.cond.at(row, j) = e.cond.at(f, j);
    }
  }
  return ctx;
}

}  // namespace

ParamStore init_discriminator(const ParamStore& g_params,
                              const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0xD15C));
  ParamStore d;
  for (const auto& e : g_params.entries()) {
    if (e.name.rfind("dec.", 0) == 0) d.add(e.name, e.value);
  }
  if (d.size() == 0) {
    throw std::invalid_argument("init_discriminator: no decoder parameters");
  }
  const std::size_t h = static_cast<std::size_t>(cfg.hidden);
  for (int tap = 0; tap < 2; ++tap) {
    d.add(pool_name(tap, ".q"), rng.trunc_normal_tensor({1, h}, 0.02));
    d.add(pool_name(tap, ".Wk"), rng.trunc_normal_tensor({h, h}, 0.02));
    d.add(pool_name(tap, ".Wv"), rng.trunc_normal_tensor({h, h}, 0.02));
    d.add(pool_name(tap, ".Wo"), rng.trunc_normal_tensor({h, h}, 0.02));
  }
  d.add("disc.out.W", rng.trunc_normal_tensor({2 * h, 1}, 0.02));
  d.add("disc.out.b", Tensor({1}));
  return d;
}

Var discriminate_g(Graph& g, BoundParams& p, const ModelConfig& cfg, Var mel,
                   Var cond) {
  const Tensor& mv = g.value(mel);
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t bins = static_cast<std::size_t>(cfg.mel_bins);
  if (mv.rows() == 0 || mv.rows() % fpc != 0 || mv.cols() != bins) {
    throw std::invalid_argument(
        "discriminate: mel must be a nonempty whole number of chunks");
  }
  if (g.value(cond).rows() != mv.rows() ||
      g.value(cond).cols() != static_cast<std::size_t>(cfg.cond_dim())) {
    throw std::invalid_argument("discriminate: condition shape mismatch");
  }
  const std::size_t n_chunks = mv.rows() / fpc;
  const std::size_t L = mv.rows();

  Var role_noisy = g.slice_rows(p["dec.role"], 1, 2);
  Var h = g.add_row(g.add_row(g.matmul(mel, p["dec.in.W"]), p["dec.in.b"]),
                    role_noisy);
  h = g.add(h, g.matmul(cond, p["dec.cond.W"]));

  const ChunkMask mask = causal_window_mask(n_chunks, cfg.chunk);
  std::vector<int> positions(L);
  for (std::size_t i = 0; i < L; ++i) positions[i] = static_cast<int>(i);

  Var temb = net::time_conditioning(g, p, cfg, g.scalar(0.0), g.scalar(0.0));
  std::vector<Var> blocks =
      net::run_backbone(g, p, cfg, h, temb, mask, positions);

  const int taps[2] = {(cfg.n_blocks + 1) / 2 - 1, cfg.n_blocks - 1};
  const std::vector<int> qpos{0};
  const std::vector<int> kpos(L, 0);
  Var feat;
  for (int tap = 0; tap < 2; ++tap) {
    Var lat = blocks[static_cast<std::size_t>(taps[tap])];
    Var K = g.matmul(lat, p[pool_name(tap, ".Wk")]);
    Var V = g.matmul(lat, p[pool_name(tap, ".Wv")]);
    Var att = g.attention(p[pool_name(tap, ".q")], K, V, cfg.n_heads, {}, qpos,
                          kpos, /*rope=*/false);
    Var pooled = g.matmul(att, p[pool_name(tap, ".Wo")]);
    feat = tap == 0 ? pooled : g.concat_cols(feat, pooled);
  }
  return g.add_row(g.matmul(feat, p["disc.out.W"]), p["disc.out.b"]);
}

double discriminate(const ParamStore& d_params, const ModelConfig& cfg,
                    const Tensor& mel, const Tensor& cond) {
  Graph g;
  BoundParams p(g, d_params);
  Var out = discriminate_g(g, p, cfg, g.leaf(mel), g.leaf(cond));
  return g.value(out)[0];
}

double g_loss(ParamStore& g_params, const ParamStore& d_params,
              const ModelConfig& cfg, const std::vector<TrainItem>& batch,
              std::uint64_t seed) {
  if (batch.empty()) throw std::invalid_argument("g_loss: empty batch");
  g_params.zero_grads();
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t bins = static_cast<std::size_t>(cfg.mel_bins);
  const std::size_t cd = static_cast<std::size_t>(cfg.cond_dim());
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::uint64_t item_seed = derive_seed(seed, i);
    const PaddedItem prep = pad_and_condition(g_params, cfg, batch[i]);

    Graph g;
    BoundParams gp(g, g_params);
    BoundParams dp(g, d_params);
    std::deque<CachedChunk> cache;
    Var xhat;
    for (std::size_t c = 0; c < prep.n_chunks; ++c) {
      Tensor cond_c({fpc, cd});
      for (std::size_t f = 0; f < fpc; ++f)
        for (std::size_t j = 0; j < cd; ++j)
          cond_c.at(f, j) = prep.cond.at(c * fpc + f, j);
      const Context ctx = stack_context(cache, bins, cd, fpc);
      Rng rng(chunk_seed(item_seed, static_cast<int>(c)));
      Tensor z1 = rng.normal_tensor({fpc, bins});
      Var pred = net::forward_u_g(g, gp, cfg, g.leaf(ctx.frames), ctx.ids,
                                  g.leaf(z1), {static_cast<int>(c)},
                                  g.leaf(ctx.cond), g.leaf(cond_c),
                                  g.scalar(0.0), g.scalar(1.0));
      Var xc = g.sub(g.leaf(std::move(z1)), pred);
      xhat = c == 0 ? xc : g.concat_rows(xhat, xc);
      // later chunks condition on the detached value, like inference does
      CachedChunk e;
      e.index = static_cast<int>(c);
      e.mel = g.value(xc);
      e.cond = std::move(cond_c);
      cache.push_back(std::move(e));
      while (cache.size() > cfg.chunk.history_k) cache.pop_front();
    }
    Var logit = discriminate_g(g, dp, cfg, xhat, g.leaf(prep.cond));
    Var d = g.affine(logit, 1.0, -1.0);
    Var loss = g.sum_all(g.mul(d, d));
    g.backward(loss, inv_b);
    gp.accumulate_grads(g_params);
    total += g.value(loss)[0];
  }
  return total * inv_b;
}

double d_loss(const ParamStore& g_params, ParamStore& d_params,
              const ModelConfig& cfg, const std::vector<TrainItem>& batch,
              std::uint64_t seed) {
  if (batch.empty()) throw std::invalid_argument("d_loss: empty batch");
  d_params.zero_grads();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::uint64_t item_seed = derive_seed(seed, i);
    const PaddedItem prep = pad_and_condition(g_params, cfg, batch[i]);
    const Tensor xhat =
        generate_chunks(g_params, cfg, prep.cond, prep.n_chunks, item_seed);

    Graph g;
    BoundParams dp(g, d_params);
    Var cond = g.leaf(prep.cond);
    Var lr = discriminate_g(g, dp, cfg, g.leaf(prep.mel), cond);
    Var lf = discriminate_g(g, dp, cfg, g.leaf(xhat), cond);
    Var a = g.affine(lr, 1.0, -1.0);
    Var loss = g.add(g.sum_all(g.mul(a, a)), g.sum_all(g.mul(lf, lf)));
    g.backward(loss, inv_b);
    dp.accumulate_grads(d_params);
    total += g.value(loss)[0];
  }
  return total * inv_b;
}

void posttrain(ParamStore& g_params, ParamStore& d_params,
               const ModelConfig& cfg, const std::vector<TrainItem>& data,
               const DaptConfig& run, const DaptMetricSink& sink) {
  if (data.empty()) throw std::invalid_argument("posttrain: empty dataset");
  if (run.batch_size < 1) {
    throw std::invalid_argument("posttrain: batch_size must be >= 1");
  }
  Adam opt_g(run.g_lr);
  Adam opt_d(run.d_lr);
  MfTrainConfig mf_cfg;
  mf_cfg.p_equal = run.p_equal;
  for (long step = 0; step < run.steps; ++step) {
    Rng brng(derive_seed(run.seed, 0xD000000000000000ULL ^
                                       static_cast<std::uint64_t>(step)));
    std::vector<TrainItem> batch;
    batch.reserve(static_cast<std::size_t>(run.batch_size));
    for (int i = 0; i < run.batch_size; ++i)
      batch.push_back(data[brng.uniform_int(data.size())]);

    const std::uint64_t s = static_cast<std::uint64_t>(step);
    DaptStepMetric m;
    m.step = step;
    m.d = d_loss(g_params, d_params, cfg, batch, derive_seed(run.seed, 2 * s));
    opt_d.step(d_params);

    m.g_adv =
        g_loss(g_params, d_params, cfg, batch, derive_seed(run.seed, 2 * s + 1));
    if (run.mf_mix > 0.0) {
      std::vector<Tensor> adv_grads;
      adv_grads.reserve(g_params.size());
      for (const auto& e : g_params.entries()) adv_grads.push_back(e.grad);
      m.mf = mf_loss(g_params, cfg, batch,
                     derive_seed(run.seed, 0xA000000000000000ULL ^ s), mf_cfg);
      std::size_t idx = 0;
      for (auto& e : g_params.entries()) {
        for (std::size_t j = 0; j < e.grad.size(); ++j)
          e.grad[j] = adv_grads[idx][j] + run.mf_mix * e.grad[j];
        ++idx;
      }
    }
    opt_g.step(g_params);

    if (!std::isfinite(m.d) || !std::isfinite(m.g_adv) || !std::isfinite(m.mf)) {
      throw std::runtime_error("posttrain: non-finite loss at step " +
                               std::to_string(step));
    }
    if (sink) sink(m);
  }
}

}  // namespace meanvc
