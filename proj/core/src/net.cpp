#include "meanvc/net.hpp"

#include <atomic>
#include <stdexcept>
#include <string>

#include "meanvc/rng.hpp"

namespace meanvc {

void ModelConfig::validate() const {
  if (n_blocks < 1 || hidden < 1 || n_heads < 1 || mel_bins < 1 ||
      bnf_dim < 1 || spk_dim < 1 || timbre_hidden < 1 || timbre_heads < 1 ||
      mlp_ratio < 1 || chunk.frames_per_chunk < 1 || chunk.history_k < 1) {
    throw std::invalid_argument("ModelConfig: all dimensions must be >= 1");
  }
  if (hidden % n_heads != 0 || (hidden / n_heads) % 2 != 0) {
    throw std::invalid_argument(
        "ModelConfig: hidden must split into heads with even head dim");
  }
  if (timbre_hidden % timbre_heads != 0) {
    throw std::invalid_argument(
        "ModelConfig: timbre_hidden not divisible by timbre_heads");
  }
}

namespace net {

namespace {

std::atomic<long> g_forward_count{0};

std::string blk(const char* prefix, int i, const char* suffix) {
  return std::string(prefix) + std::to_string(i) + suffix;
}

Var linear(Graph& g, BoundParams& p, Var x, const std::string& w,
           const std::string& b) {
  return g.add_row(g.matmul(x, p[w]), p[b]);
}

}  // namespace

long forward_count() { return g_forward_count.load(); }
void reset_forward_count() { g_forward_count.store(0); }

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0x1717));
  ParamStore s;
  const std::size_t h = static_cast<std::size_t>(cfg.hidden);
  const std::size_t th = static_cast<std::size_t>(cfg.timbre_hidden);
  const std::size_t mh = h * static_cast<std::size_t>(cfg.mlp_ratio);
  const double sd = 0.02;
  auto W = [&](const std::string& name, std::size_t r, std::size_t c) {
    s.add(name, rng.trunc_normal_tensor({r, c}, sd));
  };
  auto Wz = [&](const std::string& name, std::size_t r, std::size_t c) {
    s.add(name, Tensor({r, c}));
  };
  auto bz = [&](const std::string& name, std::size_t d) {
    s.add(name, Tensor({d}));
  };

  // timbre encoder
  W("timbre.in.W", static_cast<std::size_t>(cfg.bnf_dim), th);
  bz("timbre.in.b", th);
  W("timbre.ref.W", static_cast<std::size_t>(cfg.mel_bins), th);
  bz("timbre.ref.b", th);
  for (int i = 0; i < 2; ++i) {
    s.add(blk("timbre.b", i, ".ln.g"),
          Tensor({th}, std::vector<double>(th, 1.0)));
    bz(blk("timbre.b", i, ".ln.b"), th);
    W(blk("timbre.b", i, ".Wq"), th, th);
    W(blk("timbre.b", i, ".Wk"), th, th);
    W(blk("timbre.b", i, ".Wv"), th, th);
    W(blk("timbre.b", i, ".Wo"), th, th);
    bz(blk("timbre.b", i, ".bo"), th);
  }

  // decoder
  W("dec.in.W", static_cast<std::size_t>(cfg.mel_bins), h);
  bz("dec.in.b", h);
  W("dec.cond.W", static_cast<std::size_t>(cfg.cond_dim()), h);
  W("dec.role", 2, h);
  W("dec.time.W1", h, h);
  bz("dec.time.b1", h);
  W("dec.time.W2", h, h);
  bz("dec.time.b2", h);
  for (int i = 0; i < cfg.n_blocks; ++i) {
    Wz(blk("dec.b", i, ".mod.W"), h, 6 * h);  // modulation starts inactive
    bz(blk("dec.b", i, ".mod.b"), 6 * h);
    W(blk("dec.b", i, ".qkv.W"), h, 3 * h);
    bz(blk("dec.b", i, ".qkv.b"), 3 * h);
    W(blk("dec.b", i, ".attn.W"), h, h);
    bz(blk("dec.b", i, ".attn.b"), h);
    W(blk("dec.b", i, ".mlp.W1"), h, mh);
    bz(blk("dec.b", i, ".mlp.b1"), mh);
    W(blk("dec.b", i, ".mlp.W2"), mh, h);
    bz(blk("dec.b", i, ".mlp.b2"), h);
  }
  Wz("dec.final.mod.W", h, 2 * h);
  bz("dec.final.mod.b", 2 * h);
  Wz("dec.out.W", h, static_cast<std::size_t>(cfg.mel_bins));
  bz("dec.out.b", static_cast<std::size_t>(cfg.mel_bins));
  return s;
}

Var timbre_encode_g(Graph& g, BoundParams& p, const ModelConfig& cfg, Var bnf,
                    Var ref_mel) {
  // note: Graph::value references are invalidated by node pushes; copy the
  // row counts before building anything.
  const std::size_t n_bnf = g.value(bnf).rows();
  const std::size_t n_ref = g.value(ref_mel).rows();
  if (n_bnf == 0 || g.value(bnf).size() == 0) {
    throw std::invalid_argument("timbre_encode: empty bnf input");
  }
  if (n_ref == 0 || g.value(ref_mel).size() == 0) {
    throw std::invalid_argument("timbre_encode: empty reference mel");
  }
  Var q = linear(g, p, bnf, "timbre.in.W", "timbre.in.b");
  Var ref = linear(g, p, ref_mel, "timbre.ref.W", "timbre.ref.b");
  const std::vector<int> qpos(n_bnf, 0);
  const std::vector<int> kpos(n_ref, 0);
  for (int i = 0; i < 2; ++i) {
    Var qn = g.add_row(
        g.mul_row(g.layer_norm(q), p[blk("timbre.b", i, ".ln.g")]),
        p[blk("timbre.b", i, ".ln.b")]);
    Var Q = g.matmul(qn, p[blk("timbre.b", i, ".Wq")]);
    Var K = g.matmul(ref, p[blk("timbre.b", i, ".Wk")]);
    Var V = g.matmul(ref, p[blk("timbre.b", i, ".Wv")]);
    Var att = g.attention(Q, K, V, cfg.timbre_heads, {}, qpos, kpos,
                          /*rope=*/false);
    Var out = g.add_row(g.matmul(att, p[blk("timbre.b", i, ".Wo")]),
                        p[blk("timbre.b", i, ".bo")]);
    q = g.add(q, out);
  }
  return q;
}

Tensor timbre_encode(const ParamStore& params, const ModelConfig& cfg,
                     const Tensor& bnf, const Tensor& ref_mel) {
  Graph g;
  BoundParams p(g, params);
  Var out = timbre_encode_g(g, p, cfg, g.leaf(bnf), g.leaf(ref_mel));
  return g.value(out);
}

Var assemble_condition_g(Graph& g, const ModelConfig& cfg, Var timbre,
                         const Tensor& spk) {
  const Tensor& tv = g.value(timbre);
  if (tv.rows() == 0 || tv.size() == 0) {
    throw std::invalid_argument("assemble_condition: empty timbre sequence");
  }
  if (spk.size() != static_cast<std::size_t>(cfg.spk_dim)) {
    throw std::invalid_argument("assemble_condition: speaker dim mismatch");
  }
  if (tv.cols() != static_cast<std::size_t>(cfg.timbre_hidden)) {
    throw std::invalid_argument("assemble_condition: timbre dim mismatch");
  }
  Tensor rep({tv.rows(), spk.size()});
  for (std::size_t i = 0; i < tv.rows(); ++i)
    for (std::size_t j = 0; j < spk.size(); ++j) rep.at(i, j) = spk[j];
  return g.concat_cols(timbre, g.leaf(std::move(rep)));
}

Tensor assemble_condition(const ModelConfig& cfg, const Tensor& timbre,
                          const Tensor& spk) {
  Graph g;
  Var out = assemble_condition_g(g, cfg, g.leaf(timbre), spk);
  return g.value(out);
}

Var time_conditioning(Graph& g, BoundParams& p, const ModelConfig& cfg, Var r,
                      Var t) {
  const std::size_t h = static_cast<std::size_t>(cfg.hidden);
  Var e = g.add(g.time_embed(r, h), g.time_embed(t, h));
  Var mid = g.silu(linear(g, p, e, "dec.time.W1", "dec.time.b1"));
  return linear(g, p, mid, "dec.time.W2", "dec.time.b2");
}

std::vector<Var> run_backbone(Graph& g, BoundParams& p, const ModelConfig& cfg,
                              Var h, Var temb, const ChunkMask& mask,
                              const std::vector<int>& positions) {
  const std::size_t hd = static_cast<std::size_t>(cfg.hidden);
  if (g.value(h).rows() != mask.side || positions.size() != mask.side) {
    throw std::invalid_argument("run_backbone: mask/layout mismatch");
  }
  Var mod_in = g.silu(temb);
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(cfg.n_blocks));
  for (int i = 0; i < cfg.n_blocks; ++i) {
    Var mod = g.add_row(g.matmul(mod_in, p[blk("dec.b", i, ".mod.W")]),
                        p[blk("dec.b", i, ".mod.b")]);
    Var sh1 = g.slice_cols(mod, 0, hd);
    Var sc1 = g.slice_cols(mod, hd, 2 * hd);
    Var g1 = g.slice_cols(mod, 2 * hd, 3 * hd);
    Var sh2 = g.slice_cols(mod, 3 * hd, 4 * hd);
    Var sc2 = g.slice_cols(mod, 4 * hd, 5 * hd);
    Var g2 = g.slice_cols(mod, 5 * hd, 6 * hd);

    Var a = g.add_row(g.mul_row(g.layer_norm(h), g.affine(sc1, 1.0, 1.0)), sh1);
    Var qkv = g.add_row(g.matmul(a, p[blk("dec.b", i, ".qkv.W")]),
                        p[blk("dec.b", i, ".qkv.b")]);
    Var q = g.slice_cols(qkv, 0, hd);
    Var k = g.slice_cols(qkv, hd, 2 * hd);
    Var v = g.slice_cols(qkv, 2 * hd, 3 * hd);
    Var att = g.attention(q, k, v, cfg.n_heads, mask.allow, positions,
                          positions, /*rope=*/true);
    att = g.add_row(g.matmul(att, p[blk("dec.b", i, ".attn.W")]),
                    p[blk("dec.b", i, ".attn.b")]);
    h = g.add(h, g.mul_row(att, g1));

    Var b = g.add_row(g.mul_row(g.layer_norm(h), g.affine(sc2, 1.0, 1.0)), sh2);
    Var m = g.silu(g.add_row(g.matmul(b, p[blk("dec.b", i, ".mlp.W1")]),
                             p[blk("dec.b", i, ".mlp.b1")]));
    m = g.add_row(g.matmul(m, p[blk("dec.b", i, ".mlp.W2")]),
                  p[blk("dec.b", i, ".mlp.b2")]);
    h = g.add(h, g.mul_row(m, g2));
    outs.push_back(h);
  }
  return outs;
}

Var output_head(Graph& g, BoundParams& p, const ModelConfig& cfg, Var h,
                Var temb) {
  const std::size_t hd = static_cast<std::size_t>(cfg.hidden);
  Var mod = g.add_row(g.matmul(g.silu(temb), p["dec.final.mod.W"]),
                      p["dec.final.mod.b"]);
  Var sh = g.slice_cols(mod, 0, hd);
  Var sc = g.slice_cols(mod, hd, 2 * hd);
  Var y = g.add_row(g.mul_row(g.layer_norm(h), g.affine(sc, 1.0, 1.0)), sh);
  return g.add_row(g.matmul(y, p["dec.out.W"]), p["dec.out.b"]);
}

Var forward_u_g(Graph& g, BoundParams& p, const ModelConfig& cfg,
                Var clean_frames, const std::vector<int>& clean_ids,
                Var noisy_frames, const std::vector<int>& noisy_ids,
                Var cond_clean, Var cond_noisy, Var r, Var t) {
  const double rv = g.value(r)[0], tv = g.value(t)[0];
  if (rv < 0.0 || tv > 1.0 || rv > tv) {
    throw std::invalid_argument("forward_u: need 0 <= r <= t <= 1");
  }
  const std::size_t fpc = cfg.chunk.frames_per_chunk;
  const std::size_t nc = clean_ids.size(), nn = noisy_ids.size();
  if (nn == 0) throw std::invalid_argument("forward_u: no noisy chunks");
  if (g.value(noisy_frames).rows() != nn * fpc ||
      g.value(noisy_frames).cols() != static_cast<std::size_t>(cfg.mel_bins)) {
    throw std::invalid_argument("forward_u: noisy frame shape mismatch");
  }
  if (nc > 0 && (g.value(clean_frames).rows() != nc * fpc ||
                 g.value(clean_frames).cols() !=
                     static_cast<std::size_t>(cfg.mel_bins))) {
    throw std::invalid_argument("forward_u: clean frame shape mismatch");
  }
  if (g.value(cond_noisy).rows() != nn * fpc ||
      g.value(cond_noisy).cols() != static_cast<std::size_t>(cfg.cond_dim())) {
    throw std::invalid_argument("forward_u: condition shape mismatch");
  }
  g_forward_count.fetch_add(1);

  Var role = p["dec.role"];
  Var role_clean = g.slice_rows(role, 0, 1);
  Var role_noisy = g.slice_rows(role, 1, 2);
  Var hn = g.add_row(linear(g, p, noisy_frames, "dec.in.W", "dec.in.b"),
                     role_noisy);
  Var h = hn;
  Var cond = cond_noisy;
  if (nc > 0) {
    Var hc = g.add_row(linear(g, p, clean_frames, "dec.in.W", "dec.in.b"),
                       role_clean);
    h = g.concat_rows(hc, hn);
    cond = g.concat_rows(cond_clean, cond_noisy);
  }
  h = g.add(h, g.matmul(cond, p["dec.cond.W"]));

  ChunkMask mask = build_layout_mask(clean_ids, noisy_ids, cfg.chunk);
  std::vector<int> ids = clean_ids;
  ids.insert(ids.end(), noisy_ids.begin(), noisy_ids.end());
  std::vector<int> positions = frame_positions(ids, fpc);

  Var temb = time_conditioning(g, p, cfg, r, t);
  std::vector<Var> blocks = run_backbone(g, p, cfg, h, temb, mask, positions);
  Var out = output_head(g, p, cfg, blocks.back(), temb);
  if (nc > 0) out = g.slice_rows(out, nc * fpc, (nc + nn) * fpc);
  return out;
}

Tensor forward_u(const ParamStore& params, const ModelConfig& cfg,
                 const Tensor& clean_frames, const std::vector<int>& clean_ids,
                 const Tensor& noisy_frames, const std::vector<int>& noisy_ids,
                 const Tensor& cond_clean, const Tensor& cond_noisy, double r,
                 double t) {
  Graph g;
  BoundParams p(g, params);
  Var out = forward_u_g(g, p, cfg, g.leaf(clean_frames), clean_ids,
                        g.leaf(noisy_frames), noisy_ids, g.leaf(cond_clean),
                        g.leaf(cond_noisy), g.scalar(r), g.scalar(t));
  return g.value(out);
}

VelocityFn make_chunk_velocity_fn(const ParamStore& params,
                                  const ModelConfig& cfg,
                                  const Tensor& clean_frames,
                                  const std::vector<int>& clean_ids,
                                  int noisy_id, const Tensor& cond_clean,
                                  const Tensor& cond_noisy) {
  return [&params, cfg, clean_frames, clean_ids, noisy_id, cond_clean,
          cond_noisy](const Tensor& z, double r, double t) {
    return forward_u(params, cfg, clean_frames, clean_ids, z, {noisy_id},
                     cond_clean, cond_noisy, r, t);
  };
}

}  // namespace net
}  // namespace meanvc
