#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "meanvc/autodiff.hpp"
#include "meanvc/chunking.hpp"
#include "meanvc/param_store.hpp"

namespace meanvc {

struct ModelConfig {
  int n_blocks = 4;
  int hidden = 64;
  int n_heads = 2;
  int mel_bins = 8;
  int bnf_dim = 16;
  int spk_dim = 8;
  int timbre_hidden = 32;
  int timbre_heads = 4;
  int mlp_ratio = 2;
  ChunkSpec chunk;

  int cond_dim() const { return timbre_hidden + spk_dim; }
  void validate() const;
};

namespace net {

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

// Timbre encoder: stacked cross-attention with bnf frames as queries and the
// reference mel as keys/values; output length equals the bnf length.
Var timbre_encode_g(Graph& g, BoundParams& p, const ModelConfig& cfg, Var bnf,
                    Var ref_mel);
Tensor timbre_encode(const ParamStore& params, const ModelConfig& cfg,
                     const Tensor& bnf, const Tensor& ref_mel);

// Per-frame concat of timbre features with the repeated speaker embedding.
Var assemble_condition_g(Graph& g, const ModelConfig& cfg, Var timbre,
                         const Tensor& spk);
Tensor assemble_condition(const ModelConfig& cfg, const Tensor& timbre,
                          const Tensor& spk);

// DiT backbone over an embedded frame sequence; returns the post-residual
// hidden state after each block.
std::vector<Var> run_backbone(Graph& g, BoundParams& p, const ModelConfig& cfg,
                              Var h, Var temb, const ChunkMask& mask,
                              const std::vector<int>& positions);

// Time-pair conditioning vector from sinusoidal embeddings of r and t.
Var time_conditioning(Graph& g, BoundParams& p, const ModelConfig& cfg, Var r,
                      Var t);

// Final layer-norm + modulation + projection to mel bins.
Var output_head(Graph& g, BoundParams& p, const ModelConfig& cfg, Var h,
                Var temb);

// Conditional velocity network over the clean-then-noisy chunk layout.
// clean_frames: [n_clean*fpc, bins]; noisy_frames: [n_noisy*fpc, bins];
// cond_*: matching per-frame conditioning. Returns the prediction for the
// noisy half only. Requires 0 <= r <= t <= 1.
Var forward_u_g(Graph& g, BoundParams& p, const ModelConfig& cfg,
                Var clean_frames, const std::vector<int>& clean_ids,
                Var noisy_frames, const std::vector<int>& noisy_ids,
                Var cond_clean, Var cond_noisy, Var r, Var t);

Tensor forward_u(const ParamStore& params, const ModelConfig& cfg,
                 const Tensor& clean_frames, const std::vector<int>& clean_ids,
                 const Tensor& noisy_frames, const std::vector<int>& noisy_ids,
                 const Tensor& cond_clean, const Tensor& cond_noisy, double r,
                 double t);

// Network evaluation counter, used to assert the 1-NFE contract.
long forward_count();
void reset_forward_count();

}  // namespace net

// f(z, r, t) for a fixed conditioning context, the shape samplers consume.
using VelocityFn = std::function<Tensor(const Tensor& z, double r, double t)>;

namespace net {

// Velocity closure for one noisy chunk with a fixed clean-chunk context.
VelocityFn make_chunk_velocity_fn(const ParamStore& params,
                                  const ModelConfig& cfg,
                                  const Tensor& clean_frames,
                                  const std::vector<int>& clean_ids,
                                  int noisy_id, const Tensor& cond_clean,
                                  const Tensor& cond_noisy);

}  // namespace net
}  // namespace meanvc
