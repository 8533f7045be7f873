#pragma once

#include <cmath>
#include <vector>

#include "meanvc/flow.hpp"
#include "meanvc/net.hpp"
#include "meanvc/rng.hpp"

namespace meanvc::testutil {

// Small network that still exercises every layer type.
inline ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_blocks = 2;
  cfg.hidden = 16;
  cfg.n_heads = 2;
  cfg.mel_bins = 4;
  cfg.bnf_dim = 6;
  cfg.spk_dim = 4;
  cfg.timbre_hidden = 8;
  cfg.timbre_heads = 2;
  cfg.mlp_ratio = 2;
  cfg.chunk.frames_per_chunk = 2;
  cfg.chunk.history_k = 2;
  return cfg;
}

inline double rel_err(double got, double want) {
  const double denom = std::max(std::fabs(want), 1e-8);
  return std::fabs(got - want) / denom;
}

inline double max_rel_err(const Tensor& got, const Tensor& want,
                          double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max(std::fabs(want[i]), floor);
    worst = std::max(worst, std::fabs(got[i] - want[i]) / denom);
  }
  return worst;
}

inline TrainItem random_item(const ModelConfig& cfg, std::size_t len,
                             std::uint64_t seed) {
  Rng rng(seed);
  TrainItem item;
  item.bnf = rng.normal_tensor({len, static_cast<std::size_t>(cfg.bnf_dim)});
  item.spk = rng.normal_tensor({static_cast<std::size_t>(cfg.spk_dim)});
  item.ref_mel =
      rng.normal_tensor({5, static_cast<std::size_t>(cfg.mel_bins)});
  item.mel = rng.normal_tensor({len, static_cast<std::size_t>(cfg.mel_bins)});
  return item;
}

}  // namespace meanvc::testutil
