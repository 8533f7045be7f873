#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "meanvc/meanflow.hpp"
#include "meanvc/net.hpp"

namespace meanvc {

// Least-squares adversarial post-training over a pretrained 1-NFE generator.
// The discriminator reuses the decoder backbone architecture (weights start
// as a copy of the generator's) with cross-attention pooling heads tapping
// the midpoint and final blocks.
struct DaptConfig {
  long steps = 0;
  int batch_size = 2;
  double g_lr = 1e-5;
  double d_lr = 1e-5;
  double mf_mix = 0.0;  // weight of the mean-flow regression term in G's loss
  double p_equal = 0.25;
  std::uint64_t seed = 0;
};

// Deep-copies the generator's decoder parameters and adds the pooling heads
// and scalar output projection (disc.*).
ParamStore init_discriminator(const ParamStore& g_params,
                              const ModelConfig& cfg, std::uint64_t seed);

// Scalar realness score of a mel sequence (length a multiple of
// frames_per_chunk) under per-frame conditioning. Each chunk attends to its
// own frames and up to history_k preceding chunks.
Var discriminate_g(Graph& g, BoundParams& p, const ModelConfig& cfg, Var mel,
                   Var cond);
double discriminate(const ParamStore& d_params, const ModelConfig& cfg,
                    const Tensor& mel, const Tensor& cond);

// Generator adversarial loss E[(D(G(eps, c), c) - 1)^2]. Samples are drawn
// chunk-autoregressively with the cached context detached, so gradients reach
// the generator through the current chunk only. Zeroes and fills g_params
// gradients; d_params stay untouched.
double g_loss(ParamStore& g_params, const ParamStore& d_params,
              const ModelConfig& cfg, const std::vector<TrainItem>& batch,
              std::uint64_t seed);

// Discriminator loss E[(D(x, c) - 1)^2] + E[D(G(eps, c), c)^2] with the fake
// branch fully detached. Zeroes and fills d_params gradients.
double d_loss(const ParamStore& g_params, ParamStore& d_params,
              const ModelConfig& cfg, const std::vector<TrainItem>& batch,
              std::uint64_t seed);

struct DaptStepMetric {
  long step = 0;
  double d = 0.0;
  double g_adv = 0.0;
  double mf = 0.0;
};

using DaptMetricSink = std::function<void(const DaptStepMetric&)>;

// Alternating D/G updates with Adam. Throws on a non-finite loss. steps == 0
// leaves both stores unchanged.
void posttrain(ParamStore& g_params, ParamStore& d_params,
               const ModelConfig& cfg, const std::vector<TrainItem>& data,
               const DaptConfig& run, const DaptMetricSink& sink = {});

}  // namespace meanvc
