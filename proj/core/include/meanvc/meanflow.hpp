#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "meanvc/flow.hpp"
#include "meanvc/net.hpp"
#include "meanvc/rng.hpp"

namespace meanvc {

struct TimePair {
  double r = 0.0;
  double t = 0.0;
};

struct MfTrainConfig {
  double p_equal = 0.25;  // probability of forcing r = t
  int batch_size = 4;
  double lr = 1e-3;
  long steps = 0;
};

// With probability p_equal: r = t ~ U(0,1); otherwise (min, max) of two
// independent U(0,1) draws. The coin is only consumed for 0 < p_equal < 1 so
// degenerate configs share draw counts with the plain CFM path.
TimePair sample_time_pair(Rng& rng, const MfTrainConfig& cfg);

// Average-velocity regression target: one JVP of the network at (z_t, r, t)
// along (v_t, 0, 1), then u_tgt = v_t - (t-r) * tangent. The result is a
// detached tensor; gradients never flow through it.
Tensor mf_target(const ParamStore& params, const ModelConfig& cfg,
                 const Tensor& clean_frames, const std::vector<int>& clean_ids,
                 const Tensor& z_t, const std::vector<int>& noisy_ids,
                 const Tensor& cond_clean, const Tensor& cond_noisy,
                 TimePair pair, const Tensor& v_t);

// Mean-flows objective over a batch; fills gradient accumulators and returns
// the loss. When target_params is given, the stop-gradient branch is
// evaluated with those parameters instead (finite-difference oracle hook).
double mf_loss(ParamStore& params, const ModelConfig& cfg,
               const std::vector<TrainItem>& batch, std::uint64_t seed,
               const MfTrainConfig& cfg_mf,
               const ParamStore* target_params = nullptr);

// z_1 ~ seeded standard normal; returns z_1 - f(z_1, 0, 1). One evaluation.
Tensor one_nfe_sample(const VelocityFn& f, std::vector<std::size_t> shape,
                      std::uint64_t seed);

// Repeated application of z_r = z_t - (t-r) f(z_t, r, t) over a strictly
// descending schedule from 1 to 0.
Tensor multi_interval_sample(const VelocityFn& f,
                             std::vector<std::size_t> shape,
                             const std::vector<double>& schedule,
                             std::uint64_t seed);

// n+1 uniformly spaced times from 1 down to 0, bit-matching euler_sample's
// internal step times.
std::vector<double> uniform_schedule(int n);

// Training driver shared by the CLI and tests.
struct TrainRunConfig {
  enum class Objective { kMeanFlow, kCfm };
  Objective objective = Objective::kMeanFlow;
  long steps = 1000;
  int batch_size = 4;
  double lr = 1e-3;
  double p_equal = 0.25;
  std::uint64_t seed = 0;
};

struct StepMetric {
  long step = 0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

using MetricSink = std::function<void(const StepMetric&)>;

void train_loop(ParamStore& params, const ModelConfig& cfg,
                const std::vector<TrainItem>& data, const TrainRunConfig& run,
                const MetricSink& sink = {});

}  // namespace meanvc
