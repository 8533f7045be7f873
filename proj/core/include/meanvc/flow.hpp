#pragma once

#include <cstdint>
#include <vector>

#include "meanvc/net.hpp"
#include "meanvc/tensor.hpp"

namespace meanvc {

// One point on the linear noise-data path.
struct FlowSample {
  Tensor x;
  Tensor eps;
  double t = 0.0;
  Tensor z_t;  // (1-t)*x + t*eps
  Tensor v_t;  // eps - x
};

Tensor flow_interpolate(const Tensor& x, const Tensor& eps, double t);
Tensor conditional_velocity(const Tensor& x, const Tensor& eps);
FlowSample make_flow_sample(Tensor x, Tensor eps, double t);

// One conditional training sequence: bnf and mel share length.
struct TrainItem {
  Tensor bnf;      // [L, bnf_dim]
  Tensor spk;      // [spk_dim]
  Tensor ref_mel;  // [R, mel_bins]
  Tensor mel;      // [L, mel_bins]
};

// CFM objective with t ~ U(0,1): mean over batch and non-pad frames of
// ||f(t, z_t | cond) - v_t||^2. Fills the store's gradient accumulators and
// returns the loss.
double cfm_loss(ParamStore& params, const ModelConfig& cfg,
                const std::vector<TrainItem>& batch, std::uint64_t seed);

// Euler ODE sampler from t=1 (seeded standard normal) down to t=0, with the
// model evaluated in instantaneous-velocity mode (r = t).
Tensor euler_sample(const VelocityFn& f, std::vector<std::size_t> shape,
                    int steps, std::uint64_t seed);

}  // namespace meanvc
