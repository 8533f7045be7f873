#include "meanvc/flow.hpp"

#include <stdexcept>

#include "meanvc/meanflow.hpp"

namespace meanvc {

Tensor flow_interpolate(const Tensor& x, const Tensor& eps, double t) {
  require_same_shape(x, eps, "flow_interpolate");
  if (t < 0.0 || t > 1.0) {
    throw std::invalid_argument("flow_interpolate: t outside [0,1]");
  }
  Tensor z = Tensor::zeros_like(x);
  const double w = 1.0 - t;
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = w * x[i] + t * eps[i];
  return z;
}

Tensor conditional_velocity(const Tensor& x, const Tensor& eps) {
  return sub(eps, x);
}

FlowSample make_flow_sample(Tensor x, Tensor eps, double t) {
  FlowSample s;
  s.z_t = flow_interpolate(x, eps, t);
  s.v_t = conditional_velocity(x, eps);
  s.x = std::move(x);
  s.eps = std::move(eps);
  s.t = t;
  return s;
}

std::vector<double> uniform_schedule(int n) {
  if (n < 1) throw std::invalid_argument("uniform_schedule: n must be >= 1");
  std::vector<double> sched(static_cast<std::size_t>(n) + 1);
  const double dt = 1.0 / static_cast<double>(n);
  for (int i = 0; i <= n; ++i)
    sched[static_cast<std::size_t>(i)] = 1.0 - static_cast<double>(i) * dt;
  sched.front() = 1.0;
  sched.back() = 0.0;
  return sched;
}

Tensor euler_sample(const VelocityFn& f, std::vector<std::size_t> shape,
                    int steps, std::uint64_t seed) {
  if (steps < 1) throw std::invalid_argument("euler_sample: steps must be >= 1");
  const std::vector<double> sched = uniform_schedule(steps);
  Rng rng(seed);
  Tensor z = rng.normal_tensor(std::move(shape));
  for (int i = 0; i < steps; ++i) {
    const double t = sched[static_cast<std::size_t>(i)];
    const double tn = sched[static_cast<std::size_t>(i) + 1];
    Tensor v = f(z, t, t);
    axpy_inplace(z, -(t - tn), v);
  }
  return z;
}

}  // namespace meanvc
