#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "opotomo/model.hpp"
#include "opotomo/rng.hpp"

namespace opotomo::sde {

using model::BiasSpec;
using model::PhasePoint;

// Scalar schedule, linear between breakpoints, constant after the last one.
class PiecewiseLinear {
 public:
  PiecewiseLinear() = default;
  explicit PiecewiseLinear(double constant) : times_{0.0}, values_{constant} {}
  PiecewiseLinear(std::vector<double> times, std::vector<double> values);

  double operator()(double tau) const;
  double max_value() const;
  const std::vector<double>& times() const { return times_; }
  const std::vector<double>& values() const { return values_; }

 private:
  std::vector<double> times_{0.0};
  std::vector<double> values_{0.0};
};

// Scalar schedule, constant on [t_i, t_{i+1}).
class PiecewiseConstant {
 public:
  PiecewiseConstant() = default;
  explicit PiecewiseConstant(double constant) : times_{0.0}, values_{constant} {}
  PiecewiseConstant(std::vector<double> times, std::vector<double> values);

  double operator()(double tau) const;
  const std::vector<double>& times() const { return times_; }
  const std::vector<double>& values() const { return values_; }

 private:
  std::vector<double> times_{0.0};
  std::vector<double> values_{0.0};
};

// Pump, pump phase, bias and saturation over one run. The integrator works
// in the frame aligned with the current pump phase: a jump of the pump phase
// by delta rotates the state by -delta/2, so sweeping the measurement angle
// theta is a pump-phase step of 2*theta at bias-injection time.
struct Schedule {
  PiecewiseLinear lambda{0.0};
  PiecewiseConstant pump_phase{0.0};
  BiasSpec bias{};
  double saturation_g = 0.0;  // cubic saturation strength, 0 disables

  void validate() const;
  double lambda_max() const { return lambda.max_value(); }
  // Residual extinction-floor amplitude before injection, full amplitude after.
  double bias_amplitude_at(double tau) const;
};

struct IntegratorConfig {
  double dt = 0.005;      // cavity-lifetime units
  double tau_end = 6.0;
  long long record_stride = 1;

  void validate(double lambda_max) const;
  long long n_steps() const {
    return static_cast<long long>(std::floor(tau_end / dt + 1e-9));
  }
};

struct Trajectory {
  std::vector<double> times;
  std::vector<double> x;
  std::vector<double> y;
  std::uint64_t seed = 0;
  int outcome = 0;
  double final_x = 0.0;
  double final_y = 0.0;
};

// Outcome-only ensemble summary.
struct Ensemble {
  std::size_t n_total = 0;
  std::size_t n_positive = 0;
  std::uint64_t base_seed = 0;
  std::vector<std::int8_t> outcomes;
  std::vector<double> final_x;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(double tau, long long trajectory_index = -1);
  double tau() const { return tau_; }
  long long trajectory_index() const { return index_; }

 private:
  double tau_;
  long long index_;
};

inline PhasePoint rotate(PhasePoint p, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return {c * p.re - s * p.im, s * p.re + c * p.im};
}

// One Euler-Maruyama update in the pump-aligned frame.
PhasePoint step(PhasePoint state, double tau, const Schedule& schedule,
                double dt, std::pair<double, double> noise);

inline constexpr double kDivergenceGuard = 1e6;

// Core stepping loop shared by every execution path. `noise()` must yield one
// pair of standard normals per step; `record(k, tau, state)` is called for
// step 0 and each recorded stride. Returns the exact final state.
template <class NoiseFn, class RecordFn>
PhasePoint advance(PhasePoint initial, const Schedule& schedule,
                   const IntegratorConfig& cfg, NoiseFn&& noise,
                   RecordFn&& record) {
  PhasePoint st = initial;
  double frame_phase = schedule.pump_phase(0.0);
  if (frame_phase != 0.0) st = rotate(st, -0.5 * frame_phase);
  record(0LL, 0.0, st);
  const long long n = cfg.n_steps();
  for (long long k = 0; k < n; ++k) {
    const double tau = static_cast<double>(k) * cfg.dt;
    const double phase = schedule.pump_phase(tau);
    if (phase != frame_phase) {
      st = rotate(st, -0.5 * (phase - frame_phase));
      frame_phase = phase;
    }
    st = step(st, tau, schedule, cfg.dt, noise());
    if (!std::isfinite(st.re) || !std::isfinite(st.im) ||
        std::abs(st.re) > kDivergenceGuard || std::abs(st.im) > kDivergenceGuard) {
      throw DivergenceError(tau + cfg.dt);
    }
    if ((k + 1) % cfg.record_stride == 0)
      record(k + 1, static_cast<double>(k + 1) * cfg.dt, st);
  }
  return st;
}

// Full trajectory, deterministic in (initial, schedule, cfg, seed).
Trajectory integrate(PhasePoint initial, const Schedule& schedule,
                     const IntegratorConfig& cfg, std::uint64_t seed);

// Steady-state label: 1 for final X >= 0 (ties map to 1), else 0.
int classify(const Trajectory& traj);

using InitialSampler = std::function<PhasePoint(rng::Engine&)>;

// Runs n independent trajectories. Trajectory i is seeded with
// counter_mix(base_seed, i), so the result is bitwise independent of worker
// count and scheduling. workers <= 0 uses the OpenMP default.
Ensemble run_ensemble(const InitialSampler& initial_sampler,
                      const Schedule& schedule, const IntegratorConfig& cfg,
                      std::size_t n, std::uint64_t base_seed, int workers = 0);

// Plain-loop reference used to validate the parallel kernel.
Ensemble run_ensemble_serial(const InitialSampler& initial_sampler,
                             const Schedule& schedule,
                             const IntegratorConfig& cfg, std::size_t n,
                             std::uint64_t base_seed);

}  // namespace opotomo::sde
