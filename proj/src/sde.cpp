#include "opotomo/sde.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace opotomo::sde {

namespace {

void check_breakpoints(const std::vector<double>& times,
                       const std::vector<double>& values, const char* what) {
  if (times.empty() || times.size() != values.size())
    throw std::invalid_argument(std::string(what) +
                                ": need matching, nonempty breakpoints");
  if (times.front() != 0.0)
    throw std::invalid_argument(std::string(what) +
                                ": first breakpoint must be at tau = 0");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (times[i] < times[i - 1])
      throw std::invalid_argument(std::string(what) +
                                  ": breakpoint times must be nondecreasing");
  for (double v : values)
    if (!std::isfinite(v))
      throw std::invalid_argument(std::string(what) +
                                  ": values must be finite");
}

}  // namespace

PiecewiseLinear::PiecewiseLinear(std::vector<double> times,
                                 std::vector<double> values)
    : times_(std::move(times)), values_(std::move(values)) {
  check_breakpoints(times_, values_, "schedule.lambda");
}

double PiecewiseLinear::operator()(double tau) const {
  if (tau <= times_.front()) return values_.front();
  if (tau >= times_.back()) return values_.back();
  const auto it = std::upper_bound(times_.begin(), times_.end(), tau);
  const std::size_t hi = static_cast<std::size_t>(it - times_.begin());
  const std::size_t lo = hi - 1;
  const double span = times_[hi] - times_[lo];
  if (span <= 0.0) return values_[hi];
  const double w = (tau - times_[lo]) / span;
  return values_[lo] + w * (values_[hi] - values_[lo]);
}

double PiecewiseLinear::max_value() const {
  return *std::max_element(values_.begin(), values_.end());
}

PiecewiseConstant::PiecewiseConstant(std::vector<double> times,
                                     std::vector<double> values)
    : times_(std::move(times)), values_(std::move(values)) {
  check_breakpoints(times_, values_, "schedule.pump_phase");
}

double PiecewiseConstant::operator()(double tau) const {
  if (tau <= times_.front()) {
    // coincident breakpoints at 0 collapse to the last one
    std::size_t i = 0;
    while (i + 1 < times_.size() && times_[i + 1] <= times_.front()) ++i;
    return values_[i];
  }
  const auto it = std::upper_bound(times_.begin(), times_.end(), tau);
  return values_[static_cast<std::size_t>(it - times_.begin()) - 1];
}

void Schedule::validate() const {
  for (double v : lambda.values())
    if (v < 0.0)
      throw std::invalid_argument("schedule.lambda: must be >= 0");
  if (!(saturation_g >= 0.0) || !std::isfinite(saturation_g))
    throw std::invalid_argument("schedule.saturation_g: must be >= 0");
  model::validate(bias);
}

double Schedule::bias_amplitude_at(double tau) const {
  if (tau >= bias.injection_delay - 1e-12) return bias.amplitude;
  return std::copysign(bias.extinction_floor, bias.amplitude);
}

void IntegratorConfig::validate(double lambda_max) const {
  if (!(dt > 0.0) || !std::isfinite(dt))
    throw std::invalid_argument("integrator.dt: must be > 0");
  if (!(tau_end >= dt))
    throw std::invalid_argument("integrator.tau_end: must be >= dt");
  if (record_stride < 1)
    throw std::invalid_argument("integrator.record_stride: must be >= 1");
  if (lambda_max > 1.0 && (lambda_max - 1.0) * dt > 0.05)
    throw std::invalid_argument(
        "integrator.dt: (lambda_max - 1) * dt must be <= 0.05");
}

DivergenceError::DivergenceError(double tau, long long trajectory_index)
    : std::runtime_error(
          trajectory_index < 0
              ? "trajectory diverged at tau = " + std::to_string(tau)
              : "trajectory " + std::to_string(trajectory_index) +
                    " diverged at tau = " + std::to_string(tau)),
      tau_(tau),
      index_(trajectory_index) {}

PhasePoint step(PhasePoint state, double tau, const Schedule& schedule,
                double dt, std::pair<double, double> noise) {
  const double lam = schedule.lambda(tau);
  const double g = schedule.saturation_g;
  const double r2 = state.re * state.re + state.im * state.im;
  double drift_x = (lam - 1.0) * state.re - g * r2 * state.re;
  double drift_y = -(lam + 1.0) * state.im - g * r2 * state.im;
  const double amp = schedule.bias_amplitude_at(tau);
  if (amp != 0.0) {
    const double ang = schedule.bias.phase - 0.5 * schedule.pump_phase(tau);
    drift_x += std::sqrt(2.0) * amp * std::cos(ang);
    drift_y += std::sqrt(2.0) * amp * std::sin(ang);
  }
  const double diffusion = std::sqrt(lam) * std::sqrt(dt);
  return {state.re + drift_x * dt + diffusion * noise.first,
          state.im + drift_y * dt + diffusion * noise.second};
}

Trajectory integrate(PhasePoint initial, const Schedule& schedule,
                     const IntegratorConfig& cfg, std::uint64_t seed) {
  schedule.validate();
  cfg.validate(schedule.lambda_max());
  Trajectory traj;
  traj.seed = seed;
  const long long n_rec = cfg.n_steps() / cfg.record_stride + 1;
  traj.times.reserve(static_cast<std::size_t>(n_rec));
  traj.x.reserve(static_cast<std::size_t>(n_rec));
  traj.y.reserve(static_cast<std::size_t>(n_rec));
  rng::Engine eng(seed);
  const PhasePoint last = advance(
      initial, schedule, cfg, [&] { return eng.next_normal_pair(); },
      [&](long long, double tau, PhasePoint p) {
        traj.times.push_back(tau);
        traj.x.push_back(p.re);
        traj.y.push_back(p.im);
      });
  traj.final_x = last.re;
  traj.final_y = last.im;
  traj.outcome = last.re >= 0.0 ? 1 : 0;
  return traj;
}

int classify(const Trajectory& traj) { return traj.final_x >= 0.0 ? 1 : 0; }

namespace {

struct TrajectoryResult {
  double final_x = 0.0;
  std::int8_t outcome = 0;
  std::int8_t diverged = 0;
  double div_tau = 0.0;
};

TrajectoryResult run_one(const InitialSampler& initial_sampler,
                         const Schedule& schedule, const IntegratorConfig& cfg,
                         std::uint64_t seed) {
  TrajectoryResult r;
  rng::Engine eng(seed);
  const PhasePoint initial = initial_sampler(eng);
  try {
    const PhasePoint last =
        advance(initial, schedule, cfg, [&] { return eng.next_normal_pair(); },
                [](long long, double, PhasePoint) {});
    r.final_x = last.re;
    r.outcome = last.re >= 0.0 ? 1 : 0;
  } catch (const DivergenceError& e) {
    r.diverged = 1;
    r.div_tau = e.tau();
  }
  return r;
}

Ensemble collect(std::vector<TrajectoryResult>& results, std::uint64_t base_seed) {
  Ensemble ens;
  ens.n_total = results.size();
  ens.base_seed = base_seed;
  ens.outcomes.resize(results.size());
  ens.final_x.resize(results.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].diverged)
      throw DivergenceError(results[i].div_tau, static_cast<long long>(i));
    ens.outcomes[i] = results[i].outcome;
    ens.final_x[i] = results[i].final_x;
    ens.n_positive += results[i].outcome;
  }
  return ens;
}

}  // namespace

Ensemble run_ensemble(const InitialSampler& initial_sampler,
                      const Schedule& schedule, const IntegratorConfig& cfg,
                      std::size_t n, std::uint64_t base_seed, int workers) {
  schedule.validate();
  cfg.validate(schedule.lambda_max());
  std::vector<TrajectoryResult> results(n);
#ifdef _OPENMP
  const long long nn = static_cast<long long>(n);
  if (workers > 0) {
#pragma omp parallel for schedule(static) num_threads(workers)
    for (long long i = 0; i < nn; ++i)
      results[static_cast<std::size_t>(i)] =
          run_one(initial_sampler, schedule, cfg,
                  rng::counter_mix(base_seed, static_cast<std::uint64_t>(i)));
  } else {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < nn; ++i)
      results[static_cast<std::size_t>(i)] =
          run_one(initial_sampler, schedule, cfg,
                  rng::counter_mix(base_seed, static_cast<std::uint64_t>(i)));
  }
#else
  (void)workers;
  for (std::size_t i = 0; i < n; ++i)
    results[i] = run_one(initial_sampler, schedule, cfg,
                         rng::counter_mix(base_seed, i));
#endif
  return collect(results, base_seed);
}

Ensemble run_ensemble_serial(const InitialSampler& initial_sampler,
                             const Schedule& schedule,
                             const IntegratorConfig& cfg, std::size_t n,
                             std::uint64_t base_seed) {
  schedule.validate();
  cfg.validate(schedule.lambda_max());
  std::vector<TrajectoryResult> results(n);
  for (std::size_t i = 0; i < n; ++i)
    results[i] = run_one(initial_sampler, schedule, cfg,
                         rng::counter_mix(base_seed, i));
  return collect(results, base_seed);
}

}  // namespace opotomo::sde
