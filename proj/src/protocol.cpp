#include "opotomo/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace opotomo::protocol {

void PreparationSpec::validate() const {
  switch (kind) {
    case Kind::vacuum_point:
      return;
    case Kind::analytic_gaussian:
      model::validate(gaussian);
      return;
    case Kind::sde_relaxation:
      if (!(lambda_prep >= 0.0) || lambda_prep >= 1.0)
        throw std::invalid_argument(
            "preparation.lambda_prep: must be in [0, 1)");
      if (!(relax_time > 0.0))
        throw std::invalid_argument("preparation.relax_time: must be > 0");
      if (!(relax_dt > 0.0) || relax_dt > relax_time)
        throw std::invalid_argument(
            "preparation.relax_dt: must be in (0, relax_time]");
      return;
  }
  throw std::invalid_argument("preparation.kind: unknown");
}

std::string PreparationSpec::label() const {
  std::ostringstream os;
  switch (kind) {
    case Kind::vacuum_point:
      return "vacuum_point";
    case Kind::analytic_gaussian:
      os << "analytic_gaussian(mean=" << gaussian.mean.re << ","
         << gaussian.mean.im << ";var=" << gaussian.var_major << ","
         << gaussian.var_minor << ";axis=" << gaussian.axis_angle << ")";
      return os.str();
    case Kind::sde_relaxation:
      os << "sde_relaxation(lambda_prep=" << lambda_prep
         << ";relax_time=" << relax_time << ")";
      return os.str();
  }
  return "unknown";
}

double PreparationSpec::variance_along(double theta) const {
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  switch (kind) {
    case Kind::vacuum_point:
      return 0.0;
    case Kind::analytic_gaussian: {
      const double ca = std::cos(theta - gaussian.axis_angle);
      const double sa = std::sin(theta - gaussian.axis_angle);
      return gaussian.var_major * ca * ca + gaussian.var_minor * sa * sa;
    }
    case Kind::sde_relaxation: {
      const double vx = model::relaxed_quadrature_variance(lambda_prep, true);
      const double vy = model::relaxed_quadrature_variance(lambda_prep, false);
      return vx * c * c + vy * s * s;
    }
  }
  return 0.0;
}

sde::InitialSampler prepare_initial_sampler(const PreparationSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case PreparationSpec::Kind::vacuum_point:
      return [](rng::Engine&) { return model::PhasePoint{0.0, 0.0}; };
    case PreparationSpec::Kind::analytic_gaussian: {
      const model::GaussianStateSpec g = spec.gaussian;
      const double sM = std::sqrt(g.var_major);
      const double sm = std::sqrt(g.var_minor);
      const double c = std::cos(g.axis_angle);
      const double s = std::sin(g.axis_angle);
      return [g, sM, sm, c, s](rng::Engine& eng) {
        const auto [n1, n2] = eng.next_normal_pair();
        const double u = sM * n1;
        const double v = sm * n2;
        return model::PhasePoint{g.mean.re + c * u - s * v,
                                 g.mean.im + s * u + c * v};
      };
    }
    case PreparationSpec::Kind::sde_relaxation: {
      sde::Schedule sched;
      sched.lambda = sde::PiecewiseLinear(spec.lambda_prep);
      sde::IntegratorConfig cfg;
      cfg.dt = spec.relax_dt;
      cfg.tau_end = spec.relax_time;
      sched.validate();
      cfg.validate(sched.lambda_max());
      return [sched, cfg](rng::Engine& eng) {
        return sde::advance(
            model::PhasePoint{0.0, 0.0}, sched, cfg,
            [&eng] { return eng.next_normal_pair(); },
            [](long long, double, model::PhasePoint) {});
      };
    }
  }
  throw std::invalid_argument("preparation.kind: unknown");
}

std::vector<model::PhasePoint> draw_samples(const PreparationSpec& spec,
                                            std::size_t n, std::uint64_t seed) {
  const sde::InitialSampler sampler = prepare_initial_sampler(spec);
  std::vector<model::PhasePoint> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    rng::Engine eng(rng::counter_mix(seed, i));
    out[i] = sampler(eng);
  }
  return out;
}

WilsonInterval wilson_interval(std::size_t n_positive, std::size_t n,
                               double z) {
  if (n == 0) throw std::invalid_argument("wilson_interval: n must be > 0");
  if (n_positive > n)
    throw std::invalid_argument("wilson_interval: n_positive must be <= n");
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(n_positive) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double center = (p + z2 / (2.0 * nn)) / denom;
  const double half =
      z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
  // The exact interval always contains p; keep that under rounding.
  return {std::min(p, std::max(0.0, center - half)),
          std::max(p, std::min(1.0, center + half))};
}

void BiasProbabilityCurve::validate() const {
  if (points.empty())
    throw std::invalid_argument("curve.points: must be nonempty");
  for (std::size_t i = 0; i < points.size(); ++i) {
    const CurvePoint& pt = points[i];
    if (!(pt.p_hat >= 0.0 && pt.p_hat <= 1.0))
      throw std::invalid_argument("curve.points: p_hat must be in [0, 1]");
    if (!(pt.ci_low <= pt.p_hat && pt.p_hat <= pt.ci_high))
      throw std::invalid_argument("curve.points: ci must bracket p_hat");
    if (i > 0 && !(points[i - 1].b < pt.b))
      throw std::invalid_argument("curve.points: b must be strictly increasing");
  }
}

void SweepPlan::validate() const {
  prep.validate();
  if (!(lambda > 1.0))
    throw std::invalid_argument("plan.lambda: must be > 1 (above threshold)");
  if (n_per_point < 100)
    throw std::invalid_argument("plan.n_per_point: must be >= 100");
  if (theta_grid.empty())
    throw std::invalid_argument("plan.theta_grid: must be nonempty");
  for (std::size_t i = 0; i < theta_grid.size(); ++i) {
    if (!(theta_grid[i] >= 0.0) || theta_grid[i] >= std::numbers::pi)
      throw std::invalid_argument("plan.theta_grid: angles must lie in [0, pi)");
    if (i > 0 && !(theta_grid[i - 1] < theta_grid[i]))
      throw std::invalid_argument(
          "plan.theta_grid: angles must be strictly increasing");
  }
  if (tau0_grid.empty())
    throw std::invalid_argument("plan.tau0_grid: must be nonempty");
  for (double t : tau0_grid)
    if (t < 0.0)
      throw std::invalid_argument("plan.tau0_grid: delays must be >= 0");
  for (std::size_t i = 1; i < b_grid.size(); ++i)
    if (!(b_grid[i - 1] < b_grid[i]))
      throw std::invalid_argument("plan.b_grid: must be strictly increasing");
  if (b_grid.empty() && b_auto_points < 5)
    throw std::invalid_argument("plan.b_auto_points: must be >= 5");
  if (b_grid.empty() && !(b_auto_span > 0.0))
    throw std::invalid_argument("plan.b_auto_span: must be > 0");
  if (extinction_floor < 0.0)
    throw std::invalid_argument("plan.extinction_floor: must be >= 0");
  if (!(options.dt > 0.0))
    throw std::invalid_argument("plan.options.dt: must be > 0");
}

double default_tau_end(double lambda, double saturation_g) {
  if (saturation_g > 0.0) return 20.0;
  return std::max(6.0 / (lambda - 1.0), 6.0);
}

double bifurcation_onset_estimate(double lambda, double saturation_g) {
  if (!(lambda > 1.0))
    throw std::invalid_argument("lambda: must be > 1 (above threshold)");
  if (!(saturation_g > 0.0))
    throw std::invalid_argument("saturation_g: must be > 0");
  // Amplified vacuum variance lambda e^(2(lambda-1)tau)/(2(lambda-1)) reaching
  // the fixed-point scale (lambda-1)/g.
  const double ratio =
      2.0 * (lambda - 1.0) * (lambda - 1.0) / (saturation_g * lambda);
  return std::max(0.0, std::log(ratio) / (2.0 * (lambda - 1.0)));
}

double predicted_measured_sigma_b(const PreparationSpec& prep, double theta,
                                  double lambda, double tau0,
                                  bool rotate_at_injection) {
  if (!(lambda > 1.0))
    throw std::invalid_argument("lambda: must be > 1 (above threshold)");
  const double kernel = lambda / (2.0 * (lambda - 1.0));
  double v_meas;
  if (rotate_at_injection) {
    const double grow = std::exp(2.0 * (lambda - 1.0) * tau0);
    const double decay = std::exp(-2.0 * (lambda + 1.0) * tau0);
    const double vx = prep.variance_along(0.0) * grow +
                      lambda * (grow - 1.0) / (2.0 * (lambda - 1.0));
    const double vy = prep.variance_along(std::numbers::pi / 2.0) * decay +
                      lambda * (1.0 - decay) / (2.0 * (lambda + 1.0));
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    v_meas = c * c * vx + s * s * vy + kernel;
  } else {
    const double grow = std::exp(2.0 * (lambda - 1.0) * tau0);
    v_meas = grow * (prep.variance_along(theta) + kernel);
  }
  return (lambda - 1.0) / std::sqrt(2.0) * std::sqrt(v_meas);
}

std::vector<double> default_b_grid(const PreparationSpec& prep, double theta,
                                   double lambda, double tau0, int points,
                                   double span, bool rotate_at_injection) {
  if (points < 5)
    throw std::invalid_argument("plan.b_auto_points: must be >= 5");
  const double half = span * predicted_measured_sigma_b(prep, theta, lambda,
                                                        tau0, rotate_at_injection);
  std::vector<double> grid(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i)
    grid[static_cast<std::size_t>(i)] =
        -half + 2.0 * half * static_cast<double>(i) /
                    static_cast<double>(points - 1);
  return grid;
}

namespace {

sde::Schedule build_measurement_schedule(const model::BiasSpec& bias,
                                         double theta, double lambda_meas,
                                         const MeasureOptions& options) {
  sde::Schedule sched;
  if (options.rise_time > 0.0)
    sched.lambda = sde::PiecewiseLinear({0.0, options.rise_time},
                                        {options.lambda_start, lambda_meas});
  else
    sched.lambda = sde::PiecewiseLinear(lambda_meas);
  if (options.rotate_at_injection && bias.injection_delay > 0.0)
    sched.pump_phase = sde::PiecewiseConstant(
        {0.0, bias.injection_delay}, {0.0, 2.0 * theta});
  else
    sched.pump_phase = sde::PiecewiseConstant(2.0 * theta);
  sched.bias = bias;
  sched.saturation_g = options.saturation_g;
  return sched;
}

}  // namespace

ProbabilityEstimate measure_probability(const PreparationSpec& prep,
                                        const model::BiasSpec& bias,
                                        double theta, double lambda_meas,
                                        std::size_t n, std::uint64_t seed,
                                        const MeasureOptions& options) {
  prep.validate();
  model::validate(bias);
  if (!(lambda_meas > 1.0))
    throw std::invalid_argument("lambda_meas: must be > 1 (above threshold)");
  if (n < 100) throw std::invalid_argument("n: must be >= 100");
  const sde::Schedule sched =
      build_measurement_schedule(bias, theta, lambda_meas, options);
  sde::IntegratorConfig cfg;
  cfg.dt = options.dt;
  // Extending the default by the full delay would over-amplify at large
  // lambda and trip the divergence guard; only guarantee the settling time
  // after injection.
  cfg.tau_end =
      options.tau_end > 0.0
          ? options.tau_end
          : std::max(default_tau_end(lambda_meas, options.saturation_g),
                     bias.injection_delay + 6.0 / (lambda_meas - 1.0));
  const sde::Ensemble ens =
      sde::run_ensemble(prepare_initial_sampler(prep), sched, cfg, n, seed,
                        options.workers);
  ProbabilityEstimate est;
  est.n = ens.n_total;
  est.n_positive = ens.n_positive;
  est.p_hat = static_cast<double>(ens.n_positive) / static_cast<double>(n);
  const WilsonInterval ci = wilson_interval(ens.n_positive, n);
  est.ci_low = ci.low;
  est.ci_high = ci.high;
  return est;
}

BiasProbabilityCurve sweep_bias(const SweepPlan& plan, std::size_t theta_index,
                                std::size_t tau0_index) {
  plan.validate();
  if (theta_index >= plan.theta_grid.size())
    throw std::invalid_argument("theta_index: out of range");
  if (tau0_index >= plan.tau0_grid.size())
    throw std::invalid_argument("tau0_index: out of range");
  const double theta = plan.theta_grid[theta_index];
  const double tau0 = plan.tau0_grid[tau0_index];
  const std::vector<double> grid =
      plan.b_grid.empty()
          ? default_b_grid(plan.prep, theta, plan.lambda, tau0,
                           plan.b_auto_points, plan.b_auto_span,
                           plan.options.rotate_at_injection)
          : plan.b_grid;
  const std::uint64_t curve_seed =
      rng::counter_mix(rng::counter_mix(plan.seed, theta_index), tau0_index);

  BiasProbabilityCurve curve;
  curve.theta = theta;
  curve.tau0 = tau0;
  curve.lambda = plan.lambda;
  curve.saturation_g = plan.options.saturation_g;
  curve.n_per_point = plan.n_per_point;
  curve.seed = curve_seed;
  curve.prep_label = plan.prep.label();
  curve.points.reserve(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    model::BiasSpec bias;
    bias.amplitude = grid[i];
    bias.injection_delay = tau0;
    bias.phase = theta + plan.bias_phase_offset;
    bias.extinction_floor = plan.extinction_floor;
    const ProbabilityEstimate est =
        measure_probability(plan.prep, bias, theta, plan.lambda,
                            plan.n_per_point, rng::counter_mix(curve_seed, i),
                            plan.options);
    curve.points.push_back(
        {grid[i], est.p_hat, est.n, est.ci_low, est.ci_high});
  }
  curve.validate();
  return curve;
}

std::vector<BiasProbabilityCurve> sweep_phase(const SweepPlan& plan) {
  plan.validate();
  std::vector<BiasProbabilityCurve> curves;
  curves.reserve(plan.theta_grid.size());
  for (std::size_t i = 0; i < plan.theta_grid.size(); ++i)
    curves.push_back(sweep_bias(plan, i, 0));
  return curves;
}

std::vector<BiasProbabilityCurve> dynamics_scan(const SweepPlan& plan) {
  plan.validate();
  if (plan.prep.kind != PreparationSpec::Kind::vacuum_point)
    throw std::invalid_argument("plan.prep: dynamics scan requires vacuum");
  if (plan.options.saturation_g != 0.0)
    throw std::invalid_argument(
        "plan.options.saturation_g: dynamics scan requires a linear stage");
  std::vector<BiasProbabilityCurve> curves;
  curves.reserve(plan.tau0_grid.size());
  for (std::size_t i = 0; i < plan.tau0_grid.size(); ++i)
    curves.push_back(sweep_bias(plan, 0, i));
  return curves;
}

}  // namespace opotomo::protocol
