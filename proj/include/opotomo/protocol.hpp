#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "opotomo/model.hpp"
#include "opotomo/sde.hpp"

namespace opotomo::protocol {

struct PreparationSpec {
  enum class Kind { vacuum_point, analytic_gaussian, sde_relaxation };
  Kind kind = Kind::vacuum_point;
  model::GaussianStateSpec gaussian{};  // analytic_gaussian only
  double lambda_prep = 0.8;             // sde_relaxation only, in [0,1)
  double relax_time = 20.0;
  double relax_dt = 0.005;

  void validate() const;
  std::string label() const;
  // Phase-space variance of the prepared ensemble along quadrature angle theta.
  double variance_along(double theta) const;
};

sde::InitialSampler prepare_initial_sampler(const PreparationSpec& spec);
std::vector<model::PhasePoint> draw_samples(const PreparationSpec& spec,
                                            std::size_t n, std::uint64_t seed);

struct WilsonInterval {
  double low = 0.0;
  double high = 1.0;
};

// 95% score interval by default.
WilsonInterval wilson_interval(std::size_t n_positive, std::size_t n,
                               double z = 1.959963984540054);

struct ProbabilityEstimate {
  double p_hat = 0.0;
  double ci_low = 0.0;
  double ci_high = 1.0;
  std::size_t n = 0;
  std::size_t n_positive = 0;
};

struct CurvePoint {
  double b = 0.0;
  double p_hat = 0.0;
  std::size_t n = 0;
  double ci_low = 0.0;
  double ci_high = 1.0;
};

struct BiasProbabilityCurve {
  double theta = 0.0;
  double tau0 = 0.0;
  double lambda = 0.0;
  double saturation_g = 0.0;
  std::size_t n_per_point = 0;
  std::uint64_t seed = 0;
  std::string prep_label;
  std::vector<CurvePoint> points;

  void validate() const;
};

struct MeasureOptions {
  double saturation_g = 0.0;
  double rise_time = 0.0;     // pump ramp duration; 0 switches on instantly
  double lambda_start = 0.0;  // ramp origin when rise_time > 0
  double dt = 0.005;
  // <= 0 selects the default horizon, extended so at least 6/(lambda - 1)
  // lifetimes follow the bias injection.
  double tau_end = 0.0;
  // When set, the pump phase steps to 2*theta at bias injection instead of
  // holding it from the start, so the pre-injection gain acts on the lab-X
  // quadrature rather than on the measured one.
  bool rotate_at_injection = false;
  int workers = 0;
};

struct SweepPlan {
  PreparationSpec prep{};
  double lambda = 2.0;
  MeasureOptions options{};
  double extinction_floor = 0.0;
  double bias_phase_offset = 0.0;  // bias angle relative to the measured quadrature
  std::vector<double> b_grid;      // empty selects the default grid per (theta, tau0)
  int b_auto_points = 21;
  double b_auto_span = 4.0;  // half-span in predicted transition widths
  std::vector<double> theta_grid{0.0};
  std::vector<double> tau0_grid{0.0};
  std::size_t n_per_point = 1000;
  std::uint64_t seed = 0;

  void validate() const;
};

// Horizon long enough that sign outcomes are settled.
double default_tau_end(double lambda, double saturation_g);

// Delay beyond which amplified vacuum noise reaches the saturation scale and
// the erf curve model degrades.
double bifurcation_onset_estimate(double lambda, double saturation_g);

// Transition width of the ideal (g = 0) bias-probability curve for this
// preparation, in bias units. Exact for axis-aligned preparations.
double predicted_measured_sigma_b(const PreparationSpec& prep, double theta,
                                  double lambda, double tau0,
                                  bool rotate_at_injection = false);

std::vector<double> default_b_grid(const PreparationSpec& prep, double theta,
                                   double lambda, double tau0, int points,
                                   double span, bool rotate_at_injection = false);

// Runs n trajectories with the initial sampler rotated by -theta and the bias
// injected at bias.injection_delay; p_hat counts positive-lobe outcomes.
ProbabilityEstimate measure_probability(const PreparationSpec& prep,
                                        const model::BiasSpec& bias,
                                        double theta, double lambda_meas,
                                        std::size_t n, std::uint64_t seed,
                                        const MeasureOptions& options = {});

BiasProbabilityCurve sweep_bias(const SweepPlan& plan, std::size_t theta_index,
                                std::size_t tau0_index);

// One curve per angle at the plan's first delay (raw sinogram input).
std::vector<BiasProbabilityCurve> sweep_phase(const SweepPlan& plan);

// One curve per delay at the plan's first angle; vacuum prep, linear stage.
std::vector<BiasProbabilityCurve> dynamics_scan(const SweepPlan& plan);

}  // namespace opotomo::protocol
