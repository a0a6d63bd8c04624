#pragma once

#include <cmath>

namespace opotomo::model {

// Point in dimensionless quadrature phase space.
struct PhasePoint {
  double re = 0.0;
  double im = 0.0;
};

struct PumpParams {
  double lambda = 0.0;  // pump strength relative to threshold (1 = threshold)
  double theta = 0.0;   // measurement/pump-phase angle, [0, pi)
};

// Weak coherent field injected into the cavity. Amplitudes are dimensionless,
// times are in cavity lifetimes.
struct BiasSpec {
  double amplitude = 0.0;
  double injection_delay = 0.0;
  double phase = 0.0;
  double extinction_floor = 0.0;  // residual amplitude present before injection
};

// Normalized 2D Gaussian density with principal axes rotated by axis_angle.
struct GaussianStateSpec {
  PhasePoint mean{};
  double var_major = 0.5;
  double var_minor = 0.5;
  double axis_angle = 0.0;
};

struct FVariance {
  double value = 0.0;
};

void validate(const BiasSpec& bias);
void validate(const GaussianStateSpec& spec);

// Husimi Q density of the vacuum state, (1/pi) exp(-|alpha|^2).
double vacuum_q(PhasePoint alpha);

// Normalized 2D Gaussian density at alpha. Reduces to vacuum_q for
// mean 0 and var_major = var_minor = 1/2.
double gaussian_q(PhasePoint alpha, const GaussianStateSpec& spec);

// Phase-space shift equivalent to injecting bias b into a cavity pumped at
// lambda > 1: sqrt(2) b / (lambda - 1).
double displacement(double b, double lambda);

// Variance of the exponentially discounted Wiener integral
// f(tau) = int_0^tau exp(-(lambda-1) t) dW(t), lambda > 1.
FVariance f_variance(double tau, double lambda);

// Closed-form steady-state probability of the positive lobe when a constant
// bias is injected at injection_delay into a cavity pumped at lambda > 1.
// Odd-symmetric around p(0) = 1/2 by construction.
double erf_probability(const BiasSpec& bias, double lambda);

// Transition width of erf_probability as a function of bias amplitude,
// in bias units: sqrt(lambda) sqrt(lambda-1) exp((lambda-1) tau0) / 2.
double erf_transition_sigma_b(double lambda, double tau0);

// Converts a transition width in bias units into the standard deviation of
// the marginal Q distribution on the displacement axis, using the map
// x = sqrt(2) b exp(-(lambda-1) tau0) / (lambda - 1).
double theoretical_marginal(double sigma_b, double lambda, double tau0);

// Same axis map applied to a single bias value.
double bias_to_displacement(double b, double lambda, double tau0);

// Physical Husimi Q function of the cavity squeezed vacuum prepared below
// threshold at lambda_prep: variances 1/(2(1-l)) along the pump quadrature
// and 1/(2(1+l)) orthogonal. The deamplified-to-vacuum variance ratio
// 1/(1+l) approaches the 3 dB cavity bound as lambda_prep -> 1.
GaussianStateSpec squeezed_vacuum_q(double lambda_prep);

// Steady-state variance of the below-threshold relaxation SDE (vacuum is a
// point mass in this normalization): lambda/(2(1-lambda)) for the amplified
// quadrature, lambda/(2(1+lambda)) for the deamplified one.
double relaxed_quadrature_variance(double lambda_prep, bool amplified);

// Predicted variance, in displacement units, of the marginal measured by the
// bias-sweep protocol on a state whose quadrature variance at measurement
// start is v0 (SDE normalization). The additive term is the measurement
// kernel: what a point-mass vacuum measures.
double measured_marginal_variance(double v0, double lambda_meas);

}  // namespace opotomo::model
