#include "opotomo/model.hpp"

#include <numbers>
#include <stdexcept>

namespace opotomo::model {

namespace {

constexpr double kPi = std::numbers::pi;

void require_above_threshold(double lambda, const char* what) {
  if (!(lambda > 1.0)) {
    throw std::invalid_argument(std::string(what) +
                                ": lambda must be > 1 (above threshold)");
  }
}

}  // namespace

void validate(const BiasSpec& bias) {
  if (!(bias.injection_delay >= 0.0))
    throw std::invalid_argument("bias.injection_delay: must be >= 0");
  if (!(bias.extinction_floor >= 0.0))
    throw std::invalid_argument("bias.extinction_floor: must be >= 0");
  if (bias.amplitude != 0.0 && bias.extinction_floor > std::abs(bias.amplitude))
    throw std::invalid_argument(
        "bias.extinction_floor: must not exceed |amplitude|");
}

void validate(const GaussianStateSpec& spec) {
  if (!(spec.var_minor > 0.0))
    throw std::invalid_argument("gaussian.var_minor: must be > 0");
  if (!(spec.var_major >= spec.var_minor))
    throw std::invalid_argument("gaussian.var_major: must be >= var_minor");
  if (!std::isfinite(spec.mean.re) || !std::isfinite(spec.mean.im))
    throw std::invalid_argument("gaussian.mean: must be finite");
}

double vacuum_q(PhasePoint alpha) {
  return std::exp(-(alpha.re * alpha.re + alpha.im * alpha.im)) / kPi;
}

double gaussian_q(PhasePoint alpha, const GaussianStateSpec& spec) {
  validate(spec);
  const double c = std::cos(spec.axis_angle);
  const double s = std::sin(spec.axis_angle);
  const double dx = alpha.re - spec.mean.re;
  const double dy = alpha.im - spec.mean.im;
  const double u = c * dx + s * dy;   // along the major axis
  const double v = -s * dx + c * dy;  // along the minor axis
  const double norm = 2.0 * kPi * std::sqrt(spec.var_major * spec.var_minor);
  return std::exp(-0.5 * (u * u / spec.var_major + v * v / spec.var_minor)) /
         norm;
}

double displacement(double b, double lambda) {
  require_above_threshold(lambda, "displacement");
  return std::sqrt(2.0) * b / (lambda - 1.0);
}

FVariance f_variance(double tau, double lambda) {
  require_above_threshold(lambda, "f_variance");
  if (!(tau >= 0.0)) throw std::invalid_argument("f_variance: tau must be >= 0");
  return {(1.0 - std::exp(-2.0 * (lambda - 1.0) * tau)) / (2.0 * (lambda - 1.0))};
}

namespace {

// p for a nonnegative erf argument; the sign case is reflected so that
// p(-b) == 1 - p(b) holds bit-exactly.
double erf_prob_from_arg(double z) {
  if (z < 0.0) return 1.0 - erf_prob_from_arg(-z);
  return 0.5 + 0.5 * std::erf(z);
}

}  // namespace

double erf_probability(const BiasSpec& bias, double lambda) {
  require_above_threshold(lambda, "erf_probability");
  validate(bias);
  if (bias.extinction_floor != 0.0)
    throw std::invalid_argument(
        "erf_probability: closed form assumes extinction_floor = 0");
  const double z = std::sqrt(2.0) * bias.amplitude *
                   std::exp(-(lambda - 1.0) * bias.injection_delay) /
                   (std::sqrt(lambda) * std::sqrt(lambda - 1.0));
  return erf_prob_from_arg(z);
}

double erf_transition_sigma_b(double lambda, double tau0) {
  require_above_threshold(lambda, "erf_transition_sigma_b");
  return 0.5 * std::sqrt(lambda) * std::sqrt(lambda - 1.0) *
         std::exp((lambda - 1.0) * tau0);
}

double theoretical_marginal(double sigma_b, double lambda, double tau0) {
  require_above_threshold(lambda, "theoretical_marginal");
  if (!(sigma_b > 0.0))
    throw std::invalid_argument("theoretical_marginal: sigma_b must be > 0");
  return bias_to_displacement(sigma_b, lambda, tau0);
}

double bias_to_displacement(double b, double lambda, double tau0) {
  require_above_threshold(lambda, "bias_to_displacement");
  return std::sqrt(2.0) * b * std::exp(-(lambda - 1.0) * tau0) / (lambda - 1.0);
}

GaussianStateSpec squeezed_vacuum_q(double lambda_prep) {
  if (!(lambda_prep >= 0.0 && lambda_prep < 1.0))
    throw std::invalid_argument("squeezed_vacuum_q: lambda_prep must be in [0, 1)");
  GaussianStateSpec spec;
  spec.var_major = 0.5 / (1.0 - lambda_prep);
  spec.var_minor = 0.5 / (1.0 + lambda_prep);
  spec.axis_angle = 0.0;
  return spec;
}

double relaxed_quadrature_variance(double lambda_prep, bool amplified) {
  if (!(lambda_prep >= 0.0 && lambda_prep < 1.0))
    throw std::invalid_argument(
        "relaxed_quadrature_variance: lambda_prep must be in [0, 1)");
  return amplified ? lambda_prep / (2.0 * (1.0 - lambda_prep))
                   : lambda_prep / (2.0 * (1.0 + lambda_prep));
}

double measured_marginal_variance(double v0, double lambda_meas) {
  require_above_threshold(lambda_meas, "measured_marginal_variance");
  if (!(v0 >= 0.0))
    throw std::invalid_argument("measured_marginal_variance: v0 must be >= 0");
  return v0 + lambda_meas / (2.0 * (lambda_meas - 1.0));
}

}  // namespace opotomo::model
