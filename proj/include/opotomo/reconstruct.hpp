#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "opotomo/model.hpp"
#include "opotomo/protocol.hpp"

namespace opotomo::reconstruct {

struct ErfFit {
  double center = 0.0;   // bias units
  double sigma_b = 0.0;  // bias units, > 0
  double log_likelihood = 0.0;
  double cov[2][2] = {{0.0, 0.0}, {0.0, 0.0}};  // (center, sigma_b)
};

class IllConditionedFit : public std::runtime_error {
 public:
  explicit IllConditionedFit(const std::string& what)
      : std::runtime_error(what) {}
};

// Binomial maximum-likelihood fit of p(b) = (1 + erf((b - c)/(sqrt(2) s)))/2.
ErfFit fit_erf(const protocol::BiasProbabilityCurve& curve);

struct MarginalQ {
  double theta = 0.0;
  std::vector<double> axis;     // displacement units
  std::vector<double> density;  // nonnegative
  bool normalized = false;
  // Set when the density came from a parametric fit, displacement units.
  double fitted_center = 0.0;
  double fitted_sigma = 0.0;
  double sigma_err = 0.0;

  void validate() const;
};

double marginal_mass(const MarginalQ& m);
double marginal_mean(const MarginalQ& m);
double marginal_variance(const MarginalQ& m);
// Fit width when available, raw second moment otherwise.
double marginal_effective_variance(const MarginalQ& m);

enum class SensitivityMode { parametric, nonparametric };

// Converts a bias-probability curve into the marginal distribution on the
// displacement axis x = sqrt(2) b exp(-(lambda-1) tau0)/(lambda-1). An empty
// axis uses the curve's own bias grid mapped through the same relation.
MarginalQ sensitivity_to_marginal(const protocol::BiasProbabilityCurve& curve,
                                  const ErfFit& fit, double lambda, double tau0,
                                  SensitivityMode mode,
                                  const std::vector<double>& axis = {});

struct Sinogram {
  std::vector<MarginalQ> marginals;  // shared axis, angles strictly increasing
  std::string label;

  void validate() const;
  const std::vector<double>& axis() const;
  std::vector<double> angles() const;
};

struct QGrid {
  int size = 0;
  double x0 = 0.0;  // coordinate of cell 0 along both axes
  double dx = 0.0;
  std::vector<double> values;  // row-major, index = iy * size + ix
  double clipped_mass_fraction = 0.0;
  std::string provenance;

  double at(int ix, int iy) const {
    return values[static_cast<std::size_t>(iy) * static_cast<std::size_t>(size) +
                  static_cast<std::size_t>(ix)];
  }
  double& at(int ix, int iy) {
    return values[static_cast<std::size_t>(iy) * static_cast<std::size_t>(size) +
                  static_cast<std::size_t>(ix)];
  }
  double axis(int i) const { return x0 + dx * static_cast<double>(i); }
  double cell_area() const { return dx * dx; }
  double total_mass() const;
  // Bilinear interpolation, zero outside the grid.
  double sample(double x, double y) const;

  void validate() const;
};

// Line-integral projection of the grid onto the axis at angle theta. An empty
// axis projects onto the grid's own coordinate axis.
MarginalQ forward_project(const QGrid& grid, double theta,
                          const std::vector<double>& axis = {});

// Filtered back-projection with a Ram-Lak kernel and linear interpolation.
// Negative values are clipped and the grid renormalized; the pre-clip
// negative-mass fraction is recorded on the output.
QGrid inverse_radon(const Sinogram& sinogram, int grid_size);
// Plain-loop reference used to validate the parallel kernel.
QGrid inverse_radon_serial(const Sinogram& sinogram, int grid_size);

struct SqueezingReport {
  std::vector<double> angles;
  std::vector<double> db;
  std::vector<double> db_err;
  double angle_min = 0.0;
  double db_min = 0.0;
  double err_min = 0.0;
  double angle_max = 0.0;
  double db_max = 0.0;
  double err_max = 0.0;
};

// dB(theta) = 10 log10(var_vac(theta)/var_state(theta)); positive means the
// state marginal is narrower than the vacuum reference.
SqueezingReport squeezing_db(const Sinogram& state,
                             const Sinogram& vacuum_reference);

// Analytic-Gaussian helpers for oracle tests and vacuum references.
Sinogram analytic_sinogram(const model::GaussianStateSpec& spec,
                           const std::vector<double>& angles,
                           const std::vector<double>& axis,
                           const std::string& label = "analytic");
QGrid rasterize(const model::GaussianStateSpec& spec, int size,
                double halfwidth);

struct GridMoments {
  double mass = 0.0;
  double mean_x = 0.0;
  double mean_y = 0.0;
  double var_x = 0.0;
  double var_y = 0.0;
  double cov_xy = 0.0;
};
GridMoments grid_moments(const QGrid& grid);

struct EllipseAxes {
  double angle_major = 0.0;  // in [0, pi)
  double angle_minor = 0.0;
  double sigma_major = 0.0;
  double sigma_minor = 0.0;
};
EllipseAxes principal_axes(const GridMoments& moments);

// Radius along `angle` from the density centroid at which the interpolated
// density first drops below peak/e.
double contour_radius_1e(const QGrid& grid, double angle);

}  // namespace opotomo::reconstruct
