#include "opotomo/reconstruct.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace opotomo::reconstruct {

namespace {

constexpr double kPi = std::numbers::pi;

double clamp_p(double p) {
  return std::min(1.0 - 1e-12, std::max(1e-12, p));
}

double erf_model(double b, double c, double s) {
  return 0.5 * (1.0 + std::erf((b - c) / (std::sqrt(2.0) * s)));
}

double normal_pdf(double t) {
  return std::exp(-0.5 * t * t) / std::sqrt(2.0 * kPi);
}

struct FitData {
  std::vector<double> b, k, n;
};

double fit_nll(const FitData& d, double c, double s) {
  double nll = 0.0;
  for (std::size_t i = 0; i < d.b.size(); ++i) {
    const double p = clamp_p(erf_model(d.b[i], c, s));
    nll -= d.k[i] * std::log(p) + (d.n[i] - d.k[i]) * std::log1p(-p);
  }
  return nll;
}

// Gradient in (c, u) with s = exp(u).
void fit_grad(const FitData& d, double c, double u, double* gc, double* gu) {
  const double s = std::exp(u);
  *gc = 0.0;
  *gu = 0.0;
  for (std::size_t i = 0; i < d.b.size(); ++i) {
    const double t = (d.b[i] - c) / s;
    const double p = clamp_p(erf_model(d.b[i], c, s));
    const double w = d.k[i] / p - (d.n[i] - d.k[i]) / (1.0 - p);
    const double phi = normal_pdf(t);
    *gc += w * phi / s;
    *gu += w * phi * t;
  }
}

// Rough inverse error function; initializer only, refined by Newton.
double erf_inverse(double x) {
  x = std::min(1.0 - 1e-12, std::max(-1.0 + 1e-12, x));
  const double a = 0.147;
  const double l = std::log(1.0 - x * x);
  const double t = 2.0 / (kPi * a) + l / 2.0;
  double y = std::copysign(std::sqrt(std::sqrt(t * t - l / a) - t), x);
  for (int i = 0; i < 3; ++i) {
    const double e = std::erf(y) - x;
    y -= e * std::sqrt(kPi) / 2.0 * std::exp(y * y);
  }
  return y;
}

bool solve2(const double h[2][2], const double g[2], double out[2]) {
  const double det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
  if (!(std::abs(det) > 1e-300)) return false;
  out[0] = (h[1][1] * g[0] - h[0][1] * g[1]) / det;
  out[1] = (h[0][0] * g[1] - h[1][0] * g[0]) / det;
  return true;
}

}  // namespace

ErfFit fit_erf(const protocol::BiasProbabilityCurve& curve) {
  curve.validate();
  if (curve.points.size() < 5)
    throw std::invalid_argument("curve.points: erf fit needs >= 5 points");
  bool any_transition = false;
  FitData d;
  for (const protocol::CurvePoint& pt : curve.points) {
    if (pt.n == 0)
      throw std::invalid_argument("curve.points: counts required for the fit");
    d.b.push_back(pt.b);
    d.n.push_back(static_cast<double>(pt.n));
    d.k.push_back(std::round(pt.p_hat * static_cast<double>(pt.n)));
    if (pt.ci_high < 0.5 || pt.ci_low > 0.5) any_transition = true;
  }
  if (!any_transition)
    throw IllConditionedFit(
        "erf fit: every point is consistent with p = 0.5, width unidentifiable");

  const double b_lo = d.b.front();
  const double b_hi = d.b.back();
  const double range = b_hi - b_lo;

  double c0 = d.b[d.b.size() / 2];
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < d.b.size(); ++i) {
    const double p0 = d.k[i] / d.n[i] - 0.5;
    const double p1 = d.k[i + 1] / d.n[i + 1] - 0.5;
    if (p0 == 0.0) {
      c0 = d.b[i];
      break;
    }
    if (p0 * p1 < 0.0) {
      c0 = d.b[i] - p0 * (d.b[i + 1] - d.b[i]) / (p1 - p0);
      break;
    }
    if (std::abs(p0) < best_gap) {
      best_gap = std::abs(p0);
      c0 = d.b[i];
    }
  }

  // Probit regression for the initial width.
  double sxx = 0.0, sxz = 0.0, sx = 0.0, sz = 0.0, cnt = 0.0;
  for (std::size_t i = 0; i < d.b.size(); ++i) {
    const double p = d.k[i] / d.n[i];
    if (p < 0.02 || p > 0.98) continue;
    const double z = std::sqrt(2.0) * erf_inverse(2.0 * p - 1.0);
    sx += d.b[i];
    sz += z;
    sxx += d.b[i] * d.b[i];
    sxz += d.b[i] * z;
    cnt += 1.0;
  }
  double s0 = range / 4.0;
  if (cnt >= 2.0) {
    const double denom = cnt * sxx - sx * sx;
    if (denom > 0.0) {
      const double slope = (cnt * sxz - sx * sz) / denom;
      if (slope > 1e-9) s0 = 1.0 / slope;
    }
  }
  s0 = std::min(std::max(s0, 1e-6 * range), 1e2 * range);

  double c = c0;
  double u = std::log(s0);
  double nll = fit_nll(d, c, std::exp(u));
  const double hu = 1e-6;
  for (int iter = 0; iter < 200; ++iter) {
    double g[2];
    fit_grad(d, c, u, &g[0], &g[1]);
    const double hc = 1e-6 * std::max({std::abs(c), std::exp(u), 1e-6});
    double gp[2], gm[2], h[2][2];
    fit_grad(d, c + hc, u, &gp[0], &gp[1]);
    fit_grad(d, c - hc, u, &gm[0], &gm[1]);
    h[0][0] = (gp[0] - gm[0]) / (2.0 * hc);
    h[1][0] = (gp[1] - gm[1]) / (2.0 * hc);
    fit_grad(d, c, u + hu, &gp[0], &gp[1]);
    fit_grad(d, c, u - hu, &gm[0], &gm[1]);
    h[0][1] = (gp[0] - gm[0]) / (2.0 * hu);
    h[1][1] = (gp[1] - gm[1]) / (2.0 * hu);

    bool moved = false;
    double mu = 0.0;
    const double tr = std::abs(h[0][0]) + std::abs(h[1][1]) + 1e-12;
    for (int damp = 0; damp < 24; ++damp) {
      double hd[2][2] = {{h[0][0] + mu, h[0][1]}, {h[1][0], h[1][1] + mu}};
      double step[2];
      if (solve2(hd, g, step)) {
        const double cn = c - step[0];
        const double un = std::min(std::max(u - step[1], std::log(1e-9 * range)),
                                   std::log(1e4 * range));
        const double next = fit_nll(d, cn, std::exp(un));
        if (next <= nll) {
          const bool converged = std::abs(cn - c) < 1e-12 * (1.0 + std::abs(c)) &&
                                 std::abs(un - u) < 1e-12;
          c = cn;
          u = un;
          nll = next;
          moved = true;
          if (converged) iter = 200;
          break;
        }
      }
      mu = mu == 0.0 ? 1e-6 * tr : mu * 10.0;
    }
    if (!moved) break;
  }

  const double s = std::exp(u);
  if (s > 20.0 * range)
    throw IllConditionedFit("erf fit: width unidentifiable on this bias grid");

  // Observed information in (c, s) by central second differences.
  const double dc = 1e-4 * std::max(std::abs(c), s);
  const double ds = 1e-4 * s;
  const double f0 = fit_nll(d, c, s);
  double info[2][2];
  info[0][0] = (fit_nll(d, c + dc, s) - 2.0 * f0 + fit_nll(d, c - dc, s)) / (dc * dc);
  info[1][1] = (fit_nll(d, c, s + ds) - 2.0 * f0 + fit_nll(d, c, s - ds)) / (ds * ds);
  info[0][1] = info[1][0] =
      (fit_nll(d, c + dc, s + ds) - fit_nll(d, c + dc, s - ds) -
       fit_nll(d, c - dc, s + ds) + fit_nll(d, c - dc, s - ds)) /
      (4.0 * dc * ds);
  const double det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
  if (!(det > 0.0) || !(info[0][0] > 0.0))
    throw IllConditionedFit("erf fit: observed information not positive definite");

  ErfFit fit;
  fit.center = c;
  fit.sigma_b = s;
  fit.log_likelihood = -nll;
  fit.cov[0][0] = info[1][1] / det;
  fit.cov[1][1] = info[0][0] / det;
  fit.cov[0][1] = fit.cov[1][0] = -info[0][1] / det;
  return fit;
}

void MarginalQ::validate() const {
  if (axis.size() < 2 || axis.size() != density.size())
    throw std::invalid_argument("marginal: axis and density sizes must match");
  for (std::size_t i = 1; i < axis.size(); ++i)
    if (!(axis[i - 1] < axis[i]))
      throw std::invalid_argument("marginal.axis: must be strictly increasing");
  for (double v : density)
    if (!(v >= 0.0) || !std::isfinite(v))
      throw std::invalid_argument("marginal.density: must be nonnegative");
  if (normalized && std::abs(marginal_mass(*this) - 1.0) > 1e-3)
    throw std::invalid_argument("marginal.density: must have unit mass");
}

double marginal_mass(const MarginalQ& m) {
  double mass = 0.0;
  for (std::size_t i = 0; i + 1 < m.axis.size(); ++i)
    mass += 0.5 * (m.density[i] + m.density[i + 1]) * (m.axis[i + 1] - m.axis[i]);
  return mass;
}

double marginal_mean(const MarginalQ& m) {
  double mass = 0.0, first = 0.0;
  for (std::size_t i = 0; i + 1 < m.axis.size(); ++i) {
    const double dxi = m.axis[i + 1] - m.axis[i];
    mass += 0.5 * (m.density[i] + m.density[i + 1]) * dxi;
    first += 0.5 * (m.density[i] * m.axis[i] + m.density[i + 1] * m.axis[i + 1]) * dxi;
  }
  if (!(mass > 0.0))
    throw std::invalid_argument("marginal.density: mass must be > 0");
  return first / mass;
}

double marginal_variance(const MarginalQ& m) {
  const double mean = marginal_mean(m);
  double mass = 0.0, second = 0.0;
  for (std::size_t i = 0; i + 1 < m.axis.size(); ++i) {
    const double dxi = m.axis[i + 1] - m.axis[i];
    const double a = m.axis[i] - mean;
    const double b = m.axis[i + 1] - mean;
    mass += 0.5 * (m.density[i] + m.density[i + 1]) * dxi;
    second += 0.5 * (m.density[i] * a * a + m.density[i + 1] * b * b) * dxi;
  }
  return second / mass;
}

double marginal_effective_variance(const MarginalQ& m) {
  if (m.fitted_sigma > 0.0) return m.fitted_sigma * m.fitted_sigma;
  return marginal_variance(m);
}

namespace {

void normalize_marginal(MarginalQ& m) {
  const double mass = marginal_mass(m);
  if (!(mass > 0.0))
    throw std::invalid_argument("marginal.density: mass must be > 0");
  for (double& v : m.density) v /= mass;
  m.normalized = true;
}

double lerp_series(const std::vector<double>& xs, const std::vector<double>& ys,
                   double x) {
  if (x <= xs.front() || x >= xs.back()) {
    if (x == xs.front()) return ys.front();
    if (x == xs.back()) return ys.back();
    return 0.0;
  }
  const auto it = std::upper_bound(xs.begin(), xs.end(), x);
  const std::size_t hi = static_cast<std::size_t>(it - xs.begin());
  const std::size_t lo = hi - 1;
  const double w = (x - xs[lo]) / (xs[hi] - xs[lo]);
  return ys[lo] + w * (ys[hi] - ys[lo]);
}

}  // namespace

MarginalQ sensitivity_to_marginal(const protocol::BiasProbabilityCurve& curve,
                                  const ErfFit& fit, double lambda, double tau0,
                                  SensitivityMode mode,
                                  const std::vector<double>& axis) {
  curve.validate();
  if (!(lambda > 1.0))
    throw std::invalid_argument("lambda: must be > 1 (above threshold)");
  if (tau0 < 0.0) throw std::invalid_argument("tau0: must be >= 0");
  const double scale = model::bias_to_displacement(1.0, lambda, tau0);

  MarginalQ m;
  m.theta = curve.theta;
  if (axis.empty()) {
    m.axis.reserve(curve.points.size());
    for (const protocol::CurvePoint& pt : curve.points)
      m.axis.push_back(scale * pt.b);
  } else {
    m.axis = axis;
  }
  m.density.assign(m.axis.size(), 0.0);

  if (mode == SensitivityMode::parametric) {
    if (!(fit.sigma_b > 0.0))
      throw std::invalid_argument("fit.sigma_b: must be > 0");
    const double mu = scale * fit.center;
    const double sig = scale * fit.sigma_b;
    for (std::size_t i = 0; i < m.axis.size(); ++i)
      m.density[i] = normal_pdf((m.axis[i] - mu) / sig) / sig;
    m.fitted_center = mu;
    m.fitted_sigma = sig;
    m.sigma_err = scale * std::sqrt(std::max(0.0, fit.cov[1][1]));
  } else {
    const std::size_t np = curve.points.size();
    if (np < 9)
      throw std::invalid_argument(
          "curve.points: nonparametric mode needs >= 9 points");
    std::vector<double> dpdb(np, 0.0), xs(np, 0.0);
    for (std::size_t i = 0; i < np; ++i) {
      const std::size_t lo = i == 0 ? 0 : i - 1;
      const std::size_t hi = i + 1 == np ? i : i + 1;
      dpdb[i] = (curve.points[hi].p_hat - curve.points[lo].p_hat) /
                (curve.points[hi].b - curve.points[lo].b);
      xs[i] = scale * curve.points[i].b;
    }
    std::vector<double> smooth(np);
    smooth.front() = dpdb.front();
    smooth.back() = dpdb.back();
    for (std::size_t i = 1; i + 1 < np; ++i)
      smooth[i] = 0.25 * dpdb[i - 1] + 0.5 * dpdb[i] + 0.25 * dpdb[i + 1];
    for (double& v : smooth) v = std::max(0.0, v / scale);
    if (axis.empty())
      m.density = smooth;
    else
      for (std::size_t i = 0; i < m.axis.size(); ++i)
        m.density[i] = lerp_series(xs, smooth, m.axis[i]);
  }
  normalize_marginal(m);
  m.validate();
  return m;
}

void Sinogram::validate() const {
  if (marginals.empty())
    throw std::invalid_argument("sinogram: must contain marginals");
  const std::vector<double>& ax = marginals.front().axis;
  for (std::size_t i = 0; i < marginals.size(); ++i) {
    marginals[i].validate();
    if (marginals[i].axis != ax)
      throw std::invalid_argument("sinogram: marginals must share one axis");
    if (!(marginals[i].theta >= 0.0) || marginals[i].theta >= kPi)
      throw std::invalid_argument("sinogram: angles must lie in [0, pi)");
    if (i > 0 && !(marginals[i - 1].theta < marginals[i].theta))
      throw std::invalid_argument("sinogram: angles must be strictly increasing");
  }
}

const std::vector<double>& Sinogram::axis() const {
  if (marginals.empty())
    throw std::invalid_argument("sinogram: must contain marginals");
  return marginals.front().axis;
}

std::vector<double> Sinogram::angles() const {
  std::vector<double> out;
  out.reserve(marginals.size());
  for (const MarginalQ& m : marginals) out.push_back(m.theta);
  return out;
}

double QGrid::total_mass() const {
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum * cell_area();
}

double QGrid::sample(double x, double y) const {
  const double fx = (x - x0) / dx;
  const double fy = (y - x0) / dx;
  const double top = static_cast<double>(size - 1);
  if (fx < 0.0 || fy < 0.0 || fx > top || fy > top) return 0.0;
  int ix = static_cast<int>(fx);
  int iy = static_cast<int>(fy);
  if (ix >= size - 1) ix = size - 2;
  if (iy >= size - 1) iy = size - 2;
  const double wx = fx - ix;
  const double wy = fy - iy;
  return (1.0 - wx) * (1.0 - wy) * at(ix, iy) + wx * (1.0 - wy) * at(ix + 1, iy) +
         (1.0 - wx) * wy * at(ix, iy + 1) + wx * wy * at(ix + 1, iy + 1);
}

void QGrid::validate() const {
  if (size < 2) throw std::invalid_argument("grid.size: must be >= 2");
  if (!(dx > 0.0)) throw std::invalid_argument("grid.dx: must be > 0");
  if (values.size() != static_cast<std::size_t>(size) * static_cast<std::size_t>(size))
    throw std::invalid_argument("grid.values: must hold size*size cells");
  for (double v : values)
    if (!std::isfinite(v))
      throw std::invalid_argument("grid.values: must be finite");
}

MarginalQ forward_project(const QGrid& grid, double theta,
                          const std::vector<double>& axis) {
  grid.validate();
  MarginalQ m;
  m.theta = theta;
  if (axis.empty()) {
    m.axis.resize(static_cast<std::size_t>(grid.size));
    for (int i = 0; i < grid.size; ++i)
      m.axis[static_cast<std::size_t>(i)] = grid.axis(i);
  } else {
    m.axis = axis;
  }
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const double extent =
      std::max(std::abs(grid.x0), std::abs(grid.axis(grid.size - 1)));
  const double reach = std::sqrt(2.0) * extent;
  const long long nt = 2 * static_cast<long long>(std::ceil(reach / grid.dx)) + 1;
  m.density.assign(m.axis.size(), 0.0);
  for (std::size_t i = 0; i < m.axis.size(); ++i) {
    const double si = m.axis[i];
    double sum = 0.0;
    for (long long j = 0; j < nt; ++j) {
      const double t = -reach + static_cast<double>(j) * grid.dx;
      sum += grid.sample(si * c - t * s, si * s + t * c);
    }
    double v = sum * grid.dx;
    if (v < 0.0 && v > -1e-12) v = 0.0;
    m.density[i] = v;
  }
  m.normalized = false;
  return m;
}

namespace {

QGrid backproject(const Sinogram& sinogram, int grid_size, bool parallel) {
  sinogram.validate();
  if (sinogram.marginals.size() < 4)
    throw std::invalid_argument("sinogram: inverse Radon needs >= 4 angles");
  if (grid_size < 8)
    throw std::invalid_argument("grid_size: must be >= 8");
  const std::vector<double>& axis = sinogram.axis();
  const std::size_t ns = axis.size();
  const double ds = (axis.back() - axis.front()) / static_cast<double>(ns - 1);
  for (std::size_t i = 1; i < ns; ++i)
    if (std::abs(axis[i] - axis[i - 1] - ds) > 1e-9 * ds)
      throw std::invalid_argument("sinogram.axis: must be uniformly spaced");

  // Spatial-domain ramp (Ram-Lak) kernel.
  std::vector<double> kernel(2 * ns - 1, 0.0);
  kernel[ns - 1] = 1.0 / (4.0 * ds * ds);
  for (std::size_t j = 1; j < ns; j += 2) {
    const double v = -1.0 / (kPi * kPi * static_cast<double>(j) *
                             static_cast<double>(j) * ds * ds);
    kernel[ns - 1 + j] = v;
    kernel[ns - 1 - j] = v;
  }

  const std::size_t na = sinogram.marginals.size();
  std::vector<std::vector<double>> filtered(na, std::vector<double>(ns, 0.0));
  std::vector<double> cosv(na), sinv(na);
  for (std::size_t k = 0; k < na; ++k) {
    const MarginalQ& m = sinogram.marginals[k];
    cosv[k] = std::cos(m.theta);
    sinv[k] = std::sin(m.theta);
    for (std::size_t i = 0; i < ns; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < ns; ++j)
        sum += m.density[j] * kernel[ns - 1 + i - j];
      filtered[k][i] = sum * ds;
    }
  }

  QGrid grid;
  grid.size = grid_size;
  grid.x0 = axis.front();
  grid.dx = (axis.back() - axis.front()) / static_cast<double>(grid_size - 1);
  grid.values.assign(static_cast<std::size_t>(grid_size) *
                         static_cast<std::size_t>(grid_size),
                     0.0);
  grid.provenance = sinogram.label.empty() ? "sinogram" : sinogram.label;

  const double s0 = axis.front();
  const double weight = kPi / static_cast<double>(na);
  const auto fill_row = [&](int iy) {
    const double y = grid.axis(iy);
    for (int ix = 0; ix < grid_size; ++ix) {
      const double x = grid.axis(ix);
      double sum = 0.0;
      for (std::size_t k = 0; k < na; ++k) {
        const double fs = (x * cosv[k] + y * sinv[k] - s0) / ds;
        if (fs < 0.0 || fs > static_cast<double>(ns - 1)) continue;
        std::size_t lo = static_cast<std::size_t>(fs);
        if (lo >= ns - 1) lo = ns - 2;
        const double w = fs - static_cast<double>(lo);
        sum += filtered[k][lo] + w * (filtered[k][lo + 1] - filtered[k][lo]);
      }
      grid.at(ix, iy) = weight * sum;
    }
  };
#ifdef _OPENMP
  if (parallel) {
#pragma omp parallel for schedule(static)
    for (int iy = 0; iy < grid_size; ++iy) fill_row(iy);
  } else {
    for (int iy = 0; iy < grid_size; ++iy) fill_row(iy);
  }
#else
  (void)parallel;
  for (int iy = 0; iy < grid_size; ++iy) fill_row(iy);
#endif

  double neg = 0.0, pos = 0.0;
  for (double v : grid.values) {
    if (v >= 0.0)
      pos += v;
    else
      neg -= v;
  }
  if (!(pos > 0.0))
    throw std::invalid_argument("sinogram: reconstruction has no positive mass");
  grid.clipped_mass_fraction = neg / pos;
  for (double& v : grid.values) v = std::max(0.0, v);
  const double mass = grid.total_mass();
  for (double& v : grid.values) v /= mass;
  return grid;
}

}  // namespace

QGrid inverse_radon(const Sinogram& sinogram, int grid_size) {
  return backproject(sinogram, grid_size, true);
}

QGrid inverse_radon_serial(const Sinogram& sinogram, int grid_size) {
  return backproject(sinogram, grid_size, false);
}

SqueezingReport squeezing_db(const Sinogram& state,
                             const Sinogram& vacuum_reference) {
  state.validate();
  vacuum_reference.validate();
  if (state.marginals.size() != vacuum_reference.marginals.size())
    throw std::invalid_argument("sinogram: angle grids must match");
  const std::size_t na = state.marginals.size();
  SqueezingReport rep;
  rep.angles.reserve(na);
  rep.db.reserve(na);
  rep.db_err.reserve(na);
  for (std::size_t k = 0; k < na; ++k) {
    const MarginalQ& ms = state.marginals[k];
    const MarginalQ& mv = vacuum_reference.marginals[k];
    if (std::abs(ms.theta - mv.theta) > 1e-12)
      throw std::invalid_argument("sinogram: angle grids must match");
    if (ms.axis != mv.axis)
      throw std::invalid_argument("sinogram: axis grids must match");
    const double vs = marginal_effective_variance(ms);
    const double vv = marginal_effective_variance(mv);
    if (!(vs > 0.0) || !(vv > 0.0))
      throw std::invalid_argument("marginal: variance must be > 0");
    rep.angles.push_back(ms.theta);
    rep.db.push_back(10.0 * std::log10(vv / vs));
    double rel2 = 0.0;
    if (ms.fitted_sigma > 0.0 && ms.sigma_err > 0.0) {
      const double r = 2.0 * ms.sigma_err / ms.fitted_sigma;
      rel2 += r * r;
    }
    if (mv.fitted_sigma > 0.0 && mv.sigma_err > 0.0) {
      const double r = 2.0 * mv.sigma_err / mv.fitted_sigma;
      rel2 += r * r;
    }
    rep.db_err.push_back(10.0 / std::log(10.0) * std::sqrt(rel2));
  }
  std::size_t imin = 0, imax = 0;
  for (std::size_t k = 1; k < na; ++k) {
    if (rep.db[k] < rep.db[imin]) imin = k;
    if (rep.db[k] > rep.db[imax]) imax = k;
  }
  rep.angle_min = rep.angles[imin];
  rep.db_min = rep.db[imin];
  rep.err_min = rep.db_err[imin];
  rep.angle_max = rep.angles[imax];
  rep.db_max = rep.db[imax];
  rep.err_max = rep.db_err[imax];
  return rep;
}

Sinogram analytic_sinogram(const model::GaussianStateSpec& spec,
                           const std::vector<double>& angles,
                           const std::vector<double>& axis,
                           const std::string& label) {
  model::validate(spec);
  if (angles.empty())
    throw std::invalid_argument("angles: must be nonempty");
  Sinogram sino;
  sino.label = label;
  sino.marginals.reserve(angles.size());
  for (double theta : angles) {
    MarginalQ m;
    m.theta = theta;
    m.axis = axis;
    m.density.resize(axis.size());
    const double mean = spec.mean.re * std::cos(theta) + spec.mean.im * std::sin(theta);
    const double ca = std::cos(theta - spec.axis_angle);
    const double sa = std::sin(theta - spec.axis_angle);
    const double var = spec.var_major * ca * ca + spec.var_minor * sa * sa;
    const double sig = std::sqrt(var);
    for (std::size_t i = 0; i < axis.size(); ++i)
      m.density[i] = normal_pdf((axis[i] - mean) / sig) / sig;
    m.fitted_center = mean;
    m.fitted_sigma = sig;
    m.sigma_err = 0.0;
    normalize_marginal(m);
    sino.marginals.push_back(std::move(m));
  }
  sino.validate();
  return sino;
}

QGrid rasterize(const model::GaussianStateSpec& spec, int size,
                double halfwidth) {
  model::validate(spec);
  if (size < 2) throw std::invalid_argument("grid.size: must be >= 2");
  if (!(halfwidth > 0.0))
    throw std::invalid_argument("grid.halfwidth: must be > 0");
  QGrid grid;
  grid.size = size;
  grid.x0 = -halfwidth;
  grid.dx = 2.0 * halfwidth / static_cast<double>(size - 1);
  grid.values.resize(static_cast<std::size_t>(size) * static_cast<std::size_t>(size));
  for (int iy = 0; iy < size; ++iy)
    for (int ix = 0; ix < size; ++ix)
      grid.at(ix, iy) = model::gaussian_q({grid.axis(ix), grid.axis(iy)}, spec);
  const double mass = grid.total_mass();
  for (double& v : grid.values) v /= mass;
  grid.provenance = "analytic";
  return grid;
}

GridMoments grid_moments(const QGrid& grid) {
  grid.validate();
  GridMoments mom;
  double sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0, mass = 0.0;
  for (int iy = 0; iy < grid.size; ++iy) {
    const double y = grid.axis(iy);
    for (int ix = 0; ix < grid.size; ++ix) {
      const double x = grid.axis(ix);
      const double f = grid.at(ix, iy);
      mass += f;
      sx += f * x;
      sy += f * y;
      sxx += f * x * x;
      syy += f * y * y;
      sxy += f * x * y;
    }
  }
  if (!(mass > 0.0))
    throw std::invalid_argument("grid.values: mass must be > 0");
  mom.mass = mass * grid.cell_area();
  mom.mean_x = sx / mass;
  mom.mean_y = sy / mass;
  mom.var_x = sxx / mass - mom.mean_x * mom.mean_x;
  mom.var_y = syy / mass - mom.mean_y * mom.mean_y;
  mom.cov_xy = sxy / mass - mom.mean_x * mom.mean_y;
  return mom;
}

EllipseAxes principal_axes(const GridMoments& moments) {
  const double half_tr = 0.5 * (moments.var_x + moments.var_y);
  const double half_diff = 0.5 * (moments.var_x - moments.var_y);
  const double disc =
      std::sqrt(half_diff * half_diff + moments.cov_xy * moments.cov_xy);
  EllipseAxes axes;
  axes.sigma_major = std::sqrt(std::max(0.0, half_tr + disc));
  axes.sigma_minor = std::sqrt(std::max(0.0, half_tr - disc));
  double ang = 0.5 * std::atan2(2.0 * moments.cov_xy, 2.0 * half_diff);
  while (ang < 0.0) ang += kPi;
  while (ang >= kPi) ang -= kPi;
  axes.angle_major = ang;
  double minor = ang + kPi / 2.0;
  if (minor >= kPi) minor -= kPi;
  axes.angle_minor = minor;
  return axes;
}

double contour_radius_1e(const QGrid& grid, double angle) {
  const GridMoments mom = grid_moments(grid);
  const double peak = grid.sample(mom.mean_x, mom.mean_y);
  if (!(peak > 0.0))
    throw std::invalid_argument("grid.values: peak must be > 0");
  const double target = peak / std::numbers::e;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double rmax =
      std::sqrt(2.0) * std::max(std::abs(grid.x0), std::abs(grid.axis(grid.size - 1)));
  const double step = grid.dx / 4.0;
  double prev = peak;
  for (double r = step; r <= rmax; r += step) {
    const double cur = grid.sample(mom.mean_x + r * c, mom.mean_y + r * s);
    if (cur < target) {
      if (prev <= target || prev == cur) return r;
      return r - step + step * (prev - target) / (prev - cur);
    }
    prev = cur;
  }
  return rmax;
}

}  // namespace opotomo::reconstruct
