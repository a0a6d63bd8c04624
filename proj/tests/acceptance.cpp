#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "opotomo/io.hpp"
#include "opotomo/model.hpp"
#include "opotomo/protocol.hpp"
#include "opotomo/reconstruct.hpp"
#include "opotomo/rng.hpp"
#include "opotomo/sde.hpp"

namespace io = opotomo::io;
namespace model = opotomo::model;
namespace protocol = opotomo::protocol;
namespace reconstruct = opotomo::reconstruct;
namespace rng = opotomo::rng;
namespace sde = opotomo::sde;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Verdict = std::pair<bool, std::string>;

std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return out;
}

std::vector<double> half_turn_angles(std::size_t n) {
  std::vector<double> angles(n);
  for (std::size_t k = 0; k < n; ++k)
    angles[k] = std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
  return angles;
}

std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof buf, format, args);
  va_end(args);
  return buf;
}

// 1. Vacuum prep at zero bias splits the lobes evenly.
Verdict vacuum_balance() {
  protocol::PreparationSpec prep;
  model::BiasSpec bias;
  const std::size_t n = 10000;
  const auto est = protocol::measure_probability(prep, bias, 0.0, 2.0, n, 11);
  const double dev = std::abs(est.p_hat - 0.5);
  return {dev <= 0.015,
          fmt("p_hat = %.4f, |p - 0.5| = %.4f, gate 0.015", est.p_hat, dev)};
}

// 2. Monte Carlo probabilities track the closed form on a 66-point grid.
Verdict closed_form_grid() {
  const std::size_t n = 10000;
  int misses = 0, total = 0;
  double worst = 0.0;
  std::uint64_t stream = 0;
  for (double lambda : {1.5, 2.0, 3.0}) {
    for (double tau0 : {0.0, 0.5}) {
      for (double b : linspace(-2.0, 2.0, 11)) {
        model::BiasSpec bias;
        bias.amplitude = b;
        bias.injection_delay = tau0;
        const double p = model::erf_probability(bias, lambda);
        protocol::PreparationSpec prep;
        const auto est = protocol::measure_probability(
            prep, bias, 0.0, lambda, n, rng::counter_mix(8601, stream++));
        const double sigma =
            std::sqrt(std::max(p * (1.0 - p), 1e-12) / static_cast<double>(n));
        const double z = std::abs(est.p_hat - p) / sigma;
        worst = std::max(worst, z);
        if (z > 3.0) ++misses;
        ++total;
      }
    }
  }
  return {misses <= 2, fmt("%d of %d points beyond 3 sigma (worst z = %.2f), "
                           "gate <= 2",
                           misses, total, worst)};
}

// 3. Injecting a bias equals displacing the initial state.
Verdict displacement_equivalence() {
  const std::size_t n = 10000;
  double worst = 0.0;
  bool ok = true;
  std::uint64_t stream = 0;
  for (double b : {-1.0, -0.5, 0.25, 0.5, 1.0}) {
    model::BiasSpec bias;
    bias.amplitude = b;
    protocol::PreparationSpec vacuum;
    const auto biased = protocol::measure_probability(
        vacuum, bias, 0.0, 2.0, n, rng::counter_mix(333, stream++));
    protocol::PreparationSpec displaced;
    displaced.kind = protocol::PreparationSpec::Kind::analytic_gaussian;
    displaced.gaussian.mean = {model::displacement(b, 2.0), 0.0};
    displaced.gaussian.var_major = 1e-12;
    displaced.gaussian.var_minor = 1e-12;
    model::BiasSpec none;
    const auto shifted = protocol::measure_probability(
        displaced, none, 0.0, 2.0, n, rng::counter_mix(333, stream++));
    const double pbar = 0.5 * (biased.p_hat + shifted.p_hat);
    const double sigma = std::sqrt(
        std::max(pbar * (1.0 - pbar), 1e-12) * 2.0 / static_cast<double>(n));
    const double z = std::abs(biased.p_hat - shifted.p_hat) / sigma;
    worst = std::max(worst, z);
    if (z > 3.0) ok = false;
  }
  return {ok, fmt("worst |dp| = %.2f sigma over 5 bias values, gate 3", worst)};
}

// 4. Fitted transition widths grow as exp((lambda - 1) tau0).
Verdict delay_scaling() {
  protocol::SweepPlan plan;
  plan.prep.kind = protocol::PreparationSpec::Kind::vacuum_point;
  plan.lambda = 2.0;
  plan.tau0_grid = {0.0, 0.5, 1.0};
  plan.b_auto_points = 13;
  plan.b_auto_span = 3.0;
  plan.n_per_point = 10000;
  plan.seed = 40424;
  const auto curves = protocol::dynamics_scan(plan);
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const double m = static_cast<double>(curves.size());
  for (const auto& curve : curves) {
    const auto fit = reconstruct::fit_erf(curve);
    sx += curve.tau0;
    sy += std::log(fit.sigma_b);
    sxx += curve.tau0 * curve.tau0;
    sxy += curve.tau0 * std::log(fit.sigma_b);
  }
  const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
  const double rel = std::abs(slope - 1.0);
  return {rel <= 0.05,
          fmt("log-width slope = %.4f vs lambda - 1 = 1, |err| = %.1f%%, "
              "gate 5%%",
              slope, 100.0 * rel)};
}

// 5. Filtered back-projection round-trips an anisotropic Gaussian.
Verdict radon_round_trip() {
  model::GaussianStateSpec spec;
  spec.var_major = 1.0;
  spec.var_minor = 0.25;
  const auto axis = linspace(-3.5, 3.5, 128);
  const auto sino =
      reconstruct::analytic_sinogram(spec, half_turn_angles(12), axis);
  const auto rec = reconstruct::inverse_radon(sino, 128);
  double num = 0.0, den = 0.0;
  for (int iy = 0; iy < rec.size; ++iy) {
    for (int ix = 0; ix < rec.size; ++ix) {
      const double x = rec.axis(ix);
      const double y = rec.axis(iy);
      if (std::abs(x) > 3.0 || std::abs(y) > 1.5) continue;
      const double ref = model::gaussian_q({x, y}, spec);
      num += (rec.at(ix, iy) - ref) * (rec.at(ix, iy) - ref);
      den += ref * ref;
    }
  }
  const double rel_l2 = std::sqrt(num / den);
  const bool ok = rel_l2 < 0.05 && rec.clipped_mass_fraction < 0.03;
  return {ok, fmt("rel L2 = %.3f (gate 0.05), clipped mass = %.4f (gate 0.03)",
                  rel_l2, rec.clipped_mass_fraction)};
}

// 6. End-to-end tomography of a relaxation-prepared squeezed state.
Verdict squeezed_tomography() {
  protocol::SweepPlan plan;
  plan.prep.kind = protocol::PreparationSpec::Kind::sde_relaxation;
  plan.prep.lambda_prep = 0.8;
  plan.prep.relax_time = 20.0;
  plan.lambda = 2.0;
  plan.theta_grid = half_turn_angles(12);
  plan.n_per_point = 1000;
  plan.seed = 20260819;
  const auto curves = protocol::sweep_phase(plan);

  std::vector<reconstruct::ErfFit> fits;
  fits.reserve(curves.size());
  const double scale = model::bias_to_displacement(1.0, 2.0, 0.0);
  double max_sigma = 0.0, max_center = 0.0;
  for (const auto& curve : curves) {
    fits.push_back(reconstruct::fit_erf(curve));
    max_sigma = std::max(max_sigma, scale * fits.back().sigma_b);
    max_center = std::max(max_center, std::abs(scale * fits.back().center));
  }
  const double halfwidth = 4.0 * max_sigma + max_center;
  const auto axis = linspace(-halfwidth, halfwidth, 129);
  reconstruct::Sinogram sino;
  sino.label = "measured";
  for (std::size_t i = 0; i < curves.size(); ++i)
    sino.marginals.push_back(reconstruct::sensitivity_to_marginal(
        curves[i], fits[i], 2.0, 0.0,
        reconstruct::SensitivityMode::parametric, axis));
  const auto rec = reconstruct::inverse_radon(sino, 128);

  const auto axes = reconstruct::principal_axes(reconstruct::grid_moments(rec));
  const double minor_deg = axes.angle_minor * 180.0 / std::numbers::pi;
  const double r_major = reconstruct::contour_radius_1e(rec, axes.angle_major);
  const double r_minor = reconstruct::contour_radius_1e(rec, axes.angle_minor);
  const bool contour_ok =
      std::abs(minor_deg - 90.0) <= 15.0 && r_major > r_minor;

  const double ratio =
      (fits[0].sigma_b * fits[0].sigma_b) / (fits[6].sigma_b * fits[6].sigma_b);
  const double oracle =
      model::measured_marginal_variance(
          model::relaxed_quadrature_variance(0.8, true), 2.0) /
      model::measured_marginal_variance(
          model::relaxed_quadrature_variance(0.8, false), 2.0);
  const bool ratio_ok = std::abs(ratio / oracle - 1.0) <= 0.20;

  model::GaussianStateSpec kernel_ref;
  kernel_ref.var_major = model::measured_marginal_variance(0.0, 2.0);
  kernel_ref.var_minor = kernel_ref.var_major;
  const auto vac_sino =
      reconstruct::analytic_sinogram(kernel_ref, sino.angles(), axis, "vacuum");
  const auto report = reconstruct::squeezing_db(sino, vac_sino);
  const bool db_ok = report.db_min <= 3.01 && report.db_max <= 3.01;

  return {contour_ok && ratio_ok && db_ok,
          fmt("minor axis %.1f deg (gate 90 +- 15), var ratio %.3f vs %.3f "
              "(gate 20%%), dB range [%.2f, %.2f] (gate <= 3.01)",
              minor_deg, ratio, oracle, report.db_min, report.db_max)};
}

// 7. Saturated dynamics settle on the bistable fixed points.
Verdict bistable_fixed_points() {
  sde::Schedule sched;
  sched.lambda = sde::PiecewiseLinear(2.0);
  sched.saturation_g = 0.01;
  sde::IntegratorConfig cfg;
  cfg.dt = 0.005;
  cfg.tau_end = 20.0;
  const std::size_t n = 10000;
  const auto ens = sde::run_ensemble(
      [](rng::Engine&) { return sde::PhasePoint{0.0, 0.0}; }, sched, cfg, n,
      77077);
  double mean_abs = 0.0;
  for (double x : ens.final_x) mean_abs += std::abs(x);
  mean_abs /= static_cast<double>(n);
  const double split =
      static_cast<double>(ens.n_positive) / static_cast<double>(n);
  const double target = std::sqrt((2.0 - 1.0) / 0.01);
  const bool ok = std::abs(mean_abs - target) <= 0.1 * target &&
                  std::abs(split - 0.5) <= 3.0 * std::sqrt(0.25 /
                                                           static_cast<double>(n));
  return {ok, fmt("mean |X| = %.3f vs %.1f (gate 10%%), split = %.4f "
                  "(gate 0.5 +- 0.015)",
                  mean_abs, target, split)};
}

int run_tool(const std::string& args, const fs::path& log_dir, int idx) {
  const fs::path so = log_dir / fmt("tool%d.out", idx);
  const fs::path se = log_dir / fmt("tool%d.err", idx);
  const std::string cmd = std::string(OPOTOMO_CLI_PATH) + " " + args + " > " +
                          so.string() + " 2> " + se.string();
  const int rc = std::system(cmd.c_str());
  return rc != -1 && WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// 8. Identical seeds reproduce byte-identical exported data files.
Verdict deterministic_exports() {
  const fs::path root =
      fs::temp_directory_path() /
      ("opotomo_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(root);
  json cfg;
  cfg["seed"] = 2718;
  cfg["sweep"] = {{"n_angles", 4}, {"b_auto_points", 9}, {"n_per_point", 500}};
  const fs::path cfg_path = root / "sweep.json";
  io::write_file_atomic(cfg_path.string(), cfg.dump(2) + "\n");

  const fs::path d1 = root / "run1";
  const fs::path d2 = root / "run2";
  int calls = 0;
  if (run_tool("sweep --config " + cfg_path.string() + " --out " + d1.string(),
               root, calls++) != 0)
    return {false, "first sweep run failed"};
  if (run_tool("sweep --config " + cfg_path.string() + " --out " + d2.string(),
               root, calls++) != 0)
    return {false, "second sweep run failed"};

  int compared = 0;
  for (const auto& entry : fs::directory_iterator(d1)) {
    const std::string name = entry.path().filename().string();
    if (name == "manifest.json") continue;  // carries the wall clock
    const std::string a = io::read_file(entry.path().string());
    const std::string b = io::read_file((d2 / name).string());
    if (a != b) return {false, "sweep file differs between runs: " + name};
    ++compared;
  }
  const json m1 = json::parse(io::read_file((d1 / "manifest.json").string()));
  const json m2 = json::parse(io::read_file((d2 / "manifest.json").string()));
  if (m1.at("outputs") != m2.at("outputs"))
    return {false, "manifest checksums differ between runs"};
  for (const json& entry : m1.at("outputs")) {
    const std::string name = entry.at("file");
    const std::uint64_t sum =
        std::strtoull(entry.at("fnv1a64").get<std::string>().c_str(), nullptr, 16);
    if (io::fnv1a64(io::read_file((d1 / name).string())) != sum)
      return {false, "manifest checksum does not match file: " + name};
  }

  const fs::path r1 = root / "recon1";
  const fs::path r2 = root / "recon2";
  if (run_tool("reconstruct --in " + d1.string() + " --out " + r1.string() +
                   " --grid-size 32 --axis-points 33",
               root, calls++) != 0)
    return {false, "first reconstruct run failed"};
  if (run_tool("reconstruct --in " + d1.string() + " --out " + r2.string() +
                   " --grid-size 32 --axis-points 33",
               root, calls++) != 0)
    return {false, "second reconstruct run failed"};
  for (const auto& entry : fs::directory_iterator(r1)) {
    const std::string name = entry.path().filename().string();
    if (name == "manifest.json") continue;
    const std::string a = io::read_file(entry.path().string());
    const std::string b = io::read_file((r2 / name).string());
    if (a != b) return {false, "reconstruct file differs between runs: " + name};
    ++compared;
  }
  return {true, fmt("%d exported files byte-identical across reruns, "
                    "checksums verified",
                    compared)};
}

int report(int idx, const char* summary, Verdict (*criterion)()) {
  const auto start = std::chrono::steady_clock::now();
  Verdict verdict{false, "exception"};
  try {
    verdict = criterion();
  } catch (const std::exception& e) {
    verdict = {false, std::string("exception: ") + e.what()};
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  std::printf("[%s] criterion %d: %s (%s) [%.1fs]\n",
              verdict.first ? "PASS" : "FAIL", idx, summary,
              verdict.second.c_str(), secs);
  std::fflush(stdout);
  return verdict.first ? 0 : 1;
}

}  // namespace

int main() {
  int fails = 0;
  fails += report(1, "vacuum lobes split evenly at zero bias", vacuum_balance);
  fails += report(2, "Monte Carlo matches the closed-form probability grid",
                  closed_form_grid);
  fails += report(3, "bias injection equals an initial displacement",
                  displacement_equivalence);
  fails += report(4, "transition width grows exponentially with delay",
                  delay_scaling);
  fails += report(5, "inverse Radon round-trips an anisotropic Gaussian",
                  radon_round_trip);
  fails += report(6, "end-to-end tomography of a squeezed preparation",
                  squeezed_tomography);
  fails += report(7, "saturated dynamics reach the bistable fixed points",
                  bistable_fixed_points);
  fails += report(8, "reruns with identical seeds export identical bytes",
                  deterministic_exports);
  std::printf("%d of 8 criteria passed\n", 8 - fails);
  return fails;
}
