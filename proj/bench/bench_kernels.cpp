#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numbers>
#include <string>
#include <vector>

#include "opotomo/model.hpp"
#include "opotomo/reconstruct.hpp"
#include "opotomo/rng.hpp"
#include "opotomo/sde.hpp"

namespace model = opotomo::model;
namespace reconstruct = opotomo::reconstruct;
namespace rng = opotomo::rng;
namespace sde = opotomo::sde;

namespace {

// Best wall time over `reps` runs of `body`, in seconds.
template <typename F>
double best_of(int reps, F&& body) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto start = std::chrono::steady_clock::now();
    body();
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    best = std::min(best, secs);
  }
  return best;
}

void report(const char* name, double serial, double parallel) {
  std::printf("%-16s serial %8.3f s   parallel %8.3f s   speedup %.2fx\n",
              name, serial, parallel, serial / parallel);
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t n = 20000;
  int grid = 256;
  if (argc > 1) n = std::strtoull(argv[1], nullptr, 10);
  if (argc > 2) grid = std::atoi(argv[2]);
  std::printf("ensemble: %zu trajectories, radon: %d^2 grid\n", n, grid);

  sde::Schedule sched;
  sched.lambda = sde::PiecewiseLinear(2.0);
  sde::IntegratorConfig cfg;
  cfg.dt = 0.005;
  cfg.tau_end = 6.0;
  const auto vacuum = [](rng::Engine&) { return sde::PhasePoint{0.0, 0.0}; };
  sde::Ensemble ser, par;
  const double t_ser = best_of(
      3, [&] { ser = sde::run_ensemble_serial(vacuum, sched, cfg, n, 99); });
  const double t_par =
      best_of(3, [&] { par = sde::run_ensemble(vacuum, sched, cfg, n, 99); });
  if (par.n_positive != ser.n_positive || par.final_x != ser.final_x) {
    std::fprintf(stderr, "error: parallel ensemble diverged from reference\n");
    return 1;
  }
  report("run_ensemble", t_ser, t_par);

  model::GaussianStateSpec spec;
  spec.var_major = 1.0;
  spec.var_minor = 0.25;
  spec.axis_angle = 0.4;
  std::vector<double> angles(180), axis(513);
  for (std::size_t k = 0; k < angles.size(); ++k)
    angles[k] = std::numbers::pi * static_cast<double>(k) / 180.0;
  for (std::size_t i = 0; i < axis.size(); ++i)
    axis[i] = -4.0 + 8.0 * static_cast<double>(i) / 512.0;
  const auto sino = reconstruct::analytic_sinogram(spec, angles, axis);
  reconstruct::QGrid gser, gpar;
  const double r_ser =
      best_of(3, [&] { gser = reconstruct::inverse_radon_serial(sino, grid); });
  const double r_par =
      best_of(3, [&] { gpar = reconstruct::inverse_radon(sino, grid); });
  if (gpar.values != gser.values) {
    std::fprintf(stderr, "error: parallel back-projection diverged from reference\n");
    return 1;
  }
  report("inverse_radon", r_ser, r_par);
  return 0;
}
