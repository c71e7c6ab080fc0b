#ifndef ISSLAB_ODE_HPP
#define ISSLAB_ODE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>

#include "isslab/errors.hpp"
#include "isslab/types.hpp"

namespace isslab::ode {

enum class Termination { completed, domain_exit, step_floor };

struct Options {
  double rtol = 1e-8;
  double atol = 1e-8;
  double h_initial = 0.0;  // 0 selects a heuristic first step
  double h_floor = 1e-12;
  double h_max = std::numeric_limits<double>::infinity();
  std::size_t max_steps = 50'000'000;
};

// Dormand-Prince 5(4) tableau.
namespace dp {
inline constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
inline constexpr double a21 = 1.0 / 5;
inline constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
inline constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
inline constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                        a54 = -212.0 / 729;
inline constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                        a64 = 49.0 / 176, a65 = -5103.0 / 18656;
inline constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                        b6 = 11.0 / 84;
// b - b* (error weights)
inline constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                        e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
}  // namespace dp

/// Integrates y' = f(t, y) over one smooth segment, landing exactly on every
/// time in `stops` (sorted, all > t0, last one is the segment end). Trial
/// steps whose stages or result fail `admissible` are halved; falling below
/// `h_floor` ends the run with Termination::step_floor. `observe(t, y, is_stop)`
/// receives every accepted step; `y` is updated in place.
template <class Rhs, class Admissible, class Observer>
Termination integrate(Rhs&& f, Admissible&& admissible, Vector& y, double t0,
                      std::span<const double> stops, const Options& opt, Observer&& observe,
                      double* h_carry = nullptr) {
  using namespace dp;
  if (stops.empty()) return Termination::completed;
  const double t_end = stops.back();
  double t = t0;
  double h = (h_carry != nullptr && *h_carry > 0.0) ? *h_carry : opt.h_initial;

  auto rhs = [&](double tt, const Vector& yy, Vector& out) -> bool {
    if (!admissible(yy)) return false;
    try {
      out = f(tt, yy);
    } catch (const DomainExitError&) {
      return false;
    }
    return out.allFinite();
  };

  Vector k1, k2, k3, k4, k5, k6, k7, ytmp, ynew, err;
  if (!rhs(t, y, k1)) return Termination::domain_exit;
  if (h <= 0.0) {
    const double scale = opt.atol + opt.rtol * y.norm();
    const double d = k1.norm();
    h = d > 0.0 ? 0.01 * scale / d : 1e-3 * (t_end - t0);
    h = std::clamp(h, 1e-6 * (t_end - t0), 0.1 * (t_end - t0));
  }
  h = std::min(h, opt.h_max);

  std::size_t stop_index = 0;
  std::size_t steps = 0;
  while (stop_index < stops.size()) {
    const double target = stops[stop_index];
    if (steps++ > opt.max_steps) throw NumericError("ode: step budget exhausted");
    bool truncated = false;
    double hs = h;
    if (t + hs >= target || target - (t + hs) < 1e-12 * std::max(1.0, std::abs(target))) {
      hs = target - t;
      truncated = true;
    }

    bool ok = true;
    ytmp = y + hs * (a21 * k1);
    ok = ok && rhs(t + c2 * hs, ytmp, k2);
    if (ok) {
      ytmp = y + hs * (a31 * k1 + a32 * k2);
      ok = rhs(t + c3 * hs, ytmp, k3);
    }
    if (ok) {
      ytmp = y + hs * (a41 * k1 + a42 * k2 + a43 * k3);
      ok = rhs(t + c4 * hs, ytmp, k4);
    }
    if (ok) {
      ytmp = y + hs * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
      ok = rhs(t + c5 * hs, ytmp, k5);
    }
    if (ok) {
      ytmp = y + hs * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
      ok = rhs(t + hs, ytmp, k6);
    }
    if (ok) {
      ynew = y + hs * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
      ok = rhs(t + hs, ynew, k7);
    }
    if (!ok) {
      h = 0.5 * hs;
      if (h < opt.h_floor) return Termination::step_floor;
      continue;
    }

    err = hs * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    double enorm = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double sc = opt.atol + opt.rtol * std::max(std::abs(y(i)), std::abs(ynew(i)));
      enorm = std::max(enorm, std::abs(err(i)) / sc);
    }
    if (!std::isfinite(enorm)) enorm = 1e10;

    if (enorm <= 1.0) {
      t = truncated ? target : t + hs;
      y = ynew;
      k1 = k7;
      const bool at_stop = truncated;
      observe(t, static_cast<const Vector&>(y), at_stop);
      if (at_stop) ++stop_index;
      const double factor =
          enorm == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(enorm, -0.2), 0.2, 5.0);
      // a truncated step says nothing about how large the next one may be
      h = std::min(opt.h_max, truncated ? std::max(h, hs * factor) : hs * factor);
    } else {
      h = hs * std::clamp(0.9 * std::pow(enorm, -0.2), 0.1, 0.9);
      if (h < opt.h_floor) return Termination::step_floor;
    }
  }
  if (h_carry != nullptr) *h_carry = h;
  return Termination::completed;
}

}  // namespace isslab::ode

#endif  // ISSLAB_ODE_HPP
