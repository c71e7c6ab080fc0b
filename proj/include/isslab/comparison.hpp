#ifndef ISSLAB_COMPARISON_HPP
#define ISSLAB_COMPARISON_HPP

// Numeric comparison functions: piecewise-linear class K / K-infinity curves
// with linear tails, and KL functions generated by a scalar decrease law.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "isslab/errors.hpp"
#include "isslab/ode.hpp"
#include "isslab/types.hpp"

namespace isslab {

/// Nondecreasing piecewise-linear map [0, inf) -> [0, inf) anchored at the
/// origin. Beyond the last breakpoint the curve continues with `tail_slope`.
/// A strict curve is strictly increasing everywhere (so it needs a positive
/// tail slope) and is therefore of class K-infinity.
class MonotoneCurve {
 public:
  MonotoneCurve() : MonotoneCurve({0.0, 1.0}, {0.0, 1.0}, 1.0, true) {}

  MonotoneCurve(std::vector<double> breakpoints, std::vector<double> values, double tail_slope,
                bool strict)
      : breakpoints_(std::move(breakpoints)),
        values_(std::move(values)),
        tail_slope_(tail_slope),
        strict_(strict) {
    if (breakpoints_.empty() || breakpoints_.size() != values_.size())
      throw ContractError("MonotoneCurve: breakpoints and values must be nonempty and equal length");
    if (breakpoints_.front() != 0.0 || values_.front() != 0.0)
      throw ContractError("MonotoneCurve: curve must pass through the origin");
    if (!(tail_slope_ >= 0.0) || !std::isfinite(tail_slope_))
      throw ContractError("MonotoneCurve: tail slope must be finite and nonnegative");
    for (std::size_t i = 1; i < breakpoints_.size(); ++i) {
      if (!(breakpoints_[i] > breakpoints_[i - 1]) || !std::isfinite(breakpoints_[i]))
        throw ContractError("MonotoneCurve: breakpoints must be finite and strictly increasing");
      if (!std::isfinite(values_[i]) || values_[i] < values_[i - 1])
        throw ContractError("MonotoneCurve: values must be finite and nondecreasing");
      if (strict_ && !(values_[i] > values_[i - 1]))
        throw ContractError("MonotoneCurve: strict curve has a flat segment");
    }
    if (strict_ && !(tail_slope_ > 0.0))
      throw ContractError("MonotoneCurve: strict curve needs a positive tail slope");
  }

  static MonotoneCurve identity() { return linear(1.0); }

  static MonotoneCurve linear(double slope) {
    if (!(slope > 0.0)) throw ContractError("MonotoneCurve::linear: slope must be positive");
    return MonotoneCurve({0.0, 1.0}, {0.0, slope}, slope, true);
  }

  /// Interpolates `f` on `grid` (which must start at 0). For convex f the chords
  /// lie above f on the grid range; the tail continues with the last chord slope.
  template <class F>
  static MonotoneCurve sampled(std::span<const double> grid, F&& f, bool strict) {
    std::vector<double> r(grid.begin(), grid.end());
    std::vector<double> v;
    v.reserve(r.size());
    for (double x : r) v.push_back(x == 0.0 ? 0.0 : f(x));
    double tail = 0.0;
    if (r.size() >= 2) {
      const std::size_t n = r.size();
      tail = (v[n - 1] - v[n - 2]) / (r[n - 1] - r[n - 2]);
    }
    return MonotoneCurve(std::move(r), std::move(v), tail, strict);
  }

  const std::vector<double>& breakpoints() const { return breakpoints_; }
  const std::vector<double>& values() const { return values_; }
  double tail_slope() const { return tail_slope_; }
  bool strict() const { return strict_; }
  bool is_kinfty() const { return strict_ && tail_slope_ > 0.0; }

  double operator()(double r) const {
    if (!(r >= 0.0)) throw DomainError("MonotoneCurve: negative argument");
    if (r >= breakpoints_.back()) {
      if (std::isinf(r)) return tail_slope_ > 0.0 ? r : values_.back();
      return values_.back() + tail_slope_ * (r - breakpoints_.back());
    }
    const auto it = std::upper_bound(breakpoints_.begin(), breakpoints_.end(), r);
    const std::size_t k = static_cast<std::size_t>(it - breakpoints_.begin());
    const double r0 = breakpoints_[k - 1], r1 = breakpoints_[k];
    const double v0 = values_[k - 1], v1 = values_[k];
    return v0 + (v1 - v0) * ((r - r0) / (r1 - r0));
  }

 private:
  std::vector<double> breakpoints_;
  std::vector<double> values_;
  double tail_slope_;
  bool strict_;
};

inline double evaluate(const MonotoneCurve& curve, double r) { return curve(r); }

/// Exact inverse on the piecewise-linear representation.
inline double invert(const MonotoneCurve& curve, double s) {
  if (!curve.is_kinfty()) throw ContractError("invert: curve must be strict with a positive tail");
  if (!(s >= 0.0)) throw DomainError("invert: negative argument");
  const auto& r = curve.breakpoints();
  const auto& v = curve.values();
  if (s >= v.back()) return r.back() + (s - v.back()) / curve.tail_slope();
  const auto it = std::upper_bound(v.begin(), v.end(), s);
  const std::size_t k = static_cast<std::size_t>(it - v.begin());
  return r[k - 1] + (r[k] - r[k - 1]) * ((s - v[k - 1]) / (v[k] - v[k - 1]));
}

/// The inverse function as a curve (breakpoints and values swapped).
inline MonotoneCurve inverse_curve(const MonotoneCurve& curve) {
  if (!curve.is_kinfty())
    throw ContractError("inverse_curve: curve must be strict with a positive tail");
  return MonotoneCurve(curve.values(), curve.breakpoints(), 1.0 / curve.tail_slope(), true);
}

/// Pointwise multiple c * curve(r), c > 0.
inline MonotoneCurve scaled(const MonotoneCurve& curve, double factor) {
  if (!(factor > 0.0)) throw ContractError("scaled: factor must be positive");
  std::vector<double> v = curve.values();
  for (double& x : v) x *= factor;
  return MonotoneCurve(curve.breakpoints(), std::move(v), curve.tail_slope() * factor,
                       curve.strict());
}

/// factor * curve with the tail slope raised to at least the mean slope of the
/// last node. Used on sampled majorants, which flatten once a sublevel family
/// covers the whole sampled region and then sit slightly below the true sup.
inline MonotoneCurve padded(const MonotoneCurve& curve, double factor) {
  if (!(factor >= 1.0)) throw ContractError("padded: factor must be at least 1");
  const MonotoneCurve c = scaled(curve, factor);
  const double mean = c.breakpoints().back() > 0.0 ? c.values().back() / c.breakpoints().back() : 0.0;
  return MonotoneCurve(c.breakpoints(), c.values(), std::max(c.tail_slope(), mean), c.strict());
}

/// outer o inner, exact: the grid is inner's breakpoints plus the preimages of
/// outer's breakpoints, on which the composition is linear between nodes.
inline MonotoneCurve compose(const MonotoneCurve& outer, const MonotoneCurve& inner) {
  std::vector<double> grid = inner.breakpoints();
  const auto& ir = inner.breakpoints();
  const auto& iv = inner.values();
  for (double b : outer.breakpoints()) {
    if (b <= 0.0) continue;
    if (b >= iv.back()) {
      if (inner.tail_slope() > 0.0) grid.push_back(ir.back() + (b - iv.back()) / inner.tail_slope());
      continue;
    }
    for (std::size_t k = 1; k < ir.size(); ++k) {
      if (iv[k - 1] < b && b < iv[k]) {
        grid.push_back(ir[k - 1] + (ir[k] - ir[k - 1]) * ((b - iv[k - 1]) / (iv[k] - iv[k - 1])));
        break;
      }
    }
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  const bool strict = outer.strict() && inner.strict();
  std::vector<double> r{0.0}, v{0.0};
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double value = outer(inner(grid[i]));
    if (value < v.back() || (strict && !(value > v.back()))) continue;
    r.push_back(grid[i]);
    v.push_back(value);
  }
  // Past the last node inner is affine and, when its tail rises, has already
  // crossed outer's last breakpoint.
  const double tail = inner.tail_slope() > 0.0 ? outer.tail_slope() * inner.tail_slope() : 0.0;
  return MonotoneCurve(std::move(r), std::move(v), tail, strict && tail > 0.0);
}

struct CurveSample {
  double r;
  double value;
};

/// Majorizes nondecreasing data by a strict K-infinity curve: interpolate the
/// shifted nodes (r_k, value_{k+1}) and add eps * r with
/// eps = 1e-9 * max(1, last value). `origin_slope` additionally forces
/// m(r) >= origin_slope * r on the first segment.
inline MonotoneCurve majorize_kinfty(std::span<const CurveSample> samples, double origin_slope = 0.0) {
  std::vector<CurveSample> s(samples.begin(), samples.end());
  if (s.empty() || s.front().r > 0.0) s.insert(s.begin(), CurveSample{0.0, 0.0});
  if (s.front().r != 0.0 || s.front().value != 0.0)
    throw ContractError("majorize_kinfty: first sample must be (0, 0)");
  for (std::size_t k = 1; k < s.size(); ++k) {
    if (!(s[k].r > s[k - 1].r)) throw ContractError("majorize_kinfty: abscissae must increase");
    if (s[k].value < s[k - 1].value)
      throw ContractError("majorize_kinfty: sample ordinates decrease");
  }
  const std::size_t n = s.size();
  std::vector<double> r{0.0}, v{0.0};
  for (std::size_t k = 1; k < n; ++k) {
    r.push_back(s[k].r);
    v.push_back(k + 1 < n ? s[k + 1].value : s[k].value);
  }
  if (origin_slope > 0.0 && r.size() >= 2 && v[1] < origin_slope * r[1]) {
    const double knee = v[1] / origin_slope;
    if (knee > 0.0) {
      r.insert(r.begin() + 1, knee);
      v.insert(v.begin() + 1, v[1]);
    } else {
      v[1] = origin_slope * r[1];
    }
  }
  const double eps = 1e-9 * std::max(1.0, s.back().value);
  for (std::size_t k = 0; k < r.size(); ++k) v[k] += eps * r[k];
  return MonotoneCurve(std::move(r), std::move(v), eps, true);
}

enum class DecreaseMode { continuous, discrete };

/// beta(r, t): solution of y' = -alpha(y)/2 (continuous) or of the recursion
/// y+ = y - alpha(y) (discrete), started at y(0) = r.
class KLCurve {
 public:
  KLCurve(MonotoneCurve generator, DecreaseMode mode, std::vector<std::string> warnings = {})
      : generator_(std::move(generator)), mode_(mode), warnings_(std::move(warnings)) {}

  DecreaseMode mode() const { return mode_; }
  /// alpha in continuous mode, the step map r - alpha(r) in discrete mode.
  const MonotoneCurve& generator() const { return generator_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  bool clipped() const { return !warnings_.empty(); }

  double operator()(double r, double t) const {
    const double times[] = {t};
    return trajectory(r, times).front();
  }

  /// beta(r, t) for every t in `times` (sorted ascending, nonnegative).
  std::vector<double> trajectory(double r, std::span<const double> times) const {
    if (!(r >= 0.0)) throw DomainError("KLCurve: negative initial value");
    std::vector<double> out;
    out.reserve(times.size());
    if (mode_ == DecreaseMode::discrete) {
      double y = r;
      long step = 0;
      for (double t : times) {
        if (!(t >= 0.0)) throw DomainError("KLCurve: negative time");
        const long target = static_cast<long>(std::floor(t));
        for (; step < target && y > 0.0; ++step) y = generator_(y);
        out.push_back(y);
      }
      return out;
    }
    if (r == 0.0) return std::vector<double>(times.size(), 0.0);
    std::vector<double> stops;
    for (double t : times) {
      if (!(t >= 0.0)) throw DomainError("KLCurve: negative time");
      if (t > 0.0 && (stops.empty() || t > stops.back())) stops.push_back(t);
    }
    std::vector<std::pair<double, double>> reached{{0.0, r}};
    if (!stops.empty()) {
      Vector y = scalar_vector(r);
      ode::Options opt;
      opt.rtol = 1e-8;
      opt.atol = 1e-14 * r;
      opt.h_floor = 0.0;
      const auto rhs = [this](double, const Vector& yy) {
        return scalar_vector(-0.5 * generator_(std::max(yy(0), 0.0)));
      };
      const auto ok = [](const Vector& yy) { return yy(0) >= 0.0; };
      const auto obs = [&](double t, const Vector& yy, bool at_stop) {
        if (at_stop) reached.emplace_back(t, std::max(yy(0), 0.0));
      };
      const auto term = ode::integrate(rhs, ok, y, 0.0, stops, opt, obs);
      if (term != ode::Termination::completed)
        throw NumericError("KLCurve: comparison ODE integration failed");
    }
    std::size_t j = 0;
    for (double t : times) {
      while (j + 1 < reached.size() && reached[j + 1].first <= t) ++j;
      out.push_back(reached[j].second);
    }
    return out;
  }

  /// Samples beta on an r-by-t grid; row i holds beta(r_grid[i], t_grid).
  std::vector<std::vector<double>> cache(std::span<const double> r_grid,
                                         std::span<const double> t_grid) const {
    std::vector<std::vector<double>> rows;
    rows.reserve(r_grid.size());
    for (double r : r_grid) rows.push_back(trajectory(r, t_grid));
    return rows;
  }

 private:
  MonotoneCurve generator_;
  DecreaseMode mode_;
  std::vector<std::string> warnings_;
};

/// Builds the KL function of the comparison system driven by `alpha`.
/// In discrete mode alpha is clipped to min(alpha(r), r) and the step map
/// r - alpha(r) is replaced by its running maximum so that it is nondecreasing;
/// both adjustments only weaken alpha and are reported as warnings.
inline KLCurve kl_from_decrease(const MonotoneCurve& alpha, DecreaseMode mode) {
  if (!alpha.strict()) throw ContractError("kl_from_decrease: alpha must be of class K");
  if (mode == DecreaseMode::continuous) return KLCurve(alpha, mode);

  std::vector<std::string> warnings;
  const auto& r = alpha.breakpoints();
  const auto& a = alpha.values();
  std::vector<double> g(r.size());
  bool clipped_above = false, made_monotone = false;
  double running = 0.0;
  for (std::size_t k = 0; k < r.size(); ++k) {
    double step = r[k] - std::min(a[k], r[k]);
    if (a[k] > r[k]) clipped_above = true;
    if (step < running) {
      made_monotone = true;
      step = running;
    }
    running = step;
    g[k] = step;
  }
  double tail = 1.0 - alpha.tail_slope();
  if (tail < 0.0) {
    clipped_above = true;
    tail = 0.0;
  }
  if (clipped_above) warnings.emplace_back("alpha exceeded the identity and was clipped");
  if (made_monotone) warnings.emplace_back("r - alpha(r) was not monotone; used its running maximum");
  return KLCurve(MonotoneCurve(r, std::move(g), tail, false), mode, std::move(warnings));
}

inline void to_json(nlohmann::json& j, const MonotoneCurve& c) {
  j = nlohmann::json{{"breakpoints", c.breakpoints()},
                     {"values", c.values()},
                     {"tail_slope", c.tail_slope()},
                     {"strict", c.strict()}};
}

inline void from_json(const nlohmann::json& j, MonotoneCurve& c) {
  c = MonotoneCurve(j.at("breakpoints").get<std::vector<double>>(),
                    j.at("values").get<std::vector<double>>(), j.at("tail_slope").get<double>(),
                    j.at("strict").get<bool>());
}

}  // namespace isslab

#endif  // ISSLAB_COMPARISON_HPP
