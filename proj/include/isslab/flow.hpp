#ifndef ISSLAB_FLOW_HPP
#define ISSLAB_FLOW_HPP

// Perturbed gradient flow x' = -eta grad V(x) + B(x) u(t).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/SVD>

#include "isslab/comparison.hpp"
#include "isslab/domains.hpp"
#include "isslab/errors.hpp"
#include "isslab/ode.hpp"
#include "isslab/types.hpp"

namespace isslab {

/// x -> B(x) (n x m) together with a declared bound C >= sup |B(x)|.
struct InputMap {
  std::function<Matrix(const Vector&)> matrix;
  Eigen::Index inputs = 1;
  double bound = 1.0;

  static InputMap constant(Matrix b) {
    const double c = b.jacobiSvd().singularValues()(0);
    const Eigen::Index m = b.cols();
    return InputMap{[b = std::move(b)](const Vector&) { return b; }, m, c};
  }
  static InputMap identity(Eigen::Index n) { return constant(Matrix::Identity(n, n)); }

  Matrix operator()(const Vector& x) const { return matrix(x); }
};

inline double operator_norm(const Matrix& m) {
  return m.size() == 0 ? 0.0 : m.jacobiSvd().singularValues()(0);
}

struct PerturbedGradientSystem {
  Loss loss;
  double eta = 1.0;
  InputMap input;
  SizeFunction omega;

  PerturbedGradientSystem(Loss l, double learning_rate, InputMap b, std::optional<SizeFunction> size = std::nullopt)
      : loss(std::move(l)),
        eta(learning_rate),
        input(std::move(b)),
        omega(size ? std::move(*size) : SizeFunction::norm(loss.domain)) {
    if (!(eta > 0.0) || !std::isfinite(eta)) throw ContractError("PerturbedGradientSystem: eta must be positive");
    if (!(input.bound >= 0.0) || !std::isfinite(input.bound))
      throw ContractError("PerturbedGradientSystem: input bound C must be finite");
  }

  const OpenDomain& domain() const { return loss.domain; }
  Eigen::Index states() const { return loss.domain.dimension(); }
  Eigen::Index inputs() const { return input.inputs; }

  Vector rhs(const Vector& x, const Vector& u) const {
    Vector f = -eta * loss.gradient(x);
    if (u.size() > 0 && u.lpNorm<Eigen::Infinity>() > 0.0) f += input(x) * u;
    return f;
  }

  /// Largest |B(x)| over `samples` divided by C; at most 1 certifies the bound.
  double input_bound_ratio(std::span<const Vector> samples) const {
    double worst = 0.0;
    for (const Vector& x : samples) worst = std::max(worst, operator_norm(input(x)));
    return input.bound > 0.0 ? worst / input.bound : (worst > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
  }
};

enum class SignalKind { zero, constant, piecewise_constant, sinusoidal, decaying };

inline std::string to_string(SignalKind k) {
  switch (k) {
    case SignalKind::zero: return "zero";
    case SignalKind::constant: return "constant";
    case SignalKind::piecewise_constant: return "piecewise-constant";
    case SignalKind::sinusoidal: return "sinusoidal";
    case SignalKind::decaying: return "decaying";
  }
  return "unknown";
}

/// Piecewise-continuous input signal u: [0, inf) -> R^m.
class InputSignal {
 public:
  static InputSignal zero(Eigen::Index m) {
    InputSignal s(SignalKind::zero, m);
    s.amplitude_ = Vector::Zero(m);
    return s;
  }
  static InputSignal constant(Vector value) {
    InputSignal s(SignalKind::constant, value.size());
    s.amplitude_ = std::move(value);
    return s;
  }
  /// values[i] holds on [switch_times[i-1], switch_times[i]) with switch_times[-1] = 0.
  static InputSignal piecewise_constant(std::vector<double> switch_times, std::vector<Vector> values) {
    if (values.size() != switch_times.size() + 1)
      throw ContractError("InputSignal: need one more value than switch times");
    for (std::size_t i = 0; i < switch_times.size(); ++i)
      if (!(switch_times[i] > (i == 0 ? 0.0 : switch_times[i - 1])))
        throw ContractError("InputSignal: switch times must be positive and increasing");
    const Eigen::Index m = values.front().size();
    for (const Vector& v : values)
      if (v.size() != m) throw ContractError("InputSignal: inconsistent value dimensions");
    InputSignal s(SignalKind::piecewise_constant, m);
    s.switches_ = std::move(switch_times);
    s.values_ = std::move(values);
    return s;
  }
  /// Alternates between +value and -value every half period, up to `horizon`.
  static InputSignal square_wave(Vector value, double period, double horizon) {
    if (!(period > 0.0)) throw ContractError("InputSignal: period must be positive");
    std::vector<double> times;
    std::vector<Vector> values{value};
    for (double t = 0.5 * period; t < horizon; t += 0.5 * period) {
      times.push_back(t);
      values.push_back(values.size() % 2 == 0 ? Vector(value) : Vector(-value));
    }
    return piecewise_constant(std::move(times), std::move(values));
  }
  /// amplitude * sin(frequency t + phase).
  static InputSignal sinusoidal(Vector amplitude, double frequency, double phase = 0.0) {
    InputSignal s(SignalKind::sinusoidal, amplitude.size());
    s.amplitude_ = std::move(amplitude);
    s.rate_ = frequency;
    s.phase_ = phase;
    return s;
  }
  /// amplitude * exp(-rate t).
  static InputSignal decaying(Vector amplitude, double rate) {
    if (!(rate >= 0.0)) throw ContractError("InputSignal: decay rate must be nonnegative");
    InputSignal s(SignalKind::decaying, amplitude.size());
    s.amplitude_ = std::move(amplitude);
    s.rate_ = rate;
    return s;
  }

  SignalKind kind() const { return kind_; }
  Eigen::Index dimension() const { return dim_; }

  Vector operator()(double t) const {
    switch (kind_) {
      case SignalKind::zero: return Vector::Zero(dim_);
      case SignalKind::constant: return amplitude_;
      case SignalKind::piecewise_constant: {
        const auto it = std::upper_bound(switches_.begin(), switches_.end(), t);
        return values_[static_cast<std::size_t>(it - switches_.begin())];
      }
      case SignalKind::sinusoidal: return amplitude_ * std::sin(rate_ * t + phase_);
      case SignalKind::decaying: return amplitude_ * std::exp(-rate_ * t);
    }
    return Vector::Zero(dim_);
  }

  /// Value used on the smooth piece (lo, hi); piecewise-constant signals use
  /// the interior value so that segment endpoints see the correct branch.
  Vector on_segment(double t, double lo, double hi) const {
    if (kind_ == SignalKind::piecewise_constant) return (*this)(0.5 * (lo + hi));
    return (*this)(t);
  }

  /// Euclidean sup over [0, inf).
  double sup_norm() const {
    if (kind_ == SignalKind::piecewise_constant) {
      double s = 0.0;
      for (const Vector& v : values_) s = std::max(s, v.norm());
      return s;
    }
    return amplitude_.norm();
  }

  /// Discontinuities inside (0, horizon).
  std::vector<double> discontinuities(double horizon) const {
    std::vector<double> out;
    for (double t : switches_)
      if (t > 0.0 && t < horizon) out.push_back(t);
    return out;
  }

  std::string describe() const { return to_string(kind_); }

 private:
  InputSignal(SignalKind kind, Eigen::Index m) : kind_(kind), dim_(m) {
    if (m <= 0) throw ContractError("InputSignal: dimension must be positive");
  }

  SignalKind kind_;
  Eigen::Index dim_;
  Vector amplitude_;
  double rate_ = 0.0;
  double phase_ = 0.0;
  std::vector<double> switches_;
  std::vector<Vector> values_;
};

using Termination = ode::Termination;

inline std::string to_string(Termination t) {
  switch (t) {
    case Termination::completed: return "completed";
    case Termination::domain_exit: return "domain-exit";
    case Termination::step_floor: return "step-floor";
  }
  return "unknown";
}

struct FlowTrace {
  std::vector<double> times;
  std::vector<Vector> states;
  std::vector<double> V;
  std::vector<double> omega;
  std::vector<double> gradnorm;
  std::vector<Vector> inputs;
  std::vector<double> breaks;  // input discontinuities inside the horizon
  double horizon = 0.0;
  Termination termination = Termination::completed;

  std::size_t size() const { return times.size(); }
  double sup_omega_after(double burn_in) const {
    double s = 0.0;
    for (std::size_t i = 0; i < times.size(); ++i)
      if (times[i] >= burn_in) s = std::max(s, omega[i]);
    return s;
  }
};

struct FlowOptions {
  double tol = 1e-8;
  double atol_factor = 1e-2;     // atol = tol * atol_factor
  double output_dt = 0.0;        // 0 selects horizon / 2000
  bool record_adaptive = false;  // also record the integrator's own steps
  double floor_factor = 1e-12;   // step floor = floor_factor * horizon
};

/// Adaptive Dormand-Prince integration of the perturbed flow, one smooth
/// input segment at a time.
inline FlowTrace integrate(const PerturbedGradientSystem& sys, const Vector& x0, const InputSignal& u,
                           double horizon, const FlowOptions& options = {}) {
  if (!(horizon > 0.0)) throw ContractError("integrate: horizon must be positive");
  if (!sys.domain().contains(x0)) throw ContractError("integrate: initial point lies outside the domain");
  if (u.dimension() != sys.inputs()) throw ContractError("integrate: input dimension mismatch");

  FlowTrace trace;
  trace.horizon = horizon;
  trace.breaks = u.discontinuities(horizon);
  auto record = [&](double t, const Vector& x, const Vector& uv) {
    trace.times.push_back(t);
    trace.states.push_back(x);
    trace.V.push_back(sys.loss.value(x));
    trace.omega.push_back(sys.omega(x));
    trace.gradnorm.push_back(sys.loss.gradient(x).norm());
    trace.inputs.push_back(uv);
  };

  const double dt = options.output_dt > 0.0 ? options.output_dt : horizon / 2000.0;
  const std::size_t cells = static_cast<std::size_t>(std::ceil(horizon / dt - 1e-9));
  std::vector<double> grid;
  for (std::size_t i = 1; i < cells; ++i) grid.push_back(horizon * static_cast<double>(i) / static_cast<double>(cells));
  grid.push_back(horizon);

  std::vector<double> edges{0.0};
  edges.insert(edges.end(), trace.breaks.begin(), trace.breaks.end());
  edges.push_back(horizon);

  ode::Options opt;
  opt.rtol = options.tol;
  opt.atol = options.tol * options.atol_factor;
  opt.h_floor = options.floor_factor * horizon;

  Vector x = x0;
  record(0.0, x, u(0.0));
  double h_carry = 0.0;
  for (std::size_t s = 0; s + 1 < edges.size(); ++s) {
    const double lo = edges[s], hi = edges[s + 1];
    std::vector<double> stops;
    for (double g : grid)
      if (g > lo + 0.25 * dt && g < hi - 0.25 * dt) stops.push_back(g);
    stops.push_back(hi);
    auto f = [&](double t, const Vector& y) { return sys.rhs(y, u.on_segment(t, lo, hi)); };
    auto ok = [&](const Vector& y) { return sys.domain().contains(y); };
    auto observe = [&](double t, const Vector& y, bool at_stop) {
      if (!at_stop && !options.record_adaptive) return;
      if (t <= trace.times.back()) return;
      record(t, y, u.on_segment(t, lo, hi));
    };
    trace.termination = ode::integrate(f, ok, x, lo, stops, opt, observe, &h_carry);
    if (trace.termination != Termination::completed) break;
  }
  return trace;
}

/// Fornberg's recursion for the weights of the first derivative at z on the
/// nodes xs.
inline std::vector<double> first_derivative_weights(double z, std::span<const double> xs) {
  const std::size_t n = xs.size();
  std::vector<std::vector<double>> c(n, std::vector<double>(2, 0.0));
  double c1 = 1.0, c4 = xs[0] - z;
  c[0][0] = 1.0;
  for (std::size_t i = 1; i < n; ++i) {
    const std::size_t mn = std::min<std::size_t>(i, 1);
    double c2 = 1.0;
    const double c5 = c4;
    c4 = xs[i] - z;
    for (std::size_t j = 0; j < i; ++j) {
      const double c3 = xs[i] - xs[j];
      c2 *= c3;
      if (j == i - 1) {
        for (std::size_t k = mn; k >= 1; --k) c[i][k] = c1 * (static_cast<double>(k) * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
        c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
      }
      for (std::size_t k = mn; k >= 1; --k) c[j][k] = (c4 * c[j][k] - static_cast<double>(k) * c[j][k - 1]) / c3;
      c[j][0] = c4 * c[j][0] / c3;
    }
    c1 = c2;
  }
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = c[i][1];
  return w;
}

struct LissViolation {
  std::size_t index;
  double t;
  double dVdt;
  double bound;
};

struct LissReport {
  std::size_t checked = 0;
  std::vector<LissViolation> violations;
  double worst_excess = -std::numeric_limits<double>::infinity();  // max of dV/dt - bound
  bool passed() const { return violations.empty(); }
};

/// Checks dV/dt <= -(eta/2)|grad V|^2 + C^2/(2 eta)|u|^2 at every recorded
/// point, with dV/dt from 5-point finite differences inside each smooth piece.
/// Points on an input discontinuity are checked against both one-sided limits.
inline LissReport check_liss(const PerturbedGradientSystem& sys, const FlowTrace& trace, const InputSignal& u,
                             double slack = 1e-6) {
  LissReport report;
  const double c = sys.input.bound;
  std::vector<double> edges{0.0};
  edges.insert(edges.end(), trace.breaks.begin(), trace.breaks.end());
  edges.push_back(trace.horizon);
  for (std::size_t s = 0; s + 1 < edges.size(); ++s) {
    const double lo = edges[s], hi = edges[s + 1];
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < trace.size(); ++i)
      if (trace.times[i] >= lo && trace.times[i] <= hi) idx.push_back(i);
    if (idx.size() < 2) continue;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const std::size_t width = std::min<std::size_t>(5, idx.size());
      std::size_t first = j >= width / 2 ? j - width / 2 : 0;
      first = std::min(first, idx.size() - width);
      std::vector<double> ts, vs;
      for (std::size_t k = first; k < first + width; ++k) {
        ts.push_back(trace.times[idx[k]]);
        vs.push_back(trace.V[idx[k]]);
      }
      const std::size_t i = idx[j];
      const auto w = first_derivative_weights(trace.times[i], ts);
      double dv = 0.0;
      for (std::size_t k = 0; k < width; ++k) dv += w[k] * vs[k];
      const double un = u.on_segment(trace.times[i], lo, hi).norm();
      const double g = trace.gradnorm[i];
      const double bound = -0.5 * sys.eta * g * g + c * c / (2.0 * sys.eta) * un * un;
      ++report.checked;
      report.worst_excess = std::max(report.worst_excess, dv - bound);
      if (dv > bound + slack * (1.0 + std::abs(dv))) report.violations.push_back({i, trace.times[i], dv, bound});
    }
  }
  return report;
}

/// Unforced monotonicity: largest increase V[i+1] - V[i] along the trace.
inline double max_increase(std::span<const double> v) {
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < v.size(); ++i) worst = std::max(worst, v[i] - v[i - 1]);
  return v.size() < 2 ? 0.0 : worst;
}

/// Continuous-time ISS estimate
///   omega(x(t)) <= max{ a1^-1(beta(a2(omega0), t)), a1^-1(ahat^-1(2 gamma(mu))) }
/// where beta solves y' = -ahat(y)/2.
class IssEnvelope {
 public:
  IssEnvelope(MonotoneCurve alpha_hat, MonotoneCurve gamma, MonotoneCurve alpha1, MonotoneCurve alpha2)
      : alpha_hat_(std::move(alpha_hat)),
        gamma_(std::move(gamma)),
        alpha1_(std::move(alpha1)),
        alpha2_(std::move(alpha2)),
        beta_(kl_from_decrease(alpha_hat_, DecreaseMode::continuous)) {
    if (!alpha1_.is_kinfty()) throw ContractError("iss_envelope: alpha1 must be invertible (class K-infinity)");
    if (!alpha_hat_.is_kinfty()) throw ContractError("iss_envelope: alpha_hat must be of class K-infinity");
  }

  double asymptotic(double mu) const { return invert(alpha1_, invert(alpha_hat_, 2.0 * gamma_(mu))); }

  double operator()(double omega0, double t, double mu) const {
    return std::max(invert(alpha1_, beta_(alpha2_(omega0), t)), asymptotic(mu));
  }

  /// Bound at each of `times` (ascending) for one initial size.
  std::vector<double> along(double omega0, std::span<const double> times, double mu) const {
    auto b = beta_.trajectory(alpha2_(omega0), times);
    const double floor = asymptotic(mu);
    for (double& v : b) v = std::max(invert(alpha1_, v), floor);
    return b;
  }

  const KLCurve& beta() const { return beta_; }
  const MonotoneCurve& alpha_hat() const { return alpha_hat_; }
  const MonotoneCurve& gamma() const { return gamma_; }

 private:
  MonotoneCurve alpha_hat_, gamma_, alpha1_, alpha2_;
  KLCurve beta_;
};

inline IssEnvelope iss_envelope(const MonotoneCurve& alpha_hat, const MonotoneCurve& gamma,
                                const MonotoneCurve& alpha1, const MonotoneCurve& alpha2) {
  return IssEnvelope(alpha_hat, gamma, alpha1, alpha2);
}

/// gamma(s) = C^2 s^2 / (2 eta), interpolated by chords on [0, s_max]
/// (a majorant there, since the function is convex).
inline MonotoneCurve quadratic_input_gain(double c, double eta, double s_max, std::size_t cells = 400) {
  std::vector<double> grid;
  for (std::size_t i = 0; i <= cells; ++i) grid.push_back(s_max * static_cast<double>(i) / static_cast<double>(cells));
  const double k = c * c / (2.0 * eta);
  return MonotoneCurve::sampled(grid, [k](double s) { return k * s * s; }, c > 0.0);
}

struct IssViolation {
  std::size_t index;
  double t;
  double omega;
  double bound;
};

struct IssReport {
  std::size_t checked = 0;
  std::vector<IssViolation> violations;
  double worst_margin = std::numeric_limits<double>::infinity();  // min of bound - omega
  bool passed() const { return violations.empty(); }
};

inline IssReport verify_iss_trace(const FlowTrace& trace, const IssEnvelope& envelope, double usup) {
  IssReport report;
  if (trace.size() == 0) return report;
  const auto bound = envelope.along(trace.omega.front(), trace.times, usup);
  for (std::size_t i = 0; i < trace.size(); ++i) {
    ++report.checked;
    report.worst_margin = std::min(report.worst_margin, bound[i] - trace.omega[i]);
    if (trace.omega[i] > bound[i] * (1.0 + 1e-6) + 1e-9)
      report.violations.push_back({i, trace.times[i], trace.omega[i], bound[i]});
  }
  return report;
}

struct GainOptions {
  std::size_t realizations = 4;  // alternating constant / sinusoidal signals
  double horizon = 40.0;
  double burn_in = 30.0;
  FlowOptions flow{};
};

struct GainEstimate {
  std::vector<double> mus;
  std::vector<double> raw;       // +inf where some realization left the domain
  std::vector<double> monotone;  // cumulative max over the finite entries
  std::vector<std::size_t> domain_exits;
  MonotoneCurve curve;
};

/// Realization r of sup-norm mu: even r are constant signals, odd r are
/// sinusoids, with direction and sign varying with r.
inline InputSignal gain_probe_signal(Eigen::Index m, double mu, std::size_t r) {
  Vector dir = Vector::Zero(m);
  dir(static_cast<Eigen::Index>((r / 4) % static_cast<std::size_t>(m))) = 1.0;
  if ((r / 2) % 2 == 1) dir = -dir;
  if (r % 2 == 0) return InputSignal::constant(mu * dir);
  return InputSignal::sinusoidal(mu * dir, 1.0 / (1.0 + static_cast<double>(r / 2)));
}

/// Empirical ISS gain: for each mu, the largest omega after `burn_in` over the
/// probe signals and initial points.
inline GainEstimate estimate_gain(const PerturbedGradientSystem& sys, std::span<const double> mus,
                                  std::span<const Vector> initial_points, const GainOptions& options = {}) {
  if (initial_points.empty()) throw ContractError("estimate_gain: need at least one initial point");
  GainEstimate est{{}, {}, {}, {}, MonotoneCurve::identity()};
  std::vector<double> grid(mus.begin(), mus.end());
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  if (grid.empty() || grid.front() != 0.0) grid.insert(grid.begin(), 0.0);
  for (double mu : grid) {
    if (!(mu >= 0.0)) throw ContractError("estimate_gain: magnitudes must be nonnegative");
    double worst = 0.0;
    std::size_t exits = 0;
    if (mu > 0.0) {
      for (std::size_t r = 0; r < options.realizations; ++r) {
        const InputSignal u = gain_probe_signal(sys.inputs(), mu, r);
        for (const Vector& x0 : initial_points) {
          const FlowTrace tr = integrate(sys, x0, u, options.horizon, options.flow);
          if (tr.termination != Termination::completed) {
            ++exits;
            continue;
          }
          worst = std::max(worst, tr.sup_omega_after(options.burn_in));
        }
      }
    }
    est.mus.push_back(mu);
    est.raw.push_back(exits > 0 ? std::numeric_limits<double>::infinity() : worst);
    est.domain_exits.push_back(exits);
  }
  std::vector<double> bp, vals;
  double running = 0.0;
  for (std::size_t i = 0; i < est.mus.size(); ++i) {
    const double v = est.mus[i] == 0.0 ? 0.0 : est.raw[i];
    if (std::isfinite(v)) running = std::max(running, v);
    est.monotone.push_back(std::isfinite(v) ? running : std::numeric_limits<double>::infinity());
    if (std::isfinite(v)) {
      bp.push_back(est.mus[i]);
      vals.push_back(running);
    }
  }
  if (bp.size() < 2) {
    est.curve = MonotoneCurve({0.0, 1.0}, {0.0, 0.0}, 0.0, false);
  } else {
    const double tail = (vals.back() - vals[vals.size() - 2]) / (bp.back() - bp[bp.size() - 2]);
    est.curve = MonotoneCurve(bp, vals, std::max(0.0, tail), false);
  }
  return est;
}

}  // namespace isslab

#endif  // ISSLAB_FLOW_HPP
