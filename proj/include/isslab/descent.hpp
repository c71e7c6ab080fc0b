#ifndef ISSLAB_DESCENT_HPP
#define ISSLAB_DESCENT_HPP

// Noisy steepest descent with exact line search, x+ = F(x, B(x) u).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "isslab/comparison.hpp"
#include "isslab/domains.hpp"
#include "isslab/errors.hpp"
#include "isslab/flow.hpp"
#include "isslab/types.hpp"

namespace isslab {

struct LineSearchOptions {
  std::size_t cells = 64;
  double tol_rel = 1e-10;  // tol_lambda = tol_rel (1 + |x|) / |d|
  int max_doublings = 200;
};

struct DescentSystem {
  Loss loss;
  InputMap input;  // input.bound plays the role of K_B
  SizeFunction omega;
  LineSearchOptions search{};

  DescentSystem(Loss l, InputMap b, std::optional<SizeFunction> size = std::nullopt, LineSearchOptions ls = {})
      : loss(std::move(l)),
        input(std::move(b)),
        omega(size ? std::move(*size) : SizeFunction::norm(loss.domain)),
        search(ls) {
    if (!(input.bound >= 0.0) || !std::isfinite(input.bound))
      throw ContractError("DescentSystem: input bound K_B must be finite");
  }

  const OpenDomain& domain() const { return loss.domain; }
  Eigen::Index states() const { return loss.domain.dimension(); }
  Eigen::Index inputs() const { return input.inputs; }
  double excess(const Vector& x) const { return loss.value(x) - loss.min_value(); }
};

namespace detail {

/// V(x - mu d), or +inf when the point leaves the domain.
inline double ray_value(const DescentSystem& sys, const Vector& x, const Vector& d, double mu) {
  const Vector y = x - mu * d;
  if (!sys.domain().contains(y)) return std::numeric_limits<double>::infinity();
  try {
    return sys.loss.value(y);
  } catch (const DomainError&) {
    return std::numeric_limits<double>::infinity();
  }
}

inline double ray_slope(const DescentSystem& sys, const Vector& x, const Vector& d, double mu) {
  return -sys.loss.gradient(x - mu * d).dot(d);
}

/// V(x - mu d) - V(x). Differences near the rounding level of V are
/// recomputed as the integral of the slope (two 8-point Gauss-Legendre panels).
inline double ray_change(const DescentSystem& sys, const Vector& x, const Vector& d, double mu, double v0) {
  if (mu == 0.0) return 0.0;
  const double v = ray_value(sys, x, d, mu);
  if (!std::isfinite(v)) return v;
  const double diff = v - v0;
  if (std::abs(diff) > 1e-6 * (1.0 + std::abs(v0))) return diff;
  static constexpr double nodes[4] = {0.1834346424956498, 0.5255324099163290, 0.7966664774136267,
                                      0.9602898564975363};
  static constexpr double weights[4] = {0.3626837833783620, 0.3137066458778873, 0.2223810344533745,
                                        0.1012285362903763};
  try {
    double sum = 0.0;
    for (int panel = 0; panel < 2; ++panel) {
      const double mid = mu * (0.25 + 0.5 * panel), half = 0.25 * mu;
      for (int k = 0; k < 4; ++k) {
        sum += weights[k] * (ray_slope(sys, x, d, mid - half * nodes[k]) + ray_slope(sys, x, d, mid + half * nodes[k]));
      }
    }
    return 0.25 * mu * sum;
  } catch (const DomainError&) {
    return diff;
  }
}

inline double lambda_tolerance(const DescentSystem& sys, const Vector& x, const Vector& d) {
  return sys.search.tol_rel * (1.0 + x.norm()) / d.norm();
}

}  // namespace detail

/// sup of Lambda(x) = {lambda >= 0 : V(x - mu d) <= V(x) and x - mu d in the
/// domain for all mu in [0, lambda]}.
inline double lambda_max(const DescentSystem& sys, const Vector& x, const Vector& d) {
  if (!sys.domain().contains(x)) throw ContractError("lambda_max: point outside the domain");
  const double dn = d.norm();
  if (!(dn > 0.0)) throw ContractError("lambda_max: direction must be nonzero");
  const double v0 = sys.loss.value(x);
  if (detail::ray_slope(sys, x, d, 0.0) > 0.0) return 0.0;
  auto admissible = [&](double mu) { return detail::ray_change(sys, x, d, mu, v0) <= 0.0; };
  const double tol = detail::lambda_tolerance(sys, x, d);

  // forward scan with doubling
  double hi = std::max(tol, 1e-3 * (1.0 + x.norm()) / dn);
  int k = 0;
  while (admissible(hi)) {
    if (++k > sys.search.max_doublings) return hi;  // no exit detected: Lambda looks unbounded
    hi *= 2.0;
  }
  // an earlier exit may hide between scan points; take the first on a uniform grid
  double lo = 0.0;
  const std::size_t cells = sys.search.cells;
  for (std::size_t i = 1; i <= cells; ++i) {
    const double mu = hi * static_cast<double>(i) / static_cast<double>(cells);
    if (!admissible(mu)) {
      hi = mu;
      break;
    }
    lo = mu;
  }
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    (admissible(mid) ? lo : hi) = mid;
  }
  return lo;
}

struct LineSearchResult {
  double lambda_bar = 0.0;
  double lambda_max = 0.0;
  Vector x_plus;
};

/// Smallest minimizer of V(x - lambda d) over Lambda(x).
inline LineSearchResult line_search(const DescentSystem& sys, const Vector& x, const Vector& d) {
  LineSearchResult res{0.0, lambda_max(sys, x, d), x};
  if (res.lambda_max <= 0.0) return res;
  const double v0 = sys.loss.value(x);
  const double tol = detail::lambda_tolerance(sys, x, d);
  const double top = res.lambda_max;
  // values are measured relative to V(x)
  auto phi = [&](double mu) { return detail::ray_change(sys, x, d, std::clamp(mu, 0.0, top), v0); };

  const std::size_t cells = sys.search.cells;
  std::vector<double> nodes(cells + 1), vals(cells + 1);
  for (std::size_t i = 0; i <= cells; ++i) {
    nodes[i] = top * static_cast<double>(i) / static_cast<double>(cells);
    vals[i] = phi(nodes[i]);
  }

  // candidates: one per local minimum of the grid; ties within rounding go to the smaller step
  double best_mu = 0.0, best_v = 0.0;
  bool best_isolated = false;
  auto consider = [&](double mu, double v, bool isolated) {
    const double fuzz = 4.0 * std::numeric_limits<double>::epsilon() * std::abs(best_v);
    if (v < best_v - fuzz || (v <= best_v + fuzz && mu < best_mu)) {
      best_v = std::min(v, best_v);
      best_mu = mu;
      best_isolated = isolated;
    }
  };
  constexpr double inv_phi = 0.6180339887498949;
  for (std::size_t i = 0; i <= cells; ++i) {
    const bool left_ok = i == 0 || vals[i] <= vals[i - 1];
    const bool right_ok = i == cells || vals[i] <= vals[i + 1];
    if (!(left_ok && right_ok)) continue;
    const double a0 = nodes[i == 0 ? 0 : i - 1], b0 = nodes[i == cells ? cells : i + 1];
    double a = a0, b = b0;
    double c = b - inv_phi * (b - a), e = a + inv_phi * (b - a);
    double fc = phi(c), fe = phi(e);
    while (b - a > tol) {
      if (fc <= fe) {
        b = e;
        e = c;
        fe = fc;
        c = b - inv_phi * (b - a);
        fc = phi(c);
      } else {
        a = c;
        c = e;
        fc = fe;
        e = a + inv_phi * (b - a);
        fe = phi(e);
      }
    }
    double mu = vals[i] <= std::min(fc, fe) ? nodes[i] : (fc <= fe ? c : e);
    double v = std::min({vals[i], fc, fe});
    bool isolated = false;
    // golden-section stalls at sqrt(eps) accuracy in a flat valley; refine on the sign of the slope
    try {
      double lo = a0, hi = b0;
      if (detail::ray_slope(sys, x, d, lo) < 0.0 && detail::ray_slope(sys, x, d, hi) > 0.0) {
        for (int it = 0; it < 200 && hi - lo > 1e-3 * tol; ++it) {
          const double mid = 0.5 * (lo + hi);
          (detail::ray_slope(sys, x, d, mid) < 0.0 ? lo : hi) = mid;
        }
        const double vp = phi(hi);
        if (vp <= v + 4.0 * std::numeric_limits<double>::epsilon() * std::abs(v)) {
          mu = hi;
          v = std::min(v, vp);
          isolated = true;  // the slope is negative just to the left
        }
      }
    } catch (const DomainError&) {
    }
    consider(mu, v, isolated);
  }

  // left-scan for the smallest minimizer (not needed where the slope changes sign)
  double mu = best_mu;
  if (!best_isolated) {
    int scanned = 0;
    while (mu - tol >= 0.0 && phi(mu - tol) <= best_v && scanned < 64) {
      mu -= tol;
      ++scanned;
    }
    if (scanned == 64) {
      // a plateau: bisect for its left edge from the last grid node above the minimum
      double lo = 0.0;
      for (std::size_t i = 0; i <= cells && nodes[i] < mu; ++i)
        if (vals[i] > best_v) lo = nodes[i];
      // absolute values: differences against V(x) blur the edge to sqrt(eps V(x))
      const double level = detail::ray_value(sys, x, d, mu);
      double hi = mu;
      while (hi - lo > tol) {
        const double mid = 0.5 * (lo + hi);
        (detail::ray_value(sys, x, d, mid) <= level ? hi : lo) = mid;
      }
      mu = hi;
    }
  }
  if (!(best_v < 0.0)) mu = 0.0;
  res.lambda_bar = mu;
  res.x_plus = mu == 0.0 ? x : Vector(x - mu * d);
  return res;
}

struct StepResult {
  Vector x_plus;
  Vector p;
  Vector q;
  double lambda_bar = 0.0;
  double lambda_max = 0.0;
  bool stuck = false;  // nonzero direction but no admissible progress
};

/// F(x, q) = x - lambda_bar (p + q), and x itself when p + q vanishes.
inline StepResult descent_step(const DescentSystem& sys, const Vector& x, const Vector& u) {
  if (!sys.domain().contains(x)) throw ContractError("descent_step: point outside the domain");
  StepResult s;
  s.p = sys.loss.gradient(x);
  s.q = u.size() > 0 && u.lpNorm<Eigen::Infinity>() > 0.0 ? Vector(sys.input(x) * u) : Vector::Zero(x.size());
  const Vector d = s.p + s.q;
  if (d.norm() <= 1e-14 * (1.0 + s.p.norm())) {
    s.x_plus = x;
    return s;
  }
  const LineSearchResult ls = line_search(sys, x, d);
  s.x_plus = ls.x_plus;
  s.lambda_bar = ls.lambda_bar;
  s.lambda_max = ls.lambda_max;
  s.stuck = ls.lambda_bar == 0.0;
  return s;
}

enum class NoiseScale { none, absolute, relative };
enum class NoiseDirection { random, adversarial, fixed };

/// u_t of magnitude magnitude * decay^t, either in absolute terms or relative
/// to the gradient (|B(x) u| <= c |grad V(x)|, enforced through K_B).
struct NoiseModel {
  NoiseScale scale = NoiseScale::none;
  double magnitude = 0.0;
  double decay = 1.0;
  NoiseDirection direction = NoiseDirection::random;
  Vector fixed{};  // used with NoiseDirection::fixed

  static NoiseModel none() { return {}; }
  static NoiseModel absolute(double mu, NoiseDirection dir = NoiseDirection::random) {
    return {NoiseScale::absolute, mu, 1.0, dir, {}};
  }
  static NoiseModel relative(double c, double decay_factor = 1.0, NoiseDirection dir = NoiseDirection::random) {
    return {NoiseScale::relative, c, decay_factor, dir, {}};
  }

  Vector draw(const DescentSystem& sys, const Vector& x, std::size_t t, Rng& rng) const {
    const Eigen::Index m = sys.inputs();
    if (scale == NoiseScale::none || magnitude == 0.0) return Vector::Zero(m);
    double size = magnitude * std::pow(decay, static_cast<double>(t));
    Vector grad;
    if (scale == NoiseScale::relative || direction == NoiseDirection::adversarial) grad = sys.loss.gradient(x);
    if (scale == NoiseScale::relative) {
      const double kb = sys.input.bound;
      size = kb > 0.0 ? size * grad.norm() / kb : 0.0;
    }
    Vector dir;
    switch (direction) {
      case NoiseDirection::random: dir = uniform_on_sphere(m, 1.0, rng); break;
      case NoiseDirection::adversarial: {
        dir = -(sys.input(x).transpose() * grad);
        const double n = dir.norm();
        dir = n > 0.0 ? Vector(dir / n) : uniform_on_sphere(m, 1.0, rng);
        break;
      }
      case NoiseDirection::fixed: {
        if (fixed.size() != m || !(fixed.norm() > 0.0)) throw ContractError("NoiseModel: bad fixed direction");
        dir = fixed / fixed.norm();
        break;
      }
    }
    return size * dir;
  }
};

struct DescentTrace {
  std::vector<Vector> states;  // x_0 .. x_N
  std::vector<double> V, omega, gradnorm;
  std::vector<double> lambda_bar;  // one per step
  std::vector<Vector> inputs;      // u_t, one per step
  std::vector<bool> stuck;
  std::size_t size() const { return states.size(); }
  std::size_t stuck_steps() const { return static_cast<std::size_t>(std::count(stuck.begin(), stuck.end(), true)); }
  /// sup_t |u_t| (the sup norm of the input sequence)
  double input_sup() const {
    double s = 0.0;
    for (const Vector& u : inputs) s = std::max(s, u.norm());
    return s;
  }
  double sup_omega_after(std::size_t burn_in) const {
    double s = 0.0;
    for (std::size_t i = burn_in; i < omega.size(); ++i) s = std::max(s, omega[i]);
    return s;
  }
};

inline DescentTrace run_descent(const DescentSystem& sys, const Vector& x0, const NoiseModel& noise, std::size_t steps,
                                Rng& rng) {
  if (!sys.domain().contains(x0)) throw ContractError("run_descent: initial point outside the domain");
  DescentTrace tr;
  auto record = [&](const Vector& x) {
    tr.states.push_back(x);
    tr.V.push_back(sys.loss.value(x));
    tr.omega.push_back(sys.omega(x));
    tr.gradnorm.push_back(sys.loss.gradient(x).norm());
  };
  Vector x = x0;
  record(x);
  for (std::size_t t = 0; t < steps; ++t) {
    const Vector u = noise.draw(sys, x, t, rng);
    const StepResult s = descent_step(sys, x, u);
    tr.inputs.push_back(u);
    tr.lambda_bar.push_back(s.lambda_bar);
    tr.stuck.push_back(s.stuck);
    x = s.x_plus;
    record(x);
  }
  return tr;
}

struct LipschitzProfile {
  std::vector<double> levels;
  std::vector<double> constants;

  /// L on {V <= r}: the constant of the smallest profiled level >= r.
  double at(double r) const {
    const auto it = std::lower_bound(levels.begin(), levels.end(), r);
    if (it == levels.end()) throw ContractError("LipschitzProfile: level beyond the profiled range");
    return constants[static_cast<std::size_t>(it - levels.begin())];
  }
  double theta(double r) const { return 1.0 / (18.0 * at(r)); }
};

/// Sampled Lipschitz constants of grad V on {V <= r} inflated by `safety`.
/// Half the pairs are independent draws, half are short local chords.
inline LipschitzProfile lipschitz_profile(const DescentSystem& sys, std::span<const double> levels,
                                          std::size_t pairs_per_level, Rng& rng, double safety = 1.5,
                                          const SublevelSampler::Region& region = {},
                                          const SamplerOptions& sampler_options = {}) {
  const double vmin = sys.loss.min_value();
  std::vector<double> grid(levels.begin(), levels.end());
  std::sort(grid.begin(), grid.end());
  const SublevelSampler sampler(sys.domain(), sys.loss.value, region, sampler_options);
  LipschitzProfile prof;
  double running = 0.0;
  for (double r : grid) {
    if (!(r > vmin)) throw ContractError("lipschitz_profile: levels must exceed the minimum");
    const auto pts = sampler.draw(r, 2 * pairs_per_level, rng);
    if (pts.size() < 2) throw CoverageError("lipschitz_profile: insufficient samples");
    double width = 0.0;
    for (const Vector& p : pts) width = std::max(width, (p - sys.domain().equilibrium()).norm());
    double best = 0.0;
    auto quotient = [&](const Vector& a, const Vector& b) {
      const double dx = (a - b).norm();
      if (dx > 0.0) best = std::max(best, (sys.loss.gradient(a) - sys.loss.gradient(b)).norm() / dx);
    };
    for (std::size_t i = 0; i + 1 < pts.size(); i += 2) {
      if (i / 2 % 2 == 0) {
        quotient(pts[i], pts[i + 1]);
      } else {
        const Vector y = pts[i] + uniform_on_sphere(pts[i].size(), 1e-4 * (width + 1e-12), rng);
        if (sampler.in_set(y, r)) quotient(pts[i], y);
        quotient(pts[i], pts[i + 1]);
      }
    }
    running = std::max(running, safety * best);
    if (!(running > 0.0)) throw CoverageError("lipschitz_profile: degenerate samples");
    prof.levels.push_back(r);
    prof.constants.push_back(running);
  }
  return prof;
}

struct DecreaseReport {
  double lambda = 0.0;
  bool segment_in_domain = false;
  double fixed_step_change = 0.0;  // V(x - lambda d) - V(x)
  double fixed_step_bound = 0.0;   // -(lambda / 4) |p|^2
  double line_search_change = 0.0; // V(F(x, q)) - V(x)
  double line_search_bound = 0.0;  // -|p|^2 / (18 L)
  bool fixed_ok = false;
  bool line_search_ok = false;
  bool passed() const { return segment_in_domain && fixed_ok && line_search_ok; }
};

/// Decrease estimates under |q| <= |p| / 2 with lambda = 2 / (9 L).
inline DecreaseReport verify_decrease(const DescentSystem& sys, const Vector& x, const Vector& q, double L) {
  const Vector p = sys.loss.gradient(x);
  if (q.norm() > 0.5 * p.norm() * (1.0 + 1e-12)) throw ContractError("verify_decrease: requires |q| <= |p|/2");
  if (!(L > 0.0)) throw ContractError("verify_decrease: L must be positive");
  DecreaseReport rep;
  const Vector d = p + q;
  const double v0 = sys.loss.value(x);
  const double p2 = p.squaredNorm();
  rep.lambda = 2.0 / (9.0 * L);
  rep.segment_in_domain = true;
  for (int i = 1; i <= 64; ++i)
    if (!sys.domain().contains(x - (rep.lambda * i / 64.0) * d)) rep.segment_in_domain = false;
  auto slack = [&](double bound) { return 1e-9 * std::abs(bound) + 1e-14 * std::abs(v0); };
  rep.fixed_step_bound = -0.25 * rep.lambda * p2;
  rep.line_search_bound = -p2 / (18.0 * L);
  if (rep.segment_in_domain) {
    rep.fixed_step_change = sys.loss.value(x - rep.lambda * d) - v0;
    rep.fixed_ok = rep.fixed_step_change <= rep.fixed_step_bound + slack(rep.fixed_step_bound);
  }
  Vector xp = x;
  if (d.norm() > 1e-14 * (1.0 + p.norm())) xp = line_search(sys, x, d).x_plus;
  rep.line_search_change = sys.loss.value(xp) - v0;
  rep.line_search_ok = rep.line_search_change <= rep.line_search_bound + slack(rep.line_search_bound);
  return rep;
}

struct DtIssViolation {
  std::size_t step;
  double omega;
  double bound;
};

struct DtIssReport {
  std::size_t checked = 0;
  std::vector<DtIssViolation> violations;
  double worst_margin = std::numeric_limits<double>::infinity();
  bool passed() const { return violations.empty(); }
};

/// omega(x_t) <= beta(omega(x_0), t) + gamma(sup_t |u_t|), t = 0..N.
inline DtIssReport dt_iss_check(const DescentTrace& trace, const KLCurve& beta, const MonotoneCurve& gamma) {
  DtIssReport rep;
  if (trace.size() == 0) return rep;
  std::vector<double> steps(trace.size());
  for (std::size_t t = 0; t < steps.size(); ++t) steps[t] = static_cast<double>(t);
  const auto b = beta.trajectory(trace.omega.front(), steps);
  const double g = gamma(trace.input_sup());
  for (std::size_t t = 0; t < trace.size(); ++t) {
    const double bound = b[t] + g;
    ++rep.checked;
    rep.worst_margin = std::min(rep.worst_margin, bound - trace.omega[t]);
    if (trace.omega[t] > bound * (1.0 + 1e-6)) rep.violations.push_back({t, trace.omega[t], bound});
  }
  return rep;
}

struct GammaConstruction {
  double chi_mu = 0.0;   // chi(mu)
  double raw = 0.0;      // sampled max of W(f(x, u)) over W(x) <= chi(mu), |u| <= mu
  double gamma = 0.0;    // max(raw, chi(mu)), the level of P_mu
  std::size_t samples = 0;
  std::size_t invariance_checked = 0;
  std::size_t invariance_violations = 0;
};

/// gamma(mu) = max{W(f(x, u)) : |u| <= mu, W(x) <= chi(mu)} on samples, and a
/// one-step forward-invariance test of P_mu = {W <= gamma(mu)}.
inline GammaConstruction dt_gamma_construction(const DescentSystem& sys, const MonotoneCurve& chi, double mu,
                                               std::size_t count, Rng& rng, const SublevelSampler::Region& region = {},
                                               const SamplerOptions& sampler_options = {}) {
  if (!(mu >= 0.0)) throw ContractError("dt_gamma_construction: mu must be nonnegative");
  GammaConstruction out;
  if (mu == 0.0) {
    const Vector& xbar = sys.domain().equilibrium();
    const Vector xp = descent_step(sys, xbar, Vector::Zero(sys.inputs())).x_plus;
    out.raw = sys.excess(xp);
    out.gamma = out.raw;
    return out;
  }
  if (count == 0) throw CoverageError("dt_gamma_construction: empty sample request");
  const SublevelSampler sampler(sys.domain(), [&sys](const Vector& x) { return sys.excess(x); }, region,
                                sampler_options);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Eigen::Index m = sys.inputs();
  auto draw_u = [&](std::size_t i) {
    // every fourth draw sits on the sphere |u| = mu
    const double radius = i % 4 == 0 ? mu : mu * std::pow(unit(rng), 1.0 / static_cast<double>(m));
    return Vector(uniform_on_sphere(m, radius, rng));
  };
  auto one_step = [&](const Vector& x, const Vector& u) { return sys.excess(descent_step(sys, x, u).x_plus); };

  out.chi_mu = chi(mu);
  const auto xs = sampler.draw(out.chi_mu, count, rng);
  if (xs.empty()) throw CoverageError("dt_gamma_construction: no samples in {W <= chi(mu)}");
  out.samples = xs.size();
  for (std::size_t i = 0; i < xs.size(); ++i) out.raw = std::max(out.raw, one_step(xs[i], draw_u(i)));
  out.gamma = std::max(out.raw, out.chi_mu);

  const auto ps = sampler.draw(out.gamma, count, rng);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    ++out.invariance_checked;
    if (one_step(ps[i], draw_u(i)) > out.gamma + 1e-9 * (1.0 + out.gamma)) ++out.invariance_violations;
  }
  return out;
}

/// Continuous positive definite function given by linear interpolation of
/// nodes (the first node is (0, 0)); constant beyond the last node.
struct Polyline {
  std::vector<double> r;
  std::vector<double> v;
  double operator()(double x) const {
    if (x <= r.front()) return v.front();
    if (x >= r.back()) return v.back();
    const auto it = std::upper_bound(r.begin(), r.end(), x);
    const std::size_t k = static_cast<std::size_t>(it - r.begin());
    const double s = (x - r[k - 1]) / (r[k] - r[k - 1]);
    return v[k - 1] + s * (v[k] - v[k - 1]);
  }
};

/// Strictly increasing class-K curve below `f` on its node range.
inline MonotoneCurve class_k_minorant(const Polyline& f) {
  const std::size_t n = f.r.size();
  if (n < 2) throw ContractError("class_k_minorant: need at least two nodes");
  std::vector<double> v(n);
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t k = n; k-- > 0;) {
    m = std::min(m, f.v[k]);
    v[k] = m;
  }
  for (std::size_t k = 1; k < n; ++k) {
    if (!(v[k] > 0.0)) throw ContractError("class_k_minorant: function is not positive definite on the nodes");
    v[k] *= 1.0 - 1e-6 * static_cast<double>(n - 1 - k) / static_cast<double>(n);
  }
  v[0] = 0.0;
  return MonotoneCurve(f.r, std::move(v), 1e-12 * std::max(1.0, f.v.back()), true);
}

struct DtCertificate {
  MonotoneCurve chi;  // chi(|grad V| / (2 K_B)) >= omega on samples
  Polyline alpha;     // alpha(r) <= theta(r + Vmin) alpha_tilde(r)
  std::size_t checked = 0;
  std::size_t implication_violations = 0;
};

struct CertificateOptions {
  std::vector<double> chi_levels;  // levels of |grad V| / (2 K_B) sampled for chi
  std::size_t samples_per_level = 200;
  std::size_t verification_pairs = 1000;
  double max_excess = 0.0;  // certificate region {W <= max_excess}; 0 uses the last profile level
  SamplerOptions sampler{};
};

/// Discrete-time ISS-Lyapunov certificate: omega(x) >= chi(|u|) implies
/// V(f(x, u)) - V(x) <= -alpha(V(x) - Vmin), checked on sampled pairs.
inline DtCertificate build_dt_lyapunov_certificate(const DescentSystem& sys, const LipschitzProfile& profile,
                                                   const MonotoneCurve& alpha_tilde, const CertificateOptions& opt,
                                                   Rng& rng) {
  if (profile.levels.empty()) throw ContractError("build_dt_lyapunov_certificate: empty Lipschitz profile");
  const double vmin = sys.loss.min_value();
  const double kb = sys.input.bound;
  if (!(kb > 0.0)) throw ContractError("build_dt_lyapunov_certificate: K_B must be positive");
  const double wmax = opt.max_excess > 0.0 ? opt.max_excess : profile.levels.back() - vmin;
  if (!(wmax + vmin <= profile.levels.back() * (1.0 + 1e-12)))
    throw ContractError("build_dt_lyapunov_certificate: region exceeds the Lipschitz profile");
  const auto region = [&sys, wmax](const Vector& x) { return sys.excess(x) <= wmax; };

  const SizeFunction grad_size(sys.domain(), [&sys, kb](const Vector& x) { return sys.loss.gradient(x).norm() / (2.0 * kb); },
                               "gradient-size");
  CompareOptions copt;
  copt.samples_per_level = opt.samples_per_level;
  copt.sampler = opt.sampler;
  copt.region = region;
  std::vector<double> levels = opt.chi_levels;
  if (levels.empty()) {
    // geometric grid up to the largest gradient size seen in the region
    const SublevelSampler probe(sys.domain(), [&sys](const Vector& x) { return sys.excess(x); }, {}, opt.sampler);
    double top = 0.0;
    for (const Vector& x : probe.draw(wmax, 4 * opt.samples_per_level, rng)) top = std::max(top, grad_size(x));
    for (double r = top; r > 1e-4 * top && levels.size() < 40; r /= 1.3) levels.push_back(r);
    std::reverse(levels.begin(), levels.end());
  }
  DtCertificate cert{padded(compare_sizes(sys.omega, grad_size, levels, copt, rng).alpha, 1.05), {}, 0, 0};

  // alpha on the grid of alpha_tilde breakpoints and profile levels
  std::vector<double> grid{0.0};
  for (double b : alpha_tilde.breakpoints())
    if (b > 0.0 && b < wmax) grid.push_back(b);
  for (double l : profile.levels)
    if (l - vmin > 0.0 && l - vmin < wmax) grid.push_back(l - vmin);
  grid.push_back(wmax);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  cert.alpha.r = grid;
  // grid contains every breakpoint of alpha_tilde, so on each cell the node
  // values sit below the linear function theta(right end) * alpha_tilde
  cert.alpha.v.assign(grid.size(), 0.0);
  for (std::size_t k = 1; k < grid.size(); ++k) {
    const double right = k + 1 < grid.size() ? grid[k + 1] : grid[k];
    cert.alpha.v[k] = profile.theta(right + vmin) * alpha_tilde(grid[k]);
  }

  // the implication on sampled (x, u) with chi(|u|) <= omega(x)
  const SublevelSampler sampler(sys.domain(), [&sys](const Vector& x) { return sys.excess(x); }, {}, opt.sampler);
  const auto xs = sampler.draw(wmax, opt.verification_pairs, rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (const Vector& x : xs) {
    const double w = sys.omega(x);
    const double umax = w > 0.0 ? invert(cert.chi, w) : 0.0;
    const Vector u = uniform_on_sphere(sys.inputs(), umax * unit(rng), rng);
    const double dv = sys.loss.value(descent_step(sys, x, u).x_plus) - sys.loss.value(x);
    const double bound = -cert.alpha(sys.excess(x));
    ++cert.checked;
    if (dv > bound + 1e-9 * std::abs(bound) + 1e-14 * std::abs(sys.loss.value(x))) ++cert.implication_violations;
  }
  return cert;
}

}  // namespace isslab

#endif  // ISSLAB_DESCENT_HPP
