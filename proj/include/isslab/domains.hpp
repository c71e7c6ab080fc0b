#ifndef ISSLAB_DOMAINS_HPP
#define ISSLAB_DOMAINS_HPP

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

#include "isslab/comparison.hpp"
#include "isslab/errors.hpp"
#include "isslab/types.hpp"

namespace isslab {

/// Open subset of R^n together with its distinguished equilibrium.
class OpenDomain {
 public:
  using Membership = std::function<bool(const Vector&)>;
  using Distance = std::function<double(const Vector&)>;

  OpenDomain(Eigen::Index dimension, Membership membership, std::optional<Distance> boundary_distance,
             Vector equilibrium, std::string name = "domain")
      : dimension_(dimension),
        membership_(std::move(membership)),
        boundary_distance_(std::move(boundary_distance)),
        equilibrium_(std::move(equilibrium)),
        name_(std::move(name)) {
    if (dimension_ <= 0) throw ContractError("OpenDomain: dimension must be positive");
    if (equilibrium_.size() != dimension_)
      throw ContractError("OpenDomain: equilibrium has the wrong dimension");
    if (!membership_(equilibrium_)) throw ContractError("OpenDomain: equilibrium is not a member");
    if (boundary_distance_ && !((*boundary_distance_)(equilibrium_) > 0.0))
      throw ContractError("OpenDomain: boundary distance must be positive at the equilibrium");
  }

  static OpenDomain full_space(Vector equilibrium) {
    const Eigen::Index n = equilibrium.size();
    return OpenDomain(
        n, [n](const Vector& x) { return x.size() == n && x.allFinite(); }, std::nullopt,
        std::move(equilibrium), "full-space");
  }

  /// Product of open intervals (lower_i, upper_i); infinite bounds are allowed.
  static OpenDomain open_box(Vector lower, Vector upper, Vector equilibrium) {
    const Eigen::Index n = equilibrium.size();
    if (lower.size() != n || upper.size() != n)
      throw ContractError("open_box: bound dimensions disagree with the equilibrium");
    if ((lower.array() >= upper.array()).any()) throw ContractError("open_box: empty interval");
    const bool bounded_somewhere = lower.array().isFinite().any() || upper.array().isFinite().any();
    auto member = [lower, upper, n](const Vector& x) {
      return x.size() == n && x.allFinite() && (x.array() > lower.array()).all() &&
             (x.array() < upper.array()).all();
    };
    std::optional<Distance> dist;
    if (bounded_somewhere) {
      dist = [lower, upper](const Vector& x) {
        double d = std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < x.size(); ++i) {
          d = std::min(d, x(i) - lower(i));
          d = std::min(d, upper(i) - x(i));
        }
        return d;
      };
    }
    return OpenDomain(n, std::move(member), std::move(dist), std::move(equilibrium), "open-box");
  }

  /// {k in R | b k > 1}, the stabilizing gains of the scalar plant x' = x + b u.
  static OpenDomain half_line(double b, double equilibrium) {
    if (b == 0.0) throw ContractError("half_line: b must be nonzero");
    auto member = [b](const Vector& x) {
      return x.size() == 1 && std::isfinite(x(0)) && b * x(0) > 1.0;
    };
    Distance dist = [b](const Vector& x) { return std::abs(x(0) - 1.0 / b); };
    return OpenDomain(1, std::move(member), std::move(dist), scalar_vector(equilibrium), "half-line");
  }

  Eigen::Index dimension() const { return dimension_; }
  const Vector& equilibrium() const { return equilibrium_; }
  const std::string& name() const { return name_; }
  bool contains(const Vector& x) const { return x.size() == dimension_ && membership_(x); }
  bool has_boundary_distance() const { return boundary_distance_.has_value(); }

  double boundary_distance(const Vector& x) const {
    if (!boundary_distance_) throw ContractError("OpenDomain: no boundary distance available");
    return (*boundary_distance_)(x);
  }

 private:
  Eigen::Index dimension_;
  Membership membership_;
  std::optional<Distance> boundary_distance_;
  Vector equilibrium_;
  std::string name_;
};

/// Continuous, positive definite, proper map on an open domain. Points outside
/// the domain evaluate to +inf.
class SizeFunction {
 public:
  using Eval = std::function<double(const Vector&)>;

  SizeFunction(OpenDomain domain, Eval eval, std::string name = "omega")
      : domain_(std::move(domain)), eval_(std::move(eval)), name_(std::move(name)) {}

  /// omega(x) = |x - xbar|.
  static SizeFunction norm(const OpenDomain& domain) {
    Vector xbar = domain.equilibrium();
    return SizeFunction(domain, [xbar](const Vector& x) { return (x - xbar).norm(); }, "norm");
  }

  double operator()(const Vector& x) const {
    if (!domain_.contains(x)) return std::numeric_limits<double>::infinity();
    return eval_(x);
  }

  const OpenDomain& domain() const { return domain_; }
  const std::string& name() const { return name_; }

 private:
  OpenDomain domain_;
  Eval eval_;
  std::string name_;
};

/// Differentiable loss on an open domain whose equilibrium is its minimizer.
struct Loss {
  OpenDomain domain;
  std::function<double(const Vector&)> value;
  std::function<Vector(const Vector&)> gradient;
  std::string name = "loss";

  const Vector& minimizer() const { return domain.equilibrium(); }
  double min_value() const { return value(domain.equilibrium()); }
};

/// omega(x) = max{|x - xbar|, 1/dist(x, boundary) - a/dist(xbar, boundary)}.
inline SizeFunction kurzweil_size(const OpenDomain& domain, double a = 2.0) {
  if (!domain.has_boundary_distance())
    throw ContractError("kurzweil_size: domain has no boundary distance (use the norm on R^n)");
  if (!(a >= 1.0)) throw ContractError("kurzweil_size: a must be at least 1");
  const Vector xbar = domain.equilibrium();
  const double offset = a / domain.boundary_distance(xbar);
  auto eval = [domain, xbar, offset](const Vector& x) {
    return std::max((x - xbar).norm(), 1.0 / domain.boundary_distance(x) - offset);
  };
  return SizeFunction(domain, std::move(eval), "kurzweil");
}

/// omega = V - V(xbar). Every probe is checked against the claimed minimum.
inline SizeFunction size_from_loss(const Loss& loss, std::span<const Vector> probes = {}) {
  const double vmin = loss.min_value();
  for (const Vector& x : probes) {
    if (!loss.domain.contains(x)) continue;
    const double v = loss.value(x);
    if (v < vmin - 1e-12)
      throw MinimumViolationError("size_from_loss: sampled point has V below V(xbar)");
  }
  auto value = loss.value;
  return SizeFunction(
      loss.domain, [value, vmin](const Vector& x) { return std::max(0.0, value(x) - vmin); },
      loss.name + "-excess");
}

struct SamplerOptions {
  double initial_half_width = 0.25;
  std::size_t probes_per_face = 64;
  int max_doublings = 60;
  std::size_t max_attempts_per_sample = 20000;
};

/// Uniform rejection sampler for sublevel sets {level_fn <= r} (optionally
/// intersected with a compact `region`). The bounding box grows face by face,
/// doubling each face offset while probes on that face still hit the set.
class SublevelSampler {
 public:
  using Fn = std::function<double(const Vector&)>;
  using Region = std::function<bool(const Vector&)>;

  SublevelSampler(OpenDomain domain, Fn level_fn, Region region = {}, SamplerOptions options = {})
      : domain_(std::move(domain)),
        level_fn_(std::move(level_fn)),
        region_(std::move(region)),
        options_(options) {}

  bool in_set(const Vector& x, double level) const {
    if (!domain_.contains(x)) return false;
    if (region_ && !region_(x)) return false;
    return level_fn_(x) <= level;
  }

  /// Per-axis (below, above) offsets from the equilibrium of a box covering the set.
  std::pair<Vector, Vector> bounding_box(double level, Rng& rng) const {
    const Eigen::Index n = domain_.dimension();
    const Vector& c = domain_.equilibrium();
    Vector below = Vector::Constant(n, options_.initial_half_width);
    Vector above = below;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto face_hits = [&](Eigen::Index axis, int side) {
      const std::size_t probes = n == 1 ? 1 : options_.probes_per_face;
      for (std::size_t p = 0; p < probes; ++p) {
        Vector x(n);
        for (Eigen::Index i = 0; i < n; ++i) x(i) = c(i) - below(i) + unit(rng) * (below(i) + above(i));
        x(axis) = side == 0 ? c(axis) - below(axis) : c(axis) + above(axis);
        if (in_set(x, level)) return true;
      }
      return false;
    };
    // small sets: halve the whole box while no face touches the set
    const double floor = 1e-12 * (1.0 + c.norm());
    for (int round = 0; round < 200 && below.maxCoeff() > floor; ++round) {
      bool any = false;
      for (Eigen::Index axis = 0; axis < n && !any; ++axis)
        for (int side = 0; side < 2 && !any; ++side) any = face_hits(axis, side);
      if (any) {
        if (round > 0) below *= 2.0, above *= 2.0;
        break;
      }
      below *= 0.5;
      above *= 0.5;
    }
    for (int round = 0;; ++round) {
      if (round > options_.max_doublings * static_cast<int>(2 * n))
        throw CoverageError("SublevelSampler: sublevel set appears unbounded");
      bool grew = false;
      for (Eigen::Index axis = 0; axis < n; ++axis) {
        for (int side = 0; side < 2; ++side) {
          if (face_hits(axis, side)) {
            (side == 0 ? below : above)(axis) *= 2.0;
            grew = true;
          }
        }
      }
      if (!grew) return {below, above};
    }
  }

  std::vector<Vector> draw(double level, std::size_t count, Rng& rng) const {
    const auto [below, above] = bounding_box(level, rng);
    const Vector& c = domain_.equilibrium();
    const Eigen::Index n = domain_.dimension();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<Vector> out;
    out.reserve(count);
    const std::size_t budget = std::max<std::size_t>(1, count) * options_.max_attempts_per_sample;
    for (std::size_t attempt = 0; out.size() < count; ++attempt) {
      if (attempt >= budget)
        throw CoverageError("SublevelSampler: rejection budget exhausted at level " +
                            std::to_string(level));
      Vector x(n);
      for (Eigen::Index i = 0; i < n; ++i) x(i) = c(i) - below(i) + unit(rng) * (below(i) + above(i));
      if (in_set(x, level)) out.push_back(std::move(x));
    }
    return out;
  }

  const OpenDomain& domain() const { return domain_; }

 private:
  OpenDomain domain_;
  Fn level_fn_;
  Region region_;
  SamplerOptions options_;
};

struct CompareOptions {
  std::size_t samples_per_level = 200;
  SamplerOptions sampler{};
  SublevelSampler::Region region{};
};

struct SizePair {
  double w1;
  double w2;
};

struct SizeComparison {
  MonotoneCurve alpha;          // w1 <= alpha(w2) on every drawn sample
  std::vector<SizePair> pairs;  // (w1(x), w2(x)) for every drawn x
  std::vector<CurveSample> empirical;  // (r, max w1 over {w2 <= r})
};

/// Empirical K-infinity comparison w1 <= alpha o w2 from samples of the
/// sublevel sets {w2 <= r}, r in `levels`.
inline SizeComparison compare_sizes(const SizeFunction& w1, const SizeFunction& w2,
                                    std::span<const double> levels, const CompareOptions& options,
                                    Rng& rng) {
  std::vector<double> grid(levels.begin(), levels.end());
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  grid.erase(std::remove_if(grid.begin(), grid.end(), [](double r) { return !(r > 0.0); }),
             grid.end());
  if (grid.empty()) throw ContractError("compare_sizes: need at least one positive level");

  const SublevelSampler sampler(w2.domain(), [&w2](const Vector& x) { return w2(x); },
                                options.region, options.sampler);
  SizeComparison out{MonotoneCurve::identity(), {}, {}};
  for (double r : grid) {
    std::vector<Vector> pts;
    try {
      pts = sampler.draw(r, options.samples_per_level, rng);
    } catch (const CoverageError& e) {
      throw CoverageError(std::string("compare_sizes: insufficient coverage: ") + e.what());
    }
    if (pts.empty()) throw CoverageError("compare_sizes: empty sublevel sample");
    for (const Vector& x : pts) out.pairs.push_back({w1(x), w2(x)});
  }
  std::sort(out.pairs.begin(), out.pairs.end(),
            [](const SizePair& a, const SizePair& b) { return a.w2 < b.w2; });

  out.empirical.push_back({0.0, 0.0});
  std::size_t j = 0;
  double running = 0.0;
  for (double r : grid) {
    bool any = false;
    while (j < out.pairs.size() && out.pairs[j].w2 <= r) {
      running = std::max(running, out.pairs[j].w1);
      ++j;
      any = true;
    }
    if (!any && out.empirical.size() == 1)
      throw CoverageError("compare_sizes: empty sublevel sample at r = " + std::to_string(r));
    out.empirical.push_back({r, running});
  }
  double origin_slope = 0.0;
  for (const SizePair& p : out.pairs) {
    if (p.w2 > grid.front()) break;
    if (p.w2 > 0.0) origin_slope = std::max(origin_slope, p.w1 / p.w2);
  }
  out.alpha = majorize_kinfty(out.empirical, origin_slope);
  for (const SizePair& p : out.pairs) {
    if (p.w1 > out.alpha(p.w2) * (1.0 + 1e-12) + 1e-300)
      throw NumericError("compare_sizes: majorant fails to dominate a drawn sample");
  }
  return out;
}

struct SequenceVerdict {
  std::vector<double> tail_minima;  // min over j >= k of omega(x_j)
  double growth = 0.0;              // final tail minimum / (1 + first tail minimum)
  bool diverges = false;
};

struct SizeAxiomReport {
  bool zero_at_equilibrium = false;
  bool positive_definite = false;
  std::size_t probes = 0;
  std::vector<SequenceVerdict> sequences;
  bool passed() const {
    return zero_at_equilibrium && positive_definite &&
           std::all_of(sequences.begin(), sequences.end(),
                       [](const SequenceVerdict& s) { return s.diverges; });
  }
};

/// Sample-based diagnostic for the size-function axioms. A sequence is judged
/// divergent when its tail minima are nondecreasing and grow by at least
/// `min_growth` relative to the first tail minimum.
inline SizeAxiomReport check_size_axioms(const SizeFunction& omega,
                                         std::span<const std::vector<Vector>> boundary_sequences,
                                         std::span<const Vector> extra_probes = {},
                                         double min_growth = 5.0) {
  SizeAxiomReport report;
  const Vector& xbar = omega.domain().equilibrium();
  report.zero_at_equilibrium = std::abs(omega(xbar)) <= 1e-12;
  bool pd = true;
  auto probe = [&](const Vector& x) {
    if (!omega.domain().contains(x) || (x - xbar).norm() == 0.0) return;
    ++report.probes;
    if (!(omega(x) > 0.0)) pd = false;
  };
  for (const auto& seq : boundary_sequences)
    for (const Vector& x : seq) probe(x);
  for (const Vector& x : extra_probes) probe(x);
  report.positive_definite = pd;

  for (const auto& seq : boundary_sequences) {
    SequenceVerdict v;
    v.tail_minima.resize(seq.size());
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t k = seq.size(); k-- > 0;) {
      m = std::min(m, omega(seq[k]));
      v.tail_minima[k] = m;
    }
    if (!seq.empty()) {
      v.growth = v.tail_minima.back() / (1.0 + std::max(0.0, v.tail_minima.front()));
      v.diverges = v.growth >= min_growth;
    }
    report.sequences.push_back(std::move(v));
  }
  return report;
}

/// Largest delta witnessed by the samples such that omega(x) < delta implies
/// |x - xbar| < eps (infinite when no sample lies outside the eps-ball).
inline double delta_for_radius(const SizeFunction& omega, double eps, std::span<const Vector> samples) {
  const Vector& xbar = omega.domain().equilibrium();
  double delta = std::numeric_limits<double>::infinity();
  for (const Vector& x : samples)
    if ((x - xbar).norm() >= eps) delta = std::min(delta, omega(x));
  return delta;
}

}  // namespace isslab

#endif  // ISSLAB_DOMAINS_HPP
