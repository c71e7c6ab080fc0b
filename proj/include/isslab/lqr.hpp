#ifndef ISSLAB_LQR_HPP
#define ISSLAB_LQR_HPP

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"

#include "isslab/domains.hpp"
#include "isslab/errors.hpp"
#include "isslab/linctrl.hpp"
#include "isslab/types.hpp"

namespace isslab {

/// Gains K (m x n) are flattened row-major into vectors of length m*n.
inline Vector flatten_gain(const Matrix& k) {
  Vector v(k.size());
  for (Eigen::Index i = 0; i < k.rows(); ++i)
    for (Eigen::Index j = 0; j < k.cols(); ++j) v(i * k.cols() + j) = k(i, j);
  return v;
}

inline Matrix unflatten_gain(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  if (v.size() != rows * cols) throw ContractError("unflatten_gain: size mismatch");
  Matrix k(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) k(i, j) = v(i * cols + j);
  return k;
}

/// {K | A - B K Hurwitz}, centred at `kstar`.
inline OpenDomain stabilizing_gain_domain(const LinearSystem& sys, const Matrix& kstar) {
  const Matrix a = sys.A, b = sys.B;
  const Eigen::Index m = sys.inputs(), n = sys.states();
  auto member = [a, b, m, n](const Vector& x) {
    if (x.size() != m * n || !x.allFinite()) return false;
    return spectral_abscissa(a - b * unflatten_gain(x, m, n)) < 0.0;
  };
  return OpenDomain(m * n, std::move(member), std::nullopt, flatten_gain(kstar), "stabilizing-gains");
}

/// Expected infinite-horizon LQR cost of the static feedback u = -K x for
/// initial states with covariance Sigma:
///   V(K) = trace((Q + K^T R K) P),  (A - BK) P + P (A - BK)^T + Sigma = 0.
class LqrInstance {
 public:
  LqrInstance(LinearSystem sys, CostWeights w, const std::optional<Matrix>& seed = std::nullopt)
      : sys_(std::move(sys)),
        w_(std::move(w)),
        riccati_((w_.check_against(sys_), solve_riccati(sys_, w_, seed))),
        domain_(stabilizing_gain_domain(sys_, riccati_.K)),
        vstar_(loss(riccati_.K)) {}

  const LinearSystem& system() const { return sys_; }
  const CostWeights& weights() const { return w_; }
  const RiccatiSolution& riccati() const { return riccati_; }
  const Matrix& optimal_gain() const { return riccati_.K; }
  double optimal_loss() const { return vstar_; }
  const OpenDomain& domain() const { return domain_; }
  Eigen::Index gain_rows() const { return sys_.inputs(); }
  Eigen::Index gain_cols() const { return sys_.states(); }

  bool stabilizing(const Matrix& k) const { return spectral_abscissa(closed_loop(k)) < 0.0; }

  double loss(const Matrix& k) const {
    const Matrix f = checked_closed_loop(k);
    const Matrix p = solve_lyapunov(f, w_.Sigma);
    return ((w_.Q + k.transpose() * w_.R * k) * p).trace();
  }

  /// 2 (R K - B^T L) P with L solving F^T L + L F + Q + K^T R K = 0.
  Matrix grad(const Matrix& k) const {
    const Matrix f = checked_closed_loop(k);
    const Matrix p = solve_lyapunov(f, w_.Sigma);
    const Matrix l = solve_dual_lyapunov(f, symmetrized(w_.Q + k.transpose() * w_.R * k));
    return 2.0 * (w_.R * k - sys_.B.transpose() * l) * p;
  }

  Matrix unflatten(const Vector& x) const { return unflatten_gain(x, gain_rows(), gain_cols()); }

  /// The loss on flattened gains, for the generic flow and descent machinery.
  Loss as_loss() const {
    auto self = std::make_shared<const LqrInstance>(*this);
    return Loss{domain_,
                [self](const Vector& x) { return self->loss(self->unflatten(x)); },
                [self](const Vector& x) { return flatten_gain(self->grad(self->unflatten(x))); },
                "lqr"};
  }

 private:
  Matrix closed_loop(const Matrix& k) const {
    if (k.rows() != sys_.inputs() || k.cols() != sys_.states())
      throw ContractError("LqrInstance: gain must be m x n");
    return sys_.A - sys_.B * k;
  }
  Matrix checked_closed_loop(const Matrix& k) const {
    Matrix f = closed_loop(k);
    if (!f.allFinite() || !(spectral_abscissa(f) < 0.0))
      throw DomainExitError("LqrInstance: gain is not stabilizing");
    return f;
  }

  LinearSystem sys_;
  CostWeights w_;
  RiccatiSolution riccati_;
  OpenDomain domain_;
  double vstar_;
};

inline double loss(const LqrInstance& inst, const Matrix& k) { return inst.loss(k); }
inline Matrix grad(const LqrInstance& inst, const Matrix& k) { return inst.grad(k); }

/// Plant x' = x + b u with q = r = Sigma = 1.
inline LqrInstance scalar_lqr_instance(double b) {
  Matrix one = Matrix::Identity(1, 1);
  Matrix bm(1, 1);
  bm(0, 0) = b;
  return LqrInstance(LinearSystem(one, bm), CostWeights(one, one, one));
}

struct ScalarLqrValue {
  double value;
  double derivative;
};

/// Closed forms for the scalar plant a = q = r = Sigma = 1:
/// V(k) = (k^2 + 1) / (2 (b k - 1)),  V'(k) = (b k^2 - 2k - b) / (2 (b k - 1)^2).
inline ScalarLqrValue scalar_closed_form(double b, double k) {
  const double s = b * k - 1.0;
  if (!(s > 0.0)) throw DomainError("scalar_closed_form: requires b k > 1");
  return {(k * k + 1.0) / (2.0 * s), (b * k * k - 2.0 * k - b) / (2.0 * s * s)};
}

/// Random instance with Gaussian (A, B) (generically controllable) and
/// well-conditioned positive definite weights.
inline LqrInstance random_lqr_instance(Eigen::Index n, Eigen::Index m, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gauss = [&](Eigen::Index r, Eigen::Index c) {
    Matrix x(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) x(i, j) = normal(rng);
    return x;
  };
  for (int attempt = 0; attempt < 100; ++attempt) {
    Matrix a = gauss(n, n) / std::sqrt(static_cast<double>(n));
    Matrix b = gauss(n, m);
    Matrix mq = gauss(n, n), mr = gauss(m, m), ms = gauss(n, n);
    Matrix q = symmetrized(mq * mq.transpose() / static_cast<double>(n) + Matrix::Identity(n, n));
    Matrix r = symmetrized(mr * mr.transpose() / static_cast<double>(m) + Matrix::Identity(m, m));
    Matrix s = symmetrized(ms * ms.transpose() / static_cast<double>(n) + Matrix::Identity(n, n));
    try {
      return LqrInstance(LinearSystem(a, b), CostWeights(q, r, s));
    } catch (const NumericError&) {
    }
  }
  throw StabilizabilityError("random_lqr_instance: no stabilizable draw");
}

/// K = Kstar + scale * N(0, 1), accepted iff stabilizing. The scale starts at
/// 0.1 (1 + |Kstar|) and doubles while fewer than half the trial draws are
/// rejected.
inline std::vector<Matrix> sample_stabilizing_gains(const LqrInstance& inst, std::size_t count, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const Matrix& kstar = inst.optimal_gain();
  auto perturb = [&](double scale) {
    Matrix k = kstar;
    for (Eigen::Index i = 0; i < k.rows(); ++i)
      for (Eigen::Index j = 0; j < k.cols(); ++j) k(i, j) += scale * normal(rng);
    return k;
  };
  double scale = 0.1 * (1.0 + kstar.norm());
  for (int round = 0; round < 40; ++round) {
    int rejected = 0;
    constexpr int trials = 64;
    for (int t = 0; t < trials; ++t)
      if (!inst.stabilizing(perturb(scale))) ++rejected;
    if (2 * rejected >= trials) break;
    scale *= 2.0;
  }
  std::vector<Matrix> out;
  out.reserve(count);
  for (std::size_t attempts = 0; out.size() < count; ++attempts) {
    if (attempts > 1000 * (count + 1)) throw CoverageError("sample_stabilizing_gains: acceptance too low");
    Matrix k = perturb(scale);
    if (inst.stabilizing(k)) out.push_back(std::move(k));
  }
  return out;
}

/// Empirical PL constant on {V <= level}: min |grad V|^2 / (V - Vmin) over the
/// samples, excluding points within `exclusion` of the minimizer.
inline double pl_constant(const Loss& loss, double level, std::span<const Vector> samples,
                          double exclusion = 1e-6) {
  const double vmin = loss.min_value();
  if (!(level > vmin)) throw ContractError("pl_constant: level must exceed the minimum");
  double c = std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  for (const Vector& x : samples) {
    if (!loss.domain.contains(x) || (x - loss.minimizer()).norm() < exclusion) continue;
    const double v = loss.value(x);
    if (v > level || !(v > vmin)) continue;
    c = std::min(c, loss.gradient(x).squaredNorm() / (v - vmin));
    ++used;
  }
  if (used == 0) throw CoverageError("pl_constant: no samples in the sublevel set");
  return c;
}

inline double pl_constant(const Loss& loss, double level, std::size_t count, Rng& rng,
                          const SamplerOptions& options = {}) {
  const SublevelSampler sampler(loss.domain, loss.value, {}, options);
  const auto pts = sampler.draw(level, count, rng);
  return pl_constant(loss, level, pts);
}

inline double pl_constant(const LqrInstance& inst, double level, std::size_t count, Rng& rng) {
  return pl_constant(inst.as_loss(), level, count, rng);
}

/// {"A": M, "B": M, "Q": M, "R": M, "Sigma": M} with matrices in any form
/// accepted by matrix_from_json.
inline LqrInstance lqr_from_json(const nlohmann::json& j) {
  auto field = [&](const char* name) -> Matrix {
    if (!j.contains(name)) throw ConfigError(std::string("missing matrix field '") + name + "'");
    return matrix_from_json(j.at(name), name);
  };
  Matrix a = field("A"), b = field("B"), q = field("Q"), r = field("R"), s = field("Sigma");
  if (a.rows() != a.cols()) throw ConfigError("matrix field 'A': must be square");
  if (b.rows() != a.rows()) throw ConfigError("matrix field 'B': row count must match A");
  if (q.rows() != a.rows() || q.cols() != a.rows()) throw ConfigError("matrix field 'Q': must be n x n");
  if (s.rows() != a.rows() || s.cols() != a.rows())
    throw ConfigError("matrix field 'Sigma': must be n x n");
  if (r.rows() != b.cols() || r.cols() != b.cols()) throw ConfigError("matrix field 'R': must be m x m");
  try {
    return LqrInstance(LinearSystem(a, b), CostWeights(q, r, s));
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace isslab

#endif  // ISSLAB_LQR_HPP
