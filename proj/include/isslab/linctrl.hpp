#ifndef ISSLAB_LINCTRL_HPP
#define ISSLAB_LINCTRL_HPP

// Dense desk-scale solvers for continuous-time linear control: spectral
// abscissa, Lyapunov equations and the algebraic Riccati equation.

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "json.hpp"

#include "isslab/errors.hpp"
#include "isslab/types.hpp"

namespace isslab {

inline double spectral_abscissa(const Matrix& m) {
  if (m.rows() != m.cols()) throw ContractError("spectral_abscissa: matrix must be square");
  if (!m.allFinite()) throw ContractError("spectral_abscissa: non-finite entries");
  Eigen::EigenSolver<Matrix> es(m, false);
  if (es.info() != Eigen::Success) throw NumericError("spectral_abscissa: eigensolver failed");
  return es.eigenvalues().real().maxCoeff();
}

inline bool is_hurwitz(const Matrix& m) { return spectral_abscissa(m) < 0.0; }

inline bool is_symmetric(const Matrix& m, double tol = 1e-12) {
  return m.rows() == m.cols() && (m - m.transpose()).cwiseAbs().maxCoeff() <= tol * (1.0 + m.norm());
}

inline Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

struct LinearSystem {
  Matrix A;
  Matrix B;

  LinearSystem(Matrix a, Matrix b) : A(std::move(a)), B(std::move(b)) {
    if (A.rows() != A.cols() || A.rows() == 0) throw ContractError("LinearSystem: A must be square");
    if (B.rows() != A.rows() || B.cols() == 0)
      throw ContractError("LinearSystem: B must have as many rows as A");
  }
  Eigen::Index states() const { return A.rows(); }
  Eigen::Index inputs() const { return B.cols(); }
};

struct CostWeights {
  Matrix Q;
  Matrix R;
  Matrix Sigma;

  CostWeights(Matrix q, Matrix r, Matrix sigma) : Q(std::move(q)), R(std::move(r)), Sigma(std::move(sigma)) {
    check_pd(Q, "Q");
    check_pd(R, "R");
    check_pd(Sigma, "Sigma");
  }

  void check_against(const LinearSystem& sys) const {
    if (Q.rows() != sys.states() || Sigma.rows() != sys.states())
      throw ContractError("CostWeights: Q and Sigma must be n x n");
    if (R.rows() != sys.inputs()) throw ContractError("CostWeights: R must be m x m");
  }

 private:
  static void check_pd(const Matrix& m, const char* name) {
    if (!is_symmetric(m)) throw ContractError(std::string("CostWeights: ") + name + " is not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(m), Eigen::EigenvaluesOnly);
    if (!(es.eigenvalues().minCoeff() > 0.0))
      throw ContractError(std::string("CostWeights: ") + name + " is not positive definite");
  }
};

namespace detail {

// vec(F P + P F^T) = (I (x) F + F (x) I) vec(P), column-major vec.
inline Matrix lyapunov_operator(const Matrix& f) {
  const Eigen::Index n = f.rows();
  Matrix op = Matrix::Zero(n * n, n * n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index row = j * n + i;
      for (Eigen::Index k = 0; k < n; ++k) {
        op(row, j * n + k) += f(i, k);  // (F P)_{ij} = sum_k F_ik P_kj
        op(row, k * n + i) += f(j, k);  // (P F^T)_{ij} = sum_k P_ik F_jk
      }
    }
  }
  return op;
}

}  // namespace detail

/// Solves F P + P F^T + S = 0 for Hurwitz F by a direct n^2 x n^2 solve.
inline Matrix solve_lyapunov(const Matrix& f, const Matrix& s) {
  if (f.rows() != f.cols() || s.rows() != f.rows() || s.cols() != f.cols())
    throw ContractError("solve_lyapunov: dimension mismatch");
  if (!is_symmetric(s)) throw ContractError("solve_lyapunov: S must be symmetric");
  if (!is_hurwitz(f)) throw DomainError("solve_lyapunov: F is not Hurwitz");
  const Eigen::Index n = f.rows();
  const Matrix op = detail::lyapunov_operator(f);
  const Vector rhs = -Eigen::Map<const Vector>(s.data(), n * n);
  const auto lu = op.partialPivLu();
  Vector sol = lu.solve(rhs);
  sol += lu.solve(rhs - op * sol);  // one step of iterative refinement
  Matrix p = symmetrized(Eigen::Map<const Matrix>(sol.data(), n, n));
  const double residual = (f * p + p * f.transpose() + s).norm();
  if (!(residual <= 1e-10 * (1.0 + s.norm()) * (1.0 + f.norm() * p.norm())))
    throw NumericError("solve_lyapunov: residual too large");
  return p;
}

/// Solves F^T L + L F + M = 0 for Hurwitz F.
inline Matrix solve_dual_lyapunov(const Matrix& f, const Matrix& m) {
  return solve_lyapunov(f.transpose(), m);
}

struct RiccatiSolution {
  Matrix Pi;
  Matrix K;
  double residual = 0.0;
  std::string method;
};

/// Pi B R^-1 B^T Pi - A^T Pi - Pi A - Q
inline Matrix riccati_residual(const LinearSystem& sys, const CostWeights& w, const Matrix& pi) {
  const Matrix g = sys.B * w.R.llt().solve(sys.B.transpose());
  return pi * g * pi - sys.A.transpose() * pi - pi * sys.A - w.Q;
}

/// Kleinman's iteration from a stabilizing gain; each step solves one
/// Lyapunov equation for the cost of the current gain.
inline RiccatiSolution solve_riccati_newton_kleinman(const LinearSystem& sys, const CostWeights& w,
                                                     Matrix k0, int max_iterations = 100) {
  w.check_against(sys);
  if (k0.rows() != sys.inputs() || k0.cols() != sys.states())
    throw ContractError("solve_riccati_newton_kleinman: seed gain must be m x n");
  if (!is_hurwitz(sys.A - sys.B * k0))
    throw StabilizabilityError("solve_riccati_newton_kleinman: seed gain is not stabilizing");
  const auto rchol = w.R.llt();
  Matrix k = std::move(k0);
  Matrix p;
  for (int it = 0; it < max_iterations; ++it) {
    const Matrix f = sys.A - sys.B * k;
    if (!is_hurwitz(f)) throw StabilizabilityError("Newton-Kleinman: iterate lost stability");
    Matrix next = solve_dual_lyapunov(f, symmetrized(w.Q + k.transpose() * w.R * k));
    const bool done = p.size() > 0 && (next - p).norm() <= 1e-14 * (1.0 + next.norm());
    p = std::move(next);
    k = rchol.solve(sys.B.transpose() * p);
    if (done) break;
  }
  RiccatiSolution sol{p, k, riccati_residual(sys, w, p).norm(), "newton-kleinman"};
  return sol;
}

/// Stable invariant subspace of the Hamiltonian [[A, -G], [-Q, -A^T]].
inline std::optional<Matrix> riccati_hamiltonian(const LinearSystem& sys, const CostWeights& w) {
  const Eigen::Index n = sys.states();
  const Matrix g = sys.B * w.R.llt().solve(sys.B.transpose());
  Matrix h(2 * n, 2 * n);
  h << sys.A, -g, -w.Q, -sys.A.transpose();
  Eigen::EigenSolver<Matrix> es(h, true);
  if (es.info() != Eigen::Success) return std::nullopt;
  const auto vals = es.eigenvalues();
  const auto vecs = es.eigenvectors();
  std::vector<Eigen::Index> stable;
  for (Eigen::Index i = 0; i < 2 * n; ++i)
    if (vals(i).real() < 0.0) stable.push_back(i);
  if (static_cast<Eigen::Index>(stable.size()) != n) return std::nullopt;
  Eigen::MatrixXcd u(2 * n, n);
  for (Eigen::Index j = 0; j < n; ++j) u.col(j) = vecs.col(stable[static_cast<std::size_t>(j)]);
  const Eigen::MatrixXcd u1 = u.topRows(n);
  const Eigen::MatrixXcd u2 = u.bottomRows(n);
  Eigen::FullPivLU<Eigen::MatrixXcd> lu(u1);
  if (!lu.isInvertible()) return std::nullopt;
  const Eigen::MatrixXcd pic = u2 * lu.inverse();
  if (!pic.allFinite()) return std::nullopt;
  return symmetrized(pic.real());
}

/// Stabilizing solution of the ARE and the optimal gain K = R^-1 B^T Pi.
/// The Hamiltonian route is polished by Newton-Kleinman; when it fails,
/// Newton-Kleinman runs from `seed` (or from K = 0 when A is Hurwitz).
inline RiccatiSolution solve_riccati(const LinearSystem& sys, const CostWeights& w,
                                     const std::optional<Matrix>& seed = std::nullopt) {
  w.check_against(sys);
  const double tol = 1e-9 * (1.0 + w.Q.norm());
  const auto rchol = w.R.llt();
  auto accept = [&](RiccatiSolution sol) -> std::optional<RiccatiSolution> {
    if (!sol.Pi.allFinite() || !(sol.residual <= tol)) return std::nullopt;
    Eigen::SelfAdjointEigenSolver<Matrix> es(sol.Pi, Eigen::EigenvaluesOnly);
    if (!(es.eigenvalues().minCoeff() > -1e-10)) return std::nullopt;
    if (!is_hurwitz(sys.A - sys.B * sol.K)) return std::nullopt;
    return sol;
  };

  if (auto pi = riccati_hamiltonian(sys, w)) {
    const Matrix k = rchol.solve(sys.B.transpose() * *pi);
    if (is_hurwitz(sys.A - sys.B * k)) {
      try {
        auto polished = solve_riccati_newton_kleinman(sys, w, k, 20);
        polished.method = "hamiltonian+newton-kleinman";
        if (auto ok = accept(std::move(polished))) return *ok;
      } catch (const NumericError&) {
      } catch (const DomainError&) {
      }
      RiccatiSolution raw{*pi, k, riccati_residual(sys, w, *pi).norm(), "hamiltonian"};
      if (auto ok = accept(std::move(raw))) return *ok;
    }
  }
  std::optional<Matrix> start = seed;
  if (!start && is_hurwitz(sys.A)) start = Matrix::Zero(sys.inputs(), sys.states());
  if (start) {
    if (auto ok = accept(solve_riccati_newton_kleinman(sys, w, *start))) return *ok;
  }
  throw StabilizabilityError("solve_riccati: no stabilizing solution found");
}

/// {"shape": [rows, cols], "data": [row-major entries]}
inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json data = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  return nlohmann::json{{"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}};
}

/// Accepts the shaped form above or a nested row array [[...], [...]]; a bare
/// number is a 1 x 1 matrix. Errors name `field`.
inline Matrix matrix_from_json(const nlohmann::json& j, const std::string& field) {
  auto fail = [&](const std::string& why) -> Matrix {
    throw ConfigError("matrix field '" + field + "': " + why);
  };
  if (j.is_number()) {
    Matrix m(1, 1);
    m(0, 0) = j.get<double>();
    return m;
  }
  if (j.is_object()) {
    if (!j.contains("shape") || !j.contains("data")) return fail("expected keys 'shape' and 'data'");
    const auto& shape = j.at("shape");
    const auto& data = j.at("data");
    if (!shape.is_array() || shape.size() != 2 || !shape[0].is_number_integer() ||
        !shape[1].is_number_integer())
      return fail("shape must be [rows, cols]");
    const long rows = shape[0].get<long>(), cols = shape[1].get<long>();
    if (rows <= 0 || cols <= 0) return fail("shape entries must be positive");
    if (!data.is_array() || static_cast<long>(data.size()) != rows * cols)
      return fail("data length does not match shape " + std::to_string(rows) + "x" +
                  std::to_string(cols));
    Matrix m(rows, cols);
    for (long i = 0; i < rows; ++i)
      for (long c = 0; c < cols; ++c) {
        const auto& v = data[static_cast<std::size_t>(i * cols + c)];
        if (!v.is_number()) return fail("non-numeric entry");
        m(i, c) = v.get<double>();
      }
    return m;
  }
  if (j.is_array()) {
    if (j.empty()) return fail("empty matrix");
    const bool nested = j[0].is_array();
    const std::size_t rows = nested ? j.size() : 1;
    const std::size_t cols = nested ? j[0].size() : j.size();
    if (cols == 0) return fail("empty row");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < rows; ++i) {
      const auto& row = nested ? j[i] : j;
      if (!row.is_array() || row.size() != cols) return fail("ragged rows");
      for (std::size_t c = 0; c < cols; ++c) {
        if (!row[c].is_number()) return fail("non-numeric entry");
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = row[c].get<double>();
      }
    }
    return m;
  }
  return fail("expected a matrix");
}

}  // namespace isslab

#endif  // ISSLAB_LINCTRL_HPP
