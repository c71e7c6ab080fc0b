#ifndef ISSLAB_LOSSES_HPP
#define ISSLAB_LOSSES_HPP

#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "isslab/domains.hpp"
#include "isslab/errors.hpp"
#include "isslab/types.hpp"

namespace isslab {

/// V(x) = 1/2 (x - c)^T H (x - c) on `domain`, with c the domain equilibrium.
inline Loss quadratic_loss(const OpenDomain& domain, Matrix hessian) {
  const Eigen::Index n = domain.dimension();
  if (hessian.rows() != n || hessian.cols() != n)
    throw ContractError("quadratic_loss: Hessian must be n x n");
  if (!hessian.isApprox(hessian.transpose(), 1e-12))
    throw ContractError("quadratic_loss: Hessian must be symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(hessian);
  if (!(eig.eigenvalues().minCoeff() > 0.0))
    throw ContractError("quadratic_loss: Hessian must be positive definite");
  const Vector c = domain.equilibrium();
  return Loss{domain,
              [c, hessian](const Vector& x) {
                const Vector e = x - c;
                return 0.5 * e.dot(hessian * e);
              },
              [c, hessian](const Vector& x) -> Vector { return hessian * (x - c); },
              "quadratic"};
}

inline Loss quadratic_loss(const OpenDomain& domain) {
  return quadratic_loss(domain, Matrix::Identity(domain.dimension(), domain.dimension()));
}

/// |x|^2 / 2 on R^n.
inline Loss quadratic_loss(Eigen::Index n) {
  return quadratic_loss(OpenDomain::full_space(Vector::Zero(n)));
}

/// One-dimensional polynomial V(x) = sum_i c_i x^i on `domain`. The domain
/// equilibrium must be a strict global minimizer; this is checked only
/// locally (V'(xbar) = 0 to tolerance and V'' > 0).
inline Loss polynomial_loss(const OpenDomain& domain, std::vector<double> coefficients) {
  if (domain.dimension() != 1) throw ContractError("polynomial_loss: domain must be one-dimensional");
  if (coefficients.empty()) throw ContractError("polynomial_loss: no coefficients");
  std::vector<double> deriv;
  for (std::size_t i = 1; i < coefficients.size(); ++i)
    deriv.push_back(static_cast<double>(i) * coefficients[i]);
  if (deriv.empty()) deriv.push_back(0.0);
  auto horner = [](const std::vector<double>& c, double x) {
    double v = 0.0;
    for (auto it = c.rbegin(); it != c.rend(); ++it) v = v * x + *it;
    return v;
  };
  const double xbar = domain.equilibrium()(0);
  double scale = 0.0;
  for (double c : deriv) scale = std::max(scale, std::abs(c));
  if (std::abs(horner(deriv, xbar)) > 1e-10 * (1.0 + scale) * (1.0 + std::pow(std::abs(xbar), deriv.size())))
    throw ContractError("polynomial_loss: equilibrium is not a critical point");
  return Loss{domain,
              [coefficients, horner](const Vector& x) { return horner(coefficients, x(0)); },
              [deriv, horner](const Vector& x) { return scalar_vector(horner(deriv, x(0))); },
              "polynomial"};
}

}  // namespace isslab

#endif  // ISSLAB_LOSSES_HPP
