#ifndef ISSLAB_TYPES_HPP
#define ISSLAB_TYPES_HPP

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace isslab {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// All randomness flows through explicitly seeded engines of this type.
using Rng = std::mt19937_64;

inline Vector scalar_vector(double v) {
  Vector x(1);
  x(0) = v;
  return x;
}

/// Uniform draw from the closed Euclidean ball of the given radius.
inline Vector uniform_in_ball(Eigen::Index dim, double radius, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vector d(dim);
  double n = 0.0;
  do {
    for (Eigen::Index i = 0; i < dim; ++i) d(i) = normal(rng);
    n = d.norm();
  } while (n == 0.0);
  const double scale = radius * std::pow(unit(rng), 1.0 / static_cast<double>(dim));
  return d * (scale / n);
}

inline Vector uniform_on_sphere(Eigen::Index dim, double radius, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector d(dim);
  double n = 0.0;
  do {
    for (Eigen::Index i = 0; i < dim; ++i) d(i) = normal(rng);
    n = d.norm();
  } while (n == 0.0);
  return d * (radius / n);
}

}  // namespace isslab

#endif  // ISSLAB_TYPES_HPP
