#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "isslab/descent.hpp"
#include "isslab/losses.hpp"
#include "isslab/lqr.hpp"

using namespace isslab;

namespace {

const double kStar = 1.0 + std::sqrt(2.0);

OpenDomain box(double lo, double hi, double xbar = 0.0) {
  return OpenDomain::open_box(scalar_vector(lo), scalar_vector(hi), scalar_vector(xbar));
}

DescentSystem scalar_quadratic(const OpenDomain& d = OpenDomain::full_space(Vector::Zero(1))) {
  return DescentSystem(quadratic_loss(d), InputMap::identity(1));
}

// V(x) = (x - c)^2 / 2 on an arbitrary domain, with c not necessarily the domain equilibrium.
DescentSystem shifted_quadratic(const OpenDomain& d, double c) {
  Loss l{d, [c](const Vector& x) { return 0.5 * (x(0) - c) * (x(0) - c); },
         [c](const Vector& x) { return scalar_vector(x(0) - c); }, "shifted"};
  return DescentSystem(std::move(l), InputMap::identity(1));
}

// Smallest minimizer of V(x - mu d) over a uniform grid of the admissible interval.
std::pair<double, double> grid_argmin(const DescentSystem& sys, const Vector& x, const Vector& d, double top, int n) {
  const double v0 = sys.loss.value(x);
  double best_mu = 0.0, best_v = v0;
  for (int i = 1; i <= n; ++i) {
    const double mu = top * i / n;
    const Vector y = x - mu * d;
    if (!sys.domain().contains(y)) break;
    const double v = sys.loss.value(y);
    if (v < best_v) {
      best_v = v;
      best_mu = mu;
    }
  }
  return {best_mu, best_v};
}

double grid_pl_constant(double wmax) {
  double c = std::numeric_limits<double>::infinity();
  for (double k = 1.0001; k < 20.0; k += 1e-4) {
    if (std::abs(k - kStar) < 1e-6) continue;
    const auto f = scalar_closed_form(1.0, k);
    const double w = f.value - kStar;
    if (w <= wmax) c = std::min(c, f.derivative * f.derivative / w);
  }
  return c;
}

}  // namespace

TEST(LambdaMax, QuadraticOnTheLine) {
  EXPECT_NEAR(lambda_max(scalar_quadratic(), scalar_vector(1.0), scalar_vector(1.0)), 2.0, 1e-9);
}

TEST(LambdaMax, StuckDirectionGivesZero) {
  const auto sys = scalar_quadratic(box(-1.0, 1.0));
  EXPECT_EQ(lambda_max(sys, scalar_vector(0.5), scalar_vector(-0.5)), 0.0);
}

TEST(LambdaMax, LiteralHalfLineExampleIsAnAscentRay) {
  // V = (x - 2)^2 / 2 on (0, inf) from x = 1 with d = 1 moves away from the minimizer
  const auto sys = shifted_quadratic(OpenDomain::open_box(scalar_vector(0.0), scalar_vector(INFINITY), scalar_vector(2.0)), 2.0);
  EXPECT_EQ(lambda_max(sys, scalar_vector(1.0), scalar_vector(1.0)), 0.0);
}

TEST(LambdaMax, ScanStopsAtTheDomainBoundary) {
  // V = x^2/2 would admit mu up to 2, but the segment leaves (-0.5, inf) at mu = 1.5
  const auto sys = scalar_quadratic(OpenDomain::open_box(scalar_vector(-0.5), scalar_vector(INFINITY), scalar_vector(0.0)));
  const double lm = lambda_max(sys, scalar_vector(1.0), scalar_vector(1.0));
  EXPECT_NEAR(lm, 1.5, 1e-9);
  EXPECT_LE(lm, 1.5);
}

TEST(LambdaMax, ToleranceScalesWithPoint) {
  const auto sys = scalar_quadratic();
  for (double x : {1e-3, 1.0, 1e3}) {
    const double tol = 1e-10 * (1.0 + x) / x;
    EXPECT_NEAR(lambda_max(sys, scalar_vector(x), scalar_vector(x)), 2.0, tol);
  }
}

TEST(LineSearch, Examples) {
  const auto sys = scalar_quadratic();
  auto r = line_search(sys, scalar_vector(1.0), scalar_vector(1.0));
  EXPECT_NEAR(r.lambda_bar, 1.0, 1e-9);
  EXPECT_NEAR(r.x_plus(0), 0.0, 1e-9);
  r = line_search(sys, scalar_vector(1.0), scalar_vector(2.0));
  EXPECT_NEAR(r.lambda_bar, 0.5, 1e-9);
  EXPECT_NEAR(r.x_plus(0), 0.0, 1e-9);
  const auto boxed = scalar_quadratic(box(-1.0, 1.0));
  r = line_search(boxed, scalar_vector(0.5), scalar_vector(-0.5));
  EXPECT_EQ(r.lambda_bar, 0.0);
  EXPECT_EQ(r.x_plus(0), 0.5);
}

TEST(LineSearch, SmallestMinimizerOnAPlateau) {
  // V(x, y) = max(|x| - 1, 0)^2 / 2 + y^2 / 2 is flat along x in [-1, 1]
  auto phi = [](double x) { return std::max(std::abs(x) - 1.0, 0.0); };
  Loss l{OpenDomain::full_space(Vector::Zero(2)),
         [phi](const Vector& x) { return 0.5 * phi(x(0)) * phi(x(0)) + 0.5 * x(1) * x(1); },
         [phi](const Vector& x) {
           Vector g(2);
           g << std::copysign(phi(x(0)), x(0)), x(1);
           return g;
         },
         "plateau"};
  const DescentSystem sys(std::move(l), InputMap::identity(2));
  Vector x(2), d(2);
  x << 3.0, 0.0;
  d << 1.0, 0.0;
  const auto r = line_search(sys, x, d);
  const double tol = 1e-10 * (1.0 + 3.0);
  EXPECT_NEAR(r.lambda_bar, 2.0, 10 * tol);
  EXPECT_NEAR(r.x_plus(0), 1.0, 10 * tol);
}

TEST(LineSearch, GlobalOnNonUnimodalRay) {
  // V = x^2/2 + 0.3 sin^2(5x) has several local minima along the ray
  Loss l{OpenDomain::full_space(Vector::Zero(1)),
         [](const Vector& x) { return 0.5 * x(0) * x(0) + 0.3 * std::pow(std::sin(5.0 * x(0)), 2); },
         [](const Vector& x) { return scalar_vector(x(0) + 3.0 * std::sin(10.0 * x(0)) * 0.5); }, "wavy"};
  const DescentSystem sys(std::move(l), InputMap::identity(1));
  for (double x0 : {2.0, -1.7, 3.3, 0.9}) {
    const Vector x = scalar_vector(x0);
    const Vector d = sys.loss.gradient(x);
    const auto r = line_search(sys, x, d);
    const auto [mu, v] = grid_argmin(sys, x, d, r.lambda_max, 400000);
    EXPECT_LE(sys.loss.value(r.x_plus), v + 1e-12);
    EXPECT_NEAR(r.lambda_bar, mu, 2.0 * r.lambda_max / 400000);
  }
}

TEST(DescentStep, FixedPoint) {
  const auto sys = scalar_quadratic();
  const auto s = descent_step(sys, scalar_vector(0.0), scalar_vector(0.0));
  EXPECT_EQ(s.x_plus(0), 0.0);
  EXPECT_FALSE(s.stuck);
}

TEST(DescentStep, ScalarLqrReachesOptimumInOneStep) {
  const auto inst = scalar_lqr_instance(1.0);
  const DescentSystem sys(inst.as_loss(), InputMap::identity(1));
  const auto s = descent_step(sys, scalar_vector(2.0), scalar_vector(0.0));
  EXPECT_NEAR(s.p(0), -0.5, 1e-14);
  EXPECT_NEAR(s.x_plus(0), kStar, 1e-8);
  EXPECT_NEAR(s.lambda_bar, 2.0 * (std::sqrt(2.0) - 1.0), 1e-7);
}

TEST(DescentStep, AdversarialInputIsStuck) {
  const auto sys = scalar_quadratic();
  const auto s = descent_step(sys, scalar_vector(1.0), scalar_vector(-2.0));
  EXPECT_TRUE(s.stuck);
  EXPECT_EQ(s.x_plus(0), 1.0);
  EXPECT_EQ(s.q(0), -2.0);
}

TEST(RunDescent, QuadraticConvergesInOneStep) {
  Rng rng(1);
  const auto tr = run_descent(scalar_quadratic(), scalar_vector(1.0), NoiseModel::none(), 3, rng);
  EXPECT_NEAR(tr.states[1](0), 0.0, 1e-9);
  EXPECT_EQ(tr.size(), 4u);
  EXPECT_EQ(tr.lambda_bar.size(), 3u);
}

TEST(RunDescent, DecayingRelativeNoiseConverges) {
  Rng rng(2);
  Matrix h(2, 2);
  h << 3, 1, 1, 1;
  const DescentSystem sys(quadratic_loss(OpenDomain::full_space(Vector::Zero(2)), h), InputMap::identity(2));
  const auto tr = run_descent(sys, Vector::Constant(2, 1.0), NoiseModel::relative(0.9, 0.5), 200, rng);
  EXPECT_LT(tr.states.back().norm(), 1e-6);
  for (std::size_t t = 0; t < tr.inputs.size(); ++t)
    EXPECT_LE(tr.inputs[t].norm(), 0.9 * std::pow(0.5, static_cast<double>(t)) * tr.gradnorm[t] * (1.0 + 1e-12));
}

TEST(RunDescent, ValuesNeverIncreaseAndStayInside) {
  Rng rng(3);
  const auto inst = scalar_lqr_instance(1.0);
  const DescentSystem sys(inst.as_loss(), InputMap::identity(1));
  for (auto noise : {NoiseModel::absolute(0.1), NoiseModel::absolute(0.5, NoiseDirection::adversarial),
                     NoiseModel::relative(0.5)}) {
    for (double k0 : {1.5, 3.0, 6.0}) {
      const auto tr = run_descent(sys, scalar_vector(k0), noise, 40, rng);
      for (std::size_t t = 1; t < tr.size(); ++t) {
        EXPECT_LE(tr.V[t], tr.V[t - 1]);
        EXPECT_TRUE(sys.domain().contains(tr.states[t]));
      }
      EXPECT_LE(tr.input_sup(), noise.scale == NoiseScale::absolute ? noise.magnitude * (1.0 + 1e-12) : INFINITY);
    }
  }
}

TEST(RunDescent, NoiseFreeLqrReachesStationarity) {
  Rng rng(4);
  std::vector<LqrInstance> instances{scalar_lqr_instance(1.0)};
  for (int i = 0; i < 3; ++i) instances.push_back(random_lqr_instance(2, 1, rng));
  for (const auto& inst : instances) {
    const DescentSystem sys(inst.as_loss(), InputMap::identity(inst.gain_rows() * inst.gain_cols()));
    for (const Matrix& k0 : sample_stabilizing_gains(inst, 2, rng)) {
      const auto tr = run_descent(sys, flatten_gain(k0), NoiseModel::none(), 200, rng);
      EXPECT_LE(*std::min_element(tr.gradnorm.begin(), tr.gradnorm.end()), 1e-8);
    }
  }
}

TEST(Lipschitz, QuadraticIsSafetyTimesOne) {
  Rng rng(5);
  const auto sys = scalar_quadratic();
  const std::vector<double> levels{0.1, 1.0, 4.0};
  const auto prof = lipschitz_profile(sys, levels, 100, rng);
  for (double l : prof.constants) EXPECT_NEAR(l, 1.5, 1e-6);
  EXPECT_NEAR(prof.theta(1.0), 1.0 / 27.0, 1e-8);
}

TEST(Lipschitz, QuarticAgainstClosedForm) {
  Rng rng(6);
  const DescentSystem sys(polynomial_loss(OpenDomain::full_space(Vector::Zero(1)), {0, 0, 0, 0, 0.25}), InputMap::identity(1));
  const std::vector<double> levels{0.01, 0.25, 1.0, 4.0};
  const auto prof = lipschitz_profile(sys, levels, 200, rng);
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const double exact = 3.0 * std::sqrt(4.0 * levels[i]);
    EXPECT_GE(prof.constants[i], exact);
    EXPECT_LE(prof.constants[i], 1.5 * exact * (1.0 + 1e-12));
    if (i > 0) EXPECT_GE(prof.constants[i], prof.constants[i - 1]);
  }
  EXPECT_THROW(prof.at(5.0), ContractError);
}

TEST(VerifyDecrease, Examples) {
  const auto sys = scalar_quadratic();
  auto rep = verify_decrease(sys, scalar_vector(1.0), scalar_vector(0.0), 1.0);
  EXPECT_DOUBLE_EQ(rep.lambda, 2.0 / 9.0);
  EXPECT_NEAR(rep.fixed_step_change, -16.0 / 81.0, 1e-15);
  EXPECT_NEAR(rep.line_search_bound, -1.0 / 18.0, 1e-15);
  EXPECT_TRUE(rep.passed());
  rep = verify_decrease(sys, scalar_vector(1.0), scalar_vector(0.5), 1.0);
  EXPECT_NEAR(rep.fixed_step_change, -5.0 / 18.0, 1e-15);
  EXPECT_NEAR(rep.fixed_step_bound, -1.0 / 18.0, 1e-15);
  EXPECT_LE(rep.line_search_change, rep.fixed_step_change);
  EXPECT_TRUE(rep.passed());
  EXPECT_THROW(verify_decrease(sys, scalar_vector(1.0), scalar_vector(0.6), 1.0), ContractError);
}

TEST(VerifyDecrease, HoldsOnSampledPairs) {
  Rng rng(7);
  Matrix h(2, 2);
  h << 2, 0.5, 0.5, 1;
  std::vector<DescentSystem> systems{
      DescentSystem(quadratic_loss(OpenDomain::full_space(Vector::Zero(2)), h), InputMap::identity(2)),
      DescentSystem(polynomial_loss(OpenDomain::full_space(Vector::Zero(1)), {0, 0, 0.5, 0, 0.25}), InputMap::identity(1)),
      DescentSystem(scalar_lqr_instance(1.0).as_loss(), InputMap::identity(1))};
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (const auto& sys : systems) {
    const double top = sys.loss.min_value() + 1.0;
    const std::vector<double> levels{top};
    const auto prof = lipschitz_profile(sys, levels, 300, rng);
    const SublevelSampler sampler(sys.domain(), sys.loss.value);
    for (const Vector& x : sampler.draw(top, 300, rng)) {
      const Vector p = sys.loss.gradient(x);
      if (p.norm() < 1e-12) continue;
      const Vector q = uniform_on_sphere(x.size(), 0.5 * p.norm() * unit(rng), rng);
      const auto rep = verify_decrease(sys, x, q, prof.at(top));
      EXPECT_TRUE(rep.passed()) << sys.loss.name << " at " << x.transpose();
    }
  }
}

TEST(DtIss, EquilibriumTraceIsZero) {
  Rng rng(8);
  const auto tr = run_descent(scalar_quadratic(), scalar_vector(0.0), NoiseModel::none(), 5, rng);
  const auto beta = kl_from_decrease(MonotoneCurve::linear(0.5), DecreaseMode::discrete);
  const auto rep = dt_iss_check(tr, beta, MonotoneCurve::identity());
  EXPECT_TRUE(rep.passed());
  EXPECT_EQ(rep.worst_margin, 0.0);
}

TEST(DtIss, FlagsAnEscapingStep) {
  Rng rng(9);
  auto tr = run_descent(scalar_quadratic(), scalar_vector(1.0), NoiseModel::none(), 5, rng);
  tr.omega[3] = 5.0;
  const auto beta = kl_from_decrease(MonotoneCurve::linear(0.5), DecreaseMode::discrete);
  const auto rep = dt_iss_check(tr, beta, MonotoneCurve::identity());
  ASSERT_EQ(rep.violations.size(), 1u);
  EXPECT_EQ(rep.violations.front().step, 3u);
}

TEST(DtGamma, ZeroInputGivesZero) {
  Rng rng(10);
  const auto g = dt_gamma_construction(scalar_quadratic(), MonotoneCurve::identity(), 0.0, 100, rng);
  EXPECT_EQ(g.gamma, 0.0);
}

TEST(DtGamma, ScalarQuadraticAgainstBruteForce) {
  // the exact step sends x to 0 when x + u points the same way as x and is stuck otherwise
  const auto sys = scalar_quadratic();
  auto step_excess = [](double x, double u) {
    const double d = x + u;
    if (d == 0.0 || x / d > 0.0) return 0.0;
    return 0.5 * x * x;
  };
  Rng rng(11);
  double prev = 0.0;
  for (double mu : {0.2, 0.5, 1.0, 3.0}) {
    const double edge = std::sqrt(2.0 * mu);
    double brute = 0.0;
    for (int i = 0; i <= 1000; ++i)
      for (int j = 0; j <= 1000; ++j) brute = std::max(brute, step_excess(-edge + 2.0 * edge * i / 1000, -mu + 2.0 * mu * j / 1000));
    EXPECT_NEAR(brute, std::min(0.5 * mu * mu, mu), 0.01 * mu);
    const auto g = dt_gamma_construction(sys, MonotoneCurve::identity(), mu, 2000, rng);
    EXPECT_LE(g.raw, brute * (1.0 + 1e-9) + 1e-12);
    EXPECT_GE(g.raw, 0.9 * brute);
    EXPECT_DOUBLE_EQ(g.gamma, std::max(g.raw, mu));
    EXPECT_EQ(g.invariance_violations, 0u);
    EXPECT_GT(g.invariance_checked, 0u);
    EXPECT_GE(g.gamma, prev);
    prev = g.gamma;
  }
}

TEST(ClassKMinorant, BelowAndStrict) {
  const Polyline f{{0.0, 1.0, 2.0, 3.0}, {0.0, 2.0, 1.0, 3.0}};
  const auto m = class_k_minorant(f);
  for (double r = 0.0; r <= 3.0; r += 0.01) EXPECT_LE(m(r), f(r) + 1e-12);
  EXPECT_TRUE(m.strict());
  EXPECT_THROW(class_k_minorant(Polyline{{0.0, 1.0}, {0.0, 0.0}}), ContractError);
}

TEST(Certificate, QuadraticClosedForm) {
  Rng rng(12);
  const auto sys = scalar_quadratic();
  const std::vector<double> levels{0.5, 2.0};
  const auto prof = lipschitz_profile(sys, levels, 100, rng);
  const auto alpha_tilde = MonotoneCurve::linear(2.0);  // |V'|^2 = x^2 = 2 W
  CertificateOptions opt;
  opt.verification_pairs = 1000;
  const auto cert = build_dt_lyapunov_certificate(sys, prof, alpha_tilde, opt, rng);
  EXPECT_EQ(cert.implication_violations, 0u);
  EXPECT_EQ(cert.checked, 1000u);
  // omega = |x| = 2 (|V'| / 2): chi(s) = 2 s up to the sampling majorant,
  // which overshoots by at most the level ratio 1.3 times the 5% padding
  for (double s : {0.1, 0.5, 0.9}) {
    EXPECT_GE(cert.chi(s), 2.0 * s * (1.0 - 1e-9));
    EXPECT_LE(cert.chi(s), 2.0 * s * 1.3 * 1.05 * (1.0 + 1e-9));
  }
  for (std::size_t k = 1; k < cert.alpha.r.size(); ++k)
    EXPECT_NEAR(cert.alpha.v[k], 2.0 * cert.alpha.r[k] / 27.0, 1e-6);
  EXPECT_EQ(cert.alpha(0.0), 0.0);
}

TEST(Certificate, ScalarLqrZeroViolationsAndIssTrace) {
  const auto inst = scalar_lqr_instance(1.0);
  const Loss loss = inst.as_loss();
  const DescentSystem sys(loss, InputMap::identity(1), size_from_loss(loss));
  const double wmax = 1.0;
  Rng rng(13);
  std::vector<double> levels;
  for (double w = wmax; w > 1e-4; w *= 0.6) levels.insert(levels.begin(), kStar + w);
  const auto prof = lipschitz_profile(sys, levels, 200, rng);
  const auto alpha_tilde = MonotoneCurve::linear(0.99 * grid_pl_constant(wmax));
  CertificateOptions opt;
  opt.verification_pairs = 1000;
  opt.max_excess = wmax;
  const auto cert = build_dt_lyapunov_certificate(sys, prof, alpha_tilde, opt, rng);
  EXPECT_EQ(cert.checked, 1000u);
  EXPECT_EQ(cert.implication_violations, 0u);

  const auto beta = kl_from_decrease(class_k_minorant(cert.alpha), DecreaseMode::discrete);
  for (double k0 : {1.8, 3.0, 3.3}) {
    ASSERT_LE(sys.excess(scalar_vector(k0)), wmax);
    const auto tr = run_descent(sys, scalar_vector(k0), NoiseModel::none(), 20, rng);
    EXPECT_TRUE(dt_iss_check(tr, beta, MonotoneCurve::identity()).passed());
  }
}
