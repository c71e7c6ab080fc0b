#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "isslab/flow.hpp"
#include "isslab/losses.hpp"
#include "isslab/lqr.hpp"

using namespace isslab;

namespace {

const double kStar = 1.0 + std::sqrt(2.0);

Matrix m1(double v) { return Matrix::Constant(1, 1, v); }

// Central differences with a per-entry step 1e-5 (1 + |K_ij|).
Matrix fd_gradient(const LqrInstance& inst, const Matrix& k) {
  Matrix g(k.rows(), k.cols());
  for (Eigen::Index i = 0; i < k.rows(); ++i)
    for (Eigen::Index j = 0; j < k.cols(); ++j) {
      const double h = 1e-5 * (1.0 + std::abs(k(i, j)));
      Matrix kp = k, km = k;
      kp(i, j) += h;
      km(i, j) -= h;
      g(i, j) = (inst.loss(kp) - inst.loss(km)) / (2.0 * h);
    }
  return g;
}

}  // namespace

TEST(LqrLoss, ScalarExamples) {
  const auto inst = scalar_lqr_instance(1.0);
  EXPECT_NEAR(inst.loss(m1(2.0)), 2.5, 1e-14);
  EXPECT_NEAR(inst.loss(m1(kStar)), kStar, 1e-14);
  EXPECT_NEAR(inst.optimal_loss(), kStar, 1e-12);
  EXPECT_NEAR(inst.optimal_gain()(0, 0), kStar, 1e-12);
}

TEST(LqrLoss, DiagonalStableExample) {
  const Matrix I = Matrix::Identity(2, 2);
  const LqrInstance inst(LinearSystem(-I, I), CostWeights(I, I, I));
  EXPECT_NEAR(inst.loss(Matrix::Zero(2, 2)), 1.0, 1e-14);
}

TEST(LqrLoss, UnstabilizingGainLeavesDomain) {
  const auto inst = scalar_lqr_instance(1.0);
  EXPECT_THROW(inst.loss(m1(0.5)), DomainExitError);
  EXPECT_THROW(inst.grad(m1(1.0)), DomainExitError);
  EXPECT_FALSE(inst.domain().contains(scalar_vector(1.0)));
  EXPECT_TRUE(inst.domain().contains(scalar_vector(1.0 + 1e-9)));
}

TEST(LqrGrad, ScalarExamples) {
  const auto inst = scalar_lqr_instance(1.0);
  EXPECT_NEAR(inst.grad(m1(2.0))(0, 0), -0.5, 1e-14);
  EXPECT_NEAR(inst.grad(m1(kStar))(0, 0), 0.0, 1e-9);
}

TEST(LqrGrad, VanishesAtOptimumOfRandomInstances) {
  Rng rng(3);
  for (int trial = 0; trial < 6; ++trial) {
    const auto inst = random_lqr_instance(1 + trial % 4, 1 + trial % 2, rng);
    EXPECT_LE(inst.grad(inst.optimal_gain()).norm(), 1e-9 * (1.0 + inst.optimal_loss()));
  }
}

TEST(ScalarClosedForm, Examples) {
  const auto a = scalar_closed_form(1.0, 2.0);
  EXPECT_DOUBLE_EQ(a.value, 2.5);
  EXPECT_DOUBLE_EQ(a.derivative, -0.5);
  const auto opt = scalar_closed_form(1.0, kStar);
  EXPECT_NEAR(opt.value, kStar, 1e-14);
  EXPECT_NEAR(opt.derivative, 0.0, 1e-14);
  const auto c = scalar_closed_form(2.0, 1.0);
  EXPECT_DOUBLE_EQ(c.value, 1.0);
  EXPECT_DOUBLE_EQ(c.derivative, -1.0);
  EXPECT_THROW(scalar_closed_form(1.0, 1.0), DomainError);
  EXPECT_THROW(scalar_closed_form(-1.0, 2.0), DomainError);
}

TEST(ScalarClosedForm, MatrixModuleAgrees) {
  for (double b : {0.5, 1.0, 2.0, 3.0}) {
    const auto inst = scalar_lqr_instance(b);
    for (double k = 1.2 / b; k < 6.0 / b; k += 0.05 / b) {
      const auto c = scalar_closed_form(b, k);
      EXPECT_NEAR(inst.loss(m1(k)), c.value, 1e-12 * std::max(1.0, c.value));
      EXPECT_NEAR(inst.grad(m1(k))(0, 0), c.derivative, 1e-12 * std::max(1.0, std::abs(c.value)));
    }
  }
}

TEST(LqrGrad, AgreesWithFiniteDifferencesOnRandomInstances) {
  Rng rng(5);
  int checked = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto inst = random_lqr_instance(1 + trial % 4, 1 + (trial / 4) % 2, rng);
    for (const Matrix& k : sample_stabilizing_gains(inst, 5, rng)) {
      const Matrix g = inst.grad(k), fd = fd_gradient(inst, k);
      EXPECT_LE((g - fd).norm(), 1e-5 * g.norm() + 1e-9 * (1.0 + inst.loss(k)))
          << "n=" << k.cols() << " m=" << k.rows();
      ++checked;
    }
  }
  EXPECT_EQ(checked, 50);
}

TEST(StabilizingGains, SamplesAreInsideAndAboveOptimum) {
  Rng rng(6);
  const auto inst = random_lqr_instance(3, 2, rng);
  const auto gains = sample_stabilizing_gains(inst, 200, rng);
  ASSERT_EQ(gains.size(), 200u);
  for (const Matrix& k : gains) {
    EXPECT_TRUE(inst.stabilizing(k));
    EXPECT_TRUE(inst.domain().contains(flatten_gain(k)));
    EXPECT_GT(inst.loss(k), inst.optimal_loss());
  }
  EXPECT_TRUE(inst.domain().contains(flatten_gain(inst.optimal_gain())));
}

TEST(FlattenGain, RowMajorRoundTrip) {
  Matrix k(2, 3);
  k << 1, 2, 3, 4, 5, 6;
  const Vector v = flatten_gain(k);
  EXPECT_EQ(v(1), 2.0);
  EXPECT_EQ(v(3), 4.0);
  EXPECT_EQ(unflatten_gain(v, 2, 3), k);
}

TEST(PlConstant, QuadraticIsTwo) {
  const auto loss = quadratic_loss(1);
  Rng rng(7);
  const double c = pl_constant(loss, 4.0, 500, rng);
  EXPECT_GE(c, 2.0 - 1e-6);
  EXPECT_LE(c, 2.0 + 1e-3);
}

TEST(PlConstant, ScalarLqrAgainstGrid) {
  const auto inst = scalar_lqr_instance(1.0);
  const double r = 3.0;
  // sublevel {V <= 3}: k^2 - 6k + 7 <= 0, i.e. k in [3 - sqrt 2, 3 + sqrt 2]
  const double lo = 3.0 - std::sqrt(2.0), hi = 3.0 + std::sqrt(2.0);
  double grid_min = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 200000; ++i) {
    const double k = lo + (hi - lo) * i / 200000.0;
    if (std::abs(k - kStar) < 1e-6) continue;
    const auto c = scalar_closed_form(1.0, k);
    if (c.value > r) continue;
    grid_min = std::min(grid_min, c.derivative * c.derivative / (c.value - kStar));
  }
  Rng rng(8);
  const double est = pl_constant(inst, r, 2000, rng);
  EXPECT_GT(est, 0.0);
  EXPECT_GE(est, grid_min * (1.0 - 1e-6));
  EXPECT_LE(est, grid_min * 1.02);
}

TEST(PlConstant, NestedLevelsAreMonotone) {
  const auto inst = scalar_lqr_instance(1.0);
  const Loss loss = inst.as_loss();
  Rng rng(9);
  const SublevelSampler sampler(loss.domain, loss.value);
  const auto pts = sampler.draw(6.0, 1000, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (double r : {2.6, 3.0, 4.0, 6.0}) {
    const double c = pl_constant(loss, r, pts);
    EXPECT_LE(c, prev);
    prev = c;
  }
}

TEST(PlConstant, EmptySublevelIsCoverageError) {
  const auto loss = quadratic_loss(1);
  const std::vector<Vector> far{scalar_vector(10.0)};
  EXPECT_THROW(pl_constant(loss, 1.0, far), CoverageError);
}

TEST(Properness, LossBlowsUpAtTheBoundary) {
  Rng rng(10);
  std::normal_distribution<double> g;
  int rays = 0;
  for (int trial = 0; rays < 5; ++trial) {
    ASSERT_LT(trial, 100);
    const auto inst = random_lqr_instance(2 + trial % 2, 1, rng);
    Matrix d(inst.gain_rows(), inst.gain_cols());
    for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = g(rng);
    d /= d.norm();
    const Matrix& k0 = inst.optimal_gain();
    double inside = 0.0, outside = 1.0;
    while (outside < 1e6 && inst.stabilizing(k0 + outside * d)) {
      inside = outside;
      outside *= 2.0;
    }
    if (outside >= 1e6) continue;  // some rays never leave the stabilizing set
    ++rays;
    for (int it = 0; it < 200 && outside - inside > 1e-15 * outside; ++it) {
      const double mid = 0.5 * (inside + outside);
      (inst.stabilizing(k0 + mid * d) ? inside : outside) = mid;
    }
    double last = inst.optimal_loss();
    for (double gap : {1e-2, 1e-4, 1e-6, 1e-8}) {
      const double v = inst.loss(k0 + inside * (1.0 - gap) * d);
      EXPECT_GT(v, last);
      last = v;
    }
    EXPECT_GT(last, 1e3 * inst.optimal_loss());
  }
}

TEST(GradientFlow, ConvergesToOptimalGain) {
  Rng rng(11);
  std::vector<LqrInstance> instances{scalar_lqr_instance(1.0), random_lqr_instance(2, 1, rng)};
  for (const auto& inst : instances) {
    const Loss loss = inst.as_loss();
    const PerturbedGradientSystem sys(loss, 1.0, InputMap::identity(loss.domain.dimension()));
    FlowOptions opt;
    opt.tol = 1e-11;
    opt.output_dt = 1.0;
    for (const Matrix& k0 : sample_stabilizing_gains(inst, 3, rng)) {
      const auto tr = integrate(sys, flatten_gain(k0), InputSignal::zero(sys.inputs()), 400.0, opt);
      ASSERT_EQ(tr.termination, Termination::completed);
      EXPECT_LE((tr.states.back() - flatten_gain(inst.optimal_gain())).norm(), 1e-6);
    }
  }
}

TEST(LqrJson, ShapeErrorsNameTheField) {
  const auto j = nlohmann::json::parse(R"({"A":[[0,1],[-1,0.5]],"B":[[0],[1],[2]],"Q":[[1,0],[0,1]],"R":[[1]],"Sigma":[[1,0],[0,1]]})");
  try {
    lqr_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("matrix field 'B'"), std::string::npos);
  }
  auto missing = j;
  missing.erase("Sigma");
  EXPECT_THROW(lqr_from_json(missing), ConfigError);
  auto ok = j;
  ok["B"] = nlohmann::json::parse("[[0],[1]]");
  EXPECT_TRUE(lqr_from_json(ok).stabilizing(lqr_from_json(ok).optimal_gain()));
}
