#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "h2margin/algebraic_model.hpp"
#include "h2margin/interior_point.hpp"

using namespace h2margin;

namespace {

PrimalDual cold(const AlgebraicModel& m) { return {m.initial_point(), {}, {}, {}}; }

IpmResult run(const AlgebraicModel& m, std::vector<IterationRecord>* log = nullptr) {
  InteriorPointSolver<AlgebraicModel> s(m);
  SolverOptions o;
  return s.solve(cold(m), o, o.mu_initial, log);
}

}  // namespace

TEST(InteriorPoint, QuadraticWithLowerBoundRow) {
  // min x^2 s.t. x >= 1
  AlgebraicModel m;
  int x = m.add_variable(-kInf, kInf, 5.0);
  m.add_row(1.0, kInf, {}).add(x, 1.0);
  m.add_penalized_row({}).add(x, 1.0);
  m.finalize();
  m.set_penalty_weight(1.0);
  auto r = run(m);
  ASSERT_TRUE(r.converged);
  EXPECT_NEAR(r.point.x[x], 1.0, 1e-6);
  EXPECT_NEAR(r.point.y[0], -2.0, 1e-5);  // L = f + y g
  EXPECT_LE(kkt_residual(m, r.point), 1e-6);
  EXPECT_LE(r.violation, 1e-6);
}

TEST(InteriorPoint, UnconstrainedQuadraticHasZeroResidual) {
  AlgebraicModel m;
  int x = m.add_variable(-kInf, kInf, 0.0);
  auto& r0 = m.add_penalized_row({});
  r0.constant = -3.0;
  r0.add(x, 1.0);
  m.finalize();
  m.set_penalty_weight(1.0);
  auto r = run(m);
  ASSERT_TRUE(r.converged);
  EXPECT_NEAR(r.point.x[x], 3.0, 1e-10);
  EXPECT_LE(kkt_residual(m, r.point), 1e-10);
}

TEST(InteriorPoint, Rosenbrock) {
  AlgebraicModel m;
  int x = m.add_variable(-kInf, kInf, -1.2);
  int y = m.add_variable(-kInf, kInf, 1.0);
  auto& a = m.add_penalized_row({});
  a.constant = 1.0;
  a.add(x, -1.0);
  m.add_penalized_row({}).add(y, 10.0).add(Term::sq(-10.0, x));
  m.finalize();
  m.set_penalty_weight(1.0);
  auto r = run(m);
  ASSERT_TRUE(r.converged);
  EXPECT_NEAR(r.point.x[x], 1.0, 1e-6);
  EXPECT_NEAR(r.point.x[y], 1.0, 1e-6);
}

TEST(InteriorPoint, LinearObjectiveOnDisc) {
  AlgebraicModel m;
  int x = m.add_variable(-kInf, kInf, 0.0);
  int y = m.add_variable(-kInf, kInf, 0.0);
  m.add_row(-kInf, 1.0, {}).add(Term::sq(1.0, x)).add(Term::sq(1.0, y));
  m.set_objective_linear(x, -1.0);
  m.set_objective_linear(y, -1.0);
  m.finalize();
  auto r = run(m);
  ASSERT_TRUE(r.converged);
  EXPECT_NEAR(r.point.x[x], std::sqrt(0.5), 1e-6);
  EXPECT_NEAR(r.point.x[y], std::sqrt(0.5), 1e-6);
  EXPECT_NEAR(r.point.y[0], 1.0 / std::sqrt(2.0), 1e-5);
}

TEST(InteriorPoint, NonconvexEqualityNeedsInertiaCorrection) {
  // min x + 2y on the unit circle; the Hessian of the Lagrangian is
  // indefinite at the start (y = 0 multiplier, far from the optimum)
  AlgebraicModel m;
  int x = m.add_variable(-kInf, kInf, 0.6);
  int y = m.add_variable(-kInf, kInf, 0.8);
  m.add_row(1.0, 1.0, {}).add(Term::sq(1.0, x)).add(Term::sq(1.0, y));
  m.set_objective_linear(x, 1.0);
  m.set_objective_linear(y, 2.0);
  m.finalize();
  auto r = run(m);
  ASSERT_TRUE(r.converged);
  EXPECT_NEAR(r.point.x[x], -1.0 / std::sqrt(5.0), 1e-6);
  EXPECT_NEAR(r.point.x[y], -2.0 / std::sqrt(5.0), 1e-6);
}

TEST(InteriorPoint, BoxBoundsAndFixedVariables) {
  // min -x - y - z, x in [0, 2], y fixed at 0.5, z in [-1, 1], x + z <= 2.5
  AlgebraicModel m;
  int x = m.add_variable(0.0, 2.0, 1.0);
  int y = m.add_variable(0.5, 0.5, 0.0);
  int z = m.add_variable(-1.0, 1.0, 0.0);
  m.add_row(-kInf, 2.5, {}).add(x, 1.0).add(z, 1.0);
  m.add_row(-kInf, 10.0, {}).add(y, 1.0).add(x, 1.0);
  for (int v : {x, y, z}) m.set_objective_linear(v, -1.0);
  m.finalize();
  auto r = run(m);
  ASSERT_TRUE(r.converged);
  EXPECT_EQ(r.point.x[y], 0.5);
  EXPECT_NEAR(r.point.x[x] + r.point.x[z], 2.5, 1e-6);
  EXPECT_GE(r.point.x[x], 1.5 - 1e-6);
  EXPECT_LE(kkt_residual(m, r.point), 1e-5);
}

TEST(InteriorPoint, DetectsLocalInfeasibility) {
  AlgebraicModel m;
  int x = m.add_variable(2.0, 5.0, 3.0);
  int y = m.add_variable(-kInf, kInf, 0.0);
  m.add_row(-kInf, 1.0, {}).add(Term::sq(1.0, x)).add(Term::sq(1.0, y));
  m.set_objective_linear(y, 1.0);
  m.finalize();
  auto r = run(m);
  EXPECT_FALSE(r.converged);
  EXPECT_TRUE(r.infeasible);
  EXPECT_GT(r.violation, 1.0);
}

TEST(InteriorPoint, BarrierParameterIsMonotone) {
  AlgebraicModel m;
  int x = m.add_variable(-kInf, kInf, 0.0);
  int y = m.add_variable(-kInf, kInf, 0.0);
  m.add_row(-kInf, 1.0, {}).add(Term::sq(1.0, x)).add(Term::sq(1.0, y));
  m.add_row(0.2, kInf, {}).add(x, 1.0).add(y, -1.0);
  m.set_objective_linear(x, -1.0);
  m.set_objective_linear(y, -2.0);
  m.finalize();
  std::vector<IterationRecord> log;
  auto r = run(m, &log);
  ASSERT_TRUE(r.converged);
  ASSERT_GT(log.size(), 2u);
  for (std::size_t k = 1; k < log.size(); ++k) EXPECT_LE(log[k].mu, log[k - 1].mu);
  std::ostringstream os;
  write_iteration_log(log, os);
  EXPECT_EQ(os.str().rfind("iter mu rho", 0), 0u);
}

TEST(InteriorPoint, WarmStartFromSolutionIsCheap) {
  AlgebraicModel m;
  int x = m.add_variable(-kInf, kInf, 0.0);
  int y = m.add_variable(-kInf, kInf, 0.0);
  m.add_row(-kInf, 1.0, {}).add(Term::sq(1.0, x)).add(Term::sq(2.0, y));
  m.set_objective_linear(x, -1.0);
  m.set_objective_linear(y, -1.0);
  m.finalize();
  auto first = run(m);
  ASSERT_TRUE(first.converged);
  InteriorPointSolver<AlgebraicModel> s(m);
  SolverOptions o;
  o.bound_push = 1e-8;
  auto second = s.solve(first.point, o, 1e-7);
  ASSERT_TRUE(second.converged);
  EXPECT_LT(second.iterations, first.iterations);
  EXPECT_NEAR(second.point.x[x], first.point.x[x], 1e-6);
}

TEST(InteriorPoint, ResidualFlagsNonStationaryPoints) {
  AlgebraicModel m;
  int x = m.add_variable(-kInf, kInf, 0.0);
  m.add_penalized_row({}).add(x, 1.0);
  m.finalize();
  m.set_penalty_weight(1.0);
  PrimalDual p{Eigen::VectorXd::Constant(1, 0.5), Eigen::VectorXd(), Eigen::VectorXd::Zero(1),
               Eigen::VectorXd::Zero(1)};
  EXPECT_NEAR(kkt_residual(m, p), 1.0, 1e-12);
}
