#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"
#include "h2margin/harvest_solver.hpp"

using namespace h2margin;

namespace {

ScenarioConfig toy_scenario(double lambda) {
  ScenarioConfig s;
  s.mode = HarvestMode::dispatch;
  s.reserve = false;
  s.lm_required = lambda;
  s.profiles = {fixtures::toy_hour(fixtures::h2_toy())};
  return s;
}

double toy_optimum(double lambda, SolveReport* rep = nullptr) {
  const auto c = fixtures::h2_toy();
  const auto in = assemble(c, toy_scenario(lambda));
  const auto r = solve(in, flat_start(in), in.scenario.solver);
  if (rep) *rep = r.report;
  return r.x[in.ph(0, 0, 0)];
}

// P_max at V2 = 0.9 behind X = 0.25 from V1 = 1, unity power factor
double analytic_toy(double lambda) {
  const double v2 = 0.9, x = 0.25;
  const double p_max = v2 * std::sqrt(1.0 - v2 * v2) / x;
  return p_max - 0.5 * (1.0 + lambda);
}

ScenarioConfig hour_scenario(int hour, double lm = 0.15) {
  ScenarioConfig s;
  auto p = fixtures::profiles24();
  s.profiles = {p[hour]};
  s.lm_required = lm;
  return s;
}

double row_family_max(const ModelInstance& in, const DecisionVector& x, const std::string& fam) {
  double worst = -kInf;
  const auto r = constraint_residual(in, x);
  for (std::size_t k = 0; k < in.model.rows().size(); ++k)
    if (in.model.families()[in.model.rows()[k].info.family] == fam)
      worst = std::max(worst, r[static_cast<Eigen::Index>(k)]);
  return worst;
}

// one 39-bus hour solved once for the whole suite
class Case39Hour : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    instance_ = new ModelInstance(assemble(fixtures::case39(), hour_scenario(11)));
    result_ = new SolveResult(solve(*instance_, flat_start(*instance_), instance_->scenario.solver));
  }
  static void TearDownTestSuite() {
    delete result_;
    delete instance_;
  }
  static ModelInstance* instance_;
  static SolveResult* result_;
};

ModelInstance* Case39Hour::instance_ = nullptr;
SolveResult* Case39Hour::result_ = nullptr;

}  // namespace

TEST(Toy, AnalyticOptimum) {
  for (double lam : {0.0, 0.1, 0.2}) {
    SolveReport rep;
    const double ph = toy_optimum(lam, &rep);
    EXPECT_EQ(rep.status, SolveStatus::locally_optimal) << lam;
    EXPECT_NEAR(ph, analytic_toy(lam), 1e-5) << lam;
  }
}

TEST(Toy, MatchesGridSearch) {
  const auto c = fixtures::h2_toy();
  double prev = kInf;
  for (double lam : {0.0, 0.1, 0.2}) {
    const double grid = fixtures::toy_grid_optimum(c, lam);
    const double ph = toy_optimum(lam);
    EXPECT_NEAR(ph, grid, 2e-3) << lam;
    EXPECT_LT(ph, prev);
    prev = ph;
  }
}

TEST(Toy, ExcessMarginIsNotOptimal) {
  SolveReport rep;
  toy_optimum(5.0, &rep);
  EXPECT_NE(rep.status, SolveStatus::locally_optimal);
  EXPECT_GT(rep.violation, 1e-6);
}

TEST_F(Case39Hour, TerminatesLocallyOptimal) {
  const auto& rep = result_->report;
  EXPECT_EQ(rep.status, SolveStatus::locally_optimal);
  EXPECT_LE(rep.kkt_residual, 1e-6);
  EXPECT_LE(rep.violation, 1e-6);
  EXPECT_LE(rep.integrality_gap, 1e-6);
  EXPECT_LE(rep.complementarity, 1e-6);
  EXPECT_GT(rep.objective, 0.0);
  EXPECT_NEAR(rep.objective, objective_eval(*instance_, result_->x), 1e-9);
  EXPECT_FALSE(rep.log.empty());
}

TEST_F(Case39Hour, BinaryResidualBeforePolish) { EXPECT_LE(result_->report.binary_residual, 1e-8); }

TEST_F(Case39Hour, PolishKeepsFeasibility) {
  EXPECT_LE(result_->report.violation, std::max(result_->report.pre_polish_violation, 1e-6));
}

TEST_F(Case39Hour, ReserveAndWindCapHold) {
  const auto& in = *instance_;
  const auto& x = result_->x;
  EXPECT_LE(row_family_max(in, x, family::reserve), 1e-6);
  EXPECT_LE(row_family_max(in, x, family::wind_cap), 1e-6);
  // reserve in its original form
  const auto& net = in.network;
  for (int b = 0; b < net.num_generators(); ++b) {
    double spare = 0.0;
    for (int k = 0; k < net.num_generators(); ++k)
      if (k != b) spare += net.generators[k].pg_max - x[in.pg(0, 0, k)];
    EXPECT_GE(spare, x[in.pg(0, 0, b)] - 1e-6);
  }
  double pw = 0.0, pd = 0.0;
  for (int w = 0; w < static_cast<int>(net.wind_farms.size()); ++w) pw += x[in.pw(0, 0, w)];
  for (double p : in.demand[0].p) pd += p;
  EXPECT_LE(pw, in.scenario.alpha * pd + 1e-6);
}

TEST_F(Case39Hour, SelectedCapEqualsTighterLimit) {
  const auto& in = *instance_;
  const auto& x = result_->x;
  for (int g = 0; g < in.network.num_generators(); ++g) {
    if (x[in.y(0, g)] != 1.0) continue;
    const double m = in.network.generators[g].big_m1;
    const double tight = std::min(x[in.l1(0, 1, g)], x[in.l2(0, 1, g)]);
    EXPECT_NEAR(x[in.qcap(0, g)], tight, std::max(m * 1e-8, result_->report.violation)) << g;
  }
}

TEST_F(Case39Hour, SlpIsScaledCop) {
  const auto& in = *instance_;
  const auto& x = result_->x;
  const double lam = x[in.lambda];
  EXPECT_NEAR(lam, 0.15, 1e-9);
  for (int g = 0; g < in.network.num_generators(); ++g) {
    const auto& gen = in.network.generators[g];
    if (gen.is_slack) continue;
    const double want = std::min((1.0 + lam) * x[in.pg(0, 0, g)], gen.pg_max);
    EXPECT_NEAR(x[in.pg(0, 1, g)], want, 1e-5) << g;
  }
}

TEST(MultiStart, SingleStartIsPlainSolve) {
  const auto in = assemble(fixtures::case39(), hour_scenario(3));
  auto opt = in.scenario.solver;
  opt.multi_start_count = 1;
  const auto a = multi_start(in, opt);
  const auto b = solve(in, flat_start(in), opt);
  EXPECT_EQ(a.report.status, b.report.status);
  EXPECT_EQ(a.report.objective, b.report.objective);
  EXPECT_EQ((a.x - b.x).norm(), 0.0);
}

TEST(MultiStart, DeterministicUnderSeed) {
  const auto in = assemble(fixtures::case39(), hour_scenario(3));
  auto opt = in.scenario.solver;
  opt.multi_start_count = 3;
  opt.seed = 7;
  const auto a = multi_start(in, opt);
  const auto b = multi_start(in, opt);
  EXPECT_EQ(a.report.objective, b.report.objective);
  EXPECT_EQ(a.report.iterations, b.report.iterations);
  EXPECT_EQ((a.x - b.x).norm(), 0.0);
  opt.multi_start_count = 1;
  EXPECT_GE(a.report.objective, multi_start(in, opt).report.objective - 1e-6);
  opt.multi_start_count = 0;
  EXPECT_THROW(multi_start(in, opt), ScenarioError);
}

TEST(Monotonicity, HigherEfficiencyNeverLowersHydrogen) {
  auto c = fixtures::case39();
  for (int id : {2, 10, 22}) {
    ElectrolyzerRecord e;
    e.bus = c.bus_index(id);
    e.ph_max = 8.0;
    c.electrolyzers.push_back(e);
  }
  auto s = hour_scenario(11);
  s.mode = HarvestMode::dispatch;
  const auto base_in = assemble(c, s);
  const double th0 = solve(base_in, flat_start(base_in), s.solver).report.objective;
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> unit(0, 2);
  std::uniform_real_distribution<double> gain(1.05, 1.5);
  for (int k = 0; k < 3; ++k) {
    auto cc = c;
    cc.electrolyzers[unit(rng)].efficiency *= gain(rng);
    const auto in = assemble(cc, s);
    const auto r = solve(in, flat_start(in), s.solver);
    ASSERT_EQ(r.report.status, SolveStatus::locally_optimal);
    EXPECT_GE(r.report.objective, th0 * (1.0 - 1e-6)) << k;
  }
}
