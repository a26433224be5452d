#include <gtest/gtest.h>

#include <chrono>
#include <random>
#include <sstream>

#include "fixtures.hpp"

using namespace h2margin;

namespace {

// Reference dispatch moved inside the operating limits: generator setpoints
// capped below the 1.06 pu ceiling and the slack relieved by bus 30.
Dispatch feasible39(const NetworkCase& c) {
  auto d = fixtures::reference_dispatch(c);
  for (auto& v : d.v_set) v = std::min(v, 1.05);
  d.pg[0] = 3.3;
  return d;
}

CpfOptions nose_only() {
  CpfOptions o;
  o.stop_at_voltage_limits = false;
  o.stop_at_branch_limits = false;
  o.stop_at_slack_capacity = false;
  return o;
}

}  // namespace

TEST(Mismatch, FlatZeroInjection) {
  auto c = fixtures::two_bus(0.1, 0.0);
  auto y = build_admittance(c);
  auto p = OperatingPoint::flat(c);
  auto m = mismatch(c, y, p);
  EXPECT_LT(m.max_abs(), 1e-14);
}

TEST(Mismatch, TwoBusHandAngle) {
  auto c = fixtures::two_bus(0.1, 100.0);
  auto y = build_admittance(c);
  auto p = OperatingPoint::flat(c);
  p.pd = {0.0, 1.0};
  p.theta[1] = -std::asin(0.1);  // P = sin(delta) / X = 1
  auto m = mismatch(c, y, p);
  EXPECT_LT(std::abs(m.dp[1]), 1e-12);
  // the rounded 5.739 degree angle is within the rounding of the hand value
  p.theta[1] = -5.739 * std::numbers::pi / 180.0;
  EXPECT_LT(std::abs(mismatch(c, y, p).dp[1]), 1e-4);
}

TEST(Newton, Case39ReferenceDispatch) {
  auto c = fixtures::case39();
  auto y = build_admittance(c);
  auto d = fixtures::reference_dispatch(c);
  NewtonOptions o;
  o.enforce_q_limits = false;
  auto t0 = std::chrono::steady_clock::now();
  auto r = newton_solve(c, y, d, o);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LE(r.iterations, 10);
  EXPECT_LT(r.max_mismatch, 1e-8);
  EXPECT_LT(mismatch(c, y, r.point).max_abs(), 1e-8);
  EXPECT_LT(secs, 1.0);
  // published solution of the 39-bus case
  EXPECT_NEAR(r.point.v[0], 1.0394, 1e-4);
  EXPECT_NEAR(r.point.theta[0] * 180.0 / std::numbers::pi, -13.5366, 1e-3);
  EXPECT_NEAR(r.point.pg[c.slack_generator()] * 100.0, 677.87, 0.1);
  EXPECT_EQ(r.point.theta[c.slack_bus()], 0.0);
}

TEST(Newton, QLimitsRespected) {
  auto c = fixtures::case39();
  auto y = build_admittance(c);
  auto d = fixtures::reference_dispatch(c);
  // shrink the bus-30 machine so its reactive output must be capped
  c.generators[0].stator_current_max = 2.6;
  auto r = newton_solve(c, y, d);
  EXPECT_LT(mismatch(c, y, r.point).max_abs(), 1e-8);
  EXPECT_EQ(r.modes[0], GenMode::at_q_max);
  auto env = q_envelope(r.point.pg[0], r.point.v[c.generators[0].bus], c.generators[0]);
  EXPECT_NEAR(r.point.qg[0], env.q_max, 1e-8);
  EXPECT_LT(r.point.v[c.generators[0].bus], d.v_set[0]);
}

TEST(Newton, ZeroDemandIsFlat) {
  auto c = fixtures::two_bus(0.25, 0.0);
  auto y = build_admittance(c);
  auto r = newton_solve(c, y, fixtures::reference_dispatch(c));
  EXPECT_NEAR(r.point.v[1], 1.0, 1e-12);
  EXPECT_NEAR(r.point.theta[1], 0.0, 1e-12);
  EXPECT_NEAR(r.point.pg[0], 0.0, 1e-12);
}

TEST(Newton, TenfoldDemandFails) {
  auto c = fixtures::case39();
  auto y = build_admittance(c);
  auto d = fixtures::reference_dispatch(c);
  for (auto& p : d.demand.p) p *= 10.0;
  for (auto& q : d.demand.q) q *= 10.0;
  EXPECT_THROW(newton_solve(c, y, d), ConvergenceError);
}

TEST(BranchFlow, TwoBusHandComputation) {
  auto c = fixtures::two_bus(0.1, 100.0);
  auto y = build_admittance(c);
  auto r = newton_solve(c, y, fixtures::reference_dispatch(c));
  const Complex v1 = std::polar(r.point.v[0], r.point.theta[0]);
  const Complex v2 = std::polar(r.point.v[1], r.point.theta[1]);
  const Complex i = (v1 - v2) / Complex(0.0, 0.1);
  auto f = branch_apparent_flow(c, r.point, 0);
  EXPECT_NEAR(std::abs(f.s_from - v1 * std::conj(i)), 0.0, 1e-12);
  EXPECT_NEAR(f.s_to.real(), -1.0, 1e-8);  // unity-pf load receives exactly 1 pu
  EXPECT_NEAR(f.s_to.imag(), 0.0, 1e-8);
  EXPECT_GT(f.from_magnitude(), 1.0);
  EXPECT_DOUBLE_EQ(f.limit_value(), std::max(f.from_magnitude(), f.to_magnitude()));
}

TEST(BranchFlow, OrientationInvariant) {
  auto c = fixtures::case39();
  auto y = build_admittance(c);
  auto r = newton_solve(c, y, fixtures::reference_dispatch(c));
  for (std::size_t k = 0; k < c.branches.size(); ++k) {
    auto br = c.branches[k];
    if (br.tap != 1.0) continue;
    auto rev = br;
    std::swap(rev.from_bus, rev.to_bus);
    EXPECT_NEAR(branch_apparent_flow(br, r.point.v, r.point.theta).limit_value(),
                branch_apparent_flow(rev, r.point.v, r.point.theta).limit_value(), 1e-12);
  }
}

TEST(BranchFlow, OpenBranchCarriesNothing) {
  BranchRecord br;
  br.from_bus = 0;
  br.to_bus = 1;
  br.series_admittance = 0.0;
  auto f = branch_apparent_flow(br, {1.0, 0.97}, {0.0, -0.2});
  EXPECT_EQ(f.limit_value(), 0.0);
}

TEST(Cpf, TwoBusAnalyticNose) {
  auto c = fixtures::two_bus(0.25, 100.0);
  auto y = build_admittance(c);
  auto curve = cpf_loading_margin(c, y, fixtures::reference_dispatch(c), GrowthDirection::from_case(c));
  EXPECT_EQ(curve.stop, StopReason::nose);
  EXPECT_NEAR(curve.lambda_max, 1.0, 0.01);
  EXPECT_EQ(curve.monitored_bus, 1);
  // V at the nose of a lossless unity-pf line is E / sqrt(2)
  EXPECT_NEAR(curve.limit_point.v[1], 1.0 / std::sqrt(2.0), 0.02);
}

TEST(Cpf, VoltageFloorStopsBeforeNose) {
  auto c = fixtures::two_bus(0.25, 100.0, 0.9);
  auto y = build_admittance(c);
  auto curve = cpf_loading_margin(c, y, fixtures::reference_dispatch(c), GrowthDirection::from_case(c));
  EXPECT_EQ(curve.stop, StopReason::voltage_limit);
  // P at V = 0.9: 0.9 sqrt(1 - 0.81) / 0.25 with unity power factor
  const double p_floor = 0.9 * std::sqrt(1.0 - 0.81) / 0.25;
  EXPECT_NEAR(curve.lambda_max, p_floor - 1.0, 1e-4);
}

TEST(Cpf, SlackCapacityStopsTrace) {
  auto c = fixtures::two_bus(0.25, 100.0);
  c.generators[c.slack_generator()].pg_max = 1.5;
  auto y = build_admittance(c);
  auto curve = cpf_loading_margin(c, y, fixtures::reference_dispatch(c), GrowthDirection::from_case(c));
  EXPECT_EQ(curve.stop, StopReason::slack_capacity);
  EXPECT_NEAR(curve.lambda_max, 0.5, 1e-3);
}

// only the capacity side of the slack ends a trace
TEST(Cpf, SlackBelowMinimumKeepsTracing) {
  auto c = fixtures::two_bus(0.25, 100.0);
  c.generators[c.slack_generator()].pg_min = 1.2;
  auto y = build_admittance(c);
  auto curve = cpf_loading_margin(c, y, fixtures::reference_dispatch(c), GrowthDirection::from_case(c));
  EXPECT_EQ(curve.stop, StopReason::nose);
}

TEST(Cpf, ZeroGrowthIsUnbounded) {
  auto c = fixtures::two_bus(0.25, 100.0);
  for (auto& b : c.buses) b.kp = b.kq = b.kg = 0.0;
  auto y = build_admittance(c);
  auto curve = cpf_loading_margin(c, y, fixtures::reference_dispatch(c), GrowthDirection::from_case(c));
  EXPECT_TRUE(curve.unbounded());
  EXPECT_EQ(curve.stop, StopReason::unbounded_direction);
}

TEST(Cpf, InfeasibleBasePoint) {
  auto c = fixtures::two_bus(0.25, 300.0);
  auto y = build_admittance(c);
  EXPECT_THROW(cpf_loading_margin(c, y, fixtures::reference_dispatch(c), GrowthDirection::from_case(c)),
               ConvergenceError);
}

TEST(Cpf, Case39PositiveMarginAndEventsOnEnvelope) {
  auto c = fixtures::case39();
  auto y = build_admittance(c);
  auto d = feasible39(c);
  auto g = GrowthDirection::from_case(c);
  auto limited = cpf_loading_margin(c, y, d, g);
  EXPECT_GT(limited.lambda_max, 0.0);

  auto o = nose_only();
  int steps = 0;
  o.on_step = [&](double, const OperatingPoint& p, const std::vector<GenMode>& modes) {
    ++steps;
    for (int k = 0; k < c.num_generators(); ++k) {
      auto env = q_envelope(p.pg[k], p.v[c.generators[k].bus], c.generators[k]);
      if (modes[k] == GenMode::at_q_max)
        EXPECT_NEAR(p.qg[k], env.q_max, 1e-8);
      else if (modes[k] == GenMode::at_q_min)
        EXPECT_NEAR(p.qg[k], env.q_min, 1e-8);
      else {
        EXPECT_LT(p.qg[k], env.q_max);
        EXPECT_GT(p.qg[k], env.q_min);
      }
    }
  };
  auto curve = cpf_loading_margin(c, y, d, g, o);
  EXPECT_GT(steps, 3);
  EXPECT_GE(curve.lambda_max, limited.lambda_max);
  ASSERT_FALSE(curve.limit_events.empty());
  for (const auto& e : curve.limit_events) {
    EXPECT_NEAR(e.qg, e.q_limit, 1e-6);
  }
}

TEST(Cpf, MonitoredVoltageNonIncreasing) {
  auto c = fixtures::case39();
  auto y = build_admittance(c);
  auto curve = cpf_loading_margin(c, y, feasible39(c), GrowthDirection::from_case(c), nose_only());
  ASSERT_GT(curve.samples.size(), 3u);
  for (std::size_t i = 1; i < curve.samples.size(); ++i) {
    EXPECT_GE(curve.samples[i].lambda, curve.samples[i - 1].lambda);
    EXPECT_LE(curve.samples[i].v, curve.samples[i - 1].v + 1e-9) << i;
  }
}

TEST(Cpf, AddingP2HNeverRaisesMargin) {
  auto c = fixtures::case39();
  auto y0 = build_admittance(c);
  auto base_curve = cpf_loading_margin(c, y0, feasible39(c), GrowthDirection::from_case(c), nose_only());
  std::mt19937_64 rng(2024);
  auto loads = c.load_buses();
  std::uniform_int_distribution<std::size_t> pick(0, loads.size() - 1);
  std::uniform_real_distribution<double> size(0.05, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    auto cc = c;
    cc.electrolyzers.push_back({loads[pick(rng)], 0.0, 10.0, 0.0, 0.0, 13.9});
    auto d = feasible39(cc);
    d.ph = {size(rng)};
    d.qh = {0.0};
    auto y = build_admittance(cc);
    double lm = 0.0;
    try {
      lm = cpf_loading_margin(cc, y, d, GrowthDirection::from_case(cc), nose_only()).lambda_max;
    } catch (const ConvergenceError&) {
      lm = 0.0;
    }
    EXPECT_LE(lm, base_curve.lambda_max + 1e-6) << trial;
  }
}

TEST(Cpf, CsvExport) {
  auto c = fixtures::two_bus(0.25, 100.0);
  auto y = build_admittance(c);
  auto curve = cpf_loading_margin(c, y, fixtures::reference_dispatch(c), GrowthDirection::from_case(c));
  std::ostringstream os;
  write_pv_curve_csv(c, curve, os);
  EXPECT_NE(os.str().find("lambda,v,event\n0,0.96592"), std::string::npos) << os.str().substr(0, 120);
}
