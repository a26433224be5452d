#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "h2margin/harvest_model.hpp"

using namespace h2margin;

namespace {

HourlyProfile base_hour(const NetworkCase& c, int hour = 1, double wind_mw = 0.0) {
  HourlyProfile p;
  p.hour = hour;
  p.total_demand_p = c.total_base_demand_p() * c.system_base;
  p.total_demand_q = c.total_base_demand_q() * c.system_base;
  p.wind_available = wind_mw;
  return p;
}

ScenarioConfig scenario(std::vector<HourlyProfile> profiles, double alpha = 0.5, double lm = 0.1) {
  ScenarioConfig s;
  s.profiles = std::move(profiles);
  s.alpha = alpha;
  s.lm_required = lm;
  return s;
}

// two-bus case with a machine of ordinary size, so every capability row stays well scaled
NetworkCase machine_two_bus() {
  auto c = fixtures::two_bus(0.25, 100.0, 0.9, 1.1);
  auto& g = c.generators[0];
  g.pg_max = 2.0;
  g.ramp_up = g.ramp_down = 2.0;
  g.internal_emf = 2.574;
  g.machine_base = 200.0 / 0.85;
  g.synchronous_reactance = 1.912 * 100.0 / g.machine_base;
  g.stator_current_max = g.machine_base / 100.0;
  g.big_m1 = g.big_m2 = 4.0;
  validate_case(c);
  return c;
}

std::vector<HourlyProfile> first_hours(int n) {
  auto p = fixtures::profiles24();
  p.resize(n);
  return p;
}

// Interior point within the variable box; unbounded entries drawn near
// sensible magnitudes.
DecisionVector random_point(const ModelInstance& in, std::mt19937_64& rng) {
  const auto& m = in.model;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  DecisionVector x(m.n());
  for (int j = 0; j < m.n(); ++j) {
    double lo = m.x_lower()[j], hi = m.x_upper()[j];
    if (!std::isfinite(lo)) lo = std::isfinite(hi) ? hi - 2.0 : -1.0;
    if (!std::isfinite(hi)) hi = lo + 2.0;
    x[j] = lo + (0.05 + 0.9 * u(rng)) * (hi - lo);
  }
  for (int t = 0; t < in.horizon(); ++t)
    for (int cp = 0; cp < 2; ++cp)
      for (int b = 0; b < in.network.num_buses(); ++b) x[in.theta(t, cp, b)] = 0.5 * (u(rng) - 0.5);
  x[in.lambda] = 0.3 * u(rng);
  return x;
}

void expect_jacobian_matches_fd(const ModelInstance& in, int points, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double h = 1e-6;
  for (int k = 0; k < points; ++k) {
    DecisionVector x = random_point(in, rng);
    const Eigen::MatrixXd jac = Eigen::MatrixXd(constraint_eval(in, x).jacobian);
    double worst = 0.0;
    for (int j = 0; j < in.model.n(); ++j) {
      DecisionVector xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      const Eigen::VectorXd fd = (constraint_residual(in, xp) - constraint_residual(in, xm)) / (2.0 * h);
      for (Eigen::Index r = 0; r < fd.size(); ++r) {
        const double an = jac(r, j);
        worst = std::max(worst, std::abs(fd[r] - an) / std::max(1.0, std::abs(an)));
      }
    }
    EXPECT_LT(worst, 1e-6) << "point " << k;
  }
}

}  // namespace

TEST(Assemble, CensusMatchesClosedForm) {
  const auto c = fixtures::case39();
  const auto in = assemble(c, scenario(fixtures::profiles24()));
  const int T = 24, nb = 39, nbr = static_cast<int>(c.branches.size()), ng = 10, nw = 6, ne = 29;
  ASSERT_EQ(in.num_units(), ne);
  ASSERT_EQ(static_cast<int>(c.wind_farms.size()), nw);
  const auto n = census(in);
  const std::map<std::string, int> expected = {
      {family::active_balance, nb * T * 2},
      {family::reactive_balance, nb * T * 2},
      {family::reserve, ng * T},
      {family::wind_cap, T},
      {family::ramp, 2 * ng * (T - 1)},
      {family::armature_circle, 2 * ng * T},
      {family::field_circle, 2 * ng * T},
      {family::field_root, 2 * ng * T},
      {family::underexcitation, 2 * ng * T},
      {family::q_armature, ng * T},
      {family::q_field, ng * T},
      {family::qcap_armature, ng * T},
      {family::qcap_field, ng * T},
      {family::qcap_select_armature, ng * T},
      {family::qcap_select_field, ng * T},
      {family::q_below_cap, ng * T},
      {family::flow_from, 2 * nbr * T},
      {family::flow_to, 2 * nbr * T},
      {family::pg_scale_upper, (ng - 1) * T},
      {family::pg_scale_lower, (ng - 1) * T},
      {family::pg_capacity_lower, (ng - 1) * T},
      {family::voltage_coupling, ng * T},
      {family::complementarity_up, ng * T},
      {family::complementarity_down, ng * T},
      {family::p2h_coupling, ne * T},
      {family::wind_coupling, nw * T},
      {family::loading_pin, 1},
      {family::binary_y, ng * T},
      {family::binary_z, (ng - 1) * T},
  };
  EXPECT_EQ(n, expected);

  // variables: per point 2 nb + 4 ng + 2 nw + 2 ne, plus qcap at the SLP, plus 4 ng per hour, plus lambda
  const int per_point = 2 * nb + 4 * ng + 2 * nw + 2 * ne;
  EXPECT_EQ(in.model.n(), T * (2 * per_point + ng + 4 * ng) + 1);
  EXPECT_EQ(static_cast<int>(in.binary_y.size()), ng * T);
  EXPECT_EQ(static_cast<int>(in.binary_z.size()), (ng - 1) * T);
  EXPECT_EQ(static_cast<int>(in.complementarity_rows.size()), 2 * ng * T);
}

TEST(Assemble, CatalogListsEveryRow) {
  const auto c = fixtures::case39();
  const auto in = assemble(c, scenario(first_hours(2)));
  std::ostringstream os;
  write_catalog(in, os);
  std::istringstream is(os.str());
  std::string line;
  int lines = 0;
  std::getline(is, line);
  EXPECT_EQ(line[0], '#');
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    int id;
    std::string fam;
    ls >> id >> fam;
    EXPECT_EQ(id, lines);
    EXPECT_FALSE(fam.empty());
    ++lines;
  }
  EXPECT_EQ(lines, in.model.num_rows());
}

TEST(Assemble, SingleHourSingleCandidateHasNoRamps) {
  const auto c = fixtures::case39();
  auto s = scenario(first_hours(1));
  s.p2h_candidates = {c.bus_index(10)};
  const auto in = assemble(c, s);
  const auto n = census(in);
  EXPECT_EQ(n.count(family::ramp), 0u);
  EXPECT_EQ(in.num_units(), 1);
  EXPECT_EQ(n.at(family::p2h_coupling), 1);
  EXPECT_EQ(in.network.buses[in.network.electrolyzers[0].bus].id, 10);
}

TEST(Assemble, ZeroAlphaForcesWindOff) {
  const auto c = fixtures::case39();
  const auto in = assemble(c, scenario(first_hours(3), 0.0));
  for (int t = 0; t < 3; ++t)
    for (int cp = 0; cp < 2; ++cp)
      for (int w = 0; w < 6; ++w) EXPECT_EQ(in.model.x_upper()[in.pw(t, cp, w)], 0.0);
  for (const auto& r : in.model.rows())
    if (in.model.families()[r.info.family] == family::wind_cap) EXPECT_EQ(r.upper, 0.0);
}

TEST(Assemble, WindAvailabilityCappedByFarmRating) {
  const auto c = fixtures::case39();
  auto p = first_hours(1);
  p[0].wind_available = 900.0;
  const auto in = assemble(c, scenario(p, 1.0));
  for (int w = 0; w < 6; ++w) EXPECT_DOUBLE_EQ(in.model.x_upper()[in.pw(0, 0, w)], c.wind_farms[w].capacity);
}

TEST(Assemble, Errors) {
  const auto c = fixtures::case39();
  auto s = scenario(first_hours(1));
  s.mode = HarvestMode::dispatch;
  try {
    assemble(c, s);
    FAIL() << "expected ScenarioError";
  } catch (const ScenarioError& e) {
    EXPECT_STREQ(e.what(), "no P2H units");
  }
  s = scenario(first_hours(1));
  s.p2h_candidates = {99};
  EXPECT_THROW(assemble(c, s), ScenarioError);
  s = scenario(first_hours(1), 1.5);
  EXPECT_THROW(assemble(c, s), ScenarioError);
  s = scenario(first_hours(1), 0.5, -0.1);
  EXPECT_THROW(assemble(c, s), ScenarioError);
  s = scenario({});
  EXPECT_THROW(assemble(c, s), ScenarioError);
  s = scenario(first_hours(1));
  s.solver.rounding_threshold = 1.0;
  EXPECT_THROW(assemble(c, s), ScenarioError);
  // inverted generator limits
  auto two = fixtures::two_bus();
  two.generators[0].pg_min = 1.0;
  two.generators[0].pg_max = 0.5;
  s = scenario({base_hour(two)});
  EXPECT_THROW(assemble(two, s), Error);
}

TEST(Objective, OneUnitFullDay) {
  const auto c = fixtures::case39();
  auto s = scenario(fixtures::profiles24());
  s.p2h_candidates = {c.bus_index(2)};
  const auto in = assemble(c, s);
  DecisionVector x = DecisionVector::Zero(in.model.n());
  Eigen::VectorXd g;
  EXPECT_EQ(objective_eval(in, x, &g), 0.0);
  const Eigen::VectorXd g0 = g;
  for (int t = 0; t < 24; ++t) x[in.ph(t, 0, 0)] = 1.0;
  EXPECT_NEAR(objective_eval(in, x, &g), 33360.0, 1e-9);
  for (int j = 0; j < in.model.n(); ++j) {
    bool cop_ph = false;
    for (int t = 0; t < 24; ++t) cop_ph = cop_ph || j == in.ph(t, 0, 0);
    EXPECT_EQ(g[j], cop_ph ? 13.90 * 100.0 : 0.0);
  }
  EXPECT_EQ((g - g0).norm(), 0.0);
  // SLP demand earns nothing
  x[in.ph(0, 1, 0)] = 5.0;
  EXPECT_NEAR(objective_eval(in, x), 33360.0, 1e-9);
  // the solver's objective is the same quantity in tonnes, negated
  EXPECT_NEAR(in.model.eval_f(x), -33.360, 1e-12);
}

TEST(Residual, NewtonPointBalancesAtZeroMargin) {
  const auto c = fixtures::case39();
  auto s = scenario({base_hour(c)}, 0.5, 0.0);
  const auto in = assemble(c, s);
  auto d = fixtures::reference_dispatch(in.network);
  NewtonOptions o;
  o.enforce_q_limits = false;
  const auto pf = newton_solve(in.network, in.admittance, d, o);

  DecisionVector x = flat_start(in);
  embed_point(in, x, 0, 0, pf.point);
  embed_point(in, x, 0, 1, pf.point);
  x[in.lambda] = 0.0;
  for (int g = 0; g < in.network.num_generators(); ++g) {
    x[in.v_up(0, g)] = x[in.v_dn(0, g)] = 0.0;
    x[in.z(0, g)] = 0.0;
  }
  const auto ev = constraint_eval(in, x);
  const auto& rows = in.model.rows();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const std::string fam = in.model.families()[rows[k].info.family];
    const double r = ev.residual[static_cast<Eigen::Index>(k)];
    if (fam == family::active_balance || fam == family::reactive_balance) {
      EXPECT_LT(std::abs(r), 1e-8) << fam << " row " << k;
    } else if (fam == family::voltage_coupling || fam == family::p2h_coupling || fam == family::wind_coupling) {
      EXPECT_EQ(r, 0.0) << fam;
    } else if (fam == family::pg_scale_upper || fam == family::pg_scale_lower ||
               fam == family::complementarity_up || fam == family::complementarity_down) {
      EXPECT_LE(r, 0.0) << fam;
    }
  }
  // the point read back is the one embedded
  const auto back = point_from(in, x, 0, 1);
  EXPECT_LT(mismatch(in.network, in.admittance, back).max_abs(), 1e-8);
}

TEST(Residual, BinaryRows) {
  const auto c = fixtures::case39();
  const auto in = assemble(c, scenario(first_hours(1)));
  DecisionVector x = flat_start(in);
  const auto& rows = in.model.rows();
  auto check = [&](double yv, double expected) {
    for (int j : in.binary_y) x[j] = yv;
    for (int j : in.binary_z) x[j] = yv;
    const auto r = constraint_residual(in, x);
    int seen = 0;
    for (std::size_t k = 0; k < rows.size(); ++k)
      if (rows[k].penalized) {
        EXPECT_DOUBLE_EQ(r[static_cast<Eigen::Index>(k)], expected);
        ++seen;
      }
    EXPECT_EQ(seen, 19);
  };
  check(0.0, 0.0);
  check(1.0, 0.0);
  check(0.5, 0.25);
}

TEST(Residual, InequalityForm) {
  const auto c = fixtures::case39();
  const auto in = assemble(c, scenario(first_hours(2)));
  DecisionVector x = flat_start(in);
  const auto r = constraint_residual(in, x);
  const auto& rows = in.model.rows();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k].penalized || rows[k].lower == rows[k].upper) continue;
    const double g = in.model.row_value(static_cast<int>(k), x);
    EXPECT_DOUBLE_EQ(r[static_cast<Eigen::Index>(k)], std::max(g - rows[k].upper, rows[k].lower - g));
  }
  EXPECT_GE(max_violation(in, x), 0.0);
}

TEST(Jacobian, TwoBusMatchesFiniteDifferences) {
  const auto c = machine_two_bus();
  const auto in = assemble(c, scenario({base_hour(c)}, 0.5, 0.1));
  expect_jacobian_matches_fd(in, 10, 11);
}

TEST(Jacobian, Case39MatchesFiniteDifferences) {
  const auto c = fixtures::case39();
  const auto in = assemble(c, scenario(first_hours(2)));
  expect_jacobian_matches_fd(in, 10, 12);
}

TEST(Complementarity, EpsilonUpdatesEveryRow) {
  const auto c = fixtures::case39();
  auto in = assemble(c, scenario(first_hours(1)));
  set_complementarity_eps(in, 1e-3);
  for (int r : in.complementarity_rows) EXPECT_EQ(in.model.rows()[r].upper, 1e-3);
}

TEST(Binaries, ResetSelectsTighterLimit) {
  const auto c = fixtures::case39();
  const auto in = assemble(c, scenario(first_hours(1)));
  DecisionVector x = flat_start(in);
  reset_binaries(in, x);
  for (int g = 0; g < in.network.num_generators(); ++g) {
    const double y = x[in.y(0, g)];
    EXPECT_TRUE(y == 0.0 || y == 1.0);
    EXPECT_EQ(y == 1.0, x[in.l2(0, 1, g)] < x[in.l1(0, 1, g)]);
  }
  EXPECT_EQ(integrality_gap(in, x), 0.0);
}
