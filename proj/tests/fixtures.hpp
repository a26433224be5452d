#pragma once

#include <string>

#include "h2margin/powerflow.hpp"

namespace fixtures {

using namespace h2margin;

inline std::string data_path(const std::string& name) { return std::string(H2MARGIN_DATA_DIR) + "/" + name; }

inline NetworkCase case39() { return load_case(data_path("case39.h2case")); }

inline std::vector<HourlyProfile> profiles24() { return load_profiles(data_path("profiles_24h.csv")); }

/// Slack at bus 1 (V = 1) feeding a unity-pf load at bus 2 through a lossless line.
inline NetworkCase two_bus(double x = 0.25, double p_load_mw = 100.0, double v_min = 0.1,
                           double v_max = 1.1) {
  NetworkCase c;
  c.name = "two-bus";
  c.system_base = 100.0;
  BusRecord b1;
  b1.id = 1;
  b1.v_min = 0.9;
  b1.v_max = 1.1;
  BusRecord b2;
  b2.id = 2;
  b2.base_demand_p = p_load_mw / 100.0;
  b2.v_min = v_min;
  b2.v_max = v_max;
  c.buses = {b1, b2};
  BranchRecord br;
  br.from_bus = 0;
  br.to_bus = 1;
  br.reactance = x;
  br.series_admittance = 1.0 / Complex(0.0, x);
  br.s_max = 100.0;
  c.branches = {br};
  GeneratorRecord g;
  g.bus = 0;
  g.pg_max = 50.0;
  g.ramp_up = g.ramp_down = 50.0;
  g.internal_emf = 1e6;
  g.xs_machine = 1.912;
  g.machine_base = 100000.0;
  g.synchronous_reactance = 1.912 * 100.0 / g.machine_base;
  g.stator_current_max = g.machine_base / 100.0;
  g.is_slack = true;
  g.big_m1 = g.big_m2 = 100.0;
  g.v_set = 1.0;
  c.generators = {g};
  validate_case(c);
  return c;
}

/// Hydrogen toy: slack held at 1.0 pu behind X = 0.25, load bus with base
/// demand PD0 and an electrolyzer, V in [0.9, 1.1]. Machine limits are far
/// from binding, so the voltage floor alone sets the deliverable power.
inline NetworkCase h2_toy(double pd0_mw = 50.0) {
  NetworkCase c = two_bus(0.25, pd0_mw, 0.9, 1.1);
  c.branches[0].s_max = 100.0;
  auto& g = c.generators[0];
  g.pg_max = 3.0;
  g.ramp_up = g.ramp_down = 3.0;
  g.internal_emf = 2.574;
  g.machine_base = 1000.0;
  g.synchronous_reactance = 1.912 * 100.0 / g.machine_base;
  g.stator_current_max = g.machine_base / 100.0;
  g.big_m1 = g.big_m2 = 6.0;
  ElectrolyzerRecord e;
  e.bus = 1;
  e.ph_max = 3.0;
  c.electrolyzers = {e};
  validate_case(c);
  c.buses[0].v_min = c.buses[0].v_max = 1.0;  // the validator wants a band; the slack is pinned
  return c;
}

inline HourlyProfile toy_hour(const NetworkCase& c) {
  HourlyProfile p;
  p.total_demand_p = c.total_base_demand_p() * c.system_base;
  return p;
}

/// Largest PH on a grid whose COP solves within limits and whose traced
/// loading margin reaches lambda.
inline double toy_grid_optimum(const NetworkCase& c, double lambda, double step = 1e-3, double ph_max = 2.0) {
  const auto y = build_admittance(c);
  const auto growth = GrowthDirection::from_case(c);
  double best = -1.0;
  for (int k = 0; k * step <= ph_max + 1e-12; ++k) {
    const double ph = k * step;
    Dispatch d;
    d.demand = nodal_demand(c, toy_hour(c));
    d.pg = {0.0};
    d.v_set = {c.generators[0].v_set};
    d.ph = {ph};
    d.qh = {0.0};
    try {
      const auto pf = newton_solve(c, y, d);
      bool ok = pf.max_mismatch < 1e-8;
      for (int b = 0; b < c.num_buses(); ++b)
        ok = ok && pf.point.v[b] >= c.buses[b].v_min - 1e-9 && pf.point.v[b] <= c.buses[b].v_max + 1e-9;
      if (ok && lambda > 0.0) {
        CpfOptions o;
        o.lambda_target = lambda;
        ok = cpf_loading_margin(c, y, d, growth, o).lambda_max >= lambda - 1e-9;
      }
      if (ok) best = ph;
    } catch (const Error&) {
    }
  }
  return best;
}

/// Dispatch from the case's reference generator data and base bus demands.
inline Dispatch reference_dispatch(const NetworkCase& c) {
  Dispatch d;
  for (const auto& b : c.buses) {
    d.demand.p.push_back(b.base_demand_p);
    d.demand.q.push_back(b.base_demand_q);
  }
  for (const auto& g : c.generators) {
    d.pg.push_back(g.pg0);
    d.v_set.push_back(g.v_set);
  }
  d.pw.assign(c.wind_farms.size(), 0.0);
  d.qw.assign(c.wind_farms.size(), 0.0);
  d.ph.assign(c.electrolyzers.size(), 0.0);
  d.qh.assign(c.electrolyzers.size(), 0.0);
  return d;
}

}  // namespace fixtures
