#pragma once

// Two-operating-point, multi-hour hydrogen-harvest OPF assembled as an
// AlgebraicModel. Point 0 is the current operating point (COP), point 1 the
// security limit point (SLP) reached at loading parameter lambda.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "h2margin/algebraic_model.hpp"
#include "h2margin/capability.hpp"
#include "h2margin/error.hpp"
#include "h2margin/interior_point.hpp"
#include "h2margin/network.hpp"
#include "h2margin/powerflow.hpp"

namespace h2margin {

enum class HarvestMode { allocate, dispatch };

inline const char* to_string(HarvestMode m) { return m == HarvestMode::allocate ? "allocate" : "dispatch"; }

struct ScenarioConfig {
  double alpha = 0.5;
  double lm_required = 0.1;
  std::vector<HourlyProfile> profiles;
  HarvestMode mode = HarvestMode::allocate;
  /// Candidate buses (internal indices) for allocation; empty means every
  /// bus without a generator.
  std::vector<int> p2h_candidates;
  double p2h_ceiling_mw = 1000.0;
  double efficiency = 13.90;  // kg/MWh, allocation mode
  bool unity_power_factor = true;
  bool curtailable_p2h = false;  // SLP PH may drop below the COP value
  bool reserve = true;           // spinning-reserve rows at the COP
  double complementarity_eps = 1e-6;
  double size_epsilon_mw = 1.0;
  SolverOptions solver;

  int horizon() const { return static_cast<int>(profiles.size()); }

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ScenarioError("alpha must lie in [0, 1]");
    if (!(lm_required >= 0.0)) throw ScenarioError("lm_required must be non-negative");
    if (profiles.empty()) throw ScenarioError("empty horizon");
    if (!(p2h_ceiling_mw > 0.0)) throw ScenarioError("p2h ceiling must be positive");
    if (!(efficiency > 0.0)) throw ScenarioError("efficiency must be positive");
    const auto& s = solver;
    if (!(s.feasibility_tol > 0 && s.optimality_tol > 0 && s.complementarity_tol > 0))
      throw ScenarioError("solver tolerances must be positive");
    if (!(s.rounding_threshold > 0.0 && s.rounding_threshold < 1.0))
      throw ScenarioError("rounding threshold must lie in (0, 1)");
  }
};

/// All decision variables, indexed through ModelInstance's layout.
using DecisionVector = Eigen::VectorXd;

/// First variable index of each per-point block (-1 where absent).
struct PointLayout {
  int v = -1, theta = -1;      // per bus
  int pg = -1, qg = -1;        // per generator
  int l1 = -1, l2 = -1;        // capability circles, per generator
  int qcap = -1;               // SLP reactive ceiling, per generator
  int pw = -1, qw = -1;        // per wind farm
  int ph = -1, qh = -1;        // per P2H unit
};

/// Per-hour binaries and voltage-deviation slacks (per generator).
struct HourLayout {
  int y = -1, z = -1, v_up = -1, v_dn = -1;
};

struct ModelInstance {
  NetworkCase network;  // electrolyzers = the P2H units of this instance
  ScenarioConfig scenario;
  AdmittanceMatrix admittance;
  AlgebraicModel model;
  std::vector<std::array<PointLayout, 2>> layout;  // [hour][point]
  std::vector<HourLayout> hour_layout;
  int lambda = -1;
  std::vector<NodalDemand> demand;  // COP demand per hour
  std::vector<int> complementarity_rows;
  std::vector<int> binary_y, binary_z;  // variable indices of free binaries
  std::vector<std::vector<double>> wind_available;  // [hour][farm] pu

  int horizon() const { return static_cast<int>(layout.size()); }
  int num_units() const { return static_cast<int>(network.electrolyzers.size()); }

  int v(int t, int c, int b) const { return layout[t][c].v + b; }
  int theta(int t, int c, int b) const { return layout[t][c].theta + b; }
  int pg(int t, int c, int g) const { return layout[t][c].pg + g; }
  int qg(int t, int c, int g) const { return layout[t][c].qg + g; }
  int l1(int t, int c, int g) const { return layout[t][c].l1 + g; }
  int l2(int t, int c, int g) const { return layout[t][c].l2 + g; }
  int qcap(int t, int g) const { return layout[t][1].qcap + g; }
  int pw(int t, int c, int w) const { return layout[t][c].pw + w; }
  int qw(int t, int c, int w) const { return layout[t][c].qw + w; }
  int ph(int t, int c, int e) const { return layout[t][c].ph + e; }
  int qh(int t, int c, int e) const { return layout[t][c].qh + e; }
  int y(int t, int g) const { return hour_layout[t].y + g; }
  int z(int t, int g) const { return hour_layout[t].z + g; }
  int v_up(int t, int g) const { return hour_layout[t].v_up + g; }
  int v_dn(int t, int g) const { return hour_layout[t].v_dn + g; }

  /// Hydrogen yield per pu of COP electrolyzer demand for one hour (kg).
  double kg_per_pu(int e) const { return network.electrolyzers[e].efficiency * network.system_base; }
};

// Row families, in catalog order.
namespace family {
inline constexpr const char* active_balance = "active-balance";
inline constexpr const char* reactive_balance = "reactive-balance";
inline constexpr const char* reserve = "reserve";
inline constexpr const char* wind_cap = "wind-cap";
inline constexpr const char* ramp = "ramp";
inline constexpr const char* armature_circle = "armature-circle";
inline constexpr const char* field_circle = "field-circle";
inline constexpr const char* field_root = "field-root";
inline constexpr const char* underexcitation = "underexcitation";
inline constexpr const char* q_armature = "q-below-armature";
inline constexpr const char* q_field = "q-below-field";
inline constexpr const char* qcap_armature = "qcap-below-armature";
inline constexpr const char* qcap_field = "qcap-below-field";
inline constexpr const char* qcap_select_armature = "qcap-select-armature";
inline constexpr const char* qcap_select_field = "qcap-select-field";
inline constexpr const char* q_below_cap = "q-below-cap";
inline constexpr const char* flow_from = "branch-flow-from";
inline constexpr const char* flow_to = "branch-flow-to";
inline constexpr const char* pg_scale_upper = "pg-scale-upper";
inline constexpr const char* pg_scale_lower = "pg-scale-lower";
inline constexpr const char* pg_capacity_lower = "pg-capacity-lower";
inline constexpr const char* voltage_coupling = "voltage-coupling";
inline constexpr const char* complementarity_up = "complementarity-up";
inline constexpr const char* complementarity_down = "complementarity-down";
inline constexpr const char* p2h_coupling = "p2h-coupling";
inline constexpr const char* wind_coupling = "wind-coupling";
inline constexpr const char* loading_pin = "loading-pin";
inline constexpr const char* binary_y = "binary-y";
inline constexpr const char* binary_z = "binary-z";
}  // namespace family

namespace detail {

inline std::vector<ElectrolyzerRecord> p2h_units(const NetworkCase& c, const ScenarioConfig& s) {
  std::vector<ElectrolyzerRecord> units;
  if (s.mode == HarvestMode::dispatch) {
    units = c.electrolyzers;
    if (units.empty()) throw ScenarioError("no P2H units");
    return units;
  }
  std::vector<int> buses = s.p2h_candidates.empty() ? c.load_buses() : s.p2h_candidates;
  std::sort(buses.begin(), buses.end());
  buses.erase(std::unique(buses.begin(), buses.end()), buses.end());
  if (buses.empty()) throw ScenarioError("no P2H units");
  for (int b : buses) {
    if (b < 0 || b >= c.num_buses()) throw ScenarioError("P2H candidate on unknown bus");
    ElectrolyzerRecord e;
    e.bus = b;
    e.ph_min = 0.0;
    e.ph_max = s.p2h_ceiling_mw / c.system_base;
    e.efficiency = s.efficiency;
    units.push_back(e);
  }
  return units;
}

}  // namespace detail

/// Builds the full program. lambda is pinned to lm_required by a row.
inline ModelInstance assemble(const NetworkCase& c, const ScenarioConfig& s) {
  s.validate();
  ModelInstance in;
  in.network = c;
  in.network.electrolyzers = detail::p2h_units(c, s);
  in.scenario = s;
  in.admittance = build_admittance(in.network);
  const NetworkCase& net = in.network;
  const int nb = net.num_buses(), ng = net.num_generators();
  const int nw = static_cast<int>(net.wind_farms.size()), ne = in.num_units();
  const int T = s.horizon();
  const int slack_g = net.slack_generator(), slack_b = net.slack_bus();
  const double base = net.system_base;
  AlgebraicModel& m = in.model;

  for (int t = 0; t < T; ++t) in.demand.push_back(nodal_demand(net, s.profiles[t]));
  in.wind_available.assign(T, std::vector<double>(nw, 0.0));
  for (int t = 0; t < T; ++t)
    for (int w = 0; w < nw; ++w)
      in.wind_available[t][w] = std::min(net.wind_farms[w].capacity, s.profiles[t].wind_available / base);

  // variables
  const auto fv = m.family("v"), fth = m.family("theta"), fpg = m.family("pg"), fqg = m.family("qg"),
             fl1 = m.family("qg_l1"), fl2 = m.family("qg_l2"), fqc = m.family("qg_cap"), fpw = m.family("pw"),
             fqw = m.family("qw"), fph = m.family("ph"), fqh = m.family("qh"), fy = m.family("y"),
             fz = m.family("z"), fvu = m.family("v_up"), fvd = m.family("v_dn"), flam = m.family("lambda");
  in.layout.resize(T);
  in.hour_layout.resize(T);
  auto block = [&](int count, double lo, double hi, double init, std::uint16_t fam) {
    int first = -1;
    for (int k = 0; k < count; ++k) {
      const int id = m.add_variable(lo, hi, init, fam);
      if (k == 0) first = id;
    }
    return count > 0 ? first : -1;
  };
  for (int t = 0; t < T; ++t) {
    for (int cp = 0; cp < 2; ++cp) {
      PointLayout& L = in.layout[t][cp];
      L.v = m.num_variables();
      for (int b = 0; b < nb; ++b) m.add_variable(net.buses[b].v_min, net.buses[b].v_max, 1.0, fv);
      L.theta = m.num_variables();
      for (int b = 0; b < nb; ++b) {
        const bool ref = b == slack_b;
        m.add_variable(ref ? 0.0 : -kInf, ref ? 0.0 : kInf, 0.0, fth);
      }
      L.pg = m.num_variables();
      for (const auto& g : net.generators) m.add_variable(g.pg_min, g.pg_max, 0.5 * (g.pg_min + g.pg_max), fpg);
      L.qg = block(ng, -kInf, kInf, 0.0, fqg);
      L.l1 = block(ng, 0.0, kInf, 1.0, fl1);
      L.l2 = block(ng, -kInf, kInf, 1.0, fl2);
      if (cp == 1) L.qcap = block(ng, -kInf, kInf, 1.0, fqc);
      L.pw = m.num_variables();
      for (int w = 0; w < nw; ++w) {
        const double hi = s.alpha == 0.0 ? 0.0 : in.wind_available[t][w];
        m.add_variable(0.0, hi, 0.5 * hi, fpw);
      }
      L.qw = m.num_variables();
      for (const auto& w : net.wind_farms) {
        const double lo = s.unity_power_factor ? 0.0 : w.qw_min, hi = s.unity_power_factor ? 0.0 : w.qw_max;
        m.add_variable(lo, hi, 0.0, fqw);
      }
      L.ph = m.num_variables();
      for (const auto& e : net.electrolyzers) m.add_variable(e.ph_min, e.ph_max, 0.5 * (e.ph_min + e.ph_max), fph);
      L.qh = m.num_variables();
      for (const auto& e : net.electrolyzers) {
        const double lo = s.unity_power_factor ? 0.0 : e.qh_min, hi = s.unity_power_factor ? 0.0 : e.qh_max;
        m.add_variable(lo, hi, 0.0, fqh);
      }
      if (nw == 0) L.pw = L.qw = -1;
      if (ne == 0) L.ph = L.qh = -1;
    }
    HourLayout& H = in.hour_layout[t];
    H.y = block(ng, 0.0, 1.0, 0.5, fy);
    H.z = m.num_variables();
    for (int g = 0; g < ng; ++g) {
      const bool slack = g == slack_g;
      m.add_variable(0.0, slack ? 0.0 : 1.0, slack ? 0.0 : 0.5, fz);
    }
    H.v_up = block(ng, 0.0, kInf, 0.0, fvu);
    H.v_dn = block(ng, 0.0, kInf, 0.0, fvd);
    for (int g = 0; g < ng; ++g) {
      in.binary_y.push_back(in.y(t, g));
      if (g != slack_g) in.binary_z.push_back(in.z(t, g));
    }
  }
  in.lambda = m.add_variable(0.0, kInf, s.lm_required, flam);

  // objective: minimize -TH in tonnes
  for (int t = 0; t < T; ++t)
    for (int e = 0; e < ne; ++e) m.set_objective_linear(in.ph(t, 0, e), -in.kg_per_pu(e) * 1e-3);

  // rows
  const auto r_pb = m.family(family::active_balance), r_qb = m.family(family::reactive_balance),
             r_res = m.family(family::reserve), r_wc = m.family(family::wind_cap), r_ramp = m.family(family::ramp),
             r_arm = m.family(family::armature_circle), r_fld = m.family(family::field_circle),
             r_root = m.family(family::field_root), r_ue = m.family(family::underexcitation),
             r_qa = m.family(family::q_armature), r_qf = m.family(family::q_field),
             r_ca = m.family(family::qcap_armature), r_cf = m.family(family::qcap_field),
             r_sa = m.family(family::qcap_select_armature), r_sf = m.family(family::qcap_select_field),
             r_qc = m.family(family::q_below_cap), r_ff = m.family(family::flow_from),
             r_ft = m.family(family::flow_to), r_su = m.family(family::pg_scale_upper),
             r_sl = m.family(family::pg_scale_lower), r_cl = m.family(family::pg_capacity_lower),
             r_vc = m.family(family::voltage_coupling), r_cu = m.family(family::complementarity_up),
             r_cd = m.family(family::complementarity_down), r_pc = m.family(family::p2h_coupling),
             r_wcp = m.family(family::wind_coupling), r_pin = m.family(family::loading_pin),
             r_by = m.family(family::binary_y), r_bz = m.family(family::binary_z);

  auto info = [](std::uint16_t f, int t, int cp, int el) {
    return RowInfo{f, static_cast<std::int16_t>(t), static_cast<std::int8_t>(cp), el};
  };
  const double eps_c = s.complementarity_eps;
  double total_pmax = 0.0;
  for (const auto& g : net.generators) total_pmax += g.pg_max;

  std::vector<std::vector<int>> gens_at(nb), farms_at(nb), units_at(nb);
  for (int g = 0; g < ng; ++g) gens_at[net.generators[g].bus].push_back(g);
  for (int w = 0; w < nw; ++w) farms_at[net.wind_farms[w].bus].push_back(w);
  for (int e = 0; e < ne; ++e) units_at[net.electrolyzers[e].bus].push_back(e);
  for (int t = 0; t < T; ++t) {
    const auto& pd = in.demand[t];
    for (int cp = 0; cp < 2; ++cp) {
      // nodal balances: injections - demand - calculated = 0
      for (int b = 0; b < nb; ++b) {
        Row& r = m.add_row(0.0, 0.0, info(r_pb, t, cp, b));
        r.constant = -pd.p[b];
        if (cp == 1) r.add(in.lambda, -net.buses[b].kp * pd.p[b]);
        for (int g : gens_at[b]) r.add(in.pg(t, cp, g), 1.0);
        for (int w : farms_at[b]) r.add(in.pw(t, cp, w), 1.0);
        for (int e : units_at[b]) r.add(in.ph(t, cp, e), -1.0);
        for (const auto& e : in.admittance.rows[b]) {
          if (e.bus == b)
            r.add(Term::sq(-e.magnitude * std::cos(e.angle), in.v(t, cp, b)));
          else
            r.add(Term::polar_cos(-e.magnitude, in.v(t, cp, b), in.v(t, cp, e.bus), in.theta(t, cp, b),
                                  in.theta(t, cp, e.bus), e.angle));
        }
      }
      for (int b = 0; b < nb; ++b) {
        Row& r = m.add_row(0.0, 0.0, info(r_qb, t, cp, b));
        r.constant = -pd.q[b];
        if (cp == 1) r.add(in.lambda, -net.buses[b].kq * pd.q[b]);
        for (int g : gens_at[b]) r.add(in.qg(t, cp, g), 1.0);
        for (int w : farms_at[b]) r.add(in.qw(t, cp, w), 1.0);
        for (int e : units_at[b]) r.add(in.qh(t, cp, e), -1.0);
        for (const auto& e : in.admittance.rows[b]) {
          if (e.bus == b)
            r.add(Term::sq(e.magnitude * std::sin(e.angle), in.v(t, cp, b)));
          else
            r.add(Term::polar_sin(-e.magnitude, in.v(t, cp, b), in.v(t, cp, e.bus), in.theta(t, cp, b),
                                  in.theta(t, cp, e.bus), e.angle));
        }
      }
    }
  }

  for (int t = 0; t < T; ++t) {
    const auto& pd = in.demand[t];
    // reserve at the COP: sum_k PG_k <= sum_{k != b} Pmax_k
    for (int g = 0; g < ng && s.reserve; ++g) {
      Row& r = m.add_row(-kInf, total_pmax - net.generators[g].pg_max, info(r_res, t, 0, g));
      for (int k = 0; k < ng; ++k) r.add(in.pg(t, 0, k), 1.0);
    }
    // wind cap at the COP
    {
      double total_pd = 0.0;
      for (double p : pd.p) total_pd += p;
      Row& r = m.add_row(-kInf, s.alpha * total_pd, info(r_wc, t, 0, -1));
      for (int w = 0; w < nw; ++w) r.add(in.pw(t, 0, w), 1.0);
    }
    // ramps
    if (t > 0)
      for (int cp = 0; cp < 2; ++cp)
        for (int g = 0; g < ng; ++g) {
          const auto& gen = net.generators[g];
          m.add_row(-gen.ramp_down, gen.ramp_up, info(r_ramp, t, cp, g))
              .add(in.pg(t, cp, g), 1.0)
              .add(in.pg(t - 1, cp, g), -1.0);
        }
    // capability
    for (int cp = 0; cp < 2; ++cp)
      for (int g = 0; g < ng; ++g) {
        const auto& gen = net.generators[g];
        const int v = in.v(t, cp, gen.bus), p = in.pg(t, cp, g), q = in.qg(t, cp, g);
        const double xs = gen.synchronous_reactance, ig = gen.stator_current_max, e = gen.internal_emf;
        m.add_row(0.0, 0.0, info(r_arm, t, cp, g))
            .add(Term::sq(1.0, p))
            .add(Term::sq(1.0, in.l1(t, cp, g)))
            .add(Term::sq(-ig * ig, v));
        m.add_row(0.0, 0.0, info(r_fld, t, cp, g))
            .add(Term::sq(1.0, p))
            .add(Term::shifted_sq(1.0, in.l2(t, cp, g), v, 1.0 / xs))
            .add(Term::sq(-(e / xs) * (e / xs), v));
        m.add_row(0.0, kInf, info(r_root, t, cp, g)).add(in.l2(t, cp, g), 1.0).add(Term::sq(1.0 / xs, v));
        m.add_row(0.0, kInf, info(r_ue, t, cp, g))
            .add(q, 1.0)
            .add(p, -1.0 / std::tan(gen.delta_max))
            .add(Term::sq(1.0 / xs, v));
        if (cp == 0) {
          m.add_row(-kInf, 0.0, info(r_qa, t, cp, g)).add(q, 1.0).add(in.l1(t, cp, g), -1.0);
          m.add_row(-kInf, 0.0, info(r_qf, t, cp, g)).add(q, 1.0).add(in.l2(t, cp, g), -1.0);
        } else {
          const int qc = in.qcap(t, g), yy = in.y(t, g);
          m.add_row(-kInf, 0.0, info(r_ca, t, cp, g)).add(qc, 1.0).add(in.l1(t, cp, g), -1.0);
          m.add_row(-kInf, 0.0, info(r_cf, t, cp, g)).add(qc, 1.0).add(in.l2(t, cp, g), -1.0);
          m.add_row(0.0, kInf, info(r_sa, t, cp, g)).add(qc, 1.0).add(in.l1(t, cp, g), -1.0).add(yy, gen.big_m1);
          auto& rsf = m.add_row(0.0, kInf, info(r_sf, t, cp, g));
          rsf.constant = gen.big_m1;
          rsf.add(qc, 1.0).add(in.l2(t, cp, g), -1.0).add(yy, -gen.big_m1);
          m.add_row(-kInf, 0.0, info(r_qc, t, cp, g)).add(q, 1.0).add(qc, -1.0);
        }
      }
    // branch flows, both ends, both points
    for (int cp = 0; cp < 2; ++cp)
      for (std::size_t k = 0; k < net.branches.size(); ++k) {
        const auto& br = net.branches[k];
        const auto a = branch_admittance(br);
        const double sc = 1.0 / (br.s_max * br.s_max);
        const int f = br.from_bus, to = br.to_bus;
        m.add_row(-kInf, 1.0, info(r_ff, t, cp, static_cast<int>(k)))
            .add(Term::flow(in.v(t, cp, f), in.v(t, cp, to), in.theta(t, cp, f), in.theta(t, cp, to),
                            a.yff.real(), a.yff.imag(), a.yft.real(), a.yft.imag(), sc));
        m.add_row(-kInf, 1.0, info(r_ft, t, cp, static_cast<int>(k)))
            .add(Term::flow(in.v(t, cp, to), in.v(t, cp, f), in.theta(t, cp, to), in.theta(t, cp, f),
                            a.ytt.real(), a.ytt.imag(), a.ytf.real(), a.ytf.imag(), sc));
      }
    // COP -> SLP generation scaling with the capacity cap (slack free)
    for (int g = 0; g < ng; ++g) {
      if (g == slack_g) continue;
      const auto& gen = net.generators[g];
      const double kg = net.buses[gen.bus].kg;
      const int ps = in.pg(t, 1, g), pc = in.pg(t, 0, g), zz = in.z(t, g);
      m.add_row(-kInf, 0.0, info(r_su, t, 1, g))
          .add(ps, 1.0)
          .add(pc, -1.0)
          .add(Term::bilin(-kg, in.lambda, pc));
      m.add_row(0.0, kInf, info(r_sl, t, 1, g))
          .add(ps, 1.0)
          .add(pc, -1.0)
          .add(Term::bilin(-kg, in.lambda, pc))
          .add(zz, gen.big_m2);
      auto& rc = m.add_row(0.0, kInf, info(r_cl, t, 1, g));
      rc.constant = gen.big_m2 - gen.pg_max;
      rc.add(ps, 1.0).add(zz, -gen.big_m2);
    }
    // voltage coupling and complementarity at generator buses
    for (int g = 0; g < ng; ++g) {
      const auto& gen = net.generators[g];
      const int vs = in.v(t, 1, gen.bus), vc = in.v(t, 0, gen.bus);
      const int up = in.v_up(t, g), dn = in.v_dn(t, g), qs = in.qg(t, 1, g);
      m.add_row(0.0, 0.0, info(r_vc, t, 1, g)).add(vs, 1.0).add(vc, -1.0).add(dn, -1.0).add(up, 1.0);
      in.complementarity_rows.push_back(m.num_rows());
      m.add_row(-kInf, eps_c, info(r_cu, t, 1, g))
          .add(Term::bilin(1.0, in.qcap(t, g), up))
          .add(Term::bilin(-1.0, qs, up));
      in.complementarity_rows.push_back(m.num_rows());
      m.add_row(-kInf, eps_c, info(r_cd, t, 1, g))
          .add(Term::bilin(1.0, qs, dn))
          .add(Term::bilin(-1.0 / std::tan(gen.delta_max), in.pg(t, 1, g), dn))
          .add(Term::sq_bilin(1.0 / gen.synchronous_reactance, vs, dn));
    }
    // P2H and wind held from COP to SLP
    for (int e = 0; e < ne; ++e)
      m.add_row(s.curtailable_p2h ? -kInf : 0.0, 0.0, info(r_pc, t, 1, e))
          .add(in.ph(t, 1, e), 1.0)
          .add(in.ph(t, 0, e), -1.0);
    for (int w = 0; w < nw; ++w)
      m.add_row(0.0, 0.0, info(r_wcp, t, 1, w)).add(in.pw(t, 1, w), 1.0).add(in.pw(t, 0, w), -1.0);
  }
  m.add_row(s.lm_required, s.lm_required, info(r_pin, -1, -1, -1)).add(in.lambda, 1.0);

  // binary conditions y = y^2, z = z^2 (penalized)
  for (int t = 0; t < T; ++t)
    for (int g = 0; g < ng; ++g) {
      m.add_penalized_row(info(r_by, t, -1, g)).add(in.y(t, g), 1.0).add(Term::sq(-1.0, in.y(t, g)));
      if (g != slack_g)
        m.add_penalized_row(info(r_bz, t, -1, g)).add(in.z(t, g), 1.0).add(Term::sq(-1.0, in.z(t, g)));
    }

  m.finalize();
  for (int j = 0; j < m.num_variables(); ++j)
    if (m.x_lower()[j] > m.x_upper()[j]) throw ScenarioError("infeasible variable bounds at assembly");
  return in;
}

/// Complementarity relaxation used by every complementarity row.
inline void set_complementarity_eps(ModelInstance& in, double eps) {
  for (int r : in.complementarity_rows) in.model.set_row_bounds(r, -kInf, eps);
}

// ---------------------------------------------------------------------------
// catalog

/// Row counts per family.
inline std::map<std::string, int> census(const ModelInstance& in) {
  std::map<std::string, int> out;
  for (const auto& r : in.model.rows()) ++out[in.model.families()[r.info.family]];
  return out;
}

inline void write_catalog(const ModelInstance& in, std::ostream& out) {
  out << "# row family hour point element lower upper kind\n";
  const auto& rows = in.model.rows();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& r = rows[k];
    out << k << ' ' << in.model.families()[r.info.family] << ' ' << (r.info.hour < 0 ? 0 : r.info.hour + 1)
        << ' ' << (r.info.point < 0 ? "-" : to_string(static_cast<PointClass>(r.info.point))) << ' '
        << r.info.element << ' ' << r.lower << ' ' << r.upper << ' '
        << (r.penalized ? "penalized" : (r.lower == r.upper ? "equality" : "inequality")) << '\n';
  }
}

// ---------------------------------------------------------------------------
// evaluation

/// Total hydrogen (kg) and its gradient.
inline double objective_eval(const ModelInstance& in, const DecisionVector& x, Eigen::VectorXd* grad = nullptr) {
  double th = 0.0;
  if (grad) grad->setZero(in.model.n());
  for (int t = 0; t < in.horizon(); ++t)
    for (int e = 0; e < in.num_units(); ++e) {
      th += in.kg_per_pu(e) * x[in.ph(t, 0, e)];
      if (grad) (*grad)[in.ph(t, 0, e)] = in.kg_per_pu(e);
    }
  return th;
}

struct ConstraintEval {
  /// Equalities as lhs - rhs; inequalities as the larger bound excess
  /// (non-positive when satisfied); penalized rows as their raw value.
  Eigen::VectorXd residual;
  Eigen::SparseMatrix<double> jacobian;
};

namespace detail {

// residual of one row and the sign its gradient takes in that form
inline std::pair<double, double> row_residual(const Row& r, double g) {
  if (r.penalized) return {g, 1.0};
  if (r.lower == r.upper) return {g - r.lower, 1.0};
  const double up = std::isfinite(r.upper) ? g - r.upper : -kInf;
  const double lo = std::isfinite(r.lower) ? r.lower - g : -kInf;
  return lo > up ? std::make_pair(lo, -1.0) : std::make_pair(up, 1.0);
}

}  // namespace detail

inline Eigen::VectorXd constraint_residual(const ModelInstance& in, const DecisionVector& x) {
  const auto& rows = in.model.rows();
  Eigen::VectorXd res(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k)
    res[static_cast<Eigen::Index>(k)] =
        detail::row_residual(rows[k], in.model.row_value(static_cast<int>(k), x)).first;
  return res;
}

inline ConstraintEval constraint_eval(const ModelInstance& in, const DecisionVector& x) {
  const auto& rows = in.model.rows();
  ConstraintEval ev;
  ev.residual.resize(static_cast<Eigen::Index>(rows.size()));
  std::vector<Eigen::Triplet<double>> trip;
  std::vector<std::pair<int, double>> grad;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto [res, sign] = detail::row_residual(rows[k], in.model.row_value(static_cast<int>(k), x));
    ev.residual[static_cast<Eigen::Index>(k)] = res;
    in.model.row_gradient(static_cast<int>(k), x, grad);
    for (const auto& [j, v] : grad) trip.emplace_back(static_cast<int>(k), j, sign * v);
  }
  ev.jacobian.resize(static_cast<Eigen::Index>(rows.size()), in.model.n());
  ev.jacobian.setFromTriplets(trip.begin(), trip.end());
  return ev;
}

/// Largest bound or row violation, penalized rows excluded.
inline double max_violation(const ModelInstance& in, const DecisionVector& x) {
  double v = 0.0;
  const auto& rows = in.model.rows();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k].penalized) continue;
    const double g = in.model.row_value(static_cast<int>(k), x);
    v = std::max({v, rows[k].lower - g, g - rows[k].upper});
  }
  for (int j = 0; j < in.model.n(); ++j)
    v = std::max({v, in.model.x_lower()[j] - x[j], x[j] - in.model.x_upper()[j]});
  return v;
}

/// Largest product (Qmax - QG) v_up and (QG - Qmin) v_dn at the SLP.
inline double complementarity_residual(const ModelInstance& in, const DecisionVector& x) {
  double v = 0.0;
  for (int r : in.complementarity_rows) v = std::max(v, std::abs(in.model.row_value(r, x)));
  return v;
}

inline double integrality_gap(const ModelInstance& in, const DecisionVector& x) {
  double gap = 0.0;
  for (int j : in.binary_y) gap = std::max(gap, std::abs(x[j] - std::round(x[j])));
  for (int j : in.binary_z) gap = std::max(gap, std::abs(x[j] - std::round(x[j])));
  return gap;
}

// ---------------------------------------------------------------------------
// points

inline OperatingPoint point_from(const ModelInstance& in, const DecisionVector& x, int t, int cp) {
  const NetworkCase& net = in.network;
  OperatingPoint p = OperatingPoint::flat(net);
  p.point_class = static_cast<PointClass>(cp);
  p.hour = in.scenario.profiles[t].hour;
  const double scale = cp == 1 ? x[in.lambda] : 0.0;
  for (int b = 0; b < net.num_buses(); ++b) {
    p.v[b] = x[in.v(t, cp, b)];
    p.theta[b] = x[in.theta(t, cp, b)];
    p.pd[b] = in.demand[t].p[b] * (1.0 + net.buses[b].kp * scale);
    p.qd[b] = in.demand[t].q[b] * (1.0 + net.buses[b].kq * scale);
  }
  for (int g = 0; g < net.num_generators(); ++g) {
    p.pg[g] = x[in.pg(t, cp, g)];
    p.qg[g] = x[in.qg(t, cp, g)];
  }
  for (std::size_t w = 0; w < net.wind_farms.size(); ++w) {
    p.pw[w] = x[in.pw(t, cp, static_cast<int>(w))];
    p.qw[w] = x[in.qw(t, cp, static_cast<int>(w))];
  }
  for (int e = 0; e < in.num_units(); ++e) {
    p.ph[e] = x[in.ph(t, cp, e)];
    p.qh[e] = x[in.qh(t, cp, e)];
  }
  return p;
}

/// Writes a power-flow state into the point block of hour t; capability
/// variables are set from their closed forms.
inline void embed_point(const ModelInstance& in, DecisionVector& x, int t, int cp, const OperatingPoint& p) {
  const NetworkCase& net = in.network;
  for (int b = 0; b < net.num_buses(); ++b) {
    x[in.v(t, cp, b)] = p.v[b];
    x[in.theta(t, cp, b)] = p.theta[b];
  }
  for (int g = 0; g < net.num_generators(); ++g) {
    const auto& gen = net.generators[g];
    const double v = p.v[gen.bus], pg = p.pg[g];
    x[in.pg(t, cp, g)] = pg;
    x[in.qg(t, cp, g)] = p.qg[g];
    const double r1 = std::max(0.0, square(v * gen.stator_current_max) - pg * pg);
    const double r2 = std::max(0.0, square(v * gen.internal_emf / gen.synchronous_reactance) - pg * pg);
    x[in.l1(t, cp, g)] = std::sqrt(r1);
    x[in.l2(t, cp, g)] = std::sqrt(r2) - v * v / gen.synchronous_reactance;
    if (cp == 1) x[in.qcap(t, g)] = std::min(x[in.l1(t, cp, g)], x[in.l2(t, cp, g)]);
  }
  for (std::size_t w = 0; w < net.wind_farms.size(); ++w) {
    x[in.pw(t, cp, static_cast<int>(w))] = p.pw[w];
    x[in.qw(t, cp, static_cast<int>(w))] = p.qw[w];
  }
  for (int e = 0; e < in.num_units(); ++e) {
    x[in.ph(t, cp, e)] = p.ph[e];
    x[in.qh(t, cp, e)] = p.qh[e];
  }
}

/// Flat start: V = 1, theta = 0, PG in proportion to capacity, PH at the
/// midpoint of its range, lambda at the required margin, y = z = 0.5.
inline DecisionVector flat_start(const ModelInstance& in) {
  const NetworkCase& net = in.network;
  DecisionVector x = in.model.initial_point();
  const double lm = in.scenario.lm_required;
  double total_pmax = 0.0;
  for (const auto& g : net.generators) total_pmax += g.pg_max;
  for (int t = 0; t < in.horizon(); ++t) {
    double load = 0.0;
    for (double p : in.demand[t].p) load += p;
    for (int e = 0; e < in.num_units(); ++e) load += x[in.ph(t, 0, e)];
    for (std::size_t w = 0; w < net.wind_farms.size(); ++w) load -= x[in.pw(t, 0, static_cast<int>(w))];
    const double share = std::clamp(load / total_pmax, 0.0, 1.0);
    for (int cp = 0; cp < 2; ++cp) {
      OperatingPoint p = OperatingPoint::flat(net);
      for (int g = 0; g < net.num_generators(); ++g) {
        const auto& gen = net.generators[g];
        double pg = gen.pg_max * share;
        if (cp == 1 && !gen.is_slack) pg = std::min(pg * (1.0 + net.buses[gen.bus].kg * lm), gen.pg_max);
        p.pg[g] = pg;
      }
      for (std::size_t w = 0; w < net.wind_farms.size(); ++w) p.pw[w] = x[in.pw(t, 0, static_cast<int>(w))];
      for (int e = 0; e < in.num_units(); ++e) p.ph[e] = x[in.ph(t, 0, e)];
      embed_point(in, x, t, cp, p);
    }
    for (int g = 0; g < net.num_generators(); ++g) {
      x[in.y(t, g)] = 0.5;
      x[in.z(t, g)] = net.generators[g].is_slack ? 0.0 : 0.5;
      x[in.v_up(t, g)] = 0.0;
      x[in.v_dn(t, g)] = 0.0;
    }
  }
  x[in.lambda] = lm;
  return x;
}

/// Sets y and z from the current point: y = 1 where the field limit is the
/// tighter one, z = 1 where the scaled output reaches capacity.
inline void reset_binaries(const ModelInstance& in, DecisionVector& x) {
  const NetworkCase& net = in.network;
  const double lam = x[in.lambda];
  for (int t = 0; t < in.horizon(); ++t)
    for (int g = 0; g < net.num_generators(); ++g) {
      const auto& gen = net.generators[g];
      x[in.y(t, g)] = x[in.l2(t, 1, g)] < x[in.l1(t, 1, g)] ? 1.0 : 0.0;
      if (!gen.is_slack)
        x[in.z(t, g)] = (1.0 + net.buses[gen.bus].kg * lam) * x[in.pg(t, 0, g)] >= gen.pg_max ? 1.0 : 0.0;
    }
}

}  // namespace h2margin
