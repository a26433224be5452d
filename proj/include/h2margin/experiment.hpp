#pragma once

// Scenario runs and (alpha x lm) sweeps, closed-loop verification of every
// solution with the Newton and continuation power flows, and the output
// tables/solution files.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "h2margin/harvest_solver.hpp"
#include "h2margin/powerflow.hpp"

#ifndef H2MARGIN_VERSION
#define H2MARGIN_VERSION "0.0.0"
#endif

namespace h2margin {

inline constexpr const char* kVersion = H2MARGIN_VERSION;

/// Oracle LM may fall short of the required margin by at most this much.
inline constexpr double kLmSlack = 1e-3;
/// Newton residual required of every re-solved COP (pu).
inline constexpr double kNewtonResidualTol = 1e-8;
/// Nodal mismatch allowed on the stored COP state itself (pu).
inline constexpr double kStateMismatchTol = 1e-5;

// ---------------------------------------------------------------------------
// hashing

namespace detail {

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string num(double x) {
  std::ostringstream os;
  os << std::setprecision(10) << x;
  return os.str();
}

}  // namespace detail

inline std::string case_hash(const NetworkCase& c) {
  std::ostringstream os;
  save_case(c, os);
  return detail::hex(detail::fnv1a(os.str()));
}

inline std::string profiles_hash(const std::vector<HourlyProfile>& profiles) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (const auto& p : profiles)
    os << p.hour << ',' << p.total_demand_p << ',' << p.total_demand_q << ',' << p.wind_available << '\n';
  return detail::hex(detail::fnv1a(os.str()));
}

// ---------------------------------------------------------------------------
// solutions

struct UnitSize {
  int bus_id = 0;
  double size_mw = 0.0;
};

struct HarvestSolution {
  double alpha = 0.0;
  double lm_required = 0.0;
  HarvestMode mode = HarvestMode::allocate;
  double total_hydrogen = 0.0;                         // kg
  std::vector<int> hours;                              // profile hour labels
  std::vector<int> unit_buses;                         // internal bus index per unit
  std::vector<std::vector<double>> hydrogen_schedule;  // [t][unit] kg/h
  std::vector<double> p2h_sizing;                      // per unit, MW
  std::vector<UnitSize> allocation;                    // units at or above size_epsilon
  std::vector<std::array<OperatingPoint, 2>> dispatch;  // [t][COP, SLP]
  double lambda_achieved = 0.0;
  double kkt_residual = 0.0;
  double complementarity_residual = 0.0;
  std::vector<double> oracle_lm;  // per hour, filled by verification
  SolveReport report;

  int horizon() const { return static_cast<int>(hours.size()); }

  double hourly_p2h_mw(int t, double base) const {
    double s = 0.0;
    for (double p : dispatch[t][0].ph) s += p * base;
    return s;
  }
};

inline HarvestSolution extract_solution(const ModelInstance& in, const SolveResult& r) {
  const auto& x = r.x;
  const double base = in.network.system_base;
  HarvestSolution s;
  s.alpha = in.scenario.alpha;
  s.lm_required = in.scenario.lm_required;
  s.mode = in.scenario.mode;
  s.report = r.report;
  s.total_hydrogen = objective_eval(in, x);
  s.lambda_achieved = x[in.lambda];
  s.kkt_residual = r.report.kkt_residual;
  s.complementarity_residual = complementarity_residual(in, x);
  const int T = in.horizon(), ne = in.num_units();
  for (const auto& e : in.network.electrolyzers) s.unit_buses.push_back(e.bus);
  s.p2h_sizing.assign(ne, 0.0);
  for (int t = 0; t < T; ++t) {
    s.hours.push_back(in.scenario.profiles[t].hour);
    s.dispatch.push_back({point_from(in, x, t, 0), point_from(in, x, t, 1)});
    std::vector<double> h(ne);
    for (int e = 0; e < ne; ++e) {
      const double ph = x[in.ph(t, 0, e)];
      h[e] = in.kg_per_pu(e) * ph;
      s.p2h_sizing[e] = std::max(s.p2h_sizing[e], ph * base);
    }
    s.hydrogen_schedule.push_back(std::move(h));
  }
  for (int e = 0; e < ne; ++e)
    if (s.p2h_sizing[e] >= in.scenario.size_epsilon_mw)
      s.allocation.push_back({in.network.buses[s.unit_buses[e]].id, s.p2h_sizing[e]});
  return s;
}

/// Case whose electrolyzers are the allocated units, sized to their maximum hourly demand.
inline NetworkCase with_allocation(const NetworkCase& c, const std::vector<UnitSize>& units, double efficiency) {
  NetworkCase out = c;
  out.electrolyzers.clear();
  for (const auto& u : units) {
    const int b = c.bus_index(u.bus_id);
    if (b < 0) throw ScenarioError("allocation names unknown bus " + std::to_string(u.bus_id));
    ElectrolyzerRecord e;
    e.bus = b;
    e.ph_max = u.size_mw / c.system_base;
    e.efficiency = efficiency;
    out.electrolyzers.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// verification

struct HourCheck {
  int hour = 0;
  double state_mismatch = 0.0;   // stored COP state through the mismatch function
  double newton_mismatch = 0.0;  // Newton re-solve of the COP dispatch
  double oracle_lm = 0.0;
  StopReason stop = StopReason::nose;
  std::string note;
  bool pass = false;
};

struct VerificationReport {
  double lm_required = 0.0;
  std::vector<HourCheck> hours;

  bool pass() const {
    for (const auto& h : hours)
      if (!h.pass) return false;
    return !hours.empty();
  }

  double min_oracle_lm() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& h : hours) m = std::min(m, h.oracle_lm);
    return m;
  }

  double max_newton_mismatch() const {
    double m = 0.0;
    for (const auto& h : hours) m = std::max(m, h.newton_mismatch);
    return m;
  }
};

/// Re-solves each COP with Newton and traces the continuation from it.
/// `net` must carry the P2H units the points refer to.
inline VerificationReport verify_points(const NetworkCase& net, const std::vector<OperatingPoint>& cop,
                                        double lm_required) {
  const auto y = build_admittance(net);
  const auto growth = GrowthDirection::from_case(net);
  VerificationReport rep;
  rep.lm_required = lm_required;
  for (const auto& p : cop) {
    HourCheck h;
    h.hour = p.hour;
    h.state_mismatch = mismatch(net, y, p).max_abs();
    const Dispatch d = Dispatch::from_point(net, p);
    try {
      const auto pf = newton_solve(net, y, d, {}, &p);
      h.newton_mismatch = pf.max_mismatch;
    } catch (const ConvergenceError& e) {
      h.newton_mismatch = e.final_residual;
      h.note = e.what();
      rep.hours.push_back(h);
      continue;
    }
    if (lm_required > 0.0) {
      try {
        const auto curve = cpf_loading_margin(net, y, d, growth);
        h.oracle_lm = curve.lambda_max;
        h.stop = curve.stop;
      } catch (const ConvergenceError& e) {
        h.note = e.what();
      }
    } else {
      h.stop = StopReason::target_reached;
    }
    h.pass = h.note.empty() && h.newton_mismatch < kNewtonResidualTol && h.state_mismatch <= kStateMismatchTol &&
             h.oracle_lm >= lm_required - kLmSlack;
    if (h.note.empty() && !h.pass) {
      if (h.state_mismatch > kStateMismatchTol) h.note = "stored state does not balance";
      else if (h.oracle_lm < lm_required - kLmSlack) h.note = "loading margin below requirement";
      else h.note = "Newton residual too large";
    }
    rep.hours.push_back(h);
  }
  return rep;
}

inline VerificationReport verify(const ModelInstance& in, HarvestSolution& s) {
  std::vector<OperatingPoint> cop;
  for (const auto& d : s.dispatch) cop.push_back(d[0]);
  auto rep = verify_points(in.network, cop, s.lm_required);
  s.oracle_lm.clear();
  for (const auto& h : rep.hours) s.oracle_lm.push_back(h.oracle_lm);
  return rep;
}

// ---------------------------------------------------------------------------
// solution file

namespace detail {

inline nlohmann::json point_json(const OperatingPoint& p) {
  return {{"v", p.v},   {"theta", p.theta}, {"pd", p.pd}, {"qd", p.qd}, {"pg", p.pg}, {"qg", p.qg},
          {"pw", p.pw}, {"qw", p.qw},       {"ph", p.ph}, {"qh", p.qh}};
}

inline OperatingPoint point_from_json(const nlohmann::json& j, PointClass c, int hour) {
  OperatingPoint p;
  p.point_class = c;
  p.hour = hour;
  j.at("v").get_to(p.v);
  j.at("theta").get_to(p.theta);
  j.at("pd").get_to(p.pd);
  j.at("qd").get_to(p.qd);
  j.at("pg").get_to(p.pg);
  j.at("qg").get_to(p.qg);
  j.at("pw").get_to(p.pw);
  j.at("qw").get_to(p.qw);
  j.at("ph").get_to(p.ph);
  j.at("qh").get_to(p.qh);
  return p;
}

}  // namespace detail

inline nlohmann::json solution_json(const NetworkCase& c, const std::vector<HourlyProfile>& profiles,
                                    const HarvestSolution& s) {
  nlohmann::json j;
  j["format"] = "h2margin-solution";
  j["version"] = kVersion;
  j["case_hash"] = case_hash(c);
  j["profiles_hash"] = profiles_hash(profiles);
  j["alpha"] = s.alpha;
  j["lm"] = s.lm_required;
  j["mode"] = to_string(s.mode);
  j["status"] = to_string(s.report.status);
  j["total_hydrogen_kg"] = s.total_hydrogen;
  j["lambda"] = s.lambda_achieved;
  j["kkt_residual"] = s.kkt_residual;
  j["complementarity_residual"] = s.complementarity_residual;
  j["integrality_gap"] = s.report.integrality_gap;
  j["violation"] = s.report.violation;
  auto units = nlohmann::json::array();
  for (std::size_t e = 0; e < s.unit_buses.size(); ++e)
    units.push_back({{"bus", c.buses[s.unit_buses[e]].id}, {"size_mw", s.p2h_sizing[e]}});
  j["units"] = units;
  auto alloc = nlohmann::json::array();
  for (const auto& a : s.allocation) alloc.push_back({{"bus", a.bus_id}, {"size_mw", a.size_mw}});
  j["allocation"] = alloc;
  auto hours = nlohmann::json::array();
  for (int t = 0; t < s.horizon(); ++t) {
    nlohmann::json h{{"hour", s.hours[t]},
                     {"hydrogen_kg", s.hydrogen_schedule[t]},
                     {"cop", detail::point_json(s.dispatch[t][0])},
                     {"slp", detail::point_json(s.dispatch[t][1])}};
    if (t < static_cast<int>(s.oracle_lm.size())) h["oracle_lm"] = s.oracle_lm[t];
    hours.push_back(h);
  }
  j["hours"] = hours;
  return j;
}

inline void write_solution(const std::string& path, const NetworkCase& c, const std::vector<HourlyProfile>& profiles,
                           const HarvestSolution& s) {
  std::ofstream out(path);
  if (!out) throw ScenarioError("cannot write " + path);
  out << solution_json(c, profiles, s).dump(1) << '\n';
}

/// Checks a solution file against the case and profiles it claims to solve.
inline VerificationReport verify_solution(const std::string& path, const NetworkCase& c,
                                          const std::vector<HourlyProfile>& profiles) {
  std::ifstream f(path);
  if (!f) throw ScenarioError("cannot open solution file " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ScenarioError(std::string("solution file is not valid JSON: ") + e.what());
  }
  try {
    if (j.value("format", "") != "h2margin-solution") throw ScenarioError("not an h2margin solution file");
    if (j.at("case_hash").get<std::string>() != case_hash(c))
      throw ScenarioError("solution file was produced for a different case");
    std::vector<UnitSize> units;
    for (const auto& u : j.at("units")) units.push_back({u.at("bus").get<int>(), u.at("size_mw").get<double>()});
    const NetworkCase net = with_allocation(c, units, 13.90);
    const auto& hours = j.at("hours");
    if (hours.size() != profiles.size()) throw ScenarioError("solution horizon does not match the profiles");
    std::vector<OperatingPoint> cop;
    for (std::size_t t = 0; t < hours.size(); ++t) {
      const int hour = hours[t].at("hour").get<int>();
      if (hour != profiles[t].hour) throw ScenarioError("solution hours do not match the profiles");
      auto p = detail::point_from_json(hours[t].at("cop"), PointClass::cop, hour);
      if (p.v.size() != c.buses.size() || p.pg.size() != c.generators.size() ||
          p.pw.size() != c.wind_farms.size() || p.ph.size() != net.electrolyzers.size())
        throw ScenarioError("solution dimensions do not match the case");
      const auto d = nodal_demand(c, profiles[t]);
      for (std::size_t b = 0; b < d.p.size(); ++b)
        if (std::abs(d.p[b] - p.pd[b]) > 1e-9 || std::abs(d.q[b] - p.qd[b]) > 1e-9)
          throw ScenarioError("solution demand does not match the profiles (stale file)");
      cop.push_back(std::move(p));
    }
    return verify_points(net, cop, j.at("lm").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw ScenarioError(std::string("malformed solution file: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// tables

struct ResultRow {
  double alpha = 0.0, lm = 0.0;
  double total_hydrogen = 0.0;
  SolveStatus status = SolveStatus::iteration_limit;
  double oracle_lm = 0.0;  // smallest over hours
  bool verified = false;
  bool warm_started = false;
  std::vector<UnitSize> allocation;
  std::vector<std::pair<int, double>> hourly_p2h;  // hour, MW
};

namespace detail {

inline void header(std::ostream& out, const std::string& config_hash, const std::string& columns) {
  out << "# h2margin " << kVersion << '\n' << "# config " << config_hash << '\n' << columns << '\n';
}

}  // namespace detail

inline void write_tables(const std::string& dir, const std::string& config_hash, const std::vector<ResultRow>& rows) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(fs::path(dir) / name);
    if (!f) throw ScenarioError(std::string("cannot write ") + name);
    return f;
  };
  using detail::num;
  {
    auto f = open("th_vs_lm.csv");
    detail::header(f, config_hash, "alpha,lm,TH_kg,status,oracle_lm,verified");
    for (const auto& r : rows)
      f << num(r.alpha) << ',' << num(r.lm) << ',' << num(r.total_hydrogen) << ',' << to_string(r.status) << ','
        << num(r.oracle_lm) << ',' << (r.verified ? "pass" : "fail") << '\n';
  }
  {
    auto f = open("allocation.csv");
    detail::header(f, config_hash, "alpha,lm,bus,size_MW");
    for (const auto& r : rows)
      for (const auto& a : r.allocation)
        f << num(r.alpha) << ',' << num(r.lm) << ',' << a.bus_id << ',' << num(a.size_mw) << '\n';
  }
  {
    auto f = open("hourly_p2h.csv");
    detail::header(f, config_hash, "alpha,lm,hour,PH_MW_total");
    for (const auto& r : rows)
      for (const auto& [h, mw] : r.hourly_p2h) f << num(r.alpha) << ',' << num(r.lm) << ',' << h << ',' << num(mw) << '\n';
  }
}

/// Per-run tables: hourly dispatch at both points and the hydrogen schedule.
inline void write_run_tables(const std::string& dir, const std::string& config_hash, const NetworkCase& c,
                             const HarvestSolution& s) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  using detail::num;
  const double base = c.system_base;
  {
    std::ofstream f(fs::path(dir) / "dispatch.csv");
    detail::header(f, config_hash, "hour,point,gen_bus,PG_MW,QG_MVAr,V_pu");
    for (int t = 0; t < s.horizon(); ++t)
      for (int cp = 0; cp < 2; ++cp) {
        const auto& p = s.dispatch[t][cp];
        for (int g = 0; g < c.num_generators(); ++g) {
          const int b = c.generators[g].bus;
          f << s.hours[t] << ',' << to_string(static_cast<PointClass>(cp)) << ',' << c.buses[b].id << ','
            << num(p.pg[g] * base) << ',' << num(p.qg[g] * base) << ',' << num(p.v[b]) << '\n';
        }
      }
  }
  {
    std::ofstream f(fs::path(dir) / "hydrogen.csv");
    detail::header(f, config_hash, "hour,bus,PH_MW,H_kg");
    for (int t = 0; t < s.horizon(); ++t)
      for (std::size_t e = 0; e < s.unit_buses.size(); ++e) {
        const double ph = s.dispatch[t][0].ph[e] * base;
        if (s.p2h_sizing[e] < 1e-9) continue;
        f << s.hours[t] << ',' << c.buses[s.unit_buses[e]].id << ',' << num(ph) << ','
          << num(s.hydrogen_schedule[t][e]) << '\n';
      }
  }
}

// ---------------------------------------------------------------------------
// runs

struct RunOutcome {
  HarvestSolution solution;
  VerificationReport verification;
  DecisionVector x;
  bool warm_started = false;
};

inline ResultRow result_row(const NetworkCase& c, const RunOutcome& o) {
  const auto& s = o.solution;
  ResultRow r;
  r.alpha = s.alpha;
  r.lm = s.lm_required;
  r.total_hydrogen = s.total_hydrogen;
  r.status = s.report.status;
  r.oracle_lm = o.verification.hours.empty() ? 0.0 : o.verification.min_oracle_lm();
  r.verified = o.verification.pass();
  r.warm_started = o.warm_started;
  r.allocation = s.allocation;
  for (int t = 0; t < s.horizon(); ++t) r.hourly_p2h.emplace_back(s.hours[t], s.hourly_p2h_mw(t, c.system_base));
  return r;
}

namespace detail {

inline bool better(const SolveResult& a, const SolveResult& b) {
  const bool ao = a.report.status == SolveStatus::locally_optimal;
  const bool bo = b.report.status == SolveStatus::locally_optimal;
  if (ao != bo) return ao;
  return a.report.objective > b.report.objective + 1e-6;
}

}  // namespace detail

/// Solves one scenario (multi-start from the flat start, plus the warm start
/// when given, keeping whichever is better) and verifies the result.
inline RunOutcome run_instance(const ModelInstance& in, const DecisionVector* warm = nullptr) {
  SolveResult best = multi_start(in, in.scenario.solver);
  bool warm_used = false;
  if (warm) {
    DecisionVector x0 = *warm;
    x0[in.lambda] = in.scenario.lm_required;
    SolveResult r = solve(in, x0, in.scenario.solver);
    if (detail::better(r, best)) {
      best = std::move(r);
      warm_used = true;
    }
  }
  RunOutcome o;
  o.solution = extract_solution(in, best);
  o.verification = verify(in, o.solution);
  o.x = std::move(best.x);
  o.warm_started = warm_used;
  return o;
}

inline RunOutcome run_scenario(const NetworkCase& c, const ScenarioConfig& s) { return run_instance(assemble(c, s)); }

struct SweepSpec {
  std::vector<double> alpha_values;
  std::vector<double> lm_values;
  ScenarioConfig base;  // alpha and lm_required are overwritten per cell
  std::string output_dir;

  void validate() const {
    if (alpha_values.empty() || lm_values.empty()) throw ScenarioError("sweep grids must be non-empty");
    for (double a : alpha_values)
      if (!(a >= 0.0 && a <= 1.0)) throw ScenarioError("alpha values must lie in [0, 1]");
    for (double l : lm_values)
      if (!(l >= 0.0 && l <= 1.0)) throw ScenarioError("lm values must lie in [0, 1]");
  }
};

inline std::string config_hash(const NetworkCase& c, const SweepSpec& spec) {
  std::ostringstream os;
  os << std::setprecision(17) << case_hash(c) << ' ' << profiles_hash(spec.base.profiles) << ' '
     << to_string(spec.base.mode) << ' ' << spec.base.solver.seed << ' ' << spec.base.solver.multi_start_count;
  for (double a : spec.alpha_values) os << " a" << a;
  for (double l : spec.lm_values) os << " l" << l;
  for (int b : spec.base.p2h_candidates) os << " b" << b;
  os << ' ' << spec.base.p2h_ceiling_mw << ' ' << spec.base.efficiency;
  return detail::hex(detail::fnv1a(os.str()));
}

struct SweepResult {
  std::vector<ResultRow> rows;  // grid order: alpha major, lm ascending
  std::vector<RunOutcome> cells;
};

/// One solve per grid cell, warm-started along increasing lm within each alpha.
/// Failed cells are kept with their status and the sweep continues.
inline SweepResult run_sweep(const NetworkCase& c, const SweepSpec& spec, std::ostream* progress = nullptr) {
  spec.validate();
  std::vector<double> lms = spec.lm_values;
  std::sort(lms.begin(), lms.end());
  SweepResult out;
  for (double a : spec.alpha_values) {
    DecisionVector prev;
    bool have_prev = false;
    for (double lm : lms) {
      ScenarioConfig s = spec.base;
      s.alpha = a;
      s.lm_required = lm;
      const auto in = assemble(c, s);
      RunOutcome o;
      try {
        o = run_instance(in, have_prev ? &prev : nullptr);
      } catch (const Error& e) {
        if (progress) *progress << "alpha " << a << " lm " << lm << " failed: " << e.what() << '\n';
        ResultRow r;
        r.alpha = a;
        r.lm = lm;
        out.rows.push_back(r);
        out.cells.emplace_back();
        continue;
      }
      if (o.solution.report.status == SolveStatus::locally_optimal) {
        prev = o.x;
        have_prev = true;
      }
      out.rows.push_back(result_row(c, o));
      if (progress)
        *progress << "alpha " << a << " lm " << lm << " TH " << o.solution.total_hydrogen << " kg "
                  << to_string(o.solution.report.status) << " oracle_lm " << out.rows.back().oracle_lm
                  << (o.verification.pass() ? " verified" : " NOT verified") << '\n';
      out.cells.push_back(std::move(o));
    }
  }
  if (!spec.output_dir.empty()) write_tables(spec.output_dir, config_hash(c, spec), out.rows);
  return out;
}

}  // namespace h2margin
