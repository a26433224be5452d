#pragma once

// Static grid data model: buses, branches, machines, wind farms and
// electrolyzers, plus the text case format, hourly profiles and the bus
// admittance matrix.
//
// Case file layout (whitespace separated, '#' starts a comment, '-' selects
// the documented default of an optional column):
//
//   h2margin-case 1
//   name <string>
//   base_mva <MVA>
//   [bus]          id pd_mw qd_mvar gs_mw bs_mvar vmin vmax kp kq kg
//   [branch]       from to r x b rate_mva tap shift_deg
//   [generator]    bus pmin_mw pmax_mw ramp_up_mw ramp_down_mw emf xs
//                  ig_max delta_max_deg mbase_mva slack big_m1_mw big_m2_mw
//                  pg0_mw vset
//   [wind]         bus capacity_mw qmin_mvar qmax_mvar
//   [electrolyzer] bus ph_min_mw ph_max_mw qh_min_mvar qh_max_mvar eta_kg_per_mwh
//
// Machine constants (emf, xs, ig_max) are given on the machine base and
// converted to the system base on load. Defaults: kp/kq/kg = 1, tap = 1,
// shift = 0, ramp = pmax, ig_max = 1, delta_max = 90 deg, big_m = 2 * pmax,
// pg0 = 0, vset = 1. pg0/vset are the reference dispatch used for base-case
// power flows and as the optimizer's initial point.

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Sparse>

#include "h2margin/error.hpp"

namespace h2margin {

using Complex = std::complex<double>;

struct BusRecord {
  int id = 0;                  // external bus number
  double base_demand_p = 0.0;  // pu
  double base_demand_q = 0.0;  // pu
  double shunt_g = 0.0;        // pu
  double shunt_b = 0.0;        // pu
  double v_min = 0.94;
  double v_max = 1.06;
  double kp = 1.0;
  double kq = 1.0;
  double kg = 1.0;
};

struct BranchRecord {
  int from_bus = 0;  // internal bus index
  int to_bus = 0;
  double resistance = 0.0;  // pu
  double reactance = 0.0;   // pu
  Complex series_admittance{};
  double shunt_susceptance = 0.0;  // total line charging, pu
  double s_max = 0.0;              // pu
  double tap = 1.0;
  double shift = 0.0;  // rad
};

/// Two-port admittances of the pi model with an off-nominal tap at the from end.
struct BranchAdmittance {
  Complex yff, yft, ytf, ytt;
};

inline BranchAdmittance branch_admittance(const BranchRecord& br) {
  const Complex ys = br.series_admittance;
  const Complex half_charging{0.0, br.shunt_susceptance / 2.0};
  const Complex tap = std::polar(br.tap, br.shift);
  return {(ys + half_charging) / (br.tap * br.tap), -ys / std::conj(tap), -ys / tap,
          ys + half_charging};
}

struct GeneratorRecord {
  int bus = 0;
  double pg_min = 0.0;  // pu
  double pg_max = 0.0;
  double ramp_up = 0.0;  // pu/h
  double ramp_down = 0.0;
  double internal_emf = 2.574;
  double synchronous_reactance = 0.0;  // system base
  double stator_current_max = 0.0;     // system base
  double delta_max = std::numbers::pi / 2.0;
  double machine_base = 100.0;  // MVA
  bool is_slack = false;
  double big_m1 = 0.0;  // pu
  double big_m2 = 0.0;
  double pg0 = 0.0;  // reference dispatch, pu
  double v_set = 1.0;
  // machine-base values as written in the case file
  double xs_machine = 1.912;
  double ig_max_machine = 1.0;
};

struct WindFarmRecord {
  int bus = 0;
  double capacity = 0.0;  // pu
  double qw_min = 0.0;
  double qw_max = 0.0;
};

struct ElectrolyzerRecord {
  int bus = 0;
  double ph_min = 0.0;  // pu
  double ph_max = 0.0;
  double qh_min = 0.0;
  double qh_max = 0.0;
  double efficiency = 13.90;  // kg/MWh
};

struct NetworkCase {
  std::string name = "unnamed";
  double system_base = 100.0;  // MVA
  std::vector<BusRecord> buses;
  std::vector<BranchRecord> branches;
  std::vector<GeneratorRecord> generators;
  std::vector<WindFarmRecord> wind_farms;
  std::vector<ElectrolyzerRecord> electrolyzers;

  int num_buses() const { return static_cast<int>(buses.size()); }
  int num_generators() const { return static_cast<int>(generators.size()); }

  int bus_index(int id) const {
    for (int i = 0; i < num_buses(); ++i)
      if (buses[i].id == id) return i;
    return -1;
  }

  int slack_generator() const {
    for (int g = 0; g < num_generators(); ++g)
      if (generators[g].is_slack) return g;
    return -1;
  }

  int slack_bus() const { return generators.at(slack_generator()).bus; }

  /// Generator index per bus, -1 where the bus has none.
  std::vector<int> generator_at_bus() const {
    std::vector<int> out(buses.size(), -1);
    for (int g = 0; g < num_generators(); ++g) out[generators[g].bus] = g;
    return out;
  }

  /// Buses without a generator; the default P2H candidate set.
  std::vector<int> load_buses() const {
    auto gen = generator_at_bus();
    std::vector<int> out;
    for (int b = 0; b < num_buses(); ++b)
      if (gen[b] < 0) out.push_back(b);
    return out;
  }

  double total_base_demand_p() const {
    double s = 0.0;
    for (const auto& b : buses) s += b.base_demand_p;
    return s;
  }

  double total_base_demand_q() const {
    double s = 0.0;
    for (const auto& b : buses) s += b.base_demand_q;
    return s;
  }
};

struct HourlyProfile {
  int hour = 1;
  double total_demand_p = 0.0;  // MW
  double total_demand_q = 0.0;  // MVAr
  double wind_available = 0.0;  // MW per farm
};

// ---------------------------------------------------------------------------
// validation

namespace detail {

inline std::string field(const char* table, std::size_t row, const char* name) {
  std::ostringstream os;
  os << table << '[' << row << "]." << name;
  return os.str();
}

inline void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw CaseError(path + ": " + what);
}

inline bool connected(const NetworkCase& c) {
  const int n = c.num_buses();
  if (n == 0) return false;
  std::vector<std::vector<int>> adj(n);
  for (const auto& br : c.branches) {
    if (std::abs(br.series_admittance) == 0.0) continue;
    adj[br.from_bus].push_back(br.to_bus);
    adj[br.to_bus].push_back(br.from_bus);
  }
  std::vector<char> seen(n, 0);
  std::queue<int> q;
  q.push(0);
  seen[0] = 1;
  int count = 1;
  while (!q.empty()) {
    int b = q.front();
    q.pop();
    for (int k : adj[b])
      if (!seen[k]) {
        seen[k] = 1;
        ++count;
        q.push(k);
      }
  }
  return count == n;
}

}  // namespace detail

/// Checks every invariant of the data model; throws CaseError naming the field.
inline void validate_case(const NetworkCase& c) {
  using detail::field;
  using detail::require;
  const int nb = c.num_buses();
  require(c.system_base > 0.0, "base_mva", "must be positive");
  require(nb > 0, "bus", "no buses");
  std::map<int, int> ids;
  for (std::size_t i = 0; i < c.buses.size(); ++i) {
    const auto& b = c.buses[i];
    require(ids.emplace(b.id, static_cast<int>(i)).second, field("bus", i, "id"), "duplicate bus id");
    require(b.v_min > 0.0 && b.v_min < b.v_max, field("bus", i, "vmin"), "need 0 < vmin < vmax");
    require(b.kp >= 0.0 && b.kq >= 0.0 && b.kg >= 0.0, field("bus", i, "k"),
            "increment factors must be non-negative");
  }
  auto bus_ok = [nb](int b) { return b >= 0 && b < nb; };
  for (std::size_t i = 0; i < c.branches.size(); ++i) {
    const auto& br = c.branches[i];
    require(bus_ok(br.from_bus), field("branch", i, "from"), "unknown bus");
    require(bus_ok(br.to_bus), field("branch", i, "to"), "unknown bus");
    require(br.from_bus != br.to_bus, field("branch", i, "to"), "from and to bus coincide");
    require(br.s_max > 0.0, field("branch", i, "rate"), "must be positive");
    require(br.tap > 0.0, field("branch", i, "tap"), "must be positive");
  }
  int slack_count = 0;
  std::vector<int> gen_at(nb, -1);
  for (std::size_t i = 0; i < c.generators.size(); ++i) {
    const auto& g = c.generators[i];
    require(bus_ok(g.bus), field("generator", i, "bus"), "unknown bus");
    require(gen_at[g.bus] < 0, field("generator", i, "bus"), "more than one generator at bus");
    gen_at[g.bus] = static_cast<int>(i);
    require(g.pg_min <= g.pg_max, field("generator", i, "pmin"), "pmin exceeds pmax");
    require(g.internal_emf > c.buses[g.bus].v_max, field("generator", i, "emf"),
            "internal emf must exceed the bus voltage ceiling");
    require(g.synchronous_reactance > 0.0, field("generator", i, "xs"), "must be positive");
    require(g.stator_current_max > 0.0, field("generator", i, "ig_max"), "must be positive");
    require(g.delta_max > 0.0 && g.delta_max <= std::numbers::pi / 2.0 + 1e-12,
            field("generator", i, "delta_max"), "must lie in (0, 90] deg");
    require(g.big_m1 > 0.0 && g.big_m2 > 0.0, field("generator", i, "big_m"), "must be positive");
    require(g.ramp_up >= 0.0 && g.ramp_down >= 0.0, field("generator", i, "ramp"),
            "must be non-negative");
    if (g.is_slack) ++slack_count;
  }
  require(slack_count == 1, "generator", "exactly one slack generator required");
  for (std::size_t i = 0; i < c.wind_farms.size(); ++i) {
    const auto& w = c.wind_farms[i];
    require(bus_ok(w.bus), field("wind", i, "bus"), "unknown bus");
    require(w.capacity > 0.0, field("wind", i, "capacity"), "must be positive");
    require(w.qw_min <= w.qw_max, field("wind", i, "qmin"), "qmin exceeds qmax");
  }
  std::vector<char> p2h_at(nb, 0);
  for (std::size_t i = 0; i < c.electrolyzers.size(); ++i) {
    const auto& e = c.electrolyzers[i];
    require(bus_ok(e.bus), field("electrolyzer", i, "bus"), "unknown bus");
    require(!p2h_at[e.bus], field("electrolyzer", i, "bus"), "more than one electrolyzer at bus");
    p2h_at[e.bus] = 1;
    require(e.ph_min >= 0.0 && e.ph_min <= e.ph_max, field("electrolyzer", i, "ph_min"),
            "need 0 <= ph_min <= ph_max");
    require(e.qh_min <= e.qh_max, field("electrolyzer", i, "qh_min"), "qmin exceeds qmax");
    require(e.efficiency > 0.0, field("electrolyzer", i, "eta"), "must be positive");
  }
  require(detail::connected(c), "branch", "network graph is disconnected");
}

// ---------------------------------------------------------------------------
// case file I/O

namespace detail {

inline std::vector<std::string> tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line.substr(0, line.find('#')));
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

class RowReader {
 public:
  RowReader(std::vector<std::string> toks, std::string table, std::size_t row, int line)
      : toks_(std::move(toks)), table_(std::move(table)), row_(row), line_(line) {}

  std::optional<double> opt(std::size_t col, const char* name) const {
    if (col >= toks_.size()) fail(name, "missing column");
    if (toks_[col] == "-") return std::nullopt;
    try {
      std::size_t used = 0;
      double v = std::stod(toks_[col], &used);
      if (used != toks_[col].size()) fail(name, "not a number: " + toks_[col]);
      return v;
    } catch (const std::logic_error&) {
      fail(name, "not a number: " + toks_[col]);
    }
  }

  double num(std::size_t col, const char* name) const {
    auto v = opt(col, name);
    if (!v) fail(name, "value required");
    return *v;
  }

  /// Optional column: '-' or a missing trailing column selects the fallback.
  double num(std::size_t col, const char* name, double fallback) const {
    if (col >= toks_.size()) return fallback;
    return opt(col, name).value_or(fallback);
  }

  [[noreturn]] void fail(const char* name, const std::string& what) const {
    std::ostringstream os;
    os << "line " << line_ << ": " << table_ << '[' << row_ << "]." << name << ": " << what;
    throw CaseError(os.str());
  }

 private:
  std::vector<std::string> toks_;
  std::string table_;
  std::size_t row_;
  int line_;
};

}  // namespace detail

inline NetworkCase parse_case(std::istream& in) {
  NetworkCase c;
  std::string line;
  int line_no = 0;
  bool header_seen = false;
  std::string section;
  std::vector<std::pair<std::string, std::pair<std::vector<std::string>, int>>> rows;

  while (std::getline(in, line)) {
    ++line_no;
    auto toks = detail::tokens(line);
    if (toks.empty()) continue;
    if (!header_seen) {
      if (toks.size() != 2 || toks[0] != "h2margin-case")
        throw CaseError("line " + std::to_string(line_no) + ": missing 'h2margin-case <version>' header");
      if (toks[1] != "1") throw CaseError("unsupported case format version " + toks[1]);
      header_seen = true;
      continue;
    }
    if (toks[0].front() == '[') {
      section = toks[0];
      static const char* known[] = {"[bus]", "[branch]", "[generator]", "[wind]", "[electrolyzer]"};
      if (std::find(std::begin(known), std::end(known), section) == std::end(known))
        throw CaseError("line " + std::to_string(line_no) + ": unknown section " + section);
      continue;
    }
    if (section.empty()) {
      if (toks[0] == "name" && toks.size() >= 2) {
        c.name = toks[1];
      } else if (toks[0] == "base_mva" && toks.size() == 2) {
        c.system_base = detail::RowReader(toks, "header", 0, line_no).num(1, "base_mva");
      } else {
        throw CaseError("line " + std::to_string(line_no) + ": unexpected entry '" + toks[0] + "'");
      }
      continue;
    }
    rows.push_back({section, {std::move(toks), line_no}});
  }
  if (!header_seen) throw CaseError("empty case file");

  const double base = c.system_base;
  // buses first so that references can be resolved regardless of section order
  std::size_t bus_row = 0;
  for (auto& [sec, payload] : rows) {
    if (sec != "[bus]") continue;
    detail::RowReader r(payload.first, "bus", bus_row++, payload.second);
    BusRecord b;
    b.id = static_cast<int>(r.num(0, "id"));
    b.base_demand_p = r.num(1, "pd") / base;
    b.base_demand_q = r.num(2, "qd") / base;
    b.shunt_g = r.num(3, "gs", 0.0) / base;
    b.shunt_b = r.num(4, "bs", 0.0) / base;
    b.v_min = r.num(5, "vmin");
    b.v_max = r.num(6, "vmax");
    b.kp = r.num(7, "kp", 1.0);
    b.kq = r.num(8, "kq", 1.0);
    b.kg = r.num(9, "kg", 1.0);
    c.buses.push_back(b);
  }
  auto resolve = [&c](const detail::RowReader& r, double id, const char* name) {
    int idx = c.bus_index(static_cast<int>(id));
    if (idx < 0) r.fail(name, "unknown bus " + std::to_string(static_cast<int>(id)));
    return idx;
  };

  std::size_t counters[4] = {0, 0, 0, 0};
  for (auto& [sec, payload] : rows) {
    const auto& toks = payload.first;
    const int ln = payload.second;
    if (sec == "[branch]") {
      detail::RowReader r(toks, "branch", counters[0]++, ln);
      BranchRecord br;
      br.from_bus = resolve(r, r.num(0, "from"), "from");
      br.to_bus = resolve(r, r.num(1, "to"), "to");
      br.resistance = r.num(2, "r");
      br.reactance = r.num(3, "x");
      if (br.resistance == 0.0 && br.reactance == 0.0) r.fail("x", "zero series impedance");
      br.series_admittance = 1.0 / Complex(br.resistance, br.reactance);
      br.shunt_susceptance = r.num(4, "b", 0.0);
      br.s_max = r.num(5, "rate") / base;
      br.tap = r.num(6, "tap", 1.0);
      if (br.tap == 0.0) br.tap = 1.0;
      br.shift = r.num(7, "shift", 0.0) * std::numbers::pi / 180.0;
      c.branches.push_back(br);
    } else if (sec == "[generator]") {
      detail::RowReader r(toks, "generator", counters[1]++, ln);
      GeneratorRecord g;
      g.bus = resolve(r, r.num(0, "bus"), "bus");
      g.pg_min = r.num(1, "pmin") / base;
      g.pg_max = r.num(2, "pmax") / base;
      g.ramp_up = r.num(3, "ramp_up", g.pg_max * base) / base;
      g.ramp_down = r.num(4, "ramp_down", g.pg_max * base) / base;
      g.internal_emf = r.num(5, "emf", 2.574);
      g.xs_machine = r.num(6, "xs", 1.912);
      g.ig_max_machine = r.num(7, "ig_max", 1.0);
      g.delta_max = r.num(8, "delta_max", 90.0) * std::numbers::pi / 180.0;
      g.machine_base = r.num(9, "mbase");
      if (g.machine_base <= 0.0) r.fail("mbase", "must be positive");
      g.is_slack = r.num(10, "slack") != 0.0;
      g.big_m1 = r.num(11, "big_m1", 2.0 * g.pg_max * base) / base;
      g.big_m2 = r.num(12, "big_m2", 2.0 * g.pg_max * base) / base;
      g.pg0 = r.num(13, "pg0", 0.0) / base;
      g.v_set = r.num(14, "vset", 1.0);
      g.synchronous_reactance = g.xs_machine * base / g.machine_base;
      g.stator_current_max = g.ig_max_machine * g.machine_base / base;
      c.generators.push_back(g);
    } else if (sec == "[wind]") {
      detail::RowReader r(toks, "wind", counters[2]++, ln);
      WindFarmRecord w;
      w.bus = resolve(r, r.num(0, "bus"), "bus");
      w.capacity = r.num(1, "capacity") / base;
      w.qw_min = r.num(2, "qmin", 0.0) / base;
      w.qw_max = r.num(3, "qmax", 0.0) / base;
      c.wind_farms.push_back(w);
    } else if (sec == "[electrolyzer]") {
      detail::RowReader r(toks, "electrolyzer", counters[3]++, ln);
      ElectrolyzerRecord e;
      e.bus = resolve(r, r.num(0, "bus"), "bus");
      e.ph_min = r.num(1, "ph_min", 0.0) / base;
      e.ph_max = r.num(2, "ph_max") / base;
      e.qh_min = r.num(3, "qh_min", 0.0) / base;
      e.qh_max = r.num(4, "qh_max", 0.0) / base;
      e.efficiency = r.num(5, "eta", 13.90);
      c.electrolyzers.push_back(e);
    }
  }
  validate_case(c);
  return c;
}

inline NetworkCase load_case(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CaseError("cannot open case file " + path);
  try {
    return parse_case(in);
  } catch (const CaseError& e) {
    throw CaseError(path + ": " + e.what());
  }
}

inline void save_case(const NetworkCase& c, std::ostream& out) {
  const double base = c.system_base;
  const double deg = 180.0 / std::numbers::pi;
  out << std::setprecision(17);
  out << "h2margin-case 1\n";
  out << "name " << c.name << "\n";
  out << "base_mva " << base << "\n\n";
  out << "[bus]\n# id pd_mw qd_mvar gs_mw bs_mvar vmin vmax kp kq kg\n";
  for (const auto& b : c.buses)
    out << b.id << ' ' << b.base_demand_p * base << ' ' << b.base_demand_q * base << ' '
        << b.shunt_g * base << ' ' << b.shunt_b * base << ' ' << b.v_min << ' ' << b.v_max << ' '
        << b.kp << ' ' << b.kq << ' ' << b.kg << '\n';
  out << "\n[branch]\n# from to r x b rate_mva tap shift_deg\n";
  for (const auto& br : c.branches)
    out << c.buses[br.from_bus].id << ' ' << c.buses[br.to_bus].id << ' ' << br.resistance << ' '
        << br.reactance << ' ' << br.shunt_susceptance << ' ' << br.s_max * base << ' ' << br.tap
        << ' ' << br.shift * deg << '\n';
  out << "\n[generator]\n# bus pmin_mw pmax_mw ramp_up_mw ramp_down_mw emf xs ig_max "
         "delta_max_deg mbase_mva slack big_m1_mw big_m2_mw pg0_mw vset\n";
  for (const auto& g : c.generators)
    out << c.buses[g.bus].id << ' ' << g.pg_min * base << ' ' << g.pg_max * base << ' '
        << g.ramp_up * base << ' ' << g.ramp_down * base << ' ' << g.internal_emf << ' '
        << g.xs_machine << ' ' << g.ig_max_machine << ' ' << g.delta_max * deg << ' '
        << g.machine_base << ' ' << (g.is_slack ? 1 : 0) << ' ' << g.big_m1 * base << ' '
        << g.big_m2 * base << ' ' << g.pg0 * base << ' ' << g.v_set << '\n';
  out << "\n[wind]\n# bus capacity_mw qmin_mvar qmax_mvar\n";
  for (const auto& w : c.wind_farms)
    out << c.buses[w.bus].id << ' ' << w.capacity * base << ' ' << w.qw_min * base << ' '
        << w.qw_max * base << '\n';
  out << "\n[electrolyzer]\n# bus ph_min_mw ph_max_mw qh_min_mvar qh_max_mvar eta_kg_per_mwh\n";
  for (const auto& e : c.electrolyzers)
    out << c.buses[e.bus].id << ' ' << e.ph_min * base << ' ' << e.ph_max * base << ' '
        << e.qh_min * base << ' ' << e.qh_max * base << ' ' << e.efficiency << '\n';
}

inline void save_case(const NetworkCase& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw CaseError("cannot write case file " + path);
  save_case(c, out);
}

// ---------------------------------------------------------------------------
// profiles

/// Reads `hour,demand_p_MW,demand_q_MVAr,wind_available_MW` rows.
inline std::vector<HourlyProfile> parse_profiles(std::istream& in) {
  std::vector<HourlyProfile> out;
  std::string line;
  int line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      auto a = cell.find_first_not_of(" \t\r");
      auto b = cell.find_last_not_of(" \t\r");
      cells.push_back(a == std::string::npos ? "" : cell.substr(a, b - a + 1));
    }
    if (!header) {
      const std::vector<std::string> expected = {"hour", "demand_p_MW", "demand_q_MVAr",
                                                 "wind_available_MW"};
      if (cells != expected)
        throw CaseError("profile line " + std::to_string(line_no) +
                        ": expected header hour,demand_p_MW,demand_q_MVAr,wind_available_MW");
      header = true;
      continue;
    }
    if (cells.size() != 4)
      throw CaseError("profile line " + std::to_string(line_no) + ": expected 4 columns");
    HourlyProfile p;
    try {
      std::string h = cells[0];
      if (!h.empty() && (h[0] == 't' || h[0] == 'T')) h = h.substr(1);
      p.hour = std::stoi(h);
      p.total_demand_p = std::stod(cells[1]);
      p.total_demand_q = std::stod(cells[2]);
      p.wind_available = std::stod(cells[3]);
    } catch (const std::logic_error&) {
      throw CaseError("profile line " + std::to_string(line_no) + ": not a number");
    }
    if (p.total_demand_p < 0 || p.total_demand_q < 0 || p.wind_available < 0)
      throw CaseError("profile line " + std::to_string(line_no) + ": values must be non-negative");
    out.push_back(p);
  }
  if (out.empty()) throw CaseError("profile file has no rows");
  return out;
}

inline std::vector<HourlyProfile> load_profiles(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CaseError("cannot open profile file " + path);
  return parse_profiles(in);
}

// ---------------------------------------------------------------------------
// admittance

struct AdmittanceEntry {
  int bus = 0;
  Complex value{};
  double magnitude = 0.0;
  double angle = 0.0;
};

/// Bus admittance matrix, stored both as a sparse complex matrix and as
/// per-row polar entries (diagonal first) for the balance equations.
struct AdmittanceMatrix {
  Eigen::SparseMatrix<Complex> matrix;
  std::vector<std::vector<AdmittanceEntry>> rows;

  int size() const { return static_cast<int>(rows.size()); }

  Complex at(int b, int k) const { return matrix.coeff(b, k); }
  double magnitude(int b, int k) const { return std::abs(at(b, k)); }
  double angle(int b, int k) const { return std::arg(at(b, k)); }
};

inline AdmittanceMatrix build_admittance(const NetworkCase& c) {
  const int n = c.num_buses();
  std::vector<Eigen::Triplet<Complex>> trip;
  for (int b = 0; b < n; ++b)
    trip.emplace_back(b, b, Complex(c.buses[b].shunt_g, c.buses[b].shunt_b));
  for (const auto& br : c.branches) {
    auto y = branch_admittance(br);
    trip.emplace_back(br.from_bus, br.from_bus, y.yff);
    trip.emplace_back(br.from_bus, br.to_bus, y.yft);
    trip.emplace_back(br.to_bus, br.from_bus, y.ytf);
    trip.emplace_back(br.to_bus, br.to_bus, y.ytt);
  }
  AdmittanceMatrix y;
  y.matrix.resize(n, n);
  y.matrix.setFromTriplets(trip.begin(), trip.end());
  y.matrix.makeCompressed();
  y.rows.assign(n, {});
  for (int k = 0; k < y.matrix.outerSize(); ++k) {
    for (Eigen::SparseMatrix<Complex>::InnerIterator it(y.matrix, k); it; ++it) {
      AdmittanceEntry e{static_cast<int>(it.col()), it.value(), std::abs(it.value()),
                        std::arg(it.value())};
      y.rows[it.row()].push_back(e);
    }
  }
  for (int b = 0; b < n; ++b) {
    auto& r = y.rows[b];
    std::stable_partition(r.begin(), r.end(), [b](const AdmittanceEntry& e) { return e.bus == b; });
  }
  return y;
}

// ---------------------------------------------------------------------------
// demand

struct NodalDemand {
  std::vector<double> p;  // pu
  std::vector<double> q;
};

/// Distributes the profile totals over buses in proportion to the base case.
inline NodalDemand nodal_demand(const NetworkCase& c, const HourlyProfile& profile) {
  const double base = c.system_base;
  const double sum_p = c.total_base_demand_p();
  const double sum_q = c.total_base_demand_q();
  if (profile.total_demand_p < 0.0 || profile.total_demand_q < 0.0)
    throw ScenarioError("profile totals must be non-negative");
  if (sum_p == 0.0 && profile.total_demand_p != 0.0)
    throw ScenarioError("base case has zero active demand; cannot distribute profile total");
  if (sum_q == 0.0 && profile.total_demand_q != 0.0)
    throw ScenarioError("base case has zero reactive demand; cannot distribute profile total");
  NodalDemand d;
  d.p.resize(c.buses.size(), 0.0);
  d.q.resize(c.buses.size(), 0.0);
  for (std::size_t b = 0; b < c.buses.size(); ++b) {
    if (sum_p != 0.0) d.p[b] = c.buses[b].base_demand_p / sum_p * profile.total_demand_p / base;
    if (sum_q != 0.0) d.q[b] = c.buses[b].base_demand_q / sum_q * profile.total_demand_q / base;
  }
  return d;
}

}  // namespace h2margin
