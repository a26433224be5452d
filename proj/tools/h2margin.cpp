#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "h2margin/h2margin.hpp"

using namespace h2margin;
namespace fs = std::filesystem;

namespace {

// exit codes
constexpr int kOk = 0;
constexpr int kNotOptimal = 1;
constexpr int kInputError = 2;
constexpr int kUnverified = 3;

bool verbose() {
  const char* v = std::getenv("H2MARGIN_VERBOSE");
  return v && *v && std::string(v) != "0";
}

HarvestMode parse_mode(const std::string& m) {
  if (m == "allocate") return HarvestMode::allocate;
  if (m == "dispatch") return HarvestMode::dispatch;
  throw ScenarioError("mode must be allocate or dispatch");
}

std::vector<UnitSize> read_allocation(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ScenarioError("cannot open allocation file " + path);
  nlohmann::json j;
  try {
    f >> j;
    std::vector<UnitSize> out;
    for (const auto& a : j.at("allocation")) out.push_back({a.at("bus").get<int>(), a.at("size_mw").get<double>()});
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ScenarioError("malformed allocation file " + path + ": " + e.what());
  }
}

void print_verification(const VerificationReport& v, std::ostream& out) {
  out << "hour state_mismatch newton_mismatch oracle_lm stop result\n";
  for (const auto& h : v.hours)
    out << h.hour << ' ' << h.state_mismatch << ' ' << h.newton_mismatch << ' ' << h.oracle_lm << ' '
        << to_string(h.stop) << ' ' << (h.pass ? "pass" : "FAIL") << (h.note.empty() ? "" : " (" + h.note + ")")
        << '\n';
  out << "verification " << (v.pass() ? "passed" : "FAILED") << " (required lm " << v.lm_required << ")\n";
}

struct Common {
  std::string case_path, profiles_path, mode = "allocate", out = "out", allocation;
  std::uint64_t seed = 1;
  int starts = 1;
  int hours = 0;
};

ScenarioConfig scenario_from(const Common& o, NetworkCase& c) {
  ScenarioConfig s;
  s.profiles = load_profiles(o.profiles_path);
  if (o.hours > 0 && o.hours < static_cast<int>(s.profiles.size())) s.profiles.resize(o.hours);
  s.mode = parse_mode(o.mode);
  s.solver.seed = o.seed;
  s.solver.multi_start_count = o.starts;
  s.solver.verbose = verbose();
  if (!o.allocation.empty()) {
    if (s.mode != HarvestMode::dispatch) throw ScenarioError("--allocation needs --mode dispatch");
    c = with_allocation(c, read_allocation(o.allocation), s.efficiency);
  }
  return s;
}

int cmd_run(const Common& o, double alpha, double lm) {
  NetworkCase c = load_case(o.case_path);
  ScenarioConfig s = scenario_from(o, c);
  s.alpha = alpha;
  s.lm_required = lm;
  const auto in = assemble(c, s);
  const auto run = run_instance(in);
  const auto& sol = run.solution;
  const auto& rep = sol.report;

  SweepSpec spec;
  spec.alpha_values = {alpha};
  spec.lm_values = {lm};
  spec.base = s;
  const auto hash = config_hash(c, spec);
  write_tables(o.out, hash, {result_row(c, run)});
  write_run_tables(o.out, hash, c, sol);
  write_solution((fs::path(o.out) / "solution.json").string(), c, s.profiles, sol);
  {
    std::ofstream f(fs::path(o.out) / "iterations.log");
    write_iteration_log(rep.log, f);
  }
  {
    std::ofstream f(fs::path(o.out) / "catalog.txt");
    write_catalog(in, f);
  }

  std::cout << "status " << to_string(rep.status) << "\n"
            << "total hydrogen " << sol.total_hydrogen << " kg\n"
            << "kkt residual " << rep.kkt_residual << ", violation " << rep.violation << ", integrality gap "
            << rep.integrality_gap << ", complementarity " << rep.complementarity << "\n"
            << "iterations " << rep.iterations << " in " << rep.outer_iterations << " penalty stages, "
            << rep.wall_time << " s\n";
  std::cout << "allocation (bus MW):";
  for (const auto& a : sol.allocation) std::cout << ' ' << a.bus_id << ':' << a.size_mw;
  std::cout << '\n';
  print_verification(run.verification, std::cout);
  if (rep.status != SolveStatus::locally_optimal) return kNotOptimal;
  return run.verification.pass() ? kOk : kUnverified;
}

int cmd_sweep(const Common& o, const std::vector<double>& alphas, const std::vector<double>& lms) {
  NetworkCase c = load_case(o.case_path);
  SweepSpec spec;
  spec.base = scenario_from(o, c);
  spec.alpha_values = alphas;
  spec.lm_values = lms;
  spec.output_dir = o.out;
  const auto res = run_sweep(c, spec, &std::cerr);
  std::cout << "alpha lm TH_kg status oracle_lm verified\n";
  bool all = true;
  for (const auto& r : res.rows) {
    std::cout << r.alpha << ' ' << r.lm << ' ' << r.total_hydrogen << ' ' << to_string(r.status) << ' ' << r.oracle_lm
              << ' ' << (r.verified ? "pass" : "fail") << '\n';
    all = all && r.status == SolveStatus::locally_optimal;
  }
  for (const auto& r : res.rows)
    if (r.status == SolveStatus::locally_optimal && !r.verified) return kUnverified;
  return all ? kOk : kNotOptimal;
}

int cmd_verify(const Common& o, const std::string& solution) {
  NetworkCase c = load_case(o.case_path);
  auto profiles = load_profiles(o.profiles_path);
  if (o.hours > 0 && o.hours < static_cast<int>(profiles.size())) profiles.resize(o.hours);
  const auto rep = verify_solution(solution, c, profiles);
  print_verification(rep, std::cout);
  return rep.pass() ? kOk : kUnverified;
}

int cmd_case_info(const Common& o) {
  const NetworkCase c = load_case(o.case_path);
  const double base = c.system_base;
  std::cout << "case " << c.name << " (hash " << case_hash(c) << ")\n"
            << "base " << base << " MVA\n"
            << "buses " << c.num_buses() << ", branches " << c.branches.size() << ", generators "
            << c.num_generators() << ", wind farms " << c.wind_farms.size() << ", electrolyzers "
            << c.electrolyzers.size() << '\n'
            << "base demand " << c.total_base_demand_p() * base << " MW, " << c.total_base_demand_q() * base
            << " MVAr\n";
  double cap = 0.0;
  for (const auto& g : c.generators) cap += g.pg_max * base;
  std::cout << "generation capacity " << cap << " MW, slack at bus " << c.buses[c.slack_bus()].id << '\n';
  std::cout << "wind farms at buses:";
  for (const auto& w : c.wind_farms) std::cout << ' ' << c.buses[w.bus].id << " (" << w.capacity * base << " MW)";
  std::cout << "\nP2H candidate buses:";
  for (int b : c.load_buses()) std::cout << ' ' << c.buses[b].id;
  std::cout << '\n';
  if (!o.profiles_path.empty()) {
    const auto p = load_profiles(o.profiles_path);
    double lo = p[0].total_demand_p, hi = lo;
    for (const auto& h : p) {
      lo = std::min(lo, h.total_demand_p);
      hi = std::max(hi, h.total_demand_p);
    }
    std::cout << "profiles " << p.size() << " hours, demand " << lo << " to " << hi << " MW (hash "
              << profiles_hash(p) << ")\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hydrogen harvesting under a loading-margin constraint"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  Common o;
  double alpha = 0.5, lm = 0.15;
  std::vector<double> alphas{0.3, 0.5, 0.7}, lms{0.10, 0.15, 0.20, 0.25, 0.30};
  std::string solution;

  auto add_inputs = [&](CLI::App* sub, bool profiles_required) {
    sub->add_option("--case", o.case_path, "network case file")->required()->check(CLI::ExistingFile);
    auto* p = sub->add_option("--profiles", o.profiles_path, "hourly profile CSV")->check(CLI::ExistingFile);
    if (profiles_required) p->required();
  };
  auto add_solve = [&](CLI::App* sub) {
    sub->add_option("--mode", o.mode, "allocate or dispatch")->check(CLI::IsMember({"allocate", "dispatch"}));
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "multi-start seed");
    sub->add_option("--starts", o.starts, "multi-start count")->check(CLI::PositiveNumber);
    sub->add_option("--hours", o.hours, "use only the first N profile hours")->check(CLI::NonNegativeNumber);
    sub->add_option("--allocation", o.allocation, "solution file whose allocation fixes the units (dispatch mode)")
        ->check(CLI::ExistingFile);
  };

  auto* run = app.add_subcommand("run", "solve one scenario and verify it");
  add_inputs(run, true);
  add_solve(run);
  run->add_option("--alpha", alpha, "wind penetration cap")->check(CLI::Range(0.0, 1.0));
  run->add_option("--lm", lm, "required loading margin")->check(CLI::NonNegativeNumber);

  auto* sweep = app.add_subcommand("sweep", "solve an alpha x lm grid");
  add_inputs(sweep, true);
  add_solve(sweep);
  sweep->add_option("--alpha", alphas, "wind penetration caps")->delimiter(',');
  sweep->add_option("--lm", lms, "required loading margins")->delimiter(',');

  auto* ver = app.add_subcommand("verify", "re-check a solution file with the power-flow oracles");
  add_inputs(ver, true);
  ver->add_option("solution", solution, "solution.json")->required()->check(CLI::ExistingFile);
  ver->add_option("--hours", o.hours, "use only the first N profile hours")->check(CLI::NonNegativeNumber);

  auto* info = app.add_subcommand("case-info", "summarize a case");
  add_inputs(info, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(o, alpha, lm);
    if (*sweep) return cmd_sweep(o, alphas, lms);
    if (*ver) return cmd_verify(o, solution);
    if (*info) return cmd_case_info(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInputError;
  }
  return kInputError;
}
