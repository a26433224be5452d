#pragma once

// Penalty homotopy on the relaxed binaries, rounding, and a polish solve
// with the binaries fixed. Multi-start wraps it with perturbed flat starts.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <random>
#include <vector>

#include "h2margin/harvest_model.hpp"
#include "h2margin/interior_point.hpp"

namespace h2margin {

struct SolveReport {
  SolveStatus status = SolveStatus::iteration_limit;
  double objective = 0.0;  // TH, kg
  double kkt_residual = 0.0;
  double violation = 0.0;
  double integrality_gap = 0.0;
  double complementarity = 0.0;
  double binary_residual = 0.0;  // max |y - y^2|, |z - z^2| before rounding
  double pre_polish_violation = 0.0;
  int iterations = 0;            // interior-point iterations, all stages
  int outer_iterations = 0;      // penalty stages
  double wall_time = 0.0;        // s
  bool binaries_reset = false;
  std::vector<IterationRecord> log;
};

struct SolveResult {
  DecisionVector x;
  PrimalDual duals;
  SolveReport report;
};

namespace detail {

inline double binary_residual(const ModelInstance& in, const DecisionVector& x) {
  double r = 0.0;
  for (int j : in.binary_y) r = std::max(r, std::abs(x[j] - x[j] * x[j]));
  for (int j : in.binary_z) r = std::max(r, std::abs(x[j] - x[j] * x[j]));
  return r;
}

inline void fix_binaries(const ModelInstance& in, AlgebraicModel& m, const DecisionVector& x, double threshold) {
  auto fix = [&](int j) {
    const double v = x[j] >= threshold ? 1.0 : 0.0;
    m.x_lower()[j] = m.x_upper()[j] = v;
  };
  for (int j : in.binary_y) fix(j);
  for (int j : in.binary_z) fix(j);
}

inline DecisionVector project(const AlgebraicModel& m, DecisionVector x) {
  for (int j = 0; j < m.n(); ++j) x[j] = std::clamp(x[j], m.x_lower()[j], m.x_upper()[j]);
  return x;
}

}  // namespace detail

/// Full solve: penalty stages, rounding at the threshold (ties go to 1),
/// polish with fixed binaries; falls back to heuristic binaries if the
/// polish fails.
inline SolveResult solve(const ModelInstance& in, const DecisionVector& x0, const SolverOptions& opt,
                         const PrimalDual* warm = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  SolveResult out;
  SolveReport& rep = out.report;
  const double eps_final = in.scenario.complementarity_eps;

  AlgebraicModel relaxed = in.model;
  InteriorPointSolver<AlgebraicModel> ipm(relaxed);
  PrimalDual start = warm ? *warm : PrimalDual{};
  start.x = detail::project(relaxed, x0);
  if (!warm) start.y.resize(0);

  auto log_ptr = &rep.log;
  IpmResult last;
  bool have_point = false;
  double rho = opt.penalty_initial;
  double eps = std::max(eps_final, opt.complementarity_eps_initial);
  for (int stage = 0; stage < opt.max_outer_iterations; ++stage) {
    relaxed.set_penalty_weight(rho);
    for (int r : in.complementarity_rows) relaxed.set_row_bounds(r, -kInf, eps);
    const bool warm_stage = have_point || warm;
    const double mu0 = warm_stage ? 1e-4 : opt.mu_initial;
    SolverOptions so = opt;
    if (warm_stage) so.bound_push = 1e-6;
    const bool final_stage = rho >= opt.penalty_max && eps <= eps_final;
    if (final_stage) so.optimality_tol = std::min(opt.optimality_tol, opt.final_stage_tol);
    IpmResult r = ipm.solve(start, so, mu0, log_ptr, rho);
    rep.iterations += r.iterations;
    ++rep.outer_iterations;
    if (opt.verbose)
      std::cerr << "stage " << stage << " rho " << rho << " eps " << eps << " converged " << r.converged << " it "
                << r.iterations << " TH " << objective_eval(in, r.point.x) << " binres "
                << detail::binary_residual(in, r.point.x) << '\n';
    if (r.converged || !have_point) {
      last = r;
      have_point = true;
      start = r.point;
    }
    if (r.infeasible && stage == 0) break;
    if (final_stage) break;
    rho = std::min(opt.penalty_max, rho * opt.penalty_growth);
    eps = std::max(eps_final, eps * 0.1);
  }
  rep.binary_residual = detail::binary_residual(in, last.point.x);
  rep.pre_polish_violation = max_violation(in, last.point.x);

  auto polish = [&](const DecisionVector& binaries_from, const PrimalDual& from, double mu0) {
    AlgebraicModel fixed = in.model;
    fixed.set_penalty_weight(0.0);
    for (int r : in.complementarity_rows) fixed.set_row_bounds(r, -kInf, eps_final);
    detail::fix_binaries(in, fixed, binaries_from, opt.rounding_threshold);
    InteriorPointSolver<AlgebraicModel> p(fixed);
    SolverOptions so = opt;
    so.bound_push = 1e-6;
    PrimalDual s = from;
    s.x = detail::project(fixed, from.x);
    IpmResult r = p.solve(s, so, mu0, log_ptr, 0.0);
    rep.iterations += r.iterations;
    return std::make_pair(r, kkt_residual(fixed, r.point));
  };

  auto [pr, kkt] = polish(last.point.x, last.point, 1e-4);
  if (!pr.converged) {
    DecisionVector xr = last.point.x;
    reset_binaries(in, xr);
    auto [pr2, kkt2] = polish(xr, PrimalDual{xr, {}, {}, {}}, 1e-2);
    rep.binaries_reset = true;
    if (pr2.converged || !std::isfinite(pr.violation) || pr2.violation < pr.violation) {
      pr = pr2;
      kkt = kkt2;
    }
  }

  out.x = pr.point.x;
  out.duals = pr.point;
  rep.status = pr.converged ? SolveStatus::locally_optimal
                            : (pr.infeasible || last.infeasible ? SolveStatus::infeasible : SolveStatus::iteration_limit);
  rep.objective = objective_eval(in, out.x);
  rep.kkt_residual = pr.kkt_error;
  rep.violation = max_violation(in, out.x);
  rep.integrality_gap = integrality_gap(in, out.x);
  rep.complementarity = complementarity_residual(in, out.x);
  (void)kkt;
  rep.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Flat start plus count - 1 starts with voltages and dispatch perturbed by
/// up to 5%; returns the best locally optimal result (highest TH).
inline SolveResult multi_start(const ModelInstance& in, const SolverOptions& opt) {
  if (opt.multi_start_count < 1) throw ScenarioError("multi-start count must be at least 1");
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  const DecisionVector flat = flat_start(in);
  SolveResult best;
  bool have = false;
  for (int k = 0; k < opt.multi_start_count; ++k) {
    DecisionVector x = flat;
    if (k > 0) {
      const auto& fam = in.model.variable_families();
      const auto fv = static_cast<std::uint16_t>(
          std::find(in.model.families().begin(), in.model.families().end(), "v") - in.model.families().begin());
      const auto fp = static_cast<std::uint16_t>(
          std::find(in.model.families().begin(), in.model.families().end(), "pg") - in.model.families().begin());
      for (int j = 0; j < in.model.n(); ++j)
        if (fam[j] == fv || fam[j] == fp) x[j] *= 1.0 + u(rng);
    }
    SolveResult r = solve(in, x, opt);
    const bool ok = r.report.status == SolveStatus::locally_optimal;
    const bool best_ok = have && best.report.status == SolveStatus::locally_optimal;
    if (!have || (ok && !best_ok) || (ok == best_ok && r.report.objective > best.report.objective)) {
      best = std::move(r);
      have = true;
    }
  }
  return best;
}

}  // namespace h2margin
