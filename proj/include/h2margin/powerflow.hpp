#pragma once

// Independent AC power-flow oracle: nodal mismatch, Newton solve with PV/PQ
// switching against the capability envelope, branch apparent flows and a
// predictor-corrector continuation that locates the security limit point.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "h2margin/capability.hpp"
#include "h2margin/error.hpp"
#include "h2margin/network.hpp"

namespace h2margin {

enum class PointClass { cop = 0, slp = 1 };

inline const char* to_string(PointClass c) { return c == PointClass::cop ? "COP" : "SLP"; }

/// One power-flow state: bus voltages plus every injection and demand.
struct OperatingPoint {
  PointClass point_class = PointClass::cop;
  int hour = 1;
  std::vector<double> v, theta;  // per bus
  std::vector<double> pd, qd;    // per bus demand
  std::vector<double> pg, qg;    // per generator
  std::vector<double> pw, qw;    // per wind farm
  std::vector<double> ph, qh;    // per electrolyzer

  static OperatingPoint flat(const NetworkCase& c) {
    OperatingPoint p;
    p.v.assign(c.buses.size(), 1.0);
    p.theta.assign(c.buses.size(), 0.0);
    p.pd.assign(c.buses.size(), 0.0);
    p.qd.assign(c.buses.size(), 0.0);
    p.pg.assign(c.generators.size(), 0.0);
    p.qg.assign(c.generators.size(), 0.0);
    p.pw.assign(c.wind_farms.size(), 0.0);
    p.qw.assign(c.wind_farms.size(), 0.0);
    p.ph.assign(c.electrolyzers.size(), 0.0);
    p.qh.assign(c.electrolyzers.size(), 0.0);
    return p;
  }
};

/// Specified quantities for a power-flow solve. The slack generator's pg is
/// an output; v_set holds the voltage setpoint of every generator bus.
struct Dispatch {
  NodalDemand demand;
  std::vector<double> pg, v_set;  // per generator
  std::vector<double> pw, qw;     // per wind farm
  std::vector<double> ph, qh;     // per electrolyzer

  static Dispatch from_point(const NetworkCase& c, const OperatingPoint& p) {
    Dispatch d;
    d.demand.p = p.pd;
    d.demand.q = p.qd;
    d.pg = p.pg;
    d.v_set.resize(c.generators.size());
    for (std::size_t g = 0; g < c.generators.size(); ++g) d.v_set[g] = p.v[c.generators[g].bus];
    d.pw = p.pw;
    d.qw = p.qw;
    d.ph = p.ph;
    d.qh = p.qh;
    return d;
  }
};

struct Mismatch {
  std::vector<double> dp, dq;

  double max_abs() const {
    double m = 0.0;
    for (double x : dp) m = std::max(m, std::abs(x));
    for (double x : dq) m = std::max(m, std::abs(x));
    return m;
  }
};

namespace detail {

struct BusPower {
  std::vector<double> p, q;
};

inline BusPower calculated_power(const AdmittanceMatrix& y, const std::vector<double>& v,
                                 const std::vector<double>& theta) {
  const int n = y.size();
  BusPower s{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  for (int b = 0; b < n; ++b) {
    for (const auto& e : y.rows[b]) {
      const double a = theta[b] - theta[e.bus] - e.angle;
      const double m = v[b] * v[e.bus] * e.magnitude;
      s.p[b] += m * std::cos(a);
      s.q[b] += m * std::sin(a);
    }
  }
  return s;
}

}  // namespace detail

/// Nodal balance residuals: injections minus calculated flows, per bus.
inline Mismatch mismatch(const NetworkCase& c, const AdmittanceMatrix& y, const OperatingPoint& pt) {
  const int n = c.num_buses();
  Mismatch m{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  for (int b = 0; b < n; ++b) {
    m.dp[b] = -pt.pd[b];
    m.dq[b] = -pt.qd[b];
  }
  for (int g = 0; g < c.num_generators(); ++g) {
    m.dp[c.generators[g].bus] += pt.pg[g];
    m.dq[c.generators[g].bus] += pt.qg[g];
  }
  for (std::size_t w = 0; w < c.wind_farms.size(); ++w) {
    m.dp[c.wind_farms[w].bus] += pt.pw[w];
    m.dq[c.wind_farms[w].bus] += pt.qw[w];
  }
  for (std::size_t e = 0; e < c.electrolyzers.size(); ++e) {
    m.dp[c.electrolyzers[e].bus] -= pt.ph[e];
    m.dq[c.electrolyzers[e].bus] -= pt.qh[e];
  }
  auto s = detail::calculated_power(y, pt.v, pt.theta);
  for (int b = 0; b < n; ++b) {
    m.dp[b] -= s.p[b];
    m.dq[b] -= s.q[b];
  }
  return m;
}

// ---------------------------------------------------------------------------
// branch flows

struct BranchFlow {
  Complex s_from{};
  Complex s_to{};

  double from_magnitude() const { return std::abs(s_from); }
  double to_magnitude() const { return std::abs(s_to); }
  /// Value checked against the rating: the larger of the two ends.
  double limit_value() const { return std::max(from_magnitude(), to_magnitude()); }
};

inline BranchFlow branch_apparent_flow(const BranchRecord& br, const std::vector<double>& v,
                                       const std::vector<double>& theta) {
  const auto y = branch_admittance(br);
  const Complex vf = std::polar(v[br.from_bus], theta[br.from_bus]);
  const Complex vt = std::polar(v[br.to_bus], theta[br.to_bus]);
  const Complex i_from = y.yff * vf + y.yft * vt;
  const Complex i_to = y.ytf * vf + y.ytt * vt;
  return {vf * std::conj(i_from), vt * std::conj(i_to)};
}

inline BranchFlow branch_apparent_flow(const NetworkCase& c, const OperatingPoint& pt, int branch) {
  return branch_apparent_flow(c.branches.at(branch), pt.v, pt.theta);
}

// ---------------------------------------------------------------------------
// Newton power flow

enum class GenMode { voltage_control, at_q_max, at_q_min };

struct NewtonOptions {
  double tolerance = 1e-8;
  int max_iterations = 30;
  int max_switch_rounds = 20;
  double hysteresis = 1e-9;
  bool enforce_q_limits = true;
  double singular_rcond = 1e-13;
};

struct PowerFlowResult {
  OperatingPoint point;
  std::vector<GenMode> modes;
  int iterations = 0;
  double max_mismatch = 0.0;
};

/// Demand/generation growth direction of the continuation.
struct GrowthDirection {
  std::vector<double> kp, kq;  // per bus
  std::vector<double> kg;      // per generator
  bool scale_wind = false;
  bool scale_p2h = false;

  static GrowthDirection from_case(const NetworkCase& c) {
    GrowthDirection d;
    for (const auto& b : c.buses) {
      d.kp.push_back(b.kp);
      d.kq.push_back(b.kq);
    }
    for (const auto& g : c.generators) d.kg.push_back(c.buses[g.bus].kg);
    return d;
  }
};

namespace detail {

/// Power-flow equations G(x, lambda) = injections - calculated = 0 for a
/// fixed set of generator modes. x packs non-slack angles then the voltage
/// magnitudes that are not held by a controlling generator.
class PowerFlowEquations {
 public:
  PowerFlowEquations(const NetworkCase& c, const AdmittanceMatrix& y, const Dispatch& d,
                     const GrowthDirection& growth)
      : case_(c), y_(y), d_(d), growth_(growth), gen_at_(c.generator_at_bus()) {
    slack_gen_ = c.slack_generator();
    slack_bus_ = c.generators[slack_gen_].bus;
    const int n = c.num_buses();
    fixed_p_.assign(n, 0.0);
    fixed_q_.assign(n, 0.0);
    growth_p_.assign(n, 0.0);
    growth_q_.assign(n, 0.0);
    for (int b = 0; b < n; ++b) {
      fixed_p_[b] -= d.demand.p[b];
      fixed_q_[b] -= d.demand.q[b];
      growth_p_[b] -= growth.kp[b] * d.demand.p[b];
      growth_q_[b] -= growth.kq[b] * d.demand.q[b];
    }
    for (std::size_t w = 0; w < c.wind_farms.size(); ++w) {
      const int b = c.wind_farms[w].bus;
      fixed_p_[b] += d.pw[w];
      fixed_q_[b] += d.qw[w];
      if (growth.scale_wind) growth_p_[b] += growth.kg.empty() ? 0.0 : c.buses[b].kg * d.pw[w];
    }
    for (std::size_t e = 0; e < c.electrolyzers.size(); ++e) {
      const int b = c.electrolyzers[e].bus;
      fixed_p_[b] -= d.ph[e];
      fixed_q_[b] -= d.qh[e];
      if (growth.scale_p2h) growth_p_[b] -= growth.kp[b] * d.ph[e];
    }
    modes_.assign(c.generators.size(), GenMode::voltage_control);
    relayout();
  }

  const std::vector<GenMode>& modes() const { return modes_; }
  void set_modes(std::vector<GenMode> m) {
    modes_ = std::move(m);
    relayout();
  }

  int size() const { return static_cast<int>(eq_bus_.size()); }
  int slack_gen() const { return slack_gen_; }

  /// Active output of generator g at lambda (slack excluded).
  double scheduled_pg(int g, double lambda) const {
    const auto& gen = case_.generators[g];
    const double base = d_.pg[g];
    const double cap = std::max(gen.pg_max, base);
    return std::min((1.0 + growth_.kg[g] * lambda) * base, cap);
  }

  bool pg_clamped(int g, double lambda) const {
    const auto& gen = case_.generators[g];
    const double base = d_.pg[g];
    return (1.0 + growth_.kg[g] * lambda) * base >= std::max(gen.pg_max, base);
  }

  void pack(const std::vector<double>& v, const std::vector<double>& theta, Eigen::VectorXd& x) const {
    x.resize(size());
    for (int i = 0; i < size(); ++i) x[i] = eq_is_angle_[i] ? theta[eq_bus_[i]] : v[eq_bus_[i]];
  }

  void unpack(const Eigen::VectorXd& x, std::vector<double>& v, std::vector<double>& theta) const {
    for (int i = 0; i < size(); ++i) (eq_is_angle_[i] ? theta : v)[eq_bus_[i]] = x[i];
  }

  /// Slack generator output implied by the current state.
  double slack_pg(const BusPower& s, double lambda) const {
    const int b = slack_bus_;
    return s.p[b] - injection_p(b, lambda, /*exclude_slack=*/true);
  }

  double injection_p(int b, double lambda, bool exclude_slack) const {
    double p = fixed_p_[b] + lambda * growth_p_[b];
    const int g = gen_at_[b];
    if (g >= 0 && !(exclude_slack && g == slack_gen_) && g != slack_gen_) p += scheduled_pg(g, lambda);
    return p;
  }

  double injection_q(int b, double lambda) const { return fixed_q_[b] + lambda * growth_q_[b]; }

  struct LimitValue {
    double q, dv, dpg;
  };

  /// Reactive limit of a limited generator with its derivatives in v and pg.
  LimitValue q_limit(int g, double pg, double v) const {
    const auto& gen = case_.generators[g];
    const double xs = gen.synchronous_reactance;
    if (modes_[g] == GenMode::at_q_min) {
      const double cot = std::cos(gen.delta_max) / std::sin(gen.delta_max);
      return {pg * cot - v * v / xs, -2.0 * v / xs, cot};
    }
    const double ig2 = gen.stator_current_max * gen.stator_current_max;
    const double ra = std::max(v * v * ig2 - pg * pg, 0.0);
    const double qa = std::sqrt(ra);
    const double k = gen.internal_emf / xs;
    const double rf = std::max(v * v * k * k - pg * pg, 0.0);
    const double sf = std::sqrt(rf);
    const double qf = sf - v * v / xs;
    if (qf < qa) return {qf, (sf > 0.0 ? v * k * k / sf : 0.0) - 2.0 * v / xs, sf > 0.0 ? -pg / sf : 0.0};
    return {qa, qa > 0.0 ? v * ig2 / qa : 0.0, qa > 0.0 ? -pg / qa : 0.0};
  }

  /// Residual vector G(x, lambda).
  void residual(const std::vector<double>& v, const std::vector<double>& theta, double lambda,
                Eigen::VectorXd& out) const {
    auto s = calculated_power(y_, v, theta);
    out.resize(size());
    const double pg_slack = slack_pg(s, lambda);
    for (int i = 0; i < size(); ++i) {
      const int b = eq_bus_[i];
      if (eq_is_angle_[i]) {
        out[i] = injection_p(b, lambda, false) - s.p[b];
      } else {
        double q = injection_q(b, lambda) - s.q[b];
        const int g = gen_at_[b];
        if (g >= 0 && modes_[g] != GenMode::voltage_control) {
          const double pg = g == slack_gen_ ? pg_slack : scheduled_pg(g, lambda);
          q += q_limit(g, pg, v[b]).q;
        }
        out[i] = q;
      }
    }
  }

  /// Jacobian dG/dx (dense) and dG/dlambda.
  void jacobian(const std::vector<double>& v, const std::vector<double>& theta, double lambda,
                Eigen::MatrixXd& jx, Eigen::VectorXd& jl) const {
    const int n = size();
    auto s = calculated_power(y_, v, theta);
    jx.setZero(n, n);
    jl.setZero(n);
    const double pg_slack = slack_pg(s, lambda);
    std::vector<int> angle_col(case_.buses.size(), -1), vmag_col(case_.buses.size(), -1);
    for (int i = 0; i < n; ++i) (eq_is_angle_[i] ? angle_col : vmag_col)[eq_bus_[i]] = i;

    // adds scale * d(calculated P_b or Q_b)/dx into row i
    auto add_calc = [&](int i, int b, bool is_p, double scale) {
      for (const auto& e : y_.rows[b]) {
        const int k = e.bus;
        const double gk = e.magnitude * std::cos(e.angle);
        const double bk = e.magnitude * std::sin(e.angle);
        double dth, dv;
        if (k == b) {
          dth = is_p ? (-s.q[b] - bk * v[b] * v[b]) : (s.p[b] - gk * v[b] * v[b]);
          dv = is_p ? (s.p[b] / v[b] + gk * v[b]) : (s.q[b] / v[b] - bk * v[b]);
        } else {
          const double a = theta[b] - theta[k];
          const double ca = std::cos(a), sa = std::sin(a);
          if (is_p) {
            dth = v[b] * v[k] * (gk * sa - bk * ca);
            dv = v[b] * (gk * ca + bk * sa);
          } else {
            dth = -v[b] * v[k] * (gk * ca + bk * sa);
            dv = v[b] * (gk * sa - bk * ca);
          }
        }
        if (angle_col[k] >= 0) jx(i, angle_col[k]) += scale * dth;
        if (vmag_col[k] >= 0) jx(i, vmag_col[k]) += scale * dv;
      }
    };

    for (int i = 0; i < n; ++i) {
      const int b = eq_bus_[i];
      const bool is_p = eq_is_angle_[i];
      add_calc(i, b, is_p, -1.0);
      const int g = gen_at_[b];
      if (is_p) {
        jl[i] = growth_p_[b];
        if (g >= 0 && g != slack_gen_ && !pg_clamped(g, lambda)) jl[i] += growth_.kg[g] * d_.pg[g];
      } else {
        jl[i] = growth_q_[b];
        if (g >= 0 && modes_[g] != GenMode::voltage_control) {
          const double pg = g == slack_gen_ ? pg_slack : scheduled_pg(g, lambda);
          const auto lim = q_limit(g, pg, v[b]);
          if (vmag_col[b] >= 0) jx(i, vmag_col[b]) += lim.dv;
          if (g == slack_gen_) {
            // slack output is P_calc(slack) minus the scheduled injections there
            add_calc(i, slack_bus_, true, lim.dpg);
            jl[i] -= lim.dpg * growth_p_[slack_bus_];
          } else if (!pg_clamped(g, lambda)) {
            jl[i] += lim.dpg * growth_.kg[g] * d_.pg[g];
          }
        }
      }
    }
  }

  /// Full operating point for a state.
  OperatingPoint point(const std::vector<double>& v, const std::vector<double>& theta,
                       double lambda) const {
    OperatingPoint p;
    p.v = v;
    p.theta = theta;
    const int n = case_.num_buses();
    p.pd.resize(n);
    p.qd.resize(n);
    for (int b = 0; b < n; ++b) {
      p.pd[b] = (1.0 + growth_.kp[b] * lambda) * d_.demand.p[b];
      p.qd[b] = (1.0 + growth_.kq[b] * lambda) * d_.demand.q[b];
    }
    p.pw = d_.pw;
    p.qw = d_.qw;
    p.ph = d_.ph;
    p.qh = d_.qh;
    if (growth_.scale_wind)
      for (std::size_t w = 0; w < p.pw.size(); ++w)
        p.pw[w] *= 1.0 + case_.buses[case_.wind_farms[w].bus].kg * lambda;
    if (growth_.scale_p2h)
      for (std::size_t e = 0; e < p.ph.size(); ++e)
        p.ph[e] *= 1.0 + growth_.kp[case_.electrolyzers[e].bus] * lambda;
    auto s = calculated_power(y_, v, theta);
    p.pg.resize(case_.generators.size());
    p.qg.resize(case_.generators.size());
    for (int g = 0; g < case_.num_generators(); ++g) {
      const int b = case_.generators[g].bus;
      p.pg[g] = g == slack_gen_ ? slack_pg(s, lambda) : scheduled_pg(g, lambda);
      // reactive output closes the bus balance
      double q = s.q[b] + p.qd[b];
      for (std::size_t w = 0; w < p.qw.size(); ++w)
        if (case_.wind_farms[w].bus == b) q -= p.qw[w];
      for (std::size_t e = 0; e < p.qh.size(); ++e)
        if (case_.electrolyzers[e].bus == b) q += p.qh[e];
      p.qg[g] = q;
    }
    return p;
  }

 private:
  void relayout() {
    eq_bus_.clear();
    eq_is_angle_.clear();
    const int n = case_.num_buses();
    for (int b = 0; b < n; ++b) {
      if (b == slack_bus_) continue;
      eq_bus_.push_back(b);
      eq_is_angle_.push_back(true);
    }
    for (int b = 0; b < n; ++b) {
      const int g = gen_at_[b];
      if (g >= 0 && modes_[g] == GenMode::voltage_control) continue;
      eq_bus_.push_back(b);
      eq_is_angle_.push_back(false);
    }
  }

  const NetworkCase& case_;
  const AdmittanceMatrix& y_;
  const Dispatch& d_;
  const GrowthDirection& growth_;
  std::vector<int> gen_at_;
  int slack_gen_ = -1;
  int slack_bus_ = -1;
  std::vector<double> fixed_p_, fixed_q_, growth_p_, growth_q_;
  std::vector<GenMode> modes_;
  std::vector<int> eq_bus_;
  std::vector<char> eq_is_angle_;
};

struct NewtonOutcome {
  bool converged = false;
  bool singular = false;
  int iterations = 0;
  double residual = 0.0;
};

/// Newton iterations at fixed lambda on (v, theta) in place.
inline NewtonOutcome newton_iterate(const PowerFlowEquations& eq, std::vector<double>& v,
                                    std::vector<double>& theta, double lambda,
                                    const NewtonOptions& opt) {
  NewtonOutcome out;
  Eigen::VectorXd f, x, jl;
  Eigen::MatrixXd jx;
  for (int it = 0; it <= opt.max_iterations; ++it) {
    eq.residual(v, theta, lambda, f);
    out.residual = f.size() ? f.cwiseAbs().maxCoeff() : 0.0;
    out.iterations = it;
    if (!std::isfinite(out.residual) || out.residual > 1e8) return out;
    if (out.residual < opt.tolerance) {
      out.converged = true;
      return out;
    }
    if (it == opt.max_iterations) break;
    eq.jacobian(v, theta, lambda, jx, jl);
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(jx);
    if (!(lu.rcond() > opt.singular_rcond)) {
      out.singular = true;
      return out;
    }
    Eigen::VectorXd dx = lu.solve(-f);
    eq.pack(v, theta, x);
    x += dx;
    eq.unpack(x, v, theta);
  }
  return out;
}

/// Checks generator reactive outputs against the envelope and updates modes.
/// Returns true if any mode changed.
inline bool update_generator_modes(const NetworkCase& c, const OperatingPoint& p,
                                   const Dispatch& d, std::vector<GenMode>& modes,
                                   double hysteresis) {
  bool changed = false;
  for (int g = 0; g < c.num_generators(); ++g) {
    const int b = c.generators[g].bus;
    CapabilityEnvelope env;
    try {
      env = q_envelope(p.pg[g], p.v[b], c.generators[g]);
    } catch (const InfeasibleOperatingPoint&) {
      continue;
    }
    switch (modes[g]) {
      case GenMode::voltage_control:
        if (p.qg[g] > env.q_max + hysteresis) {
          modes[g] = GenMode::at_q_max;
          changed = true;
        } else if (p.qg[g] < env.q_min - hysteresis) {
          modes[g] = GenMode::at_q_min;
          changed = true;
        }
        break;
      case GenMode::at_q_max:
        if (p.v[b] > d.v_set[g] + hysteresis) {
          modes[g] = GenMode::voltage_control;
          changed = true;
        }
        break;
      case GenMode::at_q_min:
        if (p.v[b] < d.v_set[g] - hysteresis) {
          modes[g] = GenMode::voltage_control;
          changed = true;
        }
        break;
    }
  }
  return changed;
}

}  // namespace detail

/// Solves the AC power flow for a dispatch. Generator buses hold their
/// setpoint until the reactive output leaves the capability envelope, then
/// switch to the violated limit.
inline PowerFlowResult newton_solve(const NetworkCase& c, const AdmittanceMatrix& y,
                                    const Dispatch& d, const NewtonOptions& opt = {},
                                    const OperatingPoint* initial = nullptr) {
  const auto growth = GrowthDirection::from_case(c);
  detail::PowerFlowEquations eq(c, y, d, growth);
  std::vector<double> v(c.buses.size(), 1.0), theta(c.buses.size(), 0.0);
  if (initial) {
    v = initial->v;
    theta = initial->theta;
  }
  for (int g = 0; g < c.num_generators(); ++g) v[c.generators[g].bus] = d.v_set[g];
  theta[c.slack_bus()] = 0.0;

  PowerFlowResult res;
  int total_iterations = 0;
  for (int round = 0; round <= opt.max_switch_rounds; ++round) {
    auto out = detail::newton_iterate(eq, v, theta, 0.0, opt);
    total_iterations += out.iterations;
    if (!out.converged) {
      throw ConvergenceError(out.singular ? "power flow Jacobian is singular (near voltage collapse)"
                                          : "Newton power flow did not converge, max mismatch " +
                                                std::to_string(out.residual),
                             out.residual, out.singular);
    }
    res.point = eq.point(v, theta, 0.0);
    res.max_mismatch = out.residual;
    if (!opt.enforce_q_limits) break;
    auto modes = eq.modes();
    if (!detail::update_generator_modes(c, res.point, d, modes, opt.hysteresis)) break;
    if (round == opt.max_switch_rounds)
      throw ConvergenceError("PV/PQ switching did not settle", out.residual, false);
    eq.set_modes(modes);
    for (int g = 0; g < c.num_generators(); ++g)
      if (modes[g] == GenMode::voltage_control) v[c.generators[g].bus] = d.v_set[g];
  }
  res.modes = eq.modes();
  res.iterations = total_iterations;
  res.max_mismatch = mismatch(c, y, res.point).max_abs();
  return res;
}

// ---------------------------------------------------------------------------
// continuation power flow

enum class LimitType { q_max, q_min, back_to_voltage_control };

inline const char* to_string(LimitType t) {
  switch (t) {
    case LimitType::q_max: return "q_max";
    case LimitType::q_min: return "q_min";
    case LimitType::back_to_voltage_control: return "pv";
  }
  return "?";
}

enum class StopReason {
  nose,
  voltage_limit,
  branch_limit,
  slack_capacity,
  unbounded_direction,
  lambda_cap,
  target_reached,
  step_failure,
};

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::nose: return "nose";
    case StopReason::voltage_limit: return "voltage_limit";
    case StopReason::branch_limit: return "branch_limit";
    case StopReason::slack_capacity: return "slack_capacity";
    case StopReason::unbounded_direction: return "unbounded_direction";
    case StopReason::lambda_cap: return "lambda_cap";
    case StopReason::target_reached: return "target_reached";
    case StopReason::step_failure: return "step_failure";
  }
  return "?";
}

struct PvSample {
  double lambda = 0.0;
  double v = 0.0;
};

struct LimitEvent {
  double lambda = 0.0;
  int generator = -1;
  LimitType type = LimitType::q_max;
  double qg = 0.0;
  double q_limit = 0.0;
};

struct PvCurve {
  std::vector<PvSample> samples;
  double lambda_max = 0.0;
  std::vector<LimitEvent> limit_events;
  StopReason stop = StopReason::nose;
  int monitored_bus = -1;
  std::string limiting_element;  // bus or branch that stopped the trace
  OperatingPoint limit_point;    // state at lambda_max
  int steps = 0;

  bool unbounded() const { return std::isinf(lambda_max); }
};

struct CpfOptions {
  double initial_step = 0.05;
  double min_step = 1e-5;
  double max_step = 0.2;
  double lambda_cap = 10.0;
  /// Stop as soon as lambda reaches this value (infinite: trace to the limit).
  double lambda_target = std::numeric_limits<double>::infinity();
  double limit_tolerance = 1e-6;
  int max_steps = 5000;
  int corrector_iterations = 12;
  bool stop_at_voltage_limits = true;
  bool stop_at_branch_limits = true;
  bool stop_at_slack_capacity = true;
  int monitored_bus = -1;  // -1: bus with the largest initial voltage sensitivity
  NewtonOptions newton;
  /// Called with every accepted continuation point after limit switching.
  std::function<void(double lambda, const OperatingPoint&, const std::vector<GenMode>&)> on_step;
};

namespace detail {

struct LimitCheck {
  StopReason reason = StopReason::nose;
  std::string element;
  bool violated = false;
};

inline LimitCheck check_operational_limits(const NetworkCase& c, const OperatingPoint& p,
                                           const CpfOptions& opt) {
  LimitCheck chk;
  const double tol = opt.limit_tolerance;
  if (opt.stop_at_voltage_limits) {
    for (int b = 0; b < c.num_buses(); ++b) {
      if (p.v[b] < c.buses[b].v_min - tol || p.v[b] > c.buses[b].v_max + tol) {
        return {StopReason::voltage_limit, "bus " + std::to_string(c.buses[b].id), true};
      }
    }
  }
  if (opt.stop_at_branch_limits) {
    for (std::size_t i = 0; i < c.branches.size(); ++i) {
      const auto& br = c.branches[i];
      if (branch_apparent_flow(br, p.v, p.theta).limit_value() > br.s_max + tol) {
        return {StopReason::branch_limit,
                "branch " + std::to_string(c.buses[br.from_bus].id) + "-" +
                    std::to_string(c.buses[br.to_bus].id),
                true};
      }
    }
  }
  if (opt.stop_at_slack_capacity) {
    const int g = c.slack_generator();
    const auto& gen = c.generators[g];
    if (p.pg[g] > gen.pg_max + tol)
      return {StopReason::slack_capacity, "slack generator", true};
  }
  return chk;
}

/// First generator whose reactive output left its envelope, with the limit type.
inline std::pair<int, LimitType> find_q_violation(const NetworkCase& c, const OperatingPoint& p,
                                                  const Dispatch& d,
                                                  const std::vector<GenMode>& modes, double tol) {
  for (int g = 0; g < c.num_generators(); ++g) {
    const int b = c.generators[g].bus;
    if (modes[g] == GenMode::voltage_control) {
      CapabilityEnvelope env;
      try {
        env = q_envelope(p.pg[g], p.v[b], c.generators[g]);
      } catch (const InfeasibleOperatingPoint&) {
        return {g, LimitType::q_max};
      }
      if (p.qg[g] > env.q_max + tol) return {g, LimitType::q_max};
      if (p.qg[g] < env.q_min - tol) return {g, LimitType::q_min};
    } else if (modes[g] == GenMode::at_q_max && p.v[b] > d.v_set[g] + tol) {
      return {g, LimitType::back_to_voltage_control};
    } else if (modes[g] == GenMode::at_q_min && p.v[b] < d.v_set[g] - tol) {
      return {g, LimitType::back_to_voltage_control};
    }
  }
  return {-1, LimitType::q_max};
}

}  // namespace detail

/// Traces the P-V curve from the dispatch (lambda = 0) along the growth
/// direction and returns the loading parameter of the security limit point:
/// the first of the nose point or an operational-limit violation.
inline PvCurve cpf_loading_margin(const NetworkCase& c, const AdmittanceMatrix& y,
                                  const Dispatch& d, const GrowthDirection& growth,
                                  const CpfOptions& opt = {}) {
  using detail::PowerFlowEquations;
  PvCurve curve;
  PowerFlowEquations eq(c, y, d, growth);

  // base point at lambda = 0 with PV/PQ switching settled
  std::vector<double> v(c.buses.size(), 1.0), theta(c.buses.size(), 0.0);
  for (int g = 0; g < c.num_generators(); ++g) v[c.generators[g].bus] = d.v_set[g];
  for (int round = 0;; ++round) {
    auto out = detail::newton_iterate(eq, v, theta, 0.0, opt.newton);
    if (!out.converged)
      throw ConvergenceError("continuation base point (lambda = 0) is infeasible", out.residual,
                             out.singular);
    auto p = eq.point(v, theta, 0.0);
    auto modes = eq.modes();
    if (!detail::update_generator_modes(c, p, d, modes, opt.newton.hysteresis)) break;
    if (round >= opt.newton.max_switch_rounds)
      throw ConvergenceError("PV/PQ switching did not settle at lambda = 0", out.residual, false);
    eq.set_modes(modes);
    for (int g = 0; g < c.num_generators(); ++g)
      if (modes[g] == GenMode::voltage_control) v[c.generators[g].bus] = d.v_set[g];
  }

  double lambda = 0.0;
  OperatingPoint current = eq.point(v, theta, 0.0);
  curve.limit_point = current;

  auto base_check = detail::check_operational_limits(c, current, opt);
  if (base_check.violated) {
    curve.stop = base_check.reason;
    curve.limiting_element = base_check.element;
    curve.lambda_max = 0.0;
    return curve;
  }

  // tangent: [Jx Jl; e_k'] t = [0; s]
  Eigen::MatrixXd jx;
  Eigen::VectorXd jl;
  auto tangent = [&](int k, double sign, Eigen::VectorXd& t) -> bool {
    eq.jacobian(v, theta, lambda, jx, jl);
    const int n = eq.size();
    Eigen::MatrixXd a(n + 1, n + 1);
    a.setZero();
    a.topLeftCorner(n, n) = jx;
    a.topRightCorner(n, 1) = jl;
    a(n, k) = 1.0;
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + 1);
    rhs[n] = sign;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
    if (!(lu.rcond() > 1e-14)) return false;
    t = lu.solve(rhs);
    t /= t.norm();
    return t.allFinite();
  };

  eq.jacobian(v, theta, 0.0, jx, jl);
  if (jl.size() == 0 || jl.cwiseAbs().maxCoeff() == 0.0) {
    curve.stop = StopReason::unbounded_direction;
    curve.lambda_max = std::numeric_limits<double>::infinity();
    curve.samples.push_back({0.0, curve.monitored_bus >= 0 ? v[curve.monitored_bus] : 1.0});
    return curve;
  }

  Eigen::VectorXd t;
  if (!tangent(eq.size(), 1.0, t))
    throw ConvergenceError("continuation base point has a singular Jacobian", 0.0, true);

  // monitored bus: largest |dV/dlambda| at the base point
  curve.monitored_bus = opt.monitored_bus;
  if (curve.monitored_bus < 0) {
    double best = -1.0;
    Eigen::VectorXd x;
    std::vector<double> dv(c.buses.size(), 0.0), dth(c.buses.size(), 0.0);
    eq.unpack(t.head(eq.size()), dv, dth);
    for (int b = 0; b < c.num_buses(); ++b)
      if (std::abs(dv[b]) > best) {
        best = std::abs(dv[b]);
        curve.monitored_bus = b;
      }
  }
  curve.samples.push_back({0.0, v[curve.monitored_bus]});
  if (opt.on_step) opt.on_step(0.0, current, eq.modes());

  double step = opt.initial_step;
  bool cautious = false;
  Eigen::MatrixXd aug;
  Eigen::VectorXd f, x, z, zp;

  auto finish = [&](StopReason reason, double lam, const OperatingPoint& p, std::string element = {}) {
    curve.stop = reason;
    curve.lambda_max = lam;
    curve.limit_point = p;
    curve.limiting_element = std::move(element);
    return curve;
  };

  for (int it = 0; it < opt.max_steps; ++it) {
    curve.steps = it + 1;
    const int n = eq.size();
    // continuation parameter: component of the tangent with the largest magnitude
    int k = 0;
    t.cwiseAbs().maxCoeff(&k);

    eq.pack(v, theta, x);
    z.resize(n + 1);
    z.head(n) = x;
    z[n] = lambda;
    zp = z + step * t;

    // corrector
    std::vector<double> tv = v, tth = theta;
    Eigen::VectorXd zc = zp;
    bool ok = false;
    for (int ci = 0; ci < opt.corrector_iterations; ++ci) {
      eq.unpack(zc.head(n), tv, tth);
      eq.residual(tv, tth, zc[n], f);
      const double r = std::max(f.size() ? f.cwiseAbs().maxCoeff() : 0.0, std::abs(zc[k] - zp[k]));
      if (!std::isfinite(r)) break;
      if (r < opt.newton.tolerance) {
        ok = true;
        break;
      }
      eq.jacobian(tv, tth, zc[n], jx, jl);
      aug.setZero(n + 1, n + 1);
      aug.topLeftCorner(n, n) = jx;
      aug.topRightCorner(n, 1) = jl;
      aug(n, k) = 1.0;
      Eigen::VectorXd rhs(n + 1);
      rhs.head(n) = -f;
      rhs[n] = -(zc[k] - zp[k]);
      Eigen::PartialPivLU<Eigen::MatrixXd> lu(aug);
      if (!(lu.rcond() > 1e-15)) break;
      zc += lu.solve(rhs);
    }
    if (!ok) {
      step *= 0.5;
      if (step < opt.min_step) return finish(StopReason::step_failure, lambda, current);
      continue;
    }
    const double new_lambda = zc[n];
    auto trial = eq.point(tv, tth, new_lambda);

    // nose: lambda started decreasing, or the monitored voltage turned up
    // while lambda stalled at the tip
    if (new_lambda < lambda || tv[curve.monitored_bus] > v[curve.monitored_bus]) {
      step *= 0.5;
      cautious = true;
      if (step < opt.min_step) return finish(StopReason::nose, lambda, current);
      continue;
    }

    auto chk = detail::check_operational_limits(c, trial, opt);
    if (chk.violated) {
      step *= 0.5;
      cautious = true;
      if (step < opt.min_step) return finish(chk.reason, lambda, current, chk.element);
      continue;
    }

    auto [viol_gen, viol_type] =
        detail::find_q_violation(c, trial, d, eq.modes(), opt.limit_tolerance * 1e-2);
    if (viol_gen >= 0 && step >= opt.min_step) {
      // bisect towards the crossing before switching
      auto [g0, t0] = detail::find_q_violation(c, trial, d, eq.modes(), opt.limit_tolerance);
      (void)t0;
      if (g0 >= 0) {
        step *= 0.5;
        cautious = true;
        continue;
      }
    }

    // accept
    v = tv;
    theta = tth;
    lambda = new_lambda;
    current = trial;
    curve.samples.push_back({lambda, v[curve.monitored_bus]});

    if (viol_gen >= 0) {
      auto modes = eq.modes();
      modes[viol_gen] = viol_type == LimitType::q_max   ? GenMode::at_q_max
                        : viol_type == LimitType::q_min ? GenMode::at_q_min
                                                        : GenMode::voltage_control;
      eq.set_modes(modes);
      if (modes[viol_gen] == GenMode::voltage_control) v[c.generators[viol_gen].bus] = d.v_set[viol_gen];
      auto out = detail::newton_iterate(eq, v, theta, lambda, opt.newton);
      if (!out.converged) return finish(StopReason::nose, lambda, current);
      current = eq.point(v, theta, lambda);
      LimitEvent ev;
      ev.lambda = lambda;
      ev.generator = viol_gen;
      ev.type = viol_type;
      ev.qg = current.qg[viol_gen];
      try {
        auto env = q_envelope(current.pg[viol_gen], current.v[c.generators[viol_gen].bus],
                              c.generators[viol_gen]);
        ev.q_limit = viol_type == LimitType::q_min ? env.q_min : env.q_max;
      } catch (const InfeasibleOperatingPoint&) {
        ev.q_limit = ev.qg;
      }
      curve.limit_events.push_back(ev);
      curve.samples.push_back({lambda, v[curve.monitored_bus]});
      step = std::max(step, opt.initial_step * 0.2);
      cautious = false;
    }

    if (opt.on_step) opt.on_step(lambda, current, eq.modes());
    if (lambda >= opt.lambda_target) return finish(StopReason::target_reached, lambda, current);
    if (lambda >= opt.lambda_cap) return finish(StopReason::lambda_cap, lambda, current);

    const int nn = eq.size();
    Eigen::VectorXd t_prev = t;
    int kk = nn;
    double sign = 1.0;
    if (viol_gen < 0 && t_prev.size() == nn + 1) {
      t_prev.cwiseAbs().maxCoeff(&kk);
      sign = t_prev[kk] >= 0 ? 1.0 : -1.0;
    }
    if (!tangent(kk, sign, t)) return finish(StopReason::nose, lambda, current);
    // a limit switch can leave the system past its nose immediately
    if (viol_gen >= 0 && t[nn] < 0.0) return finish(StopReason::nose, lambda, current);
    if (t[nn] < 0.0 && viol_gen < 0) {
      // tangent turned back: we are at (or just past) the nose
      step *= 0.5;
      cautious = true;
      if (step < opt.min_step) return finish(StopReason::nose, lambda, current);
      // keep marching forward in lambda from the accepted point
      if (!tangent(nn, 1.0, t)) return finish(StopReason::nose, lambda, current);
    }
    if (!cautious) step = std::min(step * 1.5, opt.max_step);
  }
  return finish(StopReason::step_failure, lambda, current);
}

/// Writes the traced curve as `lambda,v,event` rows; event names the
/// generator limit switches recorded at that loading level.
inline void write_pv_curve_csv(const NetworkCase& c, const PvCurve& curve, std::ostream& out) {
  out << "# monitored bus " << (curve.monitored_bus >= 0 ? c.buses[curve.monitored_bus].id : -1)
      << ", lambda_max " << curve.lambda_max << ", stop " << to_string(curve.stop) << "\n";
  out << "lambda,v,event\n";
  std::size_t ev = 0;
  out << std::setprecision(10);
  for (const auto& s : curve.samples) {
    std::string tag;
    while (ev < curve.limit_events.size() && curve.limit_events[ev].lambda <= s.lambda) {
      const auto& e = curve.limit_events[ev++];
      if (!tag.empty()) tag += ';';
      tag += "G" + std::to_string(c.buses[c.generators[e.generator].bus].id) + ":" + to_string(e.type);
    }
    out << s.lambda << ',' << s.v << ',' << tag << '\n';
  }
}

}  // namespace h2margin
