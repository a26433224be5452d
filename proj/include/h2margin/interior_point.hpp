#pragma once

// Primal-dual interior-point method for
//   min f(x)  s.t.  gl <= g(x) <= gu,  xl <= x <= xu
// with slacks on inequality rows, a filter line search, inertia correction
// of the reduced KKT system and a Gauss-Newton feasibility restoration.
// Fixed variables (xl == xu) are removed from the linear algebra.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "h2margin/error.hpp"

namespace h2margin {

template <class P>
concept NonlinearProgram = requires(const P& p, const Eigen::VectorXd& x, Eigen::VectorXd& out, double w) {
  { p.n() } -> std::convertible_to<int>;
  { p.m() } -> std::convertible_to<int>;
  { p.lower_bounds() } -> std::convertible_to<Eigen::VectorXd>;
  { p.upper_bounds() } -> std::convertible_to<Eigen::VectorXd>;
  { p.constraint_lower() } -> std::convertible_to<Eigen::VectorXd>;
  { p.constraint_upper() } -> std::convertible_to<Eigen::VectorXd>;
  { p.eval_f(x) } -> std::convertible_to<double>;
  p.eval_grad_f(x, out);
  p.eval_g(x, out);
  p.eval_jac(x, out);
  p.eval_hess(x, w, x, out);
  { p.jac_rows() } -> std::convertible_to<const std::vector<int>&>;
  { p.jac_cols() } -> std::convertible_to<const std::vector<int>&>;
  { p.hess_rows() } -> std::convertible_to<const std::vector<int>&>;
  { p.hess_cols() } -> std::convertible_to<const std::vector<int>&>;
};

enum class SolveStatus { optimal, locally_optimal, infeasible, iteration_limit };

inline const char* to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::optimal: return "optimal";
    case SolveStatus::locally_optimal: return "locally-optimal";
    case SolveStatus::infeasible: return "infeasible";
    case SolveStatus::iteration_limit: return "iteration-limit";
  }
  return "?";
}

struct SolverOptions {
  double feasibility_tol = 1e-6;
  double optimality_tol = 1e-6;
  double complementarity_tol = 1e-6;
  // barrier
  double mu_initial = 0.1;
  double mu_linear_factor = 0.2;
  double mu_superlinear_power = 1.5;
  double bound_push = 1e-2;
  int max_iterations = 1000;  // per interior-point solve
  // binary handling
  double penalty_initial = 1.0;
  double penalty_growth = 100.0;
  double penalty_max = 1e8;
  double final_stage_tol = 1e-8;  // barrier target of the last penalty stage
  double rounding_threshold = 0.5;
  double complementarity_eps_initial = 1e-3;
  int max_outer_iterations = 12;
  int multi_start_count = 1;
  std::uint64_t seed = 1;
  bool verbose = false;
};

struct IterationRecord {
  int iteration = 0;
  double mu = 0.0;
  double rho = 0.0;
  double violation = 0.0;
  double objective = 0.0;
  double dual_infeasibility = 0.0;
  double step = 0.0;
  double regularization = 0.0;
  bool restoration = false;
};

inline void write_iteration_log(const std::vector<IterationRecord>& log, std::ostream& out) {
  out << "iter mu rho violation objective dual_inf alpha delta_w phase\n";
  out << std::setprecision(6);
  for (const auto& r : log)
    out << r.iteration << ' ' << r.mu << ' ' << r.rho << ' ' << r.violation << ' ' << r.objective << ' '
        << r.dual_infeasibility << ' ' << r.step << ' ' << r.regularization << ' '
        << (r.restoration ? 'r' : 'n') << '\n';
}

/// Primal-dual point for warm starts and results (all full length).
struct PrimalDual {
  Eigen::VectorXd x;   // n
  Eigen::VectorXd y;   // m, multipliers of g
  Eigen::VectorXd zl;  // n, lower-bound multipliers
  Eigen::VectorXd zu;  // n, upper-bound multipliers
};

struct IpmResult {
  PrimalDual point;
  bool converged = false;
  bool infeasible = false;
  int iterations = 0;
  double kkt_error = 0.0;       // scaled optimality error at termination
  double violation = 0.0;       // unscaled max constraint/bound violation
  double objective = 0.0;
  double final_mu = 0.0;
};

/// Infinity norm of the Lagrangian gradient together with bound and row
/// complementarity products, all unscaled.
template <NonlinearProgram P>
double kkt_residual(const P& prob, const PrimalDual& pd) {
  const int n = prob.n(), m = prob.m();
  Eigen::VectorXd grad, g, jv;
  prob.eval_grad_f(pd.x, grad);
  const Eigen::VectorXd xl = prob.lower_bounds(), xu = prob.upper_bounds();
  Eigen::VectorXd r = grad;
  if (m > 0) {
    prob.eval_jac(pd.x, jv);
    const auto& jr = prob.jac_rows();
    const auto& jc = prob.jac_cols();
    for (std::size_t k = 0; k < jr.size(); ++k) r[jc[k]] += jv[k] * pd.y[jr[k]];
  }
  double res = 0.0;
  for (int j = 0; j < n; ++j) {
    if (xl[j] == xu[j]) continue;
    const double zl = pd.zl.size() ? pd.zl[j] : 0.0;
    const double zu = pd.zu.size() ? pd.zu[j] : 0.0;
    res = std::max(res, std::abs(r[j] - zl + zu));
    if (std::isfinite(xl[j])) res = std::max(res, std::abs(zl * (pd.x[j] - xl[j])));
    if (std::isfinite(xu[j])) res = std::max(res, std::abs(zu * (xu[j] - pd.x[j])));
  }
  if (m > 0) {
    prob.eval_g(pd.x, g);
    const Eigen::VectorXd gl = prob.constraint_lower(), gu = prob.constraint_upper();
    for (int i = 0; i < m; ++i) {
      if (gl[i] == gu[i]) continue;
      const double yi = pd.y[i];
      if (yi > 0.0) res = std::max(res, std::isfinite(gu[i]) ? std::abs(yi * (gu[i] - g[i])) : std::abs(yi));
      if (yi < 0.0) res = std::max(res, std::isfinite(gl[i]) ? std::abs(yi * (g[i] - gl[i])) : std::abs(yi));
    }
  }
  return res;
}

namespace detail {

/// Symmetric sparse matrix (lower triangle) with a fixed pattern and direct
/// access to the value slot of every structural entry.
class KktPattern {
 public:
  void build(int dim, std::vector<std::pair<int, int>> entries) {
    // entries: (row, col) with row >= col
    for (auto& e : entries)
      if (e.first < e.second) std::swap(e.first, e.second);
    std::sort(entries.begin(), entries.end(), [](auto& a, auto& b) {
      return a.second != b.second ? a.second < b.second : a.first < b.first;
    });
    entries.erase(std::unique(entries.begin(), entries.end()), entries.end());
    mat_.resize(dim, dim);
    Eigen::VectorXi counts = Eigen::VectorXi::Zero(dim);
    for (auto& e : entries) ++counts[e.second];
    mat_.reserve(counts);
    for (auto& e : entries) mat_.insert(e.first, e.second) = 0.0;
    mat_.makeCompressed();
  }

  int position(int row, int col) const {
    if (row < col) std::swap(row, col);
    const int* outer = mat_.outerIndexPtr();
    const int* inner = mat_.innerIndexPtr();
    const int* b = inner + outer[col];
    const int* e = inner + outer[col + 1];
    const int* it = std::lower_bound(b, e, row);
    if (it == e || *it != row) throw Error("KKT pattern entry missing");
    return static_cast<int>(it - inner);
  }

  Eigen::SparseMatrix<double>& matrix() { return mat_; }
  double* values() { return mat_.valuePtr(); }
  int nnz() const { return static_cast<int>(mat_.nonZeros()); }

 private:
  Eigen::SparseMatrix<double> mat_;
};

}  // namespace detail

/// Interior-point solver bound to one problem. The KKT pattern is analysed
/// once and reused across solves (penalty stages, warm starts).
template <NonlinearProgram P>
class InteriorPointSolver {
 public:
  explicit InteriorPointSolver(const P& prob) : prob_(prob) {}

  IpmResult solve(const PrimalDual& start, const SolverOptions& opt, double mu0,
                  std::vector<IterationRecord>* log = nullptr, double rho_for_log = 0.0);

 private:
  void setup();
  void scale(const Eigen::VectorXd& x0);
  void evaluate(const Eigen::VectorXd& x, bool with_derivatives);
  double barrier_objective(const Eigen::VectorXd& xf, const Eigen::VectorXd& s, double mu) const;
  double theta(const Eigen::VectorXd& gval, const Eigen::VectorXd& s) const;
  bool factorize(double delta_w, double delta_c);
  void solve_kkt(const Eigen::VectorXd& rhs, Eigen::VectorXd& sol, double delta_c);
  void assemble(const Eigen::VectorXd& hess, double delta_w, double delta_c, bool restoration,
                double zeta);

  const P& prob_;
  bool ready_ = false;
  int n_ = 0, m_ = 0, nf_ = 0, mi_ = 0;
  std::vector<int> free_;          // free variable -> full index
  std::vector<int> full_to_free_;  // full index -> free index or -1
  std::vector<int> ineq_;          // inequality rows
  std::vector<int> row_to_ineq_;   // row -> ineq index or -1
  Eigen::VectorXd xl_, xu_, gl_, gu_;  // free-variable bounds, scaled row bounds
  Eigen::VectorXd sl_, su_;            // slack bounds
  Eigen::VectorXd x_full_;             // full x with fixed values
  Eigen::VectorXd row_scale_;
  double obj_scale_ = 1.0;

  // current evaluations (scaled)
  double f_ = 0.0;
  Eigen::VectorXd grad_;  // free
  Eigen::VectorXd g_;     // m
  Eigen::VectorXd jac_;   // values in problem order

  // iterate state
  Eigen::VectorXd sigma_x_, sigma_s_;

  detail::KktPattern kkt_;
  std::vector<int> hess_pos_;  // problem hessian entry -> kkt slot (-1 if fixed var)
  std::vector<int> jac_pos_;   // problem jacobian entry -> kkt slot (-1 if fixed var)
  std::vector<int> diag_pos_;  // kkt diagonal slots
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower, Eigen::AMDOrdering<int>> ldlt_;
  Eigen::VectorXd hess_vals_;
};

template <NonlinearProgram P>
void InteriorPointSolver<P>::setup() {
  n_ = prob_.n();
  m_ = prob_.m();
  const Eigen::VectorXd xl = prob_.lower_bounds(), xu = prob_.upper_bounds();
  full_to_free_.assign(n_, -1);
  free_.clear();
  for (int j = 0; j < n_; ++j) {
    if (xl[j] > xu[j]) throw Error("variable bounds are inconsistent");
    if (xl[j] == xu[j]) continue;
    full_to_free_[j] = static_cast<int>(free_.size());
    free_.push_back(j);
  }
  nf_ = static_cast<int>(free_.size());
  xl_.resize(nf_);
  xu_.resize(nf_);
  for (int k = 0; k < nf_; ++k) {
    xl_[k] = xl[free_[k]];
    xu_[k] = xu[free_[k]];
  }
  const Eigen::VectorXd gl = prob_.constraint_lower(), gu = prob_.constraint_upper();
  ineq_.clear();
  row_to_ineq_.assign(m_, -1);
  for (int i = 0; i < m_; ++i) {
    if (gl[i] > gu[i]) throw Error("constraint bounds are inconsistent");
    if (gl[i] != gu[i]) {
      row_to_ineq_[i] = static_cast<int>(ineq_.size());
      ineq_.push_back(i);
    }
  }
  mi_ = static_cast<int>(ineq_.size());

  // kkt pattern
  const int dim = nf_ + m_;
  std::vector<std::pair<int, int>> e;
  for (int k = 0; k < dim; ++k) e.emplace_back(k, k);
  const auto& hr = prob_.hess_rows();
  const auto& hc = prob_.hess_cols();
  for (std::size_t k = 0; k < hr.size(); ++k) {
    const int a = full_to_free_[hr[k]], b = full_to_free_[hc[k]];
    if (a >= 0 && b >= 0) e.emplace_back(a, b);
  }
  const auto& jr = prob_.jac_rows();
  const auto& jc = prob_.jac_cols();
  for (std::size_t k = 0; k < jr.size(); ++k) {
    const int b = full_to_free_[jc[k]];
    if (b >= 0) e.emplace_back(nf_ + jr[k], b);
  }
  kkt_.build(dim, std::move(e));
  hess_pos_.assign(hr.size(), -1);
  for (std::size_t k = 0; k < hr.size(); ++k) {
    const int a = full_to_free_[hr[k]], b = full_to_free_[hc[k]];
    if (a >= 0 && b >= 0) hess_pos_[k] = kkt_.position(a, b);
  }
  jac_pos_.assign(jr.size(), -1);
  for (std::size_t k = 0; k < jr.size(); ++k) {
    const int b = full_to_free_[jc[k]];
    if (b >= 0) jac_pos_[k] = kkt_.position(nf_ + jr[k], b);
  }
  diag_pos_.resize(dim);
  for (int k = 0; k < dim; ++k) diag_pos_[k] = kkt_.position(k, k);
  ldlt_.analyzePattern(kkt_.matrix());
  ready_ = true;
}

template <NonlinearProgram P>
void InteriorPointSolver<P>::scale(const Eigen::VectorXd& x0) {
  Eigen::VectorXd grad, jv;
  prob_.eval_grad_f(x0, grad);
  double gmax = 0.0;
  for (int k = 0; k < nf_; ++k) gmax = std::max(gmax, std::abs(grad[free_[k]]));
  obj_scale_ = gmax > 100.0 ? 100.0 / gmax : 1.0;
  row_scale_ = Eigen::VectorXd::Ones(m_);
  if (m_ == 0) return;
  prob_.eval_jac(x0, jv);
  Eigen::VectorXd rmax = Eigen::VectorXd::Zero(m_);
  const auto& jr = prob_.jac_rows();
  const auto& jc = prob_.jac_cols();
  for (std::size_t k = 0; k < jr.size(); ++k)
    if (full_to_free_[jc[k]] >= 0) rmax[jr[k]] = std::max(rmax[jr[k]], std::abs(jv[k]));
  for (int i = 0; i < m_; ++i)
    if (rmax[i] > 100.0) row_scale_[i] = 100.0 / rmax[i];
  const Eigen::VectorXd gl = prob_.constraint_lower(), gu = prob_.constraint_upper();
  gl_ = gl.cwiseProduct(row_scale_);
  gu_ = gu.cwiseProduct(row_scale_);
  sl_.resize(mi_);
  su_.resize(mi_);
  for (int k = 0; k < mi_; ++k) {
    sl_[k] = gl_[ineq_[k]];
    su_[k] = gu_[ineq_[k]];
  }
}

template <NonlinearProgram P>
void InteriorPointSolver<P>::evaluate(const Eigen::VectorXd& x, bool with_derivatives) {
  f_ = obj_scale_ * prob_.eval_f(x);
  if (m_ > 0) {
    prob_.eval_g(x, g_);
    g_ = g_.cwiseProduct(row_scale_);
  }
  if (!with_derivatives) return;
  Eigen::VectorXd gf;
  prob_.eval_grad_f(x, gf);
  grad_.resize(nf_);
  for (int k = 0; k < nf_; ++k) grad_[k] = obj_scale_ * gf[free_[k]];
  if (m_ > 0) {
    prob_.eval_jac(x, jac_);
    const auto& jr = prob_.jac_rows();
    for (std::size_t k = 0; k < jr.size(); ++k) jac_[k] *= row_scale_[jr[k]];
  }
}

template <NonlinearProgram P>
double InteriorPointSolver<P>::barrier_objective(const Eigen::VectorXd& xf, const Eigen::VectorXd& s,
                                                 double mu) const {
  double b = 0.0;
  for (int k = 0; k < nf_; ++k) {
    if (std::isfinite(xl_[k])) b -= std::log(xf[k] - xl_[k]);
    if (std::isfinite(xu_[k])) b -= std::log(xu_[k] - xf[k]);
  }
  for (int k = 0; k < mi_; ++k) {
    if (std::isfinite(sl_[k])) b -= std::log(s[k] - sl_[k]);
    if (std::isfinite(su_[k])) b -= std::log(su_[k] - s[k]);
  }
  return f_ + mu * b;
}

template <NonlinearProgram P>
double InteriorPointSolver<P>::theta(const Eigen::VectorXd& gval, const Eigen::VectorXd& s) const {
  double t = 0.0;
  for (int i = 0; i < m_; ++i) {
    const int k = row_to_ineq_[i];
    t += std::abs(k < 0 ? gval[i] - gl_[i] : gval[i] - s[k]);
  }
  return t;
}

template <NonlinearProgram P>
void InteriorPointSolver<P>::assemble(const Eigen::VectorXd& hess, double delta_w, double delta_c,
                                      bool restoration, double zeta) {
  double* v = kkt_.values();
  std::fill(v, v + kkt_.nnz(), 0.0);
  if (!restoration)
    for (std::size_t k = 0; k < hess_pos_.size(); ++k)
      if (hess_pos_[k] >= 0) v[hess_pos_[k]] += hess[k];
  for (std::size_t k = 0; k < jac_pos_.size(); ++k)
    if (jac_pos_[k] >= 0) v[jac_pos_[k]] += jac_[k];
  for (int k = 0; k < nf_; ++k) v[diag_pos_[k]] += sigma_x_[k] + delta_w + (restoration ? zeta : 0.0);
  for (int i = 0; i < m_; ++i) {
    const int k = row_to_ineq_[i];
    double d = restoration ? 1.0 : delta_c;
    if (k >= 0) d += 1.0 / (sigma_s_[k] + delta_w + (restoration ? zeta : 0.0));
    v[diag_pos_[nf_ + i]] = -d;
  }
}

template <NonlinearProgram P>
bool InteriorPointSolver<P>::factorize(double, double) {
  ldlt_.factorize(kkt_.matrix());
  if (ldlt_.info() != Eigen::Success) return false;
  const auto& d = ldlt_.vectorD();
  int pos = 0, neg = 0;
  for (Eigen::Index k = 0; k < d.size(); ++k) {
    if (d[k] > 0.0) ++pos;
    else if (d[k] < 0.0) ++neg;
  }
  return pos == nf_ && neg == m_;
}

template <NonlinearProgram P>
void InteriorPointSolver<P>::solve_kkt(const Eigen::VectorXd& rhs, Eigen::VectorXd& sol, double delta_c) {
  sol = ldlt_.solve(rhs);
  if (delta_c == 0.0) return;
  // refine against the matrix without the constraint regularization
  const auto K = kkt_.matrix().template selfadjointView<Eigen::Lower>();
  for (int it = 0; it < 2; ++it) {
    Eigen::VectorXd r = rhs - K * sol;
    for (int i = 0; i < m_; ++i) r[nf_ + i] -= delta_c * sol[nf_ + i];
    if (r.lpNorm<Eigen::Infinity>() < 1e-14 * (1.0 + rhs.lpNorm<Eigen::Infinity>())) break;
    sol += ldlt_.solve(r);
  }
}

template <NonlinearProgram P>
IpmResult InteriorPointSolver<P>::solve(const PrimalDual& start, const SolverOptions& opt, double mu0,
                                        std::vector<IterationRecord>* log, double rho_for_log) {
  if (!ready_) setup();
  IpmResult res;
  const Eigen::VectorXd xl_full = prob_.lower_bounds(), xu_full = prob_.upper_bounds();

  // -- initial point ----------------------------------------------------------
  x_full_ = start.x;
  for (int j = 0; j < n_; ++j)
    if (full_to_free_[j] < 0) x_full_[j] = xl_full[j];
  Eigen::VectorXd xf(nf_);
  const double kappa = opt.bound_push;
  for (int k = 0; k < nf_; ++k) {
    double x = start.x[free_[k]];
    const double l = xl_[k], u = xu_[k];
    if (std::isfinite(l) && std::isfinite(u)) {
      const double pl = std::min(kappa * std::max(1.0, std::abs(l)), kappa * (u - l));
      const double pu = std::min(kappa * std::max(1.0, std::abs(u)), kappa * (u - l));
      x = std::clamp(x, l + pl, u - pu);
    } else if (std::isfinite(l)) {
      x = std::max(x, l + kappa * std::max(1.0, std::abs(l)));
    } else if (std::isfinite(u)) {
      x = std::min(x, u - kappa * std::max(1.0, std::abs(u)));
    }
    xf[k] = x;
  }
  for (int k = 0; k < nf_; ++k) x_full_[free_[k]] = xf[k];
  scale(x_full_);
  evaluate(x_full_, true);

  Eigen::VectorXd s(mi_);
  for (int k = 0; k < mi_; ++k) {
    double v = g_[ineq_[k]];
    const double l = sl_[k], u = su_[k];
    if (std::isfinite(l) && std::isfinite(u)) {
      const double pl = std::min(kappa * std::max(1.0, std::abs(l)), kappa * (u - l));
      const double pu = std::min(kappa * std::max(1.0, std::abs(u)), kappa * (u - l));
      v = std::clamp(v, l + pl, u - pu);
    } else if (std::isfinite(l)) {
      v = std::max(v, l + kappa * std::max(1.0, std::abs(l)));
    } else if (std::isfinite(u)) {
      v = std::min(v, u - kappa * std::max(1.0, std::abs(u)));
    }
    s[k] = v;
  }

  double mu = mu0;
  Eigen::VectorXd zl = Eigen::VectorXd::Zero(nf_), zu = Eigen::VectorXd::Zero(nf_);
  Eigen::VectorXd vl = Eigen::VectorXd::Zero(mi_), vu = Eigen::VectorXd::Zero(mi_);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(m_);
  const bool warm = start.y.size() == m_ && start.zl.size() == n_ && start.zu.size() == n_;
  for (int k = 0; k < nf_; ++k) {
    if (std::isfinite(xl_[k])) zl[k] = warm ? std::max(start.zl[free_[k]] * obj_scale_, mu / (xf[k] - xl_[k])) : 1.0;
    if (std::isfinite(xu_[k])) zu[k] = warm ? std::max(start.zu[free_[k]] * obj_scale_, mu / (xu_[k] - xf[k])) : 1.0;
  }
  if (warm) {
    for (int i = 0; i < m_; ++i) y[i] = start.y[i] * obj_scale_ / row_scale_[i];
    for (int k = 0; k < mi_; ++k) {
      const double yi = y[ineq_[k]];
      // sign convention: dL/ds = -y - vl + vu = 0
      if (std::isfinite(sl_[k])) vl[k] = std::max(-yi, mu / (s[k] - sl_[k]));
      if (std::isfinite(su_[k])) vu[k] = std::max(yi, mu / (su_[k] - s[k]));
    }
  } else {
    for (int k = 0; k < mi_; ++k) {
      if (std::isfinite(sl_[k])) vl[k] = 1.0;
      if (std::isfinite(su_[k])) vu[k] = 1.0;
    }
  }

  sigma_x_.resize(nf_);
  sigma_s_.resize(mi_);
  auto update_sigma = [&]() {
    for (int k = 0; k < nf_; ++k) {
      double sg = 0.0;
      if (std::isfinite(xl_[k])) sg += zl[k] / (xf[k] - xl_[k]);
      if (std::isfinite(xu_[k])) sg += zu[k] / (xu_[k] - xf[k]);
      sigma_x_[k] = sg;
    }
    for (int k = 0; k < mi_; ++k) {
      double sg = 0.0;
      if (std::isfinite(sl_[k])) sg += vl[k] / (s[k] - sl_[k]);
      if (std::isfinite(su_[k])) sg += vu[k] / (su_[k] - s[k]);
      sigma_s_[k] = sg;
    }
  };

  const auto& jr = prob_.jac_rows();
  const auto& jc = prob_.jac_cols();
  auto jt_times = [&](const Eigen::VectorXd& w, Eigen::VectorXd& out) {
    out.setZero(nf_);
    for (std::size_t k = 0; k < jr.size(); ++k) {
      const int b = full_to_free_[jc[k]];
      if (b >= 0) out[b] += jac_[k] * w[jr[k]];
    }
  };
  auto j_times = [&](const Eigen::VectorXd& dx, Eigen::VectorXd& out) {
    out.setZero(m_);
    for (std::size_t k = 0; k < jr.size(); ++k) {
      const int b = full_to_free_[jc[k]];
      if (b >= 0) out[jr[k]] += jac_[k] * dx[b];
    }
  };

  // least-squares multiplier estimate for cold starts
  if (!warm && m_ > 0) {
    sigma_x_.setZero();
    sigma_s_.setConstant(1e8);
    double* v = kkt_.values();
    std::fill(v, v + kkt_.nnz(), 0.0);
    for (std::size_t k = 0; k < jac_pos_.size(); ++k)
      if (jac_pos_[k] >= 0) v[jac_pos_[k]] += jac_[k];
    for (int k = 0; k < nf_; ++k) v[diag_pos_[k]] = 1.0;
    for (int i = 0; i < m_; ++i) v[diag_pos_[nf_ + i]] = -1e-8;
    ldlt_.factorize(kkt_.matrix());
    if (ldlt_.info() == Eigen::Success) {
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nf_ + m_);
      rhs.head(nf_) = -(grad_ - zl + zu);
      Eigen::VectorXd sol = ldlt_.solve(rhs);
      Eigen::VectorXd yl = sol.tail(m_);
      if (yl.allFinite() && yl.lpNorm<Eigen::Infinity>() <= 1e3) y = yl;
    }
  }

  // -- main loop --------------------------------------------------------------
  const double theta0 = theta(g_, s);
  const double theta_max = 1e4 * std::max(1.0, theta0);
  const double theta_min = 1e-4 * std::max(1.0, theta0);
  std::vector<std::pair<double, double>> filter;
  double delta_w_last = 0.0;
  const double tol = opt.optimality_tol;
  Eigen::VectorXd hess, jty, cons(m_), dx, ds, dy, sol, rhs(nf_ + m_);
  Eigen::VectorXd y_prob(m_);
  int restoration_calls = 0;
  int iter = 0;

  auto residual_parts = [&](double mu_c, double& dual_inf, double& primal_inf, double& compl_err, double& sd,
                            double& sc) {
    jt_times(y, jty);
    Eigen::VectorXd rx = grad_ + jty - zl + zu;
    dual_inf = rx.size() ? rx.lpNorm<Eigen::Infinity>() : 0.0;
    for (int k = 0; k < mi_; ++k) dual_inf = std::max(dual_inf, std::abs(-y[ineq_[k]] - vl[k] + vu[k]));
    primal_inf = 0.0;
    for (int i = 0; i < m_; ++i) {
      const int k = row_to_ineq_[i];
      primal_inf = std::max(primal_inf, std::abs(k < 0 ? g_[i] - gl_[i] : g_[i] - s[k]));
    }
    compl_err = 0.0;
    double zsum = 0.0;
    int zcount = 0;
    for (int k = 0; k < nf_; ++k) {
      if (std::isfinite(xl_[k])) {
        compl_err = std::max(compl_err, std::abs(zl[k] * (xf[k] - xl_[k]) - mu_c));
        zsum += std::abs(zl[k]);
        ++zcount;
      }
      if (std::isfinite(xu_[k])) {
        compl_err = std::max(compl_err, std::abs(zu[k] * (xu_[k] - xf[k]) - mu_c));
        zsum += std::abs(zu[k]);
        ++zcount;
      }
    }
    for (int k = 0; k < mi_; ++k) {
      if (std::isfinite(sl_[k])) {
        compl_err = std::max(compl_err, std::abs(vl[k] * (s[k] - sl_[k]) - mu_c));
        zsum += std::abs(vl[k]);
        ++zcount;
      }
      if (std::isfinite(su_[k])) {
        compl_err = std::max(compl_err, std::abs(vu[k] * (su_[k] - s[k]) - mu_c));
        zsum += std::abs(vu[k]);
        ++zcount;
      }
    }
    const double smax = 100.0;
    sd = std::max(smax, (y.lpNorm<1>() + zsum) / std::max(1, m_ + zcount)) / smax;
    sc = std::max(smax, zsum / std::max(1, zcount)) / smax;
  };

  auto unscaled_violation = [&]() {
    double v = 0.0;
    Eigen::VectorXd g;
    if (m_ > 0) {
      prob_.eval_g(x_full_, g);
      const Eigen::VectorXd gl = prob_.constraint_lower(), gu = prob_.constraint_upper();
      for (int i = 0; i < m_; ++i) v = std::max({v, gl[i] - g[i], g[i] - gu[i]});
    }
    for (int j = 0; j < n_; ++j) v = std::max({v, xl_full[j] - x_full_[j], x_full_[j] - xu_full[j]});
    return v;
  };

  auto finish = [&](bool converged, double err) {
    res.converged = converged;
    res.iterations = iter;
    res.kkt_error = err;
    res.final_mu = mu;
    res.point.x = x_full_;
    res.point.y.resize(m_);
    for (int i = 0; i < m_; ++i) res.point.y[i] = y[i] * row_scale_[i] / obj_scale_;
    res.point.zl = Eigen::VectorXd::Zero(n_);
    res.point.zu = Eigen::VectorXd::Zero(n_);
    for (int k = 0; k < nf_; ++k) {
      res.point.zl[free_[k]] = zl[k] / obj_scale_;
      res.point.zu[free_[k]] = zu[k] / obj_scale_;
    }
    res.violation = unscaled_violation();
    res.objective = prob_.eval_f(x_full_);
    return res;
  };

  for (iter = 0; iter <= opt.max_iterations; ++iter) {
    update_sigma();
    double dual_inf, primal_inf, compl_err, sd, sc;
    residual_parts(0.0, dual_inf, primal_inf, compl_err, sd, sc);
    const double err0 = std::max({dual_inf / sd, primal_inf, compl_err / sc});
    if (log)
      log->push_back({iter, mu, rho_for_log, primal_inf, f_ / obj_scale_, dual_inf, 0.0, delta_w_last, false});
    if (err0 <= tol) {
      if (unscaled_violation() <= opt.feasibility_tol) return finish(true, err0);
    }
    if (iter == opt.max_iterations) break;

    // barrier parameter update (monotone)
    for (;;) {
      double di, pi, ce, sdm, scm;
      residual_parts(mu, di, pi, ce, sdm, scm);
      const double err_mu = std::max({di / sdm, pi, ce / scm});
      if (err_mu > 10.0 * mu) break;
      const double mu_new = std::max(tol / 10.0, std::min(opt.mu_linear_factor * mu, std::pow(mu, opt.mu_superlinear_power)));
      if (mu_new >= mu) break;
      mu = mu_new;
      filter.clear();
    }
    const double tau = std::max(0.99, 1.0 - mu);

    // hessian of the (scaled) Lagrangian
    for (int i = 0; i < m_; ++i) y_prob[i] = y[i] * row_scale_[i];
    prob_.eval_hess(x_full_, obj_scale_, y_prob, hess);

    // right-hand side
    jt_times(y, jty);
    Eigen::VectorXd rx = grad_ + jty;
    for (int k = 0; k < nf_; ++k) {
      if (std::isfinite(xl_[k])) rx[k] -= mu / (xf[k] - xl_[k]);
      if (std::isfinite(xu_[k])) rx[k] += mu / (xu_[k] - xf[k]);
    }
    Eigen::VectorXd rs(mi_);
    for (int k = 0; k < mi_; ++k) {
      double v = -y[ineq_[k]];
      if (std::isfinite(sl_[k])) v -= mu / (s[k] - sl_[k]);
      if (std::isfinite(su_[k])) v += mu / (su_[k] - s[k]);
      rs[k] = v;
    }
    for (int i = 0; i < m_; ++i) {
      const int k = row_to_ineq_[i];
      cons[i] = k < 0 ? g_[i] - gl_[i] : g_[i] - s[k];
    }

    // factorization with inertia correction
    double delta_w = 0.0;
    const double delta_c = m_ > 0 ? 1e-9 : 0.0;
    bool ok = false;
    for (int attempt = 0; attempt < 60; ++attempt) {
      assemble(hess, delta_w, delta_c, false, 0.0);
      if (factorize(delta_w, delta_c)) {
        ok = true;
        break;
      }
      if (delta_w == 0.0)
        delta_w = delta_w_last == 0.0 ? 1e-4 : std::max(1e-20, delta_w_last / 3.0);
      else
        delta_w *= delta_w_last == 0.0 ? 100.0 : 8.0;
      if (delta_w > 1e40) break;
    }
    if (!ok) break;
    if (delta_w > 0.0) delta_w_last = delta_w;

    rhs.head(nf_) = -rx;
    for (int i = 0; i < m_; ++i) {
      const int k = row_to_ineq_[i];
      rhs[nf_ + i] = -cons[i] - (k >= 0 ? rs[k] / (sigma_s_[k] + delta_w) : 0.0);
    }
    solve_kkt(rhs, sol, delta_c);
    dx = sol.head(nf_);
    dy = sol.tail(m_);
    ds.resize(mi_);
    for (int k = 0; k < mi_; ++k) ds[k] = (dy[ineq_[k]] - rs[k]) / (sigma_s_[k] + delta_w);

    // bound multiplier steps
    Eigen::VectorXd dzl = Eigen::VectorXd::Zero(nf_), dzu = Eigen::VectorXd::Zero(nf_);
    Eigen::VectorXd dvl = Eigen::VectorXd::Zero(mi_), dvu = Eigen::VectorXd::Zero(mi_);
    for (int k = 0; k < nf_; ++k) {
      if (std::isfinite(xl_[k])) dzl[k] = (mu - zl[k] * (xf[k] - xl_[k]) - zl[k] * dx[k]) / (xf[k] - xl_[k]);
      if (std::isfinite(xu_[k])) dzu[k] = (mu - zu[k] * (xu_[k] - xf[k]) + zu[k] * dx[k]) / (xu_[k] - xf[k]);
    }
    for (int k = 0; k < mi_; ++k) {
      if (std::isfinite(sl_[k])) dvl[k] = (mu - vl[k] * (s[k] - sl_[k]) - vl[k] * ds[k]) / (s[k] - sl_[k]);
      if (std::isfinite(su_[k])) dvu[k] = (mu - vu[k] * (su_[k] - s[k]) + vu[k] * ds[k]) / (su_[k] - s[k]);
    }

    // fraction to the boundary
    auto max_step = [&](const Eigen::VectorXd& d_x, const Eigen::VectorXd& d_s) {
      double a = 1.0;
      for (int k = 0; k < nf_; ++k) {
        if (std::isfinite(xl_[k]) && d_x[k] < 0.0) a = std::min(a, -tau * (xf[k] - xl_[k]) / d_x[k]);
        if (std::isfinite(xu_[k]) && d_x[k] > 0.0) a = std::min(a, tau * (xu_[k] - xf[k]) / d_x[k]);
      }
      for (int k = 0; k < mi_; ++k) {
        if (std::isfinite(sl_[k]) && d_s[k] < 0.0) a = std::min(a, -tau * (s[k] - sl_[k]) / d_s[k]);
        if (std::isfinite(su_[k]) && d_s[k] > 0.0) a = std::min(a, tau * (su_[k] - s[k]) / d_s[k]);
      }
      return a;
    };
    const double alpha_max = max_step(dx, ds);
    double alpha_z = 1.0;
    auto zstep = [&](const Eigen::VectorXd& z, const Eigen::VectorXd& dz) {
      for (Eigen::Index k = 0; k < z.size(); ++k)
        if (dz[k] < 0.0 && z[k] > 0.0) alpha_z = std::min(alpha_z, -tau * z[k] / dz[k]);
    };
    zstep(zl, dzl);
    zstep(zu, dzu);
    zstep(vl, dvl);
    zstep(vu, dvu);

    // filter line search
    const double phi = barrier_objective(xf, s, mu);
    const double th = theta(g_, s);
    double grad_phi_d = 0.0;
    {
      Eigen::VectorXd gphi = grad_;
      for (int k = 0; k < nf_; ++k) {
        if (std::isfinite(xl_[k])) gphi[k] -= mu / (xf[k] - xl_[k]);
        if (std::isfinite(xu_[k])) gphi[k] += mu / (xu_[k] - xf[k]);
      }
      grad_phi_d = gphi.dot(dx);
      for (int k = 0; k < mi_; ++k) {
        double gs = 0.0;
        if (std::isfinite(sl_[k])) gs -= mu / (s[k] - sl_[k]);
        if (std::isfinite(su_[k])) gs += mu / (su_[k] - s[k]);
        grad_phi_d += gs * ds[k];
      }
    }
    const double gamma_theta = 1e-5, gamma_phi = 1e-8, eta = 1e-4, s_theta = 1.1, s_phi = 2.3;
    double alpha_min = 0.05 * gamma_theta;
    if (grad_phi_d < 0.0) {
      alpha_min = 0.05 * std::min({gamma_theta, gamma_phi * th / -grad_phi_d,
                                   th <= theta_min ? std::pow(th, s_theta) / std::pow(-grad_phi_d, s_phi) : 1.0});
    }
    alpha_min = std::max(alpha_min, 1e-14);

    Eigen::VectorXd xf_t(nf_), s_t(mi_), g_t;
    double alpha = alpha_max;
    bool accepted = false;
    bool f_type = false;
    double f_t = 0.0;
    double phi_t = 0.0, th_t = 0.0;
    auto try_point = [&](const Eigen::VectorXd& px, const Eigen::VectorXd& ps) -> bool {
      for (int k = 0; k < nf_; ++k) x_full_[free_[k]] = px[k];
      const double f_keep = f_;
      evaluate(x_full_, false);
      g_t = g_;
      f_t = f_;
      phi_t = barrier_objective(px, ps, mu);
      th_t = theta(g_t, ps);
      f_ = f_keep;
      if (!std::isfinite(phi_t) || !std::isfinite(th_t) || th_t > theta_max) return false;
      const bool switching = grad_phi_d < 0.0 && th <= theta_min &&
                             alpha * std::pow(-grad_phi_d, s_phi) > std::pow(th, s_theta);
      if (switching) {
        f_type = true;
        if (phi_t <= phi + eta * alpha * grad_phi_d) return true;
        return false;
      }
      f_type = false;
      if (!(th_t <= (1.0 - gamma_theta) * th || phi_t <= phi - gamma_phi * th)) return false;
      for (const auto& [ft, fp] : filter)
        if (th_t >= ft && phi_t >= fp) return false;
      return true;
    };

    int trials = 0;
    while (alpha >= alpha_min && trials < 40) {
      xf_t = xf + alpha * dx;
      s_t = s + alpha * ds;
      if (try_point(xf_t, s_t)) {
        accepted = true;
        break;
      }
      // second-order correction on the first trial
      if (trials == 0 && th_t >= th && m_ > 0) {
        Eigen::VectorXd c_soc = alpha * cons;
        double alpha_soc = alpha;
        double th_old = th;
        for (int p = 0; p < 4; ++p) {
          for (int i = 0; i < m_; ++i) {
            const int k = row_to_ineq_[i];
            c_soc[i] = alpha_soc * c_soc[i] + (k < 0 ? g_t[i] - gl_[i] : g_t[i] - s_t[k]);
          }
          Eigen::VectorXd r2 = rhs;
          for (int i = 0; i < m_; ++i) {
            const int k = row_to_ineq_[i];
            r2[nf_ + i] = -c_soc[i] - (k >= 0 ? rs[k] / (sigma_s_[k] + delta_w) : 0.0);
          }
          Eigen::VectorXd sol2;
          solve_kkt(r2, sol2, delta_c);
          Eigen::VectorXd dx2 = sol2.head(nf_), ds2(mi_);
          for (int k = 0; k < mi_; ++k) ds2[k] = (sol2[nf_ + ineq_[k]] - rs[k]) / (sigma_s_[k] + delta_w);
          alpha_soc = max_step(dx2, ds2);
          xf_t = xf + alpha_soc * dx2;
          s_t = s + alpha_soc * ds2;
          if (try_point(xf_t, s_t)) {
            accepted = true;
            alpha = alpha_soc;
            dx = dx2;
            ds = ds2;
            dy = sol2.tail(m_);
            break;
          }
          if (th_t > 0.99 * th_old) break;
          th_old = th_t;
        }
        if (accepted) break;
      }
      alpha *= 0.5;
      ++trials;
    }

    if (!accepted) {
      // feasibility restoration: Gauss-Newton on the constraint residual
      ++restoration_calls;
      if (restoration_calls > 20) break;
      for (int k = 0; k < nf_; ++k) x_full_[free_[k]] = xf[k];
      evaluate(x_full_, true);
      const double th_start = theta(g_, s);
      bool restored = false;
      for (int rit = 0; rit < 200 && !restored; ++rit) {
        update_sigma();
        const double zeta = std::sqrt(std::max(mu, 1e-8));
        assemble(hess, 0.0, 0.0, true, zeta);
        ldlt_.factorize(kkt_.matrix());
        if (ldlt_.info() != Eigen::Success) break;
        Eigen::VectorXd rr(nf_ + m_);
        for (int k = 0; k < nf_; ++k) {
          double gb = 0.0;
          if (std::isfinite(xl_[k])) gb -= mu / (xf[k] - xl_[k]);
          if (std::isfinite(xu_[k])) gb += mu / (xu_[k] - xf[k]);
          rr[k] = -gb;
        }
        Eigen::VectorXd rsr(mi_);
        for (int k = 0; k < mi_; ++k) {
          double gb = 0.0;
          if (std::isfinite(sl_[k])) gb -= mu / (s[k] - sl_[k]);
          if (std::isfinite(su_[k])) gb += mu / (su_[k] - s[k]);
          rsr[k] = gb;
        }
        for (int i = 0; i < m_; ++i) {
          const int k = row_to_ineq_[i];
          const double ci = k < 0 ? g_[i] - gl_[i] : g_[i] - s[k];
          rr[nf_ + i] = -ci - (k >= 0 ? rsr[k] / (sigma_s_[k] + zeta) : 0.0);
        }
        Eigen::VectorXd sr = ldlt_.solve(rr);
        Eigen::VectorXd dxr = sr.head(nf_), dsr(mi_);
        for (int k = 0; k < mi_; ++k) dsr[k] = (sr[nf_ + ineq_[k]] - rsr[k]) / (sigma_s_[k] + zeta);
        double a = max_step(dxr, dsr);
        const double th_cur = theta(g_, s);
        bool stepped = false;
        for (int bt = 0; bt < 30; ++bt) {
          xf_t = xf + a * dxr;
          s_t = s + a * dsr;
          for (int k = 0; k < nf_; ++k) x_full_[free_[k]] = xf_t[k];
          evaluate(x_full_, false);
          const double tt = theta(g_, s_t);
          if (std::isfinite(tt) && tt < th_cur * (1.0 - 1e-4 * a)) {
            stepped = true;
            break;
          }
          a *= 0.5;
        }
        if (!stepped) break;
        // bound multipliers follow the primal step
        for (int k = 0; k < nf_; ++k) {
          if (std::isfinite(xl_[k])) zl[k] = std::max(1e-12, zl[k] + a * ((mu - zl[k] * (xf[k] - xl_[k]) - zl[k] * dxr[k]) / (xf[k] - xl_[k])));
          if (std::isfinite(xu_[k])) zu[k] = std::max(1e-12, zu[k] + a * ((mu - zu[k] * (xu_[k] - xf[k]) + zu[k] * dxr[k]) / (xu_[k] - xf[k])));
        }
        for (int k = 0; k < mi_; ++k) {
          if (std::isfinite(sl_[k])) vl[k] = std::max(1e-12, vl[k] + a * ((mu - vl[k] * (s[k] - sl_[k]) - vl[k] * dsr[k]) / (s[k] - sl_[k])));
          if (std::isfinite(su_[k])) vu[k] = std::max(1e-12, vu[k] + a * ((mu - vu[k] * (su_[k] - s[k]) + vu[k] * dsr[k]) / (su_[k] - s[k])));
        }
        xf = xf_t;
        s = s_t;
        evaluate(x_full_, true);
        const double th_now = theta(g_, s);
        const double phi_now = barrier_objective(xf, s, mu);
        if (log)
          log->push_back({iter, mu, rho_for_log, th_now, f_ / obj_scale_, 0.0, a, zeta, true});
        bool in_filter = false;
        for (const auto& [ft, fp] : filter)
          if (th_now >= ft && phi_now >= fp) in_filter = true;
        if (th_now <= 0.9 * th_start && !in_filter) restored = true;
        if (th_now <= 1e-2 * opt.feasibility_tol) restored = true;
      }
      if (!restored) {
        for (int k = 0; k < nf_; ++k) x_full_[free_[k]] = xf[k];
        evaluate(x_full_, true);
        if (theta(g_, s) > opt.feasibility_tol) {
          res.infeasible = true;
          return finish(false, std::numeric_limits<double>::infinity());
        }
      }
      y.setZero();
      filter.push_back({(1.0 - gamma_theta) * th, phi - gamma_phi * th});
      continue;
    }

    if (!f_type) filter.push_back({(1.0 - gamma_theta) * th, phi - gamma_phi * th});

    // accept
    xf = xf_t;
    s = s_t;
    y += alpha * dy;
    zl += alpha_z * dzl;
    zu += alpha_z * dzu;
    vl += alpha_z * dvl;
    vu += alpha_z * dvu;
    for (int k = 0; k < nf_; ++k) x_full_[free_[k]] = xf[k];
    evaluate(x_full_, true);
    // keep bound multipliers within a factor of the primal-dual central path
    const double kappa_sigma = 1e10;
    for (int k = 0; k < nf_; ++k) {
      if (std::isfinite(xl_[k])) {
        const double d = xf[k] - xl_[k];
        zl[k] = std::max(std::min(zl[k], kappa_sigma * mu / d), mu / (kappa_sigma * d));
      }
      if (std::isfinite(xu_[k])) {
        const double d = xu_[k] - xf[k];
        zu[k] = std::max(std::min(zu[k], kappa_sigma * mu / d), mu / (kappa_sigma * d));
      }
    }
    for (int k = 0; k < mi_; ++k) {
      if (std::isfinite(sl_[k])) {
        const double d = s[k] - sl_[k];
        vl[k] = std::max(std::min(vl[k], kappa_sigma * mu / d), mu / (kappa_sigma * d));
      }
      if (std::isfinite(su_[k])) {
        const double d = su_[k] - s[k];
        vu[k] = std::max(std::min(vu[k], kappa_sigma * mu / d), mu / (kappa_sigma * d));
      }
    }
    if (log && !log->empty()) {
      log->back().step = alpha;
      log->back().regularization = delta_w;
    }
  }
  update_sigma();
  double dual_inf, primal_inf, compl_err, sd, sc;
  residual_parts(0.0, dual_inf, primal_inf, compl_err, sd, sc);
  return finish(false, std::max({dual_inf / sd, primal_inf, compl_err / sc}));
}

}  // namespace h2margin
