#pragma once

// Sparse algebraic model: every row is a constant plus linear coefficients
// plus a few nonlinear terms, each touching at most four variables. Gives
// exact sparse Jacobians and Lagrangian Hessians through Jet<4>.
// Rows flagged `penalized` are not constraints; they enter the objective as
// weight * row^2 (used for the binary conditions).

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "h2margin/autodiff.hpp"
#include "h2margin/error.hpp"

namespace h2margin {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

enum class TermKind : std::uint8_t {
  polar_cos,        // p0 x0 x1 cos(x2 - x3 - p1)
  polar_sin,        // p0 x0 x1 sin(x2 - x3 - p1)
  square,           // p0 x0^2
  bilinear,         // p0 x0 x1
  square_bilinear,  // p0 x0^2 x1
  shifted_square,   // p0 (x0 + p1 x1^2)^2
  branch_flow,      // p4 (P^2 + Q^2) at one branch end, see below
};

/// Branch-flow term: with vars (Vf, Vt, th_f, th_t) and params
/// (gff, bff, gft, bft, scale),
///   P = gff Vf^2 + Vf Vt (gft cos d + bft sin d)
///   Q = -bff Vf^2 + Vf Vt (gft sin d - bft cos d),  d = th_f - th_t
struct Term {
  TermKind kind = TermKind::square;
  std::array<int, 4> var{-1, -1, -1, -1};
  std::array<double, 6> p{};

  int arity() const {
    switch (kind) {
      case TermKind::square: return 1;
      case TermKind::bilinear:
      case TermKind::square_bilinear:
      case TermKind::shifted_square: return 2;
      default: return 4;
    }
  }

  static Term polar_cos(double c, int a, int b, int ta, int tb, double shift) {
    return {TermKind::polar_cos, {a, b, ta, tb}, {c, shift}};
  }
  static Term polar_sin(double c, int a, int b, int ta, int tb, double shift) {
    return {TermKind::polar_sin, {a, b, ta, tb}, {c, shift}};
  }
  static Term sq(double c, int a) { return {TermKind::square, {a, -1, -1, -1}, {c}}; }
  static Term bilin(double c, int a, int b) { return {TermKind::bilinear, {a, b, -1, -1}, {c}}; }
  static Term sq_bilin(double c, int a, int b) { return {TermKind::square_bilinear, {a, b, -1, -1}, {c}}; }
  static Term shifted_sq(double c, int a, int b, double k) {
    return {TermKind::shifted_square, {a, b, -1, -1}, {c, k}};
  }
  static Term flow(int vf, int vt, int tf, int tt, double gff, double bff, double gft, double bft,
                   double scale) {
    return {TermKind::branch_flow, {vf, vt, tf, tt}, {gff, bff, gft, bft, scale}};
  }
};

template <class T>
T evaluate_term(const Term& t, const T* x) {
  using std::cos;
  using std::sin;
  switch (t.kind) {
    case TermKind::polar_cos: return t.p[0] * (x[0] * x[1] * cos(x[2] - x[3] - t.p[1]));
    case TermKind::polar_sin: return t.p[0] * (x[0] * x[1] * sin(x[2] - x[3] - t.p[1]));
    case TermKind::square: return t.p[0] * (x[0] * x[0]);
    case TermKind::bilinear: return t.p[0] * (x[0] * x[1]);
    case TermKind::square_bilinear: return t.p[0] * (x[0] * x[0] * x[1]);
    case TermKind::shifted_square: {
      T u = x[0] + t.p[1] * (x[1] * x[1]);
      return t.p[0] * (u * u);
    }
    case TermKind::branch_flow: {
      T d = x[2] - x[3];
      T c = cos(d), s = sin(d);
      T vv = x[0] * x[1];
      T vf2 = x[0] * x[0];
      T p = t.p[0] * vf2 + vv * (t.p[2] * c + t.p[3] * s);
      T q = -t.p[1] * vf2 + vv * (t.p[2] * s - t.p[3] * c);
      return t.p[4] * (p * p + q * q);
    }
  }
  return T(0.0);
}

/// Row classification for catalogs and censuses.
struct RowInfo {
  std::uint16_t family = 0;  // index into AlgebraicModel::families()
  std::int16_t hour = -1;    // -1: not hour-specific
  std::int8_t point = -1;    // -1: none, 0 / 1: operating point class
  std::int32_t element = -1; // bus, branch or unit index
};

struct Row {
  double constant = 0.0;
  std::vector<std::pair<int, double>> linear;
  std::vector<Term> terms;
  double lower = 0.0;
  double upper = 0.0;
  RowInfo info;
  bool penalized = false;

  Row& add(int var, double coef) {
    if (coef != 0.0) linear.emplace_back(var, coef);
    return *this;
  }
  Row& add(const Term& t) {
    terms.push_back(t);
    return *this;
  }
};

class AlgebraicModel {
 public:
  // -- building -------------------------------------------------------------

  int add_variable(double lower, double upper, double initial, std::uint16_t family = 0) {
    if (finalized_) throw Error("model already finalized");
    x_lower_.push_back(lower);
    x_upper_.push_back(upper);
    x_init_.push_back(initial);
    var_family_.push_back(family);
    return static_cast<int>(x_lower_.size()) - 1;
  }

  std::uint16_t family(const std::string& name) {
    auto it = std::find(families_.begin(), families_.end(), name);
    if (it != families_.end()) return static_cast<std::uint16_t>(it - families_.begin());
    families_.push_back(name);
    return static_cast<std::uint16_t>(families_.size() - 1);
  }

  Row& add_row(double lower, double upper, RowInfo info) {
    if (finalized_) throw Error("model already finalized");
    rows_.emplace_back();
    Row& r = rows_.back();
    r.lower = lower;
    r.upper = upper;
    r.info = info;
    return r;
  }

  Row& add_penalized_row(RowInfo info) {
    Row& r = add_row(0.0, 0.0, info);
    r.penalized = true;
    return r;
  }

  void set_objective_linear(int var, double coef) {
    objective_.resize(x_lower_.size(), 0.0);
    objective_[var] = coef;
  }

  void finalize();

  // -- data -----------------------------------------------------------------

  int num_variables() const { return static_cast<int>(x_lower_.size()); }
  int num_rows() const { return static_cast<int>(rows_.size()); }
  const std::vector<Row>& rows() const { return rows_; }
  const std::vector<std::string>& families() const { return families_; }
  const std::vector<std::uint16_t>& variable_families() const { return var_family_; }
  const std::vector<int>& constraint_rows() const { return con_rows_; }
  const std::vector<int>& penalized_rows() const { return pen_rows_; }

  std::vector<double>& x_lower() { return x_lower_; }
  std::vector<double>& x_upper() { return x_upper_; }
  const std::vector<double>& x_lower() const { return x_lower_; }
  const std::vector<double>& x_upper() const { return x_upper_; }
  const std::vector<double>& x_initial() const { return x_init_; }
  std::vector<double>& x_initial() { return x_init_; }

  /// Row bounds are mutable after finalize (the structure is not).
  void set_row_bounds(int row, double lower, double upper) {
    rows_[row].lower = lower;
    rows_[row].upper = upper;
  }

  double penalty_weight() const { return penalty_; }
  void set_penalty_weight(double rho) { penalty_ = rho; }

  /// Value of a single row.
  double row_value(int r, const Eigen::VectorXd& x) const {
    const Row& row = rows_[r];
    double v = row.constant;
    for (const auto& [j, c] : row.linear) v += c * x[j];
    for (const auto& t : row.terms) {
      double loc[4];
      for (int s = 0; s < t.arity(); ++s) loc[s] = x[t.var[s]];
      v += evaluate_term(t, loc);
    }
    return v;
  }

  // -- nonlinear-program interface (constraints = non-penalized rows) --------

  int n() const { return num_variables(); }
  int m() const { return static_cast<int>(con_rows_.size()); }

  Eigen::VectorXd lower_bounds() const { return Eigen::Map<const Eigen::VectorXd>(x_lower_.data(), n()); }
  Eigen::VectorXd upper_bounds() const { return Eigen::Map<const Eigen::VectorXd>(x_upper_.data(), n()); }
  Eigen::VectorXd constraint_lower() const {
    Eigen::VectorXd g(m());
    for (int i = 0; i < m(); ++i) g[i] = rows_[con_rows_[i]].lower;
    return g;
  }
  Eigen::VectorXd constraint_upper() const {
    Eigen::VectorXd g(m());
    for (int i = 0; i < m(); ++i) g[i] = rows_[con_rows_[i]].upper;
    return g;
  }
  Eigen::VectorXd initial_point() const { return Eigen::Map<const Eigen::VectorXd>(x_init_.data(), n()); }

  double eval_f(const Eigen::VectorXd& x) const {
    double f = 0.0;
    for (int j = 0; j < n(); ++j) f += objective_[j] * x[j];
    if (penalty_ != 0.0)
      for (int r : pen_rows_) f += penalty_ * square(row_value(r, x));
    return f;
  }

  /// Objective without the penalty contribution.
  double eval_linear_objective(const Eigen::VectorXd& x) const {
    double f = 0.0;
    for (int j = 0; j < n(); ++j) f += objective_[j] * x[j];
    return f;
  }

  void eval_grad_f(const Eigen::VectorXd& x, Eigen::VectorXd& g) const {
    g = Eigen::Map<const Eigen::VectorXd>(objective_.data(), n());
    if (penalty_ == 0.0) return;
    for (int r : pen_rows_) {
      const double v = row_value(r, x);
      const Row& row = rows_[r];
      for (const auto& [j, c] : row.linear) g[j] += 2.0 * penalty_ * v * c;
      for (const auto& t : row.terms) {
        Jet<4> loc[4];
        for (int s = 0; s < t.arity(); ++s) loc[s] = Jet<4>::variable(x[t.var[s]], s);
        auto j = evaluate_term(t, loc);
        for (int s = 0; s < t.arity(); ++s) g[t.var[s]] += 2.0 * penalty_ * v * j.g[s];
      }
    }
  }

  void eval_g(const Eigen::VectorXd& x, Eigen::VectorXd& g) const {
    g.resize(m());
    for (int i = 0; i < m(); ++i) g[i] = row_value(con_rows_[i], x);
  }

  const std::vector<int>& jac_rows() const { return jac_row_; }
  const std::vector<int>& jac_cols() const { return jac_col_; }
  const std::vector<int>& hess_rows() const { return hess_row_; }
  const std::vector<int>& hess_cols() const { return hess_col_; }

  void eval_jac(const Eigen::VectorXd& x, Eigen::VectorXd& vals) const {
    vals.setZero(static_cast<Eigen::Index>(jac_row_.size()));
    for (int i = 0; i < m(); ++i) {
      const Row& row = rows_[con_rows_[i]];
      const auto& lp = lin_pos_[con_rows_[i]];
      for (std::size_t k = 0; k < row.linear.size(); ++k) vals[lp[k]] += row.linear[k].second;
      const int t0 = term_offset_[con_rows_[i]];
      for (std::size_t k = 0; k < row.terms.size(); ++k) {
        const Term& t = row.terms[k];
        Jet<4> loc[4];
        for (int s = 0; s < t.arity(); ++s) loc[s] = Jet<4>::variable(x[t.var[s]], s);
        auto j = evaluate_term(t, loc);
        const auto& tp = term_jac_pos_[t0 + k];
        for (int s = 0; s < t.arity(); ++s) vals[tp[s]] += j.g[s];
      }
    }
  }

  /// Lower triangle of obj_factor * Hess(f) + sum_i y_i Hess(g_i).
  void eval_hess(const Eigen::VectorXd& x, double obj_factor, const Eigen::VectorXd& y,
                 Eigen::VectorXd& vals) const {
    vals.setZero(static_cast<Eigen::Index>(hess_row_.size()));
    auto add_terms = [&](int r, double w) {
      const Row& row = rows_[r];
      const int t0 = term_offset_[r];
      for (std::size_t k = 0; k < row.terms.size(); ++k) {
        const Term& t = row.terms[k];
        Jet<4> loc[4];
        for (int s = 0; s < t.arity(); ++s) loc[s] = Jet<4>::variable(x[t.var[s]], s);
        auto j = evaluate_term(t, loc);
        const auto& hp = term_hess_pos_[t0 + k];
        for (int a = 0; a < t.arity(); ++a)
          for (int b = 0; b < t.arity(); ++b)
            if (hp[a * 4 + b] >= 0) vals[hp[a * 4 + b]] += w * j.h[a * 4 + b];
      }
    };
    for (int i = 0; i < m(); ++i)
      if (y[i] != 0.0) add_terms(con_rows_[i], y[i]);
    if (penalty_ != 0.0 && obj_factor != 0.0) {
      for (std::size_t p = 0; p < pen_rows_.size(); ++p) {
        const int r = pen_rows_[p];
        const double v = row_value(r, x);
        const double w = 2.0 * penalty_ * obj_factor;
        add_terms(r, w * v);
        // Gauss-Newton part 2 rho grad grad^T
        std::vector<std::pair<int, double>> grad;
        row_gradient(r, x, grad);
        for (const auto& [a, ga] : grad)
          for (const auto& [b, gb] : grad)
            if (a >= b) vals[pen_pair_pos_.at(key(a, b))] += w * ga * gb;
      }
    }
  }

  /// Sparse gradient of one row (duplicates merged).
  void row_gradient(int r, const Eigen::VectorXd& x, std::vector<std::pair<int, double>>& out) const {
    out.clear();
    const Row& row = rows_[r];
    auto put = [&out](int j, double v) {
      for (auto& e : out)
        if (e.first == j) {
          e.second += v;
          return;
        }
      out.emplace_back(j, v);
    };
    for (const auto& [j, c] : row.linear) put(j, c);
    for (const auto& t : row.terms) {
      Jet<4> loc[4];
      for (int s = 0; s < t.arity(); ++s) loc[s] = Jet<4>::variable(x[t.var[s]], s);
      auto jj = evaluate_term(t, loc);
      for (int s = 0; s < t.arity(); ++s) put(t.var[s], jj.g[s]);
    }
  }

  bool finalized() const { return finalized_; }

 private:
  static std::int64_t key(int a, int b) { return (static_cast<std::int64_t>(a) << 32) | static_cast<std::uint32_t>(b); }

  bool finalized_ = false;
  std::vector<double> x_lower_, x_upper_, x_init_;
  std::vector<std::uint16_t> var_family_;
  std::vector<std::string> families_;
  std::vector<Row> rows_;
  std::vector<double> objective_;
  double penalty_ = 0.0;

  std::vector<int> con_rows_, pen_rows_;
  std::vector<int> jac_row_, jac_col_, hess_row_, hess_col_;
  std::vector<std::vector<int>> lin_pos_;  // per row: jacobian position of each linear entry
  std::vector<int> term_offset_;           // per row: first index into term arrays
  std::vector<std::array<int, 4>> term_jac_pos_;
  std::vector<std::array<int, 16>> term_hess_pos_;
  std::unordered_map<std::int64_t, int> pen_pair_pos_;
};

inline void AlgebraicModel::finalize() {
  if (finalized_) return;
  objective_.resize(x_lower_.size(), 0.0);
  const int nvar = num_variables();
  for (int r = 0; r < num_rows(); ++r) {
    const Row& row = rows_[r];
    for (const auto& [j, c] : row.linear)
      if (j < 0 || j >= nvar) throw Error("row references an unknown variable");
    for (const auto& t : row.terms)
      for (int s = 0; s < t.arity(); ++s)
        if (t.var[s] < 0 || t.var[s] >= nvar) throw Error("term references an unknown variable");
    (row.penalized ? pen_rows_ : con_rows_).push_back(r);
  }

  // jacobian pattern, constraint rows in order
  lin_pos_.assign(rows_.size(), {});
  term_offset_.assign(rows_.size(), 0);
  std::size_t nterms = 0;
  for (int r = 0; r < num_rows(); ++r) {
    term_offset_[r] = static_cast<int>(nterms);
    nterms += rows_[r].terms.size();
  }
  term_jac_pos_.assign(nterms, {-1, -1, -1, -1});
  term_hess_pos_.assign(nterms, {});
  for (auto& a : term_hess_pos_) a.fill(-1);

  for (int i = 0; i < m(); ++i) {
    const int r = con_rows_[i];
    const Row& row = rows_[r];
    std::vector<std::pair<int, int>> seen;  // var -> position
    auto pos_of = [&](int j) {
      for (const auto& e : seen)
        if (e.first == j) return e.second;
      jac_row_.push_back(i);
      jac_col_.push_back(j);
      seen.emplace_back(j, static_cast<int>(jac_row_.size()) - 1);
      return seen.back().second;
    };
    for (const auto& [j, c] : row.linear) lin_pos_[r].push_back(pos_of(j));
    for (std::size_t k = 0; k < row.terms.size(); ++k) {
      const Term& t = row.terms[k];
      for (int s = 0; s < t.arity(); ++s) term_jac_pos_[term_offset_[r] + k][s] = pos_of(t.var[s]);
    }
  }

  // hessian pattern: lower triangle over all term slot pairs
  std::unordered_map<std::int64_t, int> hpos;
  auto hess_pos = [&](int a, int b) {
    auto [it, inserted] = hpos.try_emplace(key(a, b), static_cast<int>(hess_row_.size()));
    if (inserted) {
      hess_row_.push_back(a);
      hess_col_.push_back(b);
    }
    return it->second;
  };
  for (int r = 0; r < num_rows(); ++r) {
    const Row& row = rows_[r];
    for (std::size_t k = 0; k < row.terms.size(); ++k) {
      const Term& t = row.terms[k];
      auto& hp = term_hess_pos_[term_offset_[r] + k];
      for (int a = 0; a < t.arity(); ++a)
        for (int b = 0; b < t.arity(); ++b) {
          const int va = t.var[a], vb = t.var[b];
          if (va < vb) continue;
          // skip structurally zero second derivatives
          if (t.kind == TermKind::bilinear && a == b) continue;
          if (t.kind == TermKind::square_bilinear && a == 1 && b == 1) continue;
          hp[a * 4 + b] = hess_pos(va, vb);
        }
    }
    if (row.penalized) {
      std::vector<int> vars;
      for (const auto& [j, c] : row.linear) vars.push_back(j);
      for (const auto& t : row.terms)
        for (int s = 0; s < t.arity(); ++s) vars.push_back(t.var[s]);
      std::sort(vars.begin(), vars.end());
      vars.erase(std::unique(vars.begin(), vars.end()), vars.end());
      for (int a : vars)
        for (int b : vars)
          if (a >= b) pen_pair_pos_[key(a, b)] = hess_pos(a, b);
    }
  }
  finalized_ = true;
}

}  // namespace h2margin
