#pragma once

// Instrumental variables, variance components and linear restriction tests
// expressed as quadratic-form targets.

#include "cqf/variance.hpp"

#include <map>

namespace cqf {

// ---------------------------------------------------------------------------
// Variance as a function of the null value.
//
// With Y(b) = Yc - b X, every L3CO term and the L2CO sum are quadratic in b
// and theta_LO(b) is linear, so one kernel pass over {Yc, Yc - X, Yc + X}
// determines them for every b exactly.

class NullValueCurve {
 public:
  NullValueCurve(const LeaveOutOperator& op, const Vector& X, const Vector& Yc) {
    VarianceKernel kernel(op, X, {Yc, Yc - X, Yc + X});
    const auto l3 = kernel.l3co();
    const auto l2 = kernel.l2co();
    for (std::size_t t = 0; t < 5; ++t) terms_[t] = fit(l3[0].terms[t], l3[1].terms[t], l3[2].terms[t]);
    l2co_ = fit(l2[0], l2[1], l2[2]);
    xby_ = op.theta_leaveout(X, Yc);
    xbx_ = op.theta_leaveout(X, X);
    regularized_ = kernel.regularized_count();
    G_ = op.workspace().G();
  }

  double theta(double b) const { return xby_ - b * xbx_; }
  double xbx() const { return xbx_; }
  double xby() const { return xby_; }
  long regularized_count() const { return regularized_; }
  Index clusters() const { return G_; }

  L3coComponents l3co(double b) const {
    L3coComponents c;
    for (std::size_t t = 0; t < 5; ++t) c.terms[t] = eval(terms_[t], b);
    return c;
  }
  double l2co(double b) const { return std::max(0.0, eval(l2co_, b)); }

  SelectedVariance variance(VarianceMethod m, double b) const {
    const auto c = l3co(b);
    return select_variance(m, &c, l2co(b));
  }

 private:
  using Quad = std::array<double, 3>;  // c0 + c1 b + c2 b^2
  // values at b = 0, 1, -1
  static Quad fit(double f0, double fp, double fm) { return {f0, 0.5 * (fp - fm), 0.5 * (fp + fm) - f0}; }
  static double eval(const Quad& q, double b) { return q[0] + b * (q[1] + b * q[2]); }

  std::array<Quad, 5> terms_{};
  Quad l2co_{};
  double xby_ = 0.0, xbx_ = 0.0;
  long regularized_ = 0;
  Index G_ = 0;
};

// ---------------------------------------------------------------------------
// Instrumental variables

struct IVProblem {
  Vector outcome;                 // script Y
  Vector treatment;               // X
  Matrix instruments;             // Z, n x d_z
  Matrix controls;                // script W, n x d_w
  std::vector<Index> cluster_sizes;
};

// W = [controls, instruments]; A0 = W' P_Ztilde W = blockdiag(0, Ztilde'Ztilde)
// with Ztilde = M_controls Z, stored as L L' with L = [0; chol(Ztilde'Ztilde)].
inline QuadFormTarget iv_target(const Matrix& controls, const Matrix& instruments,
                                double rank_tolerance = 1e-12) {
  const Index dw = controls.cols(), dz = instruments.cols();
  if (dz < 1) throw ValidationError("iv: at least one instrument is required");
  Matrix Zt = instruments;
  if (dw > 0) {
    Eigen::ColPivHouseholderQR<Matrix> qr(controls);
    Zt = instruments - controls * qr.solve(instruments);
  }
  Matrix ZtZ = Zt.transpose() * Zt;
  ZtZ = 0.5 * (ZtZ + ZtZ.transpose());
  const double scale = instruments.colwise().squaredNorm().maxCoeff();
  const auto [lo, hi] = symmetric_extreme_eigenvalues(ZtZ);
  if (!(hi > 0.0) || lo < rank_tolerance * std::max(hi, scale))
    throw RankDeficient("iv: instruments are collinear with the controls (Ztilde'Ztilde is singular)");
  Eigen::LLT<Matrix> llt(ZtZ);
  Matrix L = Matrix::Zero(dw + dz, dz);
  L.bottomRows(dz) = llt.matrixL();
  return QuadFormTarget::symmetric_factor(std::move(L));
}

inline ClusteredDesign iv_design(const IVProblem& p) {
  const Index n = p.outcome.size();
  if (p.treatment.size() != n || p.instruments.rows() != n ||
      (p.controls.cols() > 0 && p.controls.rows() != n))
    throw ValidationError("iv: inconsistent row counts");
  Matrix W(n, p.controls.cols() + p.instruments.cols());
  if (p.controls.cols() > 0) W.leftCols(p.controls.cols()) = p.controls;
  W.rightCols(p.instruments.cols()) = p.instruments;
  return ClusteredDesign(std::move(W), p.outcome, p.treatment, p.cluster_sizes);
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool open_below = false;  // touches the lower grid edge
  bool open_above = false;
};

struct ConfidenceSet {
  std::vector<Interval> intervals;
  std::vector<double> grid;
  std::vector<std::string> warnings;
};

struct IVWald {
  double beta_hat = 0.0;
  TestResult test;
  bool weak_identification = false;
  std::vector<std::string> warnings;
};

// Frozen workspace for one IV problem; tests at any beta0 reuse one variance pass.
class IVAnalysis {
 public:
  explicit IVAnalysis(const IVProblem& p, NumericOptions options = {})
      : ws_(iv_design(p), options),
        target_(iv_target(p.controls, p.instruments, options.rank_tolerance)),
        op_(ws_, target_),
        curve_(op_, ws_.design().X(), ws_.design().Y()) {
    if (ws_.G() == 2) warnings_.push_back(detail::cluster_count_warnings(2).front());
  }
  IVAnalysis(const IVAnalysis&) = delete;
  IVAnalysis& operator=(const IVAnalysis&) = delete;

  const ProjectionWorkspace& workspace() const { return ws_; }
  const LeaveOutOperator& op() const { return op_; }
  const NullValueCurve& curve() const { return curve_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  // LM test of theta(beta0) = 0 with Y = script Y - beta0 X.
  struct LM {
    TestResult test;
    bool fell_back = false;
  };
  LM lm_test(double beta0, double alpha, VarianceMethod method) const {
    const auto v = curve_.variance(method, beta0);
    return {t_test(curve_.theta(beta0), v.value, 0.0, alpha), v.fell_back};
  }

  // beta_hat = X'B scriptY / X'BX, variance evaluated at Y = scriptY - beta_hat X.
  IVWald wald(double beta0, double alpha, VarianceMethod method) const {
    const double xbx = curve_.xbx();
    if (xbx == 0.0) throw NumericalError("iv: X'BX is zero, the leave-out IV estimator is undefined");
    IVWald w;
    w.beta_hat = curve_.xby() / xbx;
    const auto v = curve_.variance(method, w.beta_hat);
    const double se2 = std::max(v.value, 0.0) / (xbx * xbx);
    w.test = t_test(w.beta_hat, se2, beta0, alpha);
    if (v.fell_back) w.warnings.push_back("L3CO variance was not positive; used the nonnegative variant");
    // Heuristic weak-identification check on X'BX using L2CO with Y = X.
    VarianceKernel kx(op_, ws_.design().X(), {ws_.design().X()});
    const double sd = std::sqrt(std::max(kx.l2co().front(), 0.0));
    if (std::abs(xbx) < 2.0 * sd) {
      w.weak_identification = true;
      w.warnings.push_back("weak identification: |X'BX| is below twice its estimated standard error");
    }
    return w;
  }

  // Beta values on the grid that the LM test does not reject, merged into intervals.
  ConfidenceSet confidence_set(const std::vector<double>& grid, double alpha,
                               VarianceMethod method) const {
    ConfidenceSet cs;
    cs.grid = grid;
    if (grid.empty()) return cs;
    for (std::size_t i = 1; i < grid.size(); ++i)
      if (!(grid[i] > grid[i - 1])) throw ValidationError("confidence set grid must be increasing");
    std::vector<char> keep(grid.size());
    parallel_for(static_cast<Index>(grid.size()), ws_.options().threads, [&](Index i) {
      keep[static_cast<std::size_t>(i)] = !lm_test(grid[static_cast<std::size_t>(i)], alpha, method).test.reject;
    });
    for (std::size_t i = 0; i < grid.size();) {
      if (!keep[i]) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j + 1 < grid.size() && keep[j + 1]) ++j;
      Interval iv{grid[i], grid[j], i == 0, j + 1 == grid.size()};
      if (iv.open_below || iv.open_above)
        cs.warnings.push_back("confidence set reaches the grid edge; it may be unbounded");
      cs.intervals.push_back(iv);
      i = j + 1;
    }
    return cs;
  }

  // beta_hat +- 10 Wald standard errors, 401 points.
  std::vector<double> default_grid(double alpha, VarianceMethod method) const {
    const auto w = wald(0.0, alpha, method);
    double se = w.test.omega_hat;
    if (!(se > 0.0) || !std::isfinite(se)) se = 1.0;
    std::vector<double> g(401);
    for (int i = 0; i < 401; ++i) g[static_cast<std::size_t>(i)] = w.beta_hat - 10.0 * se + 0.05 * se * i;
    return g;
  }

 private:
  ProjectionWorkspace ws_;
  QuadFormTarget target_;
  LeaveOutOperator op_;
  NullValueCurve curve_;
  std::vector<std::string> warnings_;
};

inline TestResult iv_lm_test(const IVProblem& p, double beta0, double alpha, VarianceMethod method,
                             NumericOptions options = {}) {
  return IVAnalysis(p, options).lm_test(beta0, alpha, method).test;
}

// ---------------------------------------------------------------------------
// Variance components in a two-way fixed-effects model

struct MatchStructure {
  std::vector<std::string> worker;  // per observation
  std::vector<std::string> firm;
  std::vector<std::string> match;   // cluster id
  Matrix controls;                  // n x p time-varying controls (may have 0 columns)
  Vector outcome;
};

struct VarcompModel {
  ClusteredDesign design;        // Y = X = outcome, W = [F, D, controls]
  std::vector<Index> row_order;  // original row of each design row
  Index firm_columns = 0;        // J - 1
  Index worker_columns = 0;      // L
  std::vector<std::string> firms, workers;
  std::map<std::string, QuadFormTarget> targets;  // "psi", "alpha", "cov"
};

namespace detail {

inline std::vector<Index> encode(const std::vector<std::string>& labels, std::vector<std::string>& levels) {
  std::map<std::string, Index> idx;
  std::vector<Index> out;
  out.reserve(labels.size());
  for (const auto& l : labels) {
    auto [it, inserted] = idx.emplace(l, static_cast<Index>(levels.size()));
    if (inserted) levels.push_back(l);
    out.push_back(it->second);
  }
  return out;
}

}  // namespace detail

// F drops the last firm (in order of first appearance); D keeps every worker.
inline VarcompModel varcomp_model(const MatchStructure& s) {
  const Index n = s.outcome.size();
  if (static_cast<Index>(s.worker.size()) != n || static_cast<Index>(s.firm.size()) != n ||
      static_cast<Index>(s.match.size()) != n || (s.controls.cols() > 0 && s.controls.rows() != n))
    throw ValidationError("varcomp: inconsistent row counts");
  VarcompModel m;
  const auto wid = detail::encode(s.worker, m.workers);
  const auto fid = detail::encode(s.firm, m.firms);
  std::map<std::string, std::pair<Index, Index>> match_pair;
  for (Index i = 0; i < n; ++i) {
    auto [it, inserted] = match_pair.emplace(s.match[i], std::make_pair(wid[i], fid[i]));
    if (!inserted && it->second != std::make_pair(wid[i], fid[i]))
      throw ValidationError("varcomp: match '" + s.match[i] + "' mixes workers or firms");
  }
  const Index J1 = static_cast<Index>(m.firms.size()) - 1;
  const Index L = static_cast<Index>(m.workers.size());
  const Index p = s.controls.cols();
  m.firm_columns = J1;
  m.worker_columns = L;
  Matrix W = Matrix::Zero(n, J1 + L + p);
  for (Index i = 0; i < n; ++i) {
    if (fid[i] < J1) W(i, fid[i]) = 1.0;
    W(i, J1 + wid[i]) = 1.0;
  }
  if (p > 0) W.rightCols(p) = s.controls;

  m.design = group_rows(W, s.outcome, s.outcome, s.match, &m.row_order);
  const Matrix& Wd = m.design.W();
  const double nn = static_cast<double>(n);
  const Index d = Wd.cols();

  auto centered = [&](Index off, Index cols) {
    Matrix C = Wd.middleCols(off, cols);
    C.rowwise() -= C.colwise().mean();
    return C;
  };
  auto gram_factor = [&](const Matrix& C, Index off) {
    Matrix K = C.transpose() * C / nn;
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (K + K.transpose()));
    Matrix L = Matrix::Zero(d, C.cols());
    L.middleRows(off, C.cols()) = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    return QuadFormTarget::symmetric_factor(std::move(L));
  };
  const Matrix Fc = centered(0, J1);
  const Matrix Dc = centered(J1, L);
  m.targets["psi"] = J1 > 0 ? gram_factor(Fc, 0) : QuadFormTarget::dense(Matrix::Zero(d, d));
  m.targets["alpha"] = gram_factor(Dc, J1);
  if (J1 > 0) {
    // (1/2n) [0, Fc'Dc; Dc'Fc, 0] = Lf Rf' with Lf = [E_F K, E_D K'], Rf = [E_D, E_F]
    const Matrix K = Fc.transpose() * Dc / (2.0 * nn);
    Matrix Lf = Matrix::Zero(d, L + J1), Rf = Matrix::Zero(d, L + J1);
    Lf.block(0, 0, J1, L) = K;
    Lf.block(J1, L, L, J1) = K.transpose();
    Rf.block(J1, 0, L, L).setIdentity();
    Rf.block(0, L, J1, J1).setIdentity();
    m.targets["cov"] = QuadFormTarget::factored(std::move(Lf), std::move(Rf));
  } else {
    m.targets["cov"] = QuadFormTarget::dense(Matrix::Zero(d, d));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Linear restrictions R gamma = q

struct RestrictionTarget {
  QuadFormTarget target;  // R' (R S^{-1} R')^{-1} R
  double theta0 = 0.0;    // q' (R S^{-1} R')^{-1} q
};

inline RestrictionTarget restriction_target(const ProjectionWorkspace& ws, const Matrix& R, const Vector& q) {
  if (R.cols() != ws.d()) throw ValidationError("restriction: R must have one column per regressor");
  if (q.size() != R.rows()) throw ValidationError("restriction: q must have one entry per row of R");
  Matrix V = R * ws.gram().solve(Matrix(R.transpose()));
  V = 0.5 * (V + V.transpose());
  const auto [lo, hi] = symmetric_extreme_eigenvalues(V);
  if (!(hi > 0.0) || lo < 1e-12 * hi) throw RankDeficient("restriction: R (W'W)^{-1} R' is singular");
  // V = C C', V^{-1} = C^{-T} C^{-1}
  Eigen::LLT<Matrix> llt(V);
  const Matrix Cinv_R = llt.matrixL().solve(R);  // C^{-1} R
  RestrictionTarget out;
  out.target = QuadFormTarget::symmetric_factor(Cinv_R.transpose());
  out.theta0 = llt.matrixL().solve(q).squaredNorm();
  return out;
}

}  // namespace cqf
