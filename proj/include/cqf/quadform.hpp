#pragma once

// Point estimation of theta = pi' A0 gamma.
//
// For A = W (W'W)^{-1} A0 (W'W)^{-1} W', the leave-cluster-out estimator is
// X' B Y with B = A - M Bdiag(M_gg^{-1} A_gg); its diagonal blocks vanish.

#include "cqf/projection.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>
#include <unsupported/Eigen/KroneckerProduct>

#include <optional>

namespace cqf {

// A0 either as a dense d x d matrix or as L R' with L, R of size d x r.
class QuadFormTarget {
 public:
  QuadFormTarget() = default;

  static QuadFormTarget dense(Matrix A0) {
    if (A0.rows() != A0.cols()) throw ValidationError("A0 must be square");
    QuadFormTarget t;
    t.symmetric_ = (A0 - A0.transpose()).norm() <= 1e-12 * std::max(1.0, A0.norm());
    t.left_ = std::move(A0);
    t.factored_ = false;
    return t;
  }

  static QuadFormTarget factored(Matrix L, Matrix R) {
    if (L.rows() != R.rows() || L.cols() != R.cols())
      throw ValidationError("factored A0: L and R must have equal shapes");
    QuadFormTarget t;
    t.symmetric_ = (L - R).norm() == 0.0;
    t.left_ = std::move(L);
    t.right_ = std::move(R);
    t.factored_ = true;
    return t;
  }

  static QuadFormTarget symmetric_factor(Matrix L) {
    Matrix R = L;
    return factored(std::move(L), std::move(R));
  }

  Index dim() const { return left_.rows(); }
  bool is_factored() const { return factored_; }
  bool symmetric() const { return symmetric_; }
  const Matrix& left() const { return left_; }
  const Matrix& right() const { return right_; }

  Matrix dense_matrix() const { return factored_ ? Matrix(left_ * right_.transpose()) : left_; }

  QuadFormTarget scaled(double c) const {
    QuadFormTarget t = *this;
    t.left_ *= c;
    if (c < 0.0 && factored_) t.symmetric_ = false;
    return t;
  }

  // pi' A0 gamma
  double evaluate(const Vector& pi, const Vector& gamma) const {
    if (factored_) return (left_.transpose() * pi).dot(right_.transpose() * gamma);
    return pi.dot(left_ * gamma);
  }

  // Returns (F, G) with (W'W)^{-1}-sandwich  L^{-1} A0 L^{-T} = F G'.
  std::pair<Matrix, Matrix> whitened_factors(const GramFactor& gram) const {
    const auto Lc = gram.llt.matrixL();
    if (factored_) return {Lc.solve(left_), Lc.solve(right_)};
    const Index d = left_.rows();
    return {Lc.solve(left_), Lc.solve(Matrix::Identity(d, d))};
  }

 private:
  Matrix left_, right_;
  bool factored_ = false;
  bool symmetric_ = false;
};

// The matrices A, D and B of the leave-out estimator for one (workspace,
// target) pair. Dense n x n copies of A and B are kept when the workspace
// caches P; otherwise blocks are formed on demand.
class LeaveOutOperator {
 public:
  LeaveOutOperator(const ProjectionWorkspace& ws, const QuadFormTarget& target)
      : ws_(&ws), target_(target) {
    if (target.dim() != ws.d()) throw ValidationError("A0 dimension does not match the regressors");
    auto [F, Gm] = target.whitened_factors(ws.gram());
    QL_ = ws.Q() * F;
    QR_ = ws.Q() * Gm;
    const Index G = ws.G();
    D_.resize(static_cast<std::size_t>(G));
    regularized_.assign(static_cast<std::size_t>(G), false);
    for (Index g = 0; g < G; ++g) {
      auto sol = ws.solve_guarded(ws.M(g, g), A(g, g));
      D_[static_cast<std::size_t>(g)] = std::move(sol.x);
      regularized_[static_cast<std::size_t>(g)] = sol.regularized;
    }
    dense_ = ws.dense_cached() &&
             2.0 * static_cast<double>(ws.n()) * ws.n() * sizeof(double) <=
                 static_cast<double>(ws.options().cache_budget_bytes);
    if (dense_) {
      A_ = QL_ * QR_.transpose();
      B_ = A_;
      const Matrix& P = ws.P_dense();
      for (Index g = 0; g < G; ++g) {
        const Index og = ws.offset(g), ng = ws.size(g);
        const Matrix& Dg = D_[static_cast<std::size_t>(g)];
        // B(:, g) = A(:, g) - M(:, g) D_g,  M(:, g) = E_g - P(:, g)
        B_.middleCols(og, ng).noalias() += P.middleCols(og, ng) * Dg;
        B_.block(og, og, ng, ng).setZero();
      }
    }
  }

  const ProjectionWorkspace& workspace() const { return *ws_; }
  const QuadFormTarget& target() const { return target_; }
  bool dense_cached() const { return dense_; }
  const Matrix& A_dense() const { return A_; }
  const Matrix& B_dense() const { return B_; }
  bool any_regularized() const {
    return std::any_of(regularized_.begin(), regularized_.end(), [](bool b) { return b; });
  }

  Matrix A(Index g, Index h) const {
    if (dense_) return A_.block(ws_->offset(g), ws_->offset(h), ws_->size(g), ws_->size(h));
    return QL_.middleRows(ws_->offset(g), ws_->size(g)) *
           QR_.middleRows(ws_->offset(h), ws_->size(h)).transpose();
  }

  const Matrix& D(Index g) const { return D_[static_cast<std::size_t>(g)]; }

  Matrix B(Index g, Index h) const {
    if (g == h) return Matrix::Zero(ws_->size(g), ws_->size(h));
    if (dense_) return B_.block(ws_->offset(g), ws_->offset(h), ws_->size(g), ws_->size(h));
    return A(g, h) - ws_->M(g, h) * D(h);
  }

  Matrix B_full() const {
    if (dense_) return B_;
    const Index n = ws_->n();
    Matrix out(n, n);
    for (Index g = 0; g < ws_->G(); ++g)
      for (Index h = 0; h < ws_->G(); ++h)
        out.block(ws_->offset(g), ws_->offset(h), ws_->size(g), ws_->size(h)) = B(g, h);
    return out;
  }

  // X' A Y = pihat' A0 gammahat
  double theta_plugin(const Vector& X, const Vector& Y) const {
    return (QL_.transpose() * X).dot(QR_.transpose() * Y);
  }

  // X' B Y computed as the plug-in minus the per-cluster correction
  // sum_g (MX)_g' M_gg^{-1} A_gg Y_g, reduced pairwise in cluster order.
  double theta_leaveout(const Vector& X, const Vector& Y) const {
    const Vector MX = ws_->annihilate(X);
    std::vector<double> corr(static_cast<std::size_t>(ws_->G()));
    for (Index g = 0; g < ws_->G(); ++g) {
      const Index og = ws_->offset(g), ng = ws_->size(g);
      corr[static_cast<std::size_t>(g)] = MX.segment(og, ng).dot(D(g) * Y.segment(og, ng));
    }
    return theta_plugin(X, Y) - pairwise_sum(corr);
  }

 private:
  const ProjectionWorkspace* ws_;
  QuadFormTarget target_;
  Matrix QL_, QR_;
  std::vector<Matrix> D_;
  std::vector<bool> regularized_;
  bool dense_ = false;
  Matrix A_, B_;
};

// ---------------------------------------------------------------------------

inline double theta_plugin(const ProjectionWorkspace& ws, const QuadFormTarget& A0) {
  const Vector pi = ws.coefficients(ws.design().X());
  const Vector gamma = ws.coefficients(ws.design().Y());
  return A0.evaluate(pi, gamma);
}

struct LeaveOutEstimate {
  double theta = 0.0;
  double theta_plugin = 0.0;
  bool approximate = false;  // a ridge guard fired on some M_gg
};

inline LeaveOutEstimate theta_leaveout(const ProjectionWorkspace& ws, const QuadFormTarget& A0) {
  LeaveOutOperator op(ws, A0);
  LeaveOutEstimate e;
  e.theta_plugin = op.theta_plugin(ws.design().X(), ws.design().Y());
  e.theta = op.theta_leaveout(ws.design().X(), ws.design().Y());
  e.approximate = op.any_regularized();
  return e;
}

// OLS coefficients on the sample with the clusters in `dropped` removed,
// computed from the reduced Gram matrix. Reference path.
struct LeaveOutCoefficients {
  Vector gamma;
  Vector pi;
};

inline LeaveOutCoefficients leaveout_coeffs(const ProjectionWorkspace& ws,
                                            std::span<const Index> dropped,
                                            const Vector& Y, const Vector& X) {
  const auto& des = ws.design();
  const auto set = cluster_set(dropped);
  if (static_cast<Index>(set.size()) >= ws.G())
    throw RankDeficient("leaveout_coeffs: no clusters left in the estimation sample");
  Matrix S = ws.gram().S;
  Vector wy = des.W().transpose() * Y;
  Vector wx = des.W().transpose() * X;
  for (Index l : set) {
    ws.check_cluster(l);
    const auto Wl = des.W(l);
    S.noalias() -= Wl.transpose() * Wl;
    wy.noalias() -= Wl.transpose() * Y.segment(des.offset(l), des.size(l));
    wx.noalias() -= Wl.transpose() * X.segment(des.offset(l), des.size(l));
  }
  S = 0.5 * (S + S.transpose());
  const auto [lo, hi] = symmetric_extreme_eigenvalues(S);
  if (!(hi > 0.0) || lo < ws.options().rank_tolerance * hi)
    throw RankDeficient("leaveout_coeffs: reduced Gram matrix is rank deficient");
  Eigen::LDLT<Matrix> ldlt(S);
  return {ldlt.solve(wy), ldlt.solve(wx)};
}

inline LeaveOutCoefficients leaveout_coeffs(const ProjectionWorkspace& ws,
                                            std::span<const Index> dropped) {
  return leaveout_coeffs(ws, dropped, ws.design().Y(), ws.design().X());
}

// Residuals of cluster g from the fit that leaves out every cluster in S.
struct LeaveOutResiduals {
  Vector y;
  Vector x;
  bool regularized = false;
};

inline LeaveOutResiduals leaveout_residuals(const ProjectionWorkspace& ws, Index g,
                                            std::span<const Index> S, const Vector& MY,
                                            const Vector& MX) {
  std::vector<Index> set{g};
  for (Index l : S) {
    ws.check_cluster(l);
    if (std::find(set.begin(), set.end(), l) == set.end()) set.push_back(l);
  }
  Matrix rhs(ws.set_size(set), 2);
  rhs.col(0) = ws.gather(MY, set);
  rhs.col(1) = ws.gather(MX, set);
  auto sol = ws.solve_guarded(ws.M_set(set), rhs);
  const Index ng = ws.size(g);
  return {sol.x.col(0).head(ng), sol.x.col(1).head(ng), sol.regularized};
}

inline LeaveOutResiduals leaveout_residuals(const ProjectionWorkspace& ws, Index g,
                                            std::span<const Index> S) {
  return leaveout_residuals(ws, g, S, ws.MY(), ws.MX());
}

// ---------------------------------------------------------------------------
// Minimum-norm bias corrections

struct BiasCorrection {
  Matrix C;  // n x n
  double trace_CtC = 0.0;
  double condition = 1.0;  // KR system condition estimate (1 for C_LO)
};

inline constexpr Index kDenseCorrectionLimit = 4000;

// C_LO = M Bdiag(M_gg^{-1} A_gg)
inline BiasCorrection bias_correction_LO(const ProjectionWorkspace& ws, const QuadFormTarget& A0) {
  if (ws.n() > kDenseCorrectionLimit) throw TooLarge("bias_correction_LO: n too large to materialize");
  LeaveOutOperator op(ws, A0);
  const Index n = ws.n();
  BiasCorrection out;
  out.C = Matrix::Zero(n, n);
  Matrix M = -(ws.Q() * ws.Q().transpose());
  M.diagonal().array() += 1.0;
  for (Index g = 0; g < ws.G(); ++g)
    out.C.middleCols(ws.offset(g), ws.size(g)) = M.middleCols(ws.offset(g), ws.size(g)) * op.D(g);
  out.trace_CtC = out.C.squaredNorm();
  return out;
}

struct KrOptions {
  Index max_system_dim = 2000;  // sum_g n_g^2
  double max_condition = 1e12;
};

// C_KR = M Bdiag(Lambda) M with bvec(A) = (M * M) bvec(Lambda).
inline BiasCorrection bias_correction_KR(const ProjectionWorkspace& ws, const QuadFormTarget& A0,
                                         const KrOptions& opt = {}) {
  const Index G = ws.G();
  std::vector<Index> voff(static_cast<std::size_t>(G) + 1, 0);
  for (Index g = 0; g < G; ++g) voff[g + 1] = voff[g] + ws.size(g) * ws.size(g);
  const Index N = voff.back();
  if (N > opt.max_system_dim || ws.n() > kDenseCorrectionLimit)
    throw TooLarge("bias_correction_KR: Khatri-Rao system of dimension " + std::to_string(N) +
                   " exceeds the configured limit");
  LeaveOutOperator op(ws, A0);
  Matrix K(N, N);
  Vector rhs(N);
  for (Index g = 0; g < G; ++g) {
    const Matrix Agg = op.A(g, g);
    rhs.segment(voff[g], Agg.size()) = Eigen::Map<const Vector>(Agg.data(), Agg.size());
    for (Index h = 0; h < G; ++h) {
      const Matrix Mgh = ws.M(g, h);
      K.block(voff[g], voff[h], Mgh.size(), Mgh.size()) = Eigen::kroneckerProduct(Mgh, Mgh);
    }
  }
  Eigen::PartialPivLU<Matrix> lu(K);
  const double rcond = lu.rcond();
  BiasCorrection out;
  out.condition = rcond > 0.0 ? 1.0 / rcond : std::numeric_limits<double>::infinity();
  if (!(rcond > 0.0) || out.condition > opt.max_condition || !std::isfinite(out.condition))
    throw DoesNotExist("C_KR does not exist: the Khatri-Rao system is numerically singular "
                       "(condition estimate " + std::to_string(out.condition) + ")");
  const Vector lam = lu.solve(rhs);
  const Index n = ws.n();
  Matrix Mfull = -(ws.Q() * ws.Q().transpose());
  Mfull.diagonal().array() += 1.0;
  Matrix BL = Matrix::Zero(n, n);
  for (Index g = 0; g < G; ++g) {
    const Index ng = ws.size(g);
    BL.block(ws.offset(g), ws.offset(g), ng, ng) = Eigen::Map<const Matrix>(lam.data() + voff[g], ng, ng);
  }
  out.C = Mfull * BL * Mfull;
  out.trace_CtC = out.C.squaredNorm();
  return out;
}

inline double theta_KR(const ProjectionWorkspace& ws, const QuadFormTarget& A0,
                       const KrOptions& opt = {}) {
  const BiasCorrection kr = bias_correction_KR(ws, A0, opt);
  LeaveOutOperator op(ws, A0);
  const Vector& X = ws.design().X();
  const Vector& Y = ws.design().Y();
  return op.theta_plugin(X, Y) - X.dot(kr.C * Y);
}

// ---------------------------------------------------------------------------
// Target diagnostics: h_n = ||(W'W)^{-1/2} A0 (W'W)^{-1/2}||_op, r_n = rank(A),
// kappa_n = ||B||_F^2 / h_n^2.

struct TargetDiagnostics {
  double h_n = 0.0;
  Index r_n = 0;
  double kappa_n = 0.0;
  double B_frobenius2 = 0.0;
};

inline TargetDiagnostics target_diagnostics(const LeaveOutOperator& op) {
  TargetDiagnostics t;
  const auto& ws = op.workspace();
  auto [F, Gm] = op.target().whitened_factors(ws.gram());
  const Matrix At = F * Gm.transpose();
  Eigen::BDCSVD<Matrix> svd(At);
  const Vector sv = svd.singularValues();
  t.h_n = sv.size() ? sv(0) : 0.0;
  for (Index i = 0; i < sv.size(); ++i)
    if (sv(i) > 1e-10 * std::max(t.h_n, 1e-300)) ++t.r_n;
  std::vector<double> parts;
  for (Index g = 0; g < ws.G(); ++g)
    for (Index h = 0; h < ws.G(); ++h)
      if (g != h) parts.push_back(op.B(g, h).squaredNorm());
  t.B_frobenius2 = pairwise_sum(parts);
  t.kappa_n = t.h_n > 0.0 ? t.B_frobenius2 / (t.h_n * t.h_n) : 0.0;
  return t;
}

}  // namespace cqf
