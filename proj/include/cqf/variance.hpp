#pragma once

// Variance estimators for X'BY: leave-three-clusters-out (L3CO), its
// nonnegative split, leave-two-clusters-out (L2CO), the known-covariance
// oracle, and the normal t-test.
//
// All leave-out residuals come from block solves against M:
//   Ytilde_{g,-S} = [M_{SS}^{-1} (MY)_S]_g   for g in S,
// so each unordered triple {a,b,c} needs one factorization of M_{abc,abc},
// shared by the six orderings of (g,h,k) and by every outcome variant.

#include "cqf/quadform.hpp"
#include "cqf/stats.hpp"

#include <array>
#include <chrono>
#include <optional>

namespace cqf {

enum class VarianceMethod { L3CO, L3CO_NONNEG, L2CO, ORACLE };

inline std::string to_string(VarianceMethod m) {
  switch (m) {
    case VarianceMethod::L3CO: return "l3co";
    case VarianceMethod::L3CO_NONNEG: return "l3co_nonneg";
    case VarianceMethod::L2CO: return "l2co";
    case VarianceMethod::ORACLE: return "oracle";
  }
  return "unknown";
}

inline VarianceMethod parse_variance_method(const std::string& s) {
  if (s == "l3co") return VarianceMethod::L3CO;
  if (s == "l3co_nonneg") return VarianceMethod::L3CO_NONNEG;
  if (s == "l2co") return VarianceMethod::L2CO;
  throw ValidationError("unknown variance method '" + s + "' (expected l3co, l3co_nonneg or l2co)");
}

// The five L3CO sums and the split used by the nonnegative variant.
struct L3coComponents {
  std::array<double, 5> terms{};

  double value() const { return terms[0] + 2.0 * terms[1] + terms[2] - (terms[3] + terms[4]); }
  double split1() const {
    return terms[0] + 2.0 * terms[1] + terms[2] - 2.0 * (terms[3] + terms[4]);
  }
  double split2() const { return terms[3] + terms[4]; }
  double nonneg() const { return std::abs(split1()) + std::abs(split2()); }
};

struct VarianceEstimate {
  double value = 0.0;
  VarianceMethod method = VarianceMethod::L3CO;
  std::optional<L3coComponents> components;
  long regularized_solve_count = 0;
  double wall_time = 0.0;  // seconds
  std::vector<std::string> warnings;
};

namespace detail {

inline double dot(const double* x, const double* y, Index n) noexcept {
  double s = 0.0;
  for (Index i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

// n x G storage of per-(g, k) vectors of length n_g: column k, rows of g.
class PairField {
 public:
  PairField() = default;
  PairField(Index n, Index G) : m_(Matrix::Zero(n, G)) {}
  double* at(const ProjectionWorkspace& ws, Index g, Index k) { return m_.data() + k * m_.rows() + ws.offset(g); }
  const double* at(const ProjectionWorkspace& ws, Index g, Index k) const {
    return m_.data() + k * m_.rows() + ws.offset(g);
  }

 private:
  Matrix m_;
};

}  // namespace detail

// Shared precomputation for L3CO and L2CO over one X and several Y.
// Every Y variant uses the same block factorizations.
class VarianceKernel {
 public:
  VarianceKernel(const LeaveOutOperator& op, const Vector& X, std::vector<Vector> Ys)
      : op_(&op), ws_(&op.workspace()), X_(X), Ys_(std::move(Ys)) {
    const Index G = ws_->G(), n = ws_->n();
    if (G < 2) throw TooFewClusters("variance estimation needs at least two clusters");
    if (Ys_.empty()) throw ValidationError("VarianceKernel: no outcome supplied");
    if (X_.size() != n) throw ValidationError("VarianceKernel: X length mismatch");
    for (const auto& y : Ys_)
      if (y.size() != n) throw ValidationError("VarianceKernel: Y length mismatch");
    t_ = ws_->ridge_threshold();
    strict_ = ws_->options().strict;
    threads_ = ws_->options().threads;
    const std::size_t J = Ys_.size();

    MX_ = ws_->annihilate(X_);
    for (const auto& y : Ys_) MY_.push_back(ws_->annihilate(y));

    c_ = detail::PairField(n, G);
    d_.assign(J, detail::PairField(n, G));
    a_.assign(J, Matrix::Zero(G, G));
    nz_.assign(static_cast<std::size_t>(G * G), 0);
    parallel_for(G, threads_, [&](Index p) {
      for (Index q = 0; q < G; ++q) {
        if (p == q) continue;
        const Matrix Bpq = op.B(p, q);
        if (Bpq.cwiseAbs().maxCoeff() == 0.0) continue;
        nz_[static_cast<std::size_t>(p * G + q)] = 1;
        const Index np = ws_->size(p), nq = ws_->size(q);
        const auto Xp = X_.segment(ws_->offset(p), np);
        Eigen::Map<Vector>(c_.at(*ws_, q, p), nq) = Bpq.transpose() * Xp;
        for (std::size_t j = 0; j < J; ++j) {
          const Vector BY = Bpq * Ys_[j].segment(ws_->offset(q), nq);
          Eigen::Map<Vector>(d_[j].at(*ws_, p, q), np) = BY;
          a_[j](p, q) = Xp.dot(BY);
        }
      }
    });

    // Leave-two-out residuals of g and h from the fit without {g, h}.
    r2x_ = detail::PairField(n, G);
    r2y_.assign(J, detail::PairField(n, G));
    parallel_for(G, threads_, [&](Index g) {
      detail::GuardScratch scratch;
      std::vector<double> block, rhs;
      for (Index h = g + 1; h < G; ++h) {
        if (!pair_active(g, h)) continue;
        const std::array<Index, 2> set{g, h};
        const Index m = ws_->set_size(set);
        block.resize(static_cast<std::size_t>(m * m));
        ws_->M_set_into(set, block.data());
        rhs.resize(static_cast<std::size_t>(m * (J + 1)));
        gather_rhs(set, rhs.data(), m);
        solve(block.data(), m, rhs.data(), static_cast<Index>(J + 1), scratch);
        const Index ng = ws_->size(g), nh = ws_->size(h);
        std::copy_n(rhs.data(), ng, r2x_.at(*ws_, g, h));
        std::copy_n(rhs.data() + ng, nh, r2x_.at(*ws_, h, g));
        for (std::size_t j = 0; j < J; ++j) {
          const double* col = rhs.data() + (j + 1) * static_cast<std::size_t>(m);
          std::copy_n(col, ng, r2y_[j].at(*ws_, g, h));
          std::copy_n(col + ng, nh, r2y_[j].at(*ws_, h, g));
        }
      }
    });
  }

  Index variants() const { return static_cast<Index>(Ys_.size()); }
  long regularized_count() const { return ridge_.count(); }

  // L2CO for every Y variant.
  std::vector<double> l2co() const {
    const Index G = ws_->G();
    const std::size_t J = Ys_.size();
    std::vector<double> out(J);
    std::vector<double> sq(static_cast<std::size_t>(G));
    for (std::size_t j = 0; j < J; ++j) {
      for (Index g = 0; g < G; ++g) {
        const Index ng = ws_->size(g);
        double s = 0.0;
        for (Index h = 0; h < G; ++h) {
          if (h == g) continue;
          s += detail::dot(c_.at(*ws_, g, h), r2y_[j].at(*ws_, g, h), ng) +
               detail::dot(d_[j].at(*ws_, g, h), r2x_.at(*ws_, g, h), ng);
        }
        sq[static_cast<std::size_t>(g)] = s * s;
      }
      out[j] = pairwise_sum(sq);
    }
    return out;
  }

  // L3CO components for every Y variant.
  std::vector<L3coComponents> l3co() const {
    const Index G = ws_->G(), n = ws_->n();
    const std::size_t J = Ys_.size();

    // mx(g, k) = M_{g,k} X_k
    detail::PairField mx(n, G);
    {
      const Matrix& Q = ws_->Q();
      parallel_for(G, threads_, [&](Index k) {
        const Index ok = ws_->offset(k), nk = ws_->size(k);
        Vector col = -(Q * (Q.middleRows(ok, nk).transpose() * X_.segment(ok, nk)));
        col.segment(ok, nk) += X_.segment(ok, nk);
        for (Index g = 0; g < G; ++g)
          std::copy_n(col.data() + ws_->offset(g), ws_->size(g), mx.at(*ws_, g, k));
      });
    }

    // For ordered (g, h): v = S_{g|h}^{-1} d_{g,h}, w = M_hh^{-1} M_hg v, so that
    // d_{g,h}' Mtilde_{g,k,-gh} X_k = v' mx(g,k) - w' mx(h,k) for k != g, h.
    std::vector<detail::PairField> v(J, detail::PairField(n, G)), w(J, detail::PairField(n, G));
    std::vector<std::vector<double>> mhh(static_cast<std::size_t>(G));
    parallel_for(G, threads_, [&](Index h) {
      detail::GuardScratch scratch;
      const Matrix Mhh = ws_->M(h, h);
      factor(Mhh.data(), ws_->size(h), scratch);
      mhh[static_cast<std::size_t>(h)] = scratch.factor;
    });
    parallel_for(G, threads_, [&](Index g) {
      detail::GuardScratch scratch;
      const Index ng = ws_->size(g);
      const Matrix Mgg = ws_->M(g, g);
      for (Index h = 0; h < G; ++h) {
        if (h == g || !nz_[static_cast<std::size_t>(g * G + h)]) continue;
        const Index nh = ws_->size(h);
        const Matrix Mhg = ws_->M(h, g);
        Matrix Z = Mhg;  // M_hh^{-1} M_hg
        detail::cholesky_solve(mhh[static_cast<std::size_t>(h)].data(), nh, Z.data(), ng);
        Matrix S = Mgg - Mhg.transpose() * Z;
        S = 0.5 * (S + S.transpose());
        Matrix rhs(ng, static_cast<Index>(J));
        for (std::size_t j = 0; j < J; ++j)
          rhs.col(static_cast<Index>(j)) = Eigen::Map<const Vector>(d_[j].at(*ws_, g, h), ng);
        solve(S.data(), ng, rhs.data(), static_cast<Index>(J), scratch);
        for (std::size_t j = 0; j < J; ++j) {
          const auto vj = rhs.col(static_cast<Index>(j));
          std::copy_n(vj.data(), ng, v[j].at(*ws_, g, h));
          Eigen::Map<Vector>(w[j].at(*ws_, h, g), nh) = Z * vj;
        }
      }
    });

    // acc[a][j][t]: contributions of triples and pairs whose smallest index is a.
    const std::size_t stride = J * 5;
    std::vector<double> acc(static_cast<std::size_t>(G) * stride, 0.0);

    parallel_for(G, threads_, [&](Index a) {
      double* A = acc.data() + static_cast<std::size_t>(a) * stride;
      detail::GuardScratch scratch;
      std::vector<double> block, rhs;

      // Pairs {a, b}: the third index duplicates one of them.
      for (Index b = a + 1; b < G; ++b) {
        if (!pair_active(a, b)) continue;
        for (int o = 0; o < 2; ++o) {
          const Index g = o ? b : a, h = o ? a : b;
          const Index ng = ws_->size(g), nh = ws_->size(h);
          for (std::size_t j = 0; j < J; ++j) {
            double* T = A + j * 5;
            const double ahg = a_[j](h, g), agh = a_[j](g, h);
            // k = h
            T[0] += ahg * detail::dot(c_.at(*ws_, g, h), r2y_[j].at(*ws_, g, h), ng);
            const double t2 = detail::dot(d_[j].at(*ws_, g, h), r2x_.at(*ws_, g, h), ng);
            T[1] += ahg * t2;
            T[2] += agh * t2;
            // k = g, where Mtilde_{g,g,-gh} = I
            T[3] += detail::dot(c_.at(*ws_, h, g), r2y_[j].at(*ws_, h, g), nh) * agh;
            T[4] += detail::dot(d_[j].at(*ws_, h, g), r2x_.at(*ws_, h, g), nh) * agh;
          }
        }
      }

      // Distinct triples a < b < c.
      static constexpr int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2},
                                          {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
      for (Index b = a + 1; b < G; ++b) {
        for (Index c = b + 1; c < G; ++c) {
          if (!pair_active(a, b) && !pair_active(a, c) && !pair_active(b, c)) continue;
          const std::array<Index, 3> set{a, b, c};
          const Index m = ws_->set_size(set);
          block.resize(static_cast<std::size_t>(m * m));
          ws_->M_set_into(set, block.data());
          rhs.resize(static_cast<std::size_t>(m * (J + 1)));
          gather_rhs(set, rhs.data(), m);
          solve(block.data(), m, rhs.data(), static_cast<Index>(J + 1), scratch);
          const std::array<Index, 3> loc{0, ws_->size(a), ws_->size(a) + ws_->size(b)};

          for (const auto& p : perms) {
            const Index g = set[p[0]], h = set[p[1]], k = set[p[2]];
            if (!pair_active(g, h)) continue;
            const Index ng = ws_->size(g), nh = ws_->size(h);
            const double* xg = rhs.data() + loc[p[0]];
            const double* xh = rhs.data() + loc[p[1]];
            const double* cyg_c = c_.at(*ws_, g, k);
            const double* cyh_c = c_.at(*ws_, h, g);
            for (std::size_t j = 0; j < J; ++j) {
              double* T = A + j * 5;
              const double* yg = rhs.data() + (j + 1) * static_cast<std::size_t>(m) + loc[p[0]];
              const double* yh = rhs.data() + (j + 1) * static_cast<std::size_t>(m) + loc[p[1]];
              const double ahg = a_[j](h, g), agh = a_[j](g, h);
              T[0] += ahg * detail::dot(cyg_c, yg, ng);
              const double t2 = detail::dot(d_[j].at(*ws_, g, k), xg, ng);
              T[1] += ahg * t2;
              T[2] += agh * t2;
              const double f2 = detail::dot(v[j].at(*ws_, g, h), mx.at(*ws_, g, k), ng) -
                                detail::dot(w[j].at(*ws_, h, g), mx.at(*ws_, h, k), nh);
              T[3] += detail::dot(cyh_c, yh, nh) * f2;
              T[4] += detail::dot(d_[j].at(*ws_, h, g), xh, nh) * f2;
            }
          }
        }
      }
    });

    std::vector<L3coComponents> out(J);
    std::vector<double> col(static_cast<std::size_t>(G));
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t t = 0; t < 5; ++t) {
        for (Index a = 0; a < G; ++a) col[static_cast<std::size_t>(a)] = acc[a * stride + j * 5 + t];
        out[j].terms[t] = pairwise_sum(col);
      }
    return out;
  }

 private:
  // Some B block between g and h is nonzero.
  bool pair_active(Index g, Index h) const {
    const Index G = ws_->G();
    return nz_[static_cast<std::size_t>(g * G + h)] || nz_[static_cast<std::size_t>(h * G + g)];
  }

  template <std::size_t N>
  void gather_rhs(const std::array<Index, N>& set, double* out, Index m) const {
    const std::size_t J = Ys_.size();
    Index r = 0;
    for (Index s : set) {
      const Index os = ws_->offset(s), ns = ws_->size(s);
      std::copy_n(MX_.data() + os, ns, out + r);
      for (std::size_t j = 0; j < J; ++j)
        std::copy_n(MY_[j].data() + os, ns, out + (j + 1) * static_cast<std::size_t>(m) + r);
      r += ns;
    }
  }

  void factor(const double* block, Index m, detail::GuardScratch& scratch) const {
    if (detail::guarded_factor(block, m, t_, scratch)) {
      ridge_.add();
      if (strict_)
        throw SingularLeaveOut("leave-out block has lambda_min below the ridge threshold " +
                               std::to_string(t_) + " (strict mode)");
    }
  }

  void solve(const double* block, Index m, double* rhs, Index nrhs, detail::GuardScratch& scratch) const {
    factor(block, m, scratch);
    detail::cholesky_solve(scratch.factor.data(), m, rhs, nrhs);
  }

  const LeaveOutOperator* op_;
  const ProjectionWorkspace* ws_;
  Vector X_;
  std::vector<Vector> Ys_;
  Vector MX_;
  std::vector<Vector> MY_;
  double t_ = 0.0;
  bool strict_ = false;
  unsigned threads_ = 1;
  RidgeCounter ridge_;

  detail::PairField c_;                // c(g,k) = B_{k,g}' X_k
  std::vector<detail::PairField> d_;   // d(g,k) = B_{g,k} Y_k
  std::vector<Matrix> a_;              // a(h,g) = X_h' B_{h,g} Y_g
  std::vector<char> nz_;               // B_{g,h} != 0
  detail::PairField r2x_;              // r2x(g,h) = Xtilde_{g,-h}
  std::vector<detail::PairField> r2y_;
};

// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> cluster_count_warnings(Index G) {
  if (G == 2)
    return {"only two clusters: leave-out sums degenerate and the variance estimate is unreliable"};
  return {};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

inline VarianceEstimate l3co_variance(const LeaveOutOperator& op, const Vector& X, const Vector& Y,
                                      bool nonneg = false) {
  const auto t0 = std::chrono::steady_clock::now();
  VarianceKernel kernel(op, X, {Y});
  VarianceEstimate e;
  e.components = kernel.l3co().front();
  e.method = nonneg ? VarianceMethod::L3CO_NONNEG : VarianceMethod::L3CO;
  e.value = nonneg ? e.components->nonneg() : e.components->value();
  e.regularized_solve_count = kernel.regularized_count();
  e.warnings = detail::cluster_count_warnings(op.workspace().G());
  e.wall_time = detail::seconds_since(t0);
  return e;
}

inline VarianceEstimate l3co_variance(const ProjectionWorkspace& ws, const QuadFormTarget& A0) {
  LeaveOutOperator op(ws, A0);
  return l3co_variance(op, ws.design().X(), ws.design().Y());
}

inline VarianceEstimate l3co_variance_nonneg(const ProjectionWorkspace& ws, const QuadFormTarget& A0) {
  LeaveOutOperator op(ws, A0);
  return l3co_variance(op, ws.design().X(), ws.design().Y(), true);
}

inline VarianceEstimate l2co_variance(const LeaveOutOperator& op, const Vector& X, const Vector& Y) {
  const auto t0 = std::chrono::steady_clock::now();
  VarianceKernel kernel(op, X, {Y});
  VarianceEstimate e;
  e.method = VarianceMethod::L2CO;
  e.value = kernel.l2co().front();
  e.regularized_solve_count = kernel.regularized_count();
  e.warnings = detail::cluster_count_warnings(op.workspace().G());
  e.wall_time = detail::seconds_since(t0);
  return e;
}

inline VarianceEstimate l2co_variance(const ProjectionWorkspace& ws, const QuadFormTarget& A0) {
  LeaveOutOperator op(ws, A0);
  return l2co_variance(op, ws.design().X(), ws.design().Y());
}

// Mtilde_{g,k,-gh} = S_{g|h}^{-1} (M_gk - M_gh M_hh^{-1} M_hk), S_{g|h} = M_gg - M_gh M_hh^{-1} M_hg.
inline GuardedSolution mtilde(const ProjectionWorkspace& ws, Index g, Index k, Index h) {
  ws.check_cluster(g);
  ws.check_cluster(k);
  ws.check_cluster(h);
  if (g == h) throw ValidationError("mtilde: g and h must differ");
  const Matrix Mhh = ws.M(h, h);
  Matrix rhs(ws.size(h), ws.size(g) + ws.size(k));
  rhs << ws.M(h, g), ws.M(h, k);
  const auto inner = ws.solve_guarded(Mhh, rhs);
  const Matrix Mgh = ws.M(g, h);
  Matrix S = ws.M(g, g) - Mgh * inner.x.leftCols(ws.size(g));
  S = 0.5 * (S + S.transpose());
  const Matrix R = ws.M(g, k) - Mgh * inner.x.rightCols(ws.size(k));
  auto out = ws.solve_guarded(S, R);
  out.regularized = out.regularized || inner.regularized;
  return out;
}

// Variance of X'BY when per-cluster covariances of (U_g, V_g) are known.
// Omega[g] is 2n_g x 2n_g ordered (U_g, V_g); Pi = W pi, Gamma = W gamma.
inline double oracle_omega(const LeaveOutOperator& op, const std::vector<Matrix>& Omega,
                           const Vector& Pi, const Vector& Gamma) {
  const auto& ws = op.workspace();
  const Index G = ws.G();
  if (static_cast<Index>(Omega.size()) != G) throw ValidationError("oracle_omega: one block per cluster");
  if (Pi.size() != ws.n() || Gamma.size() != ws.n()) throw ValidationError("oracle_omega: length mismatch");
  for (Index g = 0; g < G; ++g)
    if (Omega[g].rows() != 2 * ws.size(g) || Omega[g].cols() != 2 * ws.size(g))
      throw ValidationError("oracle_omega: Omega block " + std::to_string(g) + " has wrong size");
  auto OU = [&](Index g) { return Omega[g].topLeftCorner(ws.size(g), ws.size(g)); };
  auto OV = [&](Index g) { return Omega[g].bottomRightCorner(ws.size(g), ws.size(g)); };
  auto OUV = [&](Index g) { return Omega[g].topRightCorner(ws.size(g), ws.size(g)); };

  const Matrix B = op.B_full();
  const Vector H = B.transpose() * Pi;
  const Vector Ht = B * Gamma;
  std::vector<double> parts;
  for (Index g = 0; g < G; ++g) {
    const Index og = ws.offset(g), ng = ws.size(g);
    for (Index h = 0; h < G; ++h) {
      if (g == h) continue;
      const Index oh = ws.offset(h), nh = ws.size(h);
      const auto Bgh = B.block(og, oh, ng, nh);
      const auto Bhg = B.block(oh, og, nh, ng);
      parts.push_back((OV(g) * Bgh * OU(h) * Bgh.transpose()).trace());
      parts.push_back((OUV(g) * Bgh * OUV(h) * Bhg).trace());
    }
    const auto Hg = H.segment(og, ng);
    const auto Htg = Ht.segment(og, ng);
    parts.push_back(Hg.dot(OU(g) * Hg));
    parts.push_back(Htg.dot(OV(g) * Htg));
    parts.push_back(2.0 * Hg.dot(OUV(g) * Htg));
  }
  return pairwise_sum(parts);
}

// ---------------------------------------------------------------------------

struct TestResult {
  double theta_hat = 0.0;
  double theta0 = 0.0;
  double omega_hat = 0.0;
  double t_stat = 0.0;
  double p_value = 1.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double alpha = 0.05;
  bool reject = false;
  bool variance_clamped = false;
};

inline constexpr double kVarianceFloor = 1e-300;

inline TestResult t_test(double theta_hat, double omega2_hat, double theta0, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("t_test: alpha must lie in (0, 1)");
  TestResult r;
  r.theta_hat = theta_hat;
  r.theta0 = theta0;
  r.alpha = alpha;
  if (!(omega2_hat > kVarianceFloor)) {
    omega2_hat = kVarianceFloor;
    r.variance_clamped = true;
  }
  r.omega_hat = std::sqrt(omega2_hat);
  r.t_stat = (theta_hat - theta0) / r.omega_hat;
  const double z = normal_quantile(1.0 - alpha / 2.0);
  r.p_value = std::clamp(2.0 * normal_cdf(-std::abs(r.t_stat)), 0.0, 1.0);
  r.reject = std::abs(r.t_stat) >= z;
  r.ci_lo = theta_hat - z * r.omega_hat;
  r.ci_hi = theta_hat + z * r.omega_hat;
  return r;
}

// Variance used for testing: L3CO falls back to its nonnegative variant when
// the raw estimate is not positive.
struct SelectedVariance {
  double value = 0.0;
  bool fell_back = false;
};

inline SelectedVariance select_variance(VarianceMethod method, const L3coComponents* l3co,
                                        double l2co) {
  switch (method) {
    case VarianceMethod::L2CO: return {l2co, false};
    case VarianceMethod::L3CO_NONNEG: return {l3co->nonneg(), false};
    case VarianceMethod::L3CO: {
      const double v = l3co->value();
      if (v > 0.0) return {v, false};
      return {l3co->nonneg(), true};
    }
    case VarianceMethod::ORACLE: break;
  }
  throw ValidationError("select_variance: oracle variance needs known covariances");
}

}  // namespace cqf
