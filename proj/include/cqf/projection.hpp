#pragma once

// Gram factorization and the projection / annihilator block algebra.
//
// With S = W'W = L L', the scaled design Q = W L^{-T} has orthonormal columns
// and P = Q Q'. Blocks are P_{g,h} = Q_g Q_h' and M_{g,h} = 1{g=h} I - P_{g,h}.
// The full n x n P is materialized when it fits the cache budget; otherwise
// blocks are formed from Q on demand.

#include "cqf/design.hpp"
#include "cqf/linalg.hpp"

#include <memory>
#include <random>

namespace cqf {

struct GramFactor {
  Matrix S;
  Eigen::LLT<Matrix> llt;
  double lambda_min = 0.0;
  double lambda_max = 0.0;

  Matrix solve(const Matrix& rhs) const { return llt.solve(rhs); }
  Vector solve(const Vector& rhs) const { return llt.solve(rhs); }
  Matrix lower() const { return llt.matrixL(); }
};

inline GramFactor gram_factorize(const Matrix& W, double rank_tolerance = 1e-12) {
  GramFactor f;
  f.S = W.transpose() * W;
  f.S = 0.5 * (f.S + f.S.transpose());
  std::tie(f.lambda_min, f.lambda_max) = symmetric_extreme_eigenvalues(f.S);
  if (!(f.lambda_max > 0.0) || f.lambda_min < rank_tolerance * f.lambda_max)
    throw RankDeficient("W'W is rank deficient (lambda_min = " + std::to_string(f.lambda_min) +
                        ", lambda_max = " + std::to_string(f.lambda_max) +
                        "); the regressors are collinear, drop redundant columns");
  f.llt.compute(f.S);
  if (f.llt.info() != Eigen::Success) throw RankDeficient("Cholesky of W'W failed");
  return f;
}

inline GramFactor gram_factorize(const ClusteredDesign& design, double rank_tolerance = 1e-12) {
  return gram_factorize(design.W(), rank_tolerance);
}

// Ordered cluster set with duplicates removed (first occurrence kept).
inline std::vector<Index> cluster_set(std::initializer_list<Index> ids) {
  std::vector<Index> out;
  for (Index g : ids)
    if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
  return out;
}

inline std::vector<Index> cluster_set(std::span<const Index> ids) {
  std::vector<Index> out;
  for (Index g : ids)
    if (std::find(out.begin(), out.end(), g) == out.end()) out.push_back(g);
  return out;
}

class ProjectionWorkspace {
 public:
  explicit ProjectionWorkspace(ClusteredDesign design, NumericOptions options = {})
      : design_(std::move(design)), options_(options) {
    gram_ = gram_factorize(design_, options_.rank_tolerance);
    t_n_ = resolve_ridge_threshold(options_, design_.n());
    // Q = W L^{-T}
    Q_ = gram_.llt.matrixL().solve(design_.W().transpose()).transpose();
    const double n = static_cast<double>(design_.n());
    dense_ = n * n * sizeof(double) <= static_cast<double>(options_.cache_budget_bytes);
    if (dense_) {
      P_ = Q_ * Q_.transpose();
      P_ = 0.5 * (P_ + P_.transpose());
    }
    MY_ = annihilate(design_.Y());
    MX_ = annihilate(design_.X());
  }

  const ClusteredDesign& design() const { return design_; }
  const GramFactor& gram() const { return gram_; }
  const NumericOptions& options() const { return options_; }
  double ridge_threshold() const { return t_n_; }
  const RidgeCounter& ridge_counter() const { return ridge_; }
  bool dense_cached() const { return dense_; }
  const Matrix& Q() const { return Q_; }
  // Only valid when dense_cached().
  const Matrix& P_dense() const { return P_; }

  Index G() const { return design_.G(); }
  Index n() const { return design_.n(); }
  Index d() const { return design_.d(); }
  Index offset(Index g) const { return design_.offset(g); }
  Index size(Index g) const { return design_.size(g); }

  void check_cluster(Index g) const {
    if (g < 0 || g >= G()) throw ValidationError("cluster index out of range");
  }

  Matrix P(Index g, Index h) const {
    check_cluster(g);
    check_cluster(h);
    if (dense_) return P_.block(offset(g), offset(h), size(g), size(h));
    return Q_.middleRows(offset(g), size(g)) * Q_.middleRows(offset(h), size(h)).transpose();
  }

  Matrix M(Index g, Index h) const {
    Matrix m = -P(g, h);
    if (g == h) m.diagonal().array() += 1.0;
    return m;
  }

  Index set_size(std::span<const Index> set) const {
    Index s = 0;
    for (Index g : set) s += size(g);
    return s;
  }

  // Writes M_{S,S} column-major into out (set_size^2 doubles).
  void M_set_into(std::span<const Index> set, double* out) const {
    const Index m = set_size(set);
    Index cj = 0;
    for (Index b : set) {
      const Index nb = size(b), ob = offset(b);
      Index ri = 0;
      for (Index a : set) {
        const Index na = size(a), oa = offset(a);
        if (dense_) {
          for (Index j = 0; j < nb; ++j)
            for (Index i = 0; i < na; ++i) out[(cj + j) * m + ri + i] = -P_(oa + i, ob + j);
        } else {
          const Matrix blk = Q_.middleRows(oa, na) * Q_.middleRows(ob, nb).transpose();
          for (Index j = 0; j < nb; ++j)
            for (Index i = 0; i < na; ++i) out[(cj + j) * m + ri + i] = -blk(i, j);
        }
        if (a == b)
          for (Index i = 0; i < na; ++i) out[(cj + i) * m + ri + i] += 1.0;
        ri += na;
      }
      cj += nb;
    }
  }

  Matrix M_set(std::span<const Index> set) const {
    const Index m = set_size(set);
    Matrix out(m, m);
    M_set_into(set, out.data());
    return out;
  }

  Matrix P_set(std::span<const Index> set) const {
    Matrix p = -M_set(set);
    p.diagonal().array() += 1.0;
    return p;
  }

  // Rows of v belonging to the clusters in set, stacked in set order.
  template <typename Vec>
  Vector gather(const Vec& v, std::span<const Index> set) const {
    Vector out(set_size(set));
    Index r = 0;
    for (Index g : set) {
      out.segment(r, size(g)) = v.segment(offset(g), size(g));
      r += size(g);
    }
    return out;
  }

  Vector annihilate(const Vector& v) const {
    if (v.size() != n()) throw ValidationError("annihilate: length mismatch");
    return v - Q_ * (Q_.transpose() * v);
  }

  // OLS coefficients (W'W)^{-1} W'v.
  Vector coefficients(const Vector& v) const { return gram_.solve(Vector(design_.W().transpose() * v)); }

  const Vector& MY() const { return MY_; }
  const Vector& MX() const { return MX_; }

  // Guarded solve with this workspace's ridge threshold, strict policy and counter.
  GuardedSolution solve_guarded(const Matrix& block, const Matrix& rhs) const {
    GuardedSolution s = block_solve_guarded(block, rhs, t_n_, &ridge_);
    if (s.regularized && options_.strict)
      throw SingularLeaveOut("leave-out block has lambda_min below the ridge threshold " +
                             std::to_string(t_n_) + " (strict mode)");
    return s;
  }

 private:
  ClusteredDesign design_;
  NumericOptions options_;
  GramFactor gram_;
  double t_n_ = 0.0;
  Matrix Q_;
  bool dense_ = false;
  Matrix P_;
  Vector MY_, MX_;
  RidgeCounter ridge_;
};

// ---------------------------------------------------------------------------
// Leverage and leave-out feasibility diagnostics

struct DiagnosticsReport {
  double lambda_n = 0.0;         // max_g ||P_gg||_op
  double phi_n = 0.0;            // max_g sum_h ||P_gh||_op^2
  double min_lambda_Mgg = 0.0;   // min_g lambda_min(M_gg)
  std::vector<double> lambda_min_Mgg;
  double min_lambda_pair = 0.0;  // min over (k,g), k != g, of lambda_min(S_{k,g})
  Index pairs_checked = 0;
  bool pairs_exhaustive = true;
  double min_lambda_triple = 0.0;  // min over distinct (k,g,h) of lambda_min(S~_{k,gh})
  Index triples_checked = 0;
  bool triples_exhaustive = true;
  double gram_lambda_min = 0.0;
  double gram_lambda_max = 0.0;
  Index max_cluster_size = 0;

  // Clusters with lambda_min(M_gg) < c.
  std::vector<Index> violators(double c) const {
    std::vector<Index> out;
    for (std::size_t g = 0; g < lambda_min_Mgg.size(); ++g)
      if (lambda_min_Mgg[g] < c) out.push_back(static_cast<Index>(g));
    return out;
  }
};

struct DiagnosticsOptions {
  Index pair_budget = 1'000'000;
  Index triple_budget = 10'000;
  std::uint64_t seed = 0;
};

namespace detail {

// lambda_min of the Schur complement of the leading `lead` rows/cols of m.
// Returns 0 when the leading block is singular.
inline double schur_min_eigenvalue(const Matrix& m, Index lead) {
  const Index rest = m.rows() - lead;
  const Matrix a = m.topLeftCorner(lead, lead);
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success || min_eigenvalue(a) <= 1e-14) return 0.0;
  const Matrix s = m.bottomRightCorner(rest, rest) -
                   m.bottomLeftCorner(rest, lead) * llt.solve(Matrix(m.topRightCorner(lead, rest)));
  return min_eigenvalue(0.5 * (s + s.transpose()));
}

}  // namespace detail

inline DiagnosticsReport leverage_diagnostics(const ProjectionWorkspace& ws,
                                              const DiagnosticsOptions& opt = {}) {
  DiagnosticsReport r;
  const Index G = ws.G();
  r.gram_lambda_min = ws.gram().lambda_min;
  r.gram_lambda_max = ws.gram().lambda_max;
  r.max_cluster_size = ws.design().max_cluster_size();
  r.lambda_min_Mgg.resize(static_cast<std::size_t>(G));
  r.min_lambda_Mgg = std::numeric_limits<double>::infinity();
  for (Index g = 0; g < G; ++g) {
    const Matrix pgg = ws.P(g, g);
    const auto [lo, hi] = symmetric_extreme_eigenvalues(0.5 * (pgg + pgg.transpose()));
    r.lambda_n = std::max(r.lambda_n, hi);
    const double lm = 1.0 - hi;
    r.lambda_min_Mgg[static_cast<std::size_t>(g)] = lm;
    r.min_lambda_Mgg = std::min(r.min_lambda_Mgg, lm);
    (void)lo;
    double row = 0.0;
    for (Index h = 0; h < G; ++h) {
      const double op = operator_norm(ws.P(g, h));
      row += op * op;
    }
    r.phi_n = std::max(r.phi_n, row);
  }

  std::mt19937_64 rng(opt.seed);

  // Pairs S_{k,g}: Schur complement of M_gg in M_{(g,k),(g,k)}.
  r.min_lambda_pair = std::numeric_limits<double>::infinity();
  const Index total_pairs = G * (G - 1);
  r.pairs_exhaustive = total_pairs <= opt.pair_budget;
  auto check_pair = [&](Index k, Index g) {
    const auto set = cluster_set({g, k});
    r.min_lambda_pair = std::min(r.min_lambda_pair, detail::schur_min_eigenvalue(ws.M_set(set), ws.size(g)));
    ++r.pairs_checked;
  };
  if (r.pairs_exhaustive) {
    for (Index k = 0; k < G; ++k)
      for (Index g = 0; g < G; ++g)
        if (k != g) check_pair(k, g);
  } else {
    std::uniform_int_distribution<Index> pick(0, G - 1);
    while (r.pairs_checked < opt.pair_budget) {
      const Index k = pick(rng), g = pick(rng);
      if (k != g) check_pair(k, g);
    }
  }
  if (r.pairs_checked == 0) r.min_lambda_pair = 0.0;

  // Triples S~_{k,gh}: Schur complement of M_{(g,h),(g,h)} in M_{(g,h,k)}.
  r.min_lambda_triple = std::numeric_limits<double>::infinity();
  const double total_triples = static_cast<double>(G) * (G - 1) * (G - 2);
  r.triples_exhaustive = total_triples <= static_cast<double>(opt.triple_budget);
  auto check_triple = [&](Index k, Index g, Index h) {
    const auto set = cluster_set({g, h, k});
    r.min_lambda_triple = std::min(
        r.min_lambda_triple, detail::schur_min_eigenvalue(ws.M_set(set), ws.size(g) + ws.size(h)));
    ++r.triples_checked;
  };
  if (r.triples_exhaustive) {
    for (Index k = 0; k < G; ++k)
      for (Index g = 0; g < G; ++g)
        for (Index h = 0; h < G; ++h)
          if (k != g && k != h && g != h) check_triple(k, g, h);
  } else {
    std::uniform_int_distribution<Index> pick(0, G - 1);
    while (r.triples_checked < opt.triple_budget) {
      const Index k = pick(rng), g = pick(rng), h = pick(rng);
      if (k != g && k != h && g != h) check_triple(k, g, h);
    }
  }
  if (r.triples_checked == 0) r.min_lambda_triple = 0.0;
  return r;
}

}  // namespace cqf
