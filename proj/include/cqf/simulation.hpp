#pragma once

// Data-generating processes for three IV designs, a TSLS baseline with
// cluster-robust variance, and a size/power harness.

#include "cqf/applications.hpp"
#include "cqf/stats.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <random>

namespace cqf {

// ---------------------------------------------------------------------------
// Seeding: every stream is a pure function of (seed, design, rep, stream).

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::mt19937_64 stream_rng(std::uint64_t seed, int design, Index rep, std::uint64_t stream) {
  std::uint64_t k = splitmix64(seed);
  k = splitmix64(k ^ static_cast<std::uint64_t>(design));
  k = splitmix64(k ^ static_cast<std::uint64_t>(rep));
  k = splitmix64(k ^ stream);
  return std::mt19937_64(k);
}

// ---------------------------------------------------------------------------
// Generated data

struct GeneratedData {
  IVProblem problem;
  double beta = 0.0;                     // value of beta under which theta = 0
  std::map<std::string, Vector> latent;  // generator internals for moment checks
};

struct Design1Params {
  Index G = 150;
  Index cluster_size = 4;
  Index dims = 50;  // d_z = d_w
  double theta1 = 0.5;
  double theta2 = 0.7;
  double rho = 0.5;
  double beta = 0.3;
};

struct Design2Params {
  Index states = 48;
  Index clusters_per_state = 4;
  Index cluster_size = 4;
  double beta = 0.5;
  double rho = 0.4;
  double mu = 0.4;
  double sigma_eps = 0.2;
  double p = 2.0 / 3.0;
};

struct Design3Params {
  Index G = 200;
  Index cluster_size = 4;
  Index judges = 4;
  Index levels = 5;
  Index bins = 6;
  double a0 = -0.8, a1 = 1.0, a2 = 0.6;
  double b0 = -0.8, b1 = 1.0, b2 = 0.6, b3 = 1.0;
  double rho1 = 0.8, rho2 = 0.8, rho3 = 0.3;
};

namespace detail {

inline void demean_by_cluster(Matrix& M, const std::vector<Index>& sizes) {
  Index off = 0;
  for (Index s : sizes) {
    if (M.cols() > 0) {
      const Eigen::RowVectorXd mean = M.middleRows(off, s).colwise().mean();
      M.middleRows(off, s).rowwise() -= mean;
    }
    off += s;
  }
}

inline void demean_by_cluster(Vector& v, const std::vector<Index>& sizes) {
  Index off = 0;
  for (Index s : sizes) {
    v.segment(off, s).array() -= v.segment(off, s).mean();
    off += s;
  }
}

// First ceil(count/2) of `count` items get +1, the rest -1.
inline double half_sign(Index i, Index count) { return i < (count + 1) / 2 ? 1.0 : -1.0; }

}  // namespace detail

inline GeneratedData generate_design1(const Design1Params& p, std::mt19937_64& rng) {
  if (p.dims < 4) throw ValidationError("design I: d_w must be at least 4");
  const Index G = p.G, m = p.cluster_size, n = G * m, d = p.dims;
  std::normal_distribution<double> nd;
  std::bernoulli_distribution coin(0.5);

  GeneratedData out;
  auto& pr = out.problem;
  pr.cluster_sizes.assign(static_cast<std::size_t>(G), m);
  pr.instruments.resize(n, d);
  pr.controls.resize(n, d);
  pr.outcome.resize(n);
  pr.treatment.resize(n);
  Vector sigma2(n);

  const double tn = std::sqrt(30.0 / (std::sqrt(static_cast<double>(d)) * static_cast<double>(n)));
  const double coef = 1.0 / std::sqrt(static_cast<double>(d));
  const double s1 = std::sqrt(p.theta1), s1c = std::sqrt(1.0 - p.theta1);
  const double rc = std::sqrt(1.0 - p.rho * p.rho);

  Matrix mix = Matrix::Zero(m, m);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j <= i; ++j) mix(i, j) = std::pow(p.theta2, static_cast<double>(i - j));

  Vector Ut(m), Vt(m);
  for (Index g = 0; g < G; ++g) {
    const double fe_y = nd(rng) + static_cast<double>(g + 1) / static_cast<double>(G);
    const double fe_x = nd(rng) + static_cast<double>(g + 1) / static_cast<double>(G);
    const Index off = g * m;
    for (Index j = 0; j < d; ++j) {
      const double common = nd(rng);
      for (Index i = 0; i < m; ++i) pr.instruments(off + i, j) = s1 * common + s1c * nd(rng);
    }
    for (Index i = 0; i < m; ++i) {
      const double z = nd(rng);
      auto w = pr.controls.row(off + i);
      w(0) = z;
      w(1) = z * z - 1.0;
      w(2) = z * z * z - 3.0 * z;
      w(3) = z * z * z * z - 6.0 * z * z + 3.0;
      for (Index k = 4; k < d; ++k) w(k) = z * ((coin(rng) ? 1.0 : 0.0) - 0.5);
      sigma2(off + i) = (0.2 + z * z) / 2.4;
      const double sig = std::sqrt(sigma2(off + i));
      const double eps = nd(rng), eta = nd(rng), v = nd(rng);
      Ut(i) = p.rho * eps + rc * sig * v;
      Vt(i) = p.rho * eta + rc * sig * v;
    }
    const Vector U = mix * Ut, V = mix * Vt;
    for (Index i = 0; i < m; ++i) {
      const Index r = off + i;
      const double wsum = pr.controls.row(r).sum() * coef;
      pr.treatment(r) = tn * pr.instruments.row(r).sum() + wsum + fe_x + V(i);
      pr.outcome(r) = p.beta * pr.treatment(r) + wsum + fe_y + U(i);
    }
  }
  out.latent["Z_raw"] = Eigen::Map<const Vector>(pr.instruments.data(), pr.instruments.size());
  out.latent["sigma2"] = sigma2;
  detail::demean_by_cluster(pr.instruments, pr.cluster_sizes);
  detail::demean_by_cluster(pr.controls, pr.cluster_sizes);
  detail::demean_by_cluster(pr.outcome, pr.cluster_sizes);
  detail::demean_by_cluster(pr.treatment, pr.cluster_sizes);
  out.beta = p.beta;
  return out;
}

inline GeneratedData generate_design2(const Design2Params& p, std::mt19937_64& rng) {
  const Index K = p.states, cps = p.clusters_per_state, m = p.cluster_size;
  const Index G = K * cps, n = G * m;
  if (m % 2 != 0) throw ValidationError("design II: cluster size must be even");
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const double dn = static_cast<double>(n), dK = static_cast<double>(K);
  const double pi_mag = std::sqrt(15.0 * std::sqrt(dK) / dn);
  const double xi_mag = std::sqrt(30.0 * std::sqrt(dK) / dn);
  const double coef = 1.0 / std::sqrt(dK);
  const Index half = (K + 1) / 2;
  auto pi_of = [&](Index t) { return detail::half_sign(t, K) * pi_mag; };
  auto gamma_of = [&](Index t) { return detail::half_sign(t, K) * coef; };
  auto xi_sd_of = [&](Index t) {
    // split each sign group of states in half
    return t < half ? detail::half_sign(t, half) * xi_mag : detail::half_sign(t - half, K - half) * xi_mag;
  };

  GeneratedData out;
  auto& pr = out.problem;
  pr.cluster_sizes.assign(static_cast<std::size_t>(G), m);
  pr.controls = Matrix::Zero(n, K);
  pr.instruments = Matrix::Zero(n, K);
  pr.outcome.resize(n);
  pr.treatment.resize(n);
  Vector Vlat(n), index(n);
  const double rc = std::sqrt(1.0 - p.rho * p.rho);

  for (Index t = 0; t < K; ++t)
    for (Index c = 0; c < cps; ++c) {
      const Index g = t * cps + c;
      const double ug = nd(rng);
      for (Index i = 0; i < m; ++i) {
        const Index r = g * m + i;
        const bool B = i >= m / 2;
        pr.controls(r, t) = 1.0;
        if (B) pr.instruments(r, t) = 1.0;
        const double V = 2.0 * normal_cdf(p.rho * ug + rc * nd(rng)) - 1.0;
        const double idx = (B ? pi_of(t) : 0.0) + gamma_of(t);
        const double X = idx >= V ? 1.0 : 0.0;
        const double U = (V >= 0.0 ? p.mu : -p.mu) + p.sigma_eps * nd(rng);
        const double sd = B ? xi_sd_of(t) : 0.0;
        const double pr_pos = V >= 0.0 ? p.p : 1.0 - p.p;
        const double xi = unif(rng) < pr_pos ? sd : -sd;
        pr.treatment(r) = X;
        pr.outcome(r) = X * (p.beta + xi) + gamma_of(t) + U;
        Vlat(r) = V;
        index(r) = idx;
      }
    }
  out.latent["V"] = Vlat;
  out.latent["index"] = index;
  out.beta = p.beta;
  return out;
}

// Covariate-weighted 2SLS limit with judge-by-covariate instruments:
// E[(p_J - pbar)(m_J - mbar)] / E[(p_J - pbar)^2] over S1 ~ U[0,1], S2 uniform, J uniform.
inline double design3_estimand(const Design3Params& p) {
  const auto rule = gauss_legendre_64(0.0, 1.0);
  const Index J = p.judges;
  double num = 0.0, den = 0.0;
  std::vector<double> pj(static_cast<std::size_t>(J)), mj(static_cast<std::size_t>(J));
  for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
    const double s1 = rule.nodes[q];
    for (Index k = 0; k < p.levels; ++k) {
      const double c0 = p.b0 + p.b2 * s1 + p.b3 * static_cast<double>(k);
      const double c1 = c0 + p.b1;
      double pbar = 0.0, mbar = 0.0;
      for (Index j = 1; j <= J; ++j) {
        const double a = p.a0 + (p.a1 + p.a2 * s1) * static_cast<double>(j) / static_cast<double>(J);
        const auto u = static_cast<std::size_t>(j - 1);
        pj[u] = normal_cdf(a);
        // P(Y=1) = P(U <= a, V <= c1) + P(U > a, V <= c0)
        mj[u] = bivariate_normal_cdf(a, c1, p.rho2) + normal_cdf(c0) - bivariate_normal_cdf(a, c0, p.rho2);
        pbar += pj[u] / static_cast<double>(J);
        mbar += mj[u] / static_cast<double>(J);
      }
      for (std::size_t u = 0; u < pj.size(); ++u) {
        num += rule.weights[q] * (pj[u] - pbar) * (mj[u] - mbar);
        den += rule.weights[q] * (pj[u] - pbar) * (pj[u] - pbar);
      }
    }
  }
  if (!(den > 0.0)) throw NumericalError("design III: instruments have no first stage");
  return num / den;
}

namespace detail {

// Appends columns of C to `basis` (orthonormal) and returns indices of columns that add rank.
inline std::vector<Index> independent_columns(Matrix& basis, const Matrix& C, double tol = 1e-8) {
  std::vector<Index> keep;
  for (Index j = 0; j < C.cols(); ++j) {
    Vector v = C.col(j);
    const double norm0 = v.norm();
    if (!(norm0 > 0.0)) continue;
    for (int pass = 0; pass < 2; ++pass)
      if (basis.cols() > 0) v -= basis * (basis.transpose() * v);
    if (v.norm() <= tol * norm0) continue;
    basis.conservativeResize(basis.rows(), basis.cols() + 1);
    basis.col(basis.cols() - 1) = v / v.norm();
    keep.push_back(j);
  }
  return keep;
}

}  // namespace detail

// Zero and collinear columns are dropped: controls first, then instruments.
inline GeneratedData generate_design3(const Design3Params& p, std::mt19937_64& rng, double estimand) {
  const Index G = p.G, m = p.cluster_size, n = G * m, J = p.judges, K = p.levels, nb = p.bins;
  if (G % J != 0) throw ValidationError("design III: clusters must split evenly across judges");
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<Index> level(0, K - 1);

  std::vector<Index> judge(static_cast<std::size_t>(G));
  for (Index g = 0; g < G; ++g) judge[static_cast<std::size_t>(g)] = g % J + 1;
  std::shuffle(judge.begin(), judge.end(), rng);

  const double r1c = std::sqrt(1.0 - p.rho1 * p.rho1), r2c = std::sqrt(1.0 - p.rho2 * p.rho2),
               r3c = std::sqrt(1.0 - p.rho3 * p.rho3);
  GeneratedData out;
  auto& pr = out.problem;
  pr.cluster_sizes.assign(static_cast<std::size_t>(G), m);
  pr.outcome.resize(n);
  pr.treatment.resize(n);
  Vector S1(n), S2(n), judge_of(n), bin_of(n);
  for (Index g = 0; g < G; ++g) {
    const Index j = judge[static_cast<std::size_t>(g)];
    const Index s2 = level(rng);
    const double x1 = nd(rng), x2 = nd(rng);
    for (Index i = 0; i < m; ++i) {
      const Index r = g * m + i;
      const double s1 = unif(rng);
      const double U = p.rho1 * x1 + r1c * nd(rng);
      const double V = p.rho2 * U + r2c * (p.rho3 * x2 + r3c * nd(rng));
      const double X =
          U <= p.a0 + (p.a1 + p.a2 * s1) * static_cast<double>(j) / static_cast<double>(J) ? 1.0 : 0.0;
      const double Y = V <= p.b0 + p.b1 * X + p.b2 * s1 + p.b3 * static_cast<double>(s2) ? 1.0 : 0.0;
      S1(r) = s1;
      S2(r) = static_cast<double>(s2);
      judge_of(r) = static_cast<double>(j);
      pr.treatment(r) = X;
      pr.outcome(r) = Y;
    }
  }
  // bins within each (judge, level) cell by rank of S1
  std::map<std::pair<Index, Index>, std::vector<Index>> cells;
  for (Index r = 0; r < n; ++r)
    cells[{static_cast<Index>(judge_of(r)), static_cast<Index>(S2(r))}].push_back(r);
  for (auto& [key, rows] : cells) {
    std::stable_sort(rows.begin(), rows.end(), [&](Index a, Index b) { return S1(a) < S1(b); });
    const Index sz = static_cast<Index>(rows.size());
    for (Index q = 0; q < sz; ++q) bin_of(rows[static_cast<std::size_t>(q)]) = static_cast<double>(q * nb / sz);
  }
  Matrix Wc = Matrix::Zero(n, K * nb);
  for (Index r = 0; r < n; ++r) Wc(r, static_cast<Index>(S2(r)) * nb + static_cast<Index>(bin_of(r))) = 1.0;
  Matrix Zc = Matrix::Zero(n, (J - 1) * K * nb);
  for (Index r = 0; r < n; ++r) {
    const Index j = static_cast<Index>(judge_of(r));
    if (j < J) Zc.row(r).segment((j - 1) * K * nb, K * nb) = Wc.row(r);
  }
  Matrix basis(n, 0);
  const auto kw = detail::independent_columns(basis, Wc);
  const auto kz = detail::independent_columns(basis, Zc);
  pr.controls.resize(n, static_cast<Index>(kw.size()));
  for (std::size_t c = 0; c < kw.size(); ++c) pr.controls.col(static_cast<Index>(c)) = Wc.col(kw[c]);
  pr.instruments.resize(n, static_cast<Index>(kz.size()));
  for (std::size_t c = 0; c < kz.size(); ++c) pr.instruments.col(static_cast<Index>(c)) = Zc.col(kz[c]);
  out.latent["S1"] = S1;
  out.latent["S2"] = S2;
  out.latent["judge"] = judge_of;
  out.latent["bin"] = bin_of;
  out.beta = estimand;
  return out;
}

// ---------------------------------------------------------------------------
// TSLS with Liang-Zeger cluster-robust variance, null imposed in the residual.

class TslsAnalysis {
 public:
  explicit TslsAnalysis(const IVProblem& p) : sizes_(p.cluster_sizes) {
    const Index n = p.outcome.size();
    auto partial = [&](const Matrix& M) -> Matrix {
      if (p.controls.cols() == 0) return M;
      Eigen::ColPivHouseholderQR<Matrix> qr(p.controls);
      return M - p.controls * qr.solve(M);
    };
    const Matrix Zt = partial(p.instruments);
    Matrix ZtZ = Zt.transpose() * Zt;
    Eigen::LDLT<Matrix> ldlt(0.5 * (ZtZ + ZtZ.transpose()));
    const double scale = p.instruments.colwise().squaredNorm().maxCoeff();
    const auto [lo, hi] = symmetric_extreme_eigenvalues(ZtZ);
    if (!(hi > 0.0) || lo < 1e-12 * std::max(hi, scale)) throw RankDeficient("tsls: instruments are collinear with the controls");
    Matrix yx(n, 2);
    yx.col(0) = p.outcome;
    yx.col(1) = p.treatment;
    const Matrix e = partial(yx);
    ey_ = e.col(0);
    ex_ = e.col(1);
    xhat_ = Zt * ldlt.solve(Vector(Zt.transpose() * p.treatment));
    xx_ = xhat_.dot(p.treatment);
    if (!(std::abs(xx_) > 0.0)) throw RankDeficient("tsls: the first stage is identically zero");
    beta_hat_ = xhat_.dot(p.outcome) / xx_;
  }

  double beta_hat() const { return beta_hat_; }

  TestResult test(double beta0, double alpha) const {
    std::vector<double> parts(sizes_.size());
    Index off = 0;
    for (std::size_t g = 0; g < sizes_.size(); ++g) {
      const Index s = sizes_[g];
      const double a = xhat_.segment(off, s).dot(ey_.segment(off, s) - beta0 * ex_.segment(off, s));
      parts[g] = a * a;
      off += s;
    }
    const double var = pairwise_sum(parts) / (xx_ * xx_);
    return t_test(beta_hat_, var, beta0, alpha);
  }

 private:
  std::vector<Index> sizes_;
  Vector ey_, ex_, xhat_;
  double xx_ = 0.0, beta_hat_ = 0.0;
};

inline TestResult tsls_baseline(const IVProblem& p, double beta0, double alpha) {
  return TslsAnalysis(p).test(beta0, alpha);
}

// ---------------------------------------------------------------------------
// Size and power harness

enum class SimMethod { L3CO, L3CO_NONNEG, L2CO, TSLS };

inline std::string to_string(SimMethod m) {
  switch (m) {
    case SimMethod::L3CO: return "L3CO";
    case SimMethod::L3CO_NONNEG: return "L3CO_NONNEG";
    case SimMethod::L2CO: return "L2CO";
    case SimMethod::TSLS: return "TSLS";
  }
  return "?";
}

inline SimMethod parse_sim_method(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
  if (s == "L3CO") return SimMethod::L3CO;
  if (s == "L3CO_NONNEG" || s == "L3CO-NONNEG") return SimMethod::L3CO_NONNEG;
  if (s == "L2CO") return SimMethod::L2CO;
  if (s == "TSLS") return SimMethod::TSLS;
  throw ValidationError("unknown method '" + s + "'");
}

struct DesignConfig {
  int design = 1;
  Index dims = 50;  // design I only
  Index reps = 100;
  std::uint64_t seed = 0;
  std::vector<double> alphas{0.05, 0.10};
  // Offsets from the true beta; nullopt selects 21 points over +-5 nominal standard errors.
  std::optional<std::vector<double>> power_offsets = std::vector<double>{};
  std::vector<SimMethod> methods{SimMethod::L3CO, SimMethod::TSLS};
  unsigned threads = 1;
  double ridge_threshold = 0.0;  // 0 = default rule
  Design1Params design1;
  Design2Params design2;
  Design3Params design3;

  void validate() const {
    if (design < 1 || design > 3) throw ValidationError("design must be 1, 2 or 3");
    if (reps < 1) throw ValidationError("replications must be at least 1");
    if (design == 1 && dims < 4) throw ValidationError("design I needs d_z = d_w >= 4");
    if (alphas.empty()) throw ValidationError("at least one alpha level is required");
    for (double a : alphas)
      if (!(a > 0.0 && a < 1.0)) throw ValidationError("alpha must lie in (0,1)");
    if (methods.empty()) throw ValidationError("at least one method is required");
  }
};

struct RateCell {
  std::string method;
  double alpha = 0.0;
  double offset = 0.0;
  Index rejections = 0;
  Index valid = 0;
  double rate = 0.0;
  double mc_se = 0.0;
};

struct ReplicationRecord {
  Index rep = 0;
  bool ok = false;
  std::string error;
  double beta_true = 0.0;
  double beta_hat = 0.0;    // leave-out IV estimate
  double theta_hat = 0.0;   // X'B(Y - beta_true X)
  double omega_hat = 0.0;   // L3CO standard deviation at the null (after fallback)
  double t_stat = 0.0;      // theta_hat / omega_hat
  bool fell_back = false;
  long regularized = 0;
  double seconds = 0.0;
  // rejections[method][alpha][offset]
  std::vector<std::vector<std::vector<char>>> reject;
};

struct SimulationReport {
  DesignConfig config;
  double beta_true = 0.0;
  double nominal_se = 0.0;
  std::vector<double> offsets;
  std::vector<RateCell> size;
  std::vector<RateCell> power;
  std::vector<ReplicationRecord> replications;
  Index failed = 0;
  double total_seconds = 0.0;
};

using Generator = std::function<GeneratedData(Index rep)>;

inline Generator make_generator(const DesignConfig& c) {
  switch (c.design) {
    case 1: {
      Design1Params p = c.design1;
      p.dims = c.dims;
      return [p, seed = c.seed](Index rep) {
        auto rng = stream_rng(seed, 1, rep, 0);
        return generate_design1(p, rng);
      };
    }
    case 2:
      return [p = c.design2, seed = c.seed](Index rep) {
        auto rng = stream_rng(seed, 2, rep, 0);
        return generate_design2(p, rng);
      };
    case 3: {
      const double est = design3_estimand(c.design3);
      return [p = c.design3, seed = c.seed, est](Index rep) {
        auto rng = stream_rng(seed, 3, rep, 0);
        return generate_design3(p, rng, est);
      };
    }
    default: throw ValidationError("design must be 1, 2 or 3");
  }
}

namespace detail {

inline ReplicationRecord run_replication(const DesignConfig& c, const Generator& gen, Index rep,
                                         const std::vector<double>& offsets) {
  const auto t0 = std::chrono::steady_clock::now();
  ReplicationRecord r;
  r.rep = rep;
  try {
    const auto data = gen(rep);
    r.beta_true = data.beta;
    NumericOptions o;
    o.threads = 1;
    o.ridge_threshold = c.ridge_threshold;
    const IVAnalysis iv(data.problem, o);
    std::optional<TslsAnalysis> tsls;
    const auto& curve = iv.curve();
    r.theta_hat = curve.theta(data.beta);
    const auto v = curve.variance(VarianceMethod::L3CO, data.beta);
    r.omega_hat = std::sqrt(std::max(v.value, 0.0));
    r.fell_back = v.fell_back;
    r.t_stat = r.omega_hat > 0.0 ? r.theta_hat / r.omega_hat : 0.0;
    r.beta_hat = curve.xbx() != 0.0 ? curve.xby() / curve.xbx() : std::numeric_limits<double>::quiet_NaN();
    r.regularized = curve.regularized_count();
    r.reject.resize(c.methods.size());
    for (std::size_t mi = 0; mi < c.methods.size(); ++mi) {
      const SimMethod m = c.methods[mi];
      if (m == SimMethod::TSLS && !tsls) tsls.emplace(data.problem);
      auto& cell = r.reject[mi];
      cell.assign(c.alphas.size(), std::vector<char>(offsets.size() + 1, 0));
      for (std::size_t ai = 0; ai < c.alphas.size(); ++ai)
        for (std::size_t oi = 0; oi <= offsets.size(); ++oi) {
          const double b0 = data.beta + (oi == 0 ? 0.0 : offsets[oi - 1]);
          const double a = c.alphas[ai];
          bool rej = false;
          switch (m) {
            case SimMethod::L3CO: rej = iv.lm_test(b0, a, VarianceMethod::L3CO).test.reject; break;
            case SimMethod::L3CO_NONNEG: rej = iv.lm_test(b0, a, VarianceMethod::L3CO_NONNEG).test.reject; break;
            case SimMethod::L2CO: rej = iv.lm_test(b0, a, VarianceMethod::L2CO).test.reject; break;
            case SimMethod::TSLS: rej = tsls->test(b0, a).reject; break;
          }
          cell[ai][oi] = rej ? 1 : 0;
        }
    }
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  r.seconds = detail::seconds_since(t0);
  return r;
}

inline RateCell tally(const std::vector<ReplicationRecord>& recs, std::size_t mi, std::size_t ai, std::size_t oi) {
  RateCell c;
  for (const auto& r : recs) {
    if (!r.ok) continue;
    ++c.valid;
    c.rejections += r.reject[mi][ai][oi];
  }
  if (c.valid > 0) {
    c.rate = static_cast<double>(c.rejections) / static_cast<double>(c.valid);
    c.mc_se = std::sqrt(c.rate * (1.0 - c.rate) / static_cast<double>(c.valid));
  }
  return c;
}

}  // namespace detail

// Wald standard error of the leave-out IV estimate in replication 0.
inline double nominal_standard_error(const Generator& gen, double ridge_threshold = 0.0) {
  const auto data = gen(0);
  NumericOptions o;
  o.ridge_threshold = ridge_threshold;
  const IVAnalysis iv(data.problem, o);
  return iv.wald(data.beta, 0.05, VarianceMethod::L3CO).test.omega_hat;
}

inline std::vector<double> default_power_offsets(double nominal_se) {
  std::vector<double> g(21);
  for (int i = 0; i < 21; ++i) g[static_cast<std::size_t>(i)] = nominal_se * (-5.0 + 0.5 * i);
  return g;
}

inline SimulationReport run_size_power(const DesignConfig& c, const Generator& gen) {
  c.validate();
  const auto t0 = std::chrono::steady_clock::now();
  SimulationReport rep;
  rep.config = c;
  if (c.power_offsets) {
    rep.offsets = *c.power_offsets;
  } else {
    rep.nominal_se = nominal_standard_error(gen, c.ridge_threshold);
    rep.offsets = default_power_offsets(rep.nominal_se);
  }
  rep.replications.resize(static_cast<std::size_t>(c.reps));
  parallel_for(c.reps, c.threads, [&](Index i) {
    rep.replications[static_cast<std::size_t>(i)] = detail::run_replication(c, gen, i, rep.offsets);
  });
  for (const auto& r : rep.replications) {
    if (!r.ok) ++rep.failed;
    else rep.beta_true = r.beta_true;
  }
  for (std::size_t mi = 0; mi < c.methods.size(); ++mi)
    for (std::size_t ai = 0; ai < c.alphas.size(); ++ai) {
      auto s = detail::tally(rep.replications, mi, ai, 0);
      s.method = to_string(c.methods[mi]);
      s.alpha = c.alphas[ai];
      rep.size.push_back(s);
      for (std::size_t oi = 0; oi < rep.offsets.size(); ++oi) {
        auto p = detail::tally(rep.replications, mi, ai, oi + 1);
        p.method = s.method;
        p.alpha = s.alpha;
        p.offset = rep.offsets[oi];
        rep.power.push_back(p);
      }
    }
  rep.total_seconds = detail::seconds_since(t0);
  return rep;
}

inline SimulationReport run_size_power(const DesignConfig& c) { return run_size_power(c, make_generator(c)); }

}  // namespace cqf
