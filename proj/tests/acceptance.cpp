// Acceptance suite. One PASS/FAIL line per criterion; exit status 1 if any
// selected criterion fails.
//
//   acceptance                 run all criteria
//   acceptance --criterion 4   run one

#include "support/oracle.hpp"

#include "cqf/io.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <random>
#include <thread>

using namespace cqf;

namespace {

struct Outcome {
  std::vector<std::string> failures;
  std::string summary;

  void check(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

unsigned cores() { return std::max(1u, std::thread::hardware_concurrency()); }

NumericOptions unguarded() {
  NumericOptions o;
  o.ridge_threshold = 1e-10;
  return o;
}

struct Case {
  oracle::Instance inst;
  ClusteredDesign noisy;
};

Case make_case(std::uint64_t seed, const std::vector<Index>& sizes, Index d) {
  std::mt19937_64 rng(seed);
  auto inst = oracle::make_instance(rng, sizes, d, true);
  std::normal_distribution<double> nd;
  Vector e(2 * inst.design.n());
  for (Index i = 0; i < e.size(); ++i) e(i) = nd(rng);
  const auto [Y, X] = oracle::outcomes_from(inst, oracle::stacked_covariance(inst).llt().matrixL() * e);
  auto noisy = inst.design.with_outcomes(Y, X);
  return {std::move(inst), std::move(noisy)};
}

double rel(double a, double b) { return std::abs(a - b) / std::max(1e-300, std::abs(b)); }

// ---------------------------------------------------------------------------

Outcome exact_unbiasedness() {
  Outcome o;
  const std::vector<std::pair<std::vector<Index>, Index>> shapes{
      {{3, 3, 3, 3}, 2}, {{3, 3, 2, 3, 3}, 3}, {{4, 3, 3, 3, 3}, 3}, {{2, 3, 3, 3, 3}, 2}, {{3, 3, 3, 3, 4}, 4}};
  double worst_theta = 0, worst_l3 = 0, worst_l2 = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    std::mt19937_64 rng(1000 + i);
    const auto inst = oracle::make_instance(rng, shapes[i].first, shapes[i].second, true);
    const auto& des = inst.design;
    ProjectionWorkspace ws(des, unguarded());
    LeaveOutOperator op(ws, QuadFormTarget::dense(inst.A0));
    const Vector mean = Vector::Zero(2 * des.n());
    const Matrix Sigma = oracle::stacked_covariance(inst);
    long reg = 0;
    auto expect = [&](int which) {
      return oracle::gaussian_expectation(
          [&](const Vector& e) {
            const auto [Y, X] = oracle::outcomes_from(inst, e);
            if (which == 0) return op.theta_leaveout(X, Y);
            VarianceKernel ker(op, X, {Y});
            const double v = which == 1 ? ker.l3co().front().value() : ker.l2co().front();
            reg += ker.regularized_count();
            return v;
          },
          mean, Sigma);
    };
    const double e_theta = expect(0), e_l3 = expect(1), e_l2 = expect(2);
    const Matrix& W = des.W();
    const Matrix S = W.transpose() * W;
    const Vector pi = S.ldlt().solve(W.transpose() * inst.Pi);
    const Vector gamma = S.ldlt().solve(W.transpose() * inst.Gamma);
    const double theta = pi.dot(inst.A0 * gamma);
    const double w2 = oracle::expected_terms(inst).omega2;
    const double dt = std::abs(e_theta - theta) / (1 + std::abs(theta));
    const double d3 = std::abs(e_l3 - w2) / w2;
    worst_theta = std::max(worst_theta, dt);
    worst_l3 = std::max(worst_l3, d3);
    worst_l2 = std::min(worst_l2, e_l2 - w2);
    o.check(reg == 0, fmt("instance %zu: %ld regularized solves", i, reg));
    o.check(dt <= 1e-8, fmt("instance %zu: |E theta_hat - theta| / (1+|theta|) = %.3g", i, dt));
    o.check(d3 <= 1e-7, fmt("instance %zu: |E L3CO - omega^2| / omega^2 = %.3g", i, d3));
    o.check(e_l2 >= w2 - 1e-9, fmt("instance %zu: E L2CO - omega^2 = %.3g", i, e_l2 - w2));
  }
  o.summary = fmt("5 instances; max theta gap %.2g, max L3CO rel gap %.2g, min E L2CO - omega^2 %.3g",
                  worst_theta, worst_l3, worst_l2);
  return o;
}

Outcome cross_implementation() {
  Outcome o;
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed * 7919);
    std::uniform_int_distribution<Index> size(2, 5);
    std::vector<Index> sizes;
    Index n = 0;
    while (sizes.size() < 6 || n < 40) {
      const Index s = size(rng);
      if (n + s > 60) break;
      sizes.push_back(s);
      n += s;
    }
    const Index d = seed % 2 ? 3 : 4;
    const auto c = make_case(seed, sizes, d);
    ProjectionWorkspace ws(c.noisy, unguarded());
    const auto t = QuadFormTarget::dense(c.inst.A0);
    const double theta = theta_leaveout(ws, t).theta;
    const auto l3 = l3co_variance(ws, t);
    const auto l2 = l2co_variance(ws, t);
    const double rt = oracle::dense_reference_theta(c.noisy, c.inst.A0);
    const auto rv = oracle::dense_reference_variances(c.noisy, c.inst.A0);
    const double e1 = rel(theta, rt), e2 = rel(l3.value, rv.l3co), e3 = rel(l2.value, rv.l2co);
    worst = std::max({worst, e1, e2, e3});
    o.check(e1 <= 1e-8, fmt("seed %llu: theta rel diff %.3g", (unsigned long long)seed, e1));
    o.check(e2 <= 1e-8, fmt("seed %llu: L3CO rel diff %.3g", (unsigned long long)seed, e2));
    o.check(e3 <= 1e-8, fmt("seed %llu: L2CO rel diff %.3g", (unsigned long long)seed, e3));
  }
  o.summary = fmt("10 instances, n <= 60; max relative difference %.2g", worst);
  return o;
}

Outcome correction_properties() {
  Outcome o;
  int kr_found = 0;
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = make_case(300 + seed, {2, 3, 2, 3, 2, 3, 2}, 3);
    ProjectionWorkspace ws(c.noisy);
    const auto t = QuadFormTarget::dense(c.inst.A0);
    LeaveOutOperator op(ws, t);
    const Matrix& W = c.noisy.W();
    const Matrix A = op.A_dense();
    auto diag_gap = [&](const Matrix& C) {
      double g = 0;
      for (Index k = 0; k < ws.G(); ++k) {
        const Index off = ws.offset(k), s = ws.size(k);
        g = std::max(g, (C.block(off, off, s, s) - A.block(off, off, s, s)).norm());
      }
      return g;
    };
    const auto lo = bias_correction_LO(ws, t);
    const double d1 = diag_gap(lo.C), d3 = (W.transpose() * lo.C).norm();
    worst = std::max({worst, d1, d3});
    o.check(d1 <= 1e-8, fmt("seed %d: C_LO diagonal blocks off by %.3g", int(seed), d1));
    o.check(d3 <= 1e-8, fmt("seed %d: ||W'C_LO|| = %.3g", int(seed), d3));
    try {
      const auto kr = bias_correction_KR(ws, t);
      ++kr_found;
      const double k1 = diag_gap(kr.C), k2 = (kr.C * W).norm(), k3 = (W.transpose() * kr.C).norm();
      worst = std::max({worst, k1, k2, k3});
      o.check(k1 <= 1e-8, fmt("seed %d: C_KR diagonal blocks off by %.3g", int(seed), k1));
      o.check(k2 <= 1e-8, fmt("seed %d: ||C_KR W|| = %.3g", int(seed), k2));
      o.check(k3 <= 1e-8, fmt("seed %d: ||W'C_KR|| = %.3g", int(seed), k3));
      o.check(lo.trace_CtC <= kr.trace_CtC + 1e-8,
              fmt("seed %d: tr(C_LO'C_LO) = %.6g exceeds tr(C_KR'C_KR) = %.6g", int(seed), lo.trace_CtC,
                  kr.trace_CtC));
    } catch (const DoesNotExist&) {
    }
  }
  o.check(kr_found > 0, "C_KR existed on no instance");
  o.summary = fmt("5 instances, C_KR on %d; max residual %.2g", kr_found, worst);
  return o;
}

struct SizeBand {
  double alpha, centre, half;
};

const RateCell* find_cell(const SimulationReport& r, const std::string& method, double alpha) {
  for (const auto& c : r.size)
    if (c.method == method && std::abs(c.alpha - alpha) < 1e-12) return &c;
  return nullptr;
}

Outcome size_check(const DesignConfig& c, const std::vector<SizeBand>& bands, double tsls_floor = -1) {
  Outcome o;
  const auto r = run_size_power(c);
  std::string s = fmt("design %d, %lld reps, seed %llu:", c.design, (long long)c.reps, (unsigned long long)c.seed);
  for (const auto& b : bands) {
    const auto* cell = find_cell(r, "L3CO", b.alpha);
    if (!cell) {
      o.check(false, fmt("no L3CO cell at alpha %.2f", b.alpha));
      continue;
    }
    const double pct = 100 * cell->rate;
    s += fmt(" L3CO@%.0f%% %.1f%% [%.1f, %.1f]", 100 * b.alpha, pct, b.centre - b.half, b.centre + b.half);
    o.check(std::abs(pct - b.centre) <= b.half + 1e-9,
            fmt("L3CO rejection at %.0f%% is %.1f%%, outside %.1f +- %.1f", 100 * b.alpha, pct, b.centre, b.half));
  }
  if (tsls_floor >= 0) {
    const auto* cell = find_cell(r, "TSLS", 0.05);
    const double pct = cell ? 100 * cell->rate : -1;
    s += fmt(" TSLS@5%% %.1f%% (> %.0f%%)", pct, tsls_floor);
    o.check(pct > tsls_floor, fmt("TSLS rejection at 5%% is %.1f%%, not above %.0f%%", pct, tsls_floor));
  }
  o.check(r.failed == 0, fmt("%lld replications failed", (long long)r.failed));
  s += fmt("; %lld failed; %.0f s", (long long)r.failed, r.total_seconds);
  o.summary = s;
  return o;
}

DesignConfig sim_config(int design, Index reps, std::uint64_t seed, unsigned threads) {
  DesignConfig c;
  c.design = design;
  c.reps = reps;
  c.seed = seed;
  c.threads = threads;
  c.alphas = {0.05, 0.10};
  c.methods = {SimMethod::L3CO, SimMethod::TSLS};
  c.power_offsets = std::vector<double>{};
  return c;
}

Outcome design1_size(unsigned threads) {
  return size_check(sim_config(1, 300, 7, threads), {{0.05, 6.3, 3.0}, {0.10, 10.4, 3.6}}, 40.0);
}

Outcome design2_size(unsigned threads) {
  return size_check(sim_config(2, 500, 7, threads), {{0.05, 4.8, 2.0}, {0.10, 9.4, 2.7}});
}

Outcome design3_size(unsigned threads) {
  Design3Params p;
  p.a2 = p.b2 = p.b3 = p.rho2 = 0.0;
  const double gap = std::abs(design3_estimand(p) - (normal_cdf(p.b0 + p.b1) - normal_cdf(p.b0)));
  auto o = size_check(sim_config(3, 500, 7, threads), {{0.05, 4.1, 1.9}, {0.10, 8.0, 2.5}});
  o.check(gap <= 1e-6, fmt("estimand special case off by %.3g", gap));
  o.summary += fmt("; estimand special case gap %.1g", gap);
  return o;
}

Outcome normality(unsigned threads) {
  Outcome o;
  auto c = sim_config(1, 1000, 11, threads);
  c.methods = {SimMethod::L3CO};
  const auto r = run_size_power(c);
  std::vector<double> t;
  for (const auto& rec : r.replications)
    if (rec.ok) t.push_back(rec.t_stat);
  const auto ks = ks_test_normal(t);
  o.check(r.failed == 0, fmt("%lld replications failed", (long long)r.failed));
  o.check(ks.p_value >= 0.01, fmt("KS p-value %.4g below 0.01", ks.p_value));
  o.summary = fmt("design 1, %zu t-statistics; KS D = %.4f, p = %.3f; %.0f s", t.size(), ks.statistic, ks.p_value,
                  r.total_seconds);
  return o;
}

Outcome identities() {
  Outcome o;
  int checks = 0;
  // dual form of theta_LO
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto c = make_case(500 + seed, {3, 2, 3, 4, 2, 3}, 3);
    ProjectionWorkspace ws(c.noisy);
    const double th = theta_leaveout(ws, QuadFormTarget::dense(c.inst.A0)).theta;
    const double dual = oracle::dense_reference_theta_dual(c.noisy, c.inst.A0);
    o.check(std::abs(th - dual) <= 1e-9 * std::max(1.0, std::abs(dual)), fmt("dual form differs by %.3g", th - dual));
    ++checks;
  }
  // Woodbury leave-one-out coefficients
  {
    const auto c = make_case(510, {3, 2, 4, 3, 3}, 3);
    ProjectionWorkspace ws(c.noisy);
    const Vector pi = ws.coefficients(c.noisy.X());
    for (Index g = 0; g < ws.G(); ++g) {
      const std::array<Index, 1> drop{g};
      const auto lo = leaveout_coeffs(ws, drop);
      const Vector upd = pi - ws.gram().solve(Vector(c.noisy.W(g).transpose() * ws.M(g, g).inverse() *
                                                    ws.MX().segment(ws.offset(g), ws.size(g))));
      const double gap = (lo.pi - upd).norm() / (1.0 + pi.norm());
      o.check(gap <= 1e-10, fmt("Woodbury update off by %.3g", gap));
      ++checks;
    }
  }
  // M-tilde partials out W, and leave-out residuals match refits
  {
    const auto c = make_case(520, {3, 2, 3, 4, 2, 3}, 3);
    ProjectionWorkspace ws(c.noisy, unguarded());
    const Index G = ws.G();
    double worst_m = 0, worst_r = 0;
    for (Index g = 0; g < G; ++g)
      for (Index h = 0; h < G; ++h) {
        if (g == h) continue;
        Matrix acc = Matrix::Zero(ws.size(g), ws.d());
        for (Index k = 0; k < G; ++k) acc += mtilde(ws, g, k, h).x * c.noisy.W(k);
        worst_m = std::max(worst_m, acc.norm());
        for (Index k = 0; k < G; ++k) {
          const std::array<Index, 2> others{h, k};
          const auto r = leaveout_residuals(ws, g, others);
          const Vector ry = c.noisy.Y(g) - c.noisy.W(g) * oracle::refit(c.noisy, c.noisy.Y(), {g, h, k});
          const Vector rx = c.noisy.X(g) - c.noisy.W(g) * oracle::refit(c.noisy, c.noisy.X(), {g, h, k});
          worst_r = std::max({worst_r, (r.y - ry).norm(), (r.x - rx).norm()});
        }
      }
    o.check(worst_m <= 1e-8, fmt("sum_k Mtilde W_k has norm %.3g", worst_m));
    o.check(worst_r <= 1e-8, fmt("leave-out residuals differ from refits by %.3g", worst_r));
    checks += 2;
  }
  // variance split, L2CO sign, t-statistic scale invariance
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = make_case(530 + seed, {3, 3, 3, 3, 3, 2}, 3);
    ProjectionWorkspace ws(c.noisy);
    const auto t = QuadFormTarget::dense(c.inst.A0);
    const auto l3 = l3co_variance(ws, t);
    const auto& comp = *l3.components;
    const double split = comp.split1() + comp.split2();
    o.check(std::abs(split - l3.value) <= 1e-12 * (std::abs(comp.split1()) + std::abs(comp.split2())),
            fmt("split terms do not recombine (%.17g vs %.17g)", split, l3.value));
    const double l2 = l2co_variance(ws, t).value;
    o.check(l2 >= 0.0, fmt("L2CO negative: %.3g", l2));
    const double th = theta_leaveout(ws, t).theta;
    const auto base = t_test(th, std::abs(l3.value), 0.0, 0.05);
    for (double s : {0.01, 3.0, 1e4}) {
      const auto ts = t.scaled(s);
      const auto r = t_test(theta_leaveout(ws, ts).theta, std::abs(l3co_variance(ws, ts).value), 0.0, 0.05);
      o.check(std::abs(r.t_stat - base.t_stat) <= 1e-10 * (1 + std::abs(base.t_stat)),
              fmt("t-statistic changes under rescaling by %g", s));
    }
    checks += 3;
  }
  // projection representation with clusters S = {g,h,k} removed
  {
    const auto c = make_case(540, {2, 3, 2, 3, 2, 3}, 3);
    const auto& d = c.noisy;
    ProjectionWorkspace ws(d);
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<Index> pick(0, d.G() - 1);
    const Matrix& W = d.W();
    double worst = 0;
    for (int rep = 0; rep < 100; ++rep) {
      const Index g = pick(rng), h = pick(rng), k = pick(rng), l = pick(rng);
      const auto set = cluster_set({g, h, k});
      Matrix S = W.transpose() * W;
      for (Index j : set) S -= d.W(j).transpose() * d.W(j);
      const Matrix direct = d.W(l) * S.inverse() * d.W(g).transpose();
      const Matrix MinvP = ws.M_set(set).inverse() * ws.P_set(set);
      Matrix PlS(d.size(l), ws.set_size(set));
      Index col = 0;
      for (Index j : set) {
        PlS.middleCols(col, d.size(j)) = ws.P(l, j);
        col += d.size(j);
      }
      worst = std::max(worst, (direct - (ws.P(l, g) + PlS * MinvP.middleCols(0, d.size(g)))).norm());
    }
    o.check(worst <= 1e-8, fmt("projection representation off by %.3g", worst));
    ++checks;
  }
  o.summary = fmt("%d identity groups checked", checks);
  return o;
}

Outcome performance() {
  Outcome o;
  Design1Params p;
  p.dims = 100;
  auto rng = stream_rng(9, 1, 0, 0);
  const auto data = generate_design1(p, rng);
  const auto base = iv_design(data.problem);
  const auto design =
      base.with_outcomes(data.problem.outcome - data.beta * data.problem.treatment, data.problem.treatment);
  const auto target = iv_target(data.problem.controls, data.problem.instruments);
  std::vector<std::pair<double, double>> results;
  double secs4 = 0;
  for (unsigned th : {1u, 4u, 8u}) {
    NumericOptions opt;
    opt.threads = th;
    const auto t0 = std::chrono::steady_clock::now();
    ProjectionWorkspace ws(design, opt);
    const double theta = theta_leaveout(ws, target).theta;
    const double v = l3co_variance(ws, target).value;
    const double secs = detail::seconds_since(t0);
    if (th == 4) secs4 = secs;
    results.emplace_back(theta, v);
  }
  const bool same = results[0] == results[1] && results[0] == results[2];
  o.check(same, "estimates differ across 1, 4, 8 workers");
  o.check(secs4 <= 10.0, fmt("4-worker run took %.2f s", secs4));
  o.summary = fmt("G=150, d=100: %.2f s with 4 workers (%u core(s) available); identical across 1/4/8 workers: %s",
                  secs4, cores(), same ? "yes" : "no");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  unsigned threads = 0;
  app.add_option("--criterion", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
  app.add_option("--threads", threads, "simulation workers (default: all cores)");
  CLI11_PARSE(app, argc, argv);
  if (threads == 0) threads = cores();

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"exact unbiasedness under Gaussian cubature", exact_unbiasedness},
      {"production kernels match literal references", cross_implementation},
      {"bias correction characterization", correction_properties},
      {"design I size (d=50, 300 reps)", [=] { return design1_size(threads); }},
      {"design II size (500 reps)", [=] { return design2_size(threads); }},
      {"design III size (500 reps)", [=] { return design3_size(threads); }},
      {"normality of the studentized statistic", [=] { return normality(threads); }},
      {"identity suite", identities},
      {"performance and worker determinism", performance},
  };
  bool all_ok = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (only != 0 && id != only) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.failures.push_back(std::string("exception: ") + e.what());
    }
    const bool ok = o.failures.empty();
    all_ok &= ok;
    std::cout << "criterion " << id << ": " << (ok ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << o.summary << '\n';
    for (const auto& f : o.failures) std::cout << "    " << f << '\n';
    std::cout.flush();
  }
  return all_ok ? 0 : 1;
}
