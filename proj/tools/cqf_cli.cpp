// Command-line front end: estimate, iv, varcomp, ftest, simulate, diagnose.
// Exit codes: 0 success, 2 invalid input, 3 numerical failure.

#include "cqf/io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

using namespace cqf;

namespace {

struct Common {
  std::string data;
  std::string cluster_col = "cluster";
  std::string out;
  std::vector<std::string> variance{"l3co"};
  double alpha = 0.05;
  unsigned threads = 1;
  double ridge = 0.0;
  bool strict = false;

  NumericOptions options() const {
    NumericOptions o;
    o.threads = threads;
    o.ridge_threshold = ridge;
    o.strict = strict;
    return o;
  }
};

void add_common(CLI::App* sub, Common& c, bool with_cluster = true) {
  sub->add_option("--data", c.data, "input CSV with a header row")->required();
  if (with_cluster) sub->add_option("--cluster-col", c.cluster_col, "cluster id column");
  sub->add_option("--out", c.out, "write JSON here instead of stdout");
  sub->add_option("--alpha", c.alpha, "test level");
  sub->add_option("--threads", c.threads, "worker threads (0 = all cores)");
  sub->add_option("--ridge", c.ridge, "ridge threshold for leave-out blocks (0 = 1/ln(n^2))");
  sub->add_flag("--strict", c.strict, "fail instead of regularizing singular leave-out blocks");
}

void add_variance(CLI::App* sub, Common& c) {
  sub->add_option("--variance", c.variance, "l3co, l3co_nonneg, l2co (comma separated)")->delimiter(',');
}

void emit(const Json& j, const std::string& out) {
  validate_result(j);
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream f(out);
  if (!f) throw ValidationError("cannot write '" + out + "'");
  f << j.dump(2) << '\n';
}

std::vector<std::string> other_columns(const Table& t, const std::vector<std::string>& exclude) {
  std::vector<std::string> out;
  for (const auto& h : t.header)
    if (std::find(exclude.begin(), exclude.end(), h) == exclude.end()) out.push_back(h);
  return out;
}

ClusteredDesign load_design(const Table& t, const std::string& cluster, const std::string& y, const std::string& x,
                            std::vector<std::string> w) {
  const auto labels = t.text(cluster);
  if (w.empty()) w = other_columns(t, {cluster, y, x});
  if (w.empty()) throw ValidationError("no regressor columns");
  return group_rows(t.numeric(w), t.numeric(y), t.numeric(x), labels);
}

std::vector<double> parse_grid(const std::string& spec) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() != 3) throw ValidationError("grid must be lo:hi:steps, got '" + spec + "'");
  const double lo = Table::parse_number(parts[0], "grid", 0), hi = Table::parse_number(parts[1], "grid", 0);
  const double steps = Table::parse_number(parts[2], "grid", 0);
  if (steps < 0 || steps != std::floor(steps)) throw ValidationError("grid steps must be a nonnegative integer");
  std::vector<double> g;
  const auto n = static_cast<int>(steps);
  if (n == 1) g.push_back(lo);
  for (int i = 0; n > 1 && i < n; ++i) g.push_back(lo + (hi - lo) * i / (n - 1));
  if (n > 1 && !(hi > lo)) throw ValidationError("grid needs hi > lo");
  return g;
}

// theta_hat, variance estimates and t-tests for one quadratic form.
Json quadform_result(const std::string& command, const ProjectionWorkspace& ws, const QuadFormTarget& target,
                     double theta0, const Common& c) {
  Json j = envelope(command);
  add_warnings(j, ws.design().warnings());
  j["n"] = ws.n();
  j["clusters"] = ws.G();
  j["regressors"] = ws.d();
  j["ridge_threshold"] = ws.ridge_threshold();
  const LeaveOutOperator op(ws, target);
  const Vector& X = ws.design().X();
  const Vector& Y = ws.design().Y();
  const double theta = op.theta_leaveout(X, Y);
  j["theta_hat"] = theta;
  j["theta_plugin"] = op.theta_plugin(X, Y);
  j["theta0"] = theta0;
  if (op.any_regularized()) j["warnings"].push_back("a leave-one-out block was regularized; theta_hat is approximate");

  std::vector<VarianceMethod> methods;
  for (const auto& v : c.variance) methods.push_back(parse_variance_method(v));
  VarianceKernel kernel(op, X, {Y});
  std::optional<L3coComponents> l3;
  std::optional<double> l2;
  j["variance"] = Json::array();
  j["tests"] = Json::array();
  for (auto m : methods) {
    const auto t0 = std::chrono::steady_clock::now();
    if (m != VarianceMethod::L2CO && !l3) l3 = kernel.l3co().front();
    if (!l2) l2 = kernel.l2co().front();
    const auto sel = select_variance(m, l3 ? &*l3 : nullptr, *l2);
    VarianceEstimate e;
    e.method = m;
    e.value = sel.value;
    if (m != VarianceMethod::L2CO) e.components = *l3;
    e.regularized_solve_count = kernel.regularized_count();
    e.wall_time = detail::seconds_since(t0);
    Json vj = to_json(e);
    vj["fell_back_to_nonneg"] = sel.fell_back;
    j["variance"].push_back(vj);
    if (sel.fell_back) j["warnings"].push_back("L3CO variance was not positive; used the nonnegative variant");
    Json tj = to_json(t_test(theta, sel.value, theta0, c.alpha));
    tj["variance"] = to_string(m);
    j["tests"].push_back(tj);
  }
  if (kernel.regularized_count() > 0)
    j["warnings"].push_back(std::to_string(kernel.regularized_count()) +
                            " leave-out solves were ridge regularized");
  add_warnings(j, detail::cluster_count_warnings(ws.G()));
  return j;
}

int run(int argc, char** argv) {
  CLI::App app{"Leave-cluster-out inference for quadratic forms of regression coefficients"};
  app.require_subcommand(1);

  // estimate
  Common est;
  std::string est_y, est_x, est_a0, est_R, est_q;
  std::vector<std::string> est_w;
  double est_theta0 = 0.0;
  auto* e = app.add_subcommand("estimate", "leave-out estimate of X'BY for a given A0");
  add_common(e, est);
  add_variance(e, est);
  e->add_option("--y", est_y, "outcome column Y")->required();
  e->add_option("--x", est_x, "outcome column X (defaults to Y)");
  e->add_option("--w", est_w, "regressor columns (default: all others)")->delimiter(',');
  auto* a0opt = e->add_option("--a0", est_a0, "dense d x d CSV for A0");
  auto* ropt = e->add_option("--restrictions", est_R, "R matrix CSV; A0 = R'(R S^-1 R')^-1 R");
  e->add_option("--q", est_q, "q vector CSV for --restrictions")->needs(ropt);
  e->add_option("--theta0", est_theta0, "null value (ignored with --restrictions)");
  a0opt->excludes(ropt);

  // ftest
  Common ft;
  std::string ft_y, ft_R, ft_q;
  std::vector<std::string> ft_w;
  auto* f = app.add_subcommand("ftest", "test linear restrictions R gamma = q");
  add_common(f, ft);
  add_variance(f, ft);
  f->add_option("--y", ft_y, "outcome column")->required();
  f->add_option("--w", ft_w, "regressor columns (default: all others)")->delimiter(',');
  f->add_option("--restrictions", ft_R, "R matrix CSV")->required();
  f->add_option("--q", ft_q, "q vector CSV (default zero)");

  // varcomp
  Common vc;
  std::string vc_worker = "worker", vc_firm = "firm", vc_match, vc_y, vc_target = "psi";
  std::vector<std::string> vc_controls;
  auto* v = app.add_subcommand("varcomp", "variance components of worker and firm effects");
  add_common(v, vc, false);
  add_variance(v, vc);
  v->add_option("--worker-col", vc_worker, "worker id column");
  v->add_option("--firm-col", vc_firm, "firm id column");
  v->add_option("--match-col", vc_match, "match (cluster) id column; default worker-firm pair");
  v->add_option("--y", vc_y, "outcome column")->required();
  v->add_option("--controls", vc_controls, "control columns")->delimiter(',');
  v->add_option("--target", vc_target, "psi, alpha or cov")->check(CLI::IsMember({"psi", "alpha", "cov"}));

  // iv
  Common iv;
  std::string iv_y, iv_x, iv_grid;
  std::vector<std::string> iv_z, iv_w;
  double iv_beta0 = 0.0;
  bool iv_wald = false, iv_lm = false;
  auto* i = app.add_subcommand("iv", "weak-identification robust IV tests and confidence sets");
  add_common(i, iv);
  i->add_option("--variance", iv.variance, "l3co, l3co_nonneg or l2co")->delimiter(',');
  i->add_option("--outcome", iv_y, "outcome column")->required();
  i->add_option("--treatment", iv_x, "treatment column")->required();
  i->add_option("--instruments", iv_z, "instrument columns")->delimiter(',')->required();
  i->add_option("--controls", iv_w, "control columns")->delimiter(',');
  i->add_option("--beta0", iv_beta0, "null value of beta");
  i->add_flag("--wald", iv_wald, "report the Wald test");
  i->add_flag("--lm", iv_lm, "report the LM test (default)");
  i->add_option("--ci-grid", iv_grid, "confidence set grid lo:hi:steps, or 'auto'");

  // diagnose
  Common dg;
  std::vector<std::string> dg_w;
  double dg_c = 0.01;
  Index dg_pairs = 1'000'000, dg_triples = 10'000;
  std::uint64_t dg_seed = 0;
  auto* d = app.add_subcommand("diagnose", "leverage diagnostics for the design");
  add_common(d, dg);
  d->add_option("--w", dg_w, "regressor columns (default: all others)")->delimiter(',');
  d->add_option("--c", dg_c, "flag clusters with lambda_min(M_gg) below this");
  d->add_option("--pair-budget", dg_pairs, "max (k,g) pairs to check");
  d->add_option("--triple-budget", dg_triples, "max triples to sample");
  d->add_option("--seed", dg_seed, "seed for sampled triples");

  // simulate
  int sim_design = 1;
  Index sim_dims = 50, sim_reps = 100;
  std::uint64_t sim_seed = 0;
  std::vector<double> sim_alpha{0.05, 0.10};
  std::vector<std::string> sim_methods{"L3CO", "TSLS"};
  std::string sim_grid, sim_out, sim_curves, sim_dump;
  unsigned sim_threads = 1;
  bool sim_timing = false;
  auto* s = app.add_subcommand("simulate", "size and power simulations");
  s->add_option("--design", sim_design, "1, 2 or 3")->check(CLI::Range(1, 3));
  s->add_option("--dims", sim_dims, "d_z = d_w for design 1")->check(CLI::IsMember({50, 100, 150}));
  s->add_option("--reps", sim_reps, "replications");
  s->add_option("--seed", sim_seed, "base seed")->required();
  s->add_option("--alpha", sim_alpha, "levels")->delimiter(',');
  s->add_option("--methods", sim_methods, "L3CO, L3CO_NONNEG, L2CO, TSLS")->delimiter(',');
  s->add_option("--power-grid", sim_grid, "beta offsets lo:hi:steps (default 21 over +-5 nominal SE)");
  s->add_option("--out", sim_out, "report JSON");
  s->add_option("--curves", sim_curves, "power curve CSV");
  s->add_option("--threads", sim_threads, "worker threads (0 = all cores)");
  s->add_option("--dump-data", sim_dump, "directory for per-replication data and A0 files");
  s->add_flag("--timing", sim_timing, "include wall-clock timings in the report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  if (*e) {
    const auto t = read_csv(est.data);
    const std::string x = est_x.empty() ? est_y : est_x;
    std::vector<std::string> excl{est.cluster_col, est_y, x};
    ProjectionWorkspace ws(load_design(t, est.cluster_col, est_y, x, est_w), est.options());
    QuadFormTarget target;
    double theta0 = est_theta0;
    if (!est_a0.empty()) {
      target = QuadFormTarget::dense(read_matrix_csv(est_a0));
    } else if (!est_R.empty()) {
      const Matrix R = read_matrix_csv(est_R);
      const Vector q = est_q.empty() ? Vector::Zero(R.rows()) : Vector(read_matrix_csv(est_q).reshaped());
      auto rt = restriction_target(ws, R, q);
      target = rt.target;
      theta0 = rt.theta0;
    } else {
      throw ValidationError("one of --a0 or --restrictions is required");
    }
    emit(quadform_result("estimate", ws, target, theta0, est), est.out);
  } else if (*f) {
    const auto t = read_csv(ft.data);
    ProjectionWorkspace ws(load_design(t, ft.cluster_col, ft_y, ft_y, ft_w), ft.options());
    const Matrix R = read_matrix_csv(ft_R);
    const Vector q = ft_q.empty() ? Vector::Zero(R.rows()) : Vector(read_matrix_csv(ft_q).reshaped());
    const auto rt = restriction_target(ws, R, q);
    emit(quadform_result("ftest", ws, rt.target, rt.theta0, ft), ft.out);
  } else if (*v) {
    const auto t = read_csv(vc.data);
    MatchStructure ms;
    ms.worker = t.text(vc_worker);
    ms.firm = t.text(vc_firm);
    if (vc_match.empty()) {
      for (Index r = 0; r < t.size(); ++r) ms.match.push_back(ms.worker[static_cast<std::size_t>(r)] + "\x1f" + ms.firm[static_cast<std::size_t>(r)]);
    } else {
      ms.match = t.text(vc_match);
    }
    ms.outcome = t.numeric(vc_y);
    ms.controls = vc_controls.empty() ? Matrix(t.size(), 0) : t.numeric(vc_controls);
    auto model = varcomp_model(ms);
    ProjectionWorkspace ws(model.design, vc.options());
    Json j = quadform_result("varcomp", ws, model.targets.at(vc_target), 0.0, vc);
    j["target"] = vc_target;
    j["firms"] = model.firms.size();
    j["workers"] = model.workers.size();
    emit(j, vc.out);
  } else if (*i) {
    const auto t = read_csv(iv.data);
    const auto labels = t.text(iv.cluster_col);
    std::vector<std::string> cols{iv_y, iv_x};
    cols.insert(cols.end(), iv_w.begin(), iv_w.end());
    cols.insert(cols.end(), iv_z.begin(), iv_z.end());
    Matrix all(t.size(), static_cast<Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) all.col(static_cast<Index>(k)) = t.numeric(cols[k]);
    std::vector<Index> order;
    const auto grouped = group_rows(all, Vector::Zero(t.size()), Vector::Zero(t.size()), labels, &order);
    IVProblem p;
    const Matrix& A = grouped.W();
    p.outcome = A.col(0);
    p.treatment = A.col(1);
    p.controls = A.middleCols(2, static_cast<Index>(iv_w.size()));
    p.instruments = A.rightCols(static_cast<Index>(iv_z.size()));
    for (Index g = 0; g < grouped.G(); ++g) p.cluster_sizes.push_back(grouped.size(g));
    if (iv.variance.size() != 1) throw ValidationError("iv takes a single --variance method");
    const auto method = parse_variance_method(iv.variance.front());
    const IVAnalysis a(p, iv.options());
    Json j = envelope("iv");
    add_warnings(j, a.warnings());
    j["n"] = p.outcome.size();
    j["clusters"] = grouped.G();
    j["instruments"] = p.instruments.cols();
    j["controls"] = p.controls.cols();
    j["variance"] = to_string(method);
    j["xbx"] = a.curve().xbx();
    j["beta_hat"] = a.curve().xbx() != 0.0 ? Json(a.curve().xby() / a.curve().xbx()) : Json(nullptr);
    if (iv_lm || !iv_wald) {
      const auto lm = a.lm_test(iv_beta0, iv.alpha, method);
      Json lj = to_json(lm.test);
      lj["beta0"] = iv_beta0;
      j["lm"] = lj;
      if (lm.fell_back) j["warnings"].push_back("L3CO variance was not positive at beta0; used the nonnegative variant");
    }
    if (iv_wald) {
      const auto w = a.wald(iv_beta0, iv.alpha, method);
      j["wald"] = to_json(w.test);
      j["weak_identification"] = w.weak_identification;
      add_warnings(j, w.warnings);
    }
    if (!iv_grid.empty()) {
      const auto grid = iv_grid == "auto" ? a.default_grid(iv.alpha, method) : parse_grid(iv_grid);
      const auto cs = a.confidence_set(grid, iv.alpha, method);
      Json cj = Json::array();
      for (const auto& in : cs.intervals)
        cj.push_back({{"lo", in.lo}, {"hi", in.hi}, {"open_below", in.open_below}, {"open_above", in.open_above}});
      j["confidence_set"] = {{"alpha", iv.alpha}, {"grid_lo", grid.front()}, {"grid_hi", grid.back()},
                             {"grid_points", grid.size()}, {"intervals", cj}};
      add_warnings(j, cs.warnings);
    }
    const long reg = a.curve().regularized_count();
    if (reg > 0) j["warnings"].push_back(std::to_string(reg) + " leave-out solves were ridge regularized");
    emit(j, iv.out);
  } else if (*d) {
    const auto t = read_csv(dg.data);
    const auto labels = t.text(dg.cluster_col);
    const auto w = dg_w.empty() ? other_columns(t, {dg.cluster_col}) : dg_w;
    if (w.empty()) throw ValidationError("no regressor columns");
    const Matrix W = t.numeric(w);
    ProjectionWorkspace ws(group_rows(W, Vector::Zero(t.size()), Vector::Zero(t.size()), labels), dg.options());
    DiagnosticsOptions o;
    o.pair_budget = dg_pairs;
    o.triple_budget = dg_triples;
    o.seed = dg_seed;
    const auto r = leverage_diagnostics(ws, o);
    Json j = envelope("diagnose");
    add_warnings(j, ws.design().warnings());
    j["n"] = ws.n();
    j["clusters"] = ws.G();
    const Json body = to_json(r, dg_c);
    for (const auto& [k, val] : body.items()) j[k] = val;
    Json viol = Json::array();
    for (Index g : r.violators(dg_c))
      viol.push_back({{"cluster", ws.design().labels()[static_cast<std::size_t>(g)]},
                      {"lambda_min_Mgg", r.lambda_min_Mgg[static_cast<std::size_t>(g)]}});
    j["violators"] = viol;
    if (!viol.empty())
      j["warnings"].push_back(std::to_string(viol.size()) + " cluster(s) have lambda_min(M_gg) below " +
                              format_double(dg_c));
    emit(j, dg.out);
  } else if (*s) {
    DesignConfig c;
    c.design = sim_design;
    c.dims = sim_dims;
    c.reps = sim_reps;
    c.seed = sim_seed;
    c.alphas = sim_alpha;
    c.threads = sim_threads;
    c.methods.clear();
    for (const auto& m : sim_methods) c.methods.push_back(parse_sim_method(m));
    if (sim_grid.empty()) c.power_offsets.reset();
    else c.power_offsets = parse_grid(sim_grid);
    const auto gen = make_generator(c);
    const auto report = run_size_power(c, gen);
    Json j = to_json(report, sim_timing);
    Json reps = Json::array();
    for (const auto& r : report.replications) {
      if (!r.ok) continue;
      reps.push_back({{"rep", r.rep}, {"theta_hat", r.theta_hat}, {"se", r.omega_hat},
                      {"t_stat", r.t_stat}, {"beta_hat", r.beta_hat}});
    }
    j["replications"] = reps;
    if (!sim_curves.empty()) {
      std::ofstream cf(sim_curves);
      if (!cf) throw ValidationError("cannot write '" + sim_curves + "'");
      write_curves_csv(cf, report);
    }
    if (!sim_dump.empty()) {
      std::filesystem::create_directories(sim_dump);
      for (Index r = 0; r < c.reps; ++r) {
        const auto data = gen(r);
        const std::string base = sim_dump + "/rep_" + std::to_string(r);
        std::ofstream df(base + ".csv");
        write_problem_csv(df, data.problem, data.beta);
        std::ofstream af(base + "_a0.csv");
        write_matrix_csv(af, iv_target(data.problem.controls, data.problem.instruments).dense_matrix());
      }
    }
    emit(j, sim_out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ValidationError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const NumericalError& err) {
    std::cerr << "numerical error: " << err.what() << '\n';
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 3;
  }
}
