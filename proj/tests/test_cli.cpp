#include "support/oracle.hpp"

#include "cqf/io.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>

using namespace cqf;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Run cli(const std::string& args) {
  const std::string dir = ::testing::TempDir();
  const std::string o = dir + "/cli_stdout.txt", e = dir + "/cli_stderr.txt";
  const std::string cmd = std::string(CQF_CLI_PATH) + " " + args + " >" + o + " 2>" + e;
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(o);
  r.err = slurp(e);
  return r;
}

std::string temp(const std::string& name) { return ::testing::TempDir() + "/" + name; }

// 8 clusters of 3 rows, intercept plus two covariates.
struct Fixture {
  std::string csv = temp("fixture.csv");
  std::string a0 = temp("fixture_a0.csv");
  ClusteredDesign design;
  Matrix A0;

  Fixture() {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    const Index n = 24;
    Matrix W(n, 3);
    Vector Y(n), X(n);
    std::vector<std::string> labels;
    for (Index i = 0; i < n; ++i) {
      W(i, 0) = 1.0;
      W(i, 1) = nd(rng);
      W(i, 2) = nd(rng) + 0.3 * W(i, 1);
      Y(i) = W(i, 1) - 0.5 * W(i, 2) + nd(rng);
      X(i) = 0.8 * W(i, 2) + nd(rng);
      labels.push_back("g" + std::to_string(i % 8));
    }
    Matrix L = Matrix::NullaryExpr(3, 3, [&] { return nd(rng); });
    A0 = L * L.transpose();
    A0.row(0).setZero();
    A0.col(0).setZero();
    design = group_rows(W, Y, X, labels);

    std::ofstream f(csv);
    f << "region,y,x,one,w1,w2\n";
    for (Index i = 0; i < n; ++i)
      f << labels[static_cast<std::size_t>(i)] << ',' << format_double(Y(i)) << ',' << format_double(X(i)) << ','
        << format_double(W(i, 0)) << ',' << format_double(W(i, 1)) << ',' << format_double(W(i, 2)) << '\n';
    std::ofstream a(a0);
    write_matrix_csv(a, A0);
  }
};

}  // namespace

TEST(Cli, MissingClusterColumnExitsWithValidationCode) {
  const Fixture fx;
  const auto r = cli("estimate --data " + fx.csv + " --y y --x x --a0 " + fx.a0);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("'cluster'"), std::string::npos) << r.err;
}

TEST(Cli, UsageErrorsAndHelp) {
  EXPECT_EQ(cli("simulate --design 2").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("estimate --help").code, 0);
}

TEST(Cli, EstimateMatchesDenseReference) {
  const Fixture fx;
  const auto r = cli("estimate --data " + fx.csv + " --cluster-col region --y y --x x --a0 " + fx.a0 +
                     " --variance l3co,l2co --theta0 0.25");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = Json::parse(r.out);
  EXPECT_NO_THROW(validate_result(j));
  const double ref = oracle::dense_reference_theta(fx.design, fx.A0);
  EXPECT_NEAR(j["theta_hat"].get<double>(), ref, 1e-10 * std::max(1.0, std::abs(ref)));
  const auto v = oracle::dense_reference_variances(fx.design, fx.A0);
  EXPECT_NEAR(j["variance"][0]["value"].get<double>(), v.l3co, 1e-8 * std::abs(v.l3co));
  EXPECT_NEAR(j["variance"][1]["value"].get<double>(), std::max(v.l2co, 0.0), 1e-8 * std::abs(v.l2co));
  EXPECT_EQ(j["tests"].size(), 2u);
  EXPECT_EQ(j["tests"][0]["theta0"].get<double>(), 0.25);
}

TEST(Cli, EstimateIgnoresRowOrder) {
  const Fixture fx;
  const auto t = read_csv(fx.csv);
  const std::string shuffled = temp("fixture_shuffled.csv");
  {
    std::vector<std::vector<std::string>> rows = t.rows;
    std::reverse(rows.begin(), rows.end());
    std::ofstream f(shuffled);
    write_csv(f, t.header, rows);
  }
  const std::string tail = " --cluster-col region --y y --x x --a0 " + fx.a0;
  const auto a = Json::parse(cli("estimate --data " + fx.csv + tail).out);
  const auto b = Json::parse(cli("estimate --data " + shuffled + tail).out);
  EXPECT_NEAR(a["theta_hat"].get<double>(), b["theta_hat"].get<double>(), 1e-12);
}

TEST(Cli, TwoClustersWarn) {
  const std::string csv = temp("two.csv");
  {
    std::ofstream f(csv);
    f << "cluster,y,w\n";
    const double y[] = {0.3, -1.2, 0.8, 2.1, -0.4, 0.9, 1.7, -0.6};
    const double w[] = {1.0, 0.5, -0.3, 1.2, -0.8, 0.4, 0.7, -1.1};
    for (int i = 0; i < 8; ++i) f << (i < 4 ? "a" : "b") << ',' << y[i] << ',' << w[i] << '\n';
  }
  const std::string a0 = temp("two_a0.csv");
  {
    std::ofstream f(a0);
    f << "1\n";
  }
  const auto r = cli("estimate --data " + csv + " --y y --a0 " + a0 + " --variance l2co");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = Json::parse(r.out);
  ASSERT_FALSE(j["warnings"].empty());
  bool found = false;
  for (const auto& w : j["warnings"]) found |= w.get<std::string>().find("two clusters") != std::string::npos;
  EXPECT_TRUE(found) << j["warnings"].dump();
}

TEST(Cli, DiagnoseFlagsOnlyFullyDummiedCluster) {
  // Four state dummies with four rows each, spread so every cluster holds one
  // row per state: P_gg = I/4 and lambda_min(M_gg) = 0.75.
  const std::string csv = temp("diag.csv");
  auto write = [&](bool lone) {
    std::ofstream f(csv);
    f << "cluster,s1,s2,s3,s4" << (lone ? ",s5" : "") << '\n';
    for (int c = 0; c < 4; ++c)
      for (int s = 0; s < 4; ++s) {
        f << 'k' << c;
        for (int k = 0; k < 4; ++k) f << ',' << (k == s ? 1 : 0);
        if (lone) f << ",0";
        f << '\n';
      }
    if (lone) f << "lone,0,0,0,0,1\n";
  };
  write(false);
  auto r = cli("diagnose --data " + csv);
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = Json::parse(r.out);
  EXPECT_NO_THROW(validate_result(j));
  EXPECT_TRUE(j["violators"].empty());
  EXPECT_NEAR(j["lambda_n"].get<double>(), 0.25, 1e-10);
  EXPECT_NEAR(j["min_lambda_Mgg"].get<double>(), 0.75, 1e-10);

  write(true);
  r = cli("diagnose --data " + csv + " --c 0.01");
  ASSERT_EQ(r.code, 0) << r.err;
  j = Json::parse(r.out);
  ASSERT_EQ(j["violators"].size(), 1u);
  EXPECT_EQ(j["violators"][0]["cluster"], "lone");
}

TEST(Cli, DumpedReplicationReproducesEstimate) {
  const std::string dir = temp("dump");
  std::filesystem::remove_all(dir);
  const auto s = cli("simulate --design 2 --reps 2 --seed 5 --power-grid 0:0:0 --methods L3CO --dump-data " + dir);
  ASSERT_EQ(s.code, 0) << s.err;
  const auto sj = Json::parse(s.out);
  EXPECT_NO_THROW(validate_result(sj));
  for (int rep = 0; rep < 2; ++rep) {
    const std::string base = dir + "/rep_" + std::to_string(rep);
    const auto e = cli("estimate --data " + base + ".csv --y y --x x --a0 " + base + "_a0.csv");
    ASSERT_EQ(e.code, 0) << e.err;
    const auto ej = Json::parse(e.out);
    const double want = sj["replications"][rep]["theta_hat"].get<double>();
    EXPECT_NEAR(ej["theta_hat"].get<double>(), want, 1e-12 * std::max(1.0, std::abs(want)));
    EXPECT_NEAR(ej["tests"][0]["se"].get<double>(), sj["replications"][rep]["se"].get<double>(),
                1e-9 * std::abs(want) + 1e-12);
  }
}

TEST(Cli, IvZeroTreatmentIsNumericalFailure) {
  const std::string csv = temp("iv.csv");
  {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    std::ofstream f(csv);
    f << "cluster,y,d,z1,z2\n";
    for (int i = 0; i < 40; ++i) f << 'c' << i / 4 << ',' << nd(rng) << ",0," << nd(rng) << ',' << nd(rng) << '\n';
  }
  const auto r = cli("iv --data " + csv + " --outcome y --treatment d --instruments z1,z2 --wald");
  EXPECT_EQ(r.code, 3) << r.out;
}

TEST(Cli, IvReportsLmWaldAndConfidenceSet) {
  const std::string csv = temp("iv_ok.csv");
  {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    std::ofstream f(csv);
    f << "cluster,y,d,w,z1,z2,z3\n";
    for (int i = 0; i < 240; ++i) {
      const double z1 = nd(rng), z2 = nd(rng), z3 = nd(rng), w = nd(rng), u = nd(rng);
      const double d = z1 + 0.5 * z2 - 0.5 * z3 + 0.3 * w + u;
      const double y = 1.5 * d + w + 0.5 * u + nd(rng);
      f << 'c' << i / 4 << ',' << y << ',' << d << ',' << w << ',' << z1 << ',' << z2 << ',' << z3 << '\n';
    }
  }
  const auto r = cli("iv --data " + csv +
                     " --outcome y --treatment d --instruments z1,z2,z3 --controls w --beta0 1.5 --lm --wald "
                     "--ci-grid auto");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = Json::parse(r.out);
  EXPECT_NO_THROW(validate_result(j));
  EXPECT_NEAR(j["beta_hat"].get<double>(), 1.5, 0.3);
  EXPECT_FALSE(j["lm"]["reject"].get<bool>());
  EXPECT_FALSE(j["weak_identification"].get<bool>());
  ASSERT_EQ(j["confidence_set"]["intervals"].size(), 1u);
  const auto& in = j["confidence_set"]["intervals"][0];
  EXPECT_LT(in["lo"].get<double>(), j["beta_hat"].get<double>());
  EXPECT_GT(in["hi"].get<double>(), j["beta_hat"].get<double>());
}
