#include "cqf/io.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace cqf;

TEST(Csv, ParsesQuotedFieldsAndCrlf) {
  std::istringstream in("id,name,v\r\n1,\"a, b\",2.5\r\n2,\"say \"\"hi\"\"\",-1e3\r\n");
  const auto t = read_csv(in);
  ASSERT_EQ(t.size(), 2);
  EXPECT_EQ(t.text("name")[0], "a, b");
  EXPECT_EQ(t.text("name")[1], "say \"hi\"");
  EXPECT_DOUBLE_EQ(t.numeric("v")(1), -1000.0);
}

TEST(Csv, ErrorsNameTheColumn) {
  std::istringstream in("cluster,y\na,1\nb,x\n");
  const auto t = read_csv(in);
  try {
    (void)t.numeric("y");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("'y'"), std::string::npos);
  }
  try {
    (void)t.column("firm");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("'firm'"), std::string::npos);
  }
  std::istringstream ragged("a,b\n1\n");
  EXPECT_THROW(read_csv(ragged), ValidationError);
  std::istringstream empty("");
  EXPECT_THROW(read_csv(empty), ValidationError);
}

TEST(Csv, DoublesRoundTripExactly) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  std::vector<double> v;
  for (int i = 0; i < 200; ++i) v.push_back(nd(rng) * std::pow(10.0, i % 40 - 20));
  v.push_back(5e-324);
  v.push_back(-0.0);
  std::vector<std::vector<std::string>> rows;
  for (double x : v) rows.push_back({format_double(x)});
  std::stringstream ss;
  write_csv(ss, {"x"}, rows);
  const auto t = read_csv(ss);
  const Vector back = t.numeric("x");
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(back(static_cast<Index>(i)), v[i]);
}

TEST(Csv, MatrixFileSkipsHeader) {
  const std::string path = ::testing::TempDir() + "/m.csv";
  {
    std::ofstream o(path);
    o << "a,b\n1,2\n3,4.5\n";
  }
  const Matrix m = read_matrix_csv(path);
  ASSERT_EQ(m.rows(), 2);
  EXPECT_DOUBLE_EQ(m(1, 1), 4.5);
  {
    std::ofstream o(path);
    o << "1,2\n-3,4\n";
  }
  EXPECT_DOUBLE_EQ(read_matrix_csv(path)(1, 0), -3.0);
  EXPECT_THROW(read_matrix_csv(path + ".missing"), ValidationError);
}

TEST(Json, ResultEnvelopeValidates) {
  Json j = envelope("diagnose");
  EXPECT_THROW(validate_result(j), ValidationError);
  j["n"] = 4;
  j["clusters"] = 2;
  j["lambda_n"] = 0.5;
  j["phi_n"] = 0.5;
  j["violators"] = Json::array();
  EXPECT_NO_THROW(validate_result(j));
  j["schema_version"] = "other";
  EXPECT_THROW(validate_result(j), ValidationError);
}

TEST(Json, SimulationReportIsDeterministicWithoutTiming) {
  DesignConfig c;
  c.design = 2;
  c.design2.states = 6;
  c.reps = 3;
  c.seed = 4;
  c.power_offsets = std::vector<double>{0.5};
  const auto a = run_size_power(c);
  c.threads = 2;
  const auto b = run_size_power(c);
  const Json ja = to_json(a, false), jb = to_json(b, false);
  EXPECT_EQ(ja.dump(), jb.dump());
  EXPECT_NO_THROW(validate_result(ja));
  std::stringstream ca, cb;
  write_curves_csv(ca, a);
  write_curves_csv(cb, b);
  EXPECT_EQ(ca.str(), cb.str());
  const auto t = read_csv(ca);
  EXPECT_EQ(t.header, (std::vector<std::string>{"design", "method", "alpha", "beta_offset", "reject_rate", "mc_se"}));
  EXPECT_EQ(t.size(), 8);
  EXPECT_TRUE(to_json(a, true).contains("timing"));
}

TEST(Json, ProblemDumpRoundTrips) {
  Design2Params p;
  p.states = 3;
  auto rng = stream_rng(1, 2, 0, 0);
  const auto g = generate_design2(p, rng);
  std::stringstream ss;
  write_problem_csv(ss, g.problem, 0.5);
  const auto t = read_csv(ss);
  EXPECT_EQ(t.size(), g.problem.outcome.size());
  const Vector y = t.numeric("y");
  EXPECT_EQ(y(3), g.problem.outcome(3) - 0.5 * g.problem.treatment(3));
  EXPECT_EQ(t.numeric("z2")(20), g.problem.instruments(20, 1));
  EXPECT_EQ(t.text("cluster")[5], "c2");
}
