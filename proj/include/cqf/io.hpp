#pragma once

// CSV tables and the JSON result schema.

#include "cqf/simulation.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace cqf {

inline constexpr const char* kSchemaVersion = "cqf-result/1";

// ---------------------------------------------------------------------------
// CSV

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  Index size() const { return static_cast<Index>(rows.size()); }

  std::size_t column(const std::string& name) const {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return j;
    throw ValidationError("column '" + name + "' not found");
  }
  bool has(const std::string& name) const {
    return std::find(header.begin(), header.end(), name) != header.end();
  }

  std::vector<std::string> text(const std::string& name) const {
    const auto j = column(name);
    std::vector<std::string> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r[j]);
    return out;
  }

  Vector numeric(const std::string& name) const {
    const auto j = column(name);
    Vector out(size());
    for (Index i = 0; i < size(); ++i) out(i) = parse_number(rows[static_cast<std::size_t>(i)][j], name, i);
    return out;
  }

  Matrix numeric(const std::vector<std::string>& names) const {
    Matrix out(size(), static_cast<Index>(names.size()));
    for (std::size_t c = 0; c < names.size(); ++c) out.col(static_cast<Index>(c)) = numeric(names[c]);
    return out;
  }

  static double parse_number(const std::string& s, const std::string& col, Index row) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = b + s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(*b))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(e[-1]))) --e;
    if (b < e && *b == '+') ++b;
    const auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || ptr != e || b == e)
      throw ValidationError("column '" + col + "', row " + std::to_string(row + 1) + ": '" + s +
                            "' is not a number");
    if (!std::isfinite(v))
      throw ValidationError("column '" + col + "', row " + std::to_string(row + 1) + ": non-finite value");
    return v;
  }
};

namespace detail {

inline std::vector<std::string> split_csv_record(std::istream& in, bool& got) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false, any = false;
  got = false;
  for (int c; (c = in.get()) != EOF;) {
    any = true;
    const char ch = static_cast<char>(c);
    if (quoted) {
      if (ch == '"') {
        if (in.peek() == '"') {
          field += '"';
          in.get();
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (ch == '\n') {
      break;
    } else if (ch != '\r') {
      field += ch;
    }
  }
  if (quoted) throw ValidationError("csv: unterminated quoted field");
  if (!any) return fields;
  got = true;
  fields.push_back(std::move(field));
  return fields;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace detail

inline Table read_csv(std::istream& in) {
  Table t;
  bool got = false;
  t.header = detail::split_csv_record(in, got);
  if (!got || (t.header.size() == 1 && t.header[0].empty())) throw ValidationError("csv: missing header row");
  for (auto& h : t.header) {
    while (!h.empty() && std::isspace(static_cast<unsigned char>(h.back()))) h.pop_back();
    while (!h.empty() && std::isspace(static_cast<unsigned char>(h.front()))) h.erase(h.begin());
  }
  for (Index line = 2;; ++line) {
    auto rec = detail::split_csv_record(in, got);
    if (!got) break;
    if (rec.size() == 1 && rec[0].empty()) continue;
    if (rec.size() != t.header.size())
      throw ValidationError("csv: line " + std::to_string(line) + " has " + std::to_string(rec.size()) +
                            " fields, expected " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(rec));
  }
  return t;
}

inline Table read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  return read_csv(in);
}

// Numeric matrix without header; a non-numeric first row is treated as a header and skipped.
inline Matrix read_matrix_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::vector<std::vector<std::string>> recs;
  bool got = false;
  for (;;) {
    auto rec = detail::split_csv_record(in, got);
    if (!got) break;
    if (rec.size() == 1 && rec[0].empty()) continue;
    recs.push_back(std::move(rec));
  }
  if (!recs.empty()) {
    double tmp = 0.0;
    const auto& f = recs.front().front();
    const auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), tmp);
    if (ec != std::errc() && !f.empty() && f[0] != '+') recs.erase(recs.begin());
  }
  if (recs.empty()) throw ValidationError("'" + path + "' contains no numeric rows");
  const std::size_t cols = recs.front().size();
  Matrix out(static_cast<Index>(recs.size()), static_cast<Index>(cols));
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (recs[i].size() != cols) throw ValidationError("'" + path + "': ragged rows");
    for (std::size_t j = 0; j < cols; ++j)
      out(static_cast<Index>(i), static_cast<Index>(j)) =
          Table::parse_number(recs[i][j], path + " col " + std::to_string(j + 1), static_cast<Index>(i));
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv(std::ostream& out, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << detail::csv_escape(header[j]);
  out << '\n';
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < r.size(); ++j) out << (j ? "," : "") << detail::csv_escape(r[j]);
    out << '\n';
  }
}

inline void write_matrix_csv(std::ostream& out, const Matrix& M) {
  for (Index i = 0; i < M.rows(); ++i) {
    for (Index j = 0; j < M.cols(); ++j) out << (j ? "," : "") << format_double(M(i, j));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// JSON

using Json = nlohmann::ordered_json;

inline Json envelope(const std::string& command) {
  Json j;
  j["schema_version"] = kSchemaVersion;
  j["command"] = command;
  j["warnings"] = Json::array();
  return j;
}

inline void add_warnings(Json& j, const std::vector<std::string>& w) {
  for (const auto& s : w) j["warnings"].push_back(s);
}

// Required keys per command; throws ValidationError on mismatch.
inline void validate_result(const Json& j) {
  auto need = [&](const Json& obj, const char* key) {
    if (!obj.is_object() || !obj.contains(key)) throw ValidationError(std::string("result is missing '") + key + "'");
  };
  need(j, "schema_version");
  need(j, "command");
  need(j, "warnings");
  if (j["schema_version"] != kSchemaVersion) throw ValidationError("unexpected schema version");
  if (!j["warnings"].is_array()) throw ValidationError("'warnings' must be an array");
  const std::string cmd = j["command"];
  static const std::map<std::string, std::vector<const char*>> required{
      {"estimate", {"n", "clusters", "theta_hat", "theta_plugin", "variance", "tests"}},
      {"ftest", {"n", "clusters", "theta_hat", "theta0", "variance", "tests"}},
      {"varcomp", {"n", "clusters", "target", "theta_hat", "theta_plugin", "variance", "tests"}},
      {"iv", {"n", "clusters", "beta_hat", "xbx"}},
      {"diagnose", {"n", "clusters", "lambda_n", "phi_n", "violators"}},
      {"simulate", {"config", "size", "power", "failed"}},
  };
  const auto it = required.find(cmd);
  if (it == required.end()) throw ValidationError("unknown command '" + cmd + "'");
  for (const char* k : it->second) need(j, k);
}

inline Json to_json(const TestResult& t) {
  Json j;
  j["theta_hat"] = t.theta_hat;
  j["theta0"] = t.theta0;
  j["se"] = t.omega_hat;
  j["t_stat"] = t.t_stat;
  j["p_value"] = t.p_value;
  j["ci"] = {t.ci_lo, t.ci_hi};
  j["alpha"] = t.alpha;
  j["reject"] = t.reject;
  j["variance_clamped"] = t.variance_clamped;
  return j;
}

inline Json to_json(const L3coComponents& c) {
  Json j;
  for (std::size_t i = 0; i < 5; ++i) j["omega" + std::to_string(i + 1)] = c.terms[i];
  j["split1"] = c.split1();
  j["split2"] = c.split2();
  return j;
}

inline Json to_json(const VarianceEstimate& v) {
  Json j;
  j["method"] = to_string(v.method);
  j["value"] = v.value;
  if (v.components) j["components"] = to_json(*v.components);
  j["regularized_solves"] = v.regularized_solve_count;
  j["wall_time_seconds"] = v.wall_time;
  return j;
}

inline Json to_json(const DiagnosticsReport& r, double c) {
  Json j;
  j["lambda_n"] = r.lambda_n;
  j["phi_n"] = r.phi_n;
  j["min_lambda_Mgg"] = r.min_lambda_Mgg;
  j["min_lambda_pair"] = r.min_lambda_pair;
  j["pairs_checked"] = r.pairs_checked;
  j["pairs_exhaustive"] = r.pairs_exhaustive;
  j["min_lambda_triple"] = r.min_lambda_triple;
  j["triples_checked"] = r.triples_checked;
  j["triples_exhaustive"] = r.triples_exhaustive;
  j["gram_lambda_min"] = r.gram_lambda_min;
  j["gram_lambda_max"] = r.gram_lambda_max;
  j["max_cluster_size"] = r.max_cluster_size;
  j["threshold"] = c;
  j["lambda_min_Mgg"] = r.lambda_min_Mgg;
  return j;
}

inline Json to_json(const RateCell& c, bool with_offset) {
  Json j;
  j["method"] = c.method;
  j["alpha"] = c.alpha;
  if (with_offset) j["beta_offset"] = c.offset;
  j["reject_rate"] = c.rate;
  j["mc_se"] = c.mc_se;
  j["rejections"] = c.rejections;
  j["valid_reps"] = c.valid;
  return j;
}

// Timing is optional so that reports can be compared byte for byte.
inline Json to_json(const SimulationReport& r, bool include_timing) {
  Json j = envelope("simulate");
  const auto& c = r.config;
  Json cfg;
  cfg["design"] = c.design;
  if (c.design == 1) cfg["dims"] = c.dims;
  cfg["reps"] = c.reps;
  cfg["seed"] = c.seed;
  cfg["alphas"] = c.alphas;
  Json methods = Json::array();
  for (auto m : c.methods) methods.push_back(to_string(m));
  cfg["methods"] = methods;
  cfg["power_grid"] = c.power_offsets ? "explicit" : "default";
  j["config"] = cfg;
  j["beta_true"] = r.beta_true;
  if (!c.power_offsets) j["nominal_se"] = r.nominal_se;
  j["size"] = Json::array();
  for (const auto& s : r.size) j["size"].push_back(to_json(s, false));
  j["power"] = Json::array();
  for (const auto& p : r.power) j["power"].push_back(to_json(p, true));
  j["failed"] = r.failed;
  Json fails = Json::array();
  Index fell_back = 0;
  long regularized = 0;
  for (const auto& rec : r.replications) {
    if (!rec.ok) fails.push_back({{"rep", rec.rep}, {"error", rec.error}});
    fell_back += rec.fell_back ? 1 : 0;
    regularized += rec.regularized;
  }
  j["failures"] = fails;
  j["l3co_nonpositive_fallbacks"] = fell_back;
  j["regularized_solves"] = regularized;
  if (include_timing) {
    Json t;
    t["total_seconds"] = r.total_seconds;
    std::vector<double> per;
    for (const auto& rec : r.replications) per.push_back(rec.seconds);
    t["per_replication_seconds"] = per;
    j["timing"] = t;
  }
  if (r.failed > 0)
    j["warnings"].push_back(std::to_string(r.failed) + " replication(s) failed and are excluded from the rates");
  return j;
}

inline void write_curves_csv(std::ostream& out, const SimulationReport& r) {
  std::vector<std::vector<std::string>> rows;
  const std::string d = std::to_string(r.config.design);
  for (const auto& s : r.size)
    rows.push_back({d, s.method, format_double(s.alpha), format_double(0.0), format_double(s.rate), format_double(s.mc_se)});
  for (const auto& p : r.power)
    rows.push_back({d, p.method, format_double(p.alpha), format_double(p.offset), format_double(p.rate), format_double(p.mc_se)});
  write_csv(out, {"design", "method", "alpha", "beta_offset", "reject_rate", "mc_se"}, rows);
}

// One replication as a flat CSV: cluster, y (outcome minus beta times treatment), x, controls, instruments.
inline void write_problem_csv(std::ostream& out, const IVProblem& p, double beta) {
  std::vector<std::string> header{"cluster", "y", "x"};
  for (Index j = 0; j < p.controls.cols(); ++j) header.push_back("w" + std::to_string(j + 1));
  for (Index j = 0; j < p.instruments.cols(); ++j) header.push_back("z" + std::to_string(j + 1));
  std::vector<std::vector<std::string>> rows;
  Index r = 0;
  for (std::size_t g = 0; g < p.cluster_sizes.size(); ++g)
    for (Index i = 0; i < p.cluster_sizes[g]; ++i, ++r) {
      std::vector<std::string> row{"c" + std::to_string(g + 1), format_double(p.outcome(r) - beta * p.treatment(r)),
                                   format_double(p.treatment(r))};
      for (Index j = 0; j < p.controls.cols(); ++j) row.push_back(format_double(p.controls(r, j)));
      for (Index j = 0; j < p.instruments.cols(); ++j) row.push_back(format_double(p.instruments(r, j)));
      rows.push_back(std::move(row));
    }
  write_csv(out, header, rows);
}

}  // namespace cqf
