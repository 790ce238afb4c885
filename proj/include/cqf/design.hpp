#pragma once

#include "cqf/core.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace cqf {

// One input observation: cluster label, the two outcomes and the regressors.
struct Record {
  std::string cluster;
  double y = 0.0;
  double x = 0.0;
  std::vector<double> w;
};

// Regression data with rows stored cluster-major: cluster g occupies rows
// [offset(g), offset(g) + size(g)). Immutable once built.
class ClusteredDesign {
 public:
  ClusteredDesign() = default;

  // Rows must already be grouped; sizes[g] rows per cluster, in order.
  ClusteredDesign(Matrix W, Vector Y, Vector X, const std::vector<Index>& sizes,
                  std::vector<std::string> labels = {})
      : W_(std::move(W)), Y_(std::move(Y)), X_(std::move(X)), labels_(std::move(labels)) {
    if (sizes.empty()) throw ValidationError("design: at least one cluster is required");
    if (W_.cols() < 1) throw ValidationError("design: at least one regressor is required");
    offsets_.assign(1, 0);
    for (Index s : sizes) {
      if (s <= 0) throw ValidationError("design: cluster sizes must be positive");
      offsets_.push_back(offsets_.back() + s);
    }
    const Index n = offsets_.back();
    if (W_.rows() != n || Y_.size() != n || X_.size() != n)
      throw ValidationError("design: row counts do not match cluster sizes");
    if (labels_.empty()) {
      labels_.reserve(sizes.size());
      for (std::size_t g = 0; g < sizes.size(); ++g) labels_.push_back(std::to_string(g));
    }
    if (labels_.size() != sizes.size()) throw ValidationError("design: one label per cluster");
    for (Index j = 0; j < W_.cols(); ++j)
      if (W_.col(j).cwiseAbs().maxCoeff() == 0.0)
        warnings_.push_back("regressor column " + std::to_string(j) + " is identically zero");
  }

  Index n() const { return offsets_.empty() ? 0 : offsets_.back(); }
  Index G() const { return static_cast<Index>(offsets_.size()) - 1; }
  Index d() const { return W_.cols(); }
  Index offset(Index g) const { return offsets_[static_cast<std::size_t>(g)]; }
  Index size(Index g) const { return offset(g + 1) - offset(g); }
  Index max_cluster_size() const {
    Index m = 0;
    for (Index g = 0; g < G(); ++g) m = std::max(m, size(g));
    return m;
  }
  std::vector<Index> cluster_sizes() const {
    std::vector<Index> s;
    for (Index g = 0; g < G(); ++g) s.push_back(size(g));
    return s;
  }

  const Matrix& W() const { return W_; }
  const Vector& Y() const { return Y_; }
  const Vector& X() const { return X_; }
  auto W(Index g) const { return W_.middleRows(offset(g), size(g)); }
  auto Y(Index g) const { return Y_.segment(offset(g), size(g)); }
  auto X(Index g) const { return X_.segment(offset(g), size(g)); }

  const std::vector<std::string>& labels() const { return labels_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  // Same regressors and clusters, different outcomes.
  ClusteredDesign with_outcomes(Vector Y, Vector X) const {
    ClusteredDesign out = *this;
    if (Y.size() != n() || X.size() != n()) throw ValidationError("design: outcome length mismatch");
    out.Y_ = std::move(Y);
    out.X_ = std::move(X);
    return out;
  }

 private:
  Matrix W_;
  Vector Y_, X_;
  std::vector<Index> offsets_;
  std::vector<std::string> labels_;
  std::vector<std::string> warnings_;
};

// Groups rows by cluster label; clusters are numbered in order of first
// appearance and rows keep their relative order within a cluster.
// Returns the permutation applied (row_order[i] = original row of new row i)
// through the optional out-parameter.
inline ClusteredDesign group_rows(const Matrix& W, const Vector& Y, const Vector& X,
                                  const std::vector<std::string>& cluster_of_row,
                                  std::vector<Index>* row_order = nullptr) {
  const Index n = W.rows();
  if (n == 0) throw ValidationError("design: empty input");
  if (Y.size() != n || X.size() != n || static_cast<Index>(cluster_of_row.size()) != n)
    throw ValidationError("design: inconsistent row counts");
  std::unordered_map<std::string, std::size_t> index_of;
  std::vector<std::string> labels;
  std::vector<std::vector<Index>> members;
  for (Index i = 0; i < n; ++i) {
    const auto& lab = cluster_of_row[static_cast<std::size_t>(i)];
    auto [it, inserted] = index_of.emplace(lab, labels.size());
    if (inserted) {
      labels.push_back(lab);
      members.emplace_back();
    }
    members[it->second].push_back(i);
  }
  Matrix Wo(n, W.cols());
  Vector Yo(n), Xo(n);
  std::vector<Index> sizes, order;
  order.reserve(static_cast<std::size_t>(n));
  Index r = 0;
  for (const auto& rows : members) {
    sizes.push_back(static_cast<Index>(rows.size()));
    for (Index i : rows) {
      Wo.row(r) = W.row(i);
      Yo(r) = Y(i);
      Xo(r) = X(i);
      order.push_back(i);
      ++r;
    }
  }
  if (row_order) *row_order = std::move(order);
  return ClusteredDesign(std::move(Wo), std::move(Yo), std::move(Xo), sizes, std::move(labels));
}

inline ClusteredDesign build_design(const std::vector<Record>& rows) {
  if (rows.empty()) throw ValidationError("design: empty input");
  const std::size_t d = rows.front().w.size();
  if (d == 0) throw ValidationError("design: at least one regressor is required");
  const Index n = static_cast<Index>(rows.size());
  Matrix W(n, static_cast<Index>(d));
  Vector Y(n), X(n);
  std::vector<std::string> labels;
  labels.reserve(rows.size());
  for (Index i = 0; i < n; ++i) {
    const Record& rec = rows[static_cast<std::size_t>(i)];
    if (rec.w.size() != d)
      throw ValidationError("design: row " + std::to_string(i) + " has " +
                            std::to_string(rec.w.size()) + " regressors, expected " +
                            std::to_string(d));
    for (std::size_t j = 0; j < d; ++j) W(i, static_cast<Index>(j)) = rec.w[j];
    Y(i) = rec.y;
    X(i) = rec.x;
    labels.push_back(rec.cluster);
  }
  return group_rows(W, Y, X, labels);
}

}  // namespace cqf
