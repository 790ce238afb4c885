#pragma once

// Shared vocabulary for the cqf library: Eigen aliases, the exception
// hierarchy, numeric options, deterministic summation and a small
// parallel-for used by the O(G^2) and O(G^3) loops.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace cqf {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Errors
//
// Validation errors are user-input problems (CLI exit code 2); numerical
// errors mean the data are well-formed but the estimator is not computable
// (exit code 3).

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual bool numerical() const noexcept { return false; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
  bool numerical() const noexcept override { return true; }
};

class RankDeficient : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class SingularLeaveOut : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DoesNotExist : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class TooLarge : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class TooFewClusters : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NotPSD : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// ---------------------------------------------------------------------------
// Options

struct NumericOptions {
  // Ridge threshold for leave-out block solves; <= 0 selects 1/ln(n^2).
  double ridge_threshold = 0.0;
  // Throw SingularLeaveOut instead of regularizing.
  bool strict = false;
  // Relative eigenvalue floor for the global Gram matrix.
  double rank_tolerance = 1e-12;
  // Dense n x n caches (P, A, B) are kept when they fit in this budget.
  std::size_t cache_budget_bytes = std::size_t{1} << 30;
  // Worker threads for cluster loops; 0 means hardware concurrency.
  unsigned threads = 1;
};

inline double default_ridge_threshold(Index n) {
  const double nn = static_cast<double>(n);
  return 1.0 / std::log(nn * nn);
}

inline double resolve_ridge_threshold(const NumericOptions& opt, Index n) {
  return opt.ridge_threshold > 0.0 ? opt.ridge_threshold : default_ridge_threshold(n);
}

// Counts ridge-regularized solves. Shared across workers.
class RidgeCounter {
 public:
  RidgeCounter() = default;
  RidgeCounter(const RidgeCounter& other) : count_(other.count()) {}
  RidgeCounter& operator=(const RidgeCounter& other) {
    count_.store(other.count());
    return *this;
  }
  void add(long k = 1) const noexcept { count_.fetch_add(k, std::memory_order_relaxed); }
  long count() const noexcept { return count_.load(std::memory_order_relaxed); }
  void reset() noexcept { count_.store(0); }

 private:
  mutable std::atomic<long> count_{0};
};

// ---------------------------------------------------------------------------
// Deterministic summation

// Pairwise (cascade) summation; result depends only on the input order.
inline double pairwise_sum(std::span<const double> v) {
  const std::size_t n = v.size();
  if (n <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

inline double pairwise_sum(const std::vector<double>& v) {
  return pairwise_sum(std::span<const double>(v.data(), v.size()));
}

// ---------------------------------------------------------------------------
// Parallel loop

inline unsigned resolve_threads(unsigned requested) {
  if (requested != 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

// Runs body(i) for i in [0, n). Items are handed out dynamically, so body must
// write its result to a slot owned by i; callers reduce in index order.
inline void parallel_for(Index n, unsigned threads, const std::function<void(Index)>& body) {
  const unsigned workers = std::min<unsigned>(resolve_threads(threads),
                                              static_cast<unsigned>(std::max<Index>(n, 1)));
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<Index> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto run = [&] {
    for (;;) {
      const Index i = next.fetch_add(1);
      if (i >= n || failed.load()) return;
      try {
        body(i);
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace cqf
