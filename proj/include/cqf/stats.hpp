#pragma once

#include "cqf/core.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss.hpp>

#include <numbers>

namespace cqf {

inline double normal_cdf(double x) {
  static const boost::math::normal_distribution<double> nd;
  return boost::math::cdf(nd, x);
}

inline double normal_pdf(double x) {
  static const boost::math::normal_distribution<double> nd;
  return boost::math::pdf(nd, x);
}

inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ValidationError("normal_quantile: p must lie in (0, 1)");
  static const boost::math::normal_distribution<double> nd;
  return boost::math::quantile(nd, p);
}

// P(Z1 <= a, Z2 <= b) for standard normals with correlation rho, via
// Phi(a)Phi(b) + (1/2pi) int_0^{asin rho} exp(-(a^2+b^2-2ab sin t)/(2cos^2 t)) dt.
inline double bivariate_normal_cdf(double a, double b, double rho) {
  if (!(rho >= -1.0 && rho <= 1.0)) throw ValidationError("bivariate_normal_cdf: |rho| > 1");
  if (std::isinf(a) || std::isinf(b)) {
    if (a == -INFINITY || b == -INFINITY) return 0.0;
    if (a == INFINITY) return normal_cdf(b);
    return normal_cdf(a);
  }
  if (rho == 1.0) return normal_cdf(std::min(a, b));
  if (rho == -1.0) return std::max(0.0, normal_cdf(a) - normal_cdf(-b));
  const double upper = std::asin(rho);
  auto f = [&](double t) {
    const double c = std::cos(t);
    return std::exp(-(a * a + b * b - 2.0 * a * b * std::sin(t)) / (2.0 * c * c));
  };
  const double integral = boost::math::quadrature::gauss<double, 30>::integrate(f, 0.0, upper);
  return normal_cdf(a) * normal_cdf(b) + integral / (2.0 * std::numbers::pi);
}

// 64-point Gauss-Legendre rule mapped to [lo, hi].
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

inline QuadratureRule gauss_legendre_64(double lo, double hi) {
  using rule = boost::math::quadrature::gauss<double, 64>;
  const auto& x = rule::abscissa();
  const auto& w = rule::weights();
  const double mid = 0.5 * (lo + hi), half = 0.5 * (hi - lo);
  QuadratureRule q;
  // Boost stores the non-negative half of a symmetric rule.
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] == 0.0) {
      q.nodes.push_back(mid);
      q.weights.push_back(half * w[i]);
      continue;
    }
    q.nodes.push_back(mid - half * x[i]);
    q.weights.push_back(half * w[i]);
    q.nodes.push_back(mid + half * x[i]);
    q.weights.push_back(half * w[i]);
  }
  return q;
}

// One-sample Kolmogorov-Smirnov test against a continuous cdf.
struct KsResult {
  double statistic = 0.0;  // sup |F_n - F|
  double p_value = 1.0;
};

// Asymptotic Kolmogorov tail P(K > x).
inline double kolmogorov_tail(double x) {
  if (x <= 0.0) return 1.0;
  if (x < 0.2) return 1.0;
  double s = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * x * x);
    s += (k % 2 ? 1.0 : -1.0) * term;
    if (term < 1e-18) break;
  }
  return std::clamp(2.0 * s, 0.0, 1.0);
}

template <typename Cdf>
KsResult ks_test(std::vector<double> sample, Cdf cdf) {
  if (sample.empty()) throw ValidationError("ks_test: empty sample");
  std::sort(sample.begin(), sample.end());
  const double n = static_cast<double>(sample.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double f = cdf(sample[i]);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - f, f - static_cast<double>(i) / n});
  }
  // Stephens' small-sample correction
  const double sn = std::sqrt(n);
  return {d, kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d)};
}

inline KsResult ks_test_normal(std::vector<double> sample) {
  return ks_test(std::move(sample), [](double x) { return normal_cdf(x); });
}

}  // namespace cqf
