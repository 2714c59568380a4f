#pragma once

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mfdelay/errors.hpp"

namespace mfdelay {

/// Pairwise (cascade) summation; the result depends only on the values and their order.
inline double pairwise_sum(const double* x, std::size_t n, std::size_t stride = 1) {
  if (n <= 16) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i * stride];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(x, half, stride) + pairwise_sum(x + half * stride, n - half, stride);
}

inline double pairwise_sum(std::span<const double> x) { return pairwise_sum(x.data(), x.size()); }

/// Sample mean and standard error of the mean.
struct MeanEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

inline MeanEstimate mean_estimate(std::span<const double> x) {
  MeanEstimate r;
  const std::size_t n = x.size();
  if (n == 0) return r;
  r.mean = pairwise_sum(x) / static_cast<double>(n);
  if (n < 2) return r;
  std::vector<double> dev(n);
  for (std::size_t i = 0; i < n; ++i) dev[i] = (x[i] - r.mean) * (x[i] - r.mean);
  const double var = pairwise_sum(dev) / static_cast<double>(n - 1);
  r.stderr_ = std::sqrt(var / static_cast<double>(n));
  return r;
}

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t points = 0;
  std::vector<std::string> warnings;
};

/// OLS of log(value) on log(eps); 95% CI from the residual variance (Student t).
inline SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& pairs) {
  SlopeFit fit;
  std::vector<double> lx, ly;
  for (const auto& [e, v] : pairs) {
    if (!(e > 0.0) || !(v > 0.0) || !std::isfinite(v)) {
      fit.warnings.push_back("excluded nonpositive pair (" + std::to_string(e) + ", " + std::to_string(v) + ")");
      continue;
    }
    lx.push_back(std::log(e));
    ly.push_back(std::log(v));
  }
  const std::size_t n = lx.size();
  if (n < 3) throw ArgumentError("fit_loglog_slope: fewer than 3 positive pairs");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) mx += lx[i], my += ly[i];
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) sxx += (lx[i] - mx) * (lx[i] - mx), sxy += (lx[i] - mx) * (ly[i] - my);
  if (!(sxx > 0.0)) throw ArgumentError("fit_loglog_slope: abscissae coincide");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ly[i] - fit.intercept - fit.slope * lx[i];
    rss += r * r;
  }
  const double se = std::sqrt(rss / static_cast<double>(n - 2) / sxx);
  const boost::math::students_t dist(static_cast<double>(n - 2));
  const double tq = boost::math::quantile(boost::math::complement(dist, 0.025));
  fit.ci_low = fit.slope - tq * se;
  fit.ci_high = fit.slope + tq * se;
  fit.points = n;
  return fit;
}

}  // namespace mfdelay
