#pragma once

#include <Eigen/QR>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mfdelay/errors.hpp"
#include "mfdelay/model.hpp"
#include "mfdelay/stats.hpp"

namespace mfdelay {

/// Feature map for the per-step conditional-expectation estimator.
///
/// Default: constant, head, and the pairings of the particle segment with each
/// distinct nonzero kernel. Linear: constant plus every raw coordinate of the
/// lifted state, which is exact for targets affine in the state.
class RegressionBasis {
 public:
  enum class Kind { Default, Linear };

  RegressionBasis(Kind kind, const LiftedCoefficients& lc) : kind_(kind), grid_(lc.grid()) {
    if (kind_ == Kind::Default) {
      for (const DelayKernel* k : lc.kernels().all()) {
        if (k->is_zero()) continue;
        bool seen = false;
        for (const auto& d : kernels_) seen = seen || d.values == k->values;
        if (!seen) kernels_.push_back(*k);
      }
    }
  }

  static Kind parse(const std::string& s) {
    if (s == "default") return Kind::Default;
    if (s == "linear") return Kind::Linear;
    throw ConfigError("unknown regression basis '" + s + "'");
  }

  Kind kind() const noexcept { return kind_; }
  std::size_t size() const noexcept {
    if (kind_ == Kind::Linear) return 1 + grid_.dim();
    return 1 + grid_.n() * (1 + kernels_.size());
  }

  void features(SegmentRef X, double* out) const {
    const std::size_t n = grid_.n();
    out[0] = 1.0;
    for (std::size_t i = 0; i < n; ++i) out[1 + i] = X.head[i];
    if (kind_ == Kind::Linear) {
      for (std::size_t c = 0; c < n * grid_.m(); ++c) out[1 + n + c] = X.tail[c];
      return;
    }
    for (std::size_t r = 0; r < kernels_.size(); ++r) pair_into(grid_, X.tail, kernels_[r], out + 1 + n * (1 + r));
  }

 private:
  Kind kind_;
  SegmentGrid grid_;
  std::vector<DelayKernel> kernels_;
};

/// Least-squares projection onto span{1, design columns} for one time step.
///
/// The constant is handled by centering; columns that are constant across
/// particles are dropped, the rest standardized and solved by pivoted QR.
class StepRegression {
 public:
  StepRegression(const Mat& design, std::size_t step) : N_(design.rows()) {
    const Eigen::Index F = design.cols();
    std::vector<Eigen::Index> keep;
    std::vector<double> mu, sd;
    std::vector<double> col(static_cast<std::size_t>(N_));
    for (Eigen::Index c = 0; c < F; ++c) {
      for (Eigen::Index i = 0; i < N_; ++i) col[static_cast<std::size_t>(i)] = design(i, c);
      const double m = pairwise_sum(col) / static_cast<double>(N_);
      for (auto& v : col) v = (v - m) * (v - m);
      const double s = std::sqrt(pairwise_sum(col) / static_cast<double>(N_));
      if (s > 1e-12 * std::max(1.0, std::abs(m))) {
        keep.push_back(c);
        mu.push_back(m);
        sd.push_back(s);
      }
    }
    if (static_cast<Eigen::Index>(keep.size()) + 1 > N_)
      throw RankError("regression needs more particles than features", step);
    Xc_.resize(N_, static_cast<Eigen::Index>(keep.size()));
    for (std::size_t r = 0; r < keep.size(); ++r)
      Xc_.col(static_cast<Eigen::Index>(r)) = (design.col(keep[r]).array() - mu[r]) / sd[r];
    if (Xc_.cols() > 0) {
      qr_.compute(Xc_);
      qr_.setThreshold(1e-10);
    }
  }

  std::size_t rank() const { return Xc_.cols() > 0 ? static_cast<std::size_t>(qr_.rank()) : 0; }

  /// Fitted values of every target column.
  Mat fit(const Mat& targets) const {
    Mat out(targets.rows(), targets.cols());
    std::vector<double> col(static_cast<std::size_t>(N_));
    Mat centered(targets.rows(), targets.cols());
    Vec mean(targets.cols());
    for (Eigen::Index c = 0; c < targets.cols(); ++c) {
      for (Eigen::Index i = 0; i < N_; ++i) col[static_cast<std::size_t>(i)] = targets(i, c);
      mean[c] = pairwise_sum(col) / static_cast<double>(N_);
      centered.col(c) = targets.col(c).array() - mean[c];
    }
    if (Xc_.cols() == 0) {
      out = mean.transpose().replicate(N_, 1);
      return out;
    }
    const Mat coef = qr_.solve(centered);
    out = Xc_ * coef;
    out.rowwise() += mean.transpose();
    return out;
  }

 private:
  Eigen::Index N_;
  Mat Xc_;
  Eigen::ColPivHouseholderQR<Mat> qr_;
};

}  // namespace mfdelay
