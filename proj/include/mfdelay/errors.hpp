#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mfdelay {

/// Grids or shapes that do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the documented domain (negative step counts, h <= 0, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid experiment configuration or off-grid times.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A coefficient evaluator returned a non-finite value.
class EvaluationError : public std::runtime_error {
 public:
  EvaluationError(const std::string& what, double t, std::string control)
      : std::runtime_error(what + " at t=" + std::to_string(t) + ", u=" + control),
        t_(t),
        control_(std::move(control)) {}
  double time() const noexcept { return t_; }
  const std::string& control() const noexcept { return control_; }

 private:
  double t_;
  std::string control_;
};

/// A simulated state became non-finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Regression design matrix unusable at a given step.
class RankError : public std::runtime_error {
 public:
  RankError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Requested solver is not available for this problem class.
class UnsupportedProblemError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace mfdelay
