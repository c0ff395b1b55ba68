#pragma once

#include <stdexcept>
#include <string>

namespace picpq {

/// Bad inputs: inconsistent network specs, shape mismatches, invalid configs.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The requested compression ratio cannot be met even with every layer at its floor.
class InfeasibleBudget : public std::runtime_error {
 public:
  InfeasibleBudget(double requested, double max_achievable, const std::string& prefix = "")
      : std::runtime_error(prefix + "budget ratio " + std::to_string(requested) +
                           " unreachable; maximum achievable ratio is " +
                           std::to_string(max_achievable)),
        requested_(requested),
        max_achievable_(max_achievable) {}

  double requested() const noexcept { return requested_; }
  double max_achievable() const noexcept { return max_achievable_; }

 private:
  double requested_;
  double max_achievable_;
};

/// Non-finite values produced during training or numerical routines.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, long step = -1)
      : std::runtime_error(what), step_(step) {}

  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace picpq
