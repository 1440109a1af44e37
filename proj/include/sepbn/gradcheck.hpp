#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sepbn/rng.hpp"
#include "sepbn/tensor.hpp"

namespace sepbn {

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  int checked = 0;
  int kinks_escaped = 0;  // probes re-verified at smaller h across a non-smooth point
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_err);
    return m;
  }
  bool pass(double tol) const { return max_rel_err() <= tol; }
  std::string first_failure(double tol) const;
};

// Compares analytic gradients against central differences (step h) for every
// parameter element, or a random subsample of `samples_per_param` for large
// tensors. `loss` must be a pure function of the current parameter values;
// `forward_backward` must zero the grads and repopulate them.
//
// Pooling argmax switches and L1 sign flips make the loss piecewise smooth;
// a probe whose [w-h, w+h] segment straddles such a kink is not a valid
// derivative estimate. Elements failing `tol` at the primary h are therefore
// re-verified at h/10 and h/100 and only count as failures if they stay
// wrong at every step size.
GradCheckReport grad_check(const std::vector<Param*>& params, const std::function<double()>& loss,
                           const std::function<void()>& forward_backward, double h,
                           int samples_per_param, Rng& rng, double tol = 1e-4);

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr int kGradCheckSamples = 200;

}  // namespace sepbn
