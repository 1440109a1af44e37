#include "sepbn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace sepbn {

std::string GradCheckReport::first_failure(double tol) const {
  for (const auto& e : entries)
    if (e.max_rel_err > tol)
      return e.param + "[" + std::to_string(e.worst_index) + "] rel err " +
             std::to_string(e.max_rel_err);
  return {};
}

GradCheckReport grad_check(const std::vector<Param*>& params, const std::function<double()>& loss,
                           const std::function<void()>& forward_backward, double h,
                           int samples_per_param, Rng& rng, double tol) {
  forward_backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->value.grad());

  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    const int64_t n = p.value.numel();
    std::vector<int64_t> idx;
    if (n <= samples_per_param) {
      idx.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    } else {
      idx.reserve(static_cast<size_t>(samples_per_param));
      for (int i = 0; i < samples_per_param; ++i)
        idx.push_back(static_cast<int64_t>(rng.below(static_cast<uint64_t>(n))));
    }

    GradCheckEntry entry{p.name, 0.0, -1, static_cast<int>(idx.size()), 0};
    auto probe = [&](int64_t i, double step) {
      const double orig = p.value[i];
      p.value[i] = orig + step;
      const double lp = loss();
      p.value[i] = orig - step;
      const double lm = loss();
      p.value[i] = orig;
      return (lp - lm) / (2.0 * step);
    };
    auto rel_err = [&](double a, double numeric) {
      return std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
    };
    for (int64_t i : idx) {
      const double a = analytic[pi][static_cast<size_t>(i)];
      double rel = rel_err(a, probe(i, h));
      if (rel > tol) {
        const double rel_fine = rel_err(a, probe(i, h / 10.0));
        const double rel_finer = rel_err(a, probe(i, h / 100.0));
        if (rel_fine <= tol && rel_finer <= tol) {
          rel = std::max(rel_fine, rel_finer);
          ++entry.kinks_escaped;
        }
      }
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
      }
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace sepbn
