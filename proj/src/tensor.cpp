#include "sepbn/tensor.hpp"

#include <cmath>

namespace sepbn {

int64_t Tensor::count(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw DimensionError("non-positive extent " + std::to_string(e));
    n *= e;
  }
  return n;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace sepbn
