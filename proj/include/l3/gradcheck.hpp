#pragma once

#include <functional>
#include <string>
#include <vector>

#include "l3/rng.hpp"
#include "l3/tensor.hpp"

namespace l3 {

struct GradCheckReport {
  bool pass = false;
  double tol = 0;
  double max_rel_err = 0;
  int64_t coords_checked = 0;
  std::string worst_param;
  int64_t worst_index = -1;
  double worst_analytic = 0;
  double worst_numeric = 0;

  std::string summary() const;
};

// Central-difference check of d(f)/d(params) against the recorded backward
// pass. `f` must rebuild its graph from the current parameter values on every
// call. 64-bit only; coordinates are subsampled when a tensor is larger than
// max_coords_per_param (negative = all).
GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& f,
                                  const std::vector<std::pair<std::string, Tensor<double>>>& params,
                                  double h, double tol, int64_t max_coords_per_param = -1,
                                  Rng* rng = nullptr);

}  // namespace l3
