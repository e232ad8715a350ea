#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "mvret/tensor.hpp"

namespace mvret {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares each ParamBlock's stored grad against central differences of f.
///
/// The caller fills the grads (at the unperturbed point) before calling. Each
/// scalar is perturbed by +-h in place and restored bitwise afterwards.
/// relative error = |a - n| / max(|a|, |n|, floor).
/// Throws ErrorKind::numeric if f returns a non-finite value.
GradCheckResult finite_difference_check(const std::function<double()>& f,
                                        std::span<ParamBlock* const> params, double h = 1e-5,
                                        double floor = 1e-8);

}  // namespace mvret
