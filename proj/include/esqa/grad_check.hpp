#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "esqa/optim.hpp"
#include "esqa/tensor.hpp"

namespace esqa {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor: error = |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  // Check at most this many entries per parameter (evenly strided); 0 = all.
  std::size_t max_entries_per_param = 0;
};

struct GradCheckEntry {
  std::string param;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
  std::string first_failure;
};

// Compares reverse-mode gradients of a scalar function against central
// differences. `fn` must rebuild the graph from current parameter values on
// every call and be deterministic.
GradCheckReport grad_check(const std::function<Tensor()>& fn, const ParamList& params,
                           const GradCheckOptions& options = {});

}  // namespace esqa
