#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "motionpred/param_store.hpp"
#include "motionpred/tensor.hpp"

namespace motionpred {

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// Relative errors use max(|analytic|, |numeric|, floor * max(1, |f|)) as
  /// denominator, f being the unperturbed output. Central-difference round-off
  /// grows with |f|, so the floor does too.
  double denominator_floor = 1e-6;
  /// Entries probed per parameter; 0 checks every entry.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Compares backward() against central finite differences for every listed
/// leaf. `build` must construct a fresh scalar graph on each call.
GradCheckReport grad_check(const std::function<Tensor()>& build,
                           const std::vector<std::pair<std::string, Tensor>>& leaves,
                           double tolerance, const GradCheckOptions& opts = {});

GradCheckReport grad_check(const std::function<Tensor()>& build, const ParamStore& params,
                           double tolerance, const GradCheckOptions& opts = {});

}  // namespace motionpred
