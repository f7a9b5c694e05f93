#pragma once

// Finite-difference checks over every shipped layer and composite loss on
// width-8 instances.

#include <functional>
#include <string>
#include <vector>

namespace motionpred {

struct GradSuiteEntry {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t checked = 0;
  double max_rel_error = 0;
  bool passed = true;
};

struct GradSuiteReport {
  std::vector<GradSuiteEntry> entries;
  double max_rel_error = 0;
  bool passed = true;
  double seconds = 0;
};

/// Case names in run order.
std::vector<std::string> grad_suite_cases();

/// Runs every case for seeds 0..seeds-1. `only`, if non-empty, restricts the cases.
GradSuiteReport run_grad_suite(std::size_t seeds, double tolerance,
                               const std::vector<std::string>& only = {},
                               const std::function<void(const GradSuiteEntry&)>& on_entry = {});

}  // namespace motionpred
