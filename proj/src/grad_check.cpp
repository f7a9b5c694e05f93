#include "motionpred/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "motionpred/error.hpp"
#include "motionpred/rng.hpp"

namespace motionpred {

GradCheckReport grad_check(const std::function<Tensor()>& build,
                           const std::vector<std::pair<std::string, Tensor>>& leaves,
                           double tolerance, const GradCheckOptions& opts) {
  for (auto [name, t] : leaves) t.clear_grad();
  double floor = opts.denominator_floor;
  {
    Tensor out = build();
    floor *= std::max(1.0, std::abs(out.item()));
    backward(out);
  }

  GradCheckReport report;
  Rng rng(opts.seed);
  for (auto [name, t] : leaves) {
    GradCheckEntry entry;
    entry.name = name;
    const std::size_t n = t.numel();
    std::vector<double> analytic = t.grad() ? *t.grad() : std::vector<double>(n, 0.0);

    std::vector<std::size_t> probe(n);
    std::iota(probe.begin(), probe.end(), std::size_t{0});
    if (opts.max_entries_per_param && n > opts.max_entries_per_param) {
      std::shuffle(probe.begin(), probe.end(), rng.engine());
      probe.resize(opts.max_entries_per_param);
    }

    NoGradGuard no_grad;
    auto w = t.mutable_data();
    for (auto k : probe) {
      const double saved = w[k];
      w[k] = saved + opts.epsilon;
      const double up = build().item();
      w[k] = saved - opts.epsilon;
      const double down = build().item();
      w[k] = saved;
      const double numeric = (up - down) / (2.0 * opts.epsilon);
      const double abs_err = std::abs(analytic[k] - numeric);
      const double denom =
          std::max({std::abs(analytic[k]), std::abs(numeric), floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
      ++entry.checked;
    }
    entry.passed = entry.max_rel_error < tolerance;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.passed = report.passed && entry.passed;
    report.entries.push_back(std::move(entry));
    t.clear_grad();
  }
  return report;
}

GradCheckReport grad_check(const std::function<Tensor()>& build, const ParamStore& params,
                           double tolerance, const GradCheckOptions& opts) {
  std::vector<std::pair<std::string, Tensor>> leaves;
  for (const auto& name : params.names()) leaves.emplace_back(name, params.get(name));
  return grad_check(build, leaves, tolerance, opts);
}

}  // namespace motionpred
