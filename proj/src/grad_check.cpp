#include "esqa/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace esqa {

GradCheckReport grad_check(const std::function<Tensor()>& fn, const ParamList& params,
                           const GradCheckOptions& options) {
  for (const auto& p : params) {
    auto& g = p.tensor.node()->grad;
    g.assign(p.tensor.size(), 0.0);
  }
  {
    Tensor loss = fn();
    backward(loss);
  }

  GradCheckReport report;
  for (const auto& [name, tensor] : params) {
    GradCheckEntry entry;
    entry.param = name;
    const std::vector<double> analytic(tensor.grad().begin(), tensor.grad().end());
    auto values = tensor.node()->value.data();
    const std::size_t n = tensor.size();
    const std::size_t stride =
        options.max_entries_per_param && n > options.max_entries_per_param
            ? (n + options.max_entries_per_param - 1) / options.max_entries_per_param
            : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      double plus, minus;
      {
        NoGradGuard guard;
        values[i] = saved + options.step;
        plus = fn().item();
        values[i] = saved - options.step;
        minus = fn().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[i];
      const bool finite = std::isfinite(a) && std::isfinite(numeric);
      const double err = finite ? std::abs(a - numeric) /
                                      std::max({std::abs(a), std::abs(numeric), options.floor})
                                : INFINITY;
      if (i == 0 || err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
      if (!finite) entry.finite = false;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    if (!entry.finite || entry.max_rel_error > options.tolerance) {
      if (report.passed) {
        std::ostringstream os;
        os << name << "[" << entry.worst_index << "]: analytic " << entry.analytic << " numeric "
           << entry.numeric << (entry.finite ? "" : " (non-finite)");
        report.first_failure = os.str();
      }
      report.passed = false;
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace esqa
