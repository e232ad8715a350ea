#include "mvret/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mvret/error.hpp"

namespace mvret {

namespace {

double evaluate(const std::function<double()>& f, const std::string& name, std::size_t i) {
  const double v = f();
  require(std::isfinite(v), ErrorKind::numeric,
          "gradient check: objective is not finite while perturbing " + name + "[" +
              std::to_string(i) + "]");
  return v;
}

}  // namespace

GradCheckResult finite_difference_check(const std::function<double()>& f,
                                        std::span<ParamBlock* const> params, double h,
                                        double floor) {
  require(h > 0.0, ErrorKind::config, "gradient check: step must be positive");
  GradCheckResult result;
  for (ParamBlock* p : params) {
    require(p != nullptr, ErrorKind::config, "gradient check: null parameter");
    require_shape(p->grad, p->value.shape(), "gradient check grad");
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = evaluate(f, p->name, i);
      p->value[i] = saved - h;
      const double down = evaluate(f, p->name, i);
      p->value[i] = saved;

      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.checked;
      if (result.checked == 1 || rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_param = p->name;
        result.worst_index = i;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace mvret
