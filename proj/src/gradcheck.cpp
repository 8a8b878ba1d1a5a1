#include "mct/gradcheck.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace mct {

std::string GradCheckReport::summary() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "max relative error %.3e at %s[%d] (analytic %.6e, numeric %.6e)", max_rel_error,
                worst_parameter.empty() ? "<none>" : worst_parameter.c_str(), worst_index,
                worst_analytic, worst_numeric);
  return buf;
}

GradCheckReport check_gradients(const GraphBuilder& build, std::vector<Tensor> values,
                                const std::vector<std::string>& names, double h) {
  if (values.size() != names.size()) {
    throw std::invalid_argument("check_gradients: values/names size mismatch");
  }

  BuiltGraph graph = build(values);
  if (graph.root->value.size() != 1) {
    throw std::invalid_argument("check_gradients: graph output must be scalar");
  }
  if (graph.parameters.size() != values.size()) {
    throw std::invalid_argument("check_gradients: builder returned wrong parameter count");
  }
  backward(graph.root);

  std::vector<Tensor> analytic;
  analytic.reserve(graph.parameters.size());
  for (const auto& p : graph.parameters) analytic.push_back(p->grad);
  graph = BuiltGraph{};  // release before the many re-evaluations below

  GradCheckReport report;
  for (std::size_t p = 0; p < values.size(); ++p) {
    for (std::size_t i = 0; i < values[p].size(); ++i) {
      const double saved = values[p][i];
      values[p][i] = saved + h;
      const double up = build(values).root->value[0];
      values[p][i] = saved - h;
      const double down = build(values).root->value[0];
      values[p][i] = saved;

      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_parameter = names[p];
        report.worst_index = static_cast<int>(i);
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace mct
