#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mct/autodiff.hpp"

namespace mct {

/// A freshly built scalar graph together with its parameter leaves, aligned
/// with the value vector the builder was given.
struct BuiltGraph {
  NodePtr root;
  std::vector<NodePtr> parameters;
};

/// Rebuilds the graph from scratch for a given set of parameter values.
/// Graphs are rebuilt rather than re-executed, matching how training works.
using GraphBuilder = std::function<BuiltGraph(const std::vector<Tensor>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  int worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed(double tol) const { return max_rel_error <= tol; }
  std::string summary() const;
};

/// Compares every parameter's analytic gradient against central finite
/// differences with step h. Relative error is |a - n| / max(1, |a|, |n|).
GradCheckReport check_gradients(const GraphBuilder& build, std::vector<Tensor> values,
                                const std::vector<std::string>& names, double h = 1e-5);

}  // namespace mct
