#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mct/tensor.hpp"

namespace mct {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of a reverse-mode computation graph. Graphs are acyclic and
/// rebuilt for every forward pass; values are never mutated after creation.
struct Node {
  std::string op;                        // operation tag
  std::vector<NodePtr> inputs;           // parents in the graph
  Tensor value;                          // cached output
  Tensor grad;                           // accumulator; same shape as value when requires_grad
  bool requires_grad = false;
  std::function<void(Node&)> backprop;   // pushes this node's grad into its inputs

  void accumulate(const std::vector<double>& g);
};

/// Leaf that does not receive gradients (inputs, recorded constants).
NodePtr constant(Tensor value, std::string name = "const");

/// Leaf that accumulates gradients (model parameters).
NodePtr parameter(Tensor value, std::string name = "param");

/// Reverse pass from a scalar-valued root. Seeds d(root)/d(root) = 1 and
/// propagates through the graph in reverse topological order.
void backward(const NodePtr& root);

// ---- Differentiable operations ------------------------------------------

NodePtr add(const NodePtr& a, const NodePtr& b);             // elementwise, same shape
NodePtr mul(const NodePtr& a, const NodePtr& b);             // elementwise, same shape
NodePtr scale(const NodePtr& a, double s);
NodePtr add_row_bias(const NodePtr& x, const NodePtr& bias); // {m,n} + {n}
NodePtr matmul(const NodePtr& a, const NodePtr& b);          // {m,k} x {k,n}
NodePtr transpose(const NodePtr& a);                         // {m,n} -> {n,m}
NodePtr softmax_rows(const NodePtr& x);                      // rowwise, max-stabilized
NodePtr layer_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, double eps);
NodePtr gelu(const NodePtr& x);                              // tanh approximation
NodePtr conv3x3(const NodePtr& x, const NodePtr& kernels, const NodePtr& bias);
NodePtr slice_rows(const NodePtr& x, int row0, int count);
NodePtr slice_cols(const NodePtr& x, int col0, int count);
NodePtr concat_rows(const std::vector<NodePtr>& parts);
NodePtr concat_cols(const std::vector<NodePtr>& parts);
NodePtr reshape(const NodePtr& x, std::vector<int> shape);
NodePtr row_mean(const NodePtr& x);                          // {m,n} -> {m}
NodePtr row_max(const NodePtr& x);                           // {m,n} -> {m}; ties go to the lowest column
NodePtr spatial_mean(const NodePtr& x);                      // {n,n,c} -> {c}
NodePtr sum_all(const NodePtr& x);                           // -> scalar
NodePtr multilabel_soft_margin(const NodePtr& scores, const std::vector<int>& labels);

/// Plain-value form of the multi-label soft margin loss, shared with the op.
double multilabel_soft_margin_value(const Tensor& scores, const std::vector<int>& labels);

}  // namespace mct
