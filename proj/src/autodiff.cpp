#include "mct/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace mct {

namespace {

NodePtr make_node(const char* op, Tensor value, std::vector<NodePtr> inputs,
                  std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs = std::move(inputs);
  value.require_finite(op);
  for (const auto& in : node->inputs) {
    if (in->requires_grad) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) {
    node->grad = Tensor(value.shape());
    node->backprop = std::move(backprop);
  }
  node->value = std::move(value);
  return node;
}

void require_rank(const NodePtr& x, int rank, const char* op) {
  if (x->value.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                " tensor, got shape " + shape_string(x->value.shape()));
  }
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

constexpr double kGeluCoeff = 0.044715;
const double kGeluScale = std::sqrt(2.0 / 3.14159265358979323846);

}  // namespace

void Node::accumulate(const std::vector<double>& g) {
  if (!requires_grad) return;
  auto& acc = grad.values();
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

NodePtr constant(Tensor value, std::string name) {
  auto node = std::make_shared<Node>();
  node->op = std::move(name);
  node->value = std::move(value);
  return node;
}

NodePtr parameter(Tensor value, std::string name) {
  auto node = std::make_shared<Node>();
  node->op = std::move(name);
  node->requires_grad = true;
  node->grad = Tensor(value.shape());
  node->value = std::move(value);
  return node;
}

void backward(const NodePtr& root) {
  if (root->value.size() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                shape_string(root->value.shape()));
  }
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop) node->backprop(*node);
  }
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
  if (!a->value.same_shape(b->value)) {
    throw std::invalid_argument("add: shape mismatch " + shape_string(a->value.shape()) + " vs " +
                                shape_string(b->value.shape()));
  }
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return make_node("add", std::move(out), {a, b}, [](Node& self) {
    self.inputs[0]->accumulate(self.grad.values());
    self.inputs[1]->accumulate(self.grad.values());
  });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  if (!a->value.same_shape(b->value)) {
    throw std::invalid_argument("mul: shape mismatch " + shape_string(a->value.shape()) + " vs " +
                                shape_string(b->value.shape()));
  }
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  return make_node("mul", std::move(out), {a, b}, [](Node& self) {
    const auto& g = self.grad.values();
    if (self.inputs[0]->requires_grad) {
      std::vector<double> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * self.inputs[1]->value[i];
      self.inputs[0]->accumulate(ga);
    }
    if (self.inputs[1]->requires_grad) {
      std::vector<double> gb(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * self.inputs[0]->value[i];
      self.inputs[1]->accumulate(gb);
    }
  });
}

NodePtr scale(const NodePtr& a, double s) {
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * s;
  return make_node("scale", std::move(out), {a}, [s](Node& self) {
    const auto& g = self.grad.values();
    std::vector<double> ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * s;
    self.inputs[0]->accumulate(ga);
  });
}

NodePtr add_row_bias(const NodePtr& x, const NodePtr& bias) {
  require_rank(x, 2, "add_row_bias");
  require_rank(bias, 1, "add_row_bias");
  const int m = x->value.dim(0);
  const int n = x->value.dim(1);
  if (bias->value.dim(0) != n) {
    throw std::invalid_argument("add_row_bias: bias shape " + shape_string(bias->value.shape()) +
                                " does not match columns of " + shape_string(x->value.shape()));
  }
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = x->value.at(i, j) + bias->value[j];
  return make_node("add_row_bias", std::move(out), {x, bias}, [m, n](Node& self) {
    self.inputs[0]->accumulate(self.grad.values());
    if (self.inputs[1]->requires_grad) {
      std::vector<double> gb(static_cast<std::size_t>(n), 0.0);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb[j] += self.grad.at(i, j);
      self.inputs[1]->accumulate(gb);
    }
  });
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a->value.dim(0);
  const int k = a->value.dim(1);
  const int n = b->value.dim(1);
  if (b->value.dim(0) != k) {
    throw std::invalid_argument("matmul: inner dimensions mismatch " +
                                shape_string(a->value.shape()) + " vs " +
                                shape_string(b->value.shape()));
  }
  Tensor out({m, n});
  {
    const double* ad = a->value.data();
    const double* bd = b->value.data();
    double* od = out.data();
    for (int i = 0; i < m; ++i) {
      for (int kk = 0; kk < k; ++kk) {
        const double av = ad[static_cast<std::size_t>(i) * k + kk];
        const double* brow = bd + static_cast<std::size_t>(kk) * n;
        double* orow = od + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  return make_node("matmul", std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* g = self.grad.data();
    const Node& a_in = *self.inputs[0];
    const Node& b_in = *self.inputs[1];
    if (a_in.requires_grad) {
      std::vector<double> ga(static_cast<std::size_t>(m) * k, 0.0);
      const double* bd = b_in.value.data();
      for (int i = 0; i < m; ++i) {
        const double* grow = g + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
          const double* brow = bd + static_cast<std::size_t>(kk) * n;
          double s = 0.0;
          for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga[static_cast<std::size_t>(i) * k + kk] = s;
        }
      }
      self.inputs[0]->accumulate(ga);
    }
    if (b_in.requires_grad) {
      std::vector<double> gb(static_cast<std::size_t>(k) * n, 0.0);
      const double* ad = a_in.value.data();
      for (int i = 0; i < m; ++i) {
        const double* grow = g + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
          const double av = ad[static_cast<std::size_t>(i) * k + kk];
          double* gbrow = gb.data() + static_cast<std::size_t>(kk) * n;
          for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
      self.inputs[1]->accumulate(gb);
    }
  });
}

NodePtr transpose(const NodePtr& a) {
  require_rank(a, 2, "transpose");
  const int m = a->value.dim(0);
  const int n = a->value.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a->value.at(i, j);
  return make_node("transpose", std::move(out), {a}, [m, n](Node& self) {
    std::vector<double> ga(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) ga[static_cast<std::size_t>(i) * n + j] = self.grad.at(j, i);
    self.inputs[0]->accumulate(ga);
  });
}

NodePtr softmax_rows(const NodePtr& x) {
  require_rank(x, 2, "softmax_rows");
  const int m = x->value.dim(0);
  const int n = x->value.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = x->value.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, x->value.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(x->value.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < n; ++j) out.at(i, j) *= inv;
  }
  return make_node("softmax_rows", std::move(out), {x}, [m, n](Node& self) {
    std::vector<double> gx(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
      for (int j = 0; j < n; ++j) {
        gx[static_cast<std::size_t>(i) * n + j] = self.value.at(i, j) * (self.grad.at(i, j) - dot);
      }
    }
    self.inputs[0]->accumulate(gx);
  });
}

NodePtr layer_norm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const int m = x->value.dim(0);
  const int n = x->value.dim(1);
  require_shape(gamma->value, {n}, "layer_norm gamma");
  require_shape(beta->value, {n}, "layer_norm beta");

  Tensor out({m, n});
  std::vector<double> xhat(static_cast<std::size_t>(m) * n);
  std::vector<double> inv_std(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += x->value.at(i, j);
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = x->value.at(i, j) - mean;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = inv;
    for (int j = 0; j < n; ++j) {
      const double h = (x->value.at(i, j) - mean) * inv;
      xhat[static_cast<std::size_t>(i) * n + j] = h;
      out.at(i, j) = gamma->value[j] * h + beta->value[j];
    }
  }
  return make_node(
      "layer_norm", std::move(out), {x, gamma, beta},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const Node& gamma_in = *self.inputs[1];
        if (self.inputs[1]->requires_grad || self.inputs[2]->requires_grad) {
          std::vector<double> dgamma(static_cast<std::size_t>(n), 0.0);
          std::vector<double> dbeta(static_cast<std::size_t>(n), 0.0);
          for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
              const double g = self.grad.at(i, j);
              dgamma[j] += g * xhat[static_cast<std::size_t>(i) * n + j];
              dbeta[j] += g;
            }
          }
          self.inputs[1]->accumulate(dgamma);
          self.inputs[2]->accumulate(dbeta);
        }
        if (self.inputs[0]->requires_grad) {
          std::vector<double> gx(static_cast<std::size_t>(m) * n);
          for (int i = 0; i < m; ++i) {
            double sum_dh = 0.0;
            double sum_dh_h = 0.0;
            for (int j = 0; j < n; ++j) {
              const double dh = self.grad.at(i, j) * gamma_in.value[j];
              sum_dh += dh;
              sum_dh_h += dh * xhat[static_cast<std::size_t>(i) * n + j];
            }
            const double inv = inv_std[static_cast<std::size_t>(i)];
            for (int j = 0; j < n; ++j) {
              const double dh = self.grad.at(i, j) * gamma_in.value[j];
              const double h = xhat[static_cast<std::size_t>(i) * n + j];
              gx[static_cast<std::size_t>(i) * n + j] =
                  inv * (dh - sum_dh / n - h * sum_dh_h / n);
            }
          }
          self.inputs[0]->accumulate(gx);
        }
      });
}

NodePtr gelu(const NodePtr& x) {
  Tensor out(x->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x->value[i];
    const double t = std::tanh(kGeluScale * (v + kGeluCoeff * v * v * v));
    out[i] = 0.5 * v * (1.0 + t);
  }
  return make_node("gelu", std::move(out), {x}, [](Node& self) {
    const auto& xv = self.inputs[0]->value;
    std::vector<double> gx(self.grad.size());
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xv[i];
      const double t = std::tanh(kGeluScale * (v + kGeluCoeff * v * v * v));
      const double d = 0.5 * (1.0 + t) +
                       0.5 * v * (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCoeff * v * v);
      gx[i] = self.grad[i] * d;
    }
    self.inputs[0]->accumulate(gx);
  });
}

NodePtr conv3x3(const NodePtr& x, const NodePtr& kernels, const NodePtr& bias) {
  require_rank(x, 3, "conv3x3");
  require_rank(kernels, 4, "conv3x3");
  require_rank(bias, 1, "conv3x3");
  const int n = x->value.dim(0);
  const int depth = x->value.dim(2);
  const int channels = kernels->value.dim(0);
  if (kernels->value.dim(1) != 3 || kernels->value.dim(2) != 3) {
    throw std::invalid_argument("conv3x3: kernel spatial size must be 3, got " +
                                shape_string(kernels->value.shape()));
  }
  if (x->value.dim(1) != n) {
    throw std::invalid_argument("conv3x3: input must be square, got " +
                                shape_string(x->value.shape()));
  }
  if (kernels->value.dim(3) != depth || bias->value.dim(0) != channels) {
    throw std::invalid_argument("conv3x3: kernels " + shape_string(kernels->value.shape()) +
                                " / bias " + shape_string(bias->value.shape()) +
                                " incompatible with input " + shape_string(x->value.shape()));
  }

  // Stride 1, zero padding of width 1: output spatial size equals input.
  Tensor out({n, n, channels});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int c = 0; c < channels; ++c) {
        double acc = bias->value[c];
        for (int u = 0; u < 3; ++u) {
          const int pi = i + u - 1;
          if (pi < 0 || pi >= n) continue;
          for (int v = 0; v < 3; ++v) {
            const int pj = j + v - 1;
            if (pj < 0 || pj >= n) continue;
            for (int d = 0; d < depth; ++d) {
              acc += x->value.at(pi, pj, d) * kernels->value.at(c, u, v, d);
            }
          }
        }
        out.at(i, j, c) = acc;
      }
    }
  }
  return make_node(
      "conv3x3", std::move(out), {x, kernels, bias}, [n, depth, channels](Node& self) {
        const Node& x_in = *self.inputs[0];
        const Node& k_in = *self.inputs[1];
        if (self.inputs[2]->requires_grad) {
          std::vector<double> gb(static_cast<std::size_t>(channels), 0.0);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
              for (int c = 0; c < channels; ++c) gb[c] += self.grad.at(i, j, c);
          self.inputs[2]->accumulate(gb);
        }
        if (self.inputs[1]->requires_grad) {
          std::vector<double> gk(k_in.value.size(), 0.0);
          for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
              for (int u = 0; u < 3; ++u) {
                const int pi = i + u - 1;
                if (pi < 0 || pi >= n) continue;
                for (int v = 0; v < 3; ++v) {
                  const int pj = j + v - 1;
                  if (pj < 0 || pj >= n) continue;
                  for (int c = 0; c < channels; ++c) {
                    const double g = self.grad.at(i, j, c);
                    for (int d = 0; d < depth; ++d) {
                      gk[((static_cast<std::size_t>(c) * 3 + u) * 3 + v) * depth + d] +=
                          g * x_in.value.at(pi, pj, d);
                    }
                  }
                }
              }
            }
          }
          self.inputs[1]->accumulate(gk);
        }
        if (self.inputs[0]->requires_grad) {
          std::vector<double> gx(x_in.value.size(), 0.0);
          for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
              for (int u = 0; u < 3; ++u) {
                const int pi = i + u - 1;
                if (pi < 0 || pi >= n) continue;
                for (int v = 0; v < 3; ++v) {
                  const int pj = j + v - 1;
                  if (pj < 0 || pj >= n) continue;
                  for (int c = 0; c < channels; ++c) {
                    const double g = self.grad.at(i, j, c);
                    for (int d = 0; d < depth; ++d) {
                      gx[(static_cast<std::size_t>(pi) * n + pj) * depth + d] +=
                          g * k_in.value.at(c, u, v, d);
                    }
                  }
                }
              }
            }
          }
          self.inputs[0]->accumulate(gx);
        }
      });
}

NodePtr slice_rows(const NodePtr& x, int row0, int count) {
  require_rank(x, 2, "slice_rows");
  const int m = x->value.dim(0);
  const int n = x->value.dim(1);
  if (row0 < 0 || count < 0 || row0 + count > m) {
    throw std::invalid_argument("slice_rows: range [" + std::to_string(row0) + ", " +
                                std::to_string(row0 + count) + ") out of bounds for " +
                                shape_string(x->value.shape()));
  }
  Tensor out({count, n});
  for (int i = 0; i < count; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = x->value.at(row0 + i, j);
  return make_node("slice_rows", std::move(out), {x}, [m, n, row0, count](Node& self) {
    std::vector<double> gx(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < count; ++i)
      for (int j = 0; j < n; ++j)
        gx[static_cast<std::size_t>(row0 + i) * n + j] = self.grad.at(i, j);
    self.inputs[0]->accumulate(gx);
  });
}

NodePtr slice_cols(const NodePtr& x, int col0, int count) {
  require_rank(x, 2, "slice_cols");
  const int m = x->value.dim(0);
  const int n = x->value.dim(1);
  if (col0 < 0 || count < 0 || col0 + count > n) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(col0) + ", " +
                                std::to_string(col0 + count) + ") out of bounds for " +
                                shape_string(x->value.shape()));
  }
  Tensor out({m, count});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < count; ++j) out.at(i, j) = x->value.at(i, col0 + j);
  return make_node("slice_cols", std::move(out), {x}, [m, n, col0, count](Node& self) {
    std::vector<double> gx(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < count; ++j)
        gx[static_cast<std::size_t>(i) * n + col0 + j] = self.grad.at(i, j);
    self.inputs[0]->accumulate(gx);
  });
}

NodePtr concat_rows(const std::vector<NodePtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const int n = parts[0]->value.dim(1);
  int m = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    if (p->value.dim(1) != n) {
      throw std::invalid_argument("concat_rows: column mismatch " +
                                  shape_string(parts[0]->value.shape()) + " vs " +
                                  shape_string(p->value.shape()));
    }
    m += p->value.dim(0);
  }
  Tensor out({m, n});
  int row = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < p->value.dim(0); ++i)
      for (int j = 0; j < n; ++j) out.at(row + i, j) = p->value.at(i, j);
    row += p->value.dim(0);
  }
  return make_node("concat_rows", std::move(out), parts, [n](Node& self) {
    int row = 0;
    for (auto& in : self.inputs) {
      const int rows = in->value.dim(0);
      if (in->requires_grad) {
        std::vector<double> g(static_cast<std::size_t>(rows) * n);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(i) * n + j] = self.grad.at(row + i, j);
        in->accumulate(g);
      }
      row += rows;
    }
  });
}

NodePtr concat_cols(const std::vector<NodePtr>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int m = parts[0]->value.dim(0);
  int n = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p->value.dim(0) != m) {
      throw std::invalid_argument("concat_cols: row mismatch " +
                                  shape_string(parts[0]->value.shape()) + " vs " +
                                  shape_string(p->value.shape()));
    }
    n += p->value.dim(1);
  }
  Tensor out({m, n});
  int col = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < p->value.dim(1); ++j) out.at(i, col + j) = p->value.at(i, j);
    col += p->value.dim(1);
  }
  return make_node("concat_cols", std::move(out), parts, [m](Node& self) {
    int col = 0;
    for (auto& in : self.inputs) {
      const int cols = in->value.dim(1);
      if (in->requires_grad) {
        std::vector<double> g(static_cast<std::size_t>(m) * cols);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < cols; ++j) g[static_cast<std::size_t>(i) * cols + j] = self.grad.at(i, col + j);
        in->accumulate(g);
      }
      col += cols;
    }
  });
}

NodePtr reshape(const NodePtr& x, std::vector<int> shape) {
  if (shape_size(shape) != x->value.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_string(x->value.shape()) + " as " +
                                shape_string(shape));
  }
  Tensor out(std::move(shape), x->value.values());
  return make_node("reshape", std::move(out), {x},
                   [](Node& self) { self.inputs[0]->accumulate(self.grad.values()); });
}

NodePtr row_mean(const NodePtr& x) {
  require_rank(x, 2, "row_mean");
  const int m = x->value.dim(0);
  const int n = x->value.dim(1);
  Tensor out({m});
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += x->value.at(i, j);
    out[static_cast<std::size_t>(i)] = s / n;
  }
  return make_node("row_mean", std::move(out), {x}, [m, n](Node& self) {
    std::vector<double> gx(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
      const double g = self.grad[static_cast<std::size_t>(i)] / n;
      for (int j = 0; j < n; ++j) gx[static_cast<std::size_t>(i) * n + j] = g;
    }
    self.inputs[0]->accumulate(gx);
  });
}

NodePtr row_max(const NodePtr& x) {
  require_rank(x, 2, "row_max");
  const int m = x->value.dim(0);
  const int n = x->value.dim(1);
  Tensor out({m});
  std::vector<int> argmax(static_cast<std::size_t>(m), 0);
  for (int i = 0; i < m; ++i) {
    double best = x->value.at(i, 0);
    int arg = 0;
    for (int j = 1; j < n; ++j) {
      if (x->value.at(i, j) > best) {
        best = x->value.at(i, j);
        arg = j;
      }
    }
    out[static_cast<std::size_t>(i)] = best;
    argmax[static_cast<std::size_t>(i)] = arg;
  }
  return make_node("row_max", std::move(out), {x}, [m, n, argmax = std::move(argmax)](Node& self) {
    std::vector<double> gx(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
      gx[static_cast<std::size_t>(i) * n + argmax[static_cast<std::size_t>(i)]] =
          self.grad[static_cast<std::size_t>(i)];
    }
    self.inputs[0]->accumulate(gx);
  });
}

NodePtr spatial_mean(const NodePtr& x) {
  require_rank(x, 3, "spatial_mean");
  const int n0 = x->value.dim(0);
  const int n1 = x->value.dim(1);
  const int c = x->value.dim(2);
  Tensor out({c});
  for (int i = 0; i < n0; ++i)
    for (int j = 0; j < n1; ++j)
      for (int k = 0; k < c; ++k) out[static_cast<std::size_t>(k)] += x->value.at(i, j, k);
  const double inv = 1.0 / (static_cast<double>(n0) * n1);
  for (int k = 0; k < c; ++k) out[static_cast<std::size_t>(k)] *= inv;
  return make_node("spatial_mean", std::move(out), {x}, [n0, n1, c, inv](Node& self) {
    std::vector<double> gx(static_cast<std::size_t>(n0) * n1 * c);
    for (int i = 0; i < n0; ++i)
      for (int j = 0; j < n1; ++j)
        for (int k = 0; k < c; ++k)
          gx[(static_cast<std::size_t>(i) * n1 + j) * c + k] =
              self.grad[static_cast<std::size_t>(k)] * inv;
    self.inputs[0]->accumulate(gx);
  });
}

NodePtr sum_all(const NodePtr& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x->value.size(); ++i) s += x->value[i];
  Tensor out({}, {s});
  return make_node("sum_all", std::move(out), {x}, [](Node& self) {
    std::vector<double> gx(self.inputs[0]->value.size(), self.grad[0]);
    self.inputs[0]->accumulate(gx);
  });
}

double multilabel_soft_margin_value(const Tensor& scores, const std::vector<int>& labels) {
  if (scores.rank() != 1 || scores.size() != labels.size()) {
    throw std::invalid_argument("soft margin loss: scores " + shape_string(scores.shape()) +
                                " vs " + std::to_string(labels.size()) + " labels");
  }
  const int c = static_cast<int>(labels.size());
  double loss = 0.0;
  for (int i = 0; i < c; ++i) {
    const double s = scores[static_cast<std::size_t>(i)];
    // y*log(sigmoid(s)) + (1-y)*log(sigmoid(-s)), via softplus for stability
    loss += labels[static_cast<std::size_t>(i)] ? softplus(-s) : softplus(s);
  }
  return loss / c;
}

NodePtr multilabel_soft_margin(const NodePtr& scores, const std::vector<int>& labels) {
  Tensor out({}, {multilabel_soft_margin_value(scores->value, labels)});
  const int c = static_cast<int>(labels.size());
  return make_node("multilabel_soft_margin", std::move(out), {scores}, [labels, c](Node& self) {
    std::vector<double> gs(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) {
      const double s = self.inputs[0]->value[static_cast<std::size_t>(i)];
      gs[static_cast<std::size_t>(i)] =
          self.grad[0] * (sigmoid(s) - labels[static_cast<std::size_t>(i)]) / c;
    }
    self.inputs[0]->accumulate(gs);
  });
}

}  // namespace mct
