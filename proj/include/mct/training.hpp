#pragma once

#include <cstdint>
#include <vector>

#include "mct/model.hpp"
#include "mct/tensor.hpp"

namespace mct {

/// Multi-hot image-level labels; every training sample has at least one
/// positive class.
struct LabelVector {
  std::vector<int> y;  // C entries in {0,1}

  int num_classes() const { return static_cast<int>(y.size()); }
  bool any_positive() const {
    for (int v : y)
      if (v) return true;
    return false;
  }
};

double multilabel_soft_margin_loss(const Tensor& scores, const LabelVector& labels);

/// V1: class-token loss. V2: unweighted sum of the class-token and
/// patch-token losses.
double total_loss(const ForwardRecord& record, const LabelVector& labels, Variant variant);

struct LossParts {
  NodePtr total;
  double cls = 0.0;
  double patch = 0.0;
};

/// Graph form of total_loss, attached to a live forward graph for training.
LossParts total_loss_graph(const ForwardGraph& graph, const LabelVector& labels, Variant variant);

/// Decoupled-weight-decay adaptive-moment optimizer state. Moment tensors are
/// aligned with ModelParameters::for_each order.
struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  long step = 0;
  double learning_rate = 5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

OptimizerState init_optimizer(const ModelParameters& params, double learning_rate,
                              double weight_decay);

/// One update with bias-corrected moments; deterministic given state.
void optimizer_step(ModelParameters& params, const std::vector<Tensor>& grads,
                    OptimizerState& state);

struct SyntheticSample;  // data_eval.hpp

struct TrainSettings {
  int epochs = 40;
  int batch_size = 16;
  double learning_rate = 5e-4;
  double lr_min = 1e-6;  // cosine decay floor
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = hardware concurrency
};

struct LossTraceRow {
  int step = 0;
  double loss_cls = 0.0;
  double loss_patch = 0.0;
  double total = 0.0;
};

struct TrainResult {
  ModelParameters params;
  std::vector<LossTraceRow> trace;
};

/// Mini-batch loop: shuffled epochs, cosine learning-rate decay, per-step
/// loss trace. Aborts with a diagnostic if the loss goes non-finite. Fully
/// deterministic for a fixed seed regardless of thread count.
TrainResult train(const std::vector<SyntheticSample>& dataset, const ModelConfig& config,
                  const TrainSettings& settings);

/// Same loop from explicitly supplied initial parameters.
TrainResult train(const std::vector<SyntheticSample>& dataset, const ModelConfig& config,
                  const TrainSettings& settings, const ModelParameters& initial);

}  // namespace mct
