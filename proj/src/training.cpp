#include "mct/training.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "mct/data_eval.hpp"
#include "mct/parallel.hpp"
#include "mct/rng.hpp"

namespace mct {

double multilabel_soft_margin_loss(const Tensor& scores, const LabelVector& labels) {
  return multilabel_soft_margin_value(scores, labels.y);
}

double total_loss(const ForwardRecord& record, const LabelVector& labels, Variant variant) {
  const double cls = multilabel_soft_margin_loss(record.class_scores_cls, labels);
  if (variant == Variant::V1) return cls;
  if (record.class_scores_patch.empty()) {
    throw std::invalid_argument("total_loss: V2 record is missing patch scores");
  }
  return cls + multilabel_soft_margin_loss(record.class_scores_patch, labels);
}

LossParts total_loss_graph(const ForwardGraph& graph, const LabelVector& labels, Variant variant) {
  LossParts parts;
  auto cls = multilabel_soft_margin(graph.scores_cls, labels.y);
  parts.cls = cls->value[0];
  if (variant == Variant::V1) {
    parts.total = cls;
    return parts;
  }
  if (!graph.scores_patch) {
    throw std::invalid_argument("total_loss: V2 graph is missing patch scores");
  }
  auto patch = multilabel_soft_margin(graph.scores_patch, labels.y);
  parts.patch = patch->value[0];
  parts.total = add(cls, patch);
  return parts;
}

OptimizerState init_optimizer(const ModelParameters& params, double learning_rate,
                              double weight_decay) {
  OptimizerState state;
  state.learning_rate = learning_rate;
  state.weight_decay = weight_decay;
  params.for_each([&](const std::string&, const Tensor& t) {
    state.first_moment.emplace_back(t.shape());
    state.second_moment.emplace_back(t.shape());
  });
  return state;
}

void optimizer_step(ModelParameters& params, const std::vector<Tensor>& grads,
                    OptimizerState& state) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

  std::size_t idx = 0;
  params.for_each([&](const std::string& name, Tensor& p) {
    if (idx >= grads.size()) throw std::invalid_argument("optimizer_step: too few gradients");
    const Tensor& g = grads[idx];
    if (!g.same_shape(p)) {
      throw std::invalid_argument("optimizer_step: gradient shape " + shape_string(g.shape()) +
                                  " does not match parameter " + name + " " +
                                  shape_string(p.shape()));
    }
    Tensor& m = state.first_moment[idx];
    Tensor& v = state.second_moment[idx];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= state.learning_rate * (mhat / (std::sqrt(vhat) + state.eps) +
                                     state.weight_decay * p[i]);
    }
    ++idx;
  });
  if (idx != grads.size()) throw std::invalid_argument("optimizer_step: too many gradients");
}

namespace {

struct SampleResult {
  std::vector<Tensor> grads;
  double loss_cls = 0.0;
  double loss_patch = 0.0;
  double total = 0.0;
};

SampleResult run_sample(const SyntheticSample& sample, const ModelParameters& params,
                        const ModelConfig& config) {
  ForwardGraph graph = forward_graph(sample.image, params, config);
  LossParts loss = total_loss_graph(graph, sample.labels, config.variant);
  backward(loss.total);

  SampleResult result;
  result.loss_cls = loss.cls;
  result.loss_patch = loss.patch;
  result.total = loss.total->value[0];
  result.grads.reserve(graph.leaves.ordered.size());
  for (const auto& leaf : graph.leaves.ordered) result.grads.push_back(std::move(leaf->grad));
  return result;
}

}  // namespace

TrainResult train(const std::vector<SyntheticSample>& dataset, const ModelConfig& config,
                  const TrainSettings& settings) {
  return train(dataset, config, settings, init_parameters(config, settings.seed));
}

TrainResult train(const std::vector<SyntheticSample>& dataset, const ModelConfig& config,
                  const TrainSettings& settings, const ModelParameters& initial) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  for (const auto& sample : dataset) {
    if (sample.labels.num_classes() != config.num_classes) {
      throw std::invalid_argument("train: sample label width does not match num_classes");
    }
    if (!sample.labels.any_positive()) {
      throw std::invalid_argument("train: sample without a positive label");
    }
  }

  TrainResult result;
  result.params = initial;
  OptimizerState state =
      init_optimizer(result.params, settings.learning_rate, settings.weight_decay);

  Rng shuffle_rng(mix_seed(settings.seed, 0x7368756666ull));
  std::vector<int> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  const int batch = std::max(1, settings.batch_size);
  const int steps_per_epoch = (static_cast<int>(dataset.size()) + batch - 1) / batch;
  const long total_steps = static_cast<long>(steps_per_epoch) * settings.epochs;
  const double pi = 3.14159265358979323846;

  long step = 0;
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (int b = 0; b < steps_per_epoch; ++b) {
      const int begin = b * batch;
      const int count = std::min(batch, static_cast<int>(dataset.size()) - begin);

      // Cosine decay from the initial rate to the floor over all steps.
      const double progress = total_steps <= 1
                                  ? 0.0
                                  : static_cast<double>(step) / static_cast<double>(total_steps - 1);
      state.learning_rate = settings.lr_min + 0.5 * (settings.learning_rate - settings.lr_min) *
                                                  (1.0 + std::cos(pi * progress));

      // Each sample runs an independent graph against a read-only parameter
      // snapshot; results land in index-addressed slots and are reduced in
      // dataset-index order, so the outcome depends on neither the thread
      // count nor the shuffle order within the batch.
      std::vector<int> batch_indices(order.begin() + begin, order.begin() + begin + count);
      std::sort(batch_indices.begin(), batch_indices.end());
      std::vector<SampleResult> results(static_cast<std::size_t>(count));
      const ModelParameters& snapshot = result.params;
      try {
        parallel_for(count, settings.threads, [&](int i) {
          results[static_cast<std::size_t>(i)] = run_sample(
              dataset[static_cast<std::size_t>(batch_indices[static_cast<std::size_t>(i)])],
              snapshot, config);
        });
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("train: diverged at step " + std::to_string(step) + ": " +
                                 e.what());
      }

      LossTraceRow row;
      row.step = static_cast<int>(step);
      std::vector<Tensor> grads = std::move(results[0].grads);
      row.loss_cls = results[0].loss_cls;
      row.loss_patch = results[0].loss_patch;
      row.total = results[0].total;
      for (int i = 1; i < count; ++i) {
        for (std::size_t p = 0; p < grads.size(); ++p) {
          const Tensor& g = results[static_cast<std::size_t>(i)].grads[p];
          for (std::size_t k = 0; k < g.size(); ++k) grads[p][k] += g[k];
        }
        row.loss_cls += results[static_cast<std::size_t>(i)].loss_cls;
        row.loss_patch += results[static_cast<std::size_t>(i)].loss_patch;
        row.total += results[static_cast<std::size_t>(i)].total;
      }
      const double inv = 1.0 / count;
      for (auto& g : grads)
        for (std::size_t k = 0; k < g.size(); ++k) g[k] *= inv;
      row.loss_cls *= inv;
      row.loss_patch *= inv;
      row.total *= inv;

      if (!std::isfinite(row.total)) {
        throw std::runtime_error("train: loss diverged (non-finite) at step " +
                                 std::to_string(step));
      }

      optimizer_step(result.params, grads, state);
      result.trace.push_back(row);
      ++step;
    }
  }
  return result;
}

}  // namespace mct
