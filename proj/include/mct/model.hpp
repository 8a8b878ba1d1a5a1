#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mct/autodiff.hpp"
#include "mct/tensor.hpp"

namespace mct {

enum class Variant { V1, V2 };
enum class HeadMode { average_pool, max_pool, fully_connected };

std::string to_string(Variant v);
std::string to_string(HeadMode m);
Variant variant_from_string(const std::string& s);
HeadMode head_mode_from_string(const std::string& s);

/// Architecture and run hyperparameters. C class tokens plus an N x N patch
/// grid give C + N^2 tokens through L pre-norm encoder layers.
struct ModelConfig {
  int num_classes = 3;    // C
  int grid_side = 8;      // N
  int embed_dim = 64;     // D
  int num_layers = 6;     // L
  int num_heads = 4;      // H
  int fuse_layers = 3;    // K, class-attention fusion depth
  int patch_size = 4;     // P, pixels per patch side
  double mlp_ratio = 4.0;
  Variant variant = Variant::V2;
  HeadMode head_mode = HeadMode::average_pool;

  int patch_count() const { return grid_side * grid_side; }         // M
  int token_count() const { return num_classes + patch_count(); }   // C + M
  int image_side() const { return patch_size * grid_side; }
  int patch_dim() const { return patch_size * patch_size * 3; }
  int head_dim() const { return embed_dim / num_heads; }
  int mlp_hidden() const { return static_cast<int>(mlp_ratio * embed_dim + 0.5); }

  void validate() const;  // throws std::invalid_argument on a bad combination
};

struct LayerParameters {
  Tensor wq, wk, wv, wo;           // D x D
  Tensor ln1_gamma, ln1_beta;      // D
  Tensor ln2_gamma, ln2_beta;      // D
  Tensor mlp_w1, mlp_b1;           // D x Dh, Dh
  Tensor mlp_w2, mlp_b2;           // Dh x D, D
};

struct ModelParameters {
  Tensor patch_projection;         // (P*P*3) x D
  Tensor class_tokens;             // C x D, one token per class
  Tensor positional_embedding;     // (C+M) x D, covers class and patch rows jointly
  std::vector<LayerParameters> layers;
  Tensor cam_kernels;              // C x 3 x 3 x D; only allocated for V2
  Tensor cam_bias;                 // C; only allocated for V2
  Tensor head_weights;             // (C*D) x C; only for fully_connected head

  template <class F>
  void for_each(F&& f) {
    for_each_impl(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    for_each_impl(*this, f);
  }

 private:
  template <class Self, class F>
  static void for_each_impl(Self& self, F& f) {
    f("patch_projection", self.patch_projection);
    f("class_tokens", self.class_tokens);
    f("positional_embedding", self.positional_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& layer = self.layers[l];
      const std::string prefix = "layer" + std::to_string(l) + ".";
      f(prefix + "wq", layer.wq);
      f(prefix + "wk", layer.wk);
      f(prefix + "wv", layer.wv);
      f(prefix + "wo", layer.wo);
      f(prefix + "ln1_gamma", layer.ln1_gamma);
      f(prefix + "ln1_beta", layer.ln1_beta);
      f(prefix + "ln2_gamma", layer.ln2_gamma);
      f(prefix + "ln2_beta", layer.ln2_beta);
      f(prefix + "mlp_w1", layer.mlp_w1);
      f(prefix + "mlp_b1", layer.mlp_b1);
      f(prefix + "mlp_w2", layer.mlp_w2);
      f(prefix + "mlp_b2", layer.mlp_b2);
    }
    if (!self.cam_kernels.empty()) {
      f("cam_kernels", self.cam_kernels);
      f("cam_bias", self.cam_bias);
    }
    if (!self.head_weights.empty()) {
      f("head_weights", self.head_weights);
    }
  }
};

/// Truncated-normal init (std 0.02) for projections and tokens, zeros for
/// biases, ones/zeros for the layer-norm affines.
ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed);

/// Per-layer, per-head row-stochastic attention matrices recorded during a
/// forward pass, each (C+M) x (C+M), softmax output before value weighting.
struct AttentionStack {
  int class_count = 0;   // C
  int patch_count = 0;   // M
  std::vector<std::vector<Tensor>> layers;  // [L][H]

  int layer_count() const { return static_cast<int>(layers.size()); }
  int head_count() const { return layers.empty() ? 0 : static_cast<int>(layers[0].size()); }
};

struct ForwardRecord {
  Tensor class_scores_cls;     // C
  Tensor class_scores_patch;   // C; empty for V1
  Tensor output_class_tokens;  // C x D
  Tensor output_patch_tokens;  // M x D
  Tensor patch_cam_features;   // N x N x C; empty for V1
  AttentionStack attention_stack;
};

/// Parameter leaves for one computation graph, aligned with
/// ModelParameters::for_each order.
struct ParameterLeaves {
  NodePtr patch_projection, class_tokens, positional_embedding;
  struct Layer {
    NodePtr wq, wk, wv, wo;
    NodePtr ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    NodePtr mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };
  std::vector<Layer> layers;
  NodePtr cam_kernels, cam_bias, head_weights;
  std::vector<NodePtr> ordered;
  std::vector<std::string> names;
};

ParameterLeaves make_leaves(const ModelParameters& params);

/// Graph handles from one forward pass; values are live graph nodes so a loss
/// can be attached for training.
struct ForwardGraph {
  NodePtr scores_cls;        // {C}
  NodePtr scores_patch;      // {C}; null for V1
  NodePtr out_class_tokens;  // {C, D}
  NodePtr out_patch_tokens;  // {M, D}
  NodePtr cam_features;      // {N, N, C}; null for V1
  AttentionStack stack;
  ParameterLeaves leaves;
};

/// Patchifies the image, projects patches, prepends the class tokens and adds
/// the positional embedding. Rows 0..C-1 are class tokens, rows C..C+M-1 are
/// patch tokens in row-major grid order.
NodePtr embed(const Tensor& image, const ParameterLeaves& leaves, const ModelConfig& config);

/// L pre-norm encoder layers (LN -> MHA -> add, LN -> MLP -> add), recording
/// each head's post-softmax attention softmax(Q Kt / sqrt(D/H)).
std::pair<NodePtr, AttentionStack> encode(const NodePtr& tokens, const ParameterLeaves& leaves,
                                          const ModelConfig& config);

/// Class scores from the output class tokens: rowwise average pooling by
/// default, rowwise max or a learned linear map for the head ablation.
NodePtr class_scores_from_tokens(const NodePtr& output_class_tokens, HeadMode mode,
                                 const NodePtr& head_weights);

/// V2 only: reshapes patch tokens to the grid, applies the C-channel 3x3
/// convolution and returns (pre-pooling features, spatial-mean scores).
std::pair<NodePtr, NodePtr> patch_cam_forward(const NodePtr& output_patch_tokens,
                                              const ParameterLeaves& leaves,
                                              const ModelConfig& config);

ForwardGraph forward_graph(const Tensor& image, const ModelParameters& params,
                           const ModelConfig& config);

/// Forward pass returning plain value snapshots, for inference and the
/// localization pipeline.
ForwardRecord forward(const Tensor& image, const ModelParameters& params,
                      const ModelConfig& config);

constexpr double kLayerNormEps = 1e-6;

}  // namespace mct
