#include "mct/model.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "mct/rng.hpp"

namespace mct {

std::string to_string(Variant v) { return v == Variant::V1 ? "V1" : "V2"; }

std::string to_string(HeadMode m) {
  switch (m) {
    case HeadMode::average_pool: return "average_pool";
    case HeadMode::max_pool: return "max_pool";
    case HeadMode::fully_connected: return "fully_connected";
  }
  return "average_pool";
}

Variant variant_from_string(const std::string& s) {
  if (s == "V1" || s == "v1") return Variant::V1;
  if (s == "V2" || s == "v2") return Variant::V2;
  throw std::invalid_argument("unknown variant '" + s + "' (expected V1 or V2)");
}

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "average_pool") return HeadMode::average_pool;
  if (s == "max_pool") return HeadMode::max_pool;
  if (s == "fully_connected") return HeadMode::fully_connected;
  throw std::invalid_argument("unknown head_mode '" + s + "'");
}

void ModelConfig::validate() const {
  if (num_classes < 1) throw std::invalid_argument("num_classes must be >= 1");
  if (grid_side < 2) throw std::invalid_argument("grid_side must be >= 2");
  if (num_layers < 1) throw std::invalid_argument("num_layers must be >= 1");
  if (num_heads < 1) throw std::invalid_argument("num_heads must be >= 1");
  if (embed_dim < 1 || embed_dim % num_heads != 0) {
    throw std::invalid_argument("embed_dim must be positive and divisible by num_heads");
  }
  if (fuse_layers < 1 || fuse_layers > num_layers) {
    throw std::invalid_argument("fuse_layers must be in [1, num_layers]");
  }
  if (patch_size < 1) throw std::invalid_argument("patch_size must be >= 1");
  if (!(mlp_ratio > 0.0)) throw std::invalid_argument("mlp_ratio must be > 0");
}

namespace {

Tensor trunc_normal(std::vector<int> shape, Rng& rng, double stddev = 0.02) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.truncated_normal(stddev);
  return t;
}

}  // namespace

ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, 0x706172616d73ull));
  const int d = config.embed_dim;
  const int dh = config.mlp_hidden();

  ModelParameters p;
  p.patch_projection = trunc_normal({config.patch_dim(), d}, rng);
  p.class_tokens = trunc_normal({config.num_classes, d}, rng);
  p.positional_embedding = trunc_normal({config.token_count(), d}, rng);
  p.layers.resize(static_cast<std::size_t>(config.num_layers));
  for (auto& layer : p.layers) {
    layer.wq = trunc_normal({d, d}, rng);
    layer.wk = trunc_normal({d, d}, rng);
    layer.wv = trunc_normal({d, d}, rng);
    layer.wo = trunc_normal({d, d}, rng);
    layer.ln1_gamma = Tensor::full({d}, 1.0);
    layer.ln1_beta = Tensor({d});
    layer.ln2_gamma = Tensor::full({d}, 1.0);
    layer.ln2_beta = Tensor({d});
    layer.mlp_w1 = trunc_normal({d, dh}, rng);
    layer.mlp_b1 = Tensor({dh});
    layer.mlp_w2 = trunc_normal({dh, d}, rng);
    layer.mlp_b2 = Tensor({d});
  }
  if (config.variant == Variant::V2) {
    p.cam_kernels = trunc_normal({config.num_classes, 3, 3, d}, rng);
    p.cam_bias = Tensor({config.num_classes});
  }
  if (config.head_mode == HeadMode::fully_connected) {
    p.head_weights = trunc_normal({config.num_classes * d, config.num_classes}, rng);
  }
  return p;
}

ParameterLeaves make_leaves(const ModelParameters& params) {
  ParameterLeaves leaves;
  std::unordered_map<std::string, NodePtr> by_name;
  params.for_each([&](const std::string& name, const Tensor& t) {
    auto leaf = parameter(t, name);
    leaves.ordered.push_back(leaf);
    leaves.names.push_back(name);
    by_name.emplace(name, std::move(leaf));
  });

  leaves.patch_projection = by_name.at("patch_projection");
  leaves.class_tokens = by_name.at("class_tokens");
  leaves.positional_embedding = by_name.at("positional_embedding");
  leaves.layers.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    auto& layer = leaves.layers[l];
    layer.wq = by_name.at(prefix + "wq");
    layer.wk = by_name.at(prefix + "wk");
    layer.wv = by_name.at(prefix + "wv");
    layer.wo = by_name.at(prefix + "wo");
    layer.ln1_gamma = by_name.at(prefix + "ln1_gamma");
    layer.ln1_beta = by_name.at(prefix + "ln1_beta");
    layer.ln2_gamma = by_name.at(prefix + "ln2_gamma");
    layer.ln2_beta = by_name.at(prefix + "ln2_beta");
    layer.mlp_w1 = by_name.at(prefix + "mlp_w1");
    layer.mlp_b1 = by_name.at(prefix + "mlp_b1");
    layer.mlp_w2 = by_name.at(prefix + "mlp_w2");
    layer.mlp_b2 = by_name.at(prefix + "mlp_b2");
  }
  if (auto it = by_name.find("cam_kernels"); it != by_name.end()) {
    leaves.cam_kernels = it->second;
    leaves.cam_bias = by_name.at("cam_bias");
  }
  if (auto it = by_name.find("head_weights"); it != by_name.end()) {
    leaves.head_weights = it->second;
  }
  return leaves;
}

NodePtr embed(const Tensor& image, const ParameterLeaves& leaves, const ModelConfig& config) {
  const int side = config.image_side();
  require_shape(image, {3, side, side}, "embed image");
  const int n = config.grid_side;
  const int p = config.patch_size;

  // Patch t = a*N + b covers pixels [a*P, a*P+P) x [b*P, b*P+P); within a
  // patch, features run (py, px, channel) with channel fastest.
  Tensor patches({config.patch_count(), config.patch_dim()});
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      const int t = a * n + b;
      int f = 0;
      for (int py = 0; py < p; ++py) {
        for (int px = 0; px < p; ++px) {
          for (int ch = 0; ch < 3; ++ch) {
            patches.at(t, f++) = image.at(ch, a * p + py, b * p + px);
          }
        }
      }
    }
  }

  auto patch_tokens = matmul(constant(std::move(patches), "patches"), leaves.patch_projection);
  auto tokens = concat_rows({leaves.class_tokens, patch_tokens});
  return add(tokens, leaves.positional_embedding);
}

std::pair<NodePtr, AttentionStack> encode(const NodePtr& tokens, const ParameterLeaves& leaves,
                                          const ModelConfig& config) {
  const int t = config.token_count();
  require_shape(tokens->value, {t, config.embed_dim}, "encode tokens");
  const int heads = config.num_heads;
  const int dh = config.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  AttentionStack stack;
  stack.class_count = config.num_classes;
  stack.patch_count = config.patch_count();
  stack.layers.reserve(leaves.layers.size());

  NodePtr x = tokens;
  for (const auto& layer : leaves.layers) {
    auto normed = layer_norm(x, layer.ln1_gamma, layer.ln1_beta, kLayerNormEps);
    auto q = matmul(normed, layer.wq);
    auto k = matmul(normed, layer.wk);
    auto v = matmul(normed, layer.wv);

    std::vector<NodePtr> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(heads));
    std::vector<Tensor> recorded;
    recorded.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      auto qh = slice_cols(q, h * dh, dh);
      auto kh = slice_cols(k, h * dh, dh);
      auto vh = slice_cols(v, h * dh, dh);
      auto attn = softmax_rows(scale(matmul(qh, transpose(kh)), attn_scale));
      recorded.push_back(attn->value);
      head_outputs.push_back(matmul(attn, vh));
    }
    stack.layers.push_back(std::move(recorded));

    auto attended = matmul(concat_cols(head_outputs), layer.wo);
    x = add(x, attended);

    auto normed2 = layer_norm(x, layer.ln2_gamma, layer.ln2_beta, kLayerNormEps);
    auto hidden = gelu(add_row_bias(matmul(normed2, layer.mlp_w1), layer.mlp_b1));
    auto mlp_out = add_row_bias(matmul(hidden, layer.mlp_w2), layer.mlp_b2);
    x = add(x, mlp_out);
  }
  return {x, std::move(stack)};
}

NodePtr class_scores_from_tokens(const NodePtr& output_class_tokens, HeadMode mode,
                                 const NodePtr& head_weights) {
  switch (mode) {
    case HeadMode::average_pool:
      return row_mean(output_class_tokens);
    case HeadMode::max_pool:
      return row_max(output_class_tokens);
    case HeadMode::fully_connected: {
      if (!head_weights) {
        throw std::invalid_argument("fully_connected head requires head_weights");
      }
      const int c = output_class_tokens->value.dim(0);
      const int d = output_class_tokens->value.dim(1);
      auto flat = reshape(output_class_tokens, {1, c * d});
      return reshape(matmul(flat, head_weights), {c});
    }
  }
  throw std::invalid_argument("unknown head mode");
}

std::pair<NodePtr, NodePtr> patch_cam_forward(const NodePtr& output_patch_tokens,
                                              const ParameterLeaves& leaves,
                                              const ModelConfig& config) {
  if (config.variant != Variant::V2 || !leaves.cam_kernels) {
    throw std::invalid_argument("patch_cam_forward: unsupported variant (requires V2)");
  }
  const int n = config.grid_side;
  require_shape(output_patch_tokens->value, {config.patch_count(), config.embed_dim},
                "patch_cam_forward tokens");
  auto grid = reshape(output_patch_tokens, {n, n, config.embed_dim});
  auto features = conv3x3(grid, leaves.cam_kernels, leaves.cam_bias);
  auto scores = spatial_mean(features);
  return {features, scores};
}

ForwardGraph forward_graph(const Tensor& image, const ModelParameters& params,
                           const ModelConfig& config) {
  config.validate();
  ForwardGraph g;
  g.leaves = make_leaves(params);

  auto tokens = embed(image, g.leaves, config);
  auto [encoded, stack] = encode(tokens, g.leaves, config);
  g.stack = std::move(stack);

  g.out_class_tokens = slice_rows(encoded, 0, config.num_classes);
  g.out_patch_tokens = slice_rows(encoded, config.num_classes, config.patch_count());
  g.scores_cls = class_scores_from_tokens(g.out_class_tokens, config.head_mode,
                                          g.leaves.head_weights);
  if (config.variant == Variant::V2) {
    auto [features, scores] = patch_cam_forward(g.out_patch_tokens, g.leaves, config);
    g.cam_features = features;
    g.scores_patch = scores;
  }
  return g;
}

ForwardRecord forward(const Tensor& image, const ModelParameters& params,
                      const ModelConfig& config) {
  ForwardGraph g = forward_graph(image, params, config);
  ForwardRecord record;
  record.class_scores_cls = g.scores_cls->value;
  record.output_class_tokens = g.out_class_tokens->value;
  record.output_patch_tokens = g.out_patch_tokens->value;
  if (g.scores_patch) record.class_scores_patch = g.scores_patch->value;
  if (g.cam_features) record.patch_cam_features = g.cam_features->value;
  record.attention_stack = std::move(g.stack);
  return record;
}

}  // namespace mct
