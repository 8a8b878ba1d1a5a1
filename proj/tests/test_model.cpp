#include <doctest.h>

#include <cmath>
#include <vector>

#include "mct/gradcheck.hpp"
#include "mct/model.hpp"
#include "mct/rng.hpp"
#include "test_support.hpp"

using namespace mct;
using namespace mct::testing;

namespace {

ModelConfig tiny_config() {
  ModelConfig config;
  config.num_classes = 2;
  config.grid_side = 2;
  config.embed_dim = 8;
  config.num_layers = 2;
  config.num_heads = 2;
  config.fuse_layers = 2;
  config.patch_size = 2;
  config.variant = Variant::V2;
  return config;
}

ModelParameters random_parameters(const ModelConfig& config, std::uint64_t seed, double spread) {
  ModelParameters params = init_parameters(config, seed);
  Rng rng(mix_seed(seed, 99));
  params.for_each([&](const std::string& name, Tensor& t) {
    if (name.find("ln") != std::string::npos) return;  // keep layer norms sane
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-spread, spread);
  });
  return params;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig config = tiny_config();
  CHECK_NOTHROW(config.validate());
  config.embed_dim = 9;  // not divisible by 2 heads
  CHECK_THROWS_AS(config.validate(), std::invalid_argument);
  config = tiny_config();
  config.fuse_layers = 3;
  CHECK_THROWS_AS(config.validate(), std::invalid_argument);
  config = tiny_config();
  config.grid_side = 1;
  CHECK_THROWS_AS(config.validate(), std::invalid_argument);
}

TEST_CASE("embed places class tokens and zero patches") {
  ModelConfig config = tiny_config();
  ModelParameters params = init_parameters(config, 1);
  // Zero projection and positional embedding isolate the token layout.
  for (auto& v : params.patch_projection.values()) v = 0.0;
  for (auto& v : params.positional_embedding.values()) v = 0.0;

  Tensor image({3, config.image_side(), config.image_side()});
  auto leaves = make_leaves(params);
  auto tokens = embed(image, leaves, config);

  for (int c = 0; c < config.num_classes; ++c)
    for (int j = 0; j < config.embed_dim; ++j)
      CHECK(tokens->value.at(c, j) == params.class_tokens.at(c, j));
  for (int t = config.num_classes; t < config.token_count(); ++t)
    for (int j = 0; j < config.embed_dim; ++j) CHECK(tokens->value.at(t, j) == 0.0);

  Tensor wrong({3, 3, 3});
  CHECK_THROWS_AS(embed(wrong, leaves, config), std::invalid_argument);
}

TEST_CASE("embed permutes token rows when patches are swapped") {
  ModelConfig config = tiny_config();
  ModelParameters params = random_parameters(config, 2, 0.5);
  for (auto& v : params.positional_embedding.values()) v = 0.0;

  Rng rng(3);
  Tensor image = random_tensor({3, config.image_side(), config.image_side()}, rng, 0.0, 1.0);

  // Swap patch (0,0) with patch (0,1): a P x P pixel block per channel.
  Tensor swapped = image;
  const int p = config.patch_size;
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x)
        std::swap(swapped.at(ch, y, x), swapped.at(ch, y, p + x));

  auto leaves = make_leaves(params);
  auto base = embed(image, leaves, config);
  auto moved = embed(swapped, leaves, config);

  const int c = config.num_classes;
  for (int j = 0; j < config.embed_dim; ++j) {
    CHECK(moved->value.at(c + 0, j) == base->value.at(c + 1, j));
    CHECK(moved->value.at(c + 1, j) == base->value.at(c + 0, j));
    CHECK(moved->value.at(c + 2, j) == base->value.at(c + 2, j));
    CHECK(moved->value.at(c + 3, j) == base->value.at(c + 3, j));
  }
}

TEST_CASE("embed matches a hand-computed projection on a 2x2 grid") {
  ModelConfig config;
  config.num_classes = 1;
  config.grid_side = 2;
  config.embed_dim = 3;
  config.num_layers = 1;
  config.num_heads = 1;
  config.fuse_layers = 1;
  config.patch_size = 1;  // each patch is one pixel: features are its 3 channels
  config.variant = Variant::V1;

  ModelParameters params = random_parameters(config, 4, 1.0);
  Rng rng(5);
  Tensor image = random_tensor({3, 2, 2}, rng, 0.0, 1.0);

  auto tokens = embed(image, make_leaves(params), config);
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      const int t = a * 2 + b;
      for (int j = 0; j < 3; ++j) {
        double expect = params.positional_embedding.at(1 + t, j);
        for (int ch = 0; ch < 3; ++ch)
          expect += image.at(ch, a, b) * params.patch_projection.at(ch, j);
        CHECK(tokens->value.at(1 + t, j) == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("encode records row-stochastic attention for random parameters") {
  ModelConfig config = tiny_config();
  ModelParameters params = random_parameters(config, 6, 0.4);
  Rng rng(7);
  Tensor image = random_tensor({3, config.image_side(), config.image_side()}, rng, 0.0, 1.0);

  ForwardRecord record = forward(image, params, config);
  const auto& stack = record.attention_stack;
  REQUIRE(stack.layer_count() == config.num_layers);
  const int t = config.token_count();
  for (const auto& layer : stack.layers) {
    REQUIRE(static_cast<int>(layer.size()) == config.num_heads);
    for (const auto& head : layer) {
      REQUIRE(head.shape() == std::vector<int>{t, t});
      for (int i = 0; i < t; ++i) {
        double sum = 0.0;
        for (int j = 0; j < t; ++j) sum += head.at(i, j);
        CHECK(std::abs(sum - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("encode with zero queries and keys gives uniform attention") {
  ModelConfig config = tiny_config();
  ModelParameters params = random_parameters(config, 8, 0.4);
  for (auto& layer : params.layers) {
    for (auto& v : layer.wq.values()) v = 0.0;
    for (auto& v : layer.wk.values()) v = 0.0;
  }
  Rng rng(9);
  Tensor image = random_tensor({3, config.image_side(), config.image_side()}, rng, 0.0, 1.0);
  ForwardRecord record = forward(image, params, config);

  const double uniform = 1.0 / config.token_count();
  for (const auto& layer : record.attention_stack.layers)
    for (const auto& head : layer)
      for (std::size_t i = 0; i < head.size(); ++i)
        CHECK(head[i] == doctest::Approx(uniform).epsilon(1e-12));
}

TEST_CASE("one encoder layer matches a fully manual calculation") {
  // Single head, single layer, 1 class + 4 patch tokens, embed dim 2; the
  // whole layer is recomputed below with straight-line loops.
  ModelConfig config;
  config.num_classes = 1;
  config.grid_side = 2;
  config.embed_dim = 2;
  config.num_layers = 1;
  config.num_heads = 1;
  config.fuse_layers = 1;
  config.patch_size = 1;
  config.mlp_ratio = 2.0;
  config.variant = Variant::V1;

  ModelParameters params = random_parameters(config, 10, 0.8);
  Rng rng(11);
  const int t = config.token_count();  // 5
  const int d = config.embed_dim;      // 2
  const int hidden = config.mlp_hidden();
  Tensor input = random_tensor({t, d}, rng);

  auto leaves = make_leaves(params);
  auto [encoded, stack] = encode(constant(input), leaves, config);

  // Manual recomputation.
  const auto& lp = params.layers[0];
  auto layer_norm_row = [&](const Tensor& x, int row, const Tensor& gamma, const Tensor& beta,
                            std::vector<double>& out) {
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += x.at(row, j);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (x.at(row, j) - mean) * (x.at(row, j) - mean);
    var /= d;
    for (int j = 0; j < d; ++j) {
      out[static_cast<std::size_t>(j)] =
          gamma[static_cast<std::size_t>(j)] * (x.at(row, j) - mean) / std::sqrt(var + 1e-6) +
          beta[static_cast<std::size_t>(j)];
    }
  };

  Tensor normed({t, d});
  std::vector<double> row(static_cast<std::size_t>(d));
  for (int i = 0; i < t; ++i) {
    layer_norm_row(input, i, lp.ln1_gamma, lp.ln1_beta, row);
    for (int j = 0; j < d; ++j) normed.at(i, j) = row[static_cast<std::size_t>(j)];
  }

  auto matmul_manual = [](const Tensor& a, const Tensor& b) {
    Tensor out({a.dim(0), b.dim(1)});
    for (int i = 0; i < a.dim(0); ++i)
      for (int j = 0; j < b.dim(1); ++j) {
        double acc = 0.0;
        for (int k = 0; k < a.dim(1); ++k) acc += a.at(i, k) * b.at(k, j);
        out.at(i, j) = acc;
      }
    return out;
  };

  Tensor q = matmul_manual(normed, lp.wq);
  Tensor k = matmul_manual(normed, lp.wk);
  Tensor v = matmul_manual(normed, lp.wv);

  Tensor attn({t, t});
  for (int i = 0; i < t; ++i) {
    std::vector<double> logits(static_cast<std::size_t>(t));
    double mx = -1e300;
    for (int j = 0; j < t; ++j) {
      double acc = 0.0;
      for (int kk = 0; kk < d; ++kk) acc += q.at(i, kk) * k.at(j, kk);
      logits[static_cast<std::size_t>(j)] = acc / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
    }
    double sum = 0.0;
    for (int j = 0; j < t; ++j) {
      attn.at(i, j) = std::exp(logits[static_cast<std::size_t>(j)] - mx);
      sum += attn.at(i, j);
    }
    for (int j = 0; j < t; ++j) attn.at(i, j) /= sum;
  }

  Tensor after_attn = matmul_manual(matmul_manual(attn, v), lp.wo);
  Tensor x2({t, d});
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) x2.at(i, j) = input.at(i, j) + after_attn.at(i, j);

  Tensor normed2({t, d});
  for (int i = 0; i < t; ++i) {
    layer_norm_row(x2, i, lp.ln2_gamma, lp.ln2_beta, row);
    for (int j = 0; j < d; ++j) normed2.at(i, j) = row[static_cast<std::size_t>(j)];
  }
  Tensor expected({t, d});
  for (int i = 0; i < t; ++i) {
    std::vector<double> act(static_cast<std::size_t>(hidden));
    for (int h = 0; h < hidden; ++h) {
      double acc = lp.mlp_b1[static_cast<std::size_t>(h)];
      for (int j = 0; j < d; ++j) acc += normed2.at(i, j) * lp.mlp_w1.at(j, h);
      const double th = std::tanh(std::sqrt(2.0 / M_PI) * (acc + 0.044715 * acc * acc * acc));
      act[static_cast<std::size_t>(h)] = 0.5 * acc * (1.0 + th);
    }
    for (int j = 0; j < d; ++j) {
      double acc = lp.mlp_b2[static_cast<std::size_t>(j)];
      for (int h = 0; h < hidden; ++h) acc += act[static_cast<std::size_t>(h)] * lp.mlp_w2.at(h, j);
      expected.at(i, j) = x2.at(i, j) + acc;
    }
  }

  CHECK(max_abs_diff(encoded->value, expected) < 1e-10);
  CHECK(max_abs_diff(stack.layers[0][0], attn) < 1e-10);
}

TEST_CASE("class score heads") {
  auto ones = constant(Tensor::full({3, 4}, 1.0));
  auto avg = class_scores_from_tokens(ones, HeadMode::average_pool, nullptr);
  for (int c = 0; c < 3; ++c) CHECK(avg->value[static_cast<std::size_t>(c)] == 1.0);

  auto tokens = constant(Tensor({1, 2}, {1, 3}));
  CHECK(class_scores_from_tokens(tokens, HeadMode::average_pool, nullptr)->value[0] == 2.0);
  CHECK(class_scores_from_tokens(tokens, HeadMode::max_pool, nullptr)->value[0] == 3.0);

  // Average-pool head gradient is 1/D for every token feature.
  auto p = parameter(Tensor({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}));
  auto scores = class_scores_from_tokens(p, HeadMode::average_pool, nullptr);
  backward(sum_all(scores));
  for (std::size_t i = 0; i < p->grad.size(); ++i)
    CHECK(p->grad[i] == doctest::Approx(0.25).epsilon(1e-12));

  // Fully-connected head is a learned linear map of the flattened tokens.
  Rng rng(12);
  auto weights = parameter(random_tensor({8, 2}, rng));
  auto fc = class_scores_from_tokens(p, HeadMode::fully_connected, weights);
  for (int c = 0; c < 2; ++c) {
    double expect = 0.0;
    for (int i = 0; i < 8; ++i) expect += p->value[static_cast<std::size_t>(i)] * weights->value.at(i, c);
    CHECK(fc->value[static_cast<std::size_t>(c)] == doctest::Approx(expect).epsilon(1e-12));
  }
  CHECK_THROWS_AS(class_scores_from_tokens(p, HeadMode::fully_connected, nullptr),
                  std::invalid_argument);
}

TEST_CASE("patch cam forward") {
  ModelConfig config = tiny_config();
  ModelParameters params = random_parameters(config, 13, 0.5);

  // Zero kernels: scores equal the bias, features constant per channel.
  for (auto& v : params.cam_kernels.values()) v = 0.0;
  params.cam_bias = Tensor({2}, {0.75, -0.25});
  Rng rng(14);
  auto tokens = constant(random_tensor({config.patch_count(), config.embed_dim}, rng));
  auto leaves = make_leaves(params);
  auto [features, scores] = patch_cam_forward(tokens, leaves, config);
  CHECK(scores->value[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(scores->value[1] == doctest::Approx(-0.25).epsilon(1e-12));
  for (int i = 0; i < config.grid_side; ++i)
    for (int j = 0; j < config.grid_side; ++j) {
      CHECK(features->value.at(i, j, 0) == 0.75);
      CHECK(features->value.at(i, j, 1) == -0.25);
    }

  // Random kernels against the nested-loop oracle plus mean.
  params = random_parameters(config, 15, 0.5);
  leaves = make_leaves(params);
  auto grid_tokens = constant(random_tensor({config.patch_count(), config.embed_dim}, rng));
  auto [feat2, scores2] = patch_cam_forward(grid_tokens, leaves, config);

  Tensor grid({config.grid_side, config.grid_side, config.embed_dim},
              grid_tokens->value.values());
  Tensor expect = conv3x3_oracle(grid, params.cam_kernels, params.cam_bias);
  CHECK(max_abs_diff(feat2->value, expect) < 1e-10);
  for (int c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (int i = 0; i < config.grid_side; ++i)
      for (int j = 0; j < config.grid_side; ++j) mean += expect.at(i, j, c);
    mean /= config.patch_count();
    CHECK(scores2->value[static_cast<std::size_t>(c)] == doctest::Approx(mean).epsilon(1e-10));
  }

  // V1 has no patch-CAM head.
  ModelConfig v1 = config;
  v1.variant = Variant::V1;
  ModelParameters v1_params = init_parameters(v1, 16);
  auto v1_leaves = make_leaves(v1_params);
  CHECK_THROWS_AS(patch_cam_forward(grid_tokens, v1_leaves, v1), std::invalid_argument);
}

TEST_CASE("variant controls which outputs a record carries") {
  ModelConfig config = tiny_config();
  Rng rng(17);
  Tensor image = random_tensor({3, config.image_side(), config.image_side()}, rng, 0.0, 1.0);

  ModelConfig v1 = config;
  v1.variant = Variant::V1;
  ModelParameters v1_params = init_parameters(v1, 18);
  CHECK(v1_params.cam_kernels.empty());
  CHECK(v1_params.cam_bias.empty());
  ForwardRecord v1_record = forward(image, v1_params, v1);
  CHECK(v1_record.class_scores_patch.empty());
  CHECK(v1_record.patch_cam_features.empty());
  CHECK(v1_record.class_scores_cls.size() == 2);

  ModelParameters v2_params = init_parameters(config, 18);
  CHECK_FALSE(v2_params.cam_kernels.empty());
  ForwardRecord v2_record = forward(image, v2_params, config);
  CHECK(v2_record.class_scores_cls.size() == 2);
  CHECK(v2_record.class_scores_patch.size() == 2);
  CHECK(v2_record.patch_cam_features.shape() ==
        std::vector<int>{config.grid_side, config.grid_side, 2});
}

TEST_CASE("forward is deterministic") {
  ModelConfig config = tiny_config();
  ModelParameters params = init_parameters(config, 19);
  Rng rng(20);
  Tensor image = random_tensor({3, config.image_side(), config.image_side()}, rng, 0.0, 1.0);

  ForwardRecord a = forward(image, params, config);
  ForwardRecord b = forward(image, params, config);
  CHECK(a.class_scores_cls.values() == b.class_scores_cls.values());
  CHECK(a.class_scores_patch.values() == b.class_scores_patch.values());
  CHECK(a.output_patch_tokens.values() == b.output_patch_tokens.values());
  for (int l = 0; l < config.num_layers; ++l)
    for (int h = 0; h < config.num_heads; ++h)
      CHECK(a.attention_stack.layers[l][h].values() == b.attention_stack.layers[l][h].values());
}

TEST_CASE("permuting class-token rows permutes class scores") {
  ModelConfig config;
  config.num_classes = 3;
  config.grid_side = 2;
  config.embed_dim = 8;
  config.num_layers = 2;
  config.num_heads = 2;
  config.fuse_layers = 1;
  config.patch_size = 2;
  config.variant = Variant::V1;

  ModelParameters params = init_parameters(config, 21);
  Rng rng(22);
  Tensor image = random_tensor({3, config.image_side(), config.image_side()}, rng, 0.0, 1.0);
  ForwardRecord base = forward(image, params, config);

  const std::vector<int> perm = {2, 0, 1};  // class c of the permuted model = old perm[c]
  ModelParameters permuted = params;
  for (int c = 0; c < 3; ++c)
    for (int j = 0; j < config.embed_dim; ++j) {
      permuted.class_tokens.at(c, j) = params.class_tokens.at(perm[c], j);
      permuted.positional_embedding.at(c, j) = params.positional_embedding.at(perm[c], j);
    }

  ForwardRecord moved = forward(image, permuted, config);
  for (int c = 0; c < 3; ++c) {
    CHECK(moved.class_scores_cls[static_cast<std::size_t>(c)] ==
          doctest::Approx(base.class_scores_cls[static_cast<std::size_t>(perm[c])])
              .epsilon(1e-12));
  }
}
