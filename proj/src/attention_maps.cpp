#include "mct/attention_maps.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mct {

namespace {

// Below this range a map is treated as constant and normalized to zeros.
constexpr double kConstantMapRange = 1e-12;

void require_square_tokens(const Tensor& a, int class_count, int patch_count, const char* op) {
  const int t = class_count + patch_count;
  if (a.rank() != 2 || a.dim(0) != t || a.dim(1) != t) {
    throw std::invalid_argument(std::string(op) + ": expected " + shape_string({t, t}) +
                                " token attention, got " + shape_string(a.shape()));
  }
}

int grid_side_of(int patch_count, const char* op) {
  const int n = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patch_count))));
  if (n * n != patch_count) {
    throw std::invalid_argument(std::string(op) + ": patch count " + std::to_string(patch_count) +
                                " is not a square grid");
  }
  return n;
}

}  // namespace

Tensor head_average(const AttentionStack& stack, int layer) {
  if (layer < 0 || layer >= stack.layer_count()) {
    throw std::invalid_argument("head_average: layer " + std::to_string(layer) +
                                " out of range [0, " + std::to_string(stack.layer_count()) + ")");
  }
  const auto& heads = stack.layers[static_cast<std::size_t>(layer)];
  Tensor mean(heads[0].shape());
  for (const auto& h : heads) {
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += h[i];
  }
  const double inv = 1.0 / static_cast<double>(heads.size());
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] *= inv;
  return mean;
}

Tensor slice_class_to_patch(const Tensor& token_attention, int class_count, int patch_count) {
  require_square_tokens(token_attention, class_count, patch_count, "slice_class_to_patch");
  Tensor out({class_count, patch_count});
  for (int c = 0; c < class_count; ++c)
    for (int p = 0; p < patch_count; ++p) out.at(c, p) = token_attention.at(c, class_count + p);
  return out;
}

Tensor slice_patch_to_patch(const Tensor& token_attention, int class_count, int patch_count) {
  require_square_tokens(token_attention, class_count, patch_count, "slice_patch_to_patch");
  Tensor out({patch_count, patch_count});
  for (int i = 0; i < patch_count; ++i)
    for (int j = 0; j < patch_count; ++j)
      out.at(i, j) = token_attention.at(class_count + i, class_count + j);
  return out;
}

Tensor fuse_class_attention(const AttentionStack& stack, int fuse_layers) {
  const int total = stack.layer_count();
  if (fuse_layers < 1 || fuse_layers > total) {
    throw std::invalid_argument("fuse_class_attention: fuse_layers " +
                                std::to_string(fuse_layers) + " out of range [1, " +
                                std::to_string(total) + "]");
  }
  Tensor fused({stack.class_count, stack.patch_count});
  for (int l = total - fuse_layers; l < total; ++l) {
    const Tensor slice = slice_class_to_patch(head_average(stack, l), stack.class_count,
                                              stack.patch_count);
    for (std::size_t i = 0; i < fused.size(); ++i) fused[i] += slice[i];
  }
  const double inv = 1.0 / static_cast<double>(fuse_layers);
  for (std::size_t i = 0; i < fused.size(); ++i) fused[i] *= inv;
  return fused;
}

ClassLocalizationMaps min_max_normalize(const Tensor& maps) {
  if (maps.rank() != 3) {
    throw std::invalid_argument("min_max_normalize: expected {C,N,N}, got " +
                                shape_string(maps.shape()));
  }
  maps.require_finite("min_max_normalize input");
  const int c = maps.dim(0);
  const std::size_t plane = static_cast<std::size_t>(maps.dim(1)) * maps.dim(2);

  ClassLocalizationMaps out;
  out.maps = Tensor(maps.shape());
  for (int k = 0; k < c; ++k) {
    const double* src = maps.data() + static_cast<std::size_t>(k) * plane;
    double* dst = out.maps.data() + static_cast<std::size_t>(k) * plane;
    double lo = src[0], hi = src[0];
    for (std::size_t i = 1; i < plane; ++i) {
      lo = std::min(lo, src[i]);
      hi = std::max(hi, src[i]);
    }
    const double range = hi - lo;
    if (range <= kConstantMapRange) {
      // Constant map carries no evidence; all zeros rather than all ones.
      continue;
    }
    for (std::size_t i = 0; i < plane; ++i) dst[i] = (src[i] - lo) / range;
  }
  return out;
}

PairwiseAffinity build_affinity(const AttentionStack& stack, const std::vector<int>& layer_set) {
  if (layer_set.empty()) {
    throw std::invalid_argument("build_affinity: empty layer set");
  }
  const int m = stack.patch_count;
  const int n = grid_side_of(m, "build_affinity");

  Tensor mean({m, m});
  for (int layer : layer_set) {
    const Tensor slice = slice_patch_to_patch(head_average(stack, layer), stack.class_count, m);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += slice[i];
  }
  const double inv = 1.0 / static_cast<double>(layer_set.size());
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] *= inv;

  PairwiseAffinity out;
  out.affinity = Tensor({n, n, n, n}, std::move(mean.values()));
  return out;
}

PairwiseAffinity build_affinity(const AttentionStack& stack) {
  std::vector<int> all(static_cast<std::size_t>(stack.layer_count()));
  for (int l = 0; l < stack.layer_count(); ++l) all[static_cast<std::size_t>(l)] = l;
  return build_affinity(stack, all);
}

Tensor refine(const ClassLocalizationMaps& maps, const PairwiseAffinity& affinity) {
  const int c = maps.maps.dim(0);
  const int n = maps.maps.dim(1);
  require_shape(affinity.affinity, {n, n, n, n}, "refine affinity");

  // Flattened, this is maps {C, M} times affinity-transpose {M, M}.
  const int m = n * n;
  Tensor out({c, n, n});
  const double* aff = affinity.affinity.data();
  for (int k = 0; k < c; ++k) {
    const double* src = maps.maps.data() + static_cast<std::size_t>(k) * m;
    double* dst = out.data() + static_cast<std::size_t>(k) * m;
    for (int p = 0; p < m; ++p) {
      const double* row = aff + static_cast<std::size_t>(p) * m;
      double acc = 0.0;
      for (int q = 0; q < m; ++q) acc += row[q] * src[q];
      dst[p] = acc;
    }
  }
  return out;
}

Tensor extract_patch_cam(const Tensor& features) {
  if (features.rank() != 3 || features.dim(0) != features.dim(1)) {
    throw std::invalid_argument("extract_patch_cam: expected {N,N,C}, got " +
                                shape_string(features.shape()));
  }
  const int n = features.dim(0);
  const int c = features.dim(2);
  Tensor transposed({c, n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < c; ++k) transposed.at(k, i, j) = std::max(0.0, features.at(i, j, k));
  return min_max_normalize(transposed).maps;
}

Tensor fuse_with_patch_cam(const ClassLocalizationMaps& attention_maps, const Tensor& cam_maps) {
  if (!attention_maps.maps.same_shape(cam_maps)) {
    throw std::invalid_argument("fuse_with_patch_cam: shape mismatch " +
                                shape_string(attention_maps.maps.shape()) + " vs " +
                                shape_string(cam_maps.shape()));
  }
  Tensor out(cam_maps.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = attention_maps.maps[i] * cam_maps[i];
  return out;
}

std::string to_string(PipelineStage s) {
  switch (s) {
    case PipelineStage::attn: return "attn";
    case PipelineStage::attn_affinity: return "attn+affinity";
    case PipelineStage::attn_cam: return "attn+cam";
    case PipelineStage::full: return "full";
  }
  return "full";
}

PipelineStage pipeline_stage_from_string(const std::string& s) {
  if (s == "attn") return PipelineStage::attn;
  if (s == "attn+affinity") return PipelineStage::attn_affinity;
  if (s == "attn+cam") return PipelineStage::attn_cam;
  if (s == "full") return PipelineStage::full;
  throw std::invalid_argument("unknown pipeline stage '" + s +
                              "' (expected attn|attn+affinity|attn+cam|full)");
}

ClassLocalizationMaps localization_pipeline(const ForwardRecord& record, const ModelConfig& config,
                                            PipelineStage stage) {
  const auto& stack = record.attention_stack;
  if (stack.class_count != config.num_classes || stack.patch_count != config.patch_count() ||
      stack.layer_count() != config.num_layers) {
    throw std::invalid_argument("localization_pipeline: record does not match config");
  }
  const int n = config.grid_side;

  Tensor fused = fuse_class_attention(stack, config.fuse_layers);
  ClassLocalizationMaps maps =
      min_max_normalize(Tensor({config.num_classes, n, n}, std::move(fused.values())));

  const bool use_cam =
      stage == PipelineStage::attn_cam ||
      (stage == PipelineStage::full && config.variant == Variant::V2);
  if (use_cam) {
    if (config.variant != Variant::V2 || record.patch_cam_features.empty()) {
      throw std::invalid_argument("localization_pipeline: stage '" + to_string(stage) +
                                  "' needs V2 patch-CAM features");
    }
    Tensor cam = extract_patch_cam(record.patch_cam_features);
    Tensor product = fuse_with_patch_cam(maps, cam);
    auto notes = std::move(maps.notes);
    maps = min_max_normalize(product);
    maps.notes = std::move(notes);
    maps.notes.push_back("renormalized after patch-CAM fusion");
  }

  if (stage == PipelineStage::attn_affinity || stage == PipelineStage::full) {
    PairwiseAffinity affinity = build_affinity(stack);
    Tensor refined = refine(maps, affinity);
    auto notes = std::move(maps.notes);
    maps = min_max_normalize(refined);
    maps.notes = std::move(notes);
    maps.notes.push_back("affinity rows used as averaged, without renormalization");
    maps.notes.push_back("renormalized after affinity refinement");
  }
  return maps;
}

ClassLocalizationMaps localization_pipeline(const ForwardRecord& record,
                                            const ModelConfig& config) {
  return localization_pipeline(record, config, PipelineStage::full);
}

}  // namespace mct
