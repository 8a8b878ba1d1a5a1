#pragma once

#include <string>
#include <vector>

#include "mct/model.hpp"
#include "mct/tensor.hpp"

namespace mct {

/// C localization maps over the N x N patch grid, each min-max normalized to
/// [0,1] (all zeros for a constant map). `notes` records every normalization
/// applied beyond the ones the pipeline definition itself calls for.
struct ClassLocalizationMaps {
  Tensor maps;  // {C, N, N}
  std::vector<std::string> notes;
};

/// Patch-to-patch similarity reshaped to {N, N, N, N}; built from
/// row-stochastic attention averages, so each (i,j) slice sums to 1.
struct PairwiseAffinity {
  Tensor affinity;  // {N, N, N, N}
};

/// Arithmetic mean over the H head matrices of one layer.
Tensor head_average(const AttentionStack& stack, int layer);

/// Rows 0..C-1, columns C..C+M-1 of a token-to-token attention matrix: each
/// row is one class token's attention over all patches.
Tensor slice_class_to_patch(const Tensor& token_attention, int class_count, int patch_count);

/// The patch-token block: rows and columns C..C+M-1.
Tensor slice_patch_to_patch(const Tensor& token_attention, int class_count, int patch_count);

/// Mean over the last `fuse_layers` layers of head-averaged class-to-patch
/// slices, giving the raw {C, M} class-specific attention.
Tensor fuse_class_attention(const AttentionStack& stack, int fuse_layers);

/// Per-class (x - min) / (max - min) over the two spatial dimensions; a
/// constant class map becomes all zeros.
ClassLocalizationMaps min_max_normalize(const Tensor& maps);

/// Head-averages each listed layer's patch-to-patch slice, means over the
/// layer set and reshapes M x M to {N, N, N, N} row-major.
PairwiseAffinity build_affinity(const AttentionStack& stack, const std::vector<int>& layer_set);
PairwiseAffinity build_affinity(const AttentionStack& stack);  // all layers

/// out(c,i,j) = sum_{k,l} affinity(i,j,k,l) * maps(c,k,l).
Tensor refine(const ClassLocalizationMaps& maps, const PairwiseAffinity& affinity);

/// V2 feature map {N,N,C} -> {C,N,N}: clamp negatives to zero, then per-class
/// min-max normalize.
Tensor extract_patch_cam(const Tensor& features);

/// Hadamard product of the attention maps with the patch-CAM maps.
Tensor fuse_with_patch_cam(const ClassLocalizationMaps& attention_maps, const Tensor& cam_maps);

/// Which portion of the pipeline to run; the stages mirror the ablation rows.
enum class PipelineStage { attn, attn_affinity, attn_cam, full };
std::string to_string(PipelineStage s);
PipelineStage pipeline_stage_from_string(const std::string& s);

/// Full map pipeline for one forward record. V1: normalize fused attention,
/// refine with affinity, re-normalize. V2 additionally multiplies in the
/// patch-CAM maps (re-normalizing after the product) before refinement.
ClassLocalizationMaps localization_pipeline(const ForwardRecord& record,
                                            const ModelConfig& config);

/// Pipeline cut short at `stage`; `full` matches localization_pipeline.
ClassLocalizationMaps localization_pipeline(const ForwardRecord& record, const ModelConfig& config,
                                            PipelineStage stage);

}  // namespace mct
