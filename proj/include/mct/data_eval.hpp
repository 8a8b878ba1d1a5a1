#pragma once

#include <cstdint>
#include <vector>

#include "mct/attention_maps.hpp"
#include "mct/model.hpp"
#include "mct/tensor.hpp"
#include "mct/training.hpp"

namespace mct {

/// One synthetic scene: RGB image, image-level labels and the patch-level
/// ground-truth mask (0 = background, 1..C = class).
struct SyntheticSample {
  Tensor image;              // {3, P*N, P*N}, values in [0,1]
  LabelVector labels;        // C entries
  std::vector<int> gt_mask;  // N*N entries in {0..C}, row-major
};

/// Places 1..3 non-overlapping class-coded shapes (distinct color and stripe
/// texture per class) on a noisy gray background. Deterministic per seed and
/// independent per sample index.
std::vector<SyntheticSample> generate_dataset(std::uint64_t seed, int count,
                                              const ModelConfig& config);

/// Argmax over classes where the winning map value reaches the threshold,
/// background otherwise; ties break to the lowest class index.
std::vector<int> maps_to_mask(const ClassLocalizationMaps& maps, double threshold);

struct SeedEvaluation {
  std::vector<double> per_class_iou;  // size C+1, index 0 = background
  std::vector<bool> class_present;    // per entry: appears in ground truth
  double miou = 0.0;
  double fp = 0.0;  // over-activation, relative to total foreground pixels
  double fn = 0.0;  // under-activation, same normalization
  double best_threshold = 0.0;  // only set by threshold_sweep
};

/// IoU per class over dataset-aggregated confusion counts. mIoU averages the
/// background plus every class present in the ground truth. FP counts pixels
/// predicted as a foreground class whose true label differs; FN counts
/// foreground truth pixels not predicted as their class; both are normalized
/// by the total number of foreground truth pixels.
SeedEvaluation evaluate_seeds(const std::vector<std::vector<int>>& predictions,
                              const std::vector<std::vector<int>>& truths, int num_classes);

std::vector<double> default_threshold_grid();  // 0.05 .. 0.95 step 0.05

/// Evaluates every threshold in the grid and returns the evaluation with the
/// best mIoU; ties break to the lowest threshold.
SeedEvaluation threshold_sweep(const std::vector<ClassLocalizationMaps>& maps,
                               const std::vector<std::vector<int>>& truths, int num_classes,
                               const std::vector<double>& grid);

struct KSweepRow {
  int fuse_layers = 0;
  double fp = 0.0;
  double fn = 0.0;
  double miou = 0.0;
  double best_threshold = 0.0;
};

/// Runs the V1-style pipeline (fused attention, affinity refinement) for each
/// requested fusion depth K and reports the swept metrics per K.
std::vector<KSweepRow> k_sweep(const ModelParameters& params, const ModelConfig& config,
                               const std::vector<SyntheticSample>& dataset,
                               const std::vector<int>& k_values, int threads = 0);

}  // namespace mct
