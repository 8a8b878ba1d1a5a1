#include "mct/data_eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mct/parallel.hpp"
#include "mct/rng.hpp"

namespace mct {

namespace {

constexpr double kPixelNoise = 0.04;
constexpr double kTextureAmplitude = 0.08;
// Fraction of background pixels recolored with a random class color. These
// scattered distractors never form patch-coherent regions, so image-level
// class presence cannot be read off global color statistics alone.
constexpr double kDistractorRate = 0.08;

struct Rgb {
  double r, g, b;
};

// Evenly spaced hues at fixed saturation/value, so class colors stay far
// apart for any class count.
Rgb class_color(int cls, int num_classes) {
  const double h = 6.0 * static_cast<double>(cls) / static_cast<double>(num_classes);
  const double s = 0.75, v = 0.85;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// Patch sets for the two shape kinds, in patch coordinates.
std::vector<int> rect_patches(int n, int i0, int j0, int h, int w) {
  std::vector<int> cells;
  for (int i = i0; i < i0 + h; ++i)
    for (int j = j0; j < j0 + w; ++j) cells.push_back(i * n + j);
  return cells;
}

std::vector<int> diamond_patches(int n, int ci, int cj, int radius) {
  std::vector<int> cells;
  for (int i = std::max(0, ci - radius); i <= std::min(n - 1, ci + radius); ++i)
    for (int j = std::max(0, cj - radius); j <= std::min(n - 1, cj + radius); ++j)
      if (std::abs(i - ci) + std::abs(j - cj) <= radius) cells.push_back(i * n + j);
  return cells;
}

SyntheticSample generate_sample(std::uint64_t sample_seed, const ModelConfig& config) {
  const int n = config.grid_side;
  const int p = config.patch_size;
  const int side = config.image_side();
  const int c = config.num_classes;
  Rng rng(sample_seed);

  for (int attempt = 0; attempt < 256; ++attempt) {
    std::vector<int> mask(static_cast<std::size_t>(n) * n, 0);

    const int max_shapes = std::min(3, c);
    const int want = rng.uniform_int(1, max_shapes);
    std::vector<int> classes(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) classes[static_cast<std::size_t>(i)] = i;
    rng.shuffle(classes);

    const int lo = std::max(1, n / 4);
    const int hi = std::max(1, n / 2);

    bool ok = true;
    for (int s = 0; s < want && ok; ++s) {
      const int cls = classes[static_cast<std::size_t>(s)];
      bool placed = false;
      for (int retry = 0; retry < 40 && !placed; ++retry) {
        std::vector<int> cells;
        if (rng.uniform_int(0, 1) == 0) {
          const int h = rng.uniform_int(lo, hi);
          const int w = rng.uniform_int(lo, hi);
          cells = rect_patches(n, rng.uniform_int(0, n - h), rng.uniform_int(0, n - w), h, w);
        } else {
          const int radius = rng.uniform_int(lo, hi) / 2 + (lo == hi ? 0 : 1);
          cells = diamond_patches(n, rng.uniform_int(0, n - 1), rng.uniform_int(0, n - 1),
                                  std::max(0, radius));
        }
        bool overlap = false;
        for (int cell : cells) {
          if (mask[static_cast<std::size_t>(cell)] != 0) {
            overlap = true;
            break;
          }
        }
        if (overlap || cells.empty()) continue;
        for (int cell : cells) mask[static_cast<std::size_t>(cell)] = cls + 1;
        placed = true;
      }
      if (!placed) ok = false;  // crowded scene; regenerate from scratch
    }
    if (!ok) continue;

    SyntheticSample sample;
    sample.gt_mask = mask;
    sample.labels.y.assign(static_cast<std::size_t>(c), 0);
    for (int cell : mask) {
      if (cell > 0) sample.labels.y[static_cast<std::size_t>(cell - 1)] = 1;
    }

    sample.image = Tensor({3, side, side});
    const double bg = rng.uniform(0.40, 0.60);
    // Per-class stripe direction/frequency gives a texture cue on top of the
    // color difference.
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        const int cell = mask[static_cast<std::size_t>((y / p) * n + x / p)];
        double r, g, b;
        if (cell == 0) {
          r = g = b = bg;
        } else {
          const int cls = cell - 1;
          const Rgb base = class_color(cls, c);
          const double freq = 0.5 + 0.35 * cls;
          const double phase = (cls % 2 == 0) ? (x + y) : (x - y);
          const double stripe = kTextureAmplitude * std::sin(freq * phase);
          r = base.r + stripe;
          g = base.g + stripe;
          b = base.b + stripe;
        }
        sample.image.at(0, y, x) = clamp01(r + rng.normal(0.0, kBackgroundNoise));
        sample.image.at(1, y, x) = clamp01(g + rng.normal(0.0, kBackgroundNoise));
        sample.image.at(2, y, x) = clamp01(b + rng.normal(0.0, kBackgroundNoise));
      }
    }
    return sample;
  }
  throw std::runtime_error("generate_dataset: could not place shapes after bounded retries");
}

}  // namespace

std::vector<SyntheticSample> generate_dataset(std::uint64_t seed, int count,
                                              const ModelConfig& config) {
  if (count < 1) throw std::invalid_argument("generate_dataset: count must be >= 1");
  config.validate();
  std::vector<SyntheticSample> samples(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    samples[static_cast<std::size_t>(i)] =
        generate_sample(mix_seed(seed, static_cast<std::uint64_t>(i)), config);
  }
  return samples;
}

std::vector<int> maps_to_mask(const ClassLocalizationMaps& maps, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("maps_to_mask: threshold must be in (0,1)");
  }
  const int c = maps.maps.dim(0);
  const int n = maps.maps.dim(1);
  std::vector<int> mask(static_cast<std::size_t>(n) * n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double best = -1.0;
      int arg = -1;
      for (int k = 0; k < c; ++k) {
        const double v = maps.maps.at(k, i, j);
        if (v > best) {  // strict: ties keep the lowest class index
          best = v;
          arg = k;
        }
      }
      if (best >= threshold) mask[static_cast<std::size_t>(i) * n + j] = arg + 1;
    }
  }
  return mask;
}

SeedEvaluation evaluate_seeds(const std::vector<std::vector<int>>& predictions,
                              const std::vector<std::vector<int>>& truths, int num_classes) {
  if (predictions.empty() || truths.empty()) {
    throw std::invalid_argument("evaluate_seeds: empty input");
  }
  if (predictions.size() != truths.size()) {
    throw std::invalid_argument("evaluate_seeds: " + std::to_string(predictions.size()) +
                                " predictions vs " + std::to_string(truths.size()) + " truths");
  }

  const int classes = num_classes + 1;  // plus background
  std::vector<long> confusion(static_cast<std::size_t>(classes) * classes, 0);
  for (std::size_t s = 0; s < predictions.size(); ++s) {
    const auto& pred = predictions[s];
    const auto& truth = truths[s];
    if (pred.size() != truth.size()) {
      throw std::invalid_argument("evaluate_seeds: mask size mismatch at sample " +
                                  std::to_string(s));
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (truth[i] < 0 || truth[i] > num_classes || pred[i] < 0 || pred[i] > num_classes) {
        throw std::invalid_argument("evaluate_seeds: label outside {0.." +
                                    std::to_string(num_classes) + "}");
      }
      confusion[static_cast<std::size_t>(truth[i]) * classes + pred[i]] += 1;
    }
  }

  SeedEvaluation eval;
  eval.per_class_iou.assign(static_cast<std::size_t>(classes), 0.0);
  eval.class_present.assign(static_cast<std::size_t>(classes), false);

  long fg_total = 0;
  long over = 0;
  long under = 0;
  double iou_sum = 0.0;
  int iou_count = 0;
  for (int k = 0; k < classes; ++k) {
    long truth_k = 0, pred_k = 0;
    for (int j = 0; j < classes; ++j) {
      truth_k += confusion[static_cast<std::size_t>(k) * classes + j];
      pred_k += confusion[static_cast<std::size_t>(j) * classes + k];
    }
    const long inter = confusion[static_cast<std::size_t>(k) * classes + k];
    const long uni = truth_k + pred_k - inter;
    const bool present = k == 0 ? true : truth_k > 0;
    eval.class_present[static_cast<std::size_t>(k)] = present;
    if (present) {
      eval.per_class_iou[static_cast<std::size_t>(k)] =
          uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
      iou_sum += eval.per_class_iou[static_cast<std::size_t>(k)];
      ++iou_count;
    }
    if (k > 0) {
      fg_total += truth_k;
      over += pred_k - inter;   // predicted k where the truth is something else
      under += truth_k - inter; // truth k missed
    }
  }
  eval.miou = iou_sum / iou_count;
  if (fg_total > 0) {
    eval.fp = static_cast<double>(over) / static_cast<double>(fg_total);
    eval.fn = static_cast<double>(under) / static_cast<double>(fg_total);
  }
  return eval;
}

std::vector<double> default_threshold_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 19; ++i) grid.push_back(0.05 * i);
  return grid;
}

SeedEvaluation threshold_sweep(const std::vector<ClassLocalizationMaps>& maps,
                               const std::vector<std::vector<int>>& truths, int num_classes,
                               const std::vector<double>& grid) {
  if (grid.empty()) throw std::invalid_argument("threshold_sweep: empty threshold grid");

  SeedEvaluation best;
  bool have_best = false;
  for (double threshold : grid) {
    std::vector<std::vector<int>> predictions;
    predictions.reserve(maps.size());
    for (const auto& m : maps) predictions.push_back(maps_to_mask(m, threshold));
    SeedEvaluation eval = evaluate_seeds(predictions, truths, num_classes);
    eval.best_threshold = threshold;
    if (!have_best || eval.miou > best.miou) {  // strict: ties keep the lowest threshold
      best = eval;
      have_best = true;
    }
  }
  return best;
}

std::vector<KSweepRow> k_sweep(const ModelParameters& params, const ModelConfig& config,
                               const std::vector<SyntheticSample>& dataset,
                               const std::vector<int>& k_values, int threads) {
  ModelConfig v1 = config;
  v1.variant = Variant::V1;

  std::vector<ForwardRecord> records(dataset.size());
  parallel_for(static_cast<int>(dataset.size()), threads, [&](int i) {
    records[static_cast<std::size_t>(i)] =
        forward(dataset[static_cast<std::size_t>(i)].image, params, v1);
  });
  std::vector<std::vector<int>> truths;
  truths.reserve(dataset.size());
  for (const auto& s : dataset) truths.push_back(s.gt_mask);

  std::vector<KSweepRow> rows;
  for (int k : k_values) {
    ModelConfig cfg = v1;
    cfg.fuse_layers = k;
    std::vector<ClassLocalizationMaps> maps(records.size());
    parallel_for(static_cast<int>(records.size()), threads, [&](int i) {
      maps[static_cast<std::size_t>(i)] =
          localization_pipeline(records[static_cast<std::size_t>(i)], cfg);
    });
    const SeedEvaluation eval =
        threshold_sweep(maps, truths, config.num_classes, default_threshold_grid());
    rows.push_back({k, eval.fp, eval.fn, eval.miou, eval.best_threshold});
  }
  return rows;
}

}  // namespace mct
