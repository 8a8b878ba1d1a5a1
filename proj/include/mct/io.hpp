#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mct/attention_maps.hpp"
#include "mct/data_eval.hpp"
#include "mct/model.hpp"
#include "mct/training.hpp"

namespace mct {

/// Lossless text formatting for doubles (%.17g), used by every file format so
/// identical computations serialize to identical bytes.
std::string format_double(double v);

// ---- Checkpoint -----------------------------------------------------------
// Self-describing text archive: a config line plus one shape line and one
// value line per parameter, in ModelParameters::for_each order.

void save_checkpoint(const std::string& path, const ModelParameters& params,
                     const ModelConfig& config);

struct Checkpoint {
  ModelParameters params;
  ModelConfig config;
};

Checkpoint load_checkpoint(const std::string& path);

// ---- Dataset archive ------------------------------------------------------
// Binary: magic line, JSON header line, then per sample the raw row-major
// image doubles, C label bytes and N*N mask bytes (native endianness).

void save_dataset(const std::string& path, const std::vector<SyntheticSample>& samples,
                  const ModelConfig& config, std::uint64_t seed);

struct DatasetArchive {
  std::vector<SyntheticSample> samples;
  int num_classes = 0;
  int grid_side = 0;
  int patch_size = 0;
  std::uint64_t seed = 0;
};

DatasetArchive load_dataset(const std::string& path);

// ---- Map and report exports -----------------------------------------------

/// 8-bit binary PGM; pixel = round(255 * value), clamped to [0, 255].
void write_pgm(const std::string& path, const Tensor& map);

/// All samples' raw map values in one CSV: sample,class,i,j,value.
void write_maps_csv(const std::string& path, const std::vector<ClassLocalizationMaps>& maps);
std::vector<ClassLocalizationMaps> read_maps_csv(const std::string& path);

void write_loss_csv(const std::string& path, const std::vector<LossTraceRow>& trace);

/// report.csv: class,present,iou rows (background first);
/// summary.csv: metric,value rows for miou/fp/fn/best_threshold.
void write_report_csv(const std::string& report_path, const std::string& summary_path,
                      const SeedEvaluation& eval);

/// Raw binary affinity tensor behind a JSON shape header line.
void write_affinity(const std::string& path, const PairwiseAffinity& affinity);

// ---- Run manifest ---------------------------------------------------------

/// Everything needed to reproduce a command: flags, seed, paths. Written
/// atomically (temp file + rename) before the run starts.
struct RunManifest {
  std::string command;
  ModelConfig config;
  std::uint64_t seed = 0;
  std::string dataset_path;
  std::string checkpoint_path;
  std::string output_dir;
  std::vector<std::pair<std::string, std::string>> extra;  // command-specific
  std::string timestamp;  // ISO-8601 UTC, informational only
};

void write_manifest(const std::string& path, const RunManifest& manifest);

}  // namespace mct
