#include "mct/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mct {

namespace {

void require_stream(const std::ios& stream, const std::string& what, const std::string& path) {
  if (!stream) throw std::runtime_error(what + " failed: " + path);
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require_stream(out, "opening output file", path);
  return out;
}

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require_stream(in, "opening input file", path);
  return in;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void save_checkpoint(const std::string& path, const ModelParameters& params,
                     const ModelConfig& config) {
  std::ostringstream out;
  out << "MCT-CHECKPOINT 1\n";
  out << "config num_classes=" << config.num_classes << " grid_side=" << config.grid_side
      << " embed_dim=" << config.embed_dim << " num_layers=" << config.num_layers
      << " num_heads=" << config.num_heads << " fuse_layers=" << config.fuse_layers
      << " patch_size=" << config.patch_size << " mlp_ratio=" << format_double(config.mlp_ratio)
      << " variant=" << to_string(config.variant) << " head_mode=" << to_string(config.head_mode)
      << "\n";

  int count = 0;
  params.for_each([&](const std::string&, const Tensor&) { ++count; });
  out << "params " << count << "\n";
  params.for_each([&](const std::string& name, const Tensor& t) {
    out << name << " " << t.rank();
    for (int d : t.shape()) out << " " << d;
    out << "\n";
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (i) out << " ";
      out << format_double(t[i]);
    }
    out << "\n";
  });

  auto file = open_output(path);
  file << out.str();
  require_stream(file, "writing checkpoint", path);
}

Checkpoint load_checkpoint(const std::string& path) {
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line) || line != "MCT-CHECKPOINT 1") {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  if (!std::getline(in, line) || line.rfind("config ", 0) != 0) {
    throw std::runtime_error("checkpoint missing config line: " + path);
  }

  Checkpoint ckpt;
  {
    std::istringstream cfg(line.substr(7));
    std::string item;
    while (cfg >> item) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw std::runtime_error("bad config entry: " + item);
      const std::string key = item.substr(0, eq);
      const std::string value = item.substr(eq + 1);
      if (key == "num_classes") ckpt.config.num_classes = std::stoi(value);
      else if (key == "grid_side") ckpt.config.grid_side = std::stoi(value);
      else if (key == "embed_dim") ckpt.config.embed_dim = std::stoi(value);
      else if (key == "num_layers") ckpt.config.num_layers = std::stoi(value);
      else if (key == "num_heads") ckpt.config.num_heads = std::stoi(value);
      else if (key == "fuse_layers") ckpt.config.fuse_layers = std::stoi(value);
      else if (key == "patch_size") ckpt.config.patch_size = std::stoi(value);
      else if (key == "mlp_ratio") ckpt.config.mlp_ratio = std::stod(value);
      else if (key == "variant") ckpt.config.variant = variant_from_string(value);
      else if (key == "head_mode") ckpt.config.head_mode = head_mode_from_string(value);
      else throw std::runtime_error("unknown checkpoint config key: " + key);
    }
  }
  ckpt.config.validate();

  int declared = 0;
  if (!(in >> line >> declared) || line != "params") {
    throw std::runtime_error("checkpoint missing params count: " + path);
  }

  ckpt.params = init_parameters(ckpt.config, 0);
  int loaded = 0;
  std::string pending_name;
  Tensor pending;
  auto read_entry = [&](const std::string& expect_name, Tensor& target) {
    std::string name;
    int rank = 0;
    if (!(in >> name >> rank)) throw std::runtime_error("truncated checkpoint: " + path);
    if (name != expect_name) {
      throw std::runtime_error("checkpoint parameter order mismatch: expected " + expect_name +
                               ", found " + name);
    }
    std::vector<int> shape(static_cast<std::size_t>(rank));
    for (auto& d : shape)
      if (!(in >> d)) throw std::runtime_error("truncated checkpoint: " + path);
    if (shape != target.shape()) {
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": file " +
                               shape_string(shape) + " vs model " + shape_string(target.shape()));
    }
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (!(in >> target[i])) throw std::runtime_error("truncated checkpoint: " + path);
    }
    ++loaded;
  };
  ckpt.params.for_each([&](const std::string& name, Tensor& t) { read_entry(name, t); });
  if (loaded != declared) {
    throw std::runtime_error("checkpoint parameter count mismatch: declared " +
                             std::to_string(declared) + ", loaded " + std::to_string(loaded));
  }
  return ckpt;
}

void save_dataset(const std::string& path, const std::vector<SyntheticSample>& samples,
                  const ModelConfig& config, std::uint64_t seed) {
  auto out = open_output(path);
  nlohmann::json header = {{"count", samples.size()},
                           {"num_classes", config.num_classes},
                           {"grid_side", config.grid_side},
                           {"patch_size", config.patch_size},
                           {"seed", seed}};
  out << "MCTDATA 1\n" << header.dump() << "\n";

  const int side = config.image_side();
  for (const auto& sample : samples) {
    require_shape(sample.image, {3, side, side}, "save_dataset image");
    out.write(reinterpret_cast<const char*>(sample.image.data()),
              static_cast<std::streamsize>(sample.image.size() * sizeof(double)));
    for (int v : sample.labels.y) {
      const auto byte = static_cast<unsigned char>(v);
      out.write(reinterpret_cast<const char*>(&byte), 1);
    }
    for (int v : sample.gt_mask) {
      const auto byte = static_cast<unsigned char>(v);
      out.write(reinterpret_cast<const char*>(&byte), 1);
    }
  }
  require_stream(out, "writing dataset", path);
}

DatasetArchive load_dataset(const std::string& path) {
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line) || line != "MCTDATA 1") {
    throw std::runtime_error("not a dataset archive: " + path);
  }
  if (!std::getline(in, line)) throw std::runtime_error("dataset missing header: " + path);
  const auto header = nlohmann::json::parse(line);

  DatasetArchive archive;
  archive.num_classes = header.at("num_classes").get<int>();
  archive.grid_side = header.at("grid_side").get<int>();
  archive.patch_size = header.at("patch_size").get<int>();
  archive.seed = header.at("seed").get<std::uint64_t>();
  const auto count = header.at("count").get<std::size_t>();

  const int side = archive.patch_size * archive.grid_side;
  const std::size_t pixels = 3u * static_cast<std::size_t>(side) * side;
  const int cells = archive.grid_side * archive.grid_side;

  archive.samples.resize(count);
  for (auto& sample : archive.samples) {
    sample.image = Tensor({3, side, side});
    in.read(reinterpret_cast<char*>(sample.image.data()),
            static_cast<std::streamsize>(pixels * sizeof(double)));
    sample.labels.y.resize(static_cast<std::size_t>(archive.num_classes));
    for (auto& v : sample.labels.y) {
      unsigned char byte = 0;
      in.read(reinterpret_cast<char*>(&byte), 1);
      v = byte;
    }
    sample.gt_mask.resize(static_cast<std::size_t>(cells));
    for (auto& v : sample.gt_mask) {
      unsigned char byte = 0;
      in.read(reinterpret_cast<char*>(&byte), 1);
      v = byte;
    }
    require_stream(in, "reading dataset", path);
  }
  return archive;
}

void write_pgm(const std::string& path, const Tensor& map) {
  if (map.rank() != 2) {
    throw std::invalid_argument("write_pgm: expected a 2-d map, got " +
                                shape_string(map.shape()));
  }
  auto out = open_output(path);
  out << "P5\n" << map.dim(1) << " " << map.dim(0) << "\n255\n";
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double scaled = std::lround(255.0 * map[i]);
    const auto byte = static_cast<unsigned char>(std::min(255.0, std::max(0.0, scaled)));
    out.write(reinterpret_cast<const char*>(&byte), 1);
  }
  require_stream(out, "writing pgm", path);
}

void write_maps_csv(const std::string& path, const std::vector<ClassLocalizationMaps>& maps) {
  auto out = open_output(path);
  out << "sample,class,i,j,value\n";
  for (std::size_t s = 0; s < maps.size(); ++s) {
    const Tensor& m = maps[s].maps;
    for (int c = 0; c < m.dim(0); ++c)
      for (int i = 0; i < m.dim(1); ++i)
        for (int j = 0; j < m.dim(2); ++j)
          out << s << "," << c << "," << i << "," << j << "," << format_double(m.at(c, i, j))
              << "\n";
  }
  require_stream(out, "writing maps csv", path);
}

std::vector<ClassLocalizationMaps> read_maps_csv(const std::string& path) {
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line) || line != "sample,class,i,j,value") {
    throw std::runtime_error("not a maps csv: " + path);
  }

  struct Cell {
    int sample, cls, i, j;
    double value;
  };
  std::vector<Cell> cells;
  int max_sample = -1, max_class = -1, max_i = -1, max_j = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Cell cell{};
    char* cursor = line.data();
    auto take_int = [&](int& dst) {
      dst = static_cast<int>(std::strtol(cursor, &cursor, 10));
      if (*cursor == ',') ++cursor;
    };
    take_int(cell.sample);
    take_int(cell.cls);
    take_int(cell.i);
    take_int(cell.j);
    cell.value = std::strtod(cursor, nullptr);
    cells.push_back(cell);
    max_sample = std::max(max_sample, cell.sample);
    max_class = std::max(max_class, cell.cls);
    max_i = std::max(max_i, cell.i);
    max_j = std::max(max_j, cell.j);
  }
  if (cells.empty()) throw std::runtime_error("empty maps csv: " + path);

  std::vector<ClassLocalizationMaps> maps(static_cast<std::size_t>(max_sample + 1));
  for (auto& m : maps) m.maps = Tensor({max_class + 1, max_i + 1, max_j + 1});
  for (const auto& cell : cells) {
    maps[static_cast<std::size_t>(cell.sample)].maps.at(cell.cls, cell.i, cell.j) = cell.value;
  }
  return maps;
}

void write_loss_csv(const std::string& path, const std::vector<LossTraceRow>& trace) {
  auto out = open_output(path);
  out << "step,loss_cls,loss_patch,total\n";
  for (const auto& row : trace) {
    out << row.step << "," << format_double(row.loss_cls) << "," << format_double(row.loss_patch)
        << "," << format_double(row.total) << "\n";
  }
  require_stream(out, "writing loss csv", path);
}

void write_report_csv(const std::string& report_path, const std::string& summary_path,
                      const SeedEvaluation& eval) {
  {
    auto out = open_output(report_path);
    out << "class,present,iou\n";
    for (std::size_t k = 0; k < eval.per_class_iou.size(); ++k) {
      out << (k == 0 ? std::string("background") : std::to_string(k)) << ","
          << (eval.class_present[k] ? 1 : 0) << ",";
      if (eval.class_present[k]) out << format_double(eval.per_class_iou[k]);
      out << "\n";
    }
    require_stream(out, "writing report csv", report_path);
  }
  {
    auto out = open_output(summary_path);
    out << "metric,value\n";
    out << "miou," << format_double(eval.miou) << "\n";
    out << "fp," << format_double(eval.fp) << "\n";
    out << "fn," << format_double(eval.fn) << "\n";
    out << "best_threshold," << format_double(eval.best_threshold) << "\n";
    require_stream(out, "writing summary csv", summary_path);
  }
}

void write_affinity(const std::string& path, const PairwiseAffinity& affinity) {
  auto out = open_output(path);
  nlohmann::json header = {{"shape", affinity.affinity.shape()},
                           {"dtype", "float64"},
                           {"order", "row-major"}};
  out << header.dump() << "\n";
  out.write(reinterpret_cast<const char*>(affinity.affinity.data()),
            static_cast<std::streamsize>(affinity.affinity.size() * sizeof(double)));
  require_stream(out, "writing affinity", path);
}

void write_manifest(const std::string& path, const RunManifest& manifest) {
  nlohmann::json json = {
      {"command", manifest.command},
      {"seed", manifest.seed},
      {"dataset", manifest.dataset_path},
      {"checkpoint", manifest.checkpoint_path},
      {"output_dir", manifest.output_dir},
      {"timestamp", manifest.timestamp},
      {"config",
       {{"num_classes", manifest.config.num_classes},
        {"grid_side", manifest.config.grid_side},
        {"embed_dim", manifest.config.embed_dim},
        {"num_layers", manifest.config.num_layers},
        {"num_heads", manifest.config.num_heads},
        {"fuse_layers", manifest.config.fuse_layers},
        {"patch_size", manifest.config.patch_size},
        {"mlp_ratio", manifest.config.mlp_ratio},
        {"variant", to_string(manifest.config.variant)},
        {"head_mode", to_string(manifest.config.head_mode)}}},
  };
  for (const auto& [key, value] : manifest.extra) json[key] = value;

  const std::filesystem::path target(path);
  const std::filesystem::path temp = target.string() + ".tmp";
  {
    auto out = open_output(temp.string());
    out << json.dump(2) << "\n";
    require_stream(out, "writing manifest", temp.string());
  }
  std::filesystem::rename(temp, target);
}

}  // namespace mct
