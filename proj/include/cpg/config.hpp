#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "cpg/network.hpp"
#include "cpg/pointcloud.hpp"

namespace cpg {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DataSource { kSynthetic, kKitti };

struct DataConfig {
  DataSource source = DataSource::kSynthetic;
  // Synthetic corpus.
  int scenes = 20;
  std::uint64_t scene_seed = 1000;
  /// Held-out synthetic scenes for evaluation; 0 evaluates on the training corpus.
  int eval_scenes = 0;
  std::uint64_t eval_seed = 900000;
  // SemanticKITTI layout: <dir>/*.bin with matching <label_dir>/*.label.
  std::filesystem::path scan_dir;
  std::filesystem::path label_dir;
  std::filesystem::path eval_scan_dir;
  std::filesystem::path eval_label_dir;
  std::filesystem::path label_map;
  /// Cap on scans read per split; 0 reads all.
  int max_scans = 0;
};

enum class ClassWeighting { kFrequency, kUniform };

struct OptimConfig {
  double lr = 0.02;
  double lr_decay = 0.1;
  int decay_every = 6;
  double momentum = 0.9;

  /// Step schedule: lr * lr_decay^floor(epoch / decay_every).
  double lr_at(int epoch) const;
};

struct LossConfig {
  bool consistency = true;
  ClassWeighting weighting = ClassWeighting::kFrequency;
};

struct TrainConfig {
  int epochs = 200;
  /// Scans whose gradients are averaged per optimizer step.
  int batch_size = 1;
  std::uint64_t seed = 0;
  /// Stop after the first epoch whose eval mIoU exceeds this; 0 disables.
  double stop_miou = 0.0;
  bool eval_tta = false;
  std::filesystem::path out_dir = "runs/default";
};

struct RunConfig {
  DataConfig data;
  CpgConfig model = CpgConfig::desk();
  OptimConfig optim;
  LossConfig loss;
  AugmentationSpec augment;
  TrainConfig train;

  void validate() const;
};

/// Parse INI text. Sections: data, grid, model, optim, loss, augment, train.
/// `[model] preset` (desk or full) is applied before any other key; unknown
/// sections or keys are rejected.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Every field, in a form parse_run_config reads back to an equal config.
std::string to_ini(const RunConfig& config);

}  // namespace cpg
