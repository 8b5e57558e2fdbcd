#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cpg/config.hpp"
#include "cpg/losses.hpp"
#include "cpg/network.hpp"

namespace cpg {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  std::vector<PointCloud> scans;
  std::vector<std::string> names;
  LabelMap labels;

  std::size_t size() const { return scans.size(); }
  /// Fraction of labeled points per class over the whole set.
  std::vector<double> class_frequency() const;
};

/// Training split, and the evaluation split (the training split itself when
/// no held-out data is configured).
struct DataSplits {
  Dataset train;
  Dataset eval;
};

DataSplits load_data(const DataConfig& config);
Dataset synthetic_dataset(int scenes, std::uint64_t first_seed);

/// Softmax probabilities [N, C] in inference mode, averaged over the four
/// flip variants when `tta` is set.
Tensor<float> predict_probs(CpgModel<float>& model, const PointCloud& cloud, bool tta);

ConfusionMatrix evaluate(CpgModel<float>& model, const Dataset& data, bool tta);

struct EpochMetrics {
  int epoch = 0;
  std::int64_t step = 0;
  double lr = 0;
  double loss = 0;
  double wce = 0;
  double lovasz = 0;
  double consistency = 0;
  double miou = 0;

  /// One key=value line without wall-clock fields.
  std::string log_line() const;
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  int epoch = 0;
  std::int64_t step = 0;
  double best_miou = -1.0;
  std::string rng_state;
  std::vector<Tensor<float>> momentum;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  double best_miou = -1.0;
  double final_miou = 0.0;
  int epochs_run = 0;
  std::int64_t steps = 0;
  /// Network forward passes issued by training steps (evaluation excluded).
  std::int64_t forward_passes = 0;
  bool stopped_early = false;
};

/// Momentum SGD: v = mu * v + g; p -= lr * v.
void sgd_step(ParamRegistry<float>& registry, std::vector<Tensor<float>>& momentum, double lr, double mu);

class Trainer {
 public:
  /// The model is initialized from config.train.seed. Outputs (checkpoints,
  /// metrics log, train state) go to config.train.out_dir when non-empty.
  Trainer(RunConfig config, DataSplits data);

  /// Run until config.train.epochs or early stop, optionally continuing from
  /// a saved train state.
  TrainResult run(const std::optional<std::filesystem::path>& resume = std::nullopt);

  /// One optimizer step over `batch` (indices into the training set).
  /// Returns the averaged loss terms.
  EpochMetrics step(const std::vector<std::size_t>& batch, double lr);

  CpgModel<float>& model() { return model_; }
  const ClassWeights& weights() const { return weights_; }
  std::int64_t forward_passes() const { return forward_passes_; }
  const RunConfig& config() const { return config_; }

  void save_state(const std::filesystem::path& path, const TrainState& state) const;
  TrainState load_state(const std::filesystem::path& path);

 private:
  void dump_batch(const std::vector<std::size_t>& batch, const std::vector<PointCloud>& augmented) const;

  RunConfig config_;
  DataSplits data_;
  std::vector<ScanGeometry> geometry_;
  CpgModel<float> model_;
  ClassWeights weights_;
  Rng rng_;
  std::vector<Tensor<float>> momentum_;
  std::int64_t forward_passes_ = 0;
};

}  // namespace cpg
