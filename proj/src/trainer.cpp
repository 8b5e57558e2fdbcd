#include "cpg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace cpg {

namespace fs = std::filesystem;

std::vector<double> Dataset::class_frequency() const {
  std::vector<double> counts(static_cast<std::size_t>(labels.num_classes()), 0.0);
  double total = 0;
  for (const auto& scan : scans) {
    for (auto l : scan.labels) {
      if (l == kIgnoreLabel) continue;
      counts.at(static_cast<std::size_t>(l)) += 1;
      total += 1;
    }
  }
  if (total > 0) {
    for (auto& c : counts) c /= total;
  }
  return counts;
}

Dataset synthetic_dataset(int scenes, std::uint64_t first_seed) {
  Dataset d;
  d.labels = LabelMap::synthetic();
  for (int i = 0; i < scenes; ++i) {
    const auto seed = first_seed + static_cast<std::uint64_t>(i);
    d.scans.push_back(synth_scene(seed).cloud);
    d.names.push_back("synth_" + std::to_string(seed));
  }
  return d;
}

namespace {

Dataset kitti_dataset(const fs::path& scan_dir, const fs::path& label_dir, const LabelMap& map, int max_scans) {
  if (!fs::is_directory(scan_dir)) throw IoError("scan directory not found: " + scan_dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(scan_dir)) {
    if (entry.path().extension() == ".bin") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (max_scans > 0 && files.size() > static_cast<std::size_t>(max_scans)) files.resize(static_cast<std::size_t>(max_scans));
  if (files.empty()) throw IoError("no .bin scans in " + scan_dir.string());
  Dataset d;
  d.labels = map;
  for (const auto& f : files) {
    auto cloud = load_scan(f);
    if (cloud.dropped_nonfinite > 0) {
      // Labels are per stored record, so a scan with dropped points cannot be aligned.
      throw FormatError(f.string() + " contains non-finite points; labels cannot be aligned");
    }
    const auto label_path = label_dir / (f.stem().string() + ".label");
    cloud.labels = load_labels(label_path, map, cloud.size());
    d.scans.push_back(std::move(cloud));
    d.names.push_back(f.stem().string());
  }
  return d;
}

}  // namespace

DataSplits load_data(const DataConfig& config) {
  DataSplits s;
  if (config.source == DataSource::kSynthetic) {
    s.train = synthetic_dataset(config.scenes, config.scene_seed);
    s.eval = config.eval_scenes > 0 ? synthetic_dataset(config.eval_scenes, config.eval_seed) : s.train;
    return s;
  }
  const auto map = LabelMap::load(config.label_map);
  s.train = kitti_dataset(config.scan_dir, config.label_dir, map, config.max_scans);
  if (!config.eval_scan_dir.empty()) {
    const auto label_dir = config.eval_label_dir.empty() ? config.eval_scan_dir : config.eval_label_dir;
    s.eval = kitti_dataset(config.eval_scan_dir, label_dir, map, config.max_scans);
  } else {
    s.eval = s.train;
  }
  return s;
}

Tensor<float> predict_probs(CpgModel<float>& model, const PointCloud& cloud, bool tta) {
  NoGradGuard no_grad;
  if (!tta) return softmax(cpgnet_forward(cloud, model, false), 1);
  const auto variants = tta_variants(cloud);
  std::vector<float> acc;
  Shape shape;
  for (const auto& v : variants) {
    auto p = softmax(cpgnet_forward(v, model, false), 1);
    if (acc.empty()) {
      acc.assign(p.data().begin(), p.data().end());
      shape = p.shape();
    } else {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p.data()[i];
    }
  }
  for (auto& a : acc) a *= 0.25f;
  return Tensor<float>(shape, std::move(acc));
}

ConfusionMatrix evaluate(CpgModel<float>& model, const Dataset& data, bool tta) {
  ConfusionMatrix cm(model.config().num_classes);
  for (const auto& scan : data.scans) {
    if (!scan.has_labels()) throw FormatError("evaluation scan without labels");
    const auto preds = predict_labels(predict_probs(model, scan, tta));
    cm.accumulate(preds, scan.labels);
  }
  return cm;
}

std::string EpochMetrics::log_line() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "epoch=%d step=%lld lr=%.9g loss=%.9g wce=%.9g lovasz=%.9g tc=%.9g miou=%.9g", epoch,
                static_cast<long long>(step), lr, loss, wce, lovasz, consistency, miou);
  return buf;
}

void sgd_step(ParamRegistry<float>& registry, std::vector<Tensor<float>>& momentum, double lr, double mu) {
  const auto& params = registry.params();
  if (momentum.empty()) {
    for (const auto& [name, p] : params) momentum.push_back(Tensor<float>::zeros(p.shape()));
  }
  const float lr_f = static_cast<float>(lr);
  const float mu_f = static_cast<float>(mu);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].second;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto v = momentum[i].mutable_data();
    auto w = p.mutable_data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = mu_f * v[k] + g[k];
      w[k] -= lr_f * v[k];
    }
  }
}

namespace {

constexpr std::uint64_t kTrainSeedSalt = 0x9E3779B97F4A7C15ull;
constexpr char kStateMagic[4] = {'C', 'P', 'G', 'S'};
constexpr std::uint32_t kStateVersion = 1;

template <typename V>
void put(std::ostream& os, V value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  V value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(V))) throw TrainingError("truncated train state");
  return value;
}

void put_floats(std::ostream& os, std::span<const float> data) {
  put(os, static_cast<std::uint64_t>(data.size()));
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
}

void get_floats(std::istream& is, std::span<float> data) {
  if (get<std::uint64_t>(is) != data.size()) throw TrainingError("train state tensor size mismatch");
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)))) {
    throw TrainingError("truncated train state");
  }
}

ClassWeights make_weights(const RunConfig& config, const Dataset& train) {
  const int classes = config.model.num_classes;
  if (config.loss.weighting == ClassWeighting::kUniform) return ClassWeights::uniform(classes);
  auto freq = train.labels.class_frequency;
  if (static_cast<int>(freq.size()) != classes) freq = train.class_frequency();
  if (static_cast<int>(freq.size()) != classes) {
    throw ConfigError("label map has " + std::to_string(freq.size()) + " classes, model expects " +
                      std::to_string(classes));
  }
  return ClassWeights::from_frequency(freq);
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

Trainer::Trainer(RunConfig config, DataSplits data)
    : config_(std::move(config)),
      data_(std::move(data)),
      model_(config_.model, config_.train.seed),
      weights_(make_weights(config_, data_.train)),
      rng_(config_.train.seed ^ kTrainSeedSalt) {
  if (data_.train.size() == 0) throw TrainingError("empty training set");
  for (const auto& scan : data_.train.scans) {
    if (!scan.has_labels()) throw TrainingError("training scan without labels");
    geometry_.push_back(compute_geometry(scan, config_.model));
  }
}

EpochMetrics Trainer::step(const std::vector<std::size_t>& batch, double lr) {
  EpochMetrics m;
  const float inv_batch = 1.0f / static_cast<float>(batch.size());
  std::vector<PointCloud> augmented;
  for (auto idx : batch) augmented.push_back(augment(data_.train.scans[idx], config_.augment, rng_).first);

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& raw = data_.train.scans[batch[b]];
    const auto& aug = augmented[b];
    std::span<const std::int32_t> labels(aug.labels);

    auto logits_aug = cpgnet_forward(aug, model_, true);
    ++forward_passes_;
    auto probs_aug = softmax(logits_aug, 1);
    auto wce = wce_loss(logits_aug, labels, weights_);
    auto ls = lovasz_softmax_loss(probs_aug, labels);
    Tensor<float> tc;
    if (config_.loss.consistency) {
      auto logits_raw = cpgnet_forward(raw, geometry_[batch[b]], model_, true);
      ++forward_passes_;
      tc = consistency_loss(softmax(logits_raw, 1), probs_aug);
    }
    auto total = total_loss(wce, ls, tc);
    if (!finite(total.item())) {
      dump_batch(batch, augmented);
      throw TrainingError("non-finite loss on scan " + data_.train.names[batch[b]] + "; batch written to " +
                          (config_.train.out_dir / "nan_batch").string());
    }
    scale(total, inv_batch).backward();
    m.loss += total.item() * inv_batch;
    m.wce += wce.item() * inv_batch;
    m.lovasz += ls.item() * inv_batch;
    m.consistency += tc.defined() ? tc.item() * inv_batch : 0.0;
  }
  sgd_step(model_.registry(), momentum_, lr, config_.optim.momentum);
  model_.registry().zero_grad();
  return m;
}

void Trainer::dump_batch(const std::vector<std::size_t>& batch, const std::vector<PointCloud>& augmented) const {
  if (config_.train.out_dir.empty()) return;
  const auto dir = config_.train.out_dir / "nan_batch";
  fs::create_directories(dir);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& name = data_.train.names[batch[b]];
    write_scan(dir / (name + ".bin"), data_.train.scans[batch[b]]);
    write_scan(dir / (name + ".augmented.bin"), augmented[b]);
    std::ofstream os(dir / (name + ".labels.txt"));
    for (auto l : augmented[b].labels) os << l << "\n";
  }
}

void Trainer::save_state(const fs::path& path, const TrainState& state) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw TrainingError("cannot write train state " + path.string());
  os.write(kStateMagic, 4);
  put(os, kStateVersion);
  put(os, config_.model.digest());
  put(os, static_cast<std::int32_t>(state.epoch));
  put(os, state.step);
  put(os, state.best_miou);
  put(os, static_cast<std::uint64_t>(state.rng_state.size()));
  os.write(state.rng_state.data(), static_cast<std::streamsize>(state.rng_state.size()));
  const auto& reg = model_.registry();
  for (const auto& [name, t] : reg.params()) put_floats(os, t.data());
  for (const auto& [name, t] : reg.buffers()) put_floats(os, t.data());
  put(os, static_cast<std::uint64_t>(state.momentum.size()));
  for (const auto& t : state.momentum) put_floats(os, t.data());
  if (!os) throw TrainingError("failed writing train state " + path.string());
}

TrainState Trainer::load_state(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TrainingError("cannot open train state " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kStateMagic, 4) != 0) {
    throw TrainingError(path.string() + " is not a train state");
  }
  if (get<std::uint32_t>(is) != kStateVersion) throw TrainingError("unsupported train state version");
  if (get<std::uint64_t>(is) != config_.model.digest()) {
    throw TrainingError("train state " + path.string() + " belongs to a different model configuration");
  }
  TrainState s;
  s.epoch = get<std::int32_t>(is);
  s.step = get<std::int64_t>(is);
  s.best_miou = get<double>(is);
  s.rng_state.resize(get<std::uint64_t>(is));
  if (!is.read(s.rng_state.data(), static_cast<std::streamsize>(s.rng_state.size()))) {
    throw TrainingError("truncated train state");
  }
  auto& reg = model_.registry();
  for (const auto& [name, t] : reg.params()) get_floats(is, Tensor<float>(t).mutable_data());
  for (const auto& [name, t] : reg.buffers()) get_floats(is, Tensor<float>(t).mutable_data());
  const auto count = get<std::uint64_t>(is);
  if (count != 0 && count != reg.params().size()) throw TrainingError("train state momentum count mismatch");
  for (std::uint64_t i = 0; i < count; ++i) {
    auto t = Tensor<float>::zeros(reg.params()[i].second.shape());
    get_floats(is, t.mutable_data());
    s.momentum.push_back(t);
  }
  return s;
}

TrainResult Trainer::run(const std::optional<fs::path>& resume) {
  const auto& out = config_.train.out_dir;
  TrainState state;
  std::vector<std::string> log_lines;
  if (resume) {
    state = load_state(*resume);
    rng_.set_state(state.rng_state);
    momentum_ = state.momentum;
    // Keep the log lines of epochs already completed.
    std::ifstream prev(out / "metrics.log");
    std::string line;
    while (std::getline(prev, line) && static_cast<int>(log_lines.size()) < state.epoch) log_lines.push_back(line);
  }
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream cfg(out / "config.ini");
    cfg << to_ini(config_);
  }
  std::ofstream log;
  if (!out.empty()) {
    log.open(out / "metrics.log", std::ios::trunc);
    for (const auto& l : log_lines) log << l << "\n";
    log.flush();
  }

  TrainResult result;
  result.best_miou = state.best_miou;
  const std::int64_t forward_start = forward_passes_;
  const std::size_t n = data_.train.size();
  const auto batch_size = static_cast<std::size_t>(config_.train.batch_size);

  for (int epoch = state.epoch; epoch < config_.train.epochs; ++epoch) {
    const double lr = config_.optim.lr_at(epoch);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng_.shuffle(order);

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
      const auto s = step(batch, lr);
      m.loss += s.loss;
      m.wce += s.wce;
      m.lovasz += s.lovasz;
      m.consistency += s.consistency;
      ++batches;
      ++state.step;
    }
    m.loss /= static_cast<double>(batches);
    m.wce /= static_cast<double>(batches);
    m.lovasz /= static_cast<double>(batches);
    m.consistency /= static_cast<double>(batches);
    m.step = state.step;

    const auto score = miou(evaluate(model_, data_.eval, config_.train.eval_tta));
    m.miou = score.valid ? score.mean : 0.0;
    result.history.push_back(m);
    result.final_miou = m.miou;
    result.epochs_run = epoch + 1;

    state.epoch = epoch + 1;
    state.rng_state = rng_.state();
    state.momentum = momentum_;
    const bool improved = m.miou > state.best_miou;
    if (improved) state.best_miou = m.miou;

    if (!out.empty()) {
      log << m.log_line() << "\n";
      log.flush();
      if (improved) save_checkpoint(out / "best.ckpt", model_);
      save_checkpoint(out / "last.ckpt", model_);
      save_state(out / "train_state.bin", state);
    }
    if (config_.train.stop_miou > 0 && m.miou > config_.train.stop_miou) {
      result.stopped_early = true;
      break;
    }
  }
  result.best_miou = state.best_miou;
  result.steps = state.step;
  result.forward_passes = forward_passes_ - forward_start;
  return result;
}

}  // namespace cpg
