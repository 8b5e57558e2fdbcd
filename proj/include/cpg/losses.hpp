#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cpg/tensor.hpp"

namespace cpg {

/// Per-class weights alpha_c = 1 / (F_c + epsilon).
struct ClassWeights {
  static constexpr double kEpsilon = 0.001;
  std::vector<double> alpha;

  static ClassWeights from_frequency(const std::vector<double>& frequency, double epsilon = kEpsilon);
  static ClassWeights uniform(int num_classes);
  int num_classes() const { return static_cast<int>(alpha.size()); }
};

struct LossInfo {
  /// Points that contributed (labels other than ignore).
  std::size_t scored = 0;
  /// Set when every point was ignored and the loss degenerated to 0.
  bool all_ignored = false;
};

/// Mean over non-ignored points of alpha[label] * -log softmax(logits)[label].
template <typename T>
Tensor<T> wce_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels, const ClassWeights& weights,
                   LossInfo* info = nullptr);

/// Lovasz-Softmax over the classes present in `labels`. The sort permutation
/// and the Jaccard-extension weights are constants of the backward pass.
template <typename T>
Tensor<T> lovasz_softmax_loss(const Tensor<T>& probs, std::span<const std::int32_t> labels);

/// Mean over points of the L1 distance between two probability rows.
template <typename T>
Tensor<T> consistency_loss(const Tensor<T>& probs_raw, const Tensor<T>& probs_aug);

/// wce + 2 * ls + tc. `tc` may be undefined when the consistency term is off.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& wce, const Tensor<T>& ls, const Tensor<T>& tc);

/// Row-wise argmax; ties go to the lowest class id.
template <typename T>
std::vector<std::int32_t> predict_labels(const Tensor<T>& scores);

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0);

  int num_classes() const { return classes_; }
  std::uint64_t at(int truth, int pred) const { return counts_[static_cast<std::size_t>(truth * classes_ + pred)]; }
  std::uint64_t total() const;
  std::uint64_t true_positive(int c) const;
  std::uint64_t false_positive(int c) const;
  std::uint64_t false_negative(int c) const;

  /// counts[label, pred] += 1 for every non-ignored point. Out-of-range ids throw.
  void accumulate(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels);
  void merge(const ConfusionMatrix& other);
  void set(int truth, int pred, std::uint64_t count);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int classes_;
  std::vector<std::uint64_t> counts_;
};

struct MiouResult {
  /// IoU per class; NaN where TP + FP + FN == 0 (excluded from the mean).
  std::vector<double> per_class;
  double mean = 0.0;
  /// False when no class had any support; `mean` is NaN then.
  bool valid = false;
};

MiouResult miou(const ConfusionMatrix& cm);

/// Aligned class/IoU table followed by key=value lines.
std::string format_report(const MiouResult& result, const std::vector<std::string>& class_names);

}  // namespace cpg
