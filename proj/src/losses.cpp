#include "cpg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "cpg/ops.hpp"
#include "cpg/pointcloud.hpp"

namespace cpg {

ClassWeights ClassWeights::from_frequency(const std::vector<double>& frequency, double epsilon) {
  ClassWeights w;
  w.alpha.reserve(frequency.size());
  for (double f : frequency) w.alpha.push_back(1.0 / (f + epsilon));
  return w;
}

ClassWeights ClassWeights::uniform(int num_classes) {
  ClassWeights w;
  w.alpha.assign(static_cast<std::size_t>(num_classes), 1.0);
  return w;
}

namespace {

template <typename T>
void check_labels(const Tensor<T>& scores, std::span<const std::int32_t> labels, const char* op) {
  if (scores.rank() != 2) throw ShapeError(std::string(op) + ": expected [N,C], got " + shape_str(scores.shape()));
  if (static_cast<std::int64_t>(labels.size()) != scores.dim(0)) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(scores.dim(0)) + " rows");
  }
  const auto c = scores.dim(1);
  for (auto l : labels) {
    if (l != kIgnoreLabel && (l < 0 || l >= c)) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(l) + " outside [0," + std::to_string(c) + ")");
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> wce_loss(const Tensor<T>& logits, std::span<const std::int32_t> labels, const ClassWeights& weights,
                   LossInfo* info) {
  check_labels(logits, labels, "wce_loss");
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  if (weights.num_classes() != c) throw ShapeError("wce_loss: class weight count does not match logits");
  std::size_t scored = 0;
  for (auto l : labels) scored += l != kIgnoreLabel;
  if (info) {
    info->scored = scored;
    info->all_ignored = scored == 0;
  }

  // Softmax rows of the scored points, kept for the backward pass.
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * c), T(0));
  const T* z = logits.data().data();
  double total = 0.0;
  for (std::int64_t k = 0; k < n; ++k) {
    const auto y = labels[static_cast<std::size_t>(k)];
    if (y == kIgnoreLabel) continue;
    const T* row = z + k * c;
    const T mx = *std::max_element(row, row + c);
    T denom = T(0);
    for (std::int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    const T log_denom = std::log(denom);
    for (std::int64_t j = 0; j < c; ++j) (*probs)[k * c + j] = std::exp(row[j] - mx - log_denom);
    total += weights.alpha[static_cast<std::size_t>(y)] * static_cast<double>(-(row[y] - mx - log_denom));
  }
  const T value = scored ? static_cast<T>(total / static_cast<double>(scored)) : T(0);
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return make_result<T>(Shape{}, std::vector<T>{value}, {logits}, "wce_loss",
                        [logits, probs, lab = std::move(lab), alpha = weights.alpha, scored, c](std::span<const T> go) {
                          auto g = grad_sink(logits);
                          if (scored == 0) return;
                          const T inv = go[0] / static_cast<T>(scored);
                          for (std::size_t k = 0; k < lab.size(); ++k) {
                            const auto y = lab[k];
                            if (y == kIgnoreLabel) continue;
                            const T a = static_cast<T>(alpha[static_cast<std::size_t>(y)]) * inv;
                            for (std::int64_t j = 0; j < c; ++j) {
                              const std::size_t i = k * static_cast<std::size_t>(c) + static_cast<std::size_t>(j);
                              g[i] += a * ((*probs)[i] - (j == y ? T(1) : T(0)));
                            }
                          }
                        });
}

namespace {

template <typename T>
struct LovaszClassTerm {
  std::int64_t cls;
  std::vector<std::int64_t> order;  // point ids sorted by descending error
  std::vector<T> weights;           // Jaccard-extension weight per rank
};

}  // namespace

template <typename T>
Tensor<T> lovasz_softmax_loss(const Tensor<T>& probs, std::span<const std::int32_t> labels) {
  check_labels(probs, labels, "lovasz_softmax_loss");
  const std::int64_t c = probs.dim(1);
  std::vector<std::int64_t> valid;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] != kIgnoreLabel) valid.push_back(static_cast<std::int64_t>(k));
  }
  const T* p = probs.data().data();
  auto terms = std::make_shared<std::vector<LovaszClassTerm<T>>>();
  T total = T(0);
  for (std::int64_t cls = 0; cls < c; ++cls) {
    std::int64_t gts = 0;
    for (auto k : valid) gts += labels[static_cast<std::size_t>(k)] == cls;
    if (gts == 0) continue;
    const std::size_t m = valid.size();
    std::vector<T> err(m);
    for (std::size_t i = 0; i < m; ++i) {
      const auto k = valid[i];
      const T pk = p[k * c + cls];
      err[i] = labels[static_cast<std::size_t>(k)] == cls ? T(1) - pk : pk;
    }
    std::vector<std::size_t> rank(m);
    std::iota(rank.begin(), rank.end(), std::size_t{0});
    std::stable_sort(rank.begin(), rank.end(), [&err](std::size_t a, std::size_t b) { return err[a] > err[b]; });

    LovaszClassTerm<T> term;
    term.cls = cls;
    term.order.resize(m);
    term.weights.resize(m);
    T cum_fg = T(0), cum_bg = T(0), prev = T(0), loss = T(0);
    for (std::size_t i = 0; i < m; ++i) {
      const auto k = valid[rank[i]];
      const bool fg = labels[static_cast<std::size_t>(k)] == cls;
      (fg ? cum_fg : cum_bg) += T(1);
      const T inter = static_cast<T>(gts) - cum_fg;
      const T uni = static_cast<T>(gts) + cum_bg;
      const T jac = T(1) - inter / uni;
      term.order[i] = k;
      term.weights[i] = jac - prev;
      prev = jac;
      loss += err[rank[i]] * term.weights[i];
    }
    total += loss;
    terms->push_back(std::move(term));
  }
  const T value = terms->empty() ? T(0) : total / static_cast<T>(terms->size());
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return make_result<T>(Shape{}, std::vector<T>{value}, {probs}, "lovasz_softmax_loss",
                        [probs, terms, lab = std::move(lab), c](std::span<const T> go) {
                          auto g = grad_sink(probs);
                          if (terms->empty()) return;
                          const T scale_each = go[0] / static_cast<T>(terms->size());
                          for (const auto& term : *terms) {
                            for (std::size_t i = 0; i < term.order.size(); ++i) {
                              const auto k = term.order[i];
                              const T sign = lab[static_cast<std::size_t>(k)] == term.cls ? T(-1) : T(1);
                              g[static_cast<std::size_t>(k * c + term.cls)] += scale_each * term.weights[i] * sign;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> consistency_loss(const Tensor<T>& probs_raw, const Tensor<T>& probs_aug) {
  if (probs_raw.shape() != probs_aug.shape() || probs_raw.rank() != 2) {
    throw ShapeError("consistency_loss: shape mismatch " + shape_str(probs_raw.shape()) + " vs " +
                     shape_str(probs_aug.shape()));
  }
  const std::int64_t n = probs_raw.dim(0);
  const auto a = probs_raw.data();
  const auto b = probs_aug.data();
  T total = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) total += std::abs(a[i] - b[i]);
  const T value = n > 0 ? total / static_cast<T>(n) : T(0);
  return make_result<T>(Shape{}, std::vector<T>{value}, {probs_raw, probs_aug}, "consistency_loss",
                        [probs_raw, probs_aug, n](std::span<const T> go) {
                          if (n == 0) return;
                          const T s = go[0] / static_cast<T>(n);
                          const auto a = probs_raw.data();
                          const auto b = probs_aug.data();
                          T* ga = probs_raw.requires_grad() ? grad_sink(probs_raw).data() : nullptr;
                          T* gb = probs_aug.requires_grad() ? grad_sink(probs_aug).data() : nullptr;
                          for (std::size_t i = 0; i < a.size(); ++i) {
                            const T d = a[i] - b[i];
                            const T sign = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                            if (ga) ga[i] += s * sign;
                            if (gb) gb[i] -= s * sign;
                          }
                        });
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& wce, const Tensor<T>& ls, const Tensor<T>& tc) {
  auto out = add(wce, scale(ls, T(2)));
  return tc.defined() ? add(out, tc) : out;
}

template <typename T>
std::vector<std::int32_t> predict_labels(const Tensor<T>& scores) {
  if (scores.rank() != 2) throw ShapeError("predict_labels: expected [N,C]");
  const std::int64_t n = scores.dim(0), c = scores.dim(1);
  std::vector<std::int32_t> out(static_cast<std::size_t>(n));
  const T* s = scores.data().data();
  for (std::int64_t k = 0; k < n; ++k) {
    out[static_cast<std::size_t>(k)] = static_cast<std::int32_t>(std::max_element(s + k * c, s + (k + 1) * c) - (s + k * c));
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(num_classes), 0) {
  if (num_classes < 0) throw std::invalid_argument("ConfusionMatrix: negative class count");
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

std::uint64_t ConfusionMatrix::true_positive(int c) const { return at(c, c); }

std::uint64_t ConfusionMatrix::false_positive(int c) const {
  std::uint64_t col = 0;
  for (int t = 0; t < classes_; ++t) col += at(t, c);
  return col - at(c, c);
}

std::uint64_t ConfusionMatrix::false_negative(int c) const {
  std::uint64_t row = 0;
  for (int p = 0; p < classes_; ++p) row += at(c, p);
  return row - at(c, c);
}

void ConfusionMatrix::accumulate(std::span<const std::int32_t> predictions, std::span<const std::int32_t> labels) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("ConfusionMatrix::accumulate: " + std::to_string(predictions.size()) +
                                " predictions for " + std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto t = labels[i];
    if (t == kIgnoreLabel) continue;
    const auto p = predictions[i];
    if (t < 0 || t >= classes_ || p < 0 || p >= classes_) {
      throw std::out_of_range("ConfusionMatrix::accumulate: class id out of range (label " + std::to_string(t) +
                              ", prediction " + std::to_string(p) + ")");
    }
    ++counts_[static_cast<std::size_t>(t * classes_ + p)];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw std::invalid_argument("ConfusionMatrix::merge: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

void ConfusionMatrix::set(int truth, int pred, std::uint64_t count) {
  if (truth < 0 || truth >= classes_ || pred < 0 || pred >= classes_) throw std::out_of_range("ConfusionMatrix::set");
  counts_[static_cast<std::size_t>(truth * classes_ + pred)] = count;
}

MiouResult miou(const ConfusionMatrix& cm) {
  MiouResult r;
  const int c = cm.num_classes();
  r.per_class.assign(static_cast<std::size_t>(c), std::numeric_limits<double>::quiet_NaN());
  double total = 0.0;
  int counted = 0;
  for (int k = 0; k < c; ++k) {
    const auto tp = cm.true_positive(k);
    const auto denom = tp + cm.false_positive(k) + cm.false_negative(k);
    if (denom == 0) continue;
    r.per_class[static_cast<std::size_t>(k)] = static_cast<double>(tp) / static_cast<double>(denom);
    total += r.per_class[static_cast<std::size_t>(k)];
    ++counted;
  }
  r.valid = counted > 0;
  r.mean = r.valid ? total / counted : std::numeric_limits<double>::quiet_NaN();
  return r;
}

std::string format_report(const MiouResult& result, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  std::size_t width = 5;
  for (const auto& n : class_names) width = std::max(width, n.size());
  os << std::left << std::setw(static_cast<int>(width)) << "class" << "  IoU\n";
  os << std::string(width + 9, '-') << "\n";
  for (std::size_t c = 0; c < result.per_class.size(); ++c) {
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    os << std::left << std::setw(static_cast<int>(width)) << name << "  ";
    if (std::isnan(result.per_class[c])) {
      os << "n/a\n";
    } else {
      os << std::fixed << std::setprecision(4) << result.per_class[c] << "\n";
    }
  }
  os << std::string(width + 9, '-') << "\n";
  os << std::setprecision(10);
  os << "miou=" << (result.valid ? result.mean : std::numeric_limits<double>::quiet_NaN()) << "\n";
  os << "miou_valid=" << (result.valid ? 1 : 0) << "\n";
  for (std::size_t c = 0; c < result.per_class.size(); ++c) {
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    os << "iou." << name << "=";
    if (std::isnan(result.per_class[c])) {
      os << "nan\n";
    } else {
      os << result.per_class[c] << "\n";
    }
  }
  return os.str();
}

#define CPG_INSTANTIATE_LOSSES(T)                                                                              \
  template Tensor<T> wce_loss(const Tensor<T>&, std::span<const std::int32_t>, const ClassWeights&, LossInfo*); \
  template Tensor<T> lovasz_softmax_loss(const Tensor<T>&, std::span<const std::int32_t>);                     \
  template Tensor<T> consistency_loss(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template std::vector<std::int32_t> predict_labels(const Tensor<T>&);

CPG_INSTANTIATE_LOSSES(float)
CPG_INSTANTIATE_LOSSES(double)

}  // namespace cpg
