#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <numeric>

#include "cpg/losses.hpp"
#include "cpg/ops.hpp"
#include "cpg/pointcloud.hpp"
#include "oracles.hpp"

using namespace cpg;
using TD = Tensor<double>;

namespace {

std::vector<std::int32_t> random_labels(Rng& rng, std::size_t n, int classes, bool with_ignore) {
  std::vector<std::int32_t> labels(n);
  for (auto& l : labels) {
    l = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(classes)));
    if (with_ignore && rng.uniform() < 0.15) l = kIgnoreLabel;
  }
  return labels;
}

TD random_probs(Rng& rng, std::int64_t n, std::int64_t c) {
  NoGradGuard guard;
  return softmax(TD({n, c}, oracle::uniform_vector(rng, static_cast<std::size_t>(n * c), -3, 3)), 1).detach();
}

std::vector<double> vec(const TD& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("class weights") {
  const auto w = ClassWeights::from_frequency({0.5, 0.0, 0.25});
  CHECK(w.alpha[0] == doctest::Approx(1.0 / 0.501));
  CHECK(w.alpha[1] == doctest::Approx(1000.0));
  CHECK(ClassWeights::uniform(3).alpha == std::vector<double>{1, 1, 1});
}

TEST_CASE("weighted cross-entropy") {
  const std::vector<std::int32_t> two{0, 1};
  CHECK(wce_loss(TD({2, 2}, {0, 0, 0, 0}), two, ClassWeights::uniform(2)).item() == doctest::Approx(std::numbers::ln2));
  CHECK(wce_loss(TD({2, 2}, {20, 0, 0, 20}), two, ClassWeights::uniform(2)).item() < 1e-8);

  // All ignored: zero loss, zero gradient, flagged.
  TD z({2, 2}, {1, 2, 3, 4}, true);
  LossInfo info;
  const std::vector<std::int32_t> ignored{kIgnoreLabel, kIgnoreLabel};
  auto l = wce_loss(z, ignored, ClassWeights::uniform(2), &info);
  CHECK(l.item() == 0.0);
  CHECK(info.all_ignored);
  l.backward();
  for (double g : z.grad()) CHECK(g == 0.0);
  CHECK_THROWS(wce_loss(z, std::vector<std::int32_t>{0, 5}, ClassWeights::uniform(2)));

  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(20), c = 2 + rng.below(5);
    const auto logits = oracle::uniform_vector(rng, n * c, -5, 5);
    const auto labels = random_labels(rng, n, static_cast<int>(c), true);
    std::vector<double> freq(c);
    for (auto& f : freq) f = rng.uniform();
    const auto w = ClassWeights::from_frequency(freq);
    const auto got = wce_loss(TD({static_cast<std::int64_t>(n), static_cast<std::int64_t>(c)}, logits), labels, w).item();
    CHECK(got == doctest::Approx(oracle::wce(logits, c, labels, w.alpha)).epsilon(1e-10));
    // Uniform weights reduce to plain cross-entropy.
    double ce = 0;
    std::size_t scored = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (labels[k] < 0) continue;
      double lse = 0;
      for (std::size_t j = 0; j < c; ++j) lse += std::exp(logits[k * c + j]);
      ce += std::log(lse) - logits[k * c + static_cast<std::size_t>(labels[k])];
      ++scored;
    }
    if (scored) ce /= static_cast<double>(scored);
    const auto plain =
        wce_loss(TD({static_cast<std::int64_t>(n), static_cast<std::int64_t>(c)}, logits), labels, ClassWeights::uniform(static_cast<int>(c)));
    CHECK(plain.item() == doctest::Approx(ce).epsilon(1e-10));
  }
}

TEST_CASE("Lovasz-Softmax") {
  const std::vector<std::int32_t> zero{0};
  CHECK(lovasz_softmax_loss(TD({1, 2}, {0.3, 0.7}), zero).item() == doctest::Approx(0.7));
  const std::vector<std::int32_t> lab{0, 1, 1};
  CHECK(lovasz_softmax_loss(TD({3, 2}, {1, 0, 0, 1, 0, 1}), lab).item() == 0.0);
  CHECK(lovasz_softmax_loss(TD({2, 2}, {0.5, 0.5, 0.5, 0.5}), std::vector<std::int32_t>{kIgnoreLabel, kIgnoreLabel})
            .item() == 0.0);

  Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const auto n = static_cast<std::int64_t>(1 + rng.below(8)), c = static_cast<std::int64_t>(2 + rng.below(2));
    const auto probs = random_probs(rng, n, c);
    const auto labels = random_labels(rng, static_cast<std::size_t>(n), static_cast<int>(c), true);
    const double got = lovasz_softmax_loss(probs, labels).item();
    CHECK(got == doctest::Approx(oracle::lovasz(vec(probs), static_cast<std::size_t>(c), labels)).epsilon(1e-8));
    CHECK(got >= -1e-15);
    CHECK(got <= 1.0 + 1e-15);
  }

  // Single class present with hard predictions: 1 - loss is that class's IoU.
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    std::vector<std::int32_t> labels(n, 0), preds(n);
    std::vector<double> p(n * 2);
    for (std::size_t k = 0; k < n; ++k) {
      labels[k] = rng.uniform() < 0.6 ? 0 : kIgnoreLabel;
      preds[k] = static_cast<std::int32_t>(rng.below(2));
      p[k * 2 + static_cast<std::size_t>(preds[k])] = 1.0;
    }
    if (std::count(labels.begin(), labels.end(), 0) == 0) labels[0] = 0;
    std::vector<double> per;
    oracle::miou(preds, labels, 2, &per);
    const double loss = lovasz_softmax_loss(TD({static_cast<std::int64_t>(n), 2}, p), labels).item();
    CHECK(1.0 - loss == doctest::Approx(per[0]).epsilon(1e-12));
  }
}

TEST_CASE("transformation consistency") {
  Rng rng(3);
  auto p = random_probs(rng, 5, 4);
  CHECK(consistency_loss(p, p).item() == 0.0);
  CHECK(consistency_loss(TD({1, 2}, {1, 0}), TD({1, 2}, {0, 1})).item() == 2.0);
  CHECK_THROWS_AS(consistency_loss(p, random_probs(rng, 4, 4)), ShapeError);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<std::int64_t>(1 + rng.below(10));
    auto a = random_probs(rng, n, 3), b = random_probs(rng, n, 3), c = random_probs(rng, n, 3);
    const double ab = consistency_loss(a, b).item();
    CHECK(ab == doctest::Approx(oracle::consistency(vec(a), vec(b), 3)).epsilon(1e-12));
    CHECK(ab == consistency_loss(b, a).item());
    CHECK(consistency_loss(a, c).item() <= ab + consistency_loss(b, c).item() + 1e-12);
  }
}

TEST_CASE("total loss") {
  TD w = TD::scalar(1.0, true), l = TD::scalar(0.5, true), t = TD::scalar(0.25, true);
  auto total = total_loss(w, l, t);
  CHECK(total.item() == 2.25);
  total.backward();
  CHECK(w.grad()[0] == 1.0);
  CHECK(l.grad()[0] == 2.0);
  CHECK(t.grad()[0] == 1.0);
  CHECK(total_loss(w, l, TD()).item() == 2.0);
}

TEST_CASE("predict labels ties to the lowest class") {
  CHECK(predict_labels(TD({2, 3}, {0.2, 0.5, 0.5, 1, 0, 0})) == std::vector<std::int32_t>{1, 0});
}

TEST_CASE("confusion matrix and mIoU") {
  ConfusionMatrix cm(2);
  cm.set(0, 0, 5);
  cm.set(0, 1, 5);
  cm.set(1, 1, 10);
  const auto r = miou(cm);
  CHECK(r.per_class[0] == 0.5);
  CHECK(r.per_class[1] == doctest::Approx(10.0 / 15.0));
  CHECK(r.mean == doctest::Approx(7.0 / 12.0));

  ConfusionMatrix diag(3);
  diag.accumulate(std::vector<std::int32_t>{0, 1, 2, 2}, std::vector<std::int32_t>{0, 1, 2, 2});
  CHECK(miou(diag).mean == 1.0);
  CHECK(diag.at(2, 2) == 2);

  ConfusionMatrix absent(3);
  absent.accumulate(std::vector<std::int32_t>{0, 0, 1}, std::vector<std::int32_t>{0, 1, 1});
  const auto ra = miou(absent);
  CHECK(std::isnan(ra.per_class[2]));
  CHECK(ra.mean == doctest::Approx(0.5 * (0.5 + 0.5)));

  ConfusionMatrix empty(3);
  empty.accumulate(std::vector<std::int32_t>{1, 2}, std::vector<std::int32_t>{kIgnoreLabel, kIgnoreLabel});
  CHECK(empty.total() == 0);
  CHECK_FALSE(miou(empty).valid);
  CHECK(std::isnan(miou(empty).mean));
  CHECK_THROWS(empty.accumulate(std::vector<std::int32_t>{3}, std::vector<std::int32_t>{0}));

  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 2 + static_cast<int>(rng.below(5));
    const std::size_t n = 1 + rng.below(40);
    const auto labels = random_labels(rng, n, c, true);
    const auto preds = random_labels(rng, n, c, false);
    ConfusionMatrix whole(c), parts(c), first(c);
    whole.accumulate(preds, labels);
    const std::size_t cut = rng.below(n + 1);
    first.accumulate(std::span(preds).first(cut), std::span(labels).first(cut));
    parts.accumulate(std::span(preds).subspan(cut), std::span(labels).subspan(cut));
    parts.merge(first);
    CHECK(parts == whole);
    const auto got = miou(whole);
    const double ref = oracle::miou(preds, labels, c);
    if (std::isnan(ref)) {
      CHECK_FALSE(got.valid);
    } else {
      CHECK(got.mean == doctest::Approx(ref).epsilon(1e-12));
    }
    // Relabelling classes consistently in rows and columns keeps the mean.
    std::vector<int> perm(static_cast<std::size_t>(c));
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    ConfusionMatrix relabelled(c);
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < c; ++j) relabelled.set(perm[i], perm[j], whole.at(i, j));
    if (got.valid) CHECK(miou(relabelled).mean == doctest::Approx(got.mean).epsilon(1e-14));
  }
}

TEST_CASE("report format") {
  ConfusionMatrix cm(2);
  cm.set(0, 0, 3);
  cm.set(1, 1, 1);
  cm.set(1, 0, 1);
  const auto text = format_report(miou(cm), {"car", "road"});
  CHECK(text.find("car") != std::string::npos);
  CHECK(text.find("miou=0.625") != std::string::npos);
  CHECK(text.find("iou.road=0.5") != std::string::npos);
}
