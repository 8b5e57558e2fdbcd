#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cpg/ops.hpp"
#include "cpg/tensor.hpp"
#include "oracles.hpp"

using namespace cpg;
using TD = Tensor<double>;

namespace {

TD rand_tensor(Rng& rng, Shape shape, bool grad = false, double lo = -1, double hi = 1) {
  auto n = static_cast<std::size_t>(shape_numel(shape));
  return TD(std::move(shape), oracle::uniform_vector(rng, n, lo, hi), grad);
}

}  // namespace

TEST_CASE("tensor basics and shape checks") {
  TD a({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(a.numel() == 6);
  CHECK(a.dim(-1) == 3);
  CHECK_THROWS_AS(TD({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(add(a, TD({3, 2}, {1, 2, 3, 4, 5, 6})), ShapeError);
  CHECK_THROWS(sum(a).backward());  // nothing requires grad
  TD b({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  CHECK_THROWS_AS(mul(b, b).backward(), ShapeError);  // non-scalar
}

TEST_CASE("gradient accumulates over shared subexpressions") {
  // f = sum(x*x + x) -> df/dx = 2x + 1, x used three times.
  TD x({3}, {1.0, -2.0, 0.5}, true);
  auto f = sum(add(mul(x, x), x));
  f.backward();
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(-3.0));
  CHECK(x.grad()[2] == doctest::Approx(2.0));
  // A second backward adds on top until cleared.
  sum(x).backward();
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("no-grad mode records nothing") {
  TD x({2}, {1, 2}, true);
  const auto before = graph_nodes_created();
  {
    NoGradGuard guard;
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(graph_nodes_created() == before);
  auto y = mul(x, x);
  CHECK(y.requires_grad());
  CHECK(graph_nodes_created() == before + 1);
}

TEST_CASE("conv2d matches the six-loop oracle") {
  Rng rng(11);
  struct Case {
    int H, W, Cin, Cout, k, sh, sw, ph, pw;
    bool bias;
  };
  for (const auto& c : {Case{5, 7, 3, 4, 3, 1, 1, 1, 1, true}, Case{6, 8, 2, 3, 3, 2, 2, 1, 1, false},
                        Case{4, 8, 3, 2, 3, 1, 2, 1, 1, true}, Case{5, 5, 4, 6, 1, 1, 1, 0, 0, true},
                        Case{7, 6, 2, 2, 3, 2, 1, 0, 1, false}}) {
    auto x = rand_tensor(rng, {c.H, c.W, c.Cin});
    auto w = rand_tensor(rng, {c.k, c.k, c.Cin, c.Cout});
    auto b = c.bias ? rand_tensor(rng, {c.Cout}) : TD();
    auto y = conv2d(x, w, b, {c.sh, c.sw, c.ph, c.pw});
    std::int64_t ho = 0, wo = 0;
    const auto ref = oracle::conv2d({x.data().begin(), x.data().end()}, c.H, c.W, c.Cin,
                                    {w.data().begin(), w.data().end()}, c.k, c.k, c.Cout,
                                    c.bias ? std::vector<double>(b.data().begin(), b.data().end()) : std::vector<double>{},
                                    c.sh, c.sw, c.ph, c.pw, &ho, &wo);
    CHECK(y.shape() == Shape{ho, wo, c.Cout});
    CHECK(oracle::max_abs_diff(y.data(), ref) < 1e-12);
  }
}

TEST_CASE("conv2d on a large grid uses chunked im2col consistently") {
  // Large enough that the column buffer is split; compare against the oracle.
  Rng rng(3);
  auto x = rand_tensor(rng, {96, 96, 16});
  auto w = rand_tensor(rng, {3, 3, 16, 8});
  auto y = conv2d(x, w, TD(), {1, 1, 1, 1});
  std::int64_t ho = 0, wo = 0;
  const auto ref = oracle::conv2d({x.data().begin(), x.data().end()}, 96, 96, 16, {w.data().begin(), w.data().end()},
                                  3, 3, 8, {}, 1, 1, 1, 1, &ho, &wo);
  CHECK(oracle::max_abs_diff(y.data(), ref) < 1e-11);
}

TEST_CASE("maxpool2d picks the window max, ties to the lowest index") {
  Rng rng(5);
  auto x = rand_tensor(rng, {4, 6, 2}, true);
  auto y = maxpool2d(x, 2, 2);
  REQUIRE(y.shape() == Shape{2, 3, 2});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      for (int c = 0; c < 2; ++c) {
        double m = -1e9;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) m = std::max(m, oracle::at3({x.data().begin(), x.data().end()}, 6, 2, 2 * i + a, 2 * j + b, c));
        CHECK(y.data()[static_cast<std::size_t>((i * 3 + j) * 2 + c)] == m);
      }
  CHECK_THROWS_AS(maxpool2d(x, 3, 2), ShapeError);

  TD tied({2, 2, 1}, {1.0, 1.0, 1.0, 1.0}, true);
  sum(maxpool2d(tied, 2, 2)).backward();
  CHECK(tied.grad()[0] == 1.0);
  CHECK(tied.grad()[1] == 0.0);
  CHECK(tied.grad()[3] == 0.0);
}

TEST_CASE("linear matches a triple loop and is row independent") {
  Rng rng(8);
  auto x = rand_tensor(rng, {9, 5});
  auto w = rand_tensor(rng, {5, 4});
  auto b = rand_tensor(rng, {4});
  auto y = linear(x, w, b);
  for (int n = 0; n < 9; ++n)
    for (int o = 0; o < 4; ++o) {
      double acc = b.data()[o];
      for (int i = 0; i < 5; ++i) acc += x.data()[n * 5 + i] * w.data()[i * 4 + o];
      CHECK(y.data()[n * 4 + o] == doctest::Approx(acc).epsilon(1e-14));
    }
  // Reversing the rows reverses the output rows bit-exactly.
  std::vector<double> rev;
  for (int n = 8; n >= 0; --n) rev.insert(rev.end(), x.data().begin() + n * 5, x.data().begin() + n * 5 + 5);
  auto yr = linear(TD({9, 5}, rev), w, b);
  for (int n = 0; n < 9; ++n)
    for (int o = 0; o < 4; ++o) CHECK(yr.data()[(8 - n) * 4 + o] == y.data()[n * 4 + o]);
}

TEST_CASE("batchnorm training statistics match a two-pass computation") {
  Rng rng(2);
  auto x = rand_tensor(rng, {4, 5, 3}, false, -2, 3);
  auto bn = BatchNorm<double>::make(3);
  auto y = batchnorm(x, bn, true);
  const std::size_t m = 20;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0;
    for (std::size_t k = 0; k < m; ++k) mean += x.data()[k * 3 + c];
    mean /= m;
    double var = 0;
    for (std::size_t k = 0; k < m; ++k) var += (x.data()[k * 3 + c] - mean) * (x.data()[k * 3 + c] - mean);
    const double biased = var / m, unbiased = var / (m - 1);
    for (std::size_t k = 0; k < m; ++k) {
      CHECK(y.data()[k * 3 + c] == doctest::Approx((x.data()[k * 3 + c] - mean) / std::sqrt(biased + 1e-5)));
    }
    CHECK(bn.running_mean.data()[c] == doctest::Approx(0.1 * mean));
    CHECK(bn.running_var.data()[c] == doctest::Approx(0.9 + 0.1 * unbiased));
  }
  // Inference mode uses the running statistics and leaves them unchanged.
  const std::vector<double> rm(bn.running_mean.data().begin(), bn.running_mean.data().end());
  auto z = batchnorm(x, bn, false);
  CHECK(std::equal(rm.begin(), rm.end(), bn.running_mean.data().begin()));
  CHECK(z.data()[0] == doctest::Approx((x.data()[0] - rm[0]) / std::sqrt(bn.running_var.data()[0] + 1e-5)));
}

TEST_CASE("softmax rows sum to one and match exp/sum") {
  Rng rng(4);
  auto x = rand_tensor(rng, {6, 5}, false, -30, 30);
  auto p = softmax(x, 1);
  for (int n = 0; n < 6; ++n) {
    std::vector<double> row(x.data().begin() + n * 5, x.data().begin() + n * 5 + 5);
    const auto ref = oracle::softmax_row(row);
    double s = 0;
    for (int c = 0; c < 5; ++c) {
      CHECK(p.data()[n * 5 + c] == doctest::Approx(ref[c]).epsilon(1e-12));
      s += p.data()[n * 5 + c];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
  // Extreme logits stay finite thanks to the max shift.
  auto big = softmax(TD({1, 2}, {1000.0, 0.0}), 1);
  CHECK(big.data()[0] == 1.0);
  CHECK(std::isfinite(big.data()[1]));
}

TEST_CASE("grid helpers: upsample, pad, crop, concat, gate_blend") {
  TD x({2, 2, 1}, {1, 2, 3, 4});
  auto up = upsample(x, 2, 1);
  CHECK(up.shape() == Shape{4, 2, 1});
  CHECK(std::vector<double>(up.data().begin(), up.data().end()) == std::vector<double>{1, 2, 1, 2, 3, 4, 3, 4});
  auto padded = pad2d(x, 1, 2);
  CHECK(padded.shape() == Shape{3, 4, 1});
  CHECK(padded.data()[2] == 0.0);
  CHECK(padded.data()[5] == 4.0);
  auto cropped = crop2d(padded, 2, 2);
  CHECK(std::vector<double>(cropped.data().begin(), cropped.data().end()) == std::vector<double>{1, 2, 3, 4});
  auto cat = concat<double>({x, x}, 2);
  CHECK(cat.shape() == Shape{2, 2, 2});
  CHECK(cat.data()[1] == 1.0);
  TD gate({2, 2, 1}, {1.0, 0.0, 0.5, 0.25});
  TD a({2, 2, 2}, {1, 1, 1, 1, 1, 1, 1, 1});
  TD b({2, 2, 2}, {0, 0, 0, 0, 0, 0, 0, 0});
  auto g = gate_blend(gate, a, b);
  CHECK(std::vector<double>(g.data().begin(), g.data().end()) ==
        std::vector<double>{1, 1, 0, 0, 0.5, 0.5, 0.25, 0.25});
  CHECK_THROWS_AS(gate_blend(TD({2, 2, 3}, std::vector<double>(12, 0.5)), a, b), ShapeError);
}

TEST_CASE("float and double kernels agree") {
  Rng rng(9);
  auto xd = rand_tensor(rng, {6, 6, 3});
  auto wd = rand_tensor(rng, {3, 3, 3, 2});
  std::vector<float> xf(xd.data().begin(), xd.data().end()), wf(wd.data().begin(), wd.data().end());
  auto yd = conv2d(xd, wd, TD(), {1, 1, 1, 1});
  auto yf = conv2d(Tensor<float>({6, 6, 3}, xf), Tensor<float>({3, 3, 3, 2}, wf), Tensor<float>(), {1, 1, 1, 1});
  for (std::int64_t i = 0; i < yd.numel(); ++i) CHECK(yf.data()[i] == doctest::Approx(yd.data()[i]).epsilon(1e-5));
}
