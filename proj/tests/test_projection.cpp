#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "cpg/ops.hpp"
#include "cpg/projection.hpp"
#include "oracles.hpp"

using namespace cpg;
using TD = Tensor<double>;

namespace {

PointCloud cloud_of(std::initializer_list<std::array<float, 3>> xyz) {
  PointCloud c;
  for (const auto& p : xyz) c.points.push_back({p[0], p[1], p[2], 0.f});
  return c;
}

PointCloud random_cloud(Rng& rng, int n, double extent, double zlo = -2, double zhi = 1) {
  PointCloud c;
  for (int i = 0; i < n; ++i) {
    c.points.push_back({static_cast<float>(rng.uniform(-extent, extent)), static_cast<float>(rng.uniform(-extent, extent)),
                        static_cast<float>(rng.uniform(zlo, zhi)), static_cast<float>(rng.uniform())});
  }
  return c;
}

const GridSpec kFullBev = GridSpec::bev(600, 600, -50, -50, 50, 50);
const GridSpec kFullRv = GridSpec::rv_degrees(2048, 64, 3.0, 25.0);

}  // namespace

TEST_CASE("BEV coordinates") {
  const auto idx = project_bev(cloud_of({{-50, -50, 0}, {0, 0, 0}, {50, 0, 0}, {49.99f, 49.99f, 3}}), kFullBev);
  CHECK(idx.u[0] == 0.0);
  CHECK(idx.v[0] == 0.0);
  CHECK(idx.in_range[0] == 1);
  CHECK(idx.u[1] == 300.0);
  CHECK(idx.v[1] == 300.0);
  CHECK(idx.u[2] == 600.0);
  CHECK(idx.in_range[2] == 0);  // half-open upper bound
  CHECK(idx.in_range[3] == 1);
  CHECK(idx.cell(1) == 300 * 600 + 300);
  CHECK(idx.cell(2) == -1);
  CHECK_THROWS(GridSpec::bev(0, 10, 0, 0, 1, 1).validate());
  CHECK_THROWS(GridSpec::bev(10, 10, 1, 0, 1, 1).validate());
}

TEST_CASE("range view coordinates") {
  const auto idx = project_rv(cloud_of({{1, 0, 0}, {0, 0, 0}, {-1, 0, 0}, {0, 1, 0}}), kFullRv);
  CHECK(idx.u[0] == 1024.0);
  CHECK(idx.in_range[1] == 0);  // origin is masked
  CHECK(std::isnan(idx.u[1]));
  CHECK(idx.phi[2] == std::numbers::pi);  // the seam resolves to +pi
  CHECK(idx.u[2] == 0.0);
  CHECK(idx.u[3] == doctest::Approx(512.0));
  // Horizontal rays sit fov_down/fov of the way up from the bottom row.
  CHECK(idx.v[0] == doctest::Approx((1.0 - 25.0 / 28.0) * 64));

  // Lowest beam lands exactly on H (outside); slightly above it is inside.
  const double down = kFullRv.fov_down;
  auto at_elevation = [](double theta) {
    return cloud_of({{static_cast<float>(std::cos(theta)), 0.f, static_cast<float>(std::sin(theta))}});
  };
  const auto low = project_rv(at_elevation(-down), kFullRv);
  CHECK(low.v[0] == doctest::Approx(64.0).epsilon(1e-6));
  const auto above = project_rv(at_elevation(-down + 1e-3), kFullRv);
  CHECK(above.v[0] < 64.0);
  CHECK(above.in_range[0] == 1);
  const auto top = project_rv(at_elevation(kFullRv.fov_up - 1e-4), kFullRv);
  CHECK(top.v[0] > 0.0);
  CHECK(top.v[0] < 0.1);
}

TEST_CASE("range view matches the spherical oracle and inverts") {
  Rng rng(12);
  const auto cloud = random_cloud(rng, 500, 60.0, -5, 5);
  const auto idx = project_rv(cloud, kFullRv);
  for (std::size_t k = 0; k < cloud.size(); ++k) {
    const auto& p = cloud.points[k];
    const auto ref = oracle::range_view(p.x, p.y, p.z, kFullRv);
    CHECK(idx.u[k] == doctest::Approx(ref.u).epsilon(1e-12));
    CHECK(idx.v[k] == doctest::Approx(ref.v).epsilon(1e-12));
    const double x = idx.r[k] * std::cos(idx.theta[k]) * std::cos(idx.phi[k]);
    const double y = idx.r[k] * std::cos(idx.theta[k]) * std::sin(idx.phi[k]);
    const double z = idx.r[k] * std::sin(idx.theta[k]);
    CHECK(std::abs(x - p.x) < 1e-5);
    CHECK(std::abs(y - p.y) < 1e-5);
    CHECK(std::abs(z - p.z) < 1e-5);
  }
}

TEST_CASE("scatter-max: two points, empty cells, ties, gradient routing") {
  const auto spec = GridSpec::bev(2, 2, 0, 0, 2, 2);
  const auto idx = project_bev(cloud_of({{0.2f, 0.2f, 0}, {0.7f, 0.6f, 0}, {1.5f, 1.5f, 0}, {5, 5, 0}}), spec);
  TD f({4, 2}, {1.0, 4.0, 3.0, 4.0, -2.0, 0.5, 9.0, 9.0}, true);
  auto [grid, record] = p2g_scatter_max(f, idx);
  // cell (0,0): max {1,3} = 3 and tie {4,4} -> 4 from point 0.
  CHECK(grid.data()[0] == 3.0);
  CHECK(grid.data()[1] == 4.0);
  CHECK(record.argmax[0] == 1);
  CHECK(record.argmax[1] == 0);
  // Empty cells are zero; a negative max in an occupied cell stays negative.
  CHECK(grid.data()[2] == 0.0);
  CHECK(record.argmax[2] == ScatterRecord::kEmpty);
  CHECK(grid.data()[6] == -2.0);
  sum(grid).backward();
  CHECK(std::vector<double>(f.grad().begin(), f.grad().end()) == std::vector<double>{0, 1, 1, 0, 1, 1, 0, 0});
}

TEST_CASE("scatter-max equals the set-building oracle bit for bit") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const auto spec = GridSpec::bev(8, 8, -4, -4, 4, 4);
    const auto cloud = random_cloud(rng, 50, 5.0);
    const auto idx = project_bev(cloud, spec);
    const auto feats = oracle::uniform_vector(rng, 50 * 4);
    auto [grid, record] = p2g_scatter_max(TD({50, 4}, feats), idx);
    const auto ref = oracle::scatter_max(feats, 4, idx.u, idx.v, 8, 8);
    CHECK(oracle::max_abs_diff(grid.data(), ref) == 0.0);
  }
}

TEST_CASE("bilinear gather: on-node, center, borders, oracle") {
  const auto spec = GridSpec::bev(3, 3, 0, 0, 3, 3);
  TD grid({3, 3, 1}, {0, 1, 2, 3, 4, 5, 6, 7, 8}, true);
  const auto idx = project_bev(cloud_of({{1, 1, 0}, {1.5f, 1.5f, 0}, {2.5f, 0.5f, 0}, {7, 7, 0}}), spec);
  auto out = g2p_bilinear(grid, idx);
  CHECK(out.data()[0] == 4.0);                      // on node (row 1, col 1)
  CHECK(out.data()[1] == doctest::Approx(6.0));     // 0.25 * (4 + 5 + 7 + 8)
  CHECK(out.data()[2] == doctest::Approx(0.25 * 2 + 0.25 * 5));  // right/bottom neighbours outside read 0
  CHECK(out.data()[3] == 0.0);                      // far outside
  TD w({4, 1}, {0.0, 1.0, 0.0, 0.0});
  sum(mul(out, w)).backward();
  CHECK(grid.grad()[4] == doctest::Approx(0.25));
  CHECK(grid.grad()[8] == doctest::Approx(0.25));
  CHECK(grid.grad()[0] == 0.0);

  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = GridSpec::bev(6, 5, -3, -3, 3, 3);
    const auto cloud = random_cloud(rng, 40, 3.6);
    const auto ix = project_bev(cloud, s);
    const auto g = oracle::uniform_vector(rng, 5 * 6 * 3);
    const auto y = g2p_bilinear(TD({5, 6, 3}, g), ix);
    CHECK(oracle::max_abs_diff(y.data(), oracle::bilinear(g, 5, 6, 3, ix.u, ix.v)) < 1e-12);
  }
}

TEST_CASE("scatter-max is equivariant under flips") {
  Rng rng(41);
  const auto spec = GridSpec::bev(16, 16, -8, -8, 8, 8);
  const auto rv_spec = GridSpec::rv_degrees(32, 8, 3.0, 25.0);
  for (int trial = 0; trial < 20; ++trial) {
    auto cloud = random_cloud(rng, 80, 7.5, -3, 0.3);
    const auto idx = project_bev(cloud, spec);
    PointCloud fx = cloud, fy = cloud;
    for (auto& p : fx.points) p.x = -p.x;
    for (auto& p : fy.points) p.y = -p.y;
    const auto feats = TD({80, 2}, oracle::uniform_vector(rng, 160));
    const auto g = p2g_scatter_max(feats, idx).first;
    const auto gx = p2g_scatter_max(feats, project_bev(fx, spec)).first;
    const auto gy = p2g_scatter_max(feats, project_bev(fy, spec)).first;
    const auto rv = p2g_scatter_max(feats, project_rv(cloud, rv_spec)).first;
    const auto rvy = p2g_scatter_max(feats, project_rv(fy, rv_spec)).first;
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c)
        for (int ch = 0; ch < 2; ++ch) {
          const auto at = [&](const TD& t, int rr, int cc) { return t.data()[(rr * 16 + cc) * 2 + ch]; };
          CHECK(at(gx, r, 15 - c) == at(g, r, c));
          CHECK(at(gy, 15 - r, c) == at(g, r, c));
        }
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 32; ++c)
        for (int ch = 0; ch < 2; ++ch) {
          CHECK(rvy.data()[(r * 32 + (31 - c)) * 2 + ch] == rv.data()[(r * 32 + c) * 2 + ch]);
        }
  }
}

TEST_CASE("coverage counts") {
  // 3 in both, 2 only in BEV (steep elevation), 1 only in RV (beyond 50 m), 1 in neither.
  const auto cloud = cloud_of({{10, 0, -1}, {-5, 5, -0.5f}, {20, -20, -1}, {1, 1, 5}, {-2, 0, 3}, {70, 0, -1},
                               {80, 0, 40}});
  const auto cov = coverage_stats(cloud, kFullBev, kFullRv);
  CHECK(cov.points == 7);
  CHECK(cov.in_bev == 5.0 / 7.0);
  CHECK(cov.in_rv == 4.0 / 7.0);
  CHECK(cov.in_both == 3.0 / 7.0);
  CHECK(cov.in_either == 6.0 / 7.0);
  const auto empty = coverage_stats(PointCloud{}, kFullBev, kFullRv);
  CHECK(empty.empty);
  CHECK(empty.in_either == 0.0);
}

TEST_CASE("point input features") {
  const auto spec = GridSpec::bev(4, 4, 0, 0, 4, 4);
  const auto rv = GridSpec::rv_degrees(8, 4, 3.0, 25.0);
  auto cloud = cloud_of({{1.25f, 2.75f, -0.5f}, {9, 9, 0}});
  cloud.points[0].intensity = 0.5f;
  const auto f = point_input_features<double>(cloud, project_bev(cloud, spec), project_rv(cloud, rv));
  REQUIRE(f.shape() == Shape{2, kPointInputChannels});
  CHECK(f.data()[0] == 1.25);
  CHECK(f.data()[3] == 0.5);
  CHECK(f.data()[4] == doctest::Approx(std::sqrt(1.25 * 1.25 + 2.75 * 2.75 + 0.25)));
  CHECK(f.data()[5] == doctest::Approx(-0.25));  // x minus the cell center 1.5
  CHECK(f.data()[6] == doctest::Approx(0.25));   // y minus 2.5
  CHECK(std::abs(f.data()[7]) < (28.0 / 4) * std::numbers::pi / 180 / 2 + 1e-12);
  CHECK(std::abs(f.data()[8]) < std::numbers::pi / 8 + 1e-12);
  // Outside the BEV grid the offsets are zero.
  CHECK(f.data()[9 + 5] == 0.0);
  CHECK(f.data()[9 + 6] == 0.0);
}

TEST_CASE("PGM output") {
  Tensor<float> g({2, 3, 1}, {0.f, 1.f, 2.f, 3.f, 4.f, 5.f});
  const auto path = std::filesystem::temp_directory_path() / "cpg_test.pgm";
  write_pgm(path, g, 0);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  CHECK(magic == "P5");
  CHECK(w == 3);
  CHECK(h == 2);
  CHECK(maxv == 255);
  CHECK(std::filesystem::file_size(path) > 6);
}
