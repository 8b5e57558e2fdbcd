#include "cpg/projection.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>

namespace cpg {

GridSpec GridSpec::bev(int width, int height, double x_min, double y_min, double x_max, double y_max) {
  GridSpec s;
  s.kind = GridKind::kBev;
  s.width = width;
  s.height = height;
  s.x_min = x_min;
  s.y_min = y_min;
  s.x_max = x_max;
  s.y_max = y_max;
  s.validate();
  return s;
}

GridSpec GridSpec::rv(int width, int height, double fov_up, double fov_down) {
  GridSpec s;
  s.kind = GridKind::kRv;
  s.width = width;
  s.height = height;
  s.fov_up = fov_up;
  s.fov_down = fov_down;
  s.validate();
  return s;
}

GridSpec GridSpec::rv_degrees(int width, int height, double fov_up_deg, double fov_down_deg) {
  constexpr double deg = std::numbers::pi / 180.0;
  return rv(width, height, fov_up_deg * deg, fov_down_deg * deg);
}

void GridSpec::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("grid width and height must be positive");
  if (kind == GridKind::kBev) {
    if (!(x_max > x_min) || !(y_max > y_min)) throw std::invalid_argument("BEV bounds must be non-empty");
  } else if (!(fov() > 0.0)) {
    throw std::invalid_argument("range view field of view must be positive");
  }
}

std::int64_t ProjectionIndex::cell(std::size_t k) const {
  if (!in_range[k]) return -1;
  const auto col = static_cast<std::int64_t>(std::floor(u[k]));
  const auto row = static_cast<std::int64_t>(std::floor(v[k]));
  return row * spec.width + col;
}

namespace {

bool inside(double u, double v, const GridSpec& spec) {
  return u >= 0.0 && u < spec.width && v >= 0.0 && v < spec.height;
}

}  // namespace

ProjectionIndex project_bev(const PointCloud& cloud, const GridSpec& spec) {
  if (spec.kind != GridKind::kBev) throw std::invalid_argument("project_bev needs a BEV grid spec");
  spec.validate();
  ProjectionIndex idx;
  idx.spec = spec;
  const std::size_t n = cloud.size();
  idx.u.resize(n);
  idx.v.resize(n);
  idx.in_range.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& p = cloud.points[k];
    idx.u[k] = (p.x - spec.x_min) / (spec.x_max - spec.x_min) * spec.width;
    idx.v[k] = (p.y - spec.y_min) / (spec.y_max - spec.y_min) * spec.height;
    idx.in_range[k] = inside(idx.u[k], idx.v[k], spec);
  }
  return idx;
}

ProjectionIndex project_rv(const PointCloud& cloud, const GridSpec& spec) {
  if (spec.kind != GridKind::kRv) throw std::invalid_argument("project_rv needs a range view grid spec");
  spec.validate();
  ProjectionIndex idx;
  idx.spec = spec;
  const std::size_t n = cloud.size();
  idx.u.resize(n);
  idx.v.resize(n);
  idx.in_range.resize(n);
  idx.r.resize(n);
  idx.theta.resize(n);
  idx.phi.resize(n);
  const double pi = std::numbers::pi;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& p = cloud.points[k];
    const double x = p.x, y = p.y, z = p.z;
    const double r = std::sqrt(x * x + y * y + z * z);
    idx.r[k] = r;
    if (r == 0.0) {
      idx.theta[k] = 0.0;
      idx.phi[k] = 0.0;
      idx.u[k] = idx.v[k] = std::numeric_limits<double>::quiet_NaN();
      idx.in_range[k] = 0;
      continue;
    }
    const double theta = std::asin(std::clamp(z / r, -1.0, 1.0));
    double phi = std::atan2(y, x);
    if (phi <= -pi) phi = pi;
    idx.theta[k] = theta;
    idx.phi[k] = phi;
    idx.u[k] = 0.5 * (1.0 - phi / pi) * spec.width;
    idx.v[k] = (1.0 - (theta + spec.fov_down) / spec.fov()) * spec.height;
    idx.in_range[k] = inside(idx.u[k], idx.v[k], spec);
  }
  return idx;
}

ProjectionIndex project(const PointCloud& cloud, const GridSpec& spec) {
  return spec.kind == GridKind::kBev ? project_bev(cloud, spec) : project_rv(cloud, spec);
}

template <typename T>
std::pair<Tensor<T>, ScatterRecord> p2g_scatter_max(const Tensor<T>& features, const ProjectionIndex& index) {
  if (features.rank() != 2 || features.dim(0) != static_cast<std::int64_t>(index.size())) {
    throw ShapeError("p2g_scatter_max: features " + shape_str(features.shape()) + " vs " +
                     std::to_string(index.size()) + " projected points");
  }
  const std::int64_t h = index.spec.height, w = index.spec.width, c = features.dim(1);
  auto record = std::make_shared<ScatterRecord>();
  record->height = h;
  record->width = w;
  record->channels = c;
  record->argmax.assign(static_cast<std::size_t>(h * w * c), ScatterRecord::kEmpty);
  const T* f = features.data().data();
  auto& arg = record->argmax;
  // Sequential scan in point order with strict '>' keeps the lowest index on ties.
  for (std::size_t k = 0; k < index.size(); ++k) {
    const std::int64_t cell = index.cell(k);
    if (cell < 0) continue;
    const T* row = f + static_cast<std::int64_t>(k) * c;
    std::int32_t* slot = arg.data() + cell * c;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int32_t cur = slot[ch];
      if (cur == ScatterRecord::kEmpty || row[ch] > f[static_cast<std::int64_t>(cur) * c + ch]) {
        slot[ch] = static_cast<std::int32_t>(k);
      }
    }
  }
  std::vector<T> out(arg.size(), T(0));
  for (std::size_t i = 0; i < arg.size(); ++i) {
    if (arg[i] != ScatterRecord::kEmpty) out[i] = f[static_cast<std::int64_t>(arg[i]) * c + static_cast<std::int64_t>(i) % c];
  }
  auto grid = make_result<T>(Shape{h, w, c}, std::move(out), {features}, "p2g_scatter_max",
                             [features, record, c](std::span<const T> go) {
                               auto g = grad_sink(features);
                               const auto& arg = record->argmax;
                               for (std::size_t i = 0; i < arg.size(); ++i) {
                                 if (arg[i] == ScatterRecord::kEmpty) continue;
                                 g[static_cast<std::size_t>(static_cast<std::int64_t>(arg[i]) * c +
                                                            static_cast<std::int64_t>(i) % c)] += go[i];
                               }
                             });
  return {std::move(grid), *record};
}

namespace {

/// Four neighbour cells and weights of each point; cell -1 lies outside the grid.
struct BilinearTaps {
  std::vector<std::array<std::int64_t, 4>> cells;
  std::vector<std::array<double, 4>> weights;
};

BilinearTaps bilinear_taps(const ProjectionIndex& index) {
  BilinearTaps taps;
  const std::size_t n = index.size();
  taps.cells.assign(n, {-1, -1, -1, -1});
  taps.weights.assign(n, {0, 0, 0, 0});
  const std::int64_t w = index.spec.width, h = index.spec.height;
  for (std::size_t k = 0; k < n; ++k) {
    const double u = index.u[k], v = index.v[k];
    if (!std::isfinite(u) || !std::isfinite(v)) continue;
    const double fu = std::floor(u), fv = std::floor(v);
    // Far-away points cannot touch the grid; skip before integer conversion.
    if (fu < -1.0 || fv < -1.0 || fu > static_cast<double>(w) || fv > static_cast<double>(h)) continue;
    const auto u0 = static_cast<std::int64_t>(fu), v0 = static_cast<std::int64_t>(fv);
    int t = 0;
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j, ++t) {
        const std::int64_t col = u0 + i, row = v0 + j;
        if (col < 0 || col >= w || row < 0 || row >= h) continue;
        taps.cells[k][t] = row * w + col;
        taps.weights[k][t] = (1.0 - std::abs(u - static_cast<double>(col))) * (1.0 - std::abs(v - static_cast<double>(row)));
      }
    }
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> g2p_bilinear(const Tensor<T>& grid, const ProjectionIndex& index) {
  if (grid.rank() != 3 || grid.dim(0) != index.spec.height || grid.dim(1) != index.spec.width) {
    throw ShapeError("g2p_bilinear: grid " + shape_str(grid.shape()) + " does not match the projection grid");
  }
  const std::int64_t c = grid.dim(2);
  const auto n = static_cast<std::int64_t>(index.size());
  auto taps = std::make_shared<BilinearTaps>(bilinear_taps(index));
  std::vector<T> out(static_cast<std::size_t>(n * c), T(0));
  const T* g = grid.data().data();
  for (std::int64_t k = 0; k < n; ++k) {
    T* o = out.data() + k * c;
    for (int t = 0; t < 4; ++t) {
      const std::int64_t cell = taps->cells[k][t];
      if (cell < 0) continue;
      const T wt = static_cast<T>(taps->weights[k][t]);
      const T* src = g + cell * c;
      for (std::int64_t ch = 0; ch < c; ++ch) o[ch] += wt * src[ch];
    }
  }
  return make_result<T>(Shape{n, c}, std::move(out), {grid}, "g2p_bilinear",
                        [grid, taps, n, c](std::span<const T> go) {
                          auto gg = grad_sink(grid);
                          for (std::int64_t k = 0; k < n; ++k) {
                            const T* src = go.data() + k * c;
                            for (int t = 0; t < 4; ++t) {
                              const std::int64_t cell = taps->cells[k][t];
                              if (cell < 0) continue;
                              const T wt = static_cast<T>(taps->weights[k][t]);
                              T* dst = gg.data() + cell * c;
                              for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += wt * src[ch];
                            }
                          }
                        });
}

Coverage coverage_stats(const ProjectionIndex& bev, const ProjectionIndex& rv) {
  if (bev.size() != rv.size()) throw std::invalid_argument("coverage_stats: index sizes differ");
  Coverage cov;
  cov.points = bev.size();
  if (cov.points == 0) {
    cov.empty = true;
    return cov;
  }
  std::size_t nb = 0, nr = 0, both = 0, either = 0;
  for (std::size_t k = 0; k < cov.points; ++k) {
    const bool b = bev.in_range[k], r = rv.in_range[k];
    nb += b;
    nr += r;
    both += b && r;
    either += b || r;
  }
  const double n = static_cast<double>(cov.points);
  cov.in_bev = static_cast<double>(nb) / n;
  cov.in_rv = static_cast<double>(nr) / n;
  cov.in_both = static_cast<double>(both) / n;
  cov.in_either = static_cast<double>(either) / n;
  return cov;
}

Coverage coverage_stats(const PointCloud& cloud, const GridSpec& bev_spec, const GridSpec& rv_spec) {
  return coverage_stats(project_bev(cloud, bev_spec), project_rv(cloud, rv_spec));
}

template <typename T>
Tensor<T> point_input_features(const PointCloud& cloud, const ProjectionIndex& bev, const ProjectionIndex& rv) {
  if (bev.spec.kind != GridKind::kBev || rv.spec.kind != GridKind::kRv) {
    throw std::invalid_argument("point_input_features: expected a BEV and a range view index");
  }
  if (bev.size() != cloud.size() || rv.size() != cloud.size()) {
    throw ShapeError("point_input_features: index sizes do not match the cloud");
  }
  const std::size_t n = cloud.size();
  constexpr int C = kPointInputChannels;
  std::vector<T> out(n * C, T(0));
  const auto& bs = bev.spec;
  const auto& rs = rv.spec;
  const double cell_x = (bs.x_max - bs.x_min) / bs.width;
  const double cell_y = (bs.y_max - bs.y_min) / bs.height;
  const double pi = std::numbers::pi;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& p = cloud.points[k];
    T* o = out.data() + k * C;
    o[0] = static_cast<T>(p.x);
    o[1] = static_cast<T>(p.y);
    o[2] = static_cast<T>(p.z);
    o[3] = static_cast<T>(p.intensity);
    o[4] = static_cast<T>(rv.r[k]);
    if (bev.in_range[k]) {
      const double cx = bs.x_min + (std::floor(bev.u[k]) + 0.5) * cell_x;
      const double cy = bs.y_min + (std::floor(bev.v[k]) + 0.5) * cell_y;
      o[5] = static_cast<T>(p.x - cx);
      o[6] = static_cast<T>(p.y - cy);
    }
    if (rv.in_range[k]) {
      const double theta_c = (1.0 - (std::floor(rv.v[k]) + 0.5) / rs.height) * rs.fov() - rs.fov_down;
      const double phi_c = pi * (1.0 - 2.0 * (std::floor(rv.u[k]) + 0.5) / rs.width);
      o[7] = static_cast<T>(rv.theta[k] - theta_c);
      o[8] = static_cast<T>(rv.phi[k] - phi_c);
    }
  }
  return Tensor<T>(Shape{static_cast<std::int64_t>(n), C}, std::move(out));
}

void write_pgm(const std::filesystem::path& path, const Tensor<float>& grid, std::int64_t channel) {
  if (grid.rank() != 3 || channel < 0 || channel >= grid.dim(2)) {
    throw std::invalid_argument("write_pgm: bad grid or channel");
  }
  const std::int64_t h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
  const auto data = grid.data();
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (std::int64_t i = 0; i < h * w; ++i) {
    lo = std::min(lo, data[i * c + channel]);
    hi = std::max(hi, data[i * c + channel]);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  out << "P5\n" << w << " " << h << "\n255\n";
  const float span = hi > lo ? hi - lo : 1.f;
  for (std::int64_t i = 0; i < h * w; ++i) {
    const float v = h * w > 0 && hi > lo ? (data[i * c + channel] - lo) / span : 0.f;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.f * std::clamp(v, 0.f, 1.f)))));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

template std::pair<Tensor<float>, ScatterRecord> p2g_scatter_max(const Tensor<float>&, const ProjectionIndex&);
template std::pair<Tensor<double>, ScatterRecord> p2g_scatter_max(const Tensor<double>&, const ProjectionIndex&);
template Tensor<float> g2p_bilinear(const Tensor<float>&, const ProjectionIndex&);
template Tensor<double> g2p_bilinear(const Tensor<double>&, const ProjectionIndex&);
template Tensor<float> point_input_features(const PointCloud&, const ProjectionIndex&, const ProjectionIndex&);
template Tensor<double> point_input_features(const PointCloud&, const ProjectionIndex&, const ProjectionIndex&);

}  // namespace cpg
