#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "cpg/pointcloud.hpp"
#include "cpg/tensor.hpp"

namespace cpg {

enum class GridKind { kBev, kRv };

/// One 2D projection target. Grids are stored [height, width, channels];
/// the continuous coordinate u runs along width and v along height.
struct GridSpec {
  GridKind kind = GridKind::kBev;
  int width = 0;
  int height = 0;
  // Bird's-eye view bounds in meters.
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  // Range view vertical field-of-view halves in radians.
  double fov_up = 0, fov_down = 0;

  static GridSpec bev(int width, int height, double x_min, double y_min, double x_max, double y_max);
  static GridSpec rv(int width, int height, double fov_up, double fov_down);
  static GridSpec rv_degrees(int width, int height, double fov_up_deg, double fov_down_deg);

  double fov() const { return fov_up + fov_down; }
  /// Throws std::invalid_argument on non-positive sizes or empty extents.
  void validate() const;

  bool operator==(const GridSpec&) const = default;
};

/// Continuous grid coordinates of every point for one view.
struct ProjectionIndex {
  GridSpec spec;
  std::vector<double> u;
  std::vector<double> v;
  /// 1 iff 0 <= u < width and 0 <= v < height.
  std::vector<std::uint8_t> in_range;
  // Spherical coordinates, range view only.
  std::vector<double> r;
  std::vector<double> theta;
  std::vector<double> phi;

  std::size_t size() const { return u.size(); }
  /// Flat cell index row * width + col of an in-range point, else -1.
  std::int64_t cell(std::size_t k) const;
};

/// Winning point per grid cell and channel; kEmpty where no point landed.
struct ScatterRecord {
  static constexpr std::int32_t kEmpty = -1;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t channels = 0;
  std::vector<std::int32_t> argmax;
};

ProjectionIndex project_bev(const PointCloud& cloud, const GridSpec& spec);
/// u = (1 - phi/pi) * W / 2 and v = (1 - (theta + fov_down) / fov) * H, so
/// elevation +fov_up lands on row 0 and -fov_down on row H. Points at the
/// exact origin are masked out with NaN coordinates.
ProjectionIndex project_rv(const PointCloud& cloud, const GridSpec& spec);
ProjectionIndex project(const PointCloud& cloud, const GridSpec& spec);

/// Per-cell, per-channel max over the in-range points of each cell. Empty cells
/// hold 0. The gradient of every cell/channel flows to its argmax point, with
/// ties going to the lowest point index.
template <typename T>
std::pair<Tensor<T>, ScatterRecord> p2g_scatter_max(const Tensor<T>& features, const ProjectionIndex& index);

/// Bilinear read of the four cells (floor(u)+i, floor(v)+j), i,j in {0,1}, with
/// weights (1-|u-(floor(u)+i)|)(1-|v-(floor(v)+j)|). Cells outside the grid
/// read as zero.
template <typename T>
Tensor<T> g2p_bilinear(const Tensor<T>& grid, const ProjectionIndex& index);

struct Coverage {
  double in_bev = 0;
  double in_rv = 0;
  double in_both = 0;
  double in_either = 0;
  std::size_t points = 0;
  /// True when the cloud had no points and every fraction was reported as 0.
  bool empty = false;
};

Coverage coverage_stats(const ProjectionIndex& bev, const ProjectionIndex& rv);
Coverage coverage_stats(const PointCloud& cloud, const GridSpec& bev_spec, const GridSpec& rv_spec);

inline constexpr int kPointInputChannels = 9;

/// Columns x, y, z, intensity, r, dx, dy, dtheta, dphi. The offsets are taken
/// from the center of the point's cell and are zero outside the view.
template <typename T>
Tensor<T> point_input_features(const PointCloud& cloud, const ProjectionIndex& bev, const ProjectionIndex& rv);

/// Write one channel of a [H,W,C] grid as an 8-bit PGM scaled to [0,255].
void write_pgm(const std::filesystem::path& path, const Tensor<float>& grid, std::int64_t channel);

}  // namespace cpg
