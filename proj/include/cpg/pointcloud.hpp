#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cpg/rng.hpp"

namespace cpg {

/// Label value marking a point excluded from losses and metrics.
inline constexpr std::int32_t kIgnoreLabel = -1;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Point {
  float x = 0.f;
  float y = 0.f;
  float z = 0.f;
  float intensity = 0.f;

  bool operator==(const Point&) const = default;
};

struct PointCloud {
  std::vector<Point> points;
  /// Empty, or one train id (or kIgnoreLabel) per point.
  std::vector<std::int32_t> labels;
  /// Non-finite points removed while loading.
  std::size_t dropped_nonfinite = 0;

  std::size_t size() const { return points.size(); }
  bool has_labels() const { return !labels.empty(); }
};

/// Raw dataset label id to training id mapping with class metadata.
struct LabelMap {
  std::map<std::uint32_t, std::int32_t> raw_to_train;
  std::vector<std::string> class_names;
  /// Fraction of points per class; empty when not supplied.
  std::vector<double> class_frequency;

  int num_classes() const { return static_cast<int>(class_names.size()); }

  /// Train id for a raw semantic id; unknown ids map to kIgnoreLabel and set `*known` false.
  std::int32_t map(std::uint32_t raw, bool* known = nullptr) const;

  /// Parse the INI layout with [classes], [frequency] and [learning_map] sections.
  static LabelMap load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Mapping used by synthetic scenes: raw 0 is unlabeled, raw c+1 is class c.
  static LabelMap synthetic();
};

struct LabelStats {
  std::size_t unknown_ids = 0;
};

/// Little-endian float32 quadruples (x, y, z, intensity), no header.
PointCloud load_scan(const std::filesystem::path& path);
void write_scan(const std::filesystem::path& path, const PointCloud& cloud);

/// Little-endian uint32 per point; the low 16 bits are the semantic id.
std::vector<std::int32_t> load_labels(const std::filesystem::path& path, const LabelMap& map,
                                      std::size_t expected_count, LabelStats* stats = nullptr);
void write_raw_labels(const std::filesystem::path& path, const std::vector<std::uint32_t>& raw);

/// Desk-scale class set.
enum class SynthClass : std::int32_t { kGround = 0, kVehicle = 1, kPole = 2, kWall = 3, kVegetation = 4 };
inline constexpr int kSynthClasses = 5;

struct SynthSpec {
  int rings = 16;
  int azimuth_samples = 512;
  double fov_up_deg = 3.0;
  double fov_down_deg = 25.0;
  double sensor_height = 1.73;
  double max_range = 40.0;
  int vehicles = 3;
  int poles = 4;
  int bushes = 3;
  /// Half-width of the uniform per-coordinate jitter on surface hits (m).
  double jitter = 0.02;
  /// Half-width of the jitter applied to vegetation hits (m).
  double vegetation_scatter = 0.1;
  /// Spurious returns labeled ignore.
  int outliers = 24;
};

struct SynthScene {
  PointCloud cloud;
  /// Points generated per class, with the ignore count in the last slot.
  std::array<std::size_t, kSynthClasses + 1> class_counts{};
};

/// Ray-cast a scene of primitives (ground, boxes, poles, wall, bushes) from a
/// sensor at the origin. Deterministic in `seed`.
SynthScene synth_scene(std::uint64_t seed, const SynthSpec& spec = {});

/// FNV-1a digest over the point and label bytes.
std::uint64_t cloud_digest(const PointCloud& cloud);

struct AugmentationSpec {
  /// Rotation about z drawn uniformly from [-rotation_max, rotation_max] (rad).
  double rotation_max = 3.14159265358979323846;
  double scale_min = 0.95;
  double scale_max = 1.05;
  double flip_x_prob = 0.5;
  double flip_y_prob = 0.5;
  /// Standard deviation of the Gaussian position noise (m).
  double noise_sigma = 0.02;

  static AugmentationSpec identity();
  /// Throws std::invalid_argument when the scale range is outside (0, 2) or sigma < 0.
  void validate() const;
};

/// Sampled rigid part of an augmentation: rotate, scale, then flip.
struct Transform {
  double angle = 0.0;
  double scale = 1.0;
  bool flip_x = false;
  bool flip_y = false;
};

PointCloud apply_transform(const PointCloud& cloud, const Transform& transform);

/// Sample and apply an augmentation. Noise perturbs xyz only; labels and
/// point order are preserved.
std::pair<PointCloud, Transform> augment(const PointCloud& cloud, const AugmentationSpec& spec, Rng& rng);

/// Identity, flip-x, flip-y and flip-xy copies.
std::array<PointCloud, 4> tta_variants(const PointCloud& cloud);

}  // namespace cpg
