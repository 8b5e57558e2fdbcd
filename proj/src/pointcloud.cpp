#include "cpg/pointcloud.hpp"

#include <algorithm>
#include <bit>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

namespace cpg {

namespace {

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

template <typename U>
U from_le(const char* p) {
  U v;
  std::memcpy(&v, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(U));
  }
  return v;
}

template <typename U>
void put_le(std::ostream& out, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.write(b, sizeof(U));
}

}  // namespace

PointCloud load_scan(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() % 16 != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of 16");
  }
  PointCloud cloud;
  const std::size_t n = bytes.size() / 16;
  cloud.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const char* p = bytes.data() + 16 * i;
    Point pt{from_le<float>(p), from_le<float>(p + 4), from_le<float>(p + 8), from_le<float>(p + 12)};
    if (!std::isfinite(pt.x) || !std::isfinite(pt.y) || !std::isfinite(pt.z) || !std::isfinite(pt.intensity)) {
      ++cloud.dropped_nonfinite;
      continue;
    }
    pt.intensity = std::clamp(pt.intensity, 0.f, 1.f);
    cloud.points.push_back(pt);
  }
  return cloud;
}

void write_scan(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  for (const auto& p : cloud.points) {
    put_le(out, p.x);
    put_le(out, p.y);
    put_le(out, p.z);
    put_le(out, p.intensity);
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<std::int32_t> load_labels(const std::filesystem::path& path, const LabelMap& map,
                                      std::size_t expected_count, LabelStats* stats) {
  const auto bytes = read_file(path);
  if (bytes.size() % 4 != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of 4");
  }
  const std::size_t n = bytes.size() / 4;
  if (n != expected_count) {
    throw FormatError(path.string() + ": " + std::to_string(n) + " labels for " +
                      std::to_string(expected_count) + " points");
  }
  std::vector<std::int32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto raw = from_le<std::uint32_t>(bytes.data() + 4 * i) & 0xFFFFu;
    bool known = true;
    labels[i] = map.map(raw, &known);
    if (!known && stats) ++stats->unknown_ids;
  }
  return labels;
}

void write_raw_labels(const std::filesystem::path& path, const std::vector<std::uint32_t>& raw) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  for (auto v : raw) put_le(out, v);
  if (!out) throw IoError("write failed for " + path.string());
}

std::int32_t LabelMap::map(std::uint32_t raw, bool* known) const {
  const auto it = raw_to_train.find(raw);
  if (known) *known = it != raw_to_train.end();
  return it == raw_to_train.end() ? kIgnoreLabel : it->second;
}

LabelMap LabelMap::load(const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw FormatError(e.what());
  }
  LabelMap map;
  const auto classes = tree.get_child_optional("classes");
  if (!classes || classes->empty()) throw FormatError(path.string() + ": missing [classes] section");
  map.class_names.resize(classes->size());
  std::vector<bool> seen(classes->size(), false);
  for (const auto& [key, value] : *classes) {
    const auto id = std::stoul(key);
    if (id >= map.class_names.size() || seen[id]) {
      throw FormatError(path.string() + ": class ids must be 0..C-1 without repeats");
    }
    seen[id] = true;
    map.class_names[id] = value.data();
  }
  const int c = map.num_classes();
  if (const auto freq = tree.get_child_optional("frequency")) {
    map.class_frequency.assign(static_cast<std::size_t>(c), -1.0);
    for (const auto& [key, value] : *freq) {
      const auto id = std::stoul(key);
      if (id >= map.class_frequency.size()) throw FormatError(path.string() + ": frequency for unknown class " + key);
      const double f = std::stod(value.data());
      if (!(f >= 0.0)) throw FormatError(path.string() + ": negative frequency for class " + key);
      map.class_frequency[id] = f;
    }
    if (std::count(map.class_frequency.begin(), map.class_frequency.end(), -1.0) > 0) {
      throw FormatError(path.string() + ": [frequency] must list every class");
    }
  }
  const auto learning = tree.get_child_optional("learning_map");
  if (!learning) throw FormatError(path.string() + ": missing [learning_map] section");
  for (const auto& [key, value] : *learning) {
    const auto raw = static_cast<std::uint32_t>(std::stoul(key));
    const std::string target = value.data();
    if (target == "ignore") {
      map.raw_to_train[raw] = kIgnoreLabel;
      continue;
    }
    const long id = std::stol(target);
    if (id < 0 || id >= c) throw FormatError(path.string() + ": raw id " + key + " maps outside the class range");
    map.raw_to_train[raw] = static_cast<std::int32_t>(id);
  }
  return map;
}

void LabelMap::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path.string());
  out << "[classes]\n";
  for (std::size_t i = 0; i < class_names.size(); ++i) out << i << " = " << class_names[i] << "\n";
  if (!class_frequency.empty()) {
    out << "\n[frequency]\n" << std::setprecision(17);
    for (std::size_t i = 0; i < class_frequency.size(); ++i) out << i << " = " << class_frequency[i] << "\n";
  }
  out << "\n[learning_map]\n";
  for (const auto& [raw, id] : raw_to_train) {
    out << raw << " = ";
    if (id == kIgnoreLabel) {
      out << "ignore\n";
    } else {
      out << id << "\n";
    }
  }
}

LabelMap LabelMap::synthetic() {
  LabelMap map;
  map.class_names = {"ground", "vehicle", "pole", "wall", "vegetation"};
  map.raw_to_train[0] = kIgnoreLabel;
  for (std::int32_t c = 0; c < kSynthClasses; ++c) map.raw_to_train[static_cast<std::uint32_t>(c + 1)] = c;
  return map;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

struct Vec3 {
  double x, y, z;
};

struct Box {
  double cx, cy, cz, yaw, hl, hw, hh;
};

struct Cylinder {
  double cx, cy, z0, z1, radius;
};

struct Sphere {
  double cx, cy, cz, radius;
};

struct Wall {
  double nx, ny, dist, half_length, z0, z1;
};

constexpr double kMinRange = 0.5;

double hit_box(const Box& b, const Vec3& d) {
  // Ray from the origin, expressed in the box frame.
  const double c = std::cos(-b.yaw), s = std::sin(-b.yaw);
  const double ox = c * (-b.cx) - s * (-b.cy), oy = s * (-b.cx) + c * (-b.cy), oz = -b.cz;
  const double dx = c * d.x - s * d.y, dy = s * d.x + c * d.y, dz = d.z;
  double tmin = -std::numeric_limits<double>::infinity(), tmax = std::numeric_limits<double>::infinity();
  const double o[3] = {ox, oy, oz}, dir[3] = {dx, dy, dz}, h[3] = {b.hl, b.hw, b.hh};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dir[a]) < 1e-12) {
      if (std::abs(o[a]) > h[a]) return -1.0;
      continue;
    }
    double t1 = (-h[a] - o[a]) / dir[a], t2 = (h[a] - o[a]) / dir[a];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
  }
  if (tmax < tmin || tmin <= 0.0) return -1.0;
  return tmin;
}

double hit_cylinder(const Cylinder& cyl, const Vec3& d) {
  const double a = d.x * d.x + d.y * d.y;
  if (a < 1e-12) return -1.0;
  const double b = -2.0 * (d.x * cyl.cx + d.y * cyl.cy);
  const double c = cyl.cx * cyl.cx + cyl.cy * cyl.cy - cyl.radius * cyl.radius;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return -1.0;
  const double t = (-b - std::sqrt(disc)) / (2.0 * a);
  if (t <= 0.0) return -1.0;
  const double z = t * d.z;
  return (z >= cyl.z0 && z <= cyl.z1) ? t : -1.0;
}

double hit_sphere(const Sphere& s, const Vec3& d) {
  const double b = d.x * s.cx + d.y * s.cy + d.z * s.cz;
  const double c = s.cx * s.cx + s.cy * s.cy + s.cz * s.cz - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0.0) return -1.0;
  const double t = b - std::sqrt(disc);
  return t > 0.0 ? t : -1.0;
}

double hit_wall(const Wall& w, const Vec3& d) {
  const double dn = w.nx * d.x + w.ny * d.y;
  if (dn <= 1e-9) return -1.0;
  const double t = w.dist / dn;
  const double px = t * d.x, py = t * d.y, pz = t * d.z;
  const double tangential = -w.ny * px + w.nx * py;
  if (std::abs(tangential) > w.half_length || pz < w.z0 || pz > w.z1) return -1.0;
  return t;
}

}  // namespace

SynthScene synth_scene(std::uint64_t seed, const SynthSpec& spec) {
  Rng rng(seed);
  const double ground = -spec.sensor_height;
  const double two_pi = 2.0 * std::numbers::pi;

  // Objects get distinct azimuth sectors so none is fully hidden behind another.
  const int objects = spec.vehicles + spec.poles + spec.bushes;
  const int sectors = objects + 2;
  std::vector<int> sector_ids(static_cast<std::size_t>(sectors));
  for (int i = 0; i < sectors; ++i) sector_ids[static_cast<std::size_t>(i)] = i;
  rng.shuffle(sector_ids);
  const double sector_width = two_pi / sectors;
  int next_sector = 0;
  auto place = [&](double dmin, double dmax) {
    const int s = sector_ids[static_cast<std::size_t>(next_sector++)];
    const double az = (s + 0.5) * sector_width + rng.uniform(-0.25, 0.25) * sector_width;
    const double dist = rng.uniform(dmin, dmax);
    return std::pair{dist * std::cos(az), dist * std::sin(az)};
  };

  std::vector<Box> boxes;
  for (int i = 0; i < spec.vehicles; ++i) {
    const auto [x, y] = place(6.0, 11.0);
    const double height = rng.uniform(1.4, 1.8);
    boxes.push_back({x, y, ground + height / 2, rng.uniform(-std::numbers::pi, std::numbers::pi),
                     rng.uniform(1.9, 2.3), rng.uniform(0.85, 1.0), height / 2});
  }
  std::vector<Cylinder> poles;
  for (int i = 0; i < spec.poles; ++i) {
    const auto [x, y] = place(4.0, 11.0);
    poles.push_back({x, y, ground, ground + rng.uniform(3.5, 5.0), rng.uniform(0.12, 0.2)});
  }
  std::vector<Sphere> bushes;
  for (int i = 0; i < spec.bushes; ++i) {
    const auto [x, y] = place(5.0, 11.0);
    const double r = rng.uniform(0.8, 1.4);
    bushes.push_back({x, y, ground + 0.6 * r, r});
  }
  const double wall_az = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const Wall wall{std::cos(wall_az), std::sin(wall_az), rng.uniform(13.0, 18.0), 15.0, ground, ground + 3.5};

  static constexpr double kBaseIntensity[kSynthClasses] = {0.30, 0.65, 0.50, 0.40, 0.20};

  SynthScene scene;
  auto& cloud = scene.cloud;
  const double deg = std::numbers::pi / 180.0;
  const double fov = (spec.fov_up_deg + spec.fov_down_deg) * deg;
  for (int ring = 0; ring < spec.rings; ++ring) {
    const double elev = spec.fov_up_deg * deg - (ring + 0.5) * fov / spec.rings;
    for (int j = 0; j < spec.azimuth_samples; ++j) {
      const double az = -std::numbers::pi + (j + 0.5) * two_pi / spec.azimuth_samples;
      const Vec3 d{std::cos(elev) * std::cos(az), std::cos(elev) * std::sin(az), std::sin(elev)};
      double best = spec.max_range;
      int cls = -1;
      auto consider = [&](double t, SynthClass c) {
        if (t > kMinRange && t < best) {
          best = t;
          cls = static_cast<int>(c);
        }
      };
      if (d.z < 0.0) consider(ground / d.z, SynthClass::kGround);
      consider(hit_wall(wall, d), SynthClass::kWall);
      for (const auto& b : boxes) consider(hit_box(b, d), SynthClass::kVehicle);
      for (const auto& p : poles) consider(hit_cylinder(p, d), SynthClass::kPole);
      for (const auto& s : bushes) consider(hit_sphere(s, d), SynthClass::kVegetation);
      if (cls < 0) continue;
      const double spread = cls == static_cast<int>(SynthClass::kVegetation) ? spec.vegetation_scatter : spec.jitter;
      Point p;
      p.x = static_cast<float>(best * d.x + rng.uniform(-spread, spread));
      p.y = static_cast<float>(best * d.y + rng.uniform(-spread, spread));
      p.z = static_cast<float>(best * d.z + rng.uniform(-spread, spread));
      p.intensity = static_cast<float>(std::clamp(kBaseIntensity[cls] + rng.uniform(-0.1, 0.1), 0.0, 1.0));
      cloud.points.push_back(p);
      cloud.labels.push_back(cls);
      ++scene.class_counts[static_cast<std::size_t>(cls)];
    }
  }
  for (int i = 0; i < spec.outliers; ++i) {
    const double elev = spec.fov_up_deg * deg - rng.uniform() * fov;
    const double az = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double range = rng.uniform(1.0, 0.5 * spec.max_range);
    Point p;
    p.x = static_cast<float>(range * std::cos(elev) * std::cos(az));
    p.y = static_cast<float>(range * std::cos(elev) * std::sin(az));
    p.z = static_cast<float>(range * std::sin(elev));
    p.intensity = static_cast<float>(rng.uniform());
    cloud.points.push_back(p);
    cloud.labels.push_back(kIgnoreLabel);
    ++scene.class_counts[kSynthClasses];
  }
  return scene;
}

std::uint64_t cloud_digest(const PointCloud& cloud) {
  std::uint64_t h = 14695981039346656037ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : cloud.points) {
    const float v[4] = {p.x, p.y, p.z, p.intensity};
    mix(v, sizeof(v));
  }
  mix(cloud.labels.data(), cloud.labels.size() * sizeof(std::int32_t));
  return h;
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentationSpec AugmentationSpec::identity() {
  AugmentationSpec spec;
  spec.rotation_max = 0.0;
  spec.scale_min = 1.0;
  spec.scale_max = 1.0;
  spec.flip_x_prob = 0.0;
  spec.flip_y_prob = 0.0;
  spec.noise_sigma = 0.0;
  return spec;
}

void AugmentationSpec::validate() const {
  if (!(scale_min > 0.0 && scale_max < 2.0 && scale_min <= scale_max)) {
    throw std::invalid_argument("augmentation scale range must lie inside (0, 2)");
  }
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("augmentation noise sigma must be >= 0");
  if (!(rotation_max >= 0.0)) throw std::invalid_argument("augmentation rotation range must be >= 0");
}

PointCloud apply_transform(const PointCloud& cloud, const Transform& t) {
  PointCloud out = cloud;
  const double c = std::cos(t.angle), s = std::sin(t.angle);
  const bool rotate = t.angle != 0.0;
  for (auto& p : out.points) {
    double x = p.x, y = p.y, z = p.z;
    if (rotate) {
      const double rx = c * x - s * y;
      const double ry = s * x + c * y;
      x = rx;
      y = ry;
    }
    x *= t.scale;
    y *= t.scale;
    z *= t.scale;
    // Adding +0 keeps flipped zeros positive.
    if (t.flip_x) x = -x + 0.0;
    if (t.flip_y) y = -y + 0.0;
    p.x = static_cast<float>(x);
    p.y = static_cast<float>(y);
    p.z = static_cast<float>(z);
  }
  return out;
}

std::pair<PointCloud, Transform> augment(const PointCloud& cloud, const AugmentationSpec& spec, Rng& rng) {
  spec.validate();
  Transform t;
  t.angle = spec.rotation_max > 0.0 ? rng.uniform(-spec.rotation_max, spec.rotation_max) : 0.0;
  t.scale = spec.scale_max > spec.scale_min ? rng.uniform(spec.scale_min, spec.scale_max) : spec.scale_min;
  t.flip_x = spec.flip_x_prob > 0.0 && rng.bernoulli(spec.flip_x_prob);
  t.flip_y = spec.flip_y_prob > 0.0 && rng.bernoulli(spec.flip_y_prob);
  PointCloud out = apply_transform(cloud, t);
  if (spec.noise_sigma > 0.0) {
    for (auto& p : out.points) {
      p.x = static_cast<float>(p.x + spec.noise_sigma * rng.normal());
      p.y = static_cast<float>(p.y + spec.noise_sigma * rng.normal());
      p.z = static_cast<float>(p.z + spec.noise_sigma * rng.normal());
    }
  }
  return {std::move(out), t};
}

std::array<PointCloud, 4> tta_variants(const PointCloud& cloud) {
  Transform fx, fy, fxy;
  fx.flip_x = true;
  fy.flip_y = true;
  fxy.flip_x = fxy.flip_y = true;
  return {cloud, apply_transform(cloud, fx), apply_transform(cloud, fy), apply_transform(cloud, fxy)};
}

}  // namespace cpg
