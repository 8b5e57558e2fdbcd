#include "cpg/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

namespace cpg {

namespace pt = boost::property_tree;

double OptimConfig::lr_at(int epoch) const {
  return lr * std::pow(lr_decay, static_cast<double>(epoch / decay_every));
}

void RunConfig::validate() const {
  model.validate();
  augment.validate();
  if (optim.lr <= 0 || optim.lr_decay <= 0 || optim.decay_every <= 0) {
    throw ConfigError("optim: lr, lr_decay and decay_every must be positive");
  }
  if (optim.momentum < 0 || optim.momentum >= 1) throw ConfigError("optim: momentum must be in [0, 1)");
  if (train.epochs < 1 || train.batch_size < 1) throw ConfigError("train: epochs and batch_size must be >= 1");
  if (data.source == DataSource::kSynthetic) {
    if (data.scenes < 1 || data.eval_scenes < 0) throw ConfigError("data: scenes must be >= 1");
    if (model.num_classes != kSynthClasses) {
      throw ConfigError("model: synthetic data has " + std::to_string(kSynthClasses) + " classes");
    }
  } else if (data.scan_dir.empty() || data.label_dir.empty() || data.label_map.empty()) {
    throw ConfigError("data: kitti source needs scan_dir, label_dir and label_map");
  }
}

namespace {

const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s{
      {"data",
       {"source", "scenes", "scene_seed", "eval_scenes", "eval_seed", "scan_dir", "label_dir", "eval_scan_dir",
        "eval_label_dir", "label_map", "max_scans"}},
      {"grid",
       {"bev_width", "bev_height", "bev_x_min", "bev_y_min", "bev_x_max", "bev_y_max", "rv_width", "rv_height",
        "rv_fov_up_deg", "rv_fov_down_deg"}},
      {"model",
       {"preset", "num_blocks", "block_in", "block_out", "mlp_channels", "stage_channels", "num_classes",
        "point_branch", "point_fusion", "ddb", "afpn", "channel_gate"}},
      {"optim", {"lr", "lr_decay", "decay_every", "momentum"}},
      {"loss", {"consistency", "class_weights"}},
      {"augment", {"rotation_max_deg", "scale_min", "scale_max", "flip_x_prob", "flip_y_prob", "noise_sigma"}},
      {"train", {"epochs", "batch_size", "seed", "stop_miou", "eval_tta", "out"}},
  };
  return s;
}

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  /// Leaves `out` untouched and returns false when the key is absent.
  template <typename V>
  bool get(const std::string& section, const std::string& key, V& out) const {
    auto value = raw(section, key);
    if (!value) return false;
    if constexpr (std::is_same_v<V, bool>) {
      if (*value == "true" || *value == "1" || *value == "yes") {
        out = true;
      } else if (*value == "false" || *value == "0" || *value == "no") {
        out = false;
      } else {
        fail(section, key, *value);
      }
    } else if constexpr (std::is_same_v<V, std::string> || std::is_same_v<V, std::filesystem::path>) {
      out = *value;
    } else {
      std::istringstream is(*value);
      V parsed{};
      if (!(is >> parsed) || !(is >> std::ws).eof()) fail(section, key, *value);
      out = parsed;
    }
    return true;
  }

  void get_list(const std::string& section, const std::string& key, std::vector<int>& out) const {
    auto value = raw(section, key);
    if (!value) return;
    std::vector<int> parsed;
    std::istringstream is(*value);
    std::string item;
    while (std::getline(is, item, ',')) {
      std::istringstream one(item);
      int v = 0;
      if (!(one >> v) || !(one >> std::ws).eof()) fail(section, key, *value);
      parsed.push_back(v);
    }
    out = std::move(parsed);
  }

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    auto sec = tree_.get_child_optional(section);
    if (!sec) return std::nullopt;
    auto v = sec->get_optional<std::string>(pt::ptree::path_type(key, '\0'));
    if (!v) return std::nullopt;
    return *v;
  }

 private:
  [[noreturn]] static void fail(const std::string& section, const std::string& key, const std::string& value) {
    throw ConfigError("[" + section + "] " + key + ": cannot parse '" + value + "'");
  }
  const pt::ptree& tree_;
};

template <std::size_t N>
void get_array(const Reader& r, const std::string& section, const std::string& key, std::array<int, N>& out) {
  std::vector<int> values(out.begin(), out.end());
  r.get_list(section, key, values);
  if (values.size() != N) throw ConfigError("[" + section + "] " + key + ": expected " + std::to_string(N) + " values");
  std::copy(values.begin(), values.end(), out.begin());
}

double to_radians(double degrees) { return degrees * (std::numbers::pi / 180.0); }

/// Shortest text that parses back to exactly `v`.
std::string num(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Shortest degree value whose conversion reproduces `radians` exactly.
std::string angle(double radians) {
  char buf[40];
  for (int decimals = 0; decimals <= 17; ++decimals) {
    std::snprintf(buf, sizeof buf, "%.*f", decimals, radians * (180.0 / std::numbers::pi));
    if (to_radians(std::strtod(buf, nullptr)) == radians) return buf;
  }
  return num(radians * (180.0 / std::numbers::pi));
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    auto it = schema().find(section);
    if (it == schema().end()) throw ConfigError("unknown config section [" + section + "]");
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' outside any section");
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
    }
  }

  Reader r(tree);
  RunConfig c;
  std::string preset = "desk";
  r.get("model", "preset", preset);
  if (preset == "full") {
    c.model = CpgConfig::full();
  } else if (preset != "desk") {
    throw ConfigError("[model] preset must be desk or full, got '" + preset + "'");
  }

  std::string source = "synthetic";
  r.get("data", "source", source);
  if (source == "kitti") {
    c.data.source = DataSource::kKitti;
  } else if (source != "synthetic") {
    throw ConfigError("[data] source must be synthetic or kitti, got '" + source + "'");
  }
  r.get("data", "scenes", c.data.scenes);
  r.get("data", "scene_seed", c.data.scene_seed);
  r.get("data", "eval_scenes", c.data.eval_scenes);
  r.get("data", "eval_seed", c.data.eval_seed);
  r.get("data", "scan_dir", c.data.scan_dir);
  r.get("data", "label_dir", c.data.label_dir);
  r.get("data", "eval_scan_dir", c.data.eval_scan_dir);
  r.get("data", "eval_label_dir", c.data.eval_label_dir);
  r.get("data", "label_map", c.data.label_map);
  r.get("data", "max_scans", c.data.max_scans);

  auto& bev = c.model.bev_spec;
  auto& rv = c.model.rv_spec;
  r.get("grid", "bev_width", bev.width);
  r.get("grid", "bev_height", bev.height);
  r.get("grid", "bev_x_min", bev.x_min);
  r.get("grid", "bev_y_min", bev.y_min);
  r.get("grid", "bev_x_max", bev.x_max);
  r.get("grid", "bev_y_max", bev.y_max);
  r.get("grid", "rv_width", rv.width);
  r.get("grid", "rv_height", rv.height);
  // Angles are only converted when given, so untouched defaults stay bit-exact.
  double degrees = 0;
  if (r.get("grid", "rv_fov_up_deg", degrees)) rv.fov_up = to_radians(degrees);
  if (r.get("grid", "rv_fov_down_deg", degrees)) rv.fov_down = to_radians(degrees);

  auto& m = c.model;
  r.get("model", "num_blocks", m.num_blocks);
  r.get_list("model", "block_in", m.block_in_channels);
  r.get_list("model", "block_out", m.block_out_channels);
  r.get("model", "mlp_channels", m.mlp_channels);
  get_array(r, "model", "stage_channels", m.stage_channels);
  r.get("model", "num_classes", m.num_classes);
  r.get("model", "point_branch", m.use_point_branch);
  r.get("model", "point_fusion", m.use_point_fusion);
  r.get("model", "ddb", m.use_ddb);
  r.get("model", "afpn", m.use_afpn);
  r.get("model", "channel_gate", m.per_channel_gate);

  r.get("optim", "lr", c.optim.lr);
  r.get("optim", "lr_decay", c.optim.lr_decay);
  r.get("optim", "decay_every", c.optim.decay_every);
  r.get("optim", "momentum", c.optim.momentum);

  r.get("loss", "consistency", c.loss.consistency);
  std::string weighting = "frequency";
  r.get("loss", "class_weights", weighting);
  if (weighting == "uniform") {
    c.loss.weighting = ClassWeighting::kUniform;
  } else if (weighting != "frequency") {
    throw ConfigError("[loss] class_weights must be frequency or uniform, got '" + weighting + "'");
  }

  if (r.get("augment", "rotation_max_deg", degrees)) c.augment.rotation_max = to_radians(degrees);
  r.get("augment", "scale_min", c.augment.scale_min);
  r.get("augment", "scale_max", c.augment.scale_max);
  r.get("augment", "flip_x_prob", c.augment.flip_x_prob);
  r.get("augment", "flip_y_prob", c.augment.flip_y_prob);
  r.get("augment", "noise_sigma", c.augment.noise_sigma);

  r.get("train", "epochs", c.train.epochs);
  r.get("train", "batch_size", c.train.batch_size);
  r.get("train", "seed", c.train.seed);
  r.get("train", "stop_miou", c.train.stop_miou);
  r.get("train", "eval_tta", c.train.eval_tta);
  r.get("train", "out", c.train.out_dir);

  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_ini(const RunConfig& c) {
  std::ostringstream os;
  auto list = [](const auto& values) {
    std::string s;
    for (std::size_t i = 0; i < values.size(); ++i) s += (i ? "," : "") + std::to_string(values[i]);
    return s;
  };
  const auto& m = c.model;
  os << "[data]\n"
     << "source = " << (c.data.source == DataSource::kKitti ? "kitti" : "synthetic") << "\n"
     << "scenes = " << c.data.scenes << "\nscene_seed = " << c.data.scene_seed << "\n"
     << "eval_scenes = " << c.data.eval_scenes << "\neval_seed = " << c.data.eval_seed << "\n";
  auto path = [&os](const char* key, const std::filesystem::path& p) {
    if (!p.empty()) os << key << " = " << p.string() << "\n";
  };
  path("scan_dir", c.data.scan_dir);
  path("label_dir", c.data.label_dir);
  path("eval_scan_dir", c.data.eval_scan_dir);
  path("eval_label_dir", c.data.eval_label_dir);
  path("label_map", c.data.label_map);
  os << "max_scans = " << c.data.max_scans << "\n\n";

  os << "[grid]\n"
     << "bev_width = " << m.bev_spec.width << "\nbev_height = " << m.bev_spec.height << "\n"
     << "bev_x_min = " << num(m.bev_spec.x_min) << "\nbev_y_min = " << num(m.bev_spec.y_min) << "\n"
     << "bev_x_max = " << num(m.bev_spec.x_max) << "\nbev_y_max = " << num(m.bev_spec.y_max) << "\n"
     << "rv_width = " << m.rv_spec.width << "\nrv_height = " << m.rv_spec.height << "\n"
     << "rv_fov_up_deg = " << angle(m.rv_spec.fov_up) << "\nrv_fov_down_deg = " << angle(m.rv_spec.fov_down) << "\n\n";

  os << "[model]\n"
     << "num_blocks = " << m.num_blocks << "\nblock_in = " << list(m.block_in_channels) << "\n"
     << "block_out = " << list(m.block_out_channels) << "\nmlp_channels = " << m.mlp_channels << "\n"
     << "stage_channels = " << list(m.stage_channels) << "\nnum_classes = " << m.num_classes << "\n"
     << std::boolalpha << "point_branch = " << m.use_point_branch << "\npoint_fusion = " << m.use_point_fusion
     << "\nddb = " << m.use_ddb << "\nafpn = " << m.use_afpn << "\nchannel_gate = " << m.per_channel_gate << "\n\n";

  os << "[optim]\n"
     << "lr = " << num(c.optim.lr) << "\nlr_decay = " << num(c.optim.lr_decay) << "\ndecay_every = " << c.optim.decay_every
     << "\nmomentum = " << num(c.optim.momentum) << "\n\n";

  os << "[loss]\n"
     << "consistency = " << c.loss.consistency << "\n"
     << "class_weights = " << (c.loss.weighting == ClassWeighting::kUniform ? "uniform" : "frequency") << "\n\n";

  os << "[augment]\n"
     << "rotation_max_deg = " << angle(c.augment.rotation_max) << "\nscale_min = " << num(c.augment.scale_min)
     << "\nscale_max = " << num(c.augment.scale_max) << "\nflip_x_prob = " << num(c.augment.flip_x_prob)
     << "\nflip_y_prob = " << num(c.augment.flip_y_prob) << "\nnoise_sigma = " << num(c.augment.noise_sigma) << "\n\n";

  os << "[train]\n"
     << "epochs = " << c.train.epochs << "\nbatch_size = " << c.train.batch_size << "\nseed = " << c.train.seed
     << "\nstop_miou = " << num(c.train.stop_miou) << "\neval_tta = " << c.train.eval_tta
     << "\nout = " << c.train.out_dir.string() << "\n";
  return os.str();
}

}  // namespace cpg
