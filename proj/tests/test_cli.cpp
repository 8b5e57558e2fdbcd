#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cpg/config.hpp"
#include "cpg/gradcheck.hpp"
#include "cpg/trainer.hpp"

using namespace cpg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "cpg_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// A small model and corpus so that a few epochs take seconds.
RunConfig tiny_run(const fs::path& out) {
  RunConfig c;
  c.model.block_in_channels = {9, 8};
  c.model.block_out_channels = {8, 8};
  c.model.mlp_channels = 8;
  c.model.stage_channels = {8, 8, 8, 8, 8, 8, 8, 8};
  c.model.bev_spec = GridSpec::bev(32, 32, -25, -25, 25, 25);
  c.model.rv_spec = GridSpec::rv_degrees(64, 8, 3.0, 25.0);
  c.data.scenes = 3;
  c.train.epochs = 3;
  c.train.out_dir = out;
  c.optim.decay_every = 2;
  return c;
}

DataSplits tiny_data(int scenes, std::size_t points = 1500) {
  DataSplits d;
  d.train = synthetic_dataset(scenes, 1000);
  for (auto& s : d.train.scans) {
    s.points.resize(points);
    s.labels.resize(points);
  }
  d.eval = d.train;
  return d;
}

}  // namespace

TEST_CASE("shipped desk config parses and round-trips") {
  const auto cfg = load_run_config(fs::path(CPG_SOURCE_DIR) / "config" / "desk.ini");
  CHECK(cfg.model.digest() == CpgConfig::desk().digest());
  CHECK(cfg.data.scenes == 20);
  CHECK(cfg.optim.lr == 0.02);
  CHECK(cfg.optim.momentum == 0.9);
  CHECK(cfg.loss.consistency);
  CHECK(cfg.train.epochs == 200);
  const auto again = parse_run_config(to_ini(cfg));
  CHECK(to_ini(again) == to_ini(cfg));
  CHECK(again.model.digest() == cfg.model.digest());
}

TEST_CASE("shipped full-scale config matches the preset") {
  const auto cfg = load_run_config(fs::path(CPG_SOURCE_DIR) / "config" / "full.ini");
  CHECK(cfg.model.digest() == CpgConfig::full().digest());
  CHECK(cfg.data.source == DataSource::kKitti);
  CHECK(cfg.optim.lr == 0.02);
  CHECK(cfg.optim.lr_decay == 0.1);
  CHECK(cfg.optim.decay_every == 6);
  CHECK(cfg.train.epochs == 30);
  CHECK(to_ini(parse_run_config(to_ini(cfg))) == to_ini(cfg));
}

TEST_CASE("config parsing rejects unknown keys and bad values") {
  CHECK_THROWS_WITH_AS(parse_run_config("[optim]\nlearning_rate = 0.01\n"), doctest::Contains("unknown key 'learning_rate'"),
                       ConfigError);
  CHECK_THROWS_AS(parse_run_config("[optimizer]\nlr = 0.01\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[optim]\nlr = fast\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[train]\nbatch_size = 0\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("[model]\npreset = huge\n"), ConfigError);

  CHECK_THROWS_AS(parse_run_config("[model]\npreset = full\n"), ConfigError);  // 19 classes on synthetic data
  const auto full = parse_run_config(
      "[data]\nsource = kitti\nscan_dir = s\nlabel_dir = l\nlabel_map = m.ini\n[model]\npreset = full\n");
  CHECK(full.model.digest() == CpgConfig::full().digest());
  const auto ablated = parse_run_config("[model]\npoint_fusion = false\nddb = false\n[loss]\nconsistency = false\n");
  CHECK_FALSE(ablated.model.use_point_fusion);
  CHECK_FALSE(ablated.model.use_ddb);
  CHECK(ablated.model.use_afpn);
  CHECK_FALSE(ablated.loss.consistency);
  const auto grid = parse_run_config("[grid]\nbev_width = 32\nbev_height = 48\nrv_fov_up_deg = 2\n");
  CHECK(grid.model.bev_spec.width == 32);
  CHECK(grid.model.bev_spec.height == 48);
  CHECK(grid.model.rv_spec.fov_up == doctest::Approx(2.0 * M_PI / 180));
  CHECK(parse_run_config(to_ini(grid)).model.digest() == grid.model.digest());
  CHECK(parse_run_config(to_ini(full)).model.digest() == full.model.digest());
}

TEST_CASE("learning rate schedule") {
  OptimConfig o;
  CHECK(o.lr_at(0) == 0.02);
  CHECK(o.lr_at(5) == 0.02);
  CHECK(o.lr_at(6) == doctest::Approx(0.002).epsilon(1e-15));
  CHECK(o.lr_at(12) == doctest::Approx(0.0002).epsilon(1e-15));
}

TEST_CASE("momentum SGD update") {
  ParamRegistry<float> reg;
  auto p = reg.add_param("p", Tensor<float>({2}, {1.f, 2.f}, true));
  std::vector<Tensor<float>> momentum;
  p.mutable_grad()[0] = 1.f;
  p.mutable_grad()[1] = -2.f;
  sgd_step(reg, momentum, 0.1, 0.9);
  CHECK(p.data()[0] == doctest::Approx(0.9f));
  CHECK(p.data()[1] == doctest::Approx(2.2f));
  sgd_step(reg, momentum, 0.1, 0.9);  // same gradient again: v = 0.9 v + g
  CHECK(p.data()[0] == doctest::Approx(0.9f - 0.1f * 1.9f));
}

TEST_CASE("training is reproducible and resumes exactly") {
  const auto a = scratch("run_a"), b = scratch("run_b"), c = scratch("run_c");
  Trainer ta(tiny_run(a), tiny_data(3));
  const auto ra = ta.run();
  Trainer tb(tiny_run(b), tiny_data(3));
  tb.run();
  CHECK(ra.epochs_run == 3);
  CHECK(ra.steps == 9);
  CHECK(slurp(a / "last.ckpt") == slurp(b / "last.ckpt"));
  CHECK(slurp(a / "metrics.log") == slurp(b / "metrics.log"));
  CHECK(slurp(a / "metrics.log").find("epoch=2 step=9 lr=0.002 ") != std::string::npos);

  // Two epochs, then a fresh process-equivalent continues to the third.
  auto short_cfg = tiny_run(c);
  short_cfg.train.epochs = 2;
  Trainer(short_cfg, tiny_data(3)).run();
  Trainer resumed(tiny_run(c), tiny_data(3));
  const auto rc = resumed.run(c / "train_state.bin");
  CHECK(rc.epochs_run == 3);
  CHECK(slurp(a / "last.ckpt") == slurp(c / "last.ckpt"));
  CHECK(slurp(a / "metrics.log") == slurp(c / "metrics.log"));

  // The reported training mIoU is reproduced by a separate evaluation, in memory and from disk.
  const double reported = ra.final_miou;
  CHECK(miou(evaluate(ta.model(), tiny_data(3).eval, false)).mean == doctest::Approx(reported).epsilon(1e-6));
  CpgModel<float> loaded(tiny_run(a).model, 77);
  load_checkpoint(a / "last.ckpt", loaded);
  CHECK(evaluate(loaded, tiny_data(3).eval, false) == evaluate(ta.model(), tiny_data(3).eval, false));
}

TEST_CASE("disabling the consistency term removes the second forward pass") {
  auto on = tiny_run("");
  on.train.epochs = 1;
  auto off = on;
  off.loss.consistency = false;
  Trainer t_on(on, tiny_data(2, 500));
  Trainer t_off(off, tiny_data(2, 500));
  CHECK(t_on.run().forward_passes == 4);
  const auto r = t_off.run();
  CHECK(r.forward_passes == 2);
  CHECK(r.history[0].consistency == 0.0);
}

TEST_CASE("gradient accumulation over a batch") {
  auto cfg = tiny_run("");
  cfg.train.epochs = 1;
  cfg.train.batch_size = 2;
  Trainer t(cfg, tiny_data(3, 400));
  const auto r = t.run();
  CHECK(r.steps == 2);
}

TEST_CASE("test-time augmentation on a flip-invariant scene") {
  Trainer t(tiny_run(""), tiny_data(1, 10));
  // Points on the vertical axis are fixed by both flips.
  PointCloud axis;
  for (int i = 0; i < 12; ++i) {
    axis.points.push_back({0.f, 0.f, -1.5f + 0.25f * static_cast<float>(i), 0.1f * static_cast<float>(i % 3)});
    axis.labels.push_back(i % 3);
  }
  Dataset d;
  d.scans = {axis};
  d.names = {"axis"};
  CHECK(evaluate(t.model(), d, true) == evaluate(t.model(), d, false));
  CHECK(miou(evaluate(t.model(), d, true)).mean == miou(evaluate(t.model(), d, false)).mean);

  // Mirror-symmetric scene: averaged predictions agree across each mirror orbit.
  PointCloud sym;
  const auto base = synth_scene(5).cloud;
  for (std::size_t k = 0; k < 200; ++k) {
    const auto p = base.points[k * 7];
    for (int fx = 0; fx < 2; ++fx)
      for (int fy = 0; fy < 2; ++fy) sym.points.push_back({fx ? -p.x : p.x, fy ? -p.y : p.y, p.z, p.intensity});
  }
  const auto probs = predict_probs(t.model(), sym, true);
  const auto c = static_cast<std::size_t>(t.model().config().num_classes);
  double worst = 0;
  for (std::size_t k = 0; k < 200; ++k)
    for (std::size_t m = 1; m < 4; ++m)
      for (std::size_t j = 0; j < c; ++j) {
        worst = std::max(worst, static_cast<double>(std::abs(probs.data()[(4 * k) * c + j] - probs.data()[(4 * k + m) * c + j])));
      }
  CHECK(worst < 1e-6);
}

TEST_CASE("non-finite loss aborts with a dump of the batch") {
  const auto out = scratch("nan");
  auto cfg = tiny_run(out);
  Trainer t(cfg, tiny_data(1, 300));
  t.model().head_bias.mutable_data()[0] = std::nanf("");
  CHECK_THROWS_WITH_AS(t.step({0}, 0.01), doctest::Contains("non-finite loss on scan"), TrainingError);
  CHECK(fs::exists(out / "nan_batch" / "synth_1000.bin"));
  CHECK(fs::exists(out / "nan_batch" / "synth_1000.augmented.bin"));
}

TEST_CASE("SemanticKITTI directory layout") {
  const auto root = scratch("kitti");
  fs::create_directories(root / "velodyne");
  fs::create_directories(root / "labels");
  const auto map_path = root / "map.ini";
  std::ofstream(map_path) << "[classes]\n0 = car\n1 = road\n[learning_map]\n0 = ignore\n10 = 0\n40 = 1\n";
  PointCloud cloud;
  cloud.points = {{1, 2, 0, 0.5f}, {3, -1, -1, 0.2f}, {5, 5, 0, 0.f}};
  for (const char* stem : {"000001", "000000"}) {
    write_scan(root / "velodyne" / (std::string(stem) + ".bin"), cloud);
    write_raw_labels(root / "labels" / (std::string(stem) + ".label"), {10u, 40u | (3u << 16), 0u});
  }
  DataConfig dc;
  dc.source = DataSource::kKitti;
  dc.scan_dir = root / "velodyne";
  dc.label_dir = root / "labels";
  dc.label_map = map_path;
  const auto splits = load_data(dc);
  REQUIRE(splits.train.size() == 2);
  CHECK(splits.train.names.front() == "000000");
  CHECK(splits.train.scans[0].labels == std::vector<std::int32_t>{0, 1, kIgnoreLabel});
  CHECK(splits.eval.size() == 2);
  const auto freq = splits.train.class_frequency();
  CHECK(freq == std::vector<double>{0.5, 0.5});

  fs::remove(root / "labels" / "000001.label");
  CHECK_THROWS(load_data(dc));
}

TEST_CASE("gradient checker catches a corrupted backward") {
  // y = x^2 with the correct rule and with a doubled one.
  auto square = [](bool corrupt) {
    return [corrupt](const std::vector<Tensor<double>>& in) {
      const auto& x = in[0];
      std::vector<double> out(x.data().begin(), x.data().end());
      for (auto& v : out) v *= v;
      return sum(make_result<double>(x.shape(), std::move(out), {x}, "square",
                                     [x, corrupt](std::span<const double> g) {
                                       auto sink = grad_sink(x);
                                       for (std::size_t i = 0; i < g.size(); ++i) {
                                         sink[i] += g[i] * 2.0 * x.data()[i] * (corrupt ? 2.0 : 1.0);
                                       }
                                     }));
    };
  };
  Rng rng(1);
  Tensor<double> x({5}, {0.3, -1.2, 0.8, 2.0, -0.4}, true);
  CHECK(check_gradients("square", square(false), {x}, rng).passed);
  const auto bad = check_gradients("square_corrupt", square(true), {x}, rng);
  CHECK_FALSE(bad.passed);
  CHECK(bad.max_rel_error > 0.4);
  const auto table = format_gradcheck_table({bad}, 1e-4);
  CHECK(table.find("square_corrupt") != std::string::npos);
  CHECK(table.find("FAIL") != std::string::npos);
}
