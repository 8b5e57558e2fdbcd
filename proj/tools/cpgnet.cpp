// cpgnet: train, evaluate and inspect point-grid fusion segmentation models.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "cpg/config.hpp"
#include "cpg/gradcheck.hpp"
#include "cpg/trainer.hpp"

namespace fs = std::filesystem;
using namespace cpg;

namespace {

struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::string scan;
  std::string resume;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool tta = false;
};

RunConfig load_config(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed_set) c.train.seed = o.seed;
  if (!o.out.empty()) c.train.out_dir = o.out;
  return c;
}

int cmd_train(const Options& o) {
  auto config = load_config(o);
  auto data = load_data(config.data);
  std::printf("train scans=%zu eval scans=%zu params=%lld\n", data.train.size(), data.eval.size(),
              static_cast<long long>(CpgModel<float>(config.model, config.train.seed).registry().parameter_count()));
  Trainer trainer(config, std::move(data));
  std::optional<fs::path> resume;
  if (!o.resume.empty()) resume = o.resume;
  const auto result = trainer.run(resume);
  for (const auto& m : result.history) std::printf("%s\n", m.log_line().c_str());
  std::printf("best_miou=%.9g final_miou=%.9g epochs=%d steps=%lld forward_passes=%lld stopped_early=%d\n",
              result.best_miou, result.final_miou, result.epochs_run, static_cast<long long>(result.steps),
              static_cast<long long>(result.forward_passes), result.stopped_early ? 1 : 0);
  std::printf("outputs in %s\n", config.train.out_dir.string().c_str());
  return 0;
}

int cmd_eval(const Options& o) {
  auto config = load_config(o);
  if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  CpgModel<float> model(config.model, config.train.seed);
  load_checkpoint(o.checkpoint, model);
  const auto data = load_data(config.data);
  const auto result = miou(evaluate(model, data.eval, o.tta));
  const auto report = format_report(result, data.eval.labels.class_names);
  std::printf("%stta=%d\nscans=%zu\n", report.c_str(), o.tta ? 1 : 0, data.eval.size());
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    std::ofstream(fs::path(o.out) / "eval_report.txt") << report;
  }
  return 0;
}

PointCloud scan_or_synthetic(const Options& o) {
  if (!o.scan.empty()) return load_scan(o.scan);
  return synth_scene(o.seed).cloud;
}

nlohmann::json coverage_json(const Coverage& c) {
  return {{"points", c.points}, {"in_bev", c.in_bev}, {"in_rv", c.in_rv},
          {"in_both", c.in_both}, {"in_either", c.in_either}, {"empty", c.empty}};
}

GridSpec bev_spec(const Options& o) {
  return o.config.empty() ? CpgConfig::full().bev_spec : load_run_config(o.config).model.bev_spec;
}

GridSpec rv_spec(const Options& o) {
  return o.config.empty() ? CpgConfig::full().rv_spec : load_run_config(o.config).model.rv_spec;
}

/// Occupancy and a per-view scalar (height for BEV, range for RV) scattered with max.
void dump_view(const PointCloud& cloud, const ProjectionIndex& index, const fs::path& dir, const std::string& view,
               const std::string& second_name) {
  std::vector<float> feats;
  feats.reserve(cloud.size() * 2);
  for (std::size_t k = 0; k < cloud.size(); ++k) {
    const auto& p = cloud.points[k];
    feats.push_back(1.0f);
    feats.push_back(index.spec.kind == GridKind::kBev ? p.z : static_cast<float>(index.r[k]));
  }
  Tensor<float> features({static_cast<std::int64_t>(cloud.size()), 2}, std::move(feats));
  const auto grid = p2g_scatter_max(features, index).first;
  write_pgm(dir / (view + "_occupancy.pgm"), grid, 0);
  write_pgm(dir / (view + "_" + second_name + ".pgm"), grid, 1);
}

int cmd_project(const Options& o, bool images) {
  const auto cloud = scan_or_synthetic(o);
  const auto bev = project_bev(cloud, bev_spec(o));
  const auto rv = project_rv(cloud, rv_spec(o));
  const auto coverage = coverage_stats(bev, rv);
  if (images) {
    const fs::path dir = o.out.empty() ? fs::path("projection") : fs::path(o.out);
    fs::create_directories(dir);
    dump_view(cloud, bev, dir, "bev", "max_height");
    dump_view(cloud, rv, dir, "rv", "max_range");
    std::ofstream(dir / "coverage.json") << coverage_json(coverage).dump(2) << "\n";
  }
  std::printf("%s\n", coverage_json(coverage).dump(2).c_str());
  return 0;
}

int cmd_gradcheck(const Options& o) {
  GradcheckOptions options;
  const auto outcomes = run_gradcheck_suite(o.seed, options);
  std::printf("%s", format_gradcheck_table(outcomes, options.tolerance).c_str());
  const bool ok = std::all_of(outcomes.begin(), outcomes.end(), [](const auto& r) { return r.passed; });
  std::printf("%s\n", ok ? "all ops passed" : "gradient check FAILED");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point-grid fusion LiDAR segmentation"};
  app.require_subcommand(1);
  Options o;

  auto seed_option = [&o](CLI::App* cmd) {
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&o](std::uint64_t s) { o.seed = s, o.seed_set = true; }, "random seed");
  };

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", o.config, "run configuration (INI)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", o.out, "output directory (overrides [train] out)");
  train->add_option("--resume", o.resume, "continue from a train_state.bin")->check(CLI::ExistingFile);
  seed_option(train);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", o.config, "run configuration (INI)")->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_flag("--tta", o.tta, "average over the four flip variants");
  eval->add_option("--out", o.out, "directory for eval_report.txt");
  seed_option(eval);

  auto* project = app.add_subcommand("project", "write view images and coverage for one scan");
  auto* coverage = app.add_subcommand("coverage", "print coverage fractions for one scan");
  for (auto* cmd : {project, coverage}) {
    cmd->add_option("--scan", o.scan, "KITTI .bin scan; a synthetic scene when omitted")->check(CLI::ExistingFile);
    cmd->add_option("--config", o.config, "take grid specs from this run configuration")->check(CLI::ExistingFile);
    seed_option(cmd);
  }
  project->add_option("--out", o.out, "image directory (default ./projection)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  seed_option(gradcheck);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*project) return cmd_project(o, true);
    if (*coverage) return cmd_project(o, false);
    if (*gradcheck) return cmd_gradcheck(o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
