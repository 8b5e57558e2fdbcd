#include "cpg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "cpg/losses.hpp"
#include "cpg/network.hpp"
#include "cpg/ops.hpp"
#include "cpg/projection.hpp"

namespace cpg {

namespace {

using TD = Tensor<double>;

double reduce(const TD& out, const std::vector<double>& weights) {
  double s = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += out.data()[i] * weights[i];
  return s;
}

}  // namespace

GradcheckOutcome check_gradients(const std::string& name, const GradFn& f, const std::vector<TD>& inputs, Rng& rng,
                                 const GradcheckOptions& options) {
  GradcheckOutcome result;
  result.name = name;
  for (auto t : inputs) t.zero_grad();

  TD out = f(inputs);
  std::vector<double> weights(static_cast<std::size_t>(out.numel()));
  for (auto& w : weights) w = rng.uniform(0.5, 1.5);
  TD scalar = out.numel() == 1 && weights.size() == 1 ? scale(out, weights[0])
                                                       : sum(mul(out, TD(out.shape(), weights)));
  scalar.backward();

  for (auto t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end()) : std::vector<double>(t.numel(), 0.0);
    std::vector<std::size_t> coords(analytic.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > options.max_coords) {
      rng.shuffle(coords);
      coords.resize(options.max_coords);
    }
    auto data = t.mutable_data();
    auto eval_at = [&](std::size_t k, double value) {
      NoGradGuard no_grad;
      data[k] = value;
      return reduce(f(inputs), weights);
    };
    auto rel_error = [&](double a, double n) {
      return std::abs(a - n) / std::max({std::abs(a), std::abs(n), options.floor});
    };
    for (auto k : coords) {
      const double saved = data[k];
      const double h = options.step;
      const double plus = eval_at(k, saved + h);
      const double minus = eval_at(k, saved - h);
      double err = rel_error(analytic[k], (plus - minus) / (2 * h));
      if (err >= options.tolerance) {
        // A kink (ReLU at zero, a max switching winners) inside [x-h, x+h] makes
        // the one-sided slopes disagree; such a coordinate is excluded when a
        // step far inside the smooth piece agrees with the analytic value.
        const double center = eval_at(k, saved);
        const double right = (plus - center) / h;
        const double left = (center - minus) / h;
        // h/100 alone can drown in roundoff on a large loss, so h/10 goes first.
        bool fine_ok = false;
        for (const double fine : {h * 1e-1, h * 1e-2}) {
          const double fine_numeric = (eval_at(k, saved + fine) - eval_at(k, saved - fine)) / (2 * fine);
          fine_ok = fine_ok || rel_error(analytic[k], fine_numeric) < options.tolerance;
        }
        if (rel_error(right, left) > options.tolerance && fine_ok) {
          ++result.coords_skipped;
          err = 0;
        }
      }
      data[k] = saved;
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.coords_checked;
    }
  }
  for (auto t : inputs) t.zero_grad();
  result.passed = std::isfinite(result.max_rel_error) && result.max_rel_error < options.tolerance &&
                  result.coords_skipped * 10 <= result.coords_checked;
  return result;
}

namespace {

TD random(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return TD(std::move(shape), std::move(data), true);
}

/// Values bounded away from zero so ReLU kinks are never crossed.
TD away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return TD(std::move(shape), std::move(data), true);
}

TD constant(Rng& rng, Shape shape, double lo, double hi) {
  auto t = random(rng, std::move(shape), lo, hi);
  return t.detach();
}

BatchNorm<double> trainable_bn(Rng& rng, std::int64_t channels) {
  auto bn = BatchNorm<double>::make(channels);
  bn.gamma = random(rng, {channels}, 0.5, 1.5);
  bn.beta = random(rng, {channels}, -0.5, 0.5);
  bn.running_mean = constant(rng, {channels}, -0.2, 0.2);
  bn.running_var = constant(rng, {channels}, 0.5, 1.5);
  return bn;
}

PointCloud random_cloud(Rng& rng, std::size_t n, double extent) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    Point p;
    p.x = static_cast<float>(rng.uniform(-extent, extent));
    p.y = static_cast<float>(rng.uniform(-extent, extent));
    p.z = static_cast<float>(rng.uniform(-1.5, 0.5));
    p.intensity = static_cast<float>(rng.uniform());
    c.points.push_back(p);
    c.labels.push_back(static_cast<std::int32_t>(rng.below(3)));
  }
  return c;
}

std::vector<std::int32_t> random_labels(Rng& rng, std::size_t n, int classes, bool with_ignore) {
  std::vector<std::int32_t> labels(n);
  for (auto& l : labels) {
    l = with_ignore && rng.bernoulli(0.2) ? kIgnoreLabel : static_cast<std::int32_t>(rng.below(classes));
  }
  return labels;
}

std::vector<TD> bn_inputs(const BatchNorm<double>& bn) { return {bn.gamma, bn.beta}; }

template <typename... Lists>
std::vector<TD> join(Lists... lists) {
  std::vector<TD> all;
  (all.insert(all.end(), lists.begin(), lists.end()), ...);
  return all;
}

/// Parameters of a registry as gradient-check inputs.
std::vector<TD> registry_inputs(const ParamRegistry<double>& reg) {
  std::vector<TD> out;
  for (const auto& [name, t] : reg.params()) out.push_back(t);
  return out;
}

CpgConfig tiny_config() {
  CpgConfig c;
  c.num_blocks = 2;
  c.block_in_channels = {kPointInputChannels, 5};
  c.block_out_channels = {5, 4};
  c.mlp_channels = 4;
  c.stage_channels = {4, 3, 4, 4, 4, 4, 3, 3};
  // Deepest levels stay at least 2x2 so normalization never sees a single sample.
  c.bev_spec = GridSpec::bev(16, 16, -8.0, -8.0, 8.0, 8.0);
  c.rv_spec = GridSpec::rv_degrees(32, 4, 3.0, 25.0);
  c.num_classes = 3;
  return c;
}

}  // namespace

std::vector<GradcheckOutcome> run_gradcheck_suite(std::uint64_t seed, const GradcheckOptions& options) {
  Rng rng(seed);
  std::vector<GradcheckOutcome> out;
  auto run = [&](const std::string& name, const GradFn& f, const std::vector<TD>& inputs) {
    out.push_back(check_gradients(name, f, inputs, rng, options));
  };

  // Convolution variants.
  struct ConvCase {
    const char* name;
    int k;
    Conv2dOptions opt;
    bool bias;
  };
  for (const auto& cc : {ConvCase{"conv2d_3x3_same", 3, {1, 1, 1, 1}, true},
                         ConvCase{"conv2d_3x3_stride2", 3, {2, 2, 1, 1}, false},
                         ConvCase{"conv2d_3x3_stride_w", 3, {1, 2, 1, 1}, false},
                         ConvCase{"conv2d_1x1", 1, {1, 1, 0, 0}, true}}) {
    auto x = random(rng, {6, 8, 3});
    auto w = random(rng, {cc.k, cc.k, 3, 4});
    auto b = cc.bias ? random(rng, {4}) : TD();
    const auto opt = cc.opt;
    std::vector<TD> in{x, w};
    if (cc.bias) in.push_back(b);
    run(cc.name, [=](const std::vector<TD>&) { return conv2d(x, w, b, opt); }, in);
  }

  {
    auto x = random(rng, {4, 6, 3});
    run("maxpool2d_2x2", [=](const std::vector<TD>&) { return maxpool2d(x, 2, 2); }, {x});
    run("maxpool2d_1x2", [=](const std::vector<TD>&) { return maxpool2d(x, 1, 2); }, {x});
  }
  {
    auto x = random(rng, {7, 5});
    auto w = random(rng, {5, 3});
    auto b = random(rng, {3});
    run("linear", [=](const std::vector<TD>&) { return linear(x, w, b); }, {x, w, b});
  }
  {
    auto x = away_from_zero(rng, {5, 4});
    run("relu", [=](const std::vector<TD>&) { return relu(x); }, {x});
    auto s = random(rng, {5, 4}, -3, 3);
    run("sigmoid", [=](const std::vector<TD>&) { return sigmoid(s); }, {s});
    auto a = random(rng, {5, 4});
    auto b = random(rng, {5, 4});
    run("add", [=](const std::vector<TD>&) { return add(a, b); }, {a, b});
    run("sub", [=](const std::vector<TD>&) { return sub(a, b); }, {a, b});
    run("mul", [=](const std::vector<TD>&) { return mul(a, b); }, {a, b});
    run("scale", [=](const std::vector<TD>&) { return scale(a, 1.7); }, {a});
    run("sum", [=](const std::vector<TD>&) { return sum(a); }, {a});
    run("mean", [=](const std::vector<TD>&) { return mean(a); }, {a});
  }
  {
    auto a = random(rng, {3, 4, 2});
    auto b = random(rng, {3, 4, 3});
    auto c = random(rng, {2, 4, 2});
    auto d = random(rng, {3, 2, 2});
    run("concat_channels", [=](const std::vector<TD>&) { return concat<double>({a, b}, 2); }, {a, b});
    run("concat_rows", [=](const std::vector<TD>&) { return concat<double>({a, c}, 0); }, {a, c});
    run("concat_cols", [=](const std::vector<TD>&) { return concat<double>({a, d}, 1); }, {a, d});
  }
  {
    auto x = random(rng, {3, 4, 2});
    run("upsample_2x2", [=](const std::vector<TD>&) { return upsample(x, 2, 2); }, {x});
    run("upsample_1x2", [=](const std::vector<TD>&) { return upsample(x, 1, 2); }, {x});
    run("pad2d", [=](const std::vector<TD>&) { return pad2d(x, 2, 1); }, {x});
    run("crop2d", [=](const std::vector<TD>&) { return crop2d(x, 2, 3); }, {x});
  }
  {
    auto g1 = random(rng, {3, 4, 1}, 0.05, 0.95);
    auto gc = random(rng, {3, 4, 2}, 0.05, 0.95);
    auto a = random(rng, {3, 4, 2});
    auto b = random(rng, {3, 4, 2});
    run("gate_blend_shared", [=](const std::vector<TD>&) { return gate_blend(g1, a, b); }, {g1, a, b});
    run("gate_blend_per_channel", [=](const std::vector<TD>&) { return gate_blend(gc, a, b); }, {gc, a, b});
  }
  {
    auto x = random(rng, {5, 4}, -2, 2);
    run("softmax_rows", [=](const std::vector<TD>&) { return softmax(x, 1); }, {x});
    run("softmax_cols", [=](const std::vector<TD>&) { return softmax(x, 0); }, {x});
  }
  {
    auto x = random(rng, {3, 4, 3}, -2, 2);
    auto bn = trainable_bn(rng, 3);
    run("batchnorm_train", [=](const std::vector<TD>&) mutable { return batchnorm(x, bn, true); },
        join(std::vector<TD>{x}, bn_inputs(bn)));
    run("batchnorm_eval", [=](const std::vector<TD>&) mutable { return batchnorm(x, bn, false); },
        join(std::vector<TD>{x}, bn_inputs(bn)));
  }

  // Point/grid transfer. Several points share cells so the max actually selects.
  {
    const auto cloud = random_cloud(rng, 40, 4.0);
    const auto bev = project_bev(cloud, GridSpec::bev(4, 4, -4.0, -4.0, 4.0, 4.0));
    auto feats = random(rng, {40, 3});
    run("p2g_scatter_max", [=](const std::vector<TD>&) { return p2g_scatter_max(feats, bev).first; }, {feats});
    auto grid = random(rng, {4, 4, 3});
    run("g2p_bilinear", [=](const std::vector<TD>&) { return g2p_bilinear(grid, bev); }, {grid});
    const auto rv = project_rv(cloud, GridSpec::rv_degrees(8, 4, 3.0, 25.0));
    auto rgrid = random(rng, {4, 8, 3});
    run("g2p_bilinear_rv", [=](const std::vector<TD>&) { return g2p_bilinear(rgrid, rv); }, {rgrid});
  }

  // Losses.
  {
    auto logits = random(rng, {12, 4}, -2, 2);
    const auto labels = random_labels(rng, 12, 4, true);
    const auto weights = ClassWeights::from_frequency({0.5, 0.3, 0.15, 0.05});
    run("wce_loss", [=](const std::vector<TD>&) { return wce_loss(logits, std::span(labels), weights); }, {logits});
    run("lovasz_softmax_loss",
        [=](const std::vector<TD>&) { return lovasz_softmax_loss(softmax(logits, 1), std::span(labels)); }, {logits});
    auto other = random(rng, {12, 4}, -2, 2);
    run("consistency_loss",
        [=](const std::vector<TD>&) { return consistency_loss(softmax(logits, 1), softmax(other, 1)); },
        {logits, other});
    auto w = random(rng, {1}, 0.5, 1.0);
    auto l = random(rng, {1}, 0.5, 1.0);
    auto t = random(rng, {1}, 0.5, 1.0);
    run("total_loss", [=](const std::vector<TD>&) { return total_loss(sum(w), sum(l), sum(t)); }, {w, l, t});
  }

  // Composite blocks built from the same registry machinery as the model.
  {
    ParamRegistry<double> reg;
    ParamBuilder<double> b(reg, rng);
    auto dd = make_dual_downsample<double>(b.scoped("ddb"), 3, 4, true, true);
    auto x = random(rng, {4, 6, 3});
    run("dual_downsample", [=](const std::vector<TD>&) mutable { return dual_downsample(x, dd, true); },
        join(std::vector<TD>{x}, registry_inputs(reg)));
  }
  {
    ParamRegistry<double> reg;
    ParamBuilder<double> b(reg, rng);
    auto low_c = 3, high_c = 4, cout = 3;
    auto shared = make_attention_fpn<double>(b.scoped("shared"), low_c, high_c, cout, true, false, true);
    auto per_channel = make_attention_fpn<double>(b.scoped("per"), low_c, high_c, cout, true, true, false);
    auto low = random(rng, {4, 4, low_c});
    auto high = random(rng, {2, 2, high_c});
    auto high_w = random(rng, {4, 2, high_c});
    run("attention_fpn_shared_gate",
        [=](const std::vector<TD>&) mutable { return attention_fpn(low, high, shared, true); },
        std::vector<TD>{low, high, shared.gate_weight, shared.gate_bias, shared.low_proj.weight,
                        shared.high_proj.weight});
    run("attention_fpn_channel_gate",
        [=](const std::vector<TD>&) mutable { return attention_fpn(low, high_w, per_channel, true); },
        std::vector<TD>{low, high_w, per_channel.gate_weight, per_channel.gate_bias});
  }
  {
    ParamRegistry<double> reg;
    ParamBuilder<double> b(reg, rng);
    auto block = [&] {
      ResidualParams<double> r;
      r.first = b.conv_bn("res.a", 3, 3, 3, {1, 1, 1, 1});
      r.second = b.conv_bn("res.b", 3, 3, 3, {1, 1, 1, 1});
      return r;
    }();
    auto x = random(rng, {4, 4, 3});
    run("residual_block", [=](const std::vector<TD>&) mutable { return residual_block(x, block, true); },
        join(std::vector<TD>{x}, registry_inputs(reg)));
  }
  {
    ParamRegistry<double> reg;
    ParamBuilder<double> b(reg, rng);
    auto early = make_point_fusion<double>(b.scoped("early"), {3, 2, 2}, 3, false);
    auto late = make_point_fusion<double>(b.scoped("late"), {3, 2, 2}, 3, true);
    auto p = random(rng, {9, 3});
    auto bv = random(rng, {9, 2});
    auto rv = random(rng, {9, 2});
    run("point_fusion", [=](const std::vector<TD>&) mutable { return point_fusion(p, bv, rv, early, true); },
        std::vector<TD>{p, bv, rv, early.first.weight, early.second.weight});
    run("point_fusion_late", [=](const std::vector<TD>&) mutable { return point_fusion(p, bv, rv, late, true); },
        join(std::vector<TD>{p, bv, rv}, late.branch_weight, late.branch_bias));
  }
  {
    // Whole network at toy scale with every parameter in play.
    CpgModel<double> model(tiny_config(), rng.next_u64());
    const auto cloud = random_cloud(rng, 64, 8.0);
    const auto geometry = compute_geometry(cloud, model.config());
    run("cpgnet_forward",
        [&model, cloud, geometry](const std::vector<TD>&) { return cpgnet_forward(cloud, geometry, model, true); },
        registry_inputs(model.registry()));
  }
  return out;
}

std::string format_gradcheck_table(const std::vector<GradcheckOutcome>& outcomes, double tolerance) {
  std::size_t width = 2;
  for (const auto& o : outcomes) width = std::max(width, o.name.size());
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-*s  %12s  %6s  %5s  %s\n", static_cast<int>(width), "op", "max_rel_err", "coords",
                "kinks", "result");
  os << line;
  for (const auto& o : outcomes) {
    std::snprintf(line, sizeof line, "%-*s  %12.3e  %6zu  %5zu  %s\n", static_cast<int>(width), o.name.c_str(),
                  o.max_rel_error, o.coords_checked, o.coords_skipped, o.passed ? "PASS" : "FAIL");
    os << line;
  }
  std::snprintf(line, sizeof line, "tolerance %.1e\n", tolerance);
  os << line;
  return os.str();
}

}  // namespace cpg
