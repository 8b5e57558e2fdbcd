#include "cpg/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace cpg {

// ---------------------------------------------------------------------------
// Configuration

void FcnConfig::validate() const {
  for (int c : stage_channels) {
    if (c <= 0) throw std::invalid_argument("FCN stage channels must be positive");
  }
  if (input_channels <= 0) throw std::invalid_argument("FCN input channels must be positive");
}

CpgConfig CpgConfig::full() { return CpgConfig{}; }

CpgConfig CpgConfig::desk(int num_classes) {
  CpgConfig c;
  c.block_in_channels = {9, 32};
  c.block_out_channels = {32, 48};
  c.mlp_channels = 32;
  for (std::size_t i = 0; i < c.stage_channels.size(); ++i) c.stage_channels[i] = kFullStageChannels[i] / 2;
  c.bev_spec = GridSpec::bev(64, 64, -25.0, -25.0, 25.0, 25.0);
  c.rv_spec = GridSpec::rv_degrees(256, 16, 3.0, 25.0);
  c.num_classes = num_classes;
  return c;
}

void CpgConfig::validate() const {
  if (num_blocks < 1) throw std::invalid_argument("num_blocks must be >= 1");
  if (static_cast<int>(block_in_channels.size()) != num_blocks ||
      static_cast<int>(block_out_channels.size()) != num_blocks) {
    throw std::invalid_argument("block channel lists must have num_blocks entries");
  }
  if (block_in_channels.front() != kPointInputChannels) {
    throw std::invalid_argument("the first block takes the 9 point input features");
  }
  for (int i = 1; i < num_blocks; ++i) {
    if (block_in_channels[i] != block_out_channels[i - 1]) {
      throw std::invalid_argument("block " + std::to_string(i) + " input channels must equal the previous output");
    }
  }
  for (int c : block_out_channels) {
    if (c <= 0) throw std::invalid_argument("block output channels must be positive");
  }
  if (mlp_channels <= 0 || num_classes <= 0) throw std::invalid_argument("channel counts must be positive");
  if (bev_spec.kind != GridKind::kBev || rv_spec.kind != GridKind::kRv) {
    throw std::invalid_argument("expected one BEV and one range view grid");
  }
  bev_spec.validate();
  rv_spec.validate();
  fcn(GridKind::kBev).validate();
}

FcnConfig CpgConfig::fcn(GridKind kind) const {
  FcnConfig f;
  f.stage_channels = stage_channels;
  f.downsample_height = kind == GridKind::kBev;
  f.input_channels = mlp_channels;
  f.use_ddb = use_ddb;
  f.use_afpn = use_afpn;
  f.per_channel_gate = per_channel_gate;
  return f;
}

std::string CpgConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  auto list = [&os](const auto& values) {
    for (std::size_t i = 0; i < values.size(); ++i) os << (i ? "," : "") << values[i];
  };
  os << "blocks=" << num_blocks << ";in=";
  list(block_in_channels);
  os << ";out=";
  list(block_out_channels);
  os << ";mlp=" << mlp_channels << ";stages=";
  list(stage_channels);
  os << ";bev=" << bev_spec.width << "x" << bev_spec.height << ":" << bev_spec.x_min << "," << bev_spec.y_min << ","
     << bev_spec.x_max << "," << bev_spec.y_max;
  os << ";rv=" << rv_spec.width << "x" << rv_spec.height << ":" << rv_spec.fov_up << "," << rv_spec.fov_down;
  os << ";classes=" << num_classes << ";point_branch=" << use_point_branch << ";point_fusion=" << use_point_fusion
     << ";ddb=" << use_ddb << ";afpn=" << use_afpn << ";channel_gate=" << per_channel_gate;
  return os.str();
}

std::uint64_t CpgConfig::digest() const {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : canonical()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Registry and builder

template <typename T>
void ParamRegistry<T>::check_unique(const std::string& name) const {
  if (contains(name)) throw std::logic_error("duplicate parameter name " + name);
}

template <typename T>
Tensor<T> ParamRegistry<T>::add_param(const std::string& name, Tensor<T> tensor) {
  check_unique(name);
  tensor.set_requires_grad(true);
  params_.emplace_back(name, tensor);
  return tensor;
}

template <typename T>
Tensor<T> ParamRegistry<T>::add_buffer(const std::string& name, Tensor<T> tensor) {
  check_unique(name);
  buffers_.emplace_back(name, tensor);
  return tensor;
}

template <typename T>
std::int64_t ParamRegistry<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

template <typename T>
bool ParamRegistry<T>::contains(const std::string& name) const {
  auto match = [&name](const Entry& e) { return e.first == name; };
  return std::any_of(params_.begin(), params_.end(), match) || std::any_of(buffers_.begin(), buffers_.end(), match);
}

template <typename T>
void ParamRegistry<T>::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

template <typename T>
ParamBuilder<T> ParamBuilder<T>::scoped(const std::string& name) const {
  return ParamBuilder<T>(registry_, rng_, full(name));
}

template <typename T>
Tensor<T> ParamBuilder<T>::kaiming(const std::string& name, Shape shape, std::int64_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
  std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(rng_.uniform(-bound, bound));
  return registry_.add_param(full(name), Tensor<T>(std::move(shape), std::move(data)));
}

template <typename T>
Tensor<T> ParamBuilder<T>::zeros(const std::string& name, Shape shape) {
  return registry_.add_param(full(name), Tensor<T>::zeros(std::move(shape)));
}

template <typename T>
BatchNorm<T> ParamBuilder<T>::batchnorm(const std::string& name, std::int64_t channels) {
  auto bn = BatchNorm<T>::make(channels);
  const std::string p = full(name);
  registry_.add_param(p + ".gamma", bn.gamma);
  registry_.add_param(p + ".beta", bn.beta);
  registry_.add_buffer(p + ".running_mean", bn.running_mean);
  registry_.add_buffer(p + ".running_var", bn.running_var);
  return bn;
}

template <typename T>
ConvBn<T> ParamBuilder<T>::conv_bn(const std::string& name, int k, int cin, int cout, Conv2dOptions options) {
  ConvBn<T> layer;
  layer.weight = kaiming(name + ".weight", {k, k, cin, cout}, static_cast<std::int64_t>(k) * k * cin);
  layer.bn = batchnorm(name + ".bn", cout);
  layer.options = options;
  return layer;
}

template <typename T>
LinearBn<T> ParamBuilder<T>::linear_bn(const std::string& name, int cin, int cout) {
  LinearBn<T> layer;
  layer.weight = kaiming(name + ".weight", {cin, cout}, cin);
  layer.bn = batchnorm(name + ".bn", cout);
  return layer;
}

namespace {

constexpr Conv2dOptions kSame3x3{1, 1, 1, 1};
constexpr Conv2dOptions kPointwise{1, 1, 0, 0};

template <typename T>
ResidualParams<T> make_residual(ParamBuilder<T> b, int cin, int cout) {
  ResidualParams<T> r;
  r.first = b.conv_bn("a", 3, cin, cout, kSame3x3);
  r.second = b.conv_bn("b", 3, cout, cout, kSame3x3);
  if (cin != cout) r.projection = b.conv_bn("proj", 1, cin, cout, kPointwise);
  return r;
}

}  // namespace

template <typename T>
DualDownsampleParams<T> make_dual_downsample(ParamBuilder<T> b, int cin, int cout, bool downsample_height,
                                             bool use_pool) {
  DualDownsampleParams<T> d;
  d.conv_weight = b.kaiming("conv.weight", {3, 3, cin, cout}, 9 * cin);
  if (use_pool) d.pool_weight = b.kaiming("pool_proj.weight", {1, 1, cin, cout}, cin);
  d.bn = b.batchnorm("bn", cout);
  d.downsample_height = downsample_height;
  return d;
}

template <typename T>
AttentionFpnParams<T> make_attention_fpn(ParamBuilder<T> b, int low_channels, int high_channels, int cout,
                                         bool attention, bool per_channel_gate, bool downsample_height) {
  AttentionFpnParams<T> a;
  a.attention = attention;
  a.factor_h = downsample_height ? 2 : 1;
  a.factor_w = 2;
  if (attention) {
    a.low_proj = b.conv_bn("low", 1, low_channels, cout, kPointwise);
    a.high_proj = b.conv_bn("high", 1, high_channels, cout, kPointwise);
    const int gates = per_channel_gate ? cout : 1;
    a.gate_weight = b.kaiming("gate.weight", {3, 3, 2 * cout, gates}, 9 * 2 * cout);
    a.gate_bias = b.zeros("gate.bias", {gates});
  } else {
    a.fuse = b.conv_bn("fuse", 1, low_channels + high_channels, cout, kPointwise);
  }
  return a;
}

template <typename T>
FcnParams<T> make_fcn(ParamBuilder<T> b, const FcnConfig& config) {
  config.validate();
  const auto& ch = config.stage_channels;
  FcnParams<T> f;
  f.config = config;
  f.stem = b.conv_bn("stem", 3, config.input_channels, ch[0], kSame3x3);
  for (int i = 0; i < 3; ++i) {
    const auto s = std::to_string(i);
    f.down[i] = make_dual_downsample<T>(b.scoped("down" + s), ch[i], ch[i + 1], config.downsample_height, config.use_ddb);
    f.residual[i] = make_residual<T>(b.scoped("res" + s), ch[i + 1], ch[i + 1]);
  }
  // Decoder: up0 fuses encoder level 2 with level 3, up1 level 1 with up0, up2 level 0 with up1.
  const int low[3] = {ch[2], ch[1], ch[0]};
  const int high[3] = {ch[3], ch[4], ch[5]};
  for (int i = 0; i < 3; ++i) {
    f.up[i] = make_attention_fpn<T>(b.scoped("up" + std::to_string(i)), low[i], high[i], ch[4 + i], config.use_afpn,
                                    config.per_channel_gate, config.downsample_height);
  }
  f.head = b.conv_bn("head", 3, ch[6], ch[7], kSame3x3);
  return f;
}

template <typename T>
PointFusionParams<T> make_point_fusion(ParamBuilder<T> b, const std::vector<int>& branch_channels, int cout, bool late) {
  PointFusionParams<T> p;
  p.late = late;
  if (late) {
    for (std::size_t i = 0; i < branch_channels.size(); ++i) {
      const auto s = std::to_string(i);
      p.branch_weight.push_back(b.kaiming("branch" + s + ".weight", {branch_channels[i], cout}, branch_channels[i]));
      p.branch_bias.push_back(b.zeros("branch" + s + ".bias", {cout}));
    }
  } else {
    int total = 0;
    for (int c : branch_channels) total += c;
    p.first = b.linear_bn("fc0", total, cout);
    p.second = b.linear_bn("fc1", cout, cout);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
Tensor<T> conv_bn_act(const Tensor<T>& x, ConvBn<T>& layer, bool training, bool activation) {
  auto y = batchnorm(conv2d(x, layer.weight, Tensor<T>(), layer.options), layer.bn, training);
  return activation ? relu(y) : y;
}

template <typename T>
Tensor<T> linear_bn_act(const Tensor<T>& x, LinearBn<T>& layer, bool training) {
  return relu(batchnorm(linear(x, layer.weight, Tensor<T>()), layer.bn, training));
}

template <typename T>
Tensor<T> dual_downsample(const Tensor<T>& input, DualDownsampleParams<T>& params, bool training) {
  if (input.rank() != 3) throw ShapeError("dual_downsample: expected [H,W,C]");
  const int fh = params.downsample_height ? 2 : 1;
  if (input.dim(0) % fh != 0 || input.dim(1) % 2 != 0) {
    throw ShapeError("dual_downsample: input " + shape_str(input.shape()) + " has odd down-sampled dimensions");
  }
  auto out = conv2d(input, params.conv_weight, Tensor<T>(), Conv2dOptions{fh, 2, 1, 1});
  if (params.pool_weight.defined()) {
    auto pooled = conv2d(maxpool2d(input, fh, 2), params.pool_weight, Tensor<T>(), kPointwise);
    out = add(out, pooled);
  }
  return relu(batchnorm(out, params.bn, training));
}

template <typename T>
Tensor<T> residual_block(const Tensor<T>& input, ResidualParams<T>& params, bool training) {
  auto y = conv_bn_act(input, params.first, training);
  y = conv_bn_act(y, params.second, training, false);
  auto skip = params.projection ? conv_bn_act(input, *params.projection, training, false) : input;
  return relu(add(y, skip));
}

template <typename T>
Tensor<T> attention_fpn(const Tensor<T>& low, const Tensor<T>& high, AttentionFpnParams<T>& params, bool training) {
  if (low.rank() != 3 || high.rank() != 3) throw ShapeError("attention_fpn: expected [H,W,C] inputs");
  if (high.dim(0) * params.factor_h != low.dim(0) || high.dim(1) * params.factor_w != low.dim(1)) {
    throw ShapeError("attention_fpn: upsampled high level " + shape_str(high.shape()) + " does not match low level " +
                     shape_str(low.shape()));
  }
  if (!params.attention) {
    auto up = upsample(high, params.factor_h, params.factor_w);
    return conv_bn_act(concat<T>({low, up}, 2), params.fuse, training);
  }
  auto low_p = conv_bn_act(low, params.low_proj, training);
  auto up = upsample(conv_bn_act(high, params.high_proj, training), params.factor_h, params.factor_w);
  auto gate = sigmoid(conv2d(concat<T>({low_p, up}, 2), params.gate_weight, params.gate_bias, kSame3x3));
  return gate_blend(gate, low_p, up);
}

template <typename T>
Tensor<T> fcn_forward(const Tensor<T>& grid, FcnParams<T>& params, bool training) {
  if (grid.rank() != 3) throw ShapeError("fcn_forward: expected [H,W,C]");
  const bool dh = params.config.downsample_height;
  if ((dh && grid.dim(0) % 8 != 0) || grid.dim(1) % 8 != 0) {
    throw ShapeError("fcn_forward: grid " + shape_str(grid.shape()) + " is not divisible by 8 along the down-sampled axes");
  }
  auto x0 = conv_bn_act(grid, params.stem, training);
  auto x1 = residual_block(dual_downsample(x0, params.down[0], training), params.residual[0], training);
  auto x2 = residual_block(dual_downsample(x1, params.down[1], training), params.residual[1], training);
  auto x3 = residual_block(dual_downsample(x2, params.down[2], training), params.residual[2], training);
  auto d2 = attention_fpn(x2, x3, params.up[0], training);
  auto d1 = attention_fpn(x1, d2, params.up[1], training);
  auto d0 = attention_fpn(x0, d1, params.up[2], training);
  return conv_bn_act(d0, params.head, training);
}

template <typename T>
Tensor<T> point_fusion(const Tensor<T>& point_feats, const Tensor<T>& bev_feats, const Tensor<T>& rv_feats,
                       PointFusionParams<T>& params, bool training) {
  std::vector<Tensor<T>> branches;
  if (point_feats.defined()) branches.push_back(point_feats);
  branches.push_back(bev_feats);
  branches.push_back(rv_feats);
  for (const auto& b : branches) {
    if (b.rank() != 2 || b.dim(0) != bev_feats.dim(0)) {
      throw ShapeError("point_fusion: branch row counts differ (" + shape_str(b.shape()) + " vs " +
                       shape_str(bev_feats.shape()) + ")");
    }
  }
  if (params.late) {
    if (branches.size() != params.branch_weight.size()) throw ShapeError("point_fusion: branch count mismatch");
    Tensor<T> acc;
    for (std::size_t i = 0; i < branches.size(); ++i) {
      auto y = linear(branches[i], params.branch_weight[i], params.branch_bias[i]);
      acc = acc.defined() ? add(acc, y) : y;
    }
    return scale(acc, T(1) / static_cast<T>(branches.size()));
  }
  auto x = concat(branches, 1);
  x = linear_bn_act(x, params.first, training);
  return linear_bn_act(x, params.second, training);
}

ScanGeometry compute_geometry(const PointCloud& cloud, const CpgConfig& config) {
  return {project_bev(cloud, config.bev_spec), project_rv(cloud, config.rv_spec)};
}

template <typename T>
Tensor<T> view_branch(const Tensor<T>& point_feats, const ProjectionIndex& index, FcnParams<T>& params, bool training) {
  auto [grid, record] = p2g_scatter_max(point_feats, index);
  const std::int64_t h = grid.dim(0), w = grid.dim(1);
  const int pad_h = params.config.downsample_height ? static_cast<int>((8 - h % 8) % 8) : 0;
  const int pad_w = static_cast<int>((8 - w % 8) % 8);
  if (pad_h || pad_w) grid = pad2d(grid, pad_h, pad_w);
  auto out = fcn_forward(grid, params, training);
  if (pad_h || pad_w) out = crop2d(out, h, w);
  return g2p_bilinear(out, index);
}

template <typename T>
Tensor<T> pg_block(const Tensor<T>& point_feats, const ScanGeometry& geometry, PgBlockParams<T>& params,
                   const CpgConfig& config, bool training) {
  auto h = linear_bn_act(point_feats, params.mlp, training);
  auto bev = view_branch(h, geometry.bev, params.bev, training);
  auto rv = view_branch(h, geometry.rv, params.rv, training);
  return point_fusion(config.use_point_branch ? h : Tensor<T>(), bev, rv, params.fusion, training);
}

template <typename T>
CpgModel<T>::CpgModel(const CpgConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  ParamBuilder<T> root(registry_, rng);
  const int view_channels = config_.stage_channels[7];
  for (int i = 0; i < config_.num_blocks; ++i) {
    auto b = root.scoped("block" + std::to_string(i));
    PgBlockParams<T> block;
    block.mlp = b.linear_bn("mlp", config_.block_in_channels[i], config_.mlp_channels);
    block.bev = make_fcn<T>(b.scoped("bev"), config_.fcn(GridKind::kBev));
    block.rv = make_fcn<T>(b.scoped("rv"), config_.fcn(GridKind::kRv));
    std::vector<int> branches;
    if (config_.use_point_branch) branches.push_back(config_.mlp_channels);
    branches.push_back(view_channels);
    branches.push_back(view_channels);
    block.fusion = make_point_fusion<T>(b.scoped("fusion"), branches, config_.block_out_channels[i],
                                        !config_.use_point_fusion);
    blocks.push_back(std::move(block));
  }
  const int last = config_.block_out_channels.back();
  head_weight = root.kaiming("head.weight", {last, config_.num_classes}, last);
  head_bias = root.zeros("head.bias", {config_.num_classes});
}

template <typename T>
Tensor<T> cpgnet_forward(const PointCloud& cloud, const ScanGeometry& geometry, CpgModel<T>& model, bool training) {
  auto x = point_input_features<T>(cloud, geometry.bev, geometry.rv);
  for (auto& block : model.blocks) x = pg_block(x, geometry, block, model.config(), training);
  return linear(x, model.head_weight, model.head_bias);
}

template <typename T>
Tensor<T> cpgnet_forward(const PointCloud& cloud, CpgModel<T>& model, bool training) {
  return cpgnet_forward(cloud, compute_geometry(cloud, model.config()), model, training);
}

#define CPG_INSTANTIATE_NETWORK(T)                                                                                     \
  template class ParamRegistry<T>;                                                                                     \
  template class ParamBuilder<T>;                                                                                      \
  template class CpgModel<T>;                                                                                          \
  template DualDownsampleParams<T> make_dual_downsample(ParamBuilder<T>, int, int, bool, bool);                       \
  template AttentionFpnParams<T> make_attention_fpn(ParamBuilder<T>, int, int, int, bool, bool, bool);                \
  template FcnParams<T> make_fcn(ParamBuilder<T>, const FcnConfig&);                                                  \
  template PointFusionParams<T> make_point_fusion(ParamBuilder<T>, const std::vector<int>&, int, bool);               \
  template Tensor<T> conv_bn_act(const Tensor<T>&, ConvBn<T>&, bool, bool);                                           \
  template Tensor<T> linear_bn_act(const Tensor<T>&, LinearBn<T>&, bool);                                             \
  template Tensor<T> dual_downsample(const Tensor<T>&, DualDownsampleParams<T>&, bool);                               \
  template Tensor<T> residual_block(const Tensor<T>&, ResidualParams<T>&, bool);                                      \
  template Tensor<T> attention_fpn(const Tensor<T>&, const Tensor<T>&, AttentionFpnParams<T>&, bool);                 \
  template Tensor<T> fcn_forward(const Tensor<T>&, FcnParams<T>&, bool);                                              \
  template Tensor<T> point_fusion(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, PointFusionParams<T>&, bool); \
  template Tensor<T> view_branch(const Tensor<T>&, const ProjectionIndex&, FcnParams<T>&, bool);                      \
  template Tensor<T> pg_block(const Tensor<T>&, const ScanGeometry&, PgBlockParams<T>&, const CpgConfig&, bool);      \
  template Tensor<T> cpgnet_forward(const PointCloud&, CpgModel<T>&, bool);                                           \
  template Tensor<T> cpgnet_forward(const PointCloud&, const ScanGeometry&, CpgModel<T>&, bool);

CPG_INSTANTIATE_NETWORK(float)
CPG_INSTANTIATE_NETWORK(double)

}  // namespace cpg
