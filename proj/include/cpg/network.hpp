#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cpg/ops.hpp"
#include "cpg/pointcloud.hpp"
#include "cpg/projection.hpp"
#include "cpg/rng.hpp"
#include "cpg/tensor.hpp"

namespace cpg {

/// Channels of the eight FCN stages: stem, three encoder stages, three
/// decoder fusions, output head.
using StageChannels = std::array<int, 8>;

inline constexpr StageChannels kFullStageChannels{64, 32, 64, 128, 128, 96, 64, 64};

struct FcnConfig {
  StageChannels stage_channels = kFullStageChannels;
  /// False for the range view: down-sampling then acts along the width only.
  bool downsample_height = true;
  int input_channels = 64;
  bool use_ddb = true;
  bool use_afpn = true;
  /// One gate per channel instead of a single gate map shared across channels.
  bool per_channel_gate = false;

  void validate() const;
  int output_channels() const { return stage_channels[7]; }
};

struct CpgConfig {
  int num_blocks = 2;
  std::vector<int> block_in_channels{9, 64};
  std::vector<int> block_out_channels{64, 96};
  /// Width of the first MLP in every block, i.e. the channels scattered to the grids.
  int mlp_channels = 64;
  StageChannels stage_channels = kFullStageChannels;
  GridSpec bev_spec = GridSpec::bev(600, 600, -50.0, -50.0, 50.0, 50.0);
  GridSpec rv_spec = GridSpec::rv_degrees(2048, 64, 3.0, 25.0);
  int num_classes = 19;
  bool use_point_branch = true;
  bool use_point_fusion = true;
  bool use_ddb = true;
  bool use_afpn = true;
  bool per_channel_gate = false;

  /// Full-scale SemanticKITTI configuration.
  static CpgConfig full();
  /// Reduced configuration: 64x64 BEV over +-25 m, 256x16 range view, halved channels.
  static CpgConfig desk(int num_classes = kSynthClasses);

  void validate() const;
  FcnConfig fcn(GridKind kind) const;
  /// Stable text form of every architecture-relevant field.
  std::string canonical() const;
  std::uint64_t digest() const;
};

/// Ordered registry of named parameters (trainable) and buffers (running statistics).
template <typename T>
class ParamRegistry {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  Tensor<T> add_param(const std::string& name, Tensor<T> tensor);
  Tensor<T> add_buffer(const std::string& name, Tensor<T> tensor);

  const std::vector<Entry>& params() const { return params_; }
  const std::vector<Entry>& buffers() const { return buffers_; }
  /// Total number of trainable scalars.
  std::int64_t parameter_count() const;
  bool contains(const std::string& name) const;
  void zero_grad();

 private:
  void check_unique(const std::string& name) const;
  std::vector<Entry> params_;
  std::vector<Entry> buffers_;
};

template <typename T>
struct ConvBn {
  Tensor<T> weight;
  BatchNorm<T> bn;
  Conv2dOptions options;
};

template <typename T>
struct LinearBn {
  Tensor<T> weight;
  BatchNorm<T> bn;
};

template <typename T>
struct DualDownsampleParams {
  Tensor<T> conv_weight;
  /// 1x1 projection after the pooling path; undefined when the pooling path is off.
  Tensor<T> pool_weight;
  BatchNorm<T> bn;
  bool downsample_height = true;
};

template <typename T>
struct ResidualParams {
  ConvBn<T> first;
  ConvBn<T> second;
  std::optional<ConvBn<T>> projection;
};

template <typename T>
struct AttentionFpnParams {
  bool attention = true;
  ConvBn<T> low_proj;
  ConvBn<T> high_proj;
  Tensor<T> gate_weight;
  Tensor<T> gate_bias;
  /// Concatenation fallback used when attention is disabled.
  ConvBn<T> fuse;
  int factor_h = 2;
  int factor_w = 2;
};

template <typename T>
struct FcnParams {
  FcnConfig config;
  ConvBn<T> stem;
  std::array<DualDownsampleParams<T>, 3> down;
  std::array<ResidualParams<T>, 3> residual;
  std::array<AttentionFpnParams<T>, 3> up;
  ConvBn<T> head;
};

template <typename T>
struct PointFusionParams {
  bool late = false;
  LinearBn<T> first;
  LinearBn<T> second;
  /// Late variant: one linear map per branch, averaged.
  std::vector<Tensor<T>> branch_weight;
  std::vector<Tensor<T>> branch_bias;
};

template <typename T>
struct PgBlockParams {
  LinearBn<T> mlp;
  FcnParams<T> bev;
  FcnParams<T> rv;
  PointFusionParams<T> fusion;
};

/// Allocates and initializes parameters into a registry: Kaiming-uniform on
/// fan-in for weights, zero biases, unit gamma and zero beta.
template <typename T>
class ParamBuilder {
 public:
  ParamBuilder(ParamRegistry<T>& registry, Rng& rng, std::string prefix = "")
      : registry_(registry), rng_(rng), prefix_(std::move(prefix)) {}

  ParamBuilder scoped(const std::string& name) const;
  Tensor<T> kaiming(const std::string& name, Shape shape, std::int64_t fan_in);
  Tensor<T> zeros(const std::string& name, Shape shape);
  BatchNorm<T> batchnorm(const std::string& name, std::int64_t channels);
  ConvBn<T> conv_bn(const std::string& name, int k, int cin, int cout, Conv2dOptions options);
  LinearBn<T> linear_bn(const std::string& name, int cin, int cout);

 private:
  std::string full(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }
  ParamRegistry<T>& registry_;
  Rng& rng_;
  std::string prefix_;
};

template <typename T>
DualDownsampleParams<T> make_dual_downsample(ParamBuilder<T> b, int cin, int cout, bool downsample_height, bool use_pool);
template <typename T>
AttentionFpnParams<T> make_attention_fpn(ParamBuilder<T> b, int low_channels, int high_channels, int cout,
                                         bool attention, bool per_channel_gate, bool downsample_height);
template <typename T>
FcnParams<T> make_fcn(ParamBuilder<T> b, const FcnConfig& config);
template <typename T>
PointFusionParams<T> make_point_fusion(ParamBuilder<T> b, const std::vector<int>& branch_channels, int cout, bool late);

template <typename T>
Tensor<T> conv_bn_act(const Tensor<T>& x, ConvBn<T>& layer, bool training, bool activation = true);
template <typename T>
Tensor<T> linear_bn_act(const Tensor<T>& x, LinearBn<T>& layer, bool training);

/// Parallel stride-2 conv path and maxpool + 1x1 conv path, summed, then
/// normalization and ReLU. Halves H and W, or W only.
template <typename T>
Tensor<T> dual_downsample(const Tensor<T>& input, DualDownsampleParams<T>& params, bool training);

template <typename T>
Tensor<T> residual_block(const Tensor<T>& input, ResidualParams<T>& params, bool training);

/// Projects both levels to the output width, upsamples the high level and
/// blends per pixel with a sigmoid gate: a*low' + (1-a)*up(high').
template <typename T>
Tensor<T> attention_fpn(const Tensor<T>& low, const Tensor<T>& high, AttentionFpnParams<T>& params, bool training);

/// Encoder-decoder over a [H,W,Cin] grid; H and W must be divisible by 8
/// along the down-sampled axes. Returns [H,W,stage_channels[7]].
template <typename T>
Tensor<T> fcn_forward(const Tensor<T>& grid, FcnParams<T>& params, bool training);

/// Concatenate the branches (point branch may be undefined when disabled)
/// and apply two linear+norm+ReLU layers, or average per-branch linear maps
/// in the late variant.
template <typename T>
Tensor<T> point_fusion(const Tensor<T>& point_feats, const Tensor<T>& bev_feats, const Tensor<T>& rv_feats,
                       PointFusionParams<T>& params, bool training);

/// Geometry of one scan, computed once and shared by every block.
struct ScanGeometry {
  ProjectionIndex bev;
  ProjectionIndex rv;
};

ScanGeometry compute_geometry(const PointCloud& cloud, const CpgConfig& config);

/// Scatter, run the view FCN (padding the grid to a multiple of 8 and
/// cropping back) and gather.
template <typename T>
Tensor<T> view_branch(const Tensor<T>& point_feats, const ProjectionIndex& index, FcnParams<T>& params, bool training);

template <typename T>
Tensor<T> pg_block(const Tensor<T>& point_feats, const ScanGeometry& geometry, PgBlockParams<T>& params,
                   const CpgConfig& config, bool training);

template <typename T>
class CpgModel {
 public:
  CpgModel(const CpgConfig& config, std::uint64_t seed);

  const CpgConfig& config() const { return config_; }
  ParamRegistry<T>& registry() { return registry_; }
  const ParamRegistry<T>& registry() const { return registry_; }

  std::vector<PgBlockParams<T>> blocks;
  Tensor<T> head_weight;
  Tensor<T> head_bias;

 private:
  CpgConfig config_;
  ParamRegistry<T> registry_;
};

/// Per-point logits [N, num_classes].
template <typename T>
Tensor<T> cpgnet_forward(const PointCloud& cloud, CpgModel<T>& model, bool training);
template <typename T>
Tensor<T> cpgnet_forward(const PointCloud& cloud, const ScanGeometry& geometry, CpgModel<T>& model, bool training);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat binary checkpoint: magic, version, config digest, tensor count, then
/// per tensor its name, shape and float32 data. Buffers follow parameters.
void save_checkpoint(const std::filesystem::path& path, const CpgModel<float>& model);
/// Throws CheckpointError when the file's config digest differs from the model's.
void load_checkpoint(const std::filesystem::path& path, CpgModel<float>& model);
std::uint64_t read_checkpoint_digest(const std::filesystem::path& path);

}  // namespace cpg
