#pragma once

#include <vector>

#include "cpg/tensor.hpp"

namespace cpg {

struct Conv2dOptions {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
};

/// Cross-correlation over a channel-last grid.
/// input [H,W,Cin], weight [kh,kw,Cin,Cout], bias [Cout] or undefined.
/// Output [H',W',Cout] with H' = floor((H + 2*pad_h - kh) / stride_h) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions options = {});

/// Non-overlapping max pooling with window (kh, kw) and equal stride. The
/// window must tile the input exactly. Ties go to the lowest flat index.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int kh, int kw);

/// Row-wise affine map: input [N,Cin], weight [Cin,Cout], bias [Cout] or undefined.
/// Each output row depends only on its input row, with a fixed summation order.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Concatenate along `axis`; all other dimensions must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

/// Nearest-neighbour upsampling of [H,W,C] by integer factors.
template <typename T>
Tensor<T> upsample(const Tensor<T>& input, int factor_h, int factor_w);

template <typename T>
Tensor<T> upsample_x2(const Tensor<T>& input) {
  return upsample(input, 2, 2);
}

/// Zero-pad [H,W,C] at the bottom and right.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& input, int pad_bottom, int pad_right);

/// Keep the top-left [height,width] window of [H,W,C].
template <typename T>
Tensor<T> crop2d(const Tensor<T>& input, std::int64_t height, std::int64_t width);

/// Gated blend g*a + (1-g)*b. `gate` is [H,W,1] (broadcast over channels) or
/// has the same shape as `a` and `b`.
template <typename T>
Tensor<T> gate_blend(const Tensor<T>& gate, const Tensor<T>& a, const Tensor<T>& b);

/// Softmax of a 2D tensor along axis 0 or 1, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = 1);

/// Per-channel normalization state. `gamma`/`beta` are trainable, the running
/// statistics are buffers updated in training mode.
template <typename T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  static BatchNorm make(std::int64_t channels);
  std::int64_t channels() const { return gamma.numel(); }
};

/// Normalize over all leading dimensions of [..., C]. Training mode uses the
/// batch statistics (biased variance) and updates the running statistics.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, BatchNorm<T>& state, bool training);

}  // namespace cpg
