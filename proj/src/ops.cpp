#include "cpg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

namespace cpg {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

void require(bool condition, const std::string& message) {
  if (!condition) throw ShapeError(message);
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* op, const char* what) {
  require(t.defined(), std::string(op) + ": " + what + " is undefined");
  require(t.rank() == rank, std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                                ", got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

// Upper bound on im2col buffer entries per chunk.
constexpr std::int64_t kIm2colBudget = std::int64_t{1} << 22;

struct ConvGeometry {
  std::int64_t h, w, cin, kh, kw, cout, ho, wo;
  Conv2dOptions opt;

  std::int64_t k() const { return kh * kw * cin; }
  std::int64_t pixels() const { return ho * wo; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && opt.stride_h == 1 && opt.stride_w == 1 && opt.pad_h == 0 &&
           opt.pad_w == 0;
  }
  std::int64_t chunk() const { return std::clamp<std::int64_t>(kIm2colBudget / k(), 1, pixels()); }
};

template <typename T>
void im2col(const T* in, const ConvGeometry& g, std::int64_t p0, std::int64_t rows, RowMat<T>& col) {
  const std::int64_t cin = g.cin;
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t p = p0 + r;
    const std::int64_t oy = p / g.wo, ox = p % g.wo;
    T* dst = col.row(r).data();
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      const std::int64_t iy = oy * g.opt.stride_h - g.opt.pad_h + ky;
      for (std::int64_t kx = 0; kx < g.kw; ++kx, dst += cin) {
        const std::int64_t ix = ox * g.opt.stride_w - g.opt.pad_w + kx;
        if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
          std::fill(dst, dst + cin, T(0));
        } else {
          const T* src = in + (iy * g.w + ix) * cin;
          std::copy(src, src + cin, dst);
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const RowMat<T>& col, const ConvGeometry& g, std::int64_t p0, std::int64_t rows, T* grad_in) {
  const std::int64_t cin = g.cin;
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t p = p0 + r;
    const std::int64_t oy = p / g.wo, ox = p % g.wo;
    const T* src = col.row(r).data();
    for (std::int64_t ky = 0; ky < g.kh; ++ky) {
      const std::int64_t iy = oy * g.opt.stride_h - g.opt.pad_h + ky;
      for (std::int64_t kx = 0; kx < g.kw; ++kx, src += cin) {
        const std::int64_t ix = ox * g.opt.stride_w - g.opt.pad_w + kx;
        if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) continue;
        T* dst = grad_in + (iy * g.w + ix) * cin;
        for (std::int64_t c = 0; c < cin; ++c) dst[c] += src[c];
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions options) {
  require_rank(input, 3, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  require(options.stride_h >= 1 && options.stride_w >= 1 && options.pad_h >= 0 && options.pad_w >= 0,
          "conv2d: invalid stride/padding");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), weight.dim(0), weight.dim(1), weight.dim(3),
                 0, 0, options};
  require(weight.dim(2) == g.cin, "conv2d: input has " + std::to_string(g.cin) +
                                      " channels but weight expects " + std::to_string(weight.dim(2)));
  if (bias.defined()) {
    require(bias.numel() == g.cout, "conv2d: bias length does not match output channels");
  }
  g.ho = (g.h + 2 * options.pad_h - g.kh) / options.stride_h + 1;
  g.wo = (g.w + 2 * options.pad_w - g.kw) / options.stride_w + 1;
  require(g.h + 2 * options.pad_h >= g.kh && g.w + 2 * options.pad_w >= g.kw,
          "conv2d: kernel larger than padded input");

  std::vector<T> out(static_cast<std::size_t>(g.pixels() * g.cout));
  MutMap<T> out_m(out.data(), g.pixels(), g.cout);
  ConstMap<T> w_m(weight.data().data(), g.k(), g.cout);

  if (g.pointwise()) {
    ConstMap<T> x_m(input.data().data(), g.pixels(), g.cin);
    out_m.noalias() = x_m * w_m;
  } else {
    const std::int64_t chunk = g.chunk();
    RowMat<T> col(chunk, g.k());
    for (std::int64_t p0 = 0; p0 < g.pixels(); p0 += chunk) {
      const std::int64_t rows = std::min(chunk, g.pixels() - p0);
      im2col(input.data().data(), g, p0, rows, col);
      out_m.middleRows(p0, rows).noalias() = col.topRows(rows) * w_m;
    }
  }
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b_m(bias.data().data(), g.cout);
    out_m.rowwise() += b_m;
  }

  return make_result<T>(
      Shape{g.ho, g.wo, g.cout}, std::move(out), {input, weight, bias}, "conv2d",
      [input, weight, bias, g](std::span<const T> grad_out) {
        ConstMap<T> go(grad_out.data(), g.pixels(), g.cout);
        ConstMap<T> w_m(weight.data().data(), g.k(), g.cout);
        if (bias.requires_grad()) {
          auto gb = grad_sink(bias);
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb_m(gb.data(), g.cout);
          gb_m += go.colwise().sum();
        }
        const bool need_w = weight.requires_grad();
        const bool need_x = input.requires_grad();
        if (!need_w && !need_x) return;
        if (g.pointwise()) {
          ConstMap<T> x_m(input.data().data(), g.pixels(), g.cin);
          if (need_w) {
            MutMap<T> gw(grad_sink(weight).data(), g.k(), g.cout);
            gw.noalias() += x_m.transpose() * go;
          }
          if (need_x) {
            MutMap<T> gx(grad_sink(input).data(), g.pixels(), g.cin);
            gx.noalias() += go * w_m.transpose();
          }
          return;
        }
        const std::int64_t chunk = g.chunk();
        RowMat<T> col(chunk, g.k());
        RowMat<T> gcol;
        T* gx = need_x ? grad_sink(input).data() : nullptr;
        for (std::int64_t p0 = 0; p0 < g.pixels(); p0 += chunk) {
          const std::int64_t rows = std::min(chunk, g.pixels() - p0);
          if (need_w) {
            im2col(input.data().data(), g, p0, rows, col);
            MutMap<T> gw(grad_sink(weight).data(), g.k(), g.cout);
            gw.noalias() += col.topRows(rows).transpose() * go.middleRows(p0, rows);
          }
          if (need_x) {
            gcol.noalias() = go.middleRows(p0, rows) * w_m.transpose();
            col2im_add(gcol, g, p0, rows, gx);
          }
        }
      });
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, int kh, int kw) {
  require_rank(input, 3, "maxpool2d", "input");
  require(kh >= 1 && kw >= 1, "maxpool2d: window must be positive");
  const std::int64_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
  require(h % kh == 0 && w % kw == 0, "maxpool2d: input " + shape_str(input.shape()) +
                                          " is not divisible by the pooling window");
  const std::int64_t ho = h / kh, wo = w / kw;
  std::vector<T> out(static_cast<std::size_t>(ho * wo * c));
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  const T* x = input.data().data();
  for (std::int64_t oy = 0; oy < ho; ++oy) {
    for (std::int64_t ox = 0; ox < wo; ++ox) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        std::int64_t best = ((oy * kh) * w + ox * kw) * c + ch;
        for (std::int64_t dy = 0; dy < kh; ++dy) {
          for (std::int64_t dx = 0; dx < kw; ++dx) {
            const std::int64_t idx = ((oy * kh + dy) * w + ox * kw + dx) * c + ch;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = static_cast<std::size_t>((oy * wo + ox) * c + ch);
        out[o] = x[best];
        (*argmax)[o] = best;
      }
    }
  }
  return make_result<T>(Shape{ho, wo, c}, std::move(out), {input}, "maxpool2d",
                        [input, argmax](std::span<const T> grad_out) {
                          auto gx = grad_sink(input);
                          for (std::size_t o = 0; o < grad_out.size(); ++o) {
                            gx[static_cast<std::size_t>((*argmax)[o])] += grad_out[o];
                          }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::int64_t n = input.dim(0), cin = input.dim(1), cout = weight.dim(1);
  require(weight.dim(0) == cin, "linear: input " + shape_str(input.shape()) + " incompatible with weight " +
                                    shape_str(weight.shape()));
  if (bias.defined()) require(bias.numel() == cout, "linear: bias length does not match output width");

  std::vector<T> out(static_cast<std::size_t>(n * cout), T(0));
  const T* x = input.data().data();
  const T* wt = weight.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    T* o = out.data() + i * cout;
    if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), o);
    for (std::int64_t k = 0; k < cin; ++k) {
      const T xv = x[i * cin + k];
      const T* wr = wt + k * cout;
      for (std::int64_t j = 0; j < cout; ++j) o[j] += xv * wr[j];
    }
  }

  return make_result<T>(Shape{n, cout}, std::move(out), {input, weight, bias}, "linear",
                        [input, weight, bias, n, cin, cout](std::span<const T> grad_out) {
                          ConstMap<T> go(grad_out.data(), n, cout);
                          if (bias.requires_grad()) {
                            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(grad_sink(bias).data(), cout);
                            gb += go.colwise().sum();
                          }
                          if (weight.requires_grad()) {
                            ConstMap<T> x_m(input.data().data(), n, cin);
                            MutMap<T> gw(grad_sink(weight).data(), cin, cout);
                            gw.noalias() += x_m.transpose() * go;
                          }
                          if (input.requires_grad()) {
                            ConstMap<T> w_m(weight.data().data(), cin, cout);
                            MutMap<T> gx(grad_sink(input).data(), n, cin);
                            gx.noalias() += go * w_m.transpose();
                          }
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return make_result<T>(x.shape(), std::move(out), {x}, "relu", [x](std::span<const T> go) {
    auto gx = grad_sink(x);
    const auto xs = x.data();
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (xs[i] > T(0)) gx[i] += go[i];
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto y = std::make_shared<std::vector<T>>(x.data().begin(), x.data().end());
  for (auto& v : *y) v = T(1) / (T(1) + std::exp(-v));
  std::vector<T> out = *y;
  return make_result<T>(x.shape(), std::move(out), {x}, "sigmoid", [x, y](std::span<const T> go) {
    auto gx = grad_sink(x);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (*y)[i] * (T(1) - (*y)[i]);
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bs[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "add", [a, b](std::span<const T> go) {
    for (const auto* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto g = grad_sink(*t);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bs[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "sub", [a, b](std::span<const T> go) {
    if (a.requires_grad()) {
      auto g = grad_sink(a);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
    }
    if (b.requires_grad()) {
      auto g = grad_sink(b);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] -= go[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bs[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, "mul", [a, b](std::span<const T> go) {
    if (a.requires_grad()) {
      auto g = grad_sink(a);
      const auto bs = b.data();
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * bs[i];
    }
    if (b.requires_grad()) {
      auto g = grad_sink(b);
      const auto as = a.data();
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * as[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_result<T>(x.shape(), std::move(out), {x}, "scale", [x, factor](std::span<const T> go) {
    auto g = grad_sink(x);
    for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (auto v : x.data()) total += v;
  return make_result<T>(Shape{}, std::vector<T>{total}, {x}, "sum", [x](std::span<const T> go) {
    auto g = grad_sink(x);
    for (auto& v : g) v += go[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require(x.numel() > 0, "mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const int rank = parts.front().rank();
  const int a = axis < 0 ? axis + rank : axis;
  require(a >= 0 && a < rank, "concat: axis out of range");
  Shape out_shape = parts.front().shape();
  out_shape[a] = 0;
  for (const auto& p : parts) {
    require(p.rank() == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d == a) continue;
      require(p.shape()[d] == parts.front().shape()[d],
              "concat: dimension mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts.front().shape()));
    }
    out_shape[a] += p.shape()[a];
  }
  std::int64_t outer = 1;
  for (int d = 0; d < a; ++d) outer *= out_shape[d];
  std::int64_t inner = 1;
  for (int d = a + 1; d < rank; ++d) inner *= out_shape[d];
  const std::int64_t out_row = out_shape[a] * inner;

  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::int64_t row = p.shape()[a] * inner;
    const T* src = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(src + o * row, src + (o + 1) * row, out.data() + o * out_row + offset);
    }
    offset += row;
  }
  return make_result<T>(out_shape, std::move(out), parts, "concat",
                        [parts, offsets, outer, inner, out_row, a](std::span<const T> go) {
                          for (std::size_t i = 0; i < parts.size(); ++i) {
                            if (!parts[i].requires_grad()) continue;
                            auto g = grad_sink(parts[i]);
                            const std::int64_t row = parts[i].shape()[a] * inner;
                            for (std::int64_t o = 0; o < outer; ++o) {
                              const T* src = go.data() + o * out_row + offsets[i];
                              T* dst = g.data() + o * row;
                              for (std::int64_t j = 0; j < row; ++j) dst[j] += src[j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> upsample(const Tensor<T>& input, int factor_h, int factor_w) {
  require_rank(input, 3, "upsample", "input");
  require(factor_h >= 1 && factor_w >= 1, "upsample: factors must be positive");
  const std::int64_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
  const std::int64_t ho = h * factor_h, wo = w * factor_w;
  std::vector<T> out(static_cast<std::size_t>(ho * wo * c));
  const T* x = input.data().data();
  for (std::int64_t y = 0; y < ho; ++y) {
    for (std::int64_t xo = 0; xo < wo; ++xo) {
      const T* src = x + ((y / factor_h) * w + xo / factor_w) * c;
      std::copy(src, src + c, out.data() + (y * wo + xo) * c);
    }
  }
  return make_result<T>(Shape{ho, wo, c}, std::move(out), {input}, "upsample",
                        [input, factor_h, factor_w, w, c, ho, wo](std::span<const T> go) {
                          auto g = grad_sink(input);
                          for (std::int64_t y = 0; y < ho; ++y) {
                            for (std::int64_t xo = 0; xo < wo; ++xo) {
                              T* dst = g.data() + ((y / factor_h) * w + xo / factor_w) * c;
                              const T* src = go.data() + (y * wo + xo) * c;
                              for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& input, int pad_bottom, int pad_right) {
  require_rank(input, 3, "pad2d", "input");
  require(pad_bottom >= 0 && pad_right >= 0, "pad2d: negative padding");
  const std::int64_t h = input.dim(0), w = input.dim(1), c = input.dim(2);
  const std::int64_t ho = h + pad_bottom, wo = w + pad_right;
  std::vector<T> out(static_cast<std::size_t>(ho * wo * c), T(0));
  const T* x = input.data().data();
  for (std::int64_t y = 0; y < h; ++y) {
    std::copy(x + y * w * c, x + (y + 1) * w * c, out.data() + y * wo * c);
  }
  return make_result<T>(Shape{ho, wo, c}, std::move(out), {input}, "pad2d",
                        [input, h, w, c, wo](std::span<const T> go) {
                          auto g = grad_sink(input);
                          for (std::int64_t y = 0; y < h; ++y) {
                            for (std::int64_t i = 0; i < w * c; ++i) g[y * w * c + i] += go[y * wo * c + i];
                          }
                        });
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& input, std::int64_t height, std::int64_t width) {
  require_rank(input, 3, "crop2d", "input");
  const std::int64_t w = input.dim(1), c = input.dim(2);
  require(height <= input.dim(0) && width <= w && height >= 0 && width >= 0, "crop2d: window exceeds input");
  std::vector<T> out(static_cast<std::size_t>(height * width * c));
  const T* x = input.data().data();
  for (std::int64_t y = 0; y < height; ++y) {
    std::copy(x + y * w * c, x + y * w * c + width * c, out.data() + y * width * c);
  }
  return make_result<T>(Shape{height, width, c}, std::move(out), {input}, "crop2d",
                        [input, height, width, w, c](std::span<const T> go) {
                          auto g = grad_sink(input);
                          for (std::int64_t y = 0; y < height; ++y) {
                            for (std::int64_t i = 0; i < width * c; ++i) g[y * w * c + i] += go[y * width * c + i];
                          }
                        });
}

template <typename T>
Tensor<T> gate_blend(const Tensor<T>& gate, const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 3, "gate_blend", "a");
  require_same_shape(a, b, "gate_blend");
  require_rank(gate, 3, "gate_blend", "gate");
  const std::int64_t c = a.dim(2);
  const std::int64_t gc = gate.dim(2);
  require(gate.dim(0) == a.dim(0) && gate.dim(1) == a.dim(1) && (gc == 1 || gc == c),
          "gate_blend: gate " + shape_str(gate.shape()) + " incompatible with " + shape_str(a.shape()));
  const std::int64_t pixels = a.dim(0) * a.dim(1);
  std::vector<T> out(static_cast<std::size_t>(a.numel()));
  const T* g = gate.data().data();
  const T* as = a.data().data();
  const T* bs = b.data().data();
  for (std::int64_t p = 0; p < pixels; ++p) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int64_t i = p * c + ch;
      const T gv = g[gc == 1 ? p : i];
      out[i] = gv * as[i] + (T(1) - gv) * bs[i];
    }
  }
  return make_result<T>(a.shape(), std::move(out), {gate, a, b}, "gate_blend",
                        [gate, a, b, pixels, c, gc](std::span<const T> go) {
                          const T* g = gate.data().data();
                          const T* as = a.data().data();
                          const T* bs = b.data().data();
                          T* ga = a.requires_grad() ? grad_sink(a).data() : nullptr;
                          T* gb = b.requires_grad() ? grad_sink(b).data() : nullptr;
                          T* gg = gate.requires_grad() ? grad_sink(gate).data() : nullptr;
                          for (std::int64_t p = 0; p < pixels; ++p) {
                            for (std::int64_t ch = 0; ch < c; ++ch) {
                              const std::int64_t i = p * c + ch;
                              const std::int64_t gi = gc == 1 ? p : i;
                              if (ga) ga[i] += go[i] * g[gi];
                              if (gb) gb[i] += go[i] * (T(1) - g[gi]);
                              if (gg) gg[gi] += go[i] * (as[i] - bs[i]);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  require_rank(x, 2, "softmax", "input");
  require(axis == 0 || axis == 1, "softmax: axis must be 0 or 1");
  const std::int64_t rows = x.dim(0), cols = x.dim(1);
  // Lines of length `len` with element stride `stride`, starting at line_start(i).
  const std::int64_t lines = axis == 1 ? rows : cols;
  const std::int64_t len = axis == 1 ? cols : rows;
  const std::int64_t stride = axis == 1 ? 1 : cols;
  const std::int64_t line_step = axis == 1 ? cols : 1;

  auto y = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
  const T* xs = x.data().data();
  for (std::int64_t l = 0; l < lines; ++l) {
    const std::int64_t base = l * line_step;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::int64_t j = 0; j < len; ++j) mx = std::max(mx, xs[base + j * stride]);
    T total = T(0);
    for (std::int64_t j = 0; j < len; ++j) {
      const T e = std::exp(xs[base + j * stride] - mx);
      (*y)[base + j * stride] = e;
      total += e;
    }
    for (std::int64_t j = 0; j < len; ++j) (*y)[base + j * stride] /= total;
  }
  std::vector<T> out = *y;
  return make_result<T>(x.shape(), std::move(out), {x}, "softmax",
                        [x, y, lines, len, stride, line_step](std::span<const T> go) {
                          auto g = grad_sink(x);
                          for (std::int64_t l = 0; l < lines; ++l) {
                            const std::int64_t base = l * line_step;
                            T dot = T(0);
                            for (std::int64_t j = 0; j < len; ++j) {
                              const auto i = base + j * stride;
                              dot += go[i] * (*y)[i];
                            }
                            for (std::int64_t j = 0; j < len; ++j) {
                              const auto i = base + j * stride;
                              g[i] += (*y)[i] * (go[i] - dot);
                            }
                          }
                        });
}

template <typename T>
BatchNorm<T> BatchNorm<T>::make(std::int64_t channels) {
  BatchNorm<T> bn;
  bn.gamma = Tensor<T>::full({channels}, T(1), true);
  bn.beta = Tensor<T>::zeros({channels}, true);
  bn.running_mean = Tensor<T>::zeros({channels});
  bn.running_var = Tensor<T>::full({channels}, T(1));
  return bn;
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, BatchNorm<T>& state, bool training) {
  require(input.defined() && input.rank() >= 1, "batchnorm: input must have a channel axis");
  const std::int64_t c = input.dim(-1);
  require(state.channels() == c, "batchnorm: input has " + std::to_string(c) + " channels, state has " +
                                     std::to_string(state.channels()));
  const std::int64_t m = c == 0 ? 0 : input.numel() / c;
  const T* x = input.data().data();
  const T* gamma = state.gamma.data().data();
  const T* beta = state.beta.data().data();

  // Per-channel shift and inverse standard deviation used for normalization.
  auto center = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
  const bool batch_stats = training && m > 0;
  if (batch_stats) {
    std::vector<double> mu(static_cast<std::size_t>(c), 0.0), var(static_cast<std::size_t>(c), 0.0);
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t ch = 0; ch < c; ++ch) mu[ch] += x[i * c + ch];
    }
    for (auto& v : mu) v /= static_cast<double>(m);
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double d = x[i * c + ch] - mu[ch];
        var[ch] += d * d;
      }
    }
    for (auto& v : var) v /= static_cast<double>(m);
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    const double unbias = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      (*center)[ch] = static_cast<T>(mu[ch]);
      (*inv_std)[ch] = static_cast<T>(1.0 / std::sqrt(var[ch] + static_cast<double>(state.eps)));
      rm[ch] = (T(1) - state.momentum) * rm[ch] + state.momentum * static_cast<T>(mu[ch]);
      rv[ch] = (T(1) - state.momentum) * rv[ch] + state.momentum * static_cast<T>(var[ch] * unbias);
    }
  } else {
    const auto rm = state.running_mean.data();
    const auto rv = state.running_var.data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      (*center)[ch] = rm[ch];
      (*inv_std)[ch] = T(1) / std::sqrt(rv[ch] + state.eps);
    }
  }

  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(input.numel()));
  std::vector<T> out(xhat->size());
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int64_t k = i * c + ch;
      (*xhat)[k] = (x[k] - (*center)[ch]) * (*inv_std)[ch];
      out[k] = gamma[ch] * (*xhat)[k] + beta[ch];
    }
  }
  Tensor<T> gamma_t = state.gamma;
  Tensor<T> beta_t = state.beta;
  return make_result<T>(
      input.shape(), std::move(out), {input, gamma_t, beta_t}, "batchnorm",
      [input, gamma_t, beta_t, xhat, inv_std, batch_stats, m, c](std::span<const T> go) {
        const T* gamma = gamma_t.data().data();
        std::vector<T> sum_g(static_cast<std::size_t>(c), T(0)), sum_gx(static_cast<std::size_t>(c), T(0));
        for (std::int64_t i = 0; i < m; ++i) {
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t k = i * c + ch;
            sum_g[ch] += go[k];
            sum_gx[ch] += go[k] * (*xhat)[k];
          }
        }
        if (gamma_t.requires_grad()) {
          auto gg = grad_sink(gamma_t);
          for (std::int64_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
        }
        if (beta_t.requires_grad()) {
          auto gb = grad_sink(beta_t);
          for (std::int64_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
        }
        if (!input.requires_grad()) return;
        auto gx = grad_sink(input);
        if (batch_stats) {
          const T inv_m = T(1) / static_cast<T>(m);
          for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const std::int64_t k = i * c + ch;
              // d xhat scaled by gamma; sums of (g*gamma) are gamma*sum_g.
              gx[k] += gamma[ch] * (*inv_std)[ch] *
                       (go[k] - inv_m * sum_g[ch] - (*xhat)[k] * inv_m * sum_gx[ch]);
            }
          }
        } else {
          for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const std::int64_t k = i * c + ch;
              gx[k] += go[k] * gamma[ch] * (*inv_std)[ch];
            }
          }
        }
      });
}

#define CPG_INSTANTIATE_OPS(T)                                                                     \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions); \
  template Tensor<T> maxpool2d(const Tensor<T>&, int, int);                                        \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                   \
  template Tensor<T> upsample(const Tensor<T>&, int, int);                                         \
  template Tensor<T> pad2d(const Tensor<T>&, int, int);                                            \
  template Tensor<T> crop2d(const Tensor<T>&, std::int64_t, std::int64_t);                         \
  template Tensor<T> gate_blend(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> softmax(const Tensor<T>&, int);                                               \
  template struct BatchNorm<T>;                                                                    \
  template Tensor<T> batchnorm(const Tensor<T>&, BatchNorm<T>&, bool);

CPG_INSTANTIATE_OPS(float)
CPG_INSTANTIATE_OPS(double)

}  // namespace cpg
