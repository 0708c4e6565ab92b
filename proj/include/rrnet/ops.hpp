#pragma once

// Differentiable primitives used by transition functions, pre-nets and
// post-nets. Every forward op has a matching *_backward that maps an output
// gradient to input (and parameter) gradients. Inputs are never mutated.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rrnet/tensor.hpp"

namespace rrnet {

inline constexpr double kBnEpsilon = 1e-5;

template <typename T>
struct ConvParams {
  Tensor<T> weights;  // (out_channels, in_channels, kH, kW)
  std::optional<std::vector<T>> bias;
  int stride = 1;
  int padding = 0;

  [[nodiscard]] int out_channels() const { return weights.shape().n; }
  [[nodiscard]] int in_channels() const { return weights.shape().c; }
  [[nodiscard]] int kh() const { return weights.shape().h; }
  [[nodiscard]] int kw() const { return weights.shape().w; }
};

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weights;
  std::vector<T> bias;
};

inline int conv_output_size(int in, int k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

inline int deconv_output_size(int in, int k, int stride, int padding, int output_padding) {
  return (in - 1) * stride - 2 * padding + k + output_padding;
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  int channels, height, width;  // image side
  int kh, kw, stride, padding;
  int out_h, out_w;  // column side
  [[nodiscard]] int rows() const { return channels * kh * kw; }
  [[nodiscard]] int cols() const { return out_h * out_w; }
  [[nodiscard]] bool trivial() const {
    return kh == 1 && kw == 1 && stride == 1 && padding == 0;
  }
};

// Output columns ox with 0 <= ox*stride - padding + kx < width.
inline std::pair<int, int> valid_range(int out, int size, int stride, int offset) {
  int lo = 0;
  while (lo < out && lo * stride + offset < 0) ++lo;
  int hi = out;
  while (hi > lo && (hi - 1) * stride + offset >= size) --hi;
  return {lo, hi};
}

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const int cols = g.cols();
  for (int c = 0; c < g.channels; ++c) {
    const T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * cols;
        const int off = kx - g.padding;
        const auto [lo, hi] = valid_range(g.out_w, g.width, g.stride, off);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          T* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.width;
          std::fill(dst, dst + lo, T{0});
          if (g.stride == 1) {
            if (hi > lo) std::copy(src + lo + off, src + hi + off, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + off];
          }
          std::fill(dst + std::max(lo, hi), dst + g.out_w, T{0});
        }
      }
    }
  }
}

// Accumulates (+=) the column buffer back onto the image.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const int cols = g.cols();
  for (int c = 0; c < g.channels; ++c) {
    T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * cols;
        const int off = kx - g.padding;
        const auto [lo, hi] = valid_range(g.out_w, g.width, g.stride, off);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          const T* src = row + static_cast<std::size_t>(oy) * g.out_w;
          T* dst = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride + off] += src[ox];
        }
      }
    }
  }
}

template <typename T>
void check_conv_params(const ConvParams<T>& p, const char* op) {
  if (p.kh() < 1 || p.kw() < 1) throw ConfigError(std::string(op) + ": kernel size must be >= 1");
  if (p.stride < 1) throw ConfigError(std::string(op) + ": stride must be >= 1");
  if (p.padding < 0) throw ConfigError(std::string(op) + ": padding must be >= 0");
}

template <typename T>
ConvGeometry conv_geometry(const Shape& in, const ConvParams<T>& p) {
  check_conv_params(p, "conv2d");
  if (in.c != p.in_channels()) {
    throw ConfigError("conv2d: input has " + std::to_string(in.c) +
                      " channels but weights expect " + std::to_string(p.in_channels()));
  }
  if (in.h + 2 * p.padding < p.kh() || in.w + 2 * p.padding < p.kw()) {
    throw ConfigError("conv2d: padded input " + std::to_string(in.h + 2 * p.padding) + "x" +
                      std::to_string(in.w + 2 * p.padding) + " smaller than kernel " +
                      std::to_string(p.kh()) + "x" + std::to_string(p.kw()));
  }
  if (p.bias && static_cast<int>(p.bias->size()) != p.out_channels()) {
    throw ConfigError("conv2d: bias length " + std::to_string(p.bias->size()) +
                      " != out_channels " + std::to_string(p.out_channels()));
  }
  return ConvGeometry{in.c,
                      in.h,
                      in.w,
                      p.kh(),
                      p.kw(),
                      p.stride,
                      p.padding,
                      conv_output_size(in.h, p.kh(), p.stride, p.padding),
                      conv_output_size(in.w, p.kw(), p.stride, p.padding)};
}

template <typename T>
ConvGeometry deconv_geometry(const Shape& in, const ConvParams<T>& p, int output_padding) {
  check_conv_params(p, "deconv2d");
  if (in.c != p.out_channels()) {
    throw ConfigError("deconv2d: input has " + std::to_string(in.c) +
                      " channels but weights map from " + std::to_string(p.out_channels()));
  }
  if (output_padding < 0 || output_padding >= p.stride) {
    throw ConfigError("deconv2d: output_padding must lie in [0, stride)");
  }
  if (p.bias && static_cast<int>(p.bias->size()) != p.in_channels()) {
    throw ConfigError("deconv2d: bias length " + std::to_string(p.bias->size()) +
                      " != output channels " + std::to_string(p.in_channels()));
  }
  const int oh = deconv_output_size(in.h, p.kh(), p.stride, p.padding, output_padding);
  const int ow = deconv_output_size(in.w, p.kw(), p.stride, p.padding, output_padding);
  if (oh < 1 || ow < 1) throw ConfigError("deconv2d: non-positive output size");
  return ConvGeometry{p.in_channels(), oh, ow, p.kh(), p.kw(), p.stride, p.padding, in.h, in.w};
}

}  // namespace detail

/// Cross-correlation of `input` with `p.weights` (no kernel flip) plus bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& p) {
  using namespace detail;
  const Shape& in = input.shape();
  const ConvGeometry g = conv_geometry(in, p);
  Tensor<T> out(Shape{in.n, p.out_channels(), g.out_h, g.out_w});
  std::vector<T> col(g.trivial() ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
  CMapMat<T> w(p.weights.data(), p.out_channels(), g.rows());
  for (int n = 0; n < in.n; ++n) {
    const T* x = input.data() + n * in.sample();
    if (!g.trivial()) im2col(x, g, col.data());
    CMapMat<T> cm(g.trivial() ? x : col.data(), g.rows(), g.cols());
    MapMat<T> y(out.data() + n * out.shape().sample(), p.out_channels(), g.cols());
    y.noalias() = w * cm;
    if (p.bias) {
      for (int o = 0; o < p.out_channels(); ++o) y.row(o).array() += (*p.bias)[o];
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvParams<T>& p,
                             const Tensor<T>& grad_out) {
  using namespace detail;
  const Shape& in = input.shape();
  const ConvGeometry g = conv_geometry(in, p);
  const Shape expect{in.n, p.out_channels(), g.out_h, g.out_w};
  if (grad_out.shape() != expect) {
    throw ConfigError("conv2d_backward: gradient shape " + grad_out.shape().str() +
                      " != output shape " + expect.str());
  }
  ConvGrads<T> grads{Tensor<T>(in), Tensor<T>(p.weights.shape()),
                     std::vector<T>(p.out_channels(), T{0})};
  std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
  CMapMat<T> w(p.weights.data(), p.out_channels(), g.rows());
  MapMat<T> dw(grads.weights.data(), p.out_channels(), g.rows());
  for (int n = 0; n < in.n; ++n) {
    const T* x = input.data() + n * in.sample();
    CMapMat<T> dy(grad_out.data() + n * expect.sample(), p.out_channels(), g.cols());
    if (g.trivial()) {
      CMapMat<T> xm(x, g.rows(), g.cols());
      dw.noalias() += dy * xm.transpose();
      MapMat<T> dx(grads.input.data() + n * in.sample(), g.rows(), g.cols());
      dx.noalias() = w.transpose() * dy;
    } else {
      im2col(x, g, col.data());
      MapMat<T> cm(col.data(), g.rows(), g.cols());
      dw.noalias() += dy * cm.transpose();
      cm.noalias() = w.transpose() * dy;
      col2im(col.data(), g, grads.input.data() + n * in.sample());
    }
    for (int o = 0; o < p.out_channels(); ++o) grads.bias[o] += dy.row(o).sum();
  }
  return grads;
}

/// Transposed convolution: the adjoint of conv2d with the same weights.
/// `input` has p.out_channels() channels, the result p.in_channels().
/// output_padding < 0 selects stride - 1, which doubles the spatial size for
/// stride 2 with a 3x3 kernel and padding 1.
template <typename T>
Tensor<T> deconv2d(const Tensor<T>& input, const ConvParams<T>& p, int output_padding = -1) {
  using namespace detail;
  if (output_padding < 0) output_padding = p.stride - 1;
  const Shape& in = input.shape();
  const ConvGeometry g = deconv_geometry(in, p, output_padding);
  Tensor<T> out(Shape{in.n, g.channels, g.height, g.width});
  std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
  CMapMat<T> w(p.weights.data(), p.out_channels(), g.rows());
  for (int n = 0; n < in.n; ++n) {
    CMapMat<T> y(input.data() + n * in.sample(), p.out_channels(), g.cols());
    T* x = out.data() + n * out.shape().sample();
    if (g.trivial()) {
      MapMat<T> xm(x, g.rows(), g.cols());
      xm.noalias() = w.transpose() * y;
    } else {
      MapMat<T> cm(col.data(), g.rows(), g.cols());
      cm.noalias() = w.transpose() * y;
      col2im(col.data(), g, x);
    }
    if (p.bias) {
      for (int c = 0; c < g.channels; ++c) {
        T* plane = x + static_cast<std::size_t>(c) * out.shape().plane();
        for (std::size_t i = 0; i < out.shape().plane(); ++i) plane[i] += (*p.bias)[c];
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> deconv2d_backward(const Tensor<T>& input, const ConvParams<T>& p,
                               const Tensor<T>& grad_out, int output_padding = -1) {
  using namespace detail;
  if (output_padding < 0) output_padding = p.stride - 1;
  const Shape& in = input.shape();
  const ConvGeometry g = deconv_geometry(in, p, output_padding);
  const Shape expect{in.n, g.channels, g.height, g.width};
  if (grad_out.shape() != expect) {
    throw ConfigError("deconv2d_backward: gradient shape " + grad_out.shape().str() +
                      " != output shape " + expect.str());
  }
  ConvGrads<T> grads{Tensor<T>(in), Tensor<T>(p.weights.shape()),
                     std::vector<T>(g.channels, T{0})};
  std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
  CMapMat<T> w(p.weights.data(), p.out_channels(), g.rows());
  MapMat<T> dw(grads.weights.data(), p.out_channels(), g.rows());
  for (int n = 0; n < in.n; ++n) {
    const T* dx = grad_out.data() + n * expect.sample();
    if (!g.trivial()) im2col(dx, g, col.data());
    CMapMat<T> cm(g.trivial() ? dx : col.data(), g.rows(), g.cols());
    CMapMat<T> y(input.data() + n * in.sample(), p.out_channels(), g.cols());
    MapMat<T> dy(grads.input.data() + n * in.sample(), p.out_channels(), g.cols());
    dy.noalias() = w * cm;
    dw.noalias() += y * cm.transpose();
    for (int c = 0; c < g.channels; ++c) {
      const T* plane = dx + static_cast<std::size_t>(c) * expect.plane();
      T s{0};
      for (std::size_t i = 0; i < expect.plane(); ++i) s += plane[i];
      grads.bias[c] += s;
    }
  }
  return grads;
}

namespace detail {
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
CArrMap<T> flat(const Tensor<T>& t) { return CArrMap<T>(t.data(), static_cast<Eigen::Index>(t.size())); }
template <typename T>
ArrMap<T> flat(Tensor<T>& t) { return ArrMap<T>(t.data(), static_cast<Eigen::Index>(t.size())); }
template <typename T>
CArrMap<T> plane_of(const Tensor<T>& t, int n, int c) {
  return CArrMap<T>(t.data() + t.offset(n, c, 0, 0), static_cast<Eigen::Index>(t.shape().plane()));
}
template <typename T>
ArrMap<T> plane_of(Tensor<T>& t, int n, int c) {
  return ArrMap<T>(t.data() + t.offset(n, c, 0, 0), static_cast<Eigen::Index>(t.shape().plane()));
}
}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const auto x = detail::flat(input);
  detail::flat(out) = (x < T{0}).select(T{0}, x);  // NaN passes through
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  require_same_shape(input, grad_out, "relu_backward");
  Tensor<T> g(input.shape());
  detail::flat(g) = (detail::flat(input) > T{0}).select(detail::flat(grad_out), T{0});
  return g;
}

template <typename T>
struct BnStats {
  std::vector<T> mean;
  std::vector<T> variance;
  T epsilon = static_cast<T>(kBnEpsilon);
  std::optional<std::vector<T>> scale;
  std::optional<std::vector<T>> shift;

  [[nodiscard]] int channels() const { return static_cast<int>(mean.size()); }
};

/// Per-channel mean and biased variance over batch and spatial positions.
template <typename T>
BnStats<T> compute_bn_stats(const Tensor<T>& batch, T epsilon = static_cast<T>(kBnEpsilon)) {
  const Shape& s = batch.shape();
  if (batch.empty()) throw ConfigError("compute_bn_stats: empty batch");
  BnStats<T> st;
  st.epsilon = epsilon;
  st.mean.assign(s.c, T{0});
  st.variance.assign(s.c, T{0});
  const double count = static_cast<double>(s.n) * s.plane();
  for (int c = 0; c < s.c; ++c) {
    double sum = 0;
    for (int n = 0; n < s.n; ++n) sum += detail::plane_of(batch, n, c).template cast<double>().sum();
    const double mean = sum / count;
    double sq = 0;
    for (int n = 0; n < s.n; ++n)
      sq += (detail::plane_of(batch, n, c).template cast<double>() - mean).square().sum();
    st.mean[c] = static_cast<T>(mean);
    st.variance[c] = static_cast<T>(sq / count);
  }
  return st;
}

namespace detail {
template <typename T>
void check_bn(const Tensor<T>& input, const BnStats<T>& st, const char* op) {
  const int c = input.shape().c;
  auto bad = [&](std::size_t len) { return static_cast<int>(len) != c; };
  if (bad(st.mean.size()) || bad(st.variance.size()) || (st.scale && bad(st.scale->size())) ||
      (st.shift && bad(st.shift->size()))) {
    throw ConfigError(std::string(op) + ": statistics have " + std::to_string(st.mean.size()) +
                      " channels, input has " + std::to_string(c));
  }
  if (!(st.epsilon > T{0})) throw ConfigError(std::string(op) + ": epsilon must be > 0");
}
}  // namespace detail

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const BnStats<T>& st) {
  detail::check_bn(input, st, "batchnorm");
  const Shape& s = input.shape();
  Tensor<T> out(s);
  for (int c = 0; c < s.c; ++c) {
    const T inv = T{1} / std::sqrt(st.variance[c] + st.epsilon);
    const T a = st.scale ? (*st.scale)[c] * inv : inv;
    const T b = (st.shift ? (*st.shift)[c] : T{0}) - a * st.mean[c];
    for (int n = 0; n < s.n; ++n) detail::plane_of(out, n, c) = a * detail::plane_of(input, n, c) + b;
  }
  return out;
}

template <typename T>
struct BnGrads {
  Tensor<T> input;
  std::vector<T> scale;  // empty unless stats carry scale
  std::vector<T> shift;  // empty unless stats carry shift
};

namespace detail {
template <typename T>
BnGrads<T> bn_backward_impl(const Tensor<T>& input, const BnStats<T>& st,
                            const Tensor<T>& grad_out, bool through_stats) {
  check_bn(input, st, "batchnorm_backward");
  require_same_shape(input, grad_out, "batchnorm_backward");
  const Shape& s = input.shape();
  BnGrads<T> g{Tensor<T>(s), {}, {}};
  if (st.scale) g.scale.assign(s.c, T{0});
  if (st.shift) g.shift.assign(s.c, T{0});
  const double m = static_cast<double>(s.n) * s.plane();
  for (int c = 0; c < s.c; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(st.variance[c] + st.epsilon));
    const double gamma = st.scale ? static_cast<double>((*st.scale)[c]) : 1.0;
    const double mu = st.mean[c];
    double sum_dy = 0, sum_dy_xhat = 0;
    for (int n = 0; n < s.n; ++n) {
      const auto dy = plane_of(grad_out, n, c).template cast<double>();
      sum_dy += dy.sum();
      sum_dy_xhat += (dy * ((plane_of(input, n, c).template cast<double>() - mu) * inv)).sum();
    }
    if (st.scale) g.scale[c] = static_cast<T>(sum_dy_xhat);
    if (st.shift) g.shift[c] = static_cast<T>(sum_dy);
    const double k = gamma * inv;
    for (int n = 0; n < s.n; ++n) {
      const auto dy = plane_of(grad_out, n, c).template cast<double>();
      if (through_stats) {
        const auto xhat = (plane_of(input, n, c).template cast<double>() - mu) * inv;
        plane_of(g.input, n, c) = (k * (dy - sum_dy / m - xhat * (sum_dy_xhat / m))).template cast<T>();
      } else {
        plane_of(g.input, n, c) = (k * dy).template cast<T>();
      }
    }
  }
  return g;
}
}  // namespace detail

/// Backward of batchnorm with the statistics held fixed (inference mode).
template <typename T>
BnGrads<T> batchnorm_backward(const Tensor<T>& input, const BnStats<T>& st,
                              const Tensor<T>& grad_out) {
  return detail::bn_backward_impl(input, st, grad_out, false);
}

/// Backward of batchnorm(x, compute_bn_stats(x)): differentiates through the
/// batch mean and variance. `st` must be the statistics of `input`.
template <typename T>
BnGrads<T> batchnorm_train_backward(const Tensor<T>& input, const BnStats<T>& st,
                                    const Tensor<T>& grad_out) {
  return detail::bn_backward_impl(input, st, grad_out, true);
}

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input) {
  const Shape& s = input.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ConfigError("maxpool2x2: spatial size " + std::to_string(s.h) + "x" +
                      std::to_string(s.w) + " is not even");
  }
  Tensor<T> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h / 2; ++y)
        for (int x = 0; x < s.w / 2; ++x) {
          const T a = input.at(n, c, 2 * y, 2 * x), b = input.at(n, c, 2 * y, 2 * x + 1);
          const T d = input.at(n, c, 2 * y + 1, 2 * x), e = input.at(n, c, 2 * y + 1, 2 * x + 1);
          out.at(n, c, y, x) = std::max(std::max(a, b), std::max(d, e));
        }
  return out;
}

// Routes each gradient to the first maximal element of its window.
template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  const Shape& s = input.shape();
  if (grad_out.shape() != Shape{s.n, s.c, s.h / 2, s.w / 2}) {
    throw ConfigError("maxpool2x2_backward: gradient shape " + grad_out.shape().str());
  }
  Tensor<T> g(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h / 2; ++y)
        for (int x = 0; x < s.w / 2; ++x) {
          int by = 2 * y, bx = 2 * x;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx)
              if (input.at(n, c, 2 * y + dy, 2 * x + dx) > input.at(n, c, by, bx)) {
                by = 2 * y + dy;
                bx = 2 * x + dx;
              }
          g.at(n, c, by, bx) += grad_out.at(n, c, y, x);
        }
  return g;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  const Shape& s = input.shape();
  Tensor<T> out(Shape{s.n, s.c, 1, 1});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = input.data() + input.offset(n, c, 0, 0);
      double sum = 0;
      for (std::size_t i = 0; i < s.plane(); ++i) sum += p[i];
      out.at(n, c, 0, 0) = static_cast<T>(sum / static_cast<double>(s.plane()));
    }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& input_shape, const Tensor<T>& grad_out) {
  const Shape& s = input_shape;
  if (grad_out.shape() != Shape{s.n, s.c, 1, 1}) {
    throw ConfigError("global_avg_pool_backward: gradient shape " + grad_out.shape().str());
  }
  Tensor<T> g(s);
  const T scale = T{1} / static_cast<T>(s.plane());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      T* p = g.data() + g.offset(n, c, 0, 0);
      std::fill(p, p + s.plane(), grad_out.at(n, c, 0, 0) * scale);
    }
  return g;
}

/// Affine map per batch element: out[n] = W * flatten(in[n]) + b.
/// `weights` has shape (out_features, in_features, 1, 1); the result has
/// shape (batch, out_features, 1, 1).
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weights,
                          const std::vector<T>& bias) {
  const int in_features = static_cast<int>(input.shape().sample());
  const int out_features = weights.shape().n;
  if (weights.shape().sample() != static_cast<std::size_t>(in_features)) {
    throw ConfigError("fully_connected: input has " + std::to_string(in_features) +
                      " features, weights expect " + std::to_string(weights.shape().sample()));
  }
  if (!bias.empty() && static_cast<int>(bias.size()) != out_features) {
    throw ConfigError("fully_connected: bias length " + std::to_string(bias.size()) +
                      " != " + std::to_string(out_features));
  }
  const int n = input.shape().n;
  Tensor<T> out(Shape{n, out_features, 1, 1});
  detail::CMapMat<T> w(weights.data(), out_features, in_features);
  detail::CMapMat<T> x(input.data(), n, in_features);
  detail::MapMat<T> y(out.data(), n, out_features);
  y.noalias() = x * w.transpose();
  if (!bias.empty()) {
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out_features; ++o) y(i, o) += bias[o];
  }
  return out;
}

template <typename T>
struct FcGrads {
  Tensor<T> input;
  Tensor<T> weights;
  std::vector<T> bias;
};

template <typename T>
FcGrads<T> fully_connected_backward(const Tensor<T>& input, const Tensor<T>& weights,
                                    const Tensor<T>& grad_out) {
  const int in_features = static_cast<int>(input.shape().sample());
  const int out_features = weights.shape().n;
  const int n = input.shape().n;
  if (grad_out.shape() != Shape{n, out_features, 1, 1}) {
    throw ConfigError("fully_connected_backward: gradient shape " + grad_out.shape().str());
  }
  FcGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(weights.shape()),
               std::vector<T>(out_features, T{0})};
  detail::CMapMat<T> w(weights.data(), out_features, in_features);
  detail::CMapMat<T> x(input.data(), n, in_features);
  detail::CMapMat<T> dy(grad_out.data(), n, out_features);
  detail::MapMat<T> dx(g.input.data(), n, in_features);
  detail::MapMat<T> dw(g.weights.data(), out_features, in_features);
  dx.noalias() = dy * w;
  dw.noalias() = dy.transpose() * x;
  for (int o = 0; o < out_features; ++o) g.bias[o] = dy.col(o).sum();
  return g;
}

template <typename T>
struct LossResult {
  T loss;
  Tensor<T> grad;  // d loss / d logits
};

/// Mean softmax cross-entropy over the batch. Logits have shape (N, K, 1, 1).
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  const int n = logits.shape().n;
  const int k = static_cast<int>(logits.shape().sample());
  if (static_cast<int>(labels.size()) != n) {
    throw ConfigError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                      " labels for batch of " + std::to_string(n));
  }
  LossResult<T> r{T{0}, Tensor<T>(logits.shape())};
  double total = 0;
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      throw ConfigError("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                        " outside [0, " + std::to_string(k) + ")");
    }
    const T* z = logits.data() + static_cast<std::size_t>(i) * k;
    const double zmax = *std::max_element(z, z + k);
    double denom = 0;
    for (int j = 0; j < k; ++j) denom += std::exp(z[j] - zmax);
    const double log_denom = std::log(denom);
    total += log_denom - (z[labels[i]] - zmax);
    T* g = r.grad.data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      const double pj = std::exp(z[j] - zmax - log_denom);
      g[j] = static_cast<T>((pj - (j == labels[i] ? 1.0 : 0.0)) / n);
    }
  }
  r.loss = static_cast<T>(total / n);
  return r;
}

/// Zero-mean Gaussian samples with standard deviation sqrt(2 / fan_in).
template <typename T>
Tensor<T> he_init(const Shape& shape, int fan_in, std::uint64_t seed) {
  if (fan_in <= 0) throw ConfigError("he_init: fan_in must be > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(dist(rng));
  return out;
}

}  // namespace rrnet
