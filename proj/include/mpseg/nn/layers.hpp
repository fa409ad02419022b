#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "mpseg/nn/tensor.hpp"
#include "mpseg/rng.hpp"

namespace mpseg::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Cubic-kernel sliding geometry: grid index o touches image index
/// o * stride - pad + tap * dilation for tap in [0, kernel).
struct ConvGeom {
  int kernel = 3;
  int stride = 1;
  int dilation = 1;
  int pad = 1;

  int grid_extent(int image_extent) const { return (image_extent + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1; }
  Dims3 grid_dims(Dims3 image) const { return {grid_extent(image.x), grid_extent(image.y), grid_extent(image.z)}; }
  int taps() const { return kernel * kernel * kernel; }
  bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

namespace detail {

// Column blocks are whole grid lines (fixed y, z) so inner loops run along x.
inline int lines_per_block(int rows, int line_len, int total_lines) {
  const std::size_t budget = std::size_t{1} << 21;
  const std::size_t per_line = static_cast<std::size_t>(std::max(1, rows)) * std::max(1, line_len);
  return std::clamp(static_cast<int>(budget / per_line), 1, std::max(1, total_lines));
}

/// cols (C*k^3 x nlines*grid.x, row-major) <- patches of `img`.
template <typename T>
void im2col(const T* img, int channels, Dims3 image, Dims3 grid, const ConvGeom& g, int line0, int nlines, T* cols) {
  const int k = g.kernel;
  const int ncols = nlines * grid.x;
  const std::size_t plane = static_cast<std::size_t>(image.x) * image.y;
  for (int c = 0; c < channels; ++c) {
    const T* src_c = img + static_cast<std::size_t>(c) * image.count();
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          T* row = cols + static_cast<std::size_t>(((c * k + kz) * k + ky) * k + kx) * ncols;
          for (int l = 0; l < nlines; ++l) {
            const int line = line0 + l;
            const int oy = line % grid.y;
            const int oz = line / grid.y;
            const int iz = oz * g.stride - g.pad + kz * g.dilation;
            const int iy = oy * g.stride - g.pad + ky * g.dilation;
            T* dst = row + static_cast<std::size_t>(l) * grid.x;
            if (iz < 0 || iz >= image.z || iy < 0 || iy >= image.y) {
              std::fill(dst, dst + grid.x, T{});
              continue;
            }
            const T* src = src_c + iz * plane + static_cast<std::size_t>(iy) * image.x;
            const int off = kx * g.dilation - g.pad;
            if (g.stride == 1) {
              const int lo = std::clamp(-off, 0, grid.x);
              const int hi = std::clamp(image.x - off, lo, grid.x);
              std::fill(dst, dst + lo, T{});
              std::copy(src + lo + off, src + hi + off, dst + lo);
              std::fill(dst + hi, dst + grid.x, T{});
            } else {
              for (int ox = 0; ox < grid.x; ++ox) {
                const int ix = ox * g.stride + off;
                dst[ox] = (ix >= 0 && ix < image.x) ? src[ix] : T{};
              }
            }
          }
        }
  }
}

/// img += scatter of cols (adjoint of im2col).
template <typename T>
void col2im(const T* cols, int channels, Dims3 image, Dims3 grid, const ConvGeom& g, int line0, int nlines, T* img) {
  const int k = g.kernel;
  const int ncols = nlines * grid.x;
  const std::size_t plane = static_cast<std::size_t>(image.x) * image.y;
  for (int c = 0; c < channels; ++c) {
    T* dst_c = img + static_cast<std::size_t>(c) * image.count();
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const T* row = cols + static_cast<std::size_t>(((c * k + kz) * k + ky) * k + kx) * ncols;
          for (int l = 0; l < nlines; ++l) {
            const int line = line0 + l;
            const int oy = line % grid.y;
            const int oz = line / grid.y;
            const int iz = oz * g.stride - g.pad + kz * g.dilation;
            const int iy = oy * g.stride - g.pad + ky * g.dilation;
            if (iz < 0 || iz >= image.z || iy < 0 || iy >= image.y) continue;
            const T* src = row + static_cast<std::size_t>(l) * grid.x;
            T* dst = dst_c + iz * plane + static_cast<std::size_t>(iy) * image.x;
            const int off = kx * g.dilation - g.pad;
            for (int ox = 0; ox < grid.x; ++ox) {
              const int ix = ox * g.stride + off;
              if (ix >= 0 && ix < image.x) dst[ix] += src[ox];
            }
          }
        }
  }
}

template <typename T>
void uniform_init(Param<T>& p, double bound, Rng& rng) {
  for (auto& v : p.value) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace detail

template <typename T>
struct ConvCache {
  Tensor<T> input;
};

/// 3D convolution, weight layout (out, in, kz, ky, kx). Padding keeps
/// resolution for odd kernels: pad = dilation * (kernel - 1) / 2.
template <typename T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(int in_channels, int out_channels, int kernel, int stride, int dilation, Rng& rng)
      : in_(in_channels), out_(out_channels), geom_{kernel, stride, dilation, dilation * (kernel - 1) / 2} {
    weight_ = std::make_shared<Param<T>>(std::vector<int>{out_, in_, kernel, kernel, kernel});
    bias_ = std::make_shared<Param<T>>(std::vector<int>{out_});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ * geom_.taps()));
    detail::uniform_init(*weight_, bound, rng);
    detail::uniform_init(*bias_, bound, rng);
  }

  /// Reuses another layer's weight and bias storage at a different dilation.
  Conv3d(const Conv3d& tied, int dilation)
      : in_(tied.in_), out_(tied.out_), geom_{tied.geom_.kernel, tied.geom_.stride, dilation,
                                              dilation * (tied.geom_.kernel - 1) / 2},
        weight_(tied.weight_), bias_(tied.bias_) {}

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  const ConvGeom& geom() const { return geom_; }
  const ParamPtr<T>& weight() const { return weight_; }
  const ParamPtr<T>& bias() const { return bias_; }
  ParamList<T> parameters() const { return {{"weight", weight_}, {"bias", bias_}}; }

  Dims3 output_dims(Dims3 in) const { return geom_.grid_dims(in); }

  Tensor<T> forward(const Tensor<T>& x, ConvCache<T>* cache = nullptr) const {
    if (x.channels != in_) fail(ErrorCode::ChannelMismatch, "conv expects " + std::to_string(in_) + " channels");
    const Dims3 od = output_dims(x.dims);
    Tensor<T> y(out_, od);
    const int K = in_ * geom_.taps();
    const auto nout = static_cast<Eigen::Index>(od.count());
    Eigen::Map<const RowMatrix<T>> W(weight_->value.data(), out_, K);
    Eigen::Map<RowMatrix<T>> Y(y.data.data(), out_, nout);
    if (geom_.pointwise()) {
      Eigen::Map<const RowMatrix<T>> X(x.data.data(), in_, nout);
      Y.noalias() = W * X;
    } else {
      const int lines = od.y * od.z;
      const int per = detail::lines_per_block(K, od.x, lines);
      RowMatrix<T> cols;
      for (int l0 = 0; l0 < lines; l0 += per) {
        const int nl = std::min(per, lines - l0);
        const Eigen::Index nb = static_cast<Eigen::Index>(nl) * od.x;
        cols.resize(K, nb);
        detail::im2col(x.data.data(), in_, x.dims, od, geom_, l0, nl, cols.data());
        Y.middleCols(static_cast<Eigen::Index>(l0) * od.x, nb).noalias() = W * cols;
      }
    }
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias_->value.data(), out_);
    Y.colwise() += b;
    if (cache) cache->input = x;
    return y;
  }

  /// Accumulates parameter gradients; returns dL/dx when `need_input_grad`.
  Tensor<T> backward(const Tensor<T>& dy, const ConvCache<T>& cache, bool need_input_grad = true) {
    return backward_impl(dy, cache, need_input_grad, true);
  }

  /// dL/dx only; parameter gradients untouched.
  Tensor<T> input_gradient(const Tensor<T>& dy, const ConvCache<T>& cache) const {
    return const_cast<Conv3d*>(this)->backward_impl(dy, cache, true, false);
  }

 private:
  Tensor<T> backward_impl(const Tensor<T>& dy, const ConvCache<T>& cache, bool need_dx, bool param_grads) {
    const Tensor<T>& x = cache.input;
    const Dims3 od = dy.dims;
    const int K = in_ * geom_.taps();
    const auto nout = static_cast<Eigen::Index>(od.count());
    Eigen::Map<const RowMatrix<T>> W(weight_->value.data(), out_, K);
    Eigen::Map<RowMatrix<T>> dW(weight_->grad.data(), out_, K);
    Eigen::Map<const RowMatrix<T>> DY(dy.data.data(), out_, nout);
    if (param_grads) {
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(bias_->grad.data(), out_);
      db += DY.rowwise().sum();
    }
    Tensor<T> dx;
    if (need_dx) dx = Tensor<T>(in_, x.dims);
    if (geom_.pointwise()) {
      Eigen::Map<const RowMatrix<T>> X(x.data.data(), in_, nout);
      if (param_grads) dW.noalias() += DY * X.transpose();
      if (need_dx) {
        Eigen::Map<RowMatrix<T>> DX(dx.data.data(), in_, nout);
        DX.noalias() = W.transpose() * DY;
      }
      return dx;
    }
    const int lines = od.y * od.z;
    const int per = detail::lines_per_block(K, od.x, lines);
    RowMatrix<T> cols, dcols;
    for (int l0 = 0; l0 < lines; l0 += per) {
      const int nl = std::min(per, lines - l0);
      const Eigen::Index nb = static_cast<Eigen::Index>(nl) * od.x;
      const auto dyb = DY.middleCols(static_cast<Eigen::Index>(l0) * od.x, nb);
      if (param_grads) {
        cols.resize(K, nb);
        detail::im2col(x.data.data(), in_, x.dims, od, geom_, l0, nl, cols.data());
        dW.noalias() += dyb * cols.transpose();
      }
      if (need_dx) {
        dcols.resize(K, nb);
        dcols.noalias() = W.transpose() * dyb;
        detail::col2im(dcols.data(), in_, x.dims, od, geom_, l0, nl, dx.data.data());
      }
    }
    return dx;
  }

  int in_ = 0;
  int out_ = 0;
  ConvGeom geom_;
  ParamPtr<T> weight_;
  ParamPtr<T> bias_;
};

/// Strided transposed convolution (kernel 3, stride 2, pad 1, output pad 1):
/// doubles every spatial extent. Weight layout (in, out, kz, ky, kx).
template <typename T>
class ConvTranspose3d {
 public:
  ConvTranspose3d() = default;
  ConvTranspose3d(int in_channels, int out_channels, Rng& rng, int kernel = 3, int stride = 2)
      : in_(in_channels), out_(out_channels), geom_{kernel, stride, 1, (kernel - 1) / 2},
        output_pad_(stride - 1) {
    weight_ = std::make_shared<Param<T>>(std::vector<int>{in_, out_, kernel, kernel, kernel});
    bias_ = std::make_shared<Param<T>>(std::vector<int>{out_});
    const double bound = 1.0 / std::sqrt(static_cast<double>(out_ * geom_.taps()));
    detail::uniform_init(*weight_, bound, rng);
    detail::uniform_init(*bias_, bound, rng);
  }

  ParamList<T> parameters() const { return {{"weight", weight_}, {"bias", bias_}}; }
  const ParamPtr<T>& weight() const { return weight_; }

  Dims3 output_dims(Dims3 in) const {
    auto ext = [&](int n) { return (n - 1) * geom_.stride - 2 * geom_.pad + geom_.kernel + output_pad_; };
    return {ext(in.x), ext(in.y), ext(in.z)};
  }

  Tensor<T> forward(const Tensor<T>& x, ConvCache<T>* cache = nullptr) const {
    if (x.channels != in_) fail(ErrorCode::ChannelMismatch, "transposed conv channel mismatch");
    const Dims3 od = output_dims(x.dims);
    Tensor<T> y(out_, od);
    const int K = out_ * geom_.taps();
    const Dims3 grid = x.dims;
    const auto nin = static_cast<Eigen::Index>(grid.count());
    Eigen::Map<const RowMatrix<T>> W(weight_->value.data(), in_, K);
    Eigen::Map<const RowMatrix<T>> X(x.data.data(), in_, nin);
    const int lines = grid.y * grid.z;
    const int per = detail::lines_per_block(K, grid.x, lines);
    RowMatrix<T> cols;
    for (int l0 = 0; l0 < lines; l0 += per) {
      const int nl = std::min(per, lines - l0);
      const Eigen::Index nb = static_cast<Eigen::Index>(nl) * grid.x;
      cols.resize(K, nb);
      cols.noalias() = W.transpose() * X.middleCols(static_cast<Eigen::Index>(l0) * grid.x, nb);
      detail::col2im(cols.data(), out_, od, grid, geom_, l0, nl, y.data.data());
    }
    Eigen::Map<RowMatrix<T>> Y(y.data.data(), out_, static_cast<Eigen::Index>(od.count()));
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias_->value.data(), out_);
    Y.colwise() += b;
    if (cache) cache->input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const ConvCache<T>& cache, bool need_input_grad = true) {
    const Tensor<T>& x = cache.input;
    const Dims3 grid = x.dims;
    const int K = out_ * geom_.taps();
    const auto nin = static_cast<Eigen::Index>(grid.count());
    Eigen::Map<const RowMatrix<T>> W(weight_->value.data(), in_, K);
    Eigen::Map<RowMatrix<T>> dW(weight_->grad.data(), in_, K);
    Eigen::Map<const RowMatrix<T>> X(x.data.data(), in_, nin);
    Eigen::Map<const RowMatrix<T>> DY(dy.data.data(), out_, static_cast<Eigen::Index>(dy.dims.count()));
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(bias_->grad.data(), out_);
    db += DY.rowwise().sum();
    Tensor<T> dx;
    if (need_input_grad) dx = Tensor<T>(in_, grid);
    Eigen::Map<RowMatrix<T>> DX(need_input_grad ? dx.data.data() : nullptr, need_input_grad ? in_ : 0,
                                need_input_grad ? nin : 0);
    const int lines = grid.y * grid.z;
    const int per = detail::lines_per_block(K, grid.x, lines);
    RowMatrix<T> cols;
    for (int l0 = 0; l0 < lines; l0 += per) {
      const int nl = std::min(per, lines - l0);
      const Eigen::Index nb = static_cast<Eigen::Index>(nl) * grid.x;
      const Eigen::Index c0 = static_cast<Eigen::Index>(l0) * grid.x;
      cols.resize(K, nb);
      detail::im2col(dy.data.data(), out_, dy.dims, grid, geom_, l0, nl, cols.data());
      dW.noalias() += X.middleCols(c0, nb) * cols.transpose();
      if (need_input_grad) DX.middleCols(c0, nb).noalias() = W * cols;
    }
    return dx;
  }

 private:
  int in_ = 0;
  int out_ = 0;
  ConvGeom geom_;
  int output_pad_ = 1;
  ParamPtr<T> weight_;
  ParamPtr<T> bias_;
};

template <typename T>
struct NormCache {
  Tensor<T> normalized;
  std::vector<T> inv_std;
};

/// Per-sample, per-channel normalization with learnable affine.
template <typename T>
class InstanceNorm3d {
 public:
  InstanceNorm3d() = default;
  explicit InstanceNorm3d(int channels, double eps = 1e-5) : channels_(channels), eps_(eps) {
    gamma_ = std::make_shared<Param<T>>(std::vector<int>{channels});
    beta_ = std::make_shared<Param<T>>(std::vector<int>{channels});
    std::fill(gamma_->value.begin(), gamma_->value.end(), T{1});
  }

  ParamList<T> parameters() const { return {{"weight", gamma_}, {"bias", beta_}}; }

  Tensor<T> forward(const Tensor<T>& x, NormCache<T>* cache = nullptr) const {
    Tensor<T> y(x.channels, x.dims);
    const std::size_t n = x.voxels();
    if (cache) {
      cache->normalized = Tensor<T>(x.channels, x.dims);
      cache->inv_std.assign(x.channels, T{});
    }
    for (int c = 0; c < x.channels; ++c) {
      const T* src = x.channel(c);
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += src[i];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = src[i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double inv = 1.0 / std::sqrt(var + eps_);
      const T g = gamma_->value[c];
      const T b = beta_->value[c];
      T* dst = y.channel(c);
      T* xhat = cache ? cache->normalized.channel(c) : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const T h = static_cast<T>((src[i] - mean) * inv);
        if (xhat) xhat[i] = h;
        dst[i] = g * h + b;
      }
      if (cache) cache->inv_std[c] = static_cast<T>(inv);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const NormCache<T>& cache) {
    Tensor<T> dx(dy.channels, dy.dims);
    const std::size_t n = dy.voxels();
    for (int c = 0; c < dy.channels; ++c) {
      const T* g = dy.channel(c);
      const T* h = cache.normalized.channel(c);
      double sum_g = 0.0, sum_gh = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        sum_g += g[i];
        sum_gh += static_cast<double>(g[i]) * h[i];
      }
      gamma_->grad[c] += static_cast<T>(sum_gh);
      beta_->grad[c] += static_cast<T>(sum_g);
      const double gamma = gamma_->value[c];
      const double scale = gamma * cache.inv_std[c];
      const double mg = sum_g / static_cast<double>(n);
      const double mgh = sum_gh / static_cast<double>(n);
      T* d = dx.channel(c);
      for (std::size_t i = 0; i < n; ++i) d[i] = static_cast<T>(scale * (g[i] - mg - h[i] * mgh));
    }
    return dx;
  }

 private:
  int channels_ = 0;
  double eps_ = 1e-5;
  ParamPtr<T> gamma_;
  ParamPtr<T> beta_;
};

template <typename T>
struct ActCache {
  Tensor<T> input;
};

/// Parametric ReLU with one learnable negative slope per channel.
template <typename T>
class PReLU {
 public:
  PReLU() = default;
  explicit PReLU(int channels, T init = T(0.25)) {
    slope_ = std::make_shared<Param<T>>(std::vector<int>{channels});
    std::fill(slope_->value.begin(), slope_->value.end(), init);
  }

  ParamList<T> parameters() const { return {{"weight", slope_}}; }

  Tensor<T> forward(const Tensor<T>& x, ActCache<T>* cache = nullptr) const {
    Tensor<T> y(x.channels, x.dims);
    const std::size_t n = x.voxels();
    for (int c = 0; c < x.channels; ++c) {
      const T a = slope_->value[c];
      const T* s = x.channel(c);
      T* d = y.channel(c);
      for (std::size_t i = 0; i < n; ++i) d[i] = s[i] > T{} ? s[i] : a * s[i];
    }
    if (cache) cache->input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const ActCache<T>& cache) {
    Tensor<T> dx(dy.channels, dy.dims);
    const std::size_t n = dy.voxels();
    for (int c = 0; c < dy.channels; ++c) {
      const T a = slope_->value[c];
      const T* s = cache.input.channel(c);
      const T* g = dy.channel(c);
      T* d = dx.channel(c);
      double da = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (s[i] > T{}) {
          d[i] = g[i];
        } else {
          d[i] = a * g[i];
          da += static_cast<double>(g[i]) * s[i];
        }
      }
      slope_->grad[c] += static_cast<T>(da);
    }
    return dx;
  }

 private:
  ParamPtr<T> slope_;
};

}  // namespace mpseg::nn
