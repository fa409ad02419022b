#pragma once

#include <optional>
#include <string>

#include "mpseg/nn/layers.hpp"

namespace mpseg::nn {

template <typename T>
struct ResidualCache {
  ConvCache<T> conv1, conv2, shortcut;
  NormCache<T> norm1, norm2;
  ActCache<T> act1, act2;
};

/// conv -> IN -> PReLU -> conv -> IN -> PReLU, plus an identity shortcut or a
/// 1x1x1 projection (carrying the stride) when shape changes.
template <typename T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(int in_channels, int out_channels, int stride, int dilation, Rng& rng, int kernel = 3)
      : conv1_(in_channels, out_channels, kernel, stride, dilation, rng),
        norm1_(out_channels),
        act1_(out_channels),
        conv2_(out_channels, out_channels, kernel, 1, dilation, rng),
        norm2_(out_channels),
        act2_(out_channels) {
    if (in_channels != out_channels || stride != 1) shortcut_.emplace(in_channels, out_channels, 1, stride, 1, rng);
  }

  /// Shares every convolution (weights and biases) with `tied`, applied at
  /// `dilation`; normalization and activation parameters stay private.
  ResidualBlock(const ResidualBlock& tied, int dilation)
      : conv1_(tied.conv1_, dilation),
        norm1_(tied.conv1_.out_channels()),
        act1_(tied.conv1_.out_channels()),
        conv2_(tied.conv2_, dilation),
        norm2_(tied.conv2_.out_channels()),
        act2_(tied.conv2_.out_channels()) {
    if (tied.shortcut_) shortcut_.emplace(*tied.shortcut_, 1);
  }

  int in_channels() const { return conv1_.in_channels(); }
  int out_channels() const { return conv2_.out_channels(); }
  const Conv3d<T>& conv1() const { return conv1_; }
  const Conv3d<T>& conv2() const { return conv2_; }
  const std::optional<Conv3d<T>>& shortcut() const { return shortcut_; }

  ParamList<T> parameters() const {
    ParamList<T> out;
    append_prefixed(out, "conv1.", conv1_.parameters());
    append_prefixed(out, "norm1.", norm1_.parameters());
    append_prefixed(out, "act1.", act1_.parameters());
    append_prefixed(out, "conv2.", conv2_.parameters());
    append_prefixed(out, "norm2.", norm2_.parameters());
    append_prefixed(out, "act2.", act2_.parameters());
    if (shortcut_) append_prefixed(out, "shortcut.", shortcut_->parameters());
    return out;
  }

  Tensor<T> forward(const Tensor<T>& x, ResidualCache<T>* cache = nullptr) const {
    Tensor<T> h = conv1_.forward(x, cache ? &cache->conv1 : nullptr);
    h = norm1_.forward(h, cache ? &cache->norm1 : nullptr);
    h = act1_.forward(h, cache ? &cache->act1 : nullptr);
    h = conv2_.forward(h, cache ? &cache->conv2 : nullptr);
    h = norm2_.forward(h, cache ? &cache->norm2 : nullptr);
    h = act2_.forward(h, cache ? &cache->act2 : nullptr);
    if (shortcut_) {
      h += shortcut_->forward(x, cache ? &cache->shortcut : nullptr);
    } else {
      h += x;
    }
    return h;
  }

  Tensor<T> backward(const Tensor<T>& dy, const ResidualCache<T>& cache, bool need_input_grad = true) {
    Tensor<T> g = act2_.backward(dy, cache.act2);
    g = norm2_.backward(g, cache.norm2);
    g = conv2_.backward(g, cache.conv2);
    g = act1_.backward(g, cache.act1);
    g = norm1_.backward(g, cache.norm1);
    Tensor<T> dx = conv1_.backward(g, cache.conv1, need_input_grad);
    if (shortcut_) {
      Tensor<T> ds = shortcut_->backward(dy, cache.shortcut, need_input_grad);
      if (need_input_grad) dx += ds;
    } else if (need_input_grad) {
      dx += dy;
    }
    return dx;
  }

 private:
  Conv3d<T> conv1_;
  InstanceNorm3d<T> norm1_;
  PReLU<T> act1_;
  Conv3d<T> conv2_;
  InstanceNorm3d<T> norm2_;
  PReLU<T> act2_;
  std::optional<Conv3d<T>> shortcut_;
};

template <typename T>
struct UpCache {
  ConvCache<T> up;
  NormCache<T> norm;
  ActCache<T> act;
  int up_channels = 0;
  ResidualCache<T> res1, res2;
};

/// Transposed-conv upsampling, skip concatenation, two residual blocks.
template <typename T>
class UpBlock {
 public:
  UpBlock() = default;
  UpBlock(int in_channels, int out_channels, Rng& rng, int kernel = 3)
      : up_(in_channels, out_channels, rng, kernel),
        norm_(out_channels),
        act_(out_channels),
        res1_(2 * out_channels, out_channels, 1, 1, rng, kernel),
        res2_(out_channels, out_channels, 1, 1, rng, kernel) {}

  ParamList<T> parameters() const {
    ParamList<T> out;
    append_prefixed(out, "up.", up_.parameters());
    append_prefixed(out, "up_norm.", norm_.parameters());
    append_prefixed(out, "up_act.", act_.parameters());
    append_prefixed(out, "res1.", res1_.parameters());
    append_prefixed(out, "res2.", res2_.parameters());
    return out;
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& skip, UpCache<T>* cache = nullptr) const {
    Tensor<T> h = up_.forward(x, cache ? &cache->up : nullptr);
    h = norm_.forward(h, cache ? &cache->norm : nullptr);
    h = act_.forward(h, cache ? &cache->act : nullptr);
    if (cache) cache->up_channels = h.channels;
    h = concat_channels(h, skip);
    h = res1_.forward(h, cache ? &cache->res1 : nullptr);
    return res2_.forward(h, cache ? &cache->res2 : nullptr);
  }

  /// Returns {dL/dx, dL/dskip}.
  std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& dy, const UpCache<T>& cache) {
    Tensor<T> g = res2_.backward(dy, cache.res2);
    g = res1_.backward(g, cache.res1);
    Tensor<T> dup = slice_channels(g, 0, cache.up_channels);
    Tensor<T> dskip = slice_channels(g, cache.up_channels, g.channels - cache.up_channels);
    dup = act_.backward(dup, cache.act);
    dup = norm_.backward(dup, cache.norm);
    return {up_.backward(dup, cache.up), std::move(dskip)};
  }

 private:
  ConvTranspose3d<T> up_;
  InstanceNorm3d<T> norm_;
  PReLU<T> act_;
  ResidualBlock<T> res1_;
  ResidualBlock<T> res2_;
};

}  // namespace mpseg::nn
