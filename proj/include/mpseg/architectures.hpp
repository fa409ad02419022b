#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpseg/error.hpp"
#include "mpseg/nn/blocks.hpp"
#include "mpseg/volume.hpp"

namespace mpseg {

enum class Variant { baseline_1ch, baseline_2ch, baseline_3ch, multihead_1, multihead_2, multihead_3 };

inline constexpr std::array<Variant, 6> all_variants() {
  return {Variant::baseline_1ch, Variant::baseline_2ch, Variant::baseline_3ch,
          Variant::multihead_1,  Variant::multihead_2,  Variant::multihead_3};
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::baseline_1ch: return "baseline_1ch";
    case Variant::baseline_2ch: return "baseline_2ch";
    case Variant::baseline_3ch: return "baseline_3ch";
    case Variant::multihead_1: return "multihead_1";
    case Variant::multihead_2: return "multihead_2";
    case Variant::multihead_3: return "multihead_3";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (auto v : {Variant::baseline_1ch, Variant::baseline_2ch, Variant::baseline_3ch, Variant::multihead_1,
                 Variant::multihead_2, Variant::multihead_3})
    if (to_string(v) == s) return v;
  fail(ErrorCode::InvalidVariant, "unknown model variant '" + s + "'");
}

inline bool is_multihead(Variant v) {
  return v == Variant::multihead_1 || v == Variant::multihead_2 || v == Variant::multihead_3;
}

/// Input tensor channel order consumed by each variant.
inline std::vector<ChannelKind> input_channels(Variant v) {
  switch (v) {
    case Variant::baseline_1ch: return {ChannelKind::T2W};
    case Variant::baseline_2ch: return {ChannelKind::T2W, ChannelKind::ADC};
    default: return {ChannelKind::T2W, ChannelKind::B1000, ChannelKind::ADC};
  }
}

/// Which input channels feed each first-level head. Only meaningful for the
/// multi-head variants; head 0 is the non-dilated T2W head.
struct ChannelRouting {
  std::vector<std::vector<ChannelKind>> heads;
  bool shared_dilated_weights = false;
  bool concat_fusion = false;
};

inline ChannelRouting routing_for(Variant v) {
  using C = ChannelKind;
  switch (v) {
    case Variant::multihead_1: return {{{C::T2W}, {C::T2W, C::B1000, C::ADC}, {C::T2W, C::B1000, C::ADC}}, true, false};
    case Variant::multihead_2: return {{{C::T2W}, {C::B1000, C::ADC}, {C::B1000, C::ADC}}, true, false};
    case Variant::multihead_3: return {{{C::T2W}, {C::B1000, C::ADC}, {C::B1000, C::ADC}}, false, true};
    default: return {};
  }
}

struct ModelSpec {
  Variant variant = Variant::baseline_3ch;
  int in_channels = 3;
  std::vector<int> level_filters{32, 64, 128, 256};
  int bottleneck_filters = 512;
  std::vector<int> head_dilations{1, 2, 4};
  int kernel_size = 3;
  std::uint64_t seed = 0;

  int levels() const { return static_cast<int>(level_filters.size()); }
  /// Spatial extents must be multiples of this.
  int divisor() const { return 1 << levels(); }
};

inline ModelSpec make_spec(Variant v) {
  ModelSpec s;
  s.variant = v;
  s.in_channels = static_cast<int>(input_channels(v).size());
  return s;
}

inline void validate(const ModelSpec& s) {
  if (s.in_channels != static_cast<int>(input_channels(s.variant).size()))
    fail(ErrorCode::ChannelMismatch, to_string(s.variant) + " takes " + std::to_string(input_channels(s.variant).size()) +
                                         " input channels, spec says " + std::to_string(s.in_channels));
  if (s.level_filters.empty()) fail(ErrorCode::InvalidVariant, "at least one encoder level is required");
  for (int f : s.level_filters)
    if (f <= 0) fail(ErrorCode::InvalidVariant, "filter counts must be positive");
  if (s.bottleneck_filters <= 0) fail(ErrorCode::InvalidVariant, "bottleneck filters must be positive");
  if (s.kernel_size <= 0 || s.kernel_size % 2 == 0) fail(ErrorCode::InvalidVariant, "kernel size must be odd");
  if (is_multihead(s.variant)) {
    if (s.head_dilations.size() != 3) fail(ErrorCode::InvalidVariant, "multi-head variants need three head dilations");
    if (s.head_dilations[0] != 1) fail(ErrorCode::InvalidVariant, "the T2W head must be non-dilated");
    for (int d : s.head_dilations)
      if (d < 1) fail(ErrorCode::InvalidVariant, "dilations must be >= 1");
  }
}

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"variant", to_string(s.variant)},         {"in_channels", s.in_channels},
          {"level_filters", s.level_filters},        {"bottleneck_filters", s.bottleneck_filters},
          {"head_dilations", s.head_dilations},      {"kernel_size", s.kernel_size},
          {"seed", s.seed}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s = make_spec(variant_from_string(j.at("variant").get<std::string>()));
  s.in_channels = j.value("in_channels", s.in_channels);
  s.level_filters = j.value("level_filters", s.level_filters);
  s.bottleneck_filters = j.value("bottleneck_filters", s.bottleneck_filters);
  s.head_dilations = j.value("head_dilations", s.head_dilations);
  s.kernel_size = j.value("kernel_size", s.kernel_size);
  s.seed = j.value("seed", s.seed);
  validate(s);
  return s;
}

namespace arch {

template <typename T>
struct FirstBlockCache {
  nn::ResidualCache<T> single;
  std::array<nn::ResidualCache<T>, 3> heads;
  nn::Tensor<T> head0_out;
  nn::ConvCache<T> reduce;
};

/// Full-resolution first encoder block: a plain residual block for the
/// baselines, or three routed heads for the multi-head variants.
template <typename T>
class FirstBlock {
 public:
  FirstBlock() = default;
  FirstBlock(const ModelSpec& spec, Rng& rng) : variant_(spec.variant) {
    const int f = spec.level_filters.front();
    const int k = spec.kernel_size;
    if (!is_multihead(variant_)) {
      single_.emplace(spec.in_channels, f, 1, 1, rng, k);
      return;
    }
    routing_ = routing_for(variant_);
    const auto order = input_channels(variant_);
    for (const auto& head : routing_.heads) {
      std::vector<int> idx;
      for (auto c : head)
        for (std::size_t i = 0; i < order.size(); ++i)
          if (order[i] == c) idx.push_back(static_cast<int>(i));
      head_inputs_.push_back(idx);
    }
    const auto& d = spec.head_dilations;
    heads_.push_back(std::make_unique<nn::ResidualBlock<T>>(static_cast<int>(head_inputs_[0].size()), f, 1, d[0], rng, k));
    heads_.push_back(std::make_unique<nn::ResidualBlock<T>>(static_cast<int>(head_inputs_[1].size()), f, 1, d[1], rng, k));
    if (routing_.shared_dilated_weights) {
      heads_.push_back(std::make_unique<nn::ResidualBlock<T>>(*heads_[1], d[2]));
    } else {
      heads_.push_back(std::make_unique<nn::ResidualBlock<T>>(static_cast<int>(head_inputs_[2].size()), f, 1, d[2], rng, k));
    }
    if (routing_.concat_fusion) reduce_.emplace(2 * f, f, 1, 1, 1, rng);
  }

  const ChannelRouting& routing() const { return routing_; }
  const std::vector<std::unique_ptr<nn::ResidualBlock<T>>>& heads() const { return heads_; }
  const std::optional<nn::ResidualBlock<T>>& single() const { return single_; }

  nn::ParamList<T> parameters() const {
    nn::ParamList<T> out;
    if (single_) {
      nn::append_prefixed(out, "block.", single_->parameters());
      return out;
    }
    static constexpr const char* names[3] = {"head_t2w.", "head_dil_a.", "head_dil_b."};
    for (std::size_t h = 0; h < heads_.size(); ++h) nn::append_prefixed(out, names[h], heads_[h]->parameters());
    if (reduce_) nn::append_prefixed(out, "reduce.", reduce_->parameters());
    return out;
  }

  /// Raw per-head outputs, before fusion.
  std::vector<nn::Tensor<T>> head_outputs(const nn::Tensor<T>& x) const {
    std::vector<nn::Tensor<T>> out;
    for (std::size_t h = 0; h < heads_.size(); ++h) out.push_back(heads_[h]->forward(nn::gather_channels<T>(x, head_inputs_[h])));
    return out;
  }

  nn::Tensor<T> forward(const nn::Tensor<T>& x, FirstBlockCache<T>* cache = nullptr) const {
    if (single_) return single_->forward(x, cache ? &cache->single : nullptr);
    std::array<nn::Tensor<T>, 3> h;
    for (std::size_t i = 0; i < 3; ++i)
      h[i] = heads_[i]->forward(nn::gather_channels<T>(x, head_inputs_[i]), cache ? &cache->heads[i] : nullptr);
    if (!routing_.concat_fusion) {
      // summation node over all heads
      nn::Tensor<T> y = std::move(h[0]);
      y += h[1];
      y += h[2];
      return y;
    }
    // dilated branch summed, concatenated with the T2W head, reduced, then
    // summed back onto the T2W head
    nn::Tensor<T> dwi = std::move(h[1]);
    dwi += h[2];
    nn::Tensor<T> y = reduce_->forward(nn::concat_channels(h[0], dwi), cache ? &cache->reduce : nullptr);
    y += h[0];
    return y;
  }

  /// Parameter gradients only; the network input is not differentiated.
  void backward(const nn::Tensor<T>& dy, const FirstBlockCache<T>& cache) {
    if (single_) {
      single_->backward(dy, cache.single, false);
      return;
    }
    if (!routing_.concat_fusion) {
      for (std::size_t i = 0; i < 3; ++i) heads_[i]->backward(dy, cache.heads[i], false);
      return;
    }
    nn::Tensor<T> dcat = reduce_->backward(dy, cache.reduce);
    const int f = dy.channels;
    nn::Tensor<T> dh0 = nn::slice_channels(dcat, 0, f);
    dh0 += dy;
    nn::Tensor<T> ddwi = nn::slice_channels(dcat, f, f);
    heads_[0]->backward(dh0, cache.heads[0], false);
    heads_[1]->backward(ddwi, cache.heads[1], false);
    heads_[2]->backward(ddwi, cache.heads[2], false);
  }

 private:
  Variant variant_ = Variant::baseline_3ch;
  ChannelRouting routing_;
  std::optional<nn::ResidualBlock<T>> single_;
  std::vector<std::vector<int>> head_inputs_;
  std::vector<std::unique_ptr<nn::ResidualBlock<T>>> heads_;
  std::optional<nn::Conv3d<T>> reduce_;
};

template <typename T>
struct LevelCache {
  nn::ResidualCache<T> res1, res2;
};

}  // namespace arch

template <typename T>
struct ModelCache {
  arch::FirstBlockCache<T> first;
  nn::ResidualCache<T> level1_res;
  std::vector<arch::LevelCache<T>> down;  // levels 2..L then bottleneck
  std::vector<nn::UpCache<T>> up;         // deepest first
  nn::ConvCache<T> head;
  nn::Tensor<T> features;
};

/// Residual U-Net: L encoder levels (the first at full resolution, each
/// later one entered through a stride-2 convolution), a stride-2 bottleneck,
/// L transposed-conv decoder levels with skip concatenation, and a 1x1x1
/// single-logit output convolution.
template <typename T>
class SegmentationModel {
 public:
  explicit SegmentationModel(const ModelSpec& spec) : spec_(spec) {
    validate(spec_);
    Rng rng(spec_.seed);
    const auto& f = spec_.level_filters;
    const int k = spec_.kernel_size;
    first_ = arch::FirstBlock<T>(spec_, rng);
    level1_res_ = nn::ResidualBlock<T>(f[0], f[0], 1, 1, rng, k);
    for (std::size_t l = 1; l <= f.size(); ++l) {
      const int in = f[l - 1];
      const int out = l < f.size() ? f[l] : spec_.bottleneck_filters;
      down_.push_back({nn::ResidualBlock<T>(in, out, 2, 1, rng, k), nn::ResidualBlock<T>(out, out, 1, 1, rng, k)});
    }
    for (std::size_t l = f.size(); l >= 1; --l) {
      const int in = l == f.size() ? spec_.bottleneck_filters : f[l];
      up_.emplace_back(in, f[l - 1], rng, k);
    }
    head_ = nn::Conv3d<T>(f[0], 1, 1, 1, 1, rng);
  }

  SegmentationModel(const SegmentationModel&) = delete;
  SegmentationModel& operator=(const SegmentationModel&) = delete;
  SegmentationModel(SegmentationModel&&) noexcept = default;
  SegmentationModel& operator=(SegmentationModel&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  const arch::FirstBlock<T>& first_block() const { return first_; }
  const nn::Conv3d<T>& logit_head() const { return head_; }
  nn::Conv3d<T>& logit_head() { return head_; }

  /// Every parameter reference under its module path; tied tensors appear
  /// once per user.
  nn::ParamList<T> named_parameters() const {
    nn::ParamList<T> out;
    nn::append_prefixed(out, "enc1.first.", first_.parameters());
    nn::append_prefixed(out, "enc1.res.", level1_res_.parameters());
    for (std::size_t i = 0; i < down_.size(); ++i) {
      const std::string name = i + 1 < down_.size() ? "enc" + std::to_string(i + 2) + "." : "bottleneck.";
      nn::append_prefixed(out, name + "res1.", down_[i].first.parameters());
      nn::append_prefixed(out, name + "res2.", down_[i].second.parameters());
    }
    for (std::size_t i = 0; i < up_.size(); ++i)
      nn::append_prefixed(out, "dec" + std::to_string(up_.size() - i) + ".", up_[i].parameters());
    nn::append_prefixed(out, "out.", head_.parameters());
    return out;
  }

  /// Distinct trainable tensors.
  nn::ParamList<T> parameters() const { return nn::unique_params(named_parameters()); }

  void zero_grad() {
    for (auto& p : parameters()) p.param->zero_grad();
  }

  void check_input(const nn::Tensor<T>& x) const {
    if (x.channels != spec_.in_channels)
      fail(ErrorCode::ChannelMismatch, "model expects " + std::to_string(spec_.in_channels) + " channels, got " +
                                           std::to_string(x.channels));
    const int d = spec_.divisor();
    if (x.dims.x % d || x.dims.y % d || x.dims.z % d)
      fail(ErrorCode::IndivisibleShape, "spatial extents must be multiples of " + std::to_string(d));
  }

  /// Feature map entering the output convolution.
  nn::Tensor<T> features(const nn::Tensor<T>& x, ModelCache<T>* cache = nullptr) const {
    check_input(x);
    std::vector<nn::Tensor<T>> skips;
    nn::Tensor<T> h = first_.forward(x, cache ? &cache->first : nullptr);
    h = level1_res_.forward(h, cache ? &cache->level1_res : nullptr);
    if (cache) cache->down.assign(down_.size(), {});
    for (std::size_t i = 0; i < down_.size(); ++i) {
      skips.push_back(h);
      h = down_[i].first.forward(h, cache ? &cache->down[i].res1 : nullptr);
      h = down_[i].second.forward(h, cache ? &cache->down[i].res2 : nullptr);
    }
    if (cache) cache->up.assign(up_.size(), {});
    for (std::size_t i = 0; i < up_.size(); ++i)
      h = up_[i].forward(h, skips[skips.size() - 1 - i], cache ? &cache->up[i] : nullptr);
    return h;
  }

  /// Unactivated foreground logits, shape (1, D, H, W).
  nn::Tensor<T> forward(const nn::Tensor<T>& x, ModelCache<T>* cache = nullptr) const {
    nn::Tensor<T> feat = features(x, cache);
    return head_.forward(feat, cache ? &cache->head : nullptr);
  }

  /// Accumulates parameter gradients from dL/dlogits.
  void backward(const nn::Tensor<T>& dlogits, const ModelCache<T>& cache) {
    nn::Tensor<T> g = head_.backward(dlogits, cache.head);
    std::vector<nn::Tensor<T>> dskips(up_.size());
    for (std::size_t i = up_.size(); i-- > 0;) {
      auto [dx, dskip] = up_[i].backward(g, cache.up[i]);
      g = std::move(dx);
      dskips[up_.size() - 1 - i] = std::move(dskip);
    }
    for (std::size_t i = down_.size(); i-- > 0;) {
      g = down_[i].second.backward(g, cache.down[i].res2);
      g = down_[i].first.backward(g, cache.down[i].res1);
      g += dskips[i];
    }
    g = level1_res_.backward(g, cache.level1_res);
    first_.backward(g, cache.first);
  }

 private:
  ModelSpec spec_;
  arch::FirstBlock<T> first_;
  nn::ResidualBlock<T> level1_res_;
  std::vector<std::pair<nn::ResidualBlock<T>, nn::ResidualBlock<T>>> down_;
  std::vector<nn::UpBlock<T>> up_;
  nn::Conv3d<T> head_;
};

template <typename T>
SegmentationModel<T> build_model(const ModelSpec& spec) {
  return SegmentationModel<T>(spec);
}

template <typename T>
std::size_t count_parameters(const nn::ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : nn::unique_params(params)) n += p.param->size();
  return n;
}

template <typename T>
std::size_t count_parameters(const SegmentationModel<T>& model) {
  return count_parameters(model.parameters());
}

}  // namespace mpseg
