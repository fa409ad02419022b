#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <queue>
#include <vector>

#include "mpseg/architectures.hpp"
#include "mpseg/data.hpp"
#include "mpseg/losses.hpp"
#include "mpseg/nn/tensor.hpp"

namespace mpseg {

struct SlidingWindowOptions {
  Dims3 patch{256, 256, 16};
  double overlap = 0.75;
};

/// Stacks case channels in `order`; `zeroed` (if any) is replaced by zeros.
inline nn::Tensor<float> make_input(const MultiparametricCase& c, const std::vector<ChannelKind>& order,
                                    std::optional<ChannelKind> zeroed = std::nullopt) {
  const Dims3 d = c.t2w.dims();
  nn::Tensor<float> x(static_cast<int>(order.size()), d);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (zeroed && *zeroed == order[i]) continue;
    const auto& v = c.channel(order[i]);
    if (!(v.dims() == d)) fail(ErrorCode::GridMismatch, "case channels are not co-gridded");
    std::copy(v.data().begin(), v.data().end(), x.channel(static_cast<int>(i)));
  }
  return x;
}

inline int window_stride(int patch, double overlap) {
  return std::max(1, static_cast<int>(std::lround(patch * (1.0 - overlap))));
}

/// Window origins along one axis of length n (n >= patch); the last window is
/// clamped to end at n.
inline std::vector<int> window_starts(int n, int patch, double overlap) {
  std::vector<int> s;
  if (n <= patch) return {0};
  const int step = window_stride(patch, overlap);
  for (int p = 0; p + patch < n; p += step) s.push_back(p);
  if (s.empty() || s.back() != n - patch) s.push_back(n - patch);
  return s;
}

inline void check_overlap(double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0)) fail(ErrorCode::InvalidOverlap, "overlap must lie in [0, 1)");
}

/// Number of windows covering each voxel of a (padded) volume.
inline Volume<std::int32_t> window_coverage(Dims3 dims, const SlidingWindowOptions& opt) {
  check_overlap(opt.overlap);
  Dims3 padded{std::max(dims.x, opt.patch.x), std::max(dims.y, opt.patch.y), std::max(dims.z, opt.patch.z)};
  Volume<std::int32_t> cov(padded, {1, 1, 1});
  for (int sz : window_starts(padded.z, opt.patch.z, opt.overlap))
    for (int sy : window_starts(padded.y, opt.patch.y, opt.overlap))
      for (int sx : window_starts(padded.x, opt.patch.x, opt.overlap))
        for (int z = sz; z < sz + opt.patch.z; ++z)
          for (int y = sy; y < sy + opt.patch.y; ++y)
            for (int x = sx; x < sx + opt.patch.x; ++x) ++cov(x, y, z);
  return cov;
}

/// Tiles `input` with overlapping windows, runs `predict` (patch -> logits)
/// on each and averages the sigmoid outputs uniformly. Volumes smaller than
/// the patch are zero-padded symmetrically and cropped back. `visit_order`
/// optionally permutes the window sequence.
template <typename Predict>
Volume<float> sliding_window(Predict&& predict, const nn::Tensor<float>& input, const Grid& grid,
                             const SlidingWindowOptions& opt = {}, const std::vector<std::size_t>* visit_order = nullptr) {
  check_overlap(opt.overlap);
  const Dims3 n = input.dims;
  const Dims3 p = opt.patch;
  const Dims3 padded{std::max(n.x, p.x), std::max(n.y, p.y), std::max(n.z, p.z)};
  const Dims3 before{(padded.x - n.x) / 2, (padded.y - n.y) / 2, (padded.z - n.z) / 2};

  nn::Tensor<float> work(input.channels, padded);
  for (int c = 0; c < input.channels; ++c)
    for (int z = 0; z < n.z; ++z)
      for (int y = 0; y < n.y; ++y)
        for (int x = 0; x < n.x; ++x) work.at(c, x + before.x, y + before.y, z + before.z) = input.at(c, x, y, z);

  std::vector<std::array<int, 3>> windows;
  for (int sz : window_starts(padded.z, p.z, opt.overlap))
    for (int sy : window_starts(padded.y, p.y, opt.overlap))
      for (int sx : window_starts(padded.x, p.x, opt.overlap)) windows.push_back({sx, sy, sz});

  std::vector<double> sum(padded.count(), 0.0);
  std::vector<std::int32_t> count(padded.count(), 0);
  nn::Tensor<float> patch(input.channels, p);
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto [sx, sy, sz] = windows[visit_order ? (*visit_order)[w] : w];
    for (int c = 0; c < input.channels; ++c)
      for (int z = 0; z < p.z; ++z)
        for (int y = 0; y < p.y; ++y) {
          const float* src = &work.at(c, sx, sy + y, sz + z);
          std::copy(src, src + p.x, &patch.at(c, 0, y, z));
        }
    const nn::Tensor<float> logits = predict(patch);
    if (logits.channels != 1 || !(logits.dims == p)) fail(ErrorCode::ShapeMismatch, "predictor returned a wrong shape");
    for (int z = 0; z < p.z; ++z)
      for (int y = 0; y < p.y; ++y)
        for (int x = 0; x < p.x; ++x) {
          const std::size_t i = (sx + x) + static_cast<std::size_t>(padded.x) * ((sy + y) + static_cast<std::size_t>(padded.y) * (sz + z));
          sum[i] += sigmoid(logits.at(0, x, y, z));
          ++count[i];
        }
  }

  Volume<float> prob(grid.dims, grid.spacing, grid.origin, ChannelKind::OTHER);
  for (int z = 0; z < n.z; ++z)
    for (int y = 0; y < n.y; ++y)
      for (int x = 0; x < n.x; ++x) {
        const std::size_t i = (x + before.x) + static_cast<std::size_t>(padded.x) * ((y + before.y) + static_cast<std::size_t>(padded.y) * (z + before.z));
        prob(x, y, z) = static_cast<float>(sum[i] / count[i]);
      }
  return prob;
}

template <typename T>
Volume<float> sliding_window(const SegmentationModel<T>& model, const MultiparametricCase& c,
                             const SlidingWindowOptions& opt = {}, std::optional<ChannelKind> zeroed = std::nullopt) {
  const auto x = make_input(c, input_channels(model.spec().variant), zeroed);
  return sliding_window([&](const nn::Tensor<float>& patch) { return model.forward(patch); }, x, grid_of(c.t2w), opt);
}

/// Keeps only the largest 6-connected foreground component.
inline Volume<float> keep_largest_component(const Volume<float>& mask) {
  const Dims3 d = mask.dims();
  std::vector<std::int32_t> label(mask.size(), 0);
  std::int32_t best = 0, next = 0;
  std::size_t best_size = 0;
  for (std::size_t s = 0; s < mask.size(); ++s) {
    if (mask[s] <= 0.5f || label[s]) continue;
    ++next;
    std::size_t size = 0;
    std::queue<std::size_t> q;
    q.push(s);
    label[s] = next;
    while (!q.empty()) {
      const std::size_t i = q.front();
      q.pop();
      ++size;
      const int x = static_cast<int>(i % d.x), y = static_cast<int>((i / d.x) % d.y), z = static_cast<int>(i / (static_cast<std::size_t>(d.x) * d.y));
      const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z}, {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
      for (const auto& v : nb) {
        if (v[0] < 0 || v[1] < 0 || v[2] < 0 || v[0] >= d.x || v[1] >= d.y || v[2] >= d.z) continue;
        const std::size_t j = mask.index(v[0], v[1], v[2]);
        if (mask[j] > 0.5f && !label[j]) {
          label[j] = next;
          q.push(j);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best = next;
    }
  }
  Volume<float> out(d, mask.spacing(), mask.origin(), ChannelKind::MASK);
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = (best && label[i] == best) ? 1.0f : 0.0f;
  return out;
}

inline Volume<float> binarize(const Volume<float>& prob, double threshold = 0.5, bool largest_component = false) {
  if (!(threshold > 0.0 && threshold < 1.0)) fail(ErrorCode::ConfigInvalid, "threshold must lie in (0, 1)");
  Volume<float> mask(prob.dims(), prob.spacing(), prob.origin(), ChannelKind::MASK);
  for (std::size_t i = 0; i < prob.size(); ++i) mask[i] = prob[i] > threshold ? 1.0f : 0.0f;
  return largest_component ? keep_largest_component(mask) : mask;
}

}  // namespace mpseg
