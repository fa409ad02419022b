#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "mpseg/data.hpp"
#include "mpseg/error.hpp"
#include "mpseg/nn/tensor.hpp"
#include "mpseg/rng.hpp"

namespace mpseg {

struct Patch {
  nn::Tensor<float> image;
  nn::Tensor<float> label;
  std::string case_id;
  Dims3 corner;  // in the (possibly padded) case grid
};

struct AugmentConfig {
  double intensity_shift = 0.1;        // offsets drawn from [-shift, +shift]
  double scale_lo = 0.9, scale_hi = 1.1;
  Dims3 crop_jitter{8, 8, 2};          // max translation per axis (voxels)
  double p_shift = 0.5;
  double p_scale = 0.5;
  double p_crop = 0.5;
};

inline void validate(const AugmentConfig& c) {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(c.p_shift) || !prob(c.p_scale) || !prob(c.p_crop))
    fail(ErrorCode::ConfigInvalid, "augmentation probabilities must lie in [0, 1]");
  if (c.intensity_shift < 0.0) fail(ErrorCode::ConfigInvalid, "intensity shift bound must be >= 0");
  if (!(c.scale_lo > 0.0 && c.scale_lo <= 1.0 && c.scale_hi >= 1.0))
    fail(ErrorCode::ConfigInvalid, "scale range must bracket 1");
  if (c.crop_jitter.x < 0 || c.crop_jitter.y < 0 || c.crop_jitter.z < 0)
    fail(ErrorCode::ConfigInvalid, "crop jitter must be >= 0");
}

/// Slice-aligned z-corners whose window contains at least one foreground slice.
inline std::vector<int> valid_z_corners(const std::vector<bool>& fg_slice, int patch_z) {
  std::vector<int> out;
  const int nz = static_cast<int>(fg_slice.size());
  for (int c = 0; c + patch_z <= nz; ++c) {
    for (int z = c; z < c + patch_z; ++z)
      if (fg_slice[z]) {
        out.push_back(c);
        break;
      }
  }
  return out;
}

/// Uniformly drawn patch whose z-window meets the tumor. Undersized axes are
/// zero-padded symmetrically.
inline Patch sample_patch(const MultiparametricCase& c, const std::vector<ChannelKind>& order, Dims3 patch, Rng& rng,
                          const ImageVolume* label_override = nullptr) {
  const ImageVolume& mask = label_override ? *label_override : c.mask;
  const Dims3 n = mask.dims();
  const Dims3 padded{std::max(n.x, patch.x), std::max(n.y, patch.y), std::max(n.z, patch.z)};
  const Dims3 before{(padded.x - n.x) / 2, (padded.y - n.y) / 2, (padded.z - n.z) / 2};

  std::vector<bool> fg_slice(padded.z, false);
  bool any = false;
  for (int z = 0; z < n.z; ++z)
    for (int y = 0; y < n.y && !fg_slice[z + before.z]; ++y)
      for (int x = 0; x < n.x; ++x)
        if (mask(x, y, z) > 0.5f) {
          fg_slice[z + before.z] = true;
          any = true;
          break;
        }
  if (!any) fail(ErrorCode::EmptyMask, "case '" + c.case_id + "' has an empty mask");

  const auto zs = valid_z_corners(fg_slice, patch.z);
  const Dims3 corner{static_cast<int>(rng.uniform_int(0, padded.x - patch.x)),
                     static_cast<int>(rng.uniform_int(0, padded.y - patch.y)),
                     zs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(zs.size()) - 1))]};

  Patch p{nn::Tensor<float>(static_cast<int>(order.size()), patch), nn::Tensor<float>(1, patch), c.case_id, corner};
  auto copy = [&](const ImageVolume& src, nn::Tensor<float>& dst, int ch) {
    for (int z = 0; z < patch.z; ++z) {
      const int sz = z + corner.z - before.z;
      if (sz < 0 || sz >= n.z) continue;
      for (int y = 0; y < patch.y; ++y) {
        const int sy = y + corner.y - before.y;
        if (sy < 0 || sy >= n.y) continue;
        for (int x = 0; x < patch.x; ++x) {
          const int sx = x + corner.x - before.x;
          if (sx < 0 || sx >= n.x) continue;
          dst.at(ch, x, y, z) = src(sx, sy, sz);
        }
      }
    }
  };
  for (std::size_t i = 0; i < order.size(); ++i) copy(c.channel(order[i]), p.image, static_cast<int>(i));
  copy(mask, p.label, 0);
  return p;
}

namespace detail {
inline nn::Tensor<float> translate(const nn::Tensor<float>& t, Dims3 shift) {
  nn::Tensor<float> out(t.channels, t.dims);
  const Dims3 d = t.dims;
  for (int c = 0; c < t.channels; ++c)
    for (int z = 0; z < d.z; ++z) {
      const int sz = z - shift.z;
      if (sz < 0 || sz >= d.z) continue;
      for (int y = 0; y < d.y; ++y) {
        const int sy = y - shift.y;
        if (sy < 0 || sy >= d.y) continue;
        for (int x = 0; x < d.x; ++x) {
          const int sx = x - shift.x;
          if (sx >= 0 && sx < d.x) out.at(c, x, y, z) = t.at(c, sx, sy, sz);
        }
      }
    }
  return out;
}

inline bool has_foreground(const nn::Tensor<float>& t) {
  return std::any_of(t.data.begin(), t.data.end(), [](float v) { return v > 0.5f; });
}
}  // namespace detail

/// Translation jitter (image and label together), then per-channel intensity
/// scaling and shifting (image only). A jitter that would push every tumor
/// voxel out of the patch is dropped.
inline Patch augment(const Patch& in, const AugmentConfig& cfg, Rng& rng) {
  validate(cfg);
  Patch out = in;
  if (rng.bernoulli(cfg.p_crop)) {
    const Dims3 shift{static_cast<int>(rng.uniform_int(-cfg.crop_jitter.x, cfg.crop_jitter.x)),
                      static_cast<int>(rng.uniform_int(-cfg.crop_jitter.y, cfg.crop_jitter.y)),
                      static_cast<int>(rng.uniform_int(-cfg.crop_jitter.z, cfg.crop_jitter.z))};
    if (shift.x || shift.y || shift.z) {
      nn::Tensor<float> label = detail::translate(in.label, shift);
      if (detail::has_foreground(label) || !detail::has_foreground(in.label)) {
        out.label = std::move(label);
        out.image = detail::translate(in.image, shift);
      }
    }
  }
  for (int c = 0; c < out.image.channels; ++c) {
    float* v = out.image.channel(c);
    const std::size_t n = out.image.voxels();
    if (rng.bernoulli(cfg.p_scale)) {
      const auto s = static_cast<float>(rng.uniform(cfg.scale_lo, cfg.scale_hi));
      for (std::size_t i = 0; i < n; ++i) v[i] *= s;
    }
    if (rng.bernoulli(cfg.p_shift)) {
      const auto o = static_cast<float>(rng.uniform(-cfg.intensity_shift, cfg.intensity_shift));
      for (std::size_t i = 0; i < n; ++i) v[i] += o;
    }
  }
  return out;
}

}  // namespace mpseg
