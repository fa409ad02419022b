#pragma once

#include <algorithm>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mpseg/architectures.hpp"
#include "mpseg/data.hpp"
#include "mpseg/inference.hpp"
#include "mpseg/metrics.hpp"

namespace mpseg {

inline void check_dropout_channel(ChannelKind k) {
  if (k != ChannelKind::T2W && k != ChannelKind::B1000 && k != ChannelKind::ADC)
    fail(ErrorCode::UnknownChannel, "only T2W, B1000 and ADC can be dropped, got " + std::string(to_string(k)));
}

/// Full sliding-window evaluation with `channel` zeroed after normalization.
/// A channel the variant never consumes leaves the reports unchanged.
template <typename T>
std::vector<EvaluationReport> channel_dropout_eval(const SegmentationModel<T>& model,
                                                   const std::vector<MultiparametricCase>& cases,
                                                   std::optional<ChannelKind> channel,
                                                   const SlidingWindowOptions& window = {}, double threshold = 0.5) {
  if (channel) check_dropout_channel(*channel);
  std::vector<EvaluationReport> out;
  out.reserve(cases.size());
  for (const auto& c : cases) {
    if (!c.has_mask()) fail(ErrorCode::MissingChannel, "case " + c.case_id + " has no ground truth mask");
    const auto prob = sliding_window(model, c, window, channel);
    out.push_back(evaluate_case(c.case_id, binarize(prob, threshold), c.mask));
  }
  return out;
}

struct CroppedPatch {
  nn::Tensor<float> image;
  Volume<float> mask;  // empty grid if the case has no mask
  Dims3 corner;        // may be negative when the volume is smaller than the patch
};

/// Patch of size `patch` centred on the volume; regions outside are zero.
inline CroppedPatch center_crop(const MultiparametricCase& c, const std::vector<ChannelKind>& order, Dims3 patch,
                                std::optional<ChannelKind> zeroed = std::nullopt) {
  const nn::Tensor<float> full = make_input(c, order, zeroed);
  const Dims3 n = full.dims;
  const Dims3 corner{(n.x - patch.x) / 2, (n.y - patch.y) / 2, (n.z - patch.z) / 2};
  const Vec3 sp = c.t2w.spacing();
  Vec3 origin = c.t2w.origin();
  for (int a = 0; a < 3; ++a) origin[a] += corner[a] * sp[a];
  CroppedPatch out{nn::Tensor<float>(full.channels, patch), Volume<float>(patch, sp, origin, ChannelKind::MASK), corner};
  for (int z = 0; z < patch.z; ++z)
    for (int y = 0; y < patch.y; ++y)
      for (int x = 0; x < patch.x; ++x) {
        const int sx = x + corner.x, sy = y + corner.y, sz = z + corner.z;
        if (sx < 0 || sy < 0 || sz < 0 || sx >= n.x || sy >= n.y || sz >= n.z) continue;
        for (int ch = 0; ch < full.channels; ++ch) out.image.at(ch, x, y, z) = full.at(ch, sx, sy, sz);
        if (c.has_mask()) out.mask(x, y, z) = c.mask(sx, sy, sz);
      }
  return out;
}

enum class CamTarget { predicted_foreground, ground_truth };

struct SaliencyMap {
  Volume<float> values;
  std::string layer = "penultimate";
  std::string target;
  bool degenerate = false;
  std::string flag;  // NoForegroundPredicted or DegenerateGradient when degenerate
};

/// 3D Grad-CAM on the feature map entering the final 1x1x1 logit conv.
/// `Net` provides features(x) and logit_head() with forward / input_gradient.
template <typename Net>
SaliencyMap gradcam3d(const Net& net, const nn::Tensor<float>& patch, const Vec3& spacing = {1, 1, 1},
                      CamTarget target = CamTarget::predicted_foreground, const Volume<float>* gt = nullptr) {
  const auto feat = net.features(patch);
  nn::ConvCache<float> cache;
  const auto logits = net.logit_head().forward(feat, &cache);

  SaliencyMap out{Volume<float>(patch.dims, spacing, {0, 0, 0}, ChannelKind::OTHER)};
  out.target = target == CamTarget::predicted_foreground ? "sum of logits where sigmoid > 0.5" : "sum of logits over ground truth";
  if (target == CamTarget::ground_truth && (!gt || !(gt->dims() == logits.dims)))
    fail(ErrorCode::ShapeMismatch, "ground-truth target needs a mask of the patch shape");

  // d(target)/d(logit) is the indicator of the selected voxels.
  nn::Tensor<float> dlogits(1, logits.dims);
  std::size_t selected = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const bool on = target == CamTarget::predicted_foreground ? logits.data[i] > 0.0f : (*gt)[i] > 0.5f;
    dlogits.data[i] = on ? 1.0f : 0.0f;
    selected += on;
  }
  if (selected == 0) {
    out.degenerate = true;
    out.flag = "NoForegroundPredicted";
    return out;
  }
  const auto dfeat = net.logit_head().input_gradient(dlogits, cache);

  const std::size_t nv = feat.voxels();
  std::vector<double> cam(nv, 0.0);
  for (int k = 0; k < feat.channels; ++k) {
    const float* g = dfeat.channel(k);
    double w = 0.0;
    for (std::size_t i = 0; i < nv; ++i) w += g[i];
    w /= static_cast<double>(nv);
    if (w == 0.0) continue;
    const float* a = feat.channel(k);
    for (std::size_t i = 0; i < nv; ++i) cam[i] += w * a[i];
  }
  Vec3 fsp;
  for (int a = 0; a < 3; ++a) fsp[a] = spacing[a] * patch.dims[a] / feat.dims[a];
  Volume<float> map(feat.dims, fsp, {0, 0, 0}, ChannelKind::OTHER);
  for (std::size_t i = 0; i < nv; ++i) map[i] = static_cast<float>(std::max(0.0, cam[i]));
  if (!(feat.dims == patch.dims)) map = resize_linear(map, patch.dims);

  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (float v : map.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(hi > lo)) {
    out.degenerate = true;
    out.flag = "DegenerateGradient";
    return out;
  }
  for (std::size_t i = 0; i < map.size(); ++i) out.values[i] = (map[i] - lo) / (hi - lo);
  return out;
}

}  // namespace mpseg
