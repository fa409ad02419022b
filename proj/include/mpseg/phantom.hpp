#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpseg/adc_fit.hpp"
#include "mpseg/data.hpp"
#include "mpseg/rng.hpp"

namespace mpseg {

/// Synthetic pelvis-free multiparametric case: an ellipsoidal tumor in
/// textured tissue, DWI synthesised from a true ADC field, and an EPI-like
/// anterior-posterior (y) displacement applied to the diffusion channels only.
struct PhantomConfig {
  std::string case_id = "phantom_000";
  Dims3 dims{64, 64, 16};
  Vec3 spacing{0.6, 0.6, 4.0};
  Vec3 tumor_center{19.2, 19.2, 32.0};  // mm from the grid corner
  Vec3 tumor_radii{7.0, 6.0, 14.0};     // mm
  double t2w_background = 400.0;
  double t2w_tumor = 650.0;
  double t2w_noise = 20.0;
  double t2w_texture = 0.15;            // relative amplitude of smooth tissue texture
  double s0_background = 800.0;
  double s0_tumor = 900.0;
  double s0_texture = 0.25;
  double dwi_noise = 10.0;
  double adc_tumor = 0.9e-3;            // mm^2/s
  double adc_background = 1.8e-3;
  double adc_texture = 0.0;
  std::vector<double> b_values{0.0, 1000.0};
  double distortion_mm = 0.0;
  std::uint64_t seed = 0;
};

struct PhantomCase {
  MultiparametricCase image;     // raw (unnormalized) channels, mask on the undistorted grid
  DWISeries<float> series;       // distorted, noisy DWI
  Volume<double> true_adc;       // undistorted
  Volume<double> displacement;   // y-displacement in mm
};

inline void validate(const PhantomConfig& c) {
  if (c.tumor_radii.x <= 0 || c.tumor_radii.y <= 0 || c.tumor_radii.z <= 0)
    fail(ErrorCode::ConfigInvalid, "tumor radii must be positive");
  if (c.distortion_mm < 0) fail(ErrorCode::ConfigInvalid, "distortion amplitude must be >= 0");
  if (c.b_values.size() < 2) fail(ErrorCode::ConfigInvalid, "phantom needs at least two b-values");
  for (int a = 0; a < 3; ++a) {
    const double extent = c.dims[a] * c.spacing[a];
    if (c.tumor_center[a] - c.tumor_radii[a] < 0 || c.tumor_center[a] + c.tumor_radii[a] > extent)
      fail(ErrorCode::TumorOutOfBounds, "tumor ellipsoid leaves the volume");
  }
}

namespace detail {

/// Smooth random field in roughly [-1, 1] built from a few low-frequency waves.
class SmoothField {
 public:
  SmoothField(Rng& rng, Vec3 extent, int waves = 4) {
    for (int k = 0; k < waves; ++k) {
      Wave w;
      for (int a = 0; a < 3; ++a) w.freq[a] = rng.uniform(0.5, 2.0) * 2.0 * std::numbers::pi / extent[a];
      w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      w.amp = rng.uniform(0.5, 1.0);
      norm_ += w.amp;
      waves_.push_back(w);
    }
  }
  double operator()(double x, double y, double z) const {
    double s = 0.0;
    for (const auto& w : waves_) s += w.amp * std::sin(w.freq[0] * x + w.freq[1] * y + w.freq[2] * z + w.phase);
    return norm_ > 0 ? s / norm_ : 0.0;
  }

 private:
  struct Wave {
    double freq[3];
    double phase, amp;
  };
  std::vector<Wave> waves_;
  double norm_ = 0.0;
};

/// Samples `v` at y - u(x, z) by linear interpolation along y.
template <typename T>
Volume<T> warp_y(const Volume<T>& v, const Volume<double>& u_mm) {
  Volume<T> out(v.dims(), v.spacing(), v.origin(), v.kind());
  const Dims3 d = v.dims();
  for (int z = 0; z < d.z; ++z)
    for (int x = 0; x < d.x; ++x) {
      const double shift = u_mm(x, 0, z) / v.spacing().y;
      for (int y = 0; y < d.y; ++y) {
        double src = std::clamp(y - shift, 0.0, static_cast<double>(d.y - 1));
        const int lo = static_cast<int>(std::floor(src));
        const int hi = std::min(lo + 1, d.y - 1);
        const double w = src - lo;
        out(x, y, z) = static_cast<T>((1.0 - w) * v(x, lo, z) + w * v(x, hi, z));
      }
    }
  return out;
}

}  // namespace detail

/// Displacement along y (mm), a function of x and z only, so the warp is a
/// per-column translation and preserves volume.
inline Volume<double> phantom_displacement(const PhantomConfig& c, Rng& rng) {
  Volume<double> u({c.dims.x, 1, c.dims.z}, c.spacing);
  const double lx = c.dims.x * c.spacing.x, lz = c.dims.z * c.spacing.z;
  const double px = rng.uniform(0.0, 2.0 * std::numbers::pi), pz = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (int z = 0; z < c.dims.z; ++z)
    for (int x = 0; x < c.dims.x; ++x) {
      const double X = (x + 0.5) * c.spacing.x, Z = (z + 0.5) * c.spacing.z;
      const double g = 0.6 + 0.4 * std::sin(2.0 * std::numbers::pi * X / lx + px) * std::cos(std::numbers::pi * Z / lz + pz);
      u(x, 0, z) = c.distortion_mm * g;
    }
  return u;
}

inline bool inside_ellipsoid(const PhantomConfig& c, int x, int y, int z) {
  const double dx = ((x + 0.5) * c.spacing.x - c.tumor_center.x) / c.tumor_radii.x;
  const double dy = ((y + 0.5) * c.spacing.y - c.tumor_center.y) / c.tumor_radii.y;
  const double dz = ((z + 0.5) * c.spacing.z - c.tumor_center.z) / c.tumor_radii.z;
  return dx * dx + dy * dy + dz * dz <= 1.0;
}

inline PhantomCase generate_case(const PhantomConfig& c) {
  validate(c);
  Rng rng(c.seed);
  const Vec3 extent{c.dims.x * c.spacing.x, c.dims.y * c.spacing.y, c.dims.z * c.spacing.z};
  const detail::SmoothField t2_tex(rng, extent), s0_tex(rng, extent), adc_tex(rng, extent);
  Rng noise = rng.fork();
  Rng warp_rng = rng.fork();

  PhantomCase out;
  auto& img = out.image;
  img.case_id = c.case_id;
  img.t2w = ImageVolume(c.dims, c.spacing, {}, ChannelKind::T2W);
  img.mask = ImageVolume(c.dims, c.spacing, {}, ChannelKind::MASK);
  out.true_adc = Volume<double>(c.dims, c.spacing, {}, ChannelKind::ADC);
  Volume<double> s0(c.dims, c.spacing);
  for (int z = 0; z < c.dims.z; ++z)
    for (int y = 0; y < c.dims.y; ++y)
      for (int x = 0; x < c.dims.x; ++x) {
        const bool tumor = inside_ellipsoid(c, x, y, z);
        const double X = (x + 0.5) * c.spacing.x, Y = (y + 0.5) * c.spacing.y, Z = (z + 0.5) * c.spacing.z;
        img.mask(x, y, z) = tumor ? 1.0f : 0.0f;
        const double t2 = (tumor ? c.t2w_tumor : c.t2w_background) * (1.0 + c.t2w_texture * t2_tex(X, Y, Z));
        img.t2w(x, y, z) = static_cast<float>(std::max(0.0, t2 + c.t2w_noise * noise.normal()));
        out.true_adc(x, y, z) = (tumor ? c.adc_tumor : c.adc_background) * (1.0 + c.adc_texture * adc_tex(X, Y, Z));
        s0(x, y, z) = std::max(10.0 * kSignalFloor,
                               (tumor ? c.s0_tumor : c.s0_background) * (1.0 + c.s0_texture * s0_tex(X, Y, Z)));
      }

  out.displacement = phantom_displacement(c, warp_rng);
  out.series.b_values = c.b_values;
  for (double b : c.b_values) {
    Volume<double> clean(c.dims, c.spacing);
    for (std::size_t i = 0; i < clean.size(); ++i) clean[i] = predict_signal(s0[i], b, out.true_adc[i]);
    if (c.distortion_mm > 0) clean = detail::warp_y(clean, out.displacement);
    Volume<float> sig(c.dims, c.spacing, {}, ChannelKind::OTHER);
    for (std::size_t i = 0; i < sig.size(); ++i)
      sig[i] = static_cast<float>(std::max(0.0, clean[i] + (c.dwi_noise > 0 ? c.dwi_noise * noise.normal() : 0.0)));
    out.series.signals.push_back(std::move(sig));
  }

  const bool two_point = c.b_values.size() == 2 && c.b_values[0] == 0.0;
  const ADCMap adc = fit_adc(out.series, two_point ? FitMethod::two_point : FitMethod::least_squares);
  img.adc = ImageVolume(c.dims, c.spacing, {}, ChannelKind::ADC);
  for (std::size_t i = 0; i < adc.values.size(); ++i) img.adc[i] = static_cast<float>(adc.values[i]);

  std::size_t hi = 0;
  for (std::size_t k = 0; k < c.b_values.size(); ++k)
    if (std::abs(c.b_values[k] - 1000.0) < std::abs(c.b_values[hi] - 1000.0)) hi = k;
  img.b1000 = out.series.signals[hi];
  img.b1000.set_kind(ChannelKind::B1000);
  return out;
}

/// Removes `layers` face-connected boundary layers from a binary mask.
inline ImageVolume erode(const ImageVolume& mask, int layers = 1) {
  ImageVolume cur = mask;
  const Dims3 d = mask.dims();
  for (int l = 0; l < layers; ++l) {
    ImageVolume next = cur;
    for (int z = 0; z < d.z; ++z)
      for (int y = 0; y < d.y; ++y)
        for (int x = 0; x < d.x; ++x) {
          if (cur(x, y, z) <= 0.5f) continue;
          auto bg = [&](int a, int b, int cz) {
            return a < 0 || b < 0 || cz < 0 || a >= d.x || b >= d.y || cz >= d.z || cur(a, b, cz) <= 0.5f;
          };
          if (bg(x - 1, y, z) || bg(x + 1, y, z) || bg(x, y - 1, z) || bg(x, y + 1, z) || bg(x, y, z - 1) ||
              bg(x, y, z + 1))
            next(x, y, z) = 0.0f;
        }
    cur = std::move(next);
  }
  return cur;
}

inline nlohmann::json to_json(const PhantomConfig& c) {
  return {{"case_id", c.case_id},
          {"dims", {c.dims.x, c.dims.y, c.dims.z}},
          {"spacing", {c.spacing.x, c.spacing.y, c.spacing.z}},
          {"tumor_center", {c.tumor_center.x, c.tumor_center.y, c.tumor_center.z}},
          {"tumor_radii", {c.tumor_radii.x, c.tumor_radii.y, c.tumor_radii.z}},
          {"t2w_background", c.t2w_background},
          {"t2w_tumor", c.t2w_tumor},
          {"t2w_noise", c.t2w_noise},
          {"t2w_texture", c.t2w_texture},
          {"s0_background", c.s0_background},
          {"s0_tumor", c.s0_tumor},
          {"s0_texture", c.s0_texture},
          {"dwi_noise", c.dwi_noise},
          {"adc_tumor", c.adc_tumor},
          {"adc_background", c.adc_background},
          {"adc_texture", c.adc_texture},
          {"b_values", c.b_values},
          {"distortion_mm", c.distortion_mm},
          {"seed", c.seed}};
}

}  // namespace mpseg
