#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mpseg/error.hpp"

namespace mpseg {

/// Grid extent in voxels. x is the fastest-varying axis in memory, z the slowest.
struct Dims3 {
  int x = 0;
  int y = 0;
  int z = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  int operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  int& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

/// Physical triple in millimetres (spacing or offset).
struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  double& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
  double product() const { return x * y * z; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

enum class ChannelKind { T2W, B1000, ADC, MASK, OTHER };

inline std::string_view to_string(ChannelKind kind) {
  switch (kind) {
    case ChannelKind::T2W: return "T2W";
    case ChannelKind::B1000: return "B1000";
    case ChannelKind::ADC: return "ADC";
    case ChannelKind::MASK: return "MASK";
    case ChannelKind::OTHER: return "OTHER";
  }
  return "OTHER";
}

inline ChannelKind channel_from_string(std::string_view name) {
  if (name == "T2W" || name == "t2w") return ChannelKind::T2W;
  if (name == "B1000" || name == "b1000") return ChannelKind::B1000;
  if (name == "ADC" || name == "adc") return ChannelKind::ADC;
  if (name == "MASK" || name == "mask") return ChannelKind::MASK;
  fail(ErrorCode::UnknownChannel, "unknown channel '" + std::string(name) + "'");
}

/// Scalar volume on a regular grid. `origin` is the physical position of the
/// outer corner of voxel (0,0,0), so voxel i along an axis has its centre at
/// origin + (i + 0.5) * spacing.
template <typename T>
class Volume {
 public:
  Volume() = default;
  Volume(Dims3 dims, Vec3 spacing, Vec3 origin = {}, ChannelKind kind = ChannelKind::OTHER, T fill = T{})
      : dims_(dims), spacing_(spacing), origin_(origin), kind_(kind), voxels_(dims.count(), fill) {
    if (spacing.x <= 0 || spacing.y <= 0 || spacing.z <= 0)
      fail(ErrorCode::NonPositiveSpacing, "volume spacing must be positive");
  }

  const Dims3& dims() const { return dims_; }
  const Vec3& spacing() const { return spacing_; }
  const Vec3& origin() const { return origin_; }
  ChannelKind kind() const { return kind_; }
  void set_kind(ChannelKind kind) { kind_ = kind; }
  void set_origin(Vec3 origin) { origin_ = origin; }

  std::size_t size() const { return voxels_.size(); }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_.x) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims_.y) * z);
  }
  T& operator()(int x, int y, int z) { return voxels_[index(x, y, z)]; }
  const T& operator()(int x, int y, int z) const { return voxels_[index(x, y, z)]; }
  T& operator[](std::size_t i) { return voxels_[i]; }
  const T& operator[](std::size_t i) const { return voxels_[i]; }

  std::span<T> data() { return voxels_; }
  std::span<const T> data() const { return voxels_; }
  std::vector<T>& storage() { return voxels_; }
  const std::vector<T>& storage() const { return voxels_; }

  double voxel_volume() const { return spacing_.product(); }

  /// Same dims, spacing and origin.
  bool same_grid(const Volume<T>& other) const {
    return dims_ == other.dims_ && spacing_ == other.spacing_ && origin_ == other.origin_;
  }

 private:
  Dims3 dims_;
  Vec3 spacing_{1.0, 1.0, 1.0};
  Vec3 origin_;
  ChannelKind kind_ = ChannelKind::OTHER;
  std::vector<T> voxels_;
};

using ImageVolume = Volume<float>;

template <typename T>
std::size_t count_nonzero(const Volume<T>& v) {
  return static_cast<std::size_t>(std::count_if(v.data().begin(), v.data().end(), [](T x) { return x != T{}; }));
}

}  // namespace mpseg
