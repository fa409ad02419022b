#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "mpseg/error.hpp"
#include "mpseg/volume.hpp"

namespace mpseg::nn {

/// Every buffer starts on a 64-byte boundary. Vectorized kernels peel a
/// scalar prologue up to the first aligned element, so a varying base address
/// would change summation order and break run-to-run reproducibility.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Channels-first feature map of one sample: (C, z, y, x) with x fastest.
template <typename T>
struct Tensor {
  int channels = 0;
  Dims3 dims;
  Buffer<T> data;

  Tensor() = default;
  Tensor(int c, Dims3 d, T fill = T{}) : channels(c), dims(d), data(static_cast<std::size_t>(c) * d.count(), fill) {}

  std::size_t voxels() const { return dims.count(); }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  T* channel(int c) { return data.data() + static_cast<std::size_t>(c) * voxels(); }
  const T* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * voxels(); }
  T& at(int c, int x, int y, int z) {
    return data[static_cast<std::size_t>(c) * voxels() + x + static_cast<std::size_t>(dims.x) * (y + static_cast<std::size_t>(dims.y) * z)];
  }
  const T& at(int c, int x, int y, int z) const {
    return data[static_cast<std::size_t>(c) * voxels() + x + static_cast<std::size_t>(dims.x) * (y + static_cast<std::size_t>(dims.y) * z)];
  }
  bool same_shape(const Tensor& o) const { return channels == o.channels && dims == o.dims; }
};

template <typename T>
Tensor<T>& operator+=(Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) fail(ErrorCode::ShapeMismatch, "tensor add shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
  return a;
}

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) {
  a += b;
  return a;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.dims == b.dims)) fail(ErrorCode::ShapeMismatch, "concat spatial mismatch");
  Tensor<T> out(a.channels + b.channels, a.dims);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

/// Channels [first, first + count).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& t, int first, int count) {
  Tensor<T> out(count, t.dims);
  std::copy(t.channel(first), t.channel(first) + static_cast<std::size_t>(count) * t.voxels(), out.data.begin());
  return out;
}

template <typename T>
Tensor<T> gather_channels(const Tensor<T>& t, std::span<const int> which) {
  Tensor<T> out(static_cast<int>(which.size()), t.dims);
  for (std::size_t i = 0; i < which.size(); ++i)
    std::copy(t.channel(which[i]), t.channel(which[i]) + t.voxels(), out.channel(static_cast<int>(i)));
  return out;
}

/// Trainable tensor. Shared between layers through shared_ptr when weights are tied.
template <typename T>
struct Param {
  std::vector<int> shape;
  Buffer<T> value;
  Buffer<T> grad;

  explicit Param(std::vector<int> s) : shape(std::move(s)) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    value.assign(n, T{});
    grad.assign(n, T{});
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T{}); }
};

template <typename T>
using ParamPtr = std::shared_ptr<Param<T>>;

template <typename T>
struct NamedParam {
  std::string name;
  ParamPtr<T> param;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
void append_prefixed(ParamList<T>& out, const std::string& prefix, const ParamList<T>& in) {
  for (const auto& p : in) out.push_back({prefix + p.name, p.param});
}

/// First occurrence of each distinct storage.
template <typename T>
ParamList<T> unique_params(const ParamList<T>& all) {
  ParamList<T> out;
  for (const auto& p : all) {
    bool seen = std::any_of(out.begin(), out.end(), [&](const NamedParam<T>& q) { return q.param == p.param; });
    if (!seen) out.push_back(p);
  }
  return out;
}

}  // namespace mpseg::nn
