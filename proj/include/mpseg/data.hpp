#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpseg/error.hpp"
#include "mpseg/nifti.hpp"
#include "mpseg/rng.hpp"
#include "mpseg/volume.hpp"

namespace mpseg {

enum class Interp { linear, nearest };

inline Interp interp_from_string(const std::string& s) {
  if (s == "linear" || s == "bilinear" || s == "trilinear") return Interp::linear;
  if (s == "nearest") return Interp::nearest;
  fail(ErrorCode::UnknownMode, "unknown interpolation mode '" + s + "'");
}

/// Regular grid description shared by every channel of a case.
struct Grid {
  Dims3 dims;
  Vec3 spacing;
  Vec3 origin;
  friend bool operator==(const Grid&, const Grid&) = default;
};

template <typename T>
Grid grid_of(const Volume<T>& v) {
  return {v.dims(), v.spacing(), v.origin()};
}

/// Grid covering the same physical extent as `src` at `target_spacing`, with
/// the corner origin held fixed.
inline Grid respaced_grid(const Grid& src, Vec3 target_spacing) {
  if (!(target_spacing.x > 0 && target_spacing.y > 0 && target_spacing.z > 0))
    fail(ErrorCode::NonPositiveSpacing, "target spacing must be positive");
  Grid g{{}, target_spacing, src.origin};
  for (int a = 0; a < 3; ++a) {
    const double extent = src.dims[a] * src.spacing[a];
    g.dims[a] = std::max(1, static_cast<int>(std::lround(extent / target_spacing[a])));
  }
  return g;
}

namespace detail {

struct AxisTaps {
  std::vector<int> lo, hi;
  std::vector<double> w;  // weight of `hi`
};

inline AxisTaps axis_taps(int n_out, double s_out, double o_out, int n_in, double s_in, double o_in,
                          Interp mode) {
  AxisTaps t;
  t.lo.resize(n_out);
  t.hi.resize(n_out);
  t.w.resize(n_out);
  for (int i = 0; i < n_out; ++i) {
    const double p = o_out + (i + 0.5) * s_out;
    double u = (p - o_in) / s_in - 0.5;
    if (mode == Interp::nearest) {
      int k = static_cast<int>(std::floor(u + 0.5));
      k = std::clamp(k, 0, n_in - 1);
      t.lo[i] = t.hi[i] = k;
      t.w[i] = 0.0;
    } else {
      u = std::clamp(u, 0.0, static_cast<double>(n_in - 1));
      int k = static_cast<int>(std::floor(u));
      k = std::clamp(k, 0, n_in - 1);
      t.lo[i] = k;
      t.hi[i] = std::min(k + 1, n_in - 1);
      t.w[i] = u - k;
    }
  }
  return t;
}

}  // namespace detail

/// Samples `vol` onto `grid` by physical voxel-centre correspondence.
template <typename T>
Volume<T> resample_to_grid(const Volume<T>& vol, const Grid& grid, Interp mode) {
  if (!(grid.spacing.x > 0 && grid.spacing.y > 0 && grid.spacing.z > 0))
    fail(ErrorCode::NonPositiveSpacing, "target spacing must be positive");
  Volume<T> out(grid.dims, grid.spacing, grid.origin, vol.kind());
  const auto& d = vol.dims();
  const auto tx = detail::axis_taps(grid.dims.x, grid.spacing.x, grid.origin.x, d.x, vol.spacing().x, vol.origin().x, mode);
  const auto ty = detail::axis_taps(grid.dims.y, grid.spacing.y, grid.origin.y, d.y, vol.spacing().y, vol.origin().y, mode);
  const auto tz = detail::axis_taps(grid.dims.z, grid.spacing.z, grid.origin.z, d.z, vol.spacing().z, vol.origin().z, mode);
  for (int z = 0; z < grid.dims.z; ++z)
    for (int y = 0; y < grid.dims.y; ++y)
      for (int x = 0; x < grid.dims.x; ++x) {
        if (mode == Interp::nearest) {
          out(x, y, z) = vol(tx.lo[x], ty.lo[y], tz.lo[z]);
          continue;
        }
        const double wx = tx.w[x], wy = ty.w[y], wz = tz.w[z];
        auto at = [&](int ix, int iy, int iz) { return static_cast<double>(vol(ix, iy, iz)); };
        const double c00 = at(tx.lo[x], ty.lo[y], tz.lo[z]) * (1 - wx) + at(tx.hi[x], ty.lo[y], tz.lo[z]) * wx;
        const double c10 = at(tx.lo[x], ty.hi[y], tz.lo[z]) * (1 - wx) + at(tx.hi[x], ty.hi[y], tz.lo[z]) * wx;
        const double c01 = at(tx.lo[x], ty.lo[y], tz.hi[z]) * (1 - wx) + at(tx.hi[x], ty.lo[y], tz.hi[z]) * wx;
        const double c11 = at(tx.lo[x], ty.hi[y], tz.hi[z]) * (1 - wx) + at(tx.hi[x], ty.hi[y], tz.hi[z]) * wx;
        const double c0 = c00 * (1 - wy) + c10 * wy;
        const double c1 = c01 * (1 - wy) + c11 * wy;
        out(x, y, z) = static_cast<T>(c0 * (1 - wz) + c1 * wz);
      }
  return out;
}

template <typename T>
Volume<T> resample(const Volume<T>& vol, Vec3 target_spacing, Interp mode) {
  return resample_to_grid(vol, respaced_grid(grid_of(vol), target_spacing), mode);
}

/// Linear resize to `dims` over the same physical extent.
template <typename T>
Volume<T> resize_linear(const Volume<T>& vol, Dims3 dims) {
  Grid g{dims, {}, vol.origin()};
  for (int a = 0; a < 3; ++a) g.spacing[a] = vol.dims()[a] * vol.spacing()[a] / dims[a];
  return resample_to_grid(vol, g, Interp::linear);
}

/// Whole-volume z-score. Flat volumes (std < 1e-8) map to zeros.
template <typename T>
Volume<T> normalize_zscore(const Volume<T>& vol) {
  if (vol.kind() == ChannelKind::MASK) fail(ErrorCode::ChannelMismatch, "masks are not intensity-normalized");
  double mean = 0.0;
  for (std::size_t i = 0; i < vol.size(); ++i) mean += static_cast<double>(vol[i]);
  mean /= static_cast<double>(std::max<std::size_t>(1, vol.size()));
  double var = 0.0;
  for (std::size_t i = 0; i < vol.size(); ++i) {
    const double d = static_cast<double>(vol[i]) - mean;
    var += d * d;
  }
  var /= static_cast<double>(std::max<std::size_t>(1, vol.size()));
  const double sd = std::sqrt(var);
  Volume<T> out(vol.dims(), vol.spacing(), vol.origin(), vol.kind());
  if (sd < 1e-8) return out;
  for (std::size_t i = 0; i < vol.size(); ++i) out[i] = static_cast<T>((static_cast<double>(vol[i]) - mean) / sd);
  return out;
}

struct DatasetSplit {
  std::vector<std::string> train_ids, val_ids, test_ids;
  std::uint64_t seed = 0;
};

struct SplitSizes {
  std::size_t train = 157;
  std::size_t val = 25;
  std::size_t test = 25;
};

inline DatasetSplit split_dataset(const std::vector<std::string>& ids, SplitSizes sizes, std::uint64_t seed) {
  if (sizes.train + sizes.val + sizes.test != ids.size())
    fail(ErrorCode::SizeMismatch, "split sizes sum to " + std::to_string(sizes.train + sizes.val + sizes.test) +
                                      " but there are " + std::to_string(ids.size()) + " cases");
  std::vector<std::string> order = ids;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  DatasetSplit s;
  s.seed = seed;
  s.train_ids.assign(order.begin(), order.begin() + sizes.train);
  s.val_ids.assign(order.begin() + sizes.train, order.begin() + sizes.train + sizes.val);
  s.test_ids.assign(order.begin() + sizes.train + sizes.val, order.end());
  return s;
}

inline nlohmann::json to_json(const DatasetSplit& s) {
  return {{"seed", s.seed}, {"train", s.train_ids}, {"val", s.val_ids}, {"test", s.test_ids}};
}

inline DatasetSplit split_from_json(const nlohmann::json& j) {
  DatasetSplit s;
  s.seed = j.value("seed", std::uint64_t{0});
  s.train_ids = j.at("train").get<std::vector<std::string>>();
  s.val_ids = j.at("val").get<std::vector<std::string>>();
  s.test_ids = j.at("test").get<std::vector<std::string>>();
  return s;
}

/// Co-gridded channels of one subject.
struct MultiparametricCase {
  std::string case_id;
  ImageVolume t2w, b1000, adc, mask;

  const ImageVolume& channel(ChannelKind kind) const {
    switch (kind) {
      case ChannelKind::T2W: return t2w;
      case ChannelKind::B1000: return b1000;
      case ChannelKind::ADC: return adc;
      case ChannelKind::MASK: return mask;
      default: break;
    }
    fail(ErrorCode::UnknownChannel, "case has no such channel");
  }
  ImageVolume& channel(ChannelKind kind) {
    return const_cast<ImageVolume&>(static_cast<const MultiparametricCase&>(*this).channel(kind));
  }
  bool has_mask() const { return mask.size() > 0; }
};

struct CasePaths {
  std::string case_id;
  std::string t2w, b1000, adc, mask;  // empty means absent
};

struct LoadOptions {
  std::optional<Vec3> target_spacing = Vec3{0.6, 0.6, 4.0};
  bool normalize = true;
  bool require_mask = true;
};

inline void save_volume(const ImageVolume& vol, const std::string& path) {
  nifti::write(vol, path, vol.kind() == ChannelKind::MASK ? nifti::DataType::uint8 : nifti::DataType::float32);
}

inline ImageVolume load_volume(const std::string& path, ChannelKind kind) {
  return nifti::read<float>(path, kind);
}

/// Reads every channel, brings all onto the T2W-derived target grid (linear
/// for T2W/b1000, nearest for ADC and mask) and z-scores the image channels.
inline MultiparametricCase load_case(const CasePaths& paths, const LoadOptions& opt = {}) {
  auto need = [&](const std::string& p, const char* name) {
    if (p.empty() || !std::filesystem::exists(p))
      fail(ErrorCode::MissingChannel, "case '" + paths.case_id + "' is missing its " + name + " volume");
  };
  need(paths.t2w, "T2W");
  need(paths.b1000, "B1000");
  need(paths.adc, "ADC");
  const bool want_mask = opt.require_mask || (!paths.mask.empty() && std::filesystem::exists(paths.mask));
  if (want_mask) need(paths.mask, "mask");

  MultiparametricCase c;
  c.case_id = paths.case_id;
  c.t2w = load_volume(paths.t2w, ChannelKind::T2W);
  c.b1000 = load_volume(paths.b1000, ChannelKind::B1000);
  c.adc = load_volume(paths.adc, ChannelKind::ADC);
  if (want_mask) c.mask = load_volume(paths.mask, ChannelKind::MASK);

  const Grid grid = opt.target_spacing ? respaced_grid(grid_of(c.t2w), *opt.target_spacing) : grid_of(c.t2w);
  auto place = [&](ImageVolume& v, Interp mode) {
    if (!(grid_of(v) == grid)) v = resample_to_grid(v, grid, mode);
  };
  place(c.t2w, Interp::linear);
  place(c.b1000, Interp::linear);
  place(c.adc, Interp::nearest);
  if (want_mask) {
    place(c.mask, Interp::nearest);
    for (auto& m : c.mask.storage()) m = m > 0.5f ? 1.0f : 0.0f;
  }
  if (opt.normalize) {
    c.t2w = normalize_zscore(c.t2w);
    c.b1000 = normalize_zscore(c.b1000);
    c.adc = normalize_zscore(c.adc);
  }
  return c;
}

/// Writes <dir>/{t2w,b1000,adc,mask}.nii.gz.
inline CasePaths save_case(const MultiparametricCase& c, const std::filesystem::path& dir) {
  CasePaths p{c.case_id, (dir / "t2w.nii.gz").string(), (dir / "b1000.nii.gz").string(),
              (dir / "adc.nii.gz").string(), c.has_mask() ? (dir / "mask.nii.gz").string() : std::string{}};
  save_volume(c.t2w, p.t2w);
  save_volume(c.b1000, p.b1000);
  save_volume(c.adc, p.adc);
  if (c.has_mask()) save_volume(c.mask, p.mask);
  return p;
}

/// Case directory in the layout written by `save_case`.
inline CasePaths case_paths_in_dir(const std::filesystem::path& dir, std::string id = {}) {
  if (id.empty()) id = dir.filename().string();
  auto opt = [&](const char* name) {
    const auto p = dir / name;
    return std::filesystem::exists(p) ? p.string() : std::string{};
  };
  return {id, opt("t2w.nii.gz"), opt("b1000.nii.gz"), opt("adc.nii.gz"), opt("mask.nii.gz")};
}

/// JSON manifest: {"cases": [{"id", "t2w", "b1000", "adc", "mask"}, ...]}.
/// Relative paths resolve against the manifest's directory.
struct Manifest {
  std::vector<CasePaths> cases;

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& c : cases) out.push_back(c.case_id);
    return out;
  }
  const CasePaths& find(const std::string& id) const {
    for (const auto& c : cases)
      if (c.case_id == id) return c;
    fail(ErrorCode::MissingInput, "case '" + id + "' not in manifest");
  }
};

inline Manifest read_manifest(const std::string& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::MissingInput, "manifest not found: " + path);
  std::ifstream in(path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptFile, "manifest " + path + " is not valid JSON: " + e.what());
  }
  const auto base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const nlohmann::json& c, const char* key) -> std::string {
    if (!c.contains(key) || c[key].is_null()) return {};
    std::filesystem::path p = c[key].get<std::string>();
    return (p.is_absolute() ? p : base / p).string();
  };
  Manifest m;
  if (!j.contains("cases") || !j["cases"].is_array()) fail(ErrorCode::CorruptFile, "manifest lacks a 'cases' array");
  for (const auto& c : j["cases"]) {
    m.cases.push_back({c.at("id").get<std::string>(), resolve(c, "t2w"), resolve(c, "b1000"), resolve(c, "adc"),
                       resolve(c, "mask")});
  }
  return m;
}

inline void write_manifest(const Manifest& m, const std::string& path) {
  const auto base = std::filesystem::path(path).parent_path();
  auto rel = [&](const std::string& p) -> nlohmann::json {
    if (p.empty()) return nullptr;
    return std::filesystem::relative(p, base.empty() ? "." : base).generic_string();
  };
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : m.cases)
    cases.push_back({{"id", c.case_id}, {"t2w", rel(c.t2w)}, {"b1000", rel(c.b1000)}, {"adc", rel(c.adc)},
                     {"mask", rel(c.mask)}});
  if (!base.empty()) std::filesystem::create_directories(base);
  std::ofstream(path) << nlohmann::json{{"cases", cases}}.dump(2) << "\n";
}

}  // namespace mpseg
