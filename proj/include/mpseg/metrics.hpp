#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "mpseg/error.hpp"
#include "mpseg/rng.hpp"
#include "mpseg/volume.hpp"

namespace mpseg {

namespace detail {
template <typename T>
void check_grid(const Volume<T>& a, const Volume<T>& b) {
  const auto close = [](double x, double y) { return std::abs(x - y) <= 1e-6 * std::max(std::abs(x), std::abs(y)); };
  const Vec3 p = a.spacing(), q = b.spacing();
  if (!(a.dims() == b.dims()) || !close(p.x, q.x) || !close(p.y, q.y) || !close(p.z, q.z))
    fail(ErrorCode::GridMismatch, "masks are on different grids");
}
}  // namespace detail

/// 2|A n B| / (|A| + |B|); 1 when both are empty.
template <typename T>
double dsc(const Volume<T>& pred, const Volume<T>& gt) {
  detail::check_grid(pred, gt);
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > T(0.5), g = gt[i] > T(0.5);
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

using Voxel = std::array<int, 3>;

/// Foreground voxels with at least one face neighbour in the background
/// (outside the grid counts as background).
template <typename T>
std::vector<Voxel> surface_voxels(const Volume<T>& mask) {
  const Dims3 d = mask.dims();
  auto fg = [&](int x, int y, int z) {
    if (x < 0 || y < 0 || z < 0 || x >= d.x || y >= d.y || z >= d.z) return false;
    return mask(x, y, z) > T(0.5);
  };
  std::vector<Voxel> out;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        if (!fg(x, y, z)) continue;
        if (!fg(x - 1, y, z) || !fg(x + 1, y, z) || !fg(x, y - 1, z) || !fg(x, y + 1, z) || !fg(x, y, z - 1) ||
            !fg(x, y, z + 1))
          out.push_back({x, y, z});
      }
  return out;
}

/// Exact nearest-point queries against a fixed voxel set, searching rows in
/// order of increasing lower bound.
class SurfaceIndex {
 public:
  SurfaceIndex(const std::vector<Voxel>& points, Dims3 dims, Vec3 spacing) : dims_(dims), spacing_(spacing) {
    rows_.resize(static_cast<std::size_t>(dims.y) * dims.z);
    for (const auto& p : points) rows_[row(p[1], p[2])].push_back(p[0]);
    for (auto& r : rows_) std::sort(r.begin(), r.end());
  }

  /// Squared physical distance to the nearest indexed point, summed x, y then z.
  double nearest_sq(const Voxel& q) const {
    double best = std::numeric_limits<double>::infinity();
    for (int dz = 0; dz < dims_.z; ++dz) {
      const double ddz = dz * spacing_.z;
      const double dz2 = ddz * ddz;
      if (dz2 >= best) break;
      for (int side = 0; side < (dz == 0 ? 1 : 2); ++side) {
        const int sz = side == 0 ? q[2] - dz : q[2] + dz;
        if (sz < 0 || sz >= dims_.z) continue;
        for (int dy = 0; dy < dims_.y; ++dy) {
          const double ddy = dy * spacing_.y;
          const double dy2 = ddy * ddy;
          if (dy2 + dz2 >= best) break;
          for (int yside = 0; yside < (dy == 0 ? 1 : 2); ++yside) {
            const int sy = yside == 0 ? q[1] - dy : q[1] + dy;
            if (sy < 0 || sy >= dims_.y) continue;
            scan_row(rows_[row(sy, sz)], q[0], dy2, dz2, best);
          }
        }
      }
    }
    return best;
  }

 private:
  std::size_t row(int y, int z) const { return static_cast<std::size_t>(y) + static_cast<std::size_t>(dims_.y) * z; }

  void scan_row(const std::vector<int>& xs, int qx, double dy2, double dz2, double& best) const {
    if (xs.empty()) return;
    auto it = std::lower_bound(xs.begin(), xs.end(), qx);
    auto eval = [&](int x) {
      const double ddx = (x - qx) * spacing_.x;
      return (ddx * ddx + dy2) + dz2;
    };
    for (auto r = it; r != xs.end(); ++r) {
      const double d = eval(*r);
      if (d < best) best = d;
      else break;
    }
    for (auto l = it; l != xs.begin();) {
      --l;
      const double d = eval(*l);
      if (d < best) best = d;
      else break;
    }
  }

  Dims3 dims_;
  Vec3 spacing_;
  std::vector<std::vector<int>> rows_;
};

/// Directed surface distances (mm) from every surface voxel of `from` to the
/// surface of `to`.
template <typename T>
std::vector<double> directed_surface_distances(const Volume<T>& from, const Volume<T>& to, Vec3 spacing) {
  const auto src = surface_voxels(from);
  const auto dst = surface_voxels(to);
  std::vector<double> out;
  if (src.empty() || dst.empty()) return out;
  SurfaceIndex index(dst, to.dims(), spacing);
  out.reserve(src.size());
  for (const auto& p : src) out.push_back(std::sqrt(index.nearest_sq(p)));
  return out;
}

/// Both directed distance sets concatenated (pred->gt then gt->pred).
template <typename T>
std::vector<double> pooled_surface_distances(const Volume<T>& pred, const Volume<T>& gt, Vec3 spacing) {
  detail::check_grid(pred, gt);
  auto a = directed_surface_distances(pred, gt, spacing);
  auto b = directed_surface_distances(gt, pred, spacing);
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

/// Linear-interpolated percentile, q in [0, 100].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

template <typename T>
bool any_foreground(const Volume<T>& m) {
  return std::any_of(m.data().begin(), m.data().end(), [](T v) { return v > T(0.5); });
}

/// Undefined (nullopt) when either mask is empty.
template <typename T>
std::optional<double> hd95(const Volume<T>& pred, const Volume<T>& gt, Vec3 spacing) {
  detail::check_grid(pred, gt);
  if (!any_foreground(pred) || !any_foreground(gt)) return std::nullopt;
  return percentile(pooled_surface_distances(pred, gt, spacing), 95.0);
}

template <typename T>
std::optional<double> msd(const Volume<T>& pred, const Volume<T>& gt, Vec3 spacing) {
  detail::check_grid(pred, gt);
  if (!any_foreground(pred) || !any_foreground(gt)) return std::nullopt;
  const auto d = pooled_surface_distances(pred, gt, spacing);
  double s = 0.0;
  for (double v : d) s += v;
  return s / static_cast<double>(d.size());
}

template <typename T>
double foreground_volume(const Volume<T>& m, Vec3 spacing) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i) n += m[i] > T(0.5);
  return static_cast<double>(n) * spacing.product();
}

/// 100 (V_pred - V_gt) / V_gt.
template <typename T>
double rel_volume_diff(const Volume<T>& pred, const Volume<T>& gt, Vec3 spacing) {
  detail::check_grid(pred, gt);
  const double vg = foreground_volume(gt, spacing);
  if (vg <= 0.0) fail(ErrorCode::EmptyGroundTruth, "relative volume difference needs a nonempty ground truth");
  return 100.0 * (foreground_volume(pred, spacing) - vg) / vg;
}

struct EvaluationReport {
  std::string case_id;
  double dsc = 0.0;
  std::optional<double> hd95;
  std::optional<double> msd;
  std::optional<double> rel_vol_pct;
  double pred_volume_mm3 = 0.0;
  double gt_volume_mm3 = 0.0;
};

template <typename T>
EvaluationReport evaluate_case(const std::string& id, const Volume<T>& pred, const Volume<T>& gt) {
  const Vec3 sp = gt.spacing();
  EvaluationReport r;
  r.case_id = id;
  r.dsc = dsc(pred, gt);
  r.hd95 = hd95(pred, gt, sp);
  r.msd = msd(pred, gt, sp);
  r.pred_volume_mm3 = foreground_volume(pred, sp);
  r.gt_volume_mm3 = foreground_volume(gt, sp);
  if (r.gt_volume_mm3 > 0.0) r.rel_vol_pct = rel_volume_diff(pred, gt, sp);
  return r;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct MedianSummary {
  double median = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n = 0;
};

/// Median with a percentile-bootstrap 95% interval.
inline MedianSummary bootstrap_median(const std::vector<double>& v, std::size_t resamples = 2000, std::uint64_t seed = 0) {
  MedianSummary s;
  s.n = v.size();
  if (v.empty()) {
    s.median = s.ci_low = s.ci_high = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.median = median(v);
  Rng rng(seed);
  std::vector<double> meds(resamples), draw(v.size());
  for (auto& m : meds) {
    for (auto& d : draw) d = v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(v.size()) - 1))];
    m = median(draw);
  }
  s.ci_low = percentile(meds, 2.5);
  s.ci_high = percentile(meds, 97.5);
  return s;
}

inline std::string format_metric(std::optional<double> v) {
  if (!v || !std::isfinite(*v)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  if (std::string_view(buf) == "-0.000000") return "0.000000";
  return buf;
}

inline void write_report_header(std::ostream& os, const std::string& leading = "case_id") {
  os << leading << ",dsc,hd95_mm,msd_mm,rel_vol_pct,pred_volume_mm3,gt_volume_mm3\n";
}

inline void write_report_row(std::ostream& os, const EvaluationReport& r, const std::string& leading) {
  os << leading << ',' << format_metric(r.dsc) << ',' << format_metric(r.hd95) << ',' << format_metric(r.msd) << ','
     << format_metric(r.rel_vol_pct) << ',' << format_metric(r.pred_volume_mm3) << ','
     << format_metric(r.gt_volume_mm3) << '\n';
}

/// Per-case rows followed by median / ci95_low / ci95_high summary rows.
inline void write_report_csv(std::ostream& os, const std::vector<EvaluationReport>& reports, std::uint64_t seed = 0) {
  write_report_header(os);
  for (const auto& r : reports) write_report_row(os, r, r.case_id);
  auto column = [&](auto get) {
    std::vector<double> v;
    for (const auto& r : reports) {
      std::optional<double> x = get(r);
      if (x && std::isfinite(*x)) v.push_back(*x);
    }
    return bootstrap_median(v, 2000, seed);
  };
  const auto d = column([](const EvaluationReport& r) { return std::optional<double>(r.dsc); });
  const auto h = column([](const EvaluationReport& r) { return r.hd95; });
  const auto m = column([](const EvaluationReport& r) { return r.msd; });
  const auto v = column([](const EvaluationReport& r) { return r.rel_vol_pct; });
  const auto pv = column([](const EvaluationReport& r) { return std::optional<double>(r.pred_volume_mm3); });
  const auto gv = column([](const EvaluationReport& r) { return std::optional<double>(r.gt_volume_mm3); });
  auto row = [&](const char* name, auto pick) {
    os << name << ',' << format_metric(pick(d)) << ',' << format_metric(pick(h)) << ',' << format_metric(pick(m)) << ','
       << format_metric(pick(v)) << ',' << format_metric(pick(pv)) << ',' << format_metric(pick(gv)) << '\n';
  };
  row("__median__", [](const MedianSummary& s) { return s.median; });
  row("__ci95_low__", [](const MedianSummary& s) { return s.ci_low; });
  row("__ci95_high__", [](const MedianSummary& s) { return s.ci_high; });
}

}  // namespace mpseg
