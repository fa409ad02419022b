#pragma once

// Reference implementations used only by tests: deliberately naive and
// independent of the library code paths they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mpseg/volume.hpp"

namespace oracle {

/// argmin over D of sum_i (ln S_i - (ln S0 - b_i D))^2 with ln S0 profiled
/// out in closed form, searched on a uniform grid.
inline double adc_grid_search(const std::vector<double>& b, const std::vector<double>& s, double lo, double hi,
                              double step) {
  const std::size_t n = b.size();
  double best_d = lo, best = std::numeric_limits<double>::infinity();
  const auto steps = static_cast<long>(std::llround((hi - lo) / step));
  for (long k = 0; k <= steps; ++k) {
    const double d = lo + k * step;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += std::log(s[i]) + b[i] * d;
    mean /= static_cast<double>(n);
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = std::log(s[i]) - (mean - b[i] * d);
      sse += r * r;
    }
    if (sse < best) {
      best = sse;
      best_d = d;
    }
  }
  return best_d;
}

struct Pt {
  int x, y, z;
};

template <typename T>
std::vector<Pt> boundary(const mpseg::Volume<T>& m) {
  std::vector<Pt> out;
  const auto d = m.dims();
  auto fg = [&](int x, int y, int z) {
    return x >= 0 && y >= 0 && z >= 0 && x < d.x && y < d.y && z < d.z && m(x, y, z) > 0.5;
  };
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

/// All pairwise nearest distances from a to b, O(|a||b|).
inline std::vector<double> brute_directed(const std::vector<Pt>& a, const std::vector<Pt>& b, const mpseg::Vec3& sp) {
  std::vector<double> out;
  for (const auto& p : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b) {
      const double dx = (p.x - q.x) * sp.x, dy = (p.y - q.y) * sp.y, dz = (p.z - q.z) * sp.z;
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

/// Linear-interpolation percentile over sorted values (numpy default).
inline double pct(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct Metrics {
  double dsc;
  std::optional<double> hd95, msd;
  double pred_mm3, gt_mm3;
};

template <typename T>
Metrics brute_metrics(const mpseg::Volume<T>& pred, const mpseg::Volume<T>& gt) {
  Metrics m{};
  double inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > 0.5, g = gt[i] > 0.5;
    inter += p && g;
    np += p;
    ng += g;
  }
  m.dsc = (np + ng) == 0 ? 1.0 : 2.0 * inter / (np + ng);
  const double vv = gt.spacing().x * gt.spacing().y * gt.spacing().z;
  m.pred_mm3 = np * vv;
  m.gt_mm3 = ng * vv;
  if (np > 0 && ng > 0) {
    const auto bp = boundary(pred), bg = boundary(gt);
    auto d = brute_directed(bp, bg, gt.spacing());
    const auto e = brute_directed(bg, bp, gt.spacing());
    d.insert(d.end(), e.begin(), e.end());
    m.hd95 = pct(d, 95.0);
    double s = 0;
    for (double x : d) s += x;
    m.msd = s / static_cast<double>(d.size());
  }
  return m;
}

/// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / den);
  }
  return worst;
}

}  // namespace oracle
