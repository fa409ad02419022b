#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mpseg/error.hpp"
#include "mpseg/volume.hpp"

namespace mpseg {

/// Signals at or below this level cannot enter a log-domain fit.
inline constexpr double kSignalFloor = 1e-6;

enum class FitMethod { two_point, least_squares };

/// Co-registered diffusion-weighted volumes, one per b-value (s/mm^2), ascending.
template <typename T = float>
struct DWISeries {
  std::vector<double> b_values;
  std::vector<Volume<T>> signals;

  Vec3 spacing() const { return signals.empty() ? Vec3{} : signals.front().spacing(); }
  Dims3 dims() const { return signals.empty() ? Dims3{} : signals.front().dims(); }
};

struct ADCMap {
  Volume<double> values;           // mm^2/s
  Volume<std::uint8_t> valid;      // 1 where every signal was above the floor
  FitMethod fit_method = FitMethod::least_squares;
};

/// Mono-exponential forward model S_b = S_0 exp(-b D).
inline double predict_signal(double s0, double b, double d) { return s0 * std::exp(-b * d); }

namespace detail {

template <typename T>
void check_series_grid(const DWISeries<T>& series) {
  if (series.b_values.size() != series.signals.size())
    fail(ErrorCode::InvalidSeries, "b-value count does not match signal volume count");
  if (series.signals.size() < 2) fail(ErrorCode::InvalidSeries, "at least two b-values are required");
  const auto& ref = series.signals.front();
  for (const auto& s : series.signals)
    if (!s.same_grid(ref)) fail(ErrorCode::ShapeMismatch, "signal volumes differ in grid");
}

inline void check_b_values(const std::vector<double>& b) {
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!(b[i] >= 0.0)) fail(ErrorCode::InvalidSeries, "b-values must be non-negative");
    if (i > 0 && !(b[i] > b[i - 1])) fail(ErrorCode::InvalidSeries, "b-values must be strictly increasing");
  }
}

template <typename T>
ADCMap empty_map(const DWISeries<T>& series, FitMethod method) {
  const auto& ref = series.signals.front();
  ADCMap out{Volume<double>(ref.dims(), ref.spacing(), ref.origin(), ChannelKind::ADC),
             Volume<std::uint8_t>(ref.dims(), ref.spacing(), ref.origin(), ChannelKind::MASK), method};
  return out;
}

}  // namespace detail

/// D = -ln(S_b1 / S_b0) / b1 per voxel. Requires exactly {0, b1}.
template <typename T>
ADCMap fit_adc_two_point(const DWISeries<T>& series) {
  if (series.b_values.size() != 2 || series.signals.size() != 2)
    fail(ErrorCode::InvalidSeries, "two-point fit needs exactly two b-values");
  if (series.b_values[0] != 0.0) fail(ErrorCode::MissingB0, "first b-value must be 0");
  detail::check_series_grid(series);
  detail::check_b_values(series.b_values);

  ADCMap out = detail::empty_map(series, FitMethod::two_point);
  const double b1 = series.b_values[1];
  const auto& s0 = series.signals[0];
  const auto& s1 = series.signals[1];
  for (std::size_t i = 0; i < s0.size(); ++i) {
    const double a = static_cast<double>(s0[i]);
    const double c = static_cast<double>(s1[i]);
    if (a <= kSignalFloor || c <= kSignalFloor) {
      out.values[i] = 0.0;
      out.valid[i] = 0;
      continue;
    }
    out.values[i] = -std::log(c / a) / b1;
    out.valid[i] = 1;
  }
  return out;
}

/// Negated ordinary-least-squares slope of ln S against b, any N >= 2.
template <typename T>
ADCMap fit_adc_least_squares(const DWISeries<T>& series) {
  detail::check_series_grid(series);
  const auto& b = series.b_values;
  const double n = static_cast<double>(b.size());
  double sum_b = 0.0;
  double sum_b2 = 0.0;
  for (double bi : b) {
    sum_b += bi;
    sum_b2 += bi * bi;
  }
  const double denom = n * sum_b2 - sum_b * sum_b;
  if (!(std::abs(denom) > 0.0)) fail(ErrorCode::DegenerateDesign, "all b-values are equal");
  detail::check_b_values(b);

  ADCMap out = detail::empty_map(series, FitMethod::least_squares);
  const std::size_t voxels = series.signals.front().size();
  for (std::size_t i = 0; i < voxels; ++i) {
    double sum_log = 0.0;
    double sum_b_log = 0.0;
    bool ok = true;
    for (std::size_t k = 0; k < b.size(); ++k) {
      const double s = static_cast<double>(series.signals[k][i]);
      if (s <= kSignalFloor) {
        ok = false;
        break;
      }
      const double ls = std::log(s);
      sum_log += ls;
      sum_b_log += b[k] * ls;
    }
    if (!ok) {
      out.values[i] = 0.0;
      out.valid[i] = 0;
      continue;
    }
    out.values[i] = -(n * sum_b_log - sum_b * sum_log) / denom;
    out.valid[i] = 1;
  }
  return out;
}

template <typename T>
ADCMap fit_adc(const DWISeries<T>& series, FitMethod method) {
  return method == FitMethod::two_point ? fit_adc_two_point(series) : fit_adc_least_squares(series);
}

inline FitMethod fit_method_from_string(const std::string& s) {
  if (s == "two-point" || s == "two_point") return FitMethod::two_point;
  if (s == "least-squares" || s == "least_squares") return FitMethod::least_squares;
  fail(ErrorCode::UnknownMode, "unknown fit method '" + s + "'");
}

}  // namespace mpseg
