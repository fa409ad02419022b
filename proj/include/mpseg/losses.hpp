#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mpseg/error.hpp"

namespace mpseg {

enum class LossKind { dice, dice_ce, tversky };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::dice: return "dice";
    case LossKind::dice_ce: return "dice_ce";
    case LossKind::tversky: return "tversky";
  }
  return "?";
}

inline LossKind loss_from_string(const std::string& s) {
  if (s == "dice") return LossKind::dice;
  if (s == "dice_ce") return LossKind::dice_ce;
  if (s == "tversky") return LossKind::tversky;
  fail(ErrorCode::ConfigInvalid, "unknown loss '" + s + "'");
}

/// Scalar loss and its gradient with respect to each probability.
struct LossResult {
  double value = 0.0;
  std::vector<double> grad;
};

inline constexpr double kDefaultSmooth = 1e-5;
inline constexpr double kProbClamp = 1e-7;

namespace detail {
template <typename P, typename Q>
void check_same_size(std::span<const P> a, std::span<const Q> b) {
  if (a.size() != b.size()) fail(ErrorCode::ShapeMismatch, "prediction and target sizes differ");
}
}  // namespace detail

/// 1 - (2 sum(pt) + eps) / (sum(p) + sum(t) + eps) over everything passed in.
template <typename T>
LossResult dice_loss(std::span<const T> probs, std::span<const T> target, double smooth = kDefaultSmooth) {
  detail::check_same_size(probs, target);
  double inter = 0.0, sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    inter += static_cast<double>(probs[i]) * target[i];
    sp += probs[i];
    st += target[i];
  }
  const double num = 2.0 * inter + smooth;
  const double den = sp + st + smooth;
  LossResult r{1.0 - num / den, std::vector<double>(probs.size())};
  for (std::size_t i = 0; i < probs.size(); ++i) r.grad[i] = -(2.0 * target[i] * den - num) / (den * den);
  return r;
}

/// Voxel-mean binary cross-entropy on clamped probabilities.
template <typename T>
LossResult bce_loss(std::span<const T> probs, std::span<const T> target) {
  detail::check_same_size(probs, target);
  const double n = static_cast<double>(std::max<std::size_t>(1, probs.size()));
  LossResult r{0.0, std::vector<double>(probs.size())};
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = static_cast<double>(probs[i]);
    const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    const double t = target[i];
    r.value -= t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc);
    r.grad[i] = (p == pc) ? (-t / pc + (1.0 - t) / (1.0 - pc)) / n : 0.0;
  }
  r.value /= n;
  return r;
}

template <typename T>
LossResult dice_ce_loss(std::span<const T> probs, std::span<const T> target, double smooth = kDefaultSmooth) {
  LossResult d = dice_loss(probs, target, smooth);
  LossResult c = bce_loss(probs, target);
  d.value += c.value;
  for (std::size_t i = 0; i < d.grad.size(); ++i) d.grad[i] += c.grad[i];
  return d;
}

/// 1 - (TP + eps) / (TP + alpha FP + beta FN + eps).
template <typename T>
LossResult tversky_loss(std::span<const T> probs, std::span<const T> target, double alpha = 0.3, double beta = 0.7,
                        double smooth = kDefaultSmooth) {
  detail::check_same_size(probs, target);
  if (!(alpha >= 0.0) || !(beta >= 0.0)) fail(ErrorCode::InvalidAlphaBeta, "tversky alpha and beta must be >= 0");
  double tp = 0.0, fp = 0.0, fn = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i], t = target[i];
    tp += p * t;
    fp += p * (1.0 - t);
    fn += (1.0 - p) * t;
  }
  const double num = tp + smooth;
  const double den = tp + alpha * fp + beta * fn + smooth;
  LossResult r{1.0 - num / den, std::vector<double>(probs.size())};
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double t = target[i];
    const double dden = t + alpha * (1.0 - t) - beta * t;
    r.grad[i] = -(t * den - num * dden) / (den * den);
  }
  return r;
}

struct LossConfig {
  LossKind kind = LossKind::dice;
  double smooth = kDefaultSmooth;
  double tversky_alpha = 0.3;
  double tversky_beta = 0.7;
};

template <typename T>
LossResult compute_loss(const LossConfig& cfg, std::span<const T> probs, std::span<const T> target) {
  switch (cfg.kind) {
    case LossKind::dice: return dice_loss(probs, target, cfg.smooth);
    case LossKind::dice_ce: return dice_ce_loss(probs, target, cfg.smooth);
    case LossKind::tversky: return tversky_loss(probs, target, cfg.tversky_alpha, cfg.tversky_beta, cfg.smooth);
  }
  return {};
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Loss of sigmoid(logits); `grad` is with respect to the logits.
template <typename T>
LossResult compute_loss_from_logits(const LossConfig& cfg, std::span<const T> logits, std::span<const T> target) {
  std::vector<T> probs(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) probs[i] = static_cast<T>(sigmoid(logits[i]));
  LossResult r = compute_loss<T>(cfg, probs, target);
  for (std::size_t i = 0; i < probs.size(); ++i) r.grad[i] *= static_cast<double>(probs[i]) * (1.0 - probs[i]);
  return r;
}

}  // namespace mpseg
