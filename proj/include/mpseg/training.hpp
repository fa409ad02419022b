#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpseg/architectures.hpp"
#include "mpseg/inference.hpp"
#include "mpseg/losses.hpp"
#include "mpseg/metrics.hpp"
#include "mpseg/optim.hpp"
#include "mpseg/sampling.hpp"

namespace mpseg {

struct TrainConfig {
  std::int64_t iterations = 100000;
  int batch_size = 2;
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double lr_floor = 1e-6;
  LossConfig loss;
  std::uint64_t seed = 0;
  std::int64_t epoch_length = 0;   // 0: ceil(#train cases / batch size)
  std::int64_t val_every = 1;      // epochs between validations
  Dims3 patch{256, 256, 16};
  AugmentConfig augment;
  SlidingWindowOptions window;
  double threshold = 0.5;
};

inline void validate(const TrainConfig& c) {
  if (c.iterations <= 0) fail(ErrorCode::ConfigInvalid, "iterations must be positive");
  if (c.batch_size <= 0) fail(ErrorCode::ConfigInvalid, "batch size must be positive");
  if (!(c.lr > 0)) fail(ErrorCode::ConfigInvalid, "learning rate must be positive");
  if (c.weight_decay < 0 || c.lr_floor < 0) fail(ErrorCode::ConfigInvalid, "weight decay and lr floor must be >= 0");
  if (c.epoch_length < 0 || c.val_every <= 0) fail(ErrorCode::ConfigInvalid, "bad epoch cadence");
  if (c.loss.tversky_alpha < 0 || c.loss.tversky_beta < 0) fail(ErrorCode::InvalidAlphaBeta, "alpha, beta must be >= 0");
  validate(c.augment);
}

inline std::int64_t epoch_length(const TrainConfig& c, std::size_t train_cases) {
  if (c.epoch_length > 0) return c.epoch_length;
  return std::max<std::int64_t>(1, (static_cast<std::int64_t>(train_cases) + c.batch_size - 1) / c.batch_size);
}

template <typename T>
struct Checkpoint {
  ModelSpec spec;
  std::vector<std::string> names;
  std::vector<std::vector<T>> values;
  std::vector<std::vector<double>> adam_m, adam_v;
  std::int64_t adam_steps = 0;
  std::int64_t iteration = 0;
  double best_val_dsc = -1.0;
  nlohmann::json meta = nlohmann::json::object();
};

template <typename T>
Checkpoint<T> snapshot(const SegmentationModel<T>& model, const Adam<T>* opt = nullptr) {
  Checkpoint<T> ck;
  ck.spec = model.spec();
  for (const auto& p : model.parameters()) {
    ck.names.push_back(p.name);
    ck.values.emplace_back(p.param->value.begin(), p.param->value.end());
  }
  if (opt) {
    ck.adam_m = opt->first_moments();
    ck.adam_v = opt->second_moments();
    ck.adam_steps = opt->steps();
  }
  return ck;
}

template <typename T>
void restore(SegmentationModel<T>& model, const Checkpoint<T>& ck) {
  auto params = model.parameters();
  if (params.size() != ck.values.size()) fail(ErrorCode::CorruptFile, "checkpoint does not match the model layout");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != ck.names[i] || params[i].param->size() != ck.values[i].size())
      fail(ErrorCode::CorruptFile, "checkpoint tensor '" + ck.names[i] + "' does not match the model");
    params[i].param->value.assign(ck.values[i].begin(), ck.values[i].end());
  }
}

template <typename T>
SegmentationModel<T> model_from_checkpoint(const Checkpoint<T>& ck) {
  SegmentationModel<T> m(ck.spec);
  restore(m, ck);
  return m;
}

inline constexpr char kCheckpointMagic[8] = {'M', 'P', 'S', 'E', 'G', 'C', 'K', '1'};

/// Header JSON then raw little-endian tensors; written to a temporary file
/// and renamed into place.
template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const std::string& path) {
  nlohmann::json h;
  h["spec"] = to_json(ck.spec);
  h["names"] = ck.names;
  std::vector<std::size_t> sizes;
  for (const auto& v : ck.values) sizes.push_back(v.size());
  h["sizes"] = sizes;
  h["dtype"] = sizeof(T) == 4 ? "float32" : "float64";
  h["iteration"] = ck.iteration;
  h["best_val_dsc"] = ck.best_val_dsc;
  h["adam_steps"] = ck.adam_steps;
  h["has_adam"] = !ck.adam_m.empty();
  h["meta"] = ck.meta;
  const std::string header = h.dump();

  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorCode::CorruptFile, "cannot write " + tmp);
    out.write(kCheckpointMagic, 8);
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& v : ck.values) out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
    for (const auto* set : {&ck.adam_m, &ck.adam_v})
      for (const auto& v : *set) out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!out) fail(ErrorCode::CorruptFile, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::MissingInput, "checkpoint not found: " + path);
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  std::uint64_t len = 0;
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    fail(ErrorCode::CorruptFile, path + " is not a checkpoint");
  if (!in.read(reinterpret_cast<char*>(&len), sizeof len) || len > (1u << 30)) fail(ErrorCode::CorruptFile, "bad checkpoint header");
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptFile, std::string("bad checkpoint header: ") + e.what());
  }
  if (h.at("dtype").get<std::string>() != (sizeof(T) == 4 ? "float32" : "float64"))
    fail(ErrorCode::CorruptFile, "checkpoint precision differs from the requested model type");
  Checkpoint<T> ck;
  ck.spec = spec_from_json(h.at("spec"));
  ck.names = h.at("names").get<std::vector<std::string>>();
  const auto sizes = h.at("sizes").get<std::vector<std::size_t>>();
  ck.iteration = h.value("iteration", std::int64_t{0});
  ck.best_val_dsc = h.value("best_val_dsc", -1.0);
  ck.adam_steps = h.value("adam_steps", std::int64_t{0});
  ck.meta = h.value("meta", nlohmann::json::object());
  for (std::size_t s : sizes) {
    std::vector<T> v(s);
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(s * sizeof(T))))
      fail(ErrorCode::CorruptFile, "truncated checkpoint " + path);
    ck.values.push_back(std::move(v));
  }
  if (h.value("has_adam", false)) {
    for (auto* set : {&ck.adam_m, &ck.adam_v})
      for (std::size_t s : sizes) {
        std::vector<double> v(s);
        if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(s * sizeof(double))))
          fail(ErrorCode::CorruptFile, "truncated optimizer state in " + path);
        set->push_back(std::move(v));
      }
  }
  return ck;
}

/// Mean whole-volume DSC of thresholded sliding-window predictions.
template <typename T>
double validation_dsc(const SegmentationModel<T>& model, const std::vector<MultiparametricCase>& cases,
                      const SlidingWindowOptions& window, double threshold) {
  if (cases.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : cases) s += dsc(binarize(sliding_window(model, c, window), threshold), c.mask);
  return s / static_cast<double>(cases.size());
}

struct EpochLog {
  std::int64_t epoch = 0;
  std::int64_t iteration = 0;
  double loss = 0.0;
  std::optional<double> val_dsc;
  double best_val_dsc = -1.0;
  double lr = 0.0;
};

inline nlohmann::json to_json(const EpochLog& e) {
  nlohmann::json j{{"epoch", e.epoch}, {"iteration", e.iteration}, {"loss", e.loss}, {"lr", e.lr},
                   {"best_val_dsc", e.best_val_dsc}};
  j["val_dsc"] = e.val_dsc ? nlohmann::json(*e.val_dsc) : nlohmann::json(nullptr);
  return j;
}

template <typename T>
struct TrainResult {
  Checkpoint<T> best;
  std::vector<EpochLog> history;
};

struct TrainIO {
  std::ostream* log = nullptr;       // JSON lines, one per epoch
  std::string checkpoint_dir;        // best.ckpt / last.ckpt when non-empty
  nlohmann::json checkpoint_meta = nlohmann::json::object();
};

/// Adam on stochastic tumor-constrained patches with per-epoch cosine lr and
/// whole-volume validation; keeps the best-validation weights.
template <typename T>
TrainResult<T> train(SegmentationModel<T>& model, const std::vector<MultiparametricCase>& train_cases,
                     const std::vector<MultiparametricCase>& val_cases, const TrainConfig& cfg, const TrainIO& io = {}) {
  validate(cfg);
  if (train_cases.empty()) fail(ErrorCode::MissingInput, "training needs at least one case");
  if (val_cases.empty()) fail(ErrorCode::MissingInput, "training needs at least one validation case");
  const auto order = input_channels(model.spec().variant);
  const std::int64_t per_epoch = epoch_length(cfg, train_cases.size());
  const std::int64_t total_epochs = (cfg.iterations + per_epoch - 1) / per_epoch;

  Rng root(cfg.seed);
  Rng pick = root.fork();
  Rng sampler = root.fork();
  Rng aug = root.fork();
  Adam<T> opt(model.parameters(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  model.zero_grad();

  TrainResult<T> result;
  result.best = snapshot(model);
  double best = -1.0;
  double epoch_loss = 0.0;
  std::int64_t epoch_steps = 0;

  std::vector<ModelCache<T>> caches(cfg.batch_size);
  std::vector<nn::Tensor<T>> logits(cfg.batch_size);
  std::vector<T> flat_logits, flat_labels;
  for (std::int64_t it = 0; it < cfg.iterations; ++it) {
    const std::int64_t epoch = it / per_epoch;
    if (it % per_epoch == 0) opt.set_lr(cosine_lr(cfg.lr, cfg.lr_floor, epoch, total_epochs));

    flat_logits.clear();
    flat_labels.clear();
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& c = train_cases[static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(train_cases.size()) - 1))];
      Patch p = augment(sample_patch(c, order, cfg.patch, sampler), cfg.augment, aug);
      logits[b] = model.forward(p.image, &caches[b]);
      flat_logits.insert(flat_logits.end(), logits[b].data.begin(), logits[b].data.end());
      flat_labels.insert(flat_labels.end(), p.label.data.begin(), p.label.data.end());
    }
    const LossResult loss = compute_loss_from_logits<T>(cfg.loss, std::span<const T>(flat_logits), std::span<const T>(flat_labels));
    if (!std::isfinite(loss.value))
      fail(ErrorCode::Divergence, "non-finite loss at iteration " + std::to_string(it));
    std::size_t off = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      nn::Tensor<T> g(1, logits[b].dims);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = static_cast<T>(loss.grad[off + i]);
      off += g.size();
      model.backward(g, caches[b]);
    }
    opt.step();
    model.zero_grad();
    epoch_loss += loss.value;
    ++epoch_steps;

    const bool epoch_end = (it + 1) % per_epoch == 0 || it + 1 == cfg.iterations;
    if (!epoch_end) continue;
    EpochLog e;
    e.epoch = epoch;
    e.iteration = it + 1;
    e.loss = epoch_loss / static_cast<double>(std::max<std::int64_t>(1, epoch_steps));
    e.lr = opt.lr();
    if (epoch % cfg.val_every == 0 || it + 1 == cfg.iterations) {
      const double v = validation_dsc(model, val_cases, cfg.window, cfg.threshold);
      e.val_dsc = v;
      if (v > best) {
        best = v;
        result.best = snapshot(model, &opt);
        result.best.iteration = it + 1;
        result.best.best_val_dsc = v;
        result.best.meta = io.checkpoint_meta;
        if (!io.checkpoint_dir.empty()) save_checkpoint(result.best, io.checkpoint_dir + "/best.ckpt");
      }
    }
    e.best_val_dsc = best;
    result.history.push_back(e);
    if (io.log) *io.log << to_json(e).dump() << "\n" << std::flush;
    epoch_loss = 0.0;
    epoch_steps = 0;
  }
  if (!io.checkpoint_dir.empty()) {
    Checkpoint<T> last = snapshot(model, &opt);
    last.iteration = cfg.iterations;
    last.best_val_dsc = best;
    last.meta = io.checkpoint_meta;
    save_checkpoint(last, io.checkpoint_dir + "/last.ckpt");
  }
  return result;
}

}  // namespace mpseg
