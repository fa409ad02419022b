#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "mpseg/architectures.hpp"
#include "mpseg/data.hpp"
#include "mpseg/phantom.hpp"
#include "mpseg/training.hpp"

namespace mpseg::config {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Schema subset: type, properties, additionalProperties=false, enum, minimum,
// exclusiveMinimum, maximum, items, minItems, maxItems.

inline bool type_matches(const json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "integer") return v.is_number_integer() || (v.is_number_float() && v.get<double>() == std::floor(v.get<double>()));
  if (t == "number") return v.is_number();
  if (t == "null") return v.is_null();
  return false;
}

inline void validate_schema(const json& v, const json& schema, const std::string& path = "") {
  const std::string where = path.empty() ? "<root>" : path;
  if (schema.contains("type")) {
    const json& t = schema["type"];
    bool ok = false;
    if (t.is_array()) {
      for (const auto& s : t) ok = ok || type_matches(v, s.get<std::string>());
    } else {
      ok = type_matches(v, t.get<std::string>());
    }
    if (!ok) fail(ErrorCode::ConfigInvalid, where + ": expected " + t.dump() + ", got " + v.dump());
  }
  if (schema.contains("enum")) {
    bool ok = false;
    for (const auto& e : schema["enum"]) ok = ok || e == v;
    if (!ok) fail(ErrorCode::ConfigInvalid, where + ": " + v.dump() + " not in " + schema["enum"].dump());
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (schema.contains("minimum") && x < schema["minimum"].get<double>())
      fail(ErrorCode::ConfigInvalid, where + ": must be >= " + schema["minimum"].dump());
    if (schema.contains("exclusiveMinimum") && x <= schema["exclusiveMinimum"].get<double>())
      fail(ErrorCode::ConfigInvalid, where + ": must be > " + schema["exclusiveMinimum"].dump());
    if (schema.contains("maximum") && x > schema["maximum"].get<double>())
      fail(ErrorCode::ConfigInvalid, where + ": must be <= " + schema["maximum"].dump());
  }
  if (v.is_object() && schema.contains("properties")) {
    const json& props = schema["properties"];
    for (auto it = v.begin(); it != v.end(); ++it) {
      if (!props.contains(it.key())) {
        if (schema.value("additionalProperties", true) == false)
          fail(ErrorCode::ConfigInvalid, where + ": unknown key '" + it.key() + "'");
        continue;
      }
      validate_schema(it.value(), props[it.key()], path.empty() ? it.key() : path + "." + it.key());
    }
  }
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema["minItems"].get<std::size_t>())
      fail(ErrorCode::ConfigInvalid, where + ": needs at least " + schema["minItems"].dump() + " items");
    if (schema.contains("maxItems") && v.size() > schema["maxItems"].get<std::size_t>())
      fail(ErrorCode::ConfigInvalid, where + ": allows at most " + schema["maxItems"].dump() + " items");
    if (schema.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i) validate_schema(v[i], schema["items"], where + "[" + std::to_string(i) + "]");
  }
}

namespace schema_parts {
inline json obj(json props) { return {{"type", "object"}, {"additionalProperties", false}, {"properties", std::move(props)}}; }
inline json num(double lo) { return {{"type", "number"}, {"minimum", lo}}; }
inline json pos() { return {{"type", "number"}, {"exclusiveMinimum", 0}}; }
inline json prob() { return {{"type", "number"}, {"minimum", 0}, {"maximum", 1}}; }
inline json integer(double lo) { return {{"type", "integer"}, {"minimum", lo}}; }
inline json vec3(json item) { return {{"type", "array"}, {"items", std::move(item)}, {"minItems", 3}, {"maxItems", 3}}; }
inline json str() { return {{"type", "string"}}; }
inline json boolean() { return {{"type", "boolean"}}; }
}  // namespace schema_parts

inline json experiment_schema() {
  using namespace schema_parts;
  json variants = json::array();
  for (Variant v : all_variants()) variants.push_back(to_string(v));
  return obj({
      {"data", obj({{"manifest", str()},
                    {"split", obj({{"train", integer(1)}, {"val", integer(1)}, {"test", integer(1)}, {"seed", integer(0)}})},
                    {"target_spacing", vec3(pos())},
                    {"normalize", boolean()}})},
      {"model", obj({{"variant", {{"type", "string"}, {"enum", variants}}},
                     {"level_filters", {{"type", "array"}, {"items", integer(1)}, {"minItems", 1}}},
                     {"bottleneck_filters", integer(1)},
                     {"head_dilations", vec3(integer(1))},
                     {"kernel_size", {{"type", "integer"}, {"enum", {1, 3, 5}}}},
                     {"seed", integer(0)}})},
      {"train", obj({{"iterations", integer(1)},
                     {"batch_size", integer(1)},
                     {"lr", pos()},
                     {"weight_decay", num(0)},
                     {"lr_floor", num(0)},
                     {"loss", {{"type", "string"}, {"enum", {"dice", "dice_ce", "tversky"}}}},
                     {"tversky_alpha", num(0)},
                     {"tversky_beta", num(0)},
                     {"smooth", num(0)},
                     {"seed", integer(0)},
                     {"epoch_length", integer(0)},
                     {"val_every", integer(1)},
                     {"patch", vec3(integer(1))}})},
      {"sampler", obj({{"intensity_shift", num(0)},
                       {"scale", {{"type", "array"}, {"items", pos()}, {"minItems", 2}, {"maxItems", 2}}},
                       {"crop_jitter", vec3(integer(0))},
                       {"p_shift", prob()},
                       {"p_scale", prob()},
                       {"p_crop", prob()}})},
      {"inference", obj({{"overlap", {{"type", "number"}, {"minimum", 0}, {"maximum", 0.99}}},
                         {"threshold", {{"type", "number"}, {"exclusiveMinimum", 0}, {"maximum", 0.999999}}},
                         {"largest_component", boolean()}})},
      {"explain", obj({{"cam_target", {{"type", "string"}, {"enum", {"predicted", "ground_truth"}}}}})},
      {"output_dir", str()},
  });
}

/// Every default spelled out; a bare config resolves to the published recipe.
inline json experiment_defaults() {
  return {
      {"data", {{"manifest", ""}, {"split", {{"train", 157}, {"val", 25}, {"test", 25}, {"seed", 0}}},
                {"target_spacing", {0.6, 0.6, 4.0}}, {"normalize", true}}},
      {"model", {{"variant", "multihead_3"}, {"level_filters", {32, 64, 128, 256}}, {"bottleneck_filters", 512},
                 {"head_dilations", {1, 2, 4}}, {"kernel_size", 3}, {"seed", 0}}},
      {"train", {{"iterations", 100000}, {"batch_size", 2}, {"lr", 1e-4}, {"weight_decay", 1e-5}, {"lr_floor", 1e-6},
                 {"loss", "dice"}, {"tversky_alpha", 0.3}, {"tversky_beta", 0.7}, {"smooth", 1e-5}, {"seed", 0},
                 {"epoch_length", 0}, {"val_every", 1}, {"patch", {256, 256, 16}}}},
      {"sampler", {{"intensity_shift", 0.1}, {"scale", {0.9, 1.1}}, {"crop_jitter", {8, 8, 2}}, {"p_shift", 0.5},
                   {"p_scale", 0.5}, {"p_crop", 0.5}}},
      {"inference", {{"overlap", 0.75}, {"threshold", 0.5}, {"largest_component", false}}},
      {"explain", {{"cam_target", "predicted"}}},
      {"output_dir", "runs/experiment"},
  };
}

inline json phantom_schema() {
  using namespace schema_parts;
  return obj({
      {"count", integer(1)},
      {"seed", integer(0)},
      {"id_prefix", str()},
      {"dims", vec3(integer(1))},
      {"spacing", vec3(pos())},
      {"tumor_center", vec3(num(0))},
      {"tumor_radii", vec3(pos())},
      {"center_jitter_mm", vec3(num(0))},
      {"radius_jitter", {{"type", "number"}, {"minimum", 0}, {"maximum", 0.9}}},
      {"t2w_background", num(0)}, {"t2w_tumor", num(0)}, {"t2w_noise", num(0)}, {"t2w_texture", num(0)},
      {"s0_background", pos()}, {"s0_tumor", pos()}, {"s0_texture", {{"type", "number"}, {"minimum", 0}, {"maximum", 0.9}}},
      {"dwi_noise", num(0)},
      {"adc_tumor", pos()}, {"adc_background", pos()}, {"adc_texture", {{"type", "number"}, {"minimum", 0}, {"maximum", 0.9}}},
      {"b_values", {{"type", "array"}, {"items", num(0)}, {"minItems", 2}}},
      {"distortion_mm", num(0)},
  });
}

inline json phantom_defaults() {
  const PhantomConfig d;
  json j = to_json(d);
  j.erase("case_id");
  j["count"] = 20;
  j["seed"] = 0;
  j["id_prefix"] = "phantom_";
  j["center_jitter_mm"] = {1.5, 1.5, 4.0};
  j["radius_jitter"] = 0.15;
  return j;
}

// ---------------------------------------------------------------------------

inline json yaml_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Sequence: {
      json a = json::array();
      for (const auto& e : n) a.push_back(yaml_to_json(e));
      return a;
    }
    case YAML::NodeType::Map: {
      json o = json::object();
      for (const auto& kv : n) o[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return o;
    }
    case YAML::NodeType::Scalar: {
      const std::string s = n.Scalar();
      if (n.Tag() == "!") return s;  // quoted
      if (s == "true" || s == "True") return true;
      if (s == "false" || s == "False") return false;
      if (s == "null" || s == "~") return nullptr;
      try {
        std::size_t used = 0;
        const long long i = std::stoll(s, &used);
        if (used == s.size()) return i;
      } catch (...) {
      }
      try {
        std::size_t used = 0;
        const double d = std::stod(s, &used);
        if (used == s.size()) return d;
      } catch (...) {
      }
      return s;
    }
  }
  return nullptr;
}

/// YAML (a superset of JSON) from disk; MissingInput if absent.
inline json read_document(const std::string& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::MissingInput, "config not found: " + path);
  try {
    json j = yaml_to_json(YAML::LoadFile(path));
    if (j.is_null()) j = json::object();
    return j;
  } catch (const YAML::Exception& e) {
    fail(ErrorCode::ConfigInvalid, "cannot parse " + path + ": " + e.what());
  }
}

/// Validates the user document against `schema`, then overlays it on the defaults.
inline json resolve(const json& user, const json& schema, const json& defaults) {
  validate_schema(user, schema);
  json out = defaults;
  out.merge_patch(user);
  validate_schema(out, schema);
  return out;
}

inline json resolve_experiment(const json& user) { return resolve(user, experiment_schema(), experiment_defaults()); }
inline json resolve_phantom(const json& user) { return resolve(user, phantom_schema(), phantom_defaults()); }

// ---------------------------------------------------------------------------
// Typed views of a resolved experiment document.

inline Dims3 dims_of(const json& a) { return {a[0].get<int>(), a[1].get<int>(), a[2].get<int>()}; }
inline Vec3 vec_of(const json& a) { return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()}; }

inline ModelSpec model_spec(const json& r) {
  json m = r.at("model");
  ModelSpec s = make_spec(variant_from_string(m.at("variant").get<std::string>()));
  m["in_channels"] = s.in_channels;
  return spec_from_json(m);
}

inline TrainConfig train_config(const json& r) {
  const json& t = r.at("train");
  const json& a = r.at("sampler");
  const json& inf = r.at("inference");
  TrainConfig c;
  c.iterations = t.at("iterations").get<std::int64_t>();
  c.batch_size = t.at("batch_size").get<int>();
  c.lr = t.at("lr").get<double>();
  c.weight_decay = t.at("weight_decay").get<double>();
  c.lr_floor = t.at("lr_floor").get<double>();
  c.loss.kind = loss_from_string(t.at("loss").get<std::string>());
  c.loss.tversky_alpha = t.at("tversky_alpha").get<double>();
  c.loss.tversky_beta = t.at("tversky_beta").get<double>();
  c.loss.smooth = t.at("smooth").get<double>();
  c.seed = t.at("seed").get<std::uint64_t>();
  c.epoch_length = t.at("epoch_length").get<std::int64_t>();
  c.val_every = t.at("val_every").get<std::int64_t>();
  c.patch = dims_of(t.at("patch"));
  c.augment.intensity_shift = a.at("intensity_shift").get<double>();
  c.augment.scale_lo = a.at("scale")[0].get<double>();
  c.augment.scale_hi = a.at("scale")[1].get<double>();
  c.augment.crop_jitter = dims_of(a.at("crop_jitter"));
  c.augment.p_shift = a.at("p_shift").get<double>();
  c.augment.p_scale = a.at("p_scale").get<double>();
  c.augment.p_crop = a.at("p_crop").get<double>();
  c.window.patch = c.patch;
  c.window.overlap = inf.at("overlap").get<double>();
  c.threshold = inf.at("threshold").get<double>();
  if (c.augment.scale_lo > c.augment.scale_hi) fail(ErrorCode::ConfigInvalid, "sampler.scale must be [lo, hi]");
  validate(c);
  return c;
}

inline SplitSizes split_sizes(const json& r) {
  const json& s = r.at("data").at("split");
  return {s.at("train").get<std::size_t>(), s.at("val").get<std::size_t>(), s.at("test").get<std::size_t>()};
}

inline LoadOptions load_options(const json& r) {
  LoadOptions o;
  o.target_spacing = vec_of(r.at("data").at("target_spacing"));
  o.normalize = r.at("data").at("normalize").get<bool>();
  return o;
}

/// Phantom cohort: per-case configs with jittered tumor geometry and seeds.
inline std::vector<PhantomConfig> phantom_cohort(const json& r) {
  PhantomConfig base;
  base.dims = dims_of(r.at("dims"));
  base.spacing = vec_of(r.at("spacing"));
  base.tumor_center = vec_of(r.at("tumor_center"));
  base.tumor_radii = vec_of(r.at("tumor_radii"));
  base.t2w_background = r.at("t2w_background");
  base.t2w_tumor = r.at("t2w_tumor");
  base.t2w_noise = r.at("t2w_noise");
  base.t2w_texture = r.at("t2w_texture");
  base.s0_background = r.at("s0_background");
  base.s0_tumor = r.at("s0_tumor");
  base.s0_texture = r.at("s0_texture");
  base.dwi_noise = r.at("dwi_noise");
  base.adc_tumor = r.at("adc_tumor");
  base.adc_background = r.at("adc_background");
  base.adc_texture = r.at("adc_texture");
  base.b_values = r.at("b_values").get<std::vector<double>>();
  base.distortion_mm = r.at("distortion_mm");
  const Vec3 jitter = vec_of(r.at("center_jitter_mm"));
  const double rj = r.at("radius_jitter");
  const int count = r.at("count");
  const std::string prefix = r.at("id_prefix");

  Rng rng(r.at("seed").get<std::uint64_t>());
  std::vector<PhantomConfig> out;
  for (int i = 0; i < count; ++i) {
    PhantomConfig c = base;
    char id[32];
    std::snprintf(id, sizeof id, "%03d", i);
    c.case_id = prefix + id;
    for (int a = 0; a < 3; ++a) {
      c.tumor_radii[a] = base.tumor_radii[a] * rng.uniform(1.0 - rj, 1.0 + rj);
      c.tumor_center[a] = base.tumor_center[a] + rng.uniform(-jitter[a], jitter[a]);
      const double extent = c.dims[a] * c.spacing[a];
      c.tumor_center[a] = std::clamp(c.tumor_center[a], c.tumor_radii[a], extent - c.tumor_radii[a]);
    }
    c.seed = rng.next_u64();
    validate(c);
    out.push_back(c);
  }
  return out;
}

}  // namespace mpseg::config
