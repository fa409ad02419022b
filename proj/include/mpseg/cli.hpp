#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mpseg/adc_fit.hpp"
#include "mpseg/config.hpp"
#include "mpseg/data.hpp"
#include "mpseg/explain.hpp"
#include "mpseg/inference.hpp"
#include "mpseg/metrics.hpp"
#include "mpseg/phantom.hpp"
#include "mpseg/training.hpp"

namespace mpseg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// 0 ok, 1 runtime failure, 2 invalid configuration or usage, 3 missing input.
inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigInvalid:
    case ErrorCode::InvalidVariant:
    case ErrorCode::InvalidAlphaBeta:
    case ErrorCode::InvalidOverlap:
    case ErrorCode::UnknownMode:
      return 2;
    case ErrorCode::MissingInput:
    case ErrorCode::MissingChannel:
      return 3;
    default:
      return 1;
  }
}

inline void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(2) << "\n";
}

inline void write_text(const fs::path& path, const std::string& s) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << s;
  if (!out) fail(ErrorCode::CorruptFile, "cannot write " + path.string());
}

inline void require_file(const std::string& path, const std::string& what) {
  if (path.empty() || !fs::exists(path)) fail(ErrorCode::MissingInput, what + " not found: " + path);
}

/// Loads preprocessed cases (already on the model grid and normalized).
inline std::vector<MultiparametricCase> load_cases(const Manifest& m, const std::vector<std::string>& ids,
                                                   bool require_mask = true) {
  LoadOptions opt;
  opt.target_spacing.reset();
  opt.normalize = false;
  opt.require_mask = require_mask;
  std::vector<MultiparametricCase> out;
  for (const auto& id : ids) out.push_back(load_case(m.find(id), opt));
  return out;
}

/// Split stored beside the manifest, else derived from the configured sizes.
inline DatasetSplit split_for(const std::string& manifest_path, const Manifest& m, const json& resolved) {
  const fs::path stored = fs::path(manifest_path).parent_path() / "split.json";
  if (fs::exists(stored)) {
    std::ifstream in(stored);
    return split_from_json(json::parse(in));
  }
  return split_dataset(m.ids(), config::split_sizes(resolved), resolved["data"]["split"]["seed"].get<std::uint64_t>());
}

inline std::vector<std::string> select_ids(const std::string& which, const Manifest& m, const std::string& manifest_path,
                                           const json& resolved) {
  if (which == "all") return m.ids();
  const DatasetSplit s = split_for(manifest_path, m, resolved);
  if (which == "train") return s.train_ids;
  if (which == "val") return s.val_ids;
  if (which == "test") return s.test_ids;
  fail(ErrorCode::ConfigInvalid, "unknown split '" + which + "'");
}

struct InferenceSettings {
  SlidingWindowOptions window;
  double threshold = 0.5;
  bool largest_component = false;
};

inline InferenceSettings inference_settings(const json& meta) {
  InferenceSettings s;
  if (meta.contains("patch")) s.window.patch = config::dims_of(meta["patch"]);
  s.window.overlap = meta.value("overlap", s.window.overlap);
  s.threshold = meta.value("threshold", s.threshold);
  s.largest_component = meta.value("largest_component", false);
  return s;
}

inline json settings_json(const InferenceSettings& s) {
  return {{"patch", {s.window.patch.x, s.window.patch.y, s.window.patch.z}},
          {"overlap", s.window.overlap},
          {"threshold", s.threshold},
          {"largest_component", s.largest_component}};
}

// ---------------------------------------------------------------------------
// Subcommands.

struct AdcArgs {
  std::vector<std::string> dwi;
  std::vector<double> b;
  std::string method = "least-squares";
  std::string out, valid_out;
};

inline void cmd_adc(const AdcArgs& a) {
  if (a.dwi.size() != a.b.size()) fail(ErrorCode::ConfigInvalid, "--dwi and --b must be given the same number of times");
  const FitMethod method = fit_method_from_string(a.method);
  DWISeries<float> s;
  s.b_values = a.b;
  for (const auto& p : a.dwi) {
    require_file(p, "DWI volume");
    s.signals.push_back(nifti::read<float>(p, ChannelKind::OTHER));
  }
  const ADCMap m = fit_adc(s, method);
  ImageVolume out(m.values.dims(), m.values.spacing(), m.values.origin(), ChannelKind::ADC);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(m.values[i]);
  save_volume(out, a.out);
  if (!a.valid_out.empty()) {
    ImageVolume v(m.valid.dims(), m.valid.spacing(), m.valid.origin(), ChannelKind::MASK);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = m.valid[i];
    save_volume(v, a.valid_out);
  }
  write_json(fs::path(a.out).parent_path() / "adc_resolved_config.json",
             {{"command", "adc"}, {"dwi", a.dwi}, {"b_values", a.b}, {"method", a.method}, {"out", a.out}});
}

inline void cmd_phantom(const std::string& config_path, const std::string& out_dir) {
  const json user = config_path.empty() ? json::object() : config::read_document(config_path);
  const json resolved = config::resolve_phantom(user);
  const auto cohort = config::phantom_cohort(resolved);
  Manifest m;
  json truth = json::array();
  for (const auto& pc : cohort) {
    const PhantomCase ph = generate_case(pc);
    const fs::path dir = fs::path(out_dir) / pc.case_id;
    m.cases.push_back(save_case(ph.image, dir));
    for (std::size_t i = 0; i < ph.series.b_values.size(); ++i) {
      char name[48];
      std::snprintf(name, sizeof name, "dwi_b%04d.nii.gz", static_cast<int>(std::lround(ph.series.b_values[i])));
      save_volume(ph.series.signals[i], (dir / name).string());
    }
    truth.push_back(to_json(pc));
  }
  write_manifest(m, (fs::path(out_dir) / "manifest.json").string());
  write_json(fs::path(out_dir) / "phantom_cases.json", truth);
  write_json(fs::path(out_dir) / "resolved_config.json", {{"command", "phantom"}, {"config", resolved}});
}

inline void cmd_preprocess(const std::string& manifest_path, const std::string& config_path, const std::string& out_dir) {
  const json resolved =
      config::resolve_experiment(config_path.empty() ? json::object() : config::read_document(config_path));
  const Manifest in = read_manifest(manifest_path);
  const LoadOptions opt = config::load_options(resolved);
  const DatasetSplit split =
      split_dataset(in.ids(), config::split_sizes(resolved), resolved["data"]["split"]["seed"].get<std::uint64_t>());
  Manifest out;
  for (const auto& paths : in.cases) {
    const MultiparametricCase c = load_case(paths, opt);
    out.cases.push_back(save_case(c, fs::path(out_dir) / c.case_id));
    save_volume(c.mask, (fs::path(out_dir) / "masks" / (c.case_id + ".nii.gz")).string());
  }
  write_manifest(out, (fs::path(out_dir) / "manifest.json").string());
  write_json(fs::path(out_dir) / "split.json", to_json(split));
  json snap = resolved;
  snap["data"]["manifest"] = manifest_path;
  write_json(fs::path(out_dir) / "resolved_config.json", {{"command", "preprocess"}, {"config", snap}});
}

inline void cmd_train(const std::string& config_path, const std::string& manifest_override, const std::string& out_override,
                      std::ostream& log) {
  json resolved = config::resolve_experiment(config::read_document(config_path));
  if (!manifest_override.empty()) resolved["data"]["manifest"] = manifest_override;
  if (!out_override.empty()) resolved["output_dir"] = out_override;
  // Everything is validated before the first output is written.
  const ModelSpec spec = config::model_spec(resolved);
  const TrainConfig tc = config::train_config(resolved);
  const std::string manifest_path = resolved["data"]["manifest"];
  const Manifest m = read_manifest(manifest_path);
  const DatasetSplit split = split_for(manifest_path, m, resolved);
  const auto train_cases = load_cases(m, split.train_ids);
  const auto val_cases = load_cases(m, split.val_ids);

  const fs::path out = resolved["output_dir"].get<std::string>();
  fs::create_directories(out);
  write_json(out / "resolved_config.json", {{"command", "train"}, {"config", resolved}});
  write_json(out / "split.json", to_json(split));

  InferenceSettings inf{tc.window, tc.threshold, resolved["inference"]["largest_component"].get<bool>()};
  SegmentationModel<float> model(spec);
  std::ofstream jl(out / "train_log.jsonl");
  TrainIO io{&jl, (out / "checkpoints").string(), settings_json(inf)};
  const auto result = train(model, train_cases, val_cases, tc, io);
  log << json{{"best_val_dsc", result.best.best_val_dsc}, {"best_iteration", result.best.iteration},
              {"checkpoint", (out / "checkpoints" / "best.ckpt").string()}}
             .dump()
      << "\n";
}

struct InferArgs {
  std::string checkpoint, manifest, out_dir, split = "all", config;
  std::optional<double> overlap, threshold;
};

inline void cmd_infer(const InferArgs& a) {
  const Checkpoint<float> ck = load_checkpoint<float>(a.checkpoint);
  InferenceSettings s = inference_settings(ck.meta);
  if (a.overlap) s.window.overlap = *a.overlap;
  if (a.threshold) s.threshold = *a.threshold;
  check_overlap(s.window.overlap);
  if (!(s.threshold > 0 && s.threshold < 1)) fail(ErrorCode::ConfigInvalid, "threshold must lie in (0, 1)");
  const json resolved = config::resolve_experiment(a.config.empty() ? json::object() : config::read_document(a.config));
  const Manifest m = read_manifest(a.manifest);
  const auto ids = select_ids(a.split, m, a.manifest, resolved);
  const auto model = model_from_checkpoint(ck);
  for (const auto& c : load_cases(m, ids, false)) {
    const auto prob = sliding_window(model, c, s.window);
    ImageVolume mask = binarize(prob, s.threshold, s.largest_component);
    mask.set_kind(ChannelKind::MASK);
    save_volume(mask, (fs::path(a.out_dir) / (c.case_id + ".nii.gz")).string());
  }
  write_json(fs::path(a.out_dir) / "resolved_config.json",
             {{"command", "infer"}, {"checkpoint", a.checkpoint}, {"manifest", a.manifest}, {"split", a.split},
              {"cases", ids}, {"inference", settings_json(s)}});
}

inline std::vector<std::string> nifti_ids(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorCode::MissingInput, "directory not found: " + dir.string());
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.size() > 7 && name.ends_with(".nii.gz")) ids.push_back(name.substr(0, name.size() - 7));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline void cmd_evaluate(const std::string& pred_dir, const std::string& gt_dir, const std::string& out, std::uint64_t seed) {
  const auto ids = nifti_ids(pred_dir);
  if (ids.empty()) fail(ErrorCode::MissingInput, "no predictions in " + pred_dir);
  std::vector<EvaluationReport> reports;
  for (const auto& id : ids) {
    const std::string gp = (fs::path(gt_dir) / (id + ".nii.gz")).string();
    require_file(gp, "ground truth for '" + id + "'");
    ImageVolume pred = load_volume((fs::path(pred_dir) / (id + ".nii.gz")).string(), ChannelKind::MASK);
    ImageVolume gt = load_volume(gp, ChannelKind::MASK);
    if (!(pred.dims() == gt.dims())) fail(ErrorCode::GridMismatch, "prediction and ground truth grids differ for " + id);
    reports.push_back(evaluate_case(id, pred, gt));
  }
  std::ostringstream csv;
  write_report_csv(csv, reports, seed);
  write_text(out, csv.str());
  write_json(fs::path(out).parent_path() / "evaluate_resolved_config.json",
             {{"command", "evaluate"}, {"pred_dir", pred_dir}, {"gt_dir", gt_dir}, {"out", out}, {"seed", seed}});
}

inline void cmd_sensitivity(const std::string& checkpoint, const std::string& manifest, const std::string& split,
                            const std::string& out, std::uint64_t seed) {
  const Checkpoint<float> ck = load_checkpoint<float>(checkpoint);
  const InferenceSettings s = inference_settings(ck.meta);
  const Manifest m = read_manifest(manifest);
  const auto ids = select_ids(split, m, manifest, config::resolve_experiment(json::object()));
  const auto cases = load_cases(m, ids);
  const auto model = model_from_checkpoint(ck);
  const std::vector<std::pair<std::string, std::optional<ChannelKind>>> runs{
      {"none", std::nullopt}, {"T2W", ChannelKind::T2W}, {"B1000", ChannelKind::B1000}, {"ADC", ChannelKind::ADC}};
  std::ostringstream csv;
  csv << "dropout,";
  write_report_header(csv);
  json summary = json::object();
  for (const auto& [name, ch] : runs) {
    const auto reports = channel_dropout_eval(model, cases, ch, s.window, s.threshold);
    std::vector<double> d;
    for (const auto& r : reports) {
      csv << name << ',';
      write_report_row(csv, r, r.case_id);
      d.push_back(r.dsc);
    }
    const auto ms = bootstrap_median(d, 2000, seed);
    summary[name] = {{"median_dsc", ms.median}, {"ci95_low", ms.ci_low}, {"ci95_high", ms.ci_high}};
  }
  write_text(out, csv.str());
  write_json(fs::path(out).parent_path() / "sensitivity_summary.json", summary);
  write_json(fs::path(out).parent_path() / "sensitivity_resolved_config.json",
             {{"command", "sensitivity"}, {"checkpoint", checkpoint}, {"manifest", manifest}, {"split", split}, {"cases", ids}});
}

struct GradcamArgs {
  std::string checkpoint, manifest, case_id, dropout = "none", target = "predicted", out;
};

inline void cmd_gradcam(const GradcamArgs& a) {
  std::optional<ChannelKind> drop;
  if (a.dropout != "none") {
    drop = channel_from_string(a.dropout);
    check_dropout_channel(*drop);
  }
  if (a.target != "predicted" && a.target != "ground_truth") fail(ErrorCode::ConfigInvalid, "unknown cam target " + a.target);
  const Checkpoint<float> ck = load_checkpoint<float>(a.checkpoint);
  const InferenceSettings s = inference_settings(ck.meta);
  const Manifest m = read_manifest(a.manifest);
  const auto c = load_cases(m, {a.case_id}, a.target == "ground_truth").front();
  const auto model = model_from_checkpoint(ck);
  const auto crop = center_crop(c, input_channels(model.spec().variant), s.window.patch, drop);
  const bool gt = a.target == "ground_truth";
  SaliencyMap cam = gradcam3d(model, crop.image, c.t2w.spacing(),
                              gt ? CamTarget::ground_truth : CamTarget::predicted_foreground, gt ? &crop.mask : nullptr);
  cam.values.set_origin(crop.mask.origin());
  save_volume(cam.values, a.out);
  std::string sidecar = a.out;
  if (sidecar.ends_with(".nii.gz")) sidecar.resize(sidecar.size() - 7);
  write_json(sidecar + ".json", {{"command", "gradcam"}, {"checkpoint", a.checkpoint}, {"case", a.case_id},
                                 {"channel_dropout", a.dropout}, {"layer", cam.layer}, {"target", cam.target},
                                 {"degenerate", cam.degenerate}, {"flag", cam.flag},
                                 {"corner", {crop.corner.x, crop.corner.y, crop.corner.z}}});
}

// ---------------------------------------------------------------------------

inline void print_error(std::ostream& err, const std::string& code, const std::string& message, int exit_code) {
  err << json{{"error", code}, {"message", message}, {"exit_code", exit_code}}.dump() << "\n";
}

/// Entry point shared by the executable and in-process tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multiparametric MRI tumor segmentation toolkit", "mpseg"};
  app.require_subcommand(1);

  AdcArgs adc;
  auto* s_adc = app.add_subcommand("adc", "Fit an ADC map from DWI volumes");
  s_adc->add_option("--dwi", adc.dwi, "DWI volume, one per b-value")->required();
  s_adc->add_option("--b", adc.b, "b-value (s/mm^2), same order as --dwi")->required();
  s_adc->add_option("--method", adc.method, "two-point | least-squares");
  s_adc->add_option("--out", adc.out, "output ADC NIfTI")->required();
  s_adc->add_option("--valid-out", adc.valid_out, "optional fit-validity mask");

  std::string ph_config, ph_out;
  auto* s_ph = app.add_subcommand("phantom", "Generate a synthetic cohort");
  s_ph->add_option("--config", ph_config, "phantom YAML/JSON");
  s_ph->add_option("--out-dir", ph_out)->required();

  std::string pp_manifest, pp_config, pp_out;
  auto* s_pp = app.add_subcommand("preprocess", "Resample, normalize and split a raw cohort");
  s_pp->add_option("--manifest", pp_manifest)->required();
  s_pp->add_option("--config", pp_config, "experiment config (data section)");
  s_pp->add_option("--out-dir", pp_out)->required();

  std::string tr_config, tr_manifest, tr_out;
  auto* s_tr = app.add_subcommand("train", "Train a segmentation model");
  s_tr->add_option("--config", tr_config)->required();
  s_tr->add_option("--manifest", tr_manifest, "override data.manifest");
  s_tr->add_option("--output-dir", tr_out, "override output_dir");

  InferArgs inf;
  double inf_overlap = -1, inf_threshold = -1;
  auto* s_inf = app.add_subcommand("infer", "Sliding-window prediction");
  s_inf->add_option("--checkpoint", inf.checkpoint)->required();
  s_inf->add_option("--manifest", inf.manifest)->required();
  s_inf->add_option("--out-dir", inf.out_dir)->required();
  s_inf->add_option("--split", inf.split, "all | train | val | test");
  s_inf->add_option("--config", inf.config, "experiment config used for the split");
  s_inf->add_option("--overlap", inf_overlap);
  s_inf->add_option("--threshold", inf_threshold);

  std::string ev_pred, ev_gt, ev_out;
  std::uint64_t ev_seed = 0;
  auto* s_ev = app.add_subcommand("evaluate", "Compare predicted and reference masks");
  s_ev->add_option("--pred-dir", ev_pred)->required();
  s_ev->add_option("--gt-dir", ev_gt)->required();
  s_ev->add_option("--out", ev_out)->required();
  s_ev->add_option("--seed", ev_seed, "bootstrap seed");

  std::string se_ck, se_manifest, se_split = "test", se_out;
  std::uint64_t se_seed = 0;
  auto* s_se = app.add_subcommand("sensitivity", "Channel-dropout evaluation");
  s_se->add_option("--checkpoint", se_ck)->required();
  s_se->add_option("--manifest", se_manifest)->required();
  s_se->add_option("--cases", se_split, "all | train | val | test");
  s_se->add_option("--out", se_out)->required();
  s_se->add_option("--seed", se_seed);

  GradcamArgs gc;
  auto* s_gc = app.add_subcommand("gradcam", "3D Grad-CAM on a center-cropped patch");
  s_gc->add_option("--checkpoint", gc.checkpoint)->required();
  s_gc->add_option("--manifest", gc.manifest)->required();
  s_gc->add_option("--case", gc.case_id)->required();
  s_gc->add_option("--channel-dropout", gc.dropout, "none | T2W | B1000 | ADC");
  s_gc->add_option("--target", gc.target, "predicted | ground_truth");
  s_gc->add_option("--out", gc.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error(err, "UsageError", e.what(), 2);
    return 2;
  }

  try {
    if (*s_adc) cmd_adc(adc);
    if (*s_ph) cmd_phantom(ph_config, ph_out);
    if (*s_pp) cmd_preprocess(pp_manifest, pp_config, pp_out);
    if (*s_tr) cmd_train(tr_config, tr_manifest, tr_out, out);
    if (*s_inf) {
      if (inf_overlap >= 0) inf.overlap = inf_overlap;
      if (inf_threshold >= 0) inf.threshold = inf_threshold;
      cmd_infer(inf);
    }
    if (*s_ev) cmd_evaluate(ev_pred, ev_gt, ev_out, ev_seed);
    if (*s_se) cmd_sensitivity(se_ck, se_manifest, se_split, se_out, se_seed);
    if (*s_gc) cmd_gradcam(gc);
  } catch (const Error& e) {
    const int code = exit_code_for(e.code());
    print_error(err, std::string(to_string(e.code())), e.what(), code);
    return code;
  } catch (const std::exception& e) {
    print_error(err, "RuntimeError", e.what(), 1);
    return 1;
  }
  return 0;
}

}  // namespace mpseg::cli
