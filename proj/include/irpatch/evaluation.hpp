#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "irpatch/attack.hpp"
#include "irpatch/detector.hpp"
#include "irpatch/io.hpp"
#include "irpatch/metrics.hpp"
#include "irpatch/pattern.hpp"

// Applying hard patches to held-out scenes and scoring the detectors.
namespace irpatch::eval {

inline constexpr const char* kReportSchema = "irpatch-eval/1";

enum class GtMode { dataset, clean_model_output };

inline const char* gt_mode_name(GtMode m) { return m == GtMode::dataset ? "dataset" : "clean-model-output"; }

inline GtMode parse_gt_mode(const std::string& s) {
  if (s == "dataset") return GtMode::dataset;
  if (s == "clean-model-output") return GtMode::clean_model_output;
  throw std::invalid_argument("unknown gt mode '" + s + "' (dataset, clean-model-output)");
}

struct EvalConfig {
  std::uint64_t seed = 2024;
  double ap_score_threshold = 0.05;
  double ap_iou = 0.5;
  double nms_iou = 0.5;
  double asr_score_threshold = 0.7;
  double asr_iou = 0.5;
  GtMode gt_mode = GtMode::dataset;
  double gt_score_threshold = 0.5;  // clean-model-output pseudo labels
  std::size_t tile_reps = 5;
  warp::Interval proportion{0.1, 0.3};
  attack::TransformConfig transform;
};

/// A patch to evaluate. No patch means nothing is pasted.
struct Condition {
  std::string name;
  std::optional<pattern::Patch> patch;
  std::optional<double> fixed_proportion;
};

struct ConditionResult {
  std::string name;
  PrCurve curve;
  double ap_decrease = 0;
  double asr = 0;
  std::size_t frames = 0;
  std::size_t skipped_boxes = 0;
};

struct DetectorReport {
  std::string name;
  bool held_out = false;
  PrCurve clean;
  double clean_asr = 0;
  std::size_t frames = 0;
  std::vector<ConditionResult> conditions;
};

struct EvalReport {
  EvalConfig config;
  std::size_t scenes = 0;
  std::vector<DetectorReport> detectors;

  const DetectorReport& detector(const std::string& name) const {
    for (const auto& d : detectors) {
      if (d.name == name) return d;
    }
    throw std::out_of_range("report: no detector '" + name + "'");
  }
};

struct EvalModel {
  std::string name;
  const detector::DetectorWeights* weights = nullptr;
  bool held_out = false;
};

/// Scene `index` with `cond` applied. The transform draws depend only on the
/// seed and the scene index, so every condition sees the same samples.
inline Tensor patched_image(const scene::Scene& s, std::size_t index, const Condition& cond, const EvalConfig& cfg,
                            std::size_t* skipped = nullptr) {
  if (!cond.patch) return s.image;
  diff::Tape tape;
  const diff::Var tiled = pattern::tile(tape.constant(cond.patch->grid()), cfg.tile_reps);
  attack::ChainStreams rs = attack::ChainStreams::make(cfg.seed, index);
  const attack::PatchedImage out = attack::patch_scene(s, tiled, cfg.transform, cfg.proportion, rs, cond.fixed_proportion);
  if (skipped) *skipped += out.skipped;
  return out.image.value();
}

namespace detail {

struct Scored {
  std::vector<std::vector<Detection>> dets;  // at the AP threshold
  std::vector<bool> detected;                // one flag per person instance
  std::size_t skipped = 0;
};

inline Scored score_condition(const detector::DetectorWeights& w, const std::vector<const scene::Scene*>& scenes,
                              const std::vector<std::vector<Box>>& gts, const Condition& cond, const EvalConfig& cfg) {
  Scored out;
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    const Tensor img = patched_image(*scenes[k], k, cond, cfg, &out.skipped);
    std::vector<Detection> dets =
        detector::decode(detector::predict(w, img), cfg.ap_score_threshold, cfg.nms_iou);
    for (const Box& g : gts[k]) out.detected.push_back(person_detected(dets, g, cfg.asr_score_threshold, cfg.asr_iou));
    out.dets.push_back(std::move(dets));
  }
  return out;
}

}  // namespace detail

/// Ground truth per scene for one detector under the configured mode.
inline std::vector<std::vector<Box>> ground_truth(const detector::DetectorWeights& w,
                                                  const std::vector<const scene::Scene*>& scenes, const EvalConfig& cfg) {
  std::vector<std::vector<Box>> gts;
  for (const scene::Scene* s : scenes) {
    if (cfg.gt_mode == GtMode::dataset) {
      gts.push_back(s->boxes);
      continue;
    }
    std::vector<Box> boxes;
    for (const Detection& d : detector::decode(detector::predict(w, s->image), cfg.gt_score_threshold, cfg.nms_iou)) {
      boxes.push_back(d.box);
    }
    gts.push_back(std::move(boxes));
  }
  return gts;
}

inline EvalReport evaluate_conditions(const std::vector<EvalModel>& models,
                                      const std::vector<const scene::Scene*>& scenes,
                                      const std::vector<Condition>& conditions, const EvalConfig& cfg) {
  if (models.empty()) throw std::invalid_argument("evaluate: no detectors");
  if (scenes.empty()) throw std::invalid_argument("evaluate: no scenes");
  EvalReport report{cfg, scenes.size(), {}};
  for (const EvalModel& m : models) {
    const auto gts = ground_truth(*m.weights, scenes, cfg);
    DetectorReport dr{m.name, m.held_out, {}, 0, 0, {}};
    const detail::Scored clean = detail::score_condition(*m.weights, scenes, gts, Condition{"clean", {}, {}}, cfg);
    dr.clean = pr_curve(clean.dets, gts, cfg.ap_iou);
    dr.frames = clean.detected.size();
    dr.clean_asr = asr(clean.detected);
    for (const Condition& c : conditions) {
      const detail::Scored sc = detail::score_condition(*m.weights, scenes, gts, c, cfg);
      ConditionResult cr{c.name, pr_curve(sc.dets, gts, cfg.ap_iou), 0, asr(sc.detected), sc.detected.size(),
                         sc.skipped};
      cr.ap_decrease = ap_decrease(dr.clean, cr.curve);
      dr.conditions.push_back(std::move(cr));
    }
    report.detectors.push_back(std::move(dr));
  }
  return report;
}

struct SweepRow {
  double proportion = 0;
  double asr = 0;
  std::size_t frames = 0;
};

/// ASR with the patch pinned to each proportion of the box height.
inline std::vector<SweepRow> scale_sweep(const detector::DetectorWeights& w,
                                         const std::vector<const scene::Scene*>& scenes, const pattern::Patch& patch,
                                         const std::vector<double>& proportions, const EvalConfig& cfg) {
  if (scenes.empty()) throw std::invalid_argument("scale sweep: no scenes");
  const auto gts = ground_truth(w, scenes, cfg);
  std::vector<SweepRow> rows;
  for (double p : proportions) {
    if (p < 0 || p > 1) throw std::invalid_argument("scale sweep: proportion must lie in [0, 1]");
    const detail::Scored sc = detail::score_condition(w, scenes, gts, Condition{"sweep", patch, p}, cfg);
    rows.push_back({p, asr(sc.detected), sc.detected.size()});
  }
  return rows;
}

// ---- serialization ---------------------------------------------------------

/// Value rounded to the 6 significant digits used in every metric file.
inline double round6(double v) { return std::isfinite(v) ? std::stod(io::fmt6(v)) : v; }

inline nlohmann::json to_json(const attack::TransformConfig& t) {
  return {{"tps_k", t.tps_k},
          {"tps_sigma", round6(t.tps_sigma)},
          {"rot_max_deg", round6(t.rot_max_deg)},
          {"scale_range", {round6(t.scale_range.lo), round6(t.scale_range.hi)}},
          {"contrast_range", {round6(t.contrast_range.lo), round6(t.contrast_range.hi)}},
          {"brightness_range", {round6(t.brightness_range.lo), round6(t.brightness_range.hi)}},
          {"noise_std_max", round6(t.noise_std_max)},
          {"crop_range", {t.crop_range.lo, t.crop_range.hi}}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  const EvalConfig& c = r.config;
  nlohmann::json j;
  j["schema"] = kReportSchema;
  j["config"] = {{"seed", c.seed},
                 {"gt_mode", gt_mode_name(c.gt_mode)},
                 {"ap_score_threshold", round6(c.ap_score_threshold)},
                 {"ap_iou", round6(c.ap_iou)},
                 {"nms_iou", round6(c.nms_iou)},
                 {"asr_score_threshold", round6(c.asr_score_threshold)},
                 {"asr_iou", round6(c.asr_iou)},
                 {"gt_score_threshold", round6(c.gt_score_threshold)},
                 {"tile_reps", c.tile_reps},
                 {"proportion", {round6(c.proportion.lo), round6(c.proportion.hi)}},
                 {"transform", to_json(c.transform)}};
  j["scenes"] = r.scenes;
  j["detectors"] = nlohmann::json::array();
  for (const DetectorReport& d : r.detectors) {
    nlohmann::json dj{{"name", d.name},
                      {"held_out", d.held_out},
                      {"clean_ap", round6(d.clean.ap)},
                      {"clean_asr", round6(d.clean_asr)},
                      {"frames", d.frames},
                      {"num_gt", d.clean.num_gt},
                      {"conditions", nlohmann::json::array()}};
    for (const ConditionResult& cr : d.conditions) {
      dj["conditions"].push_back({{"name", cr.name},
                                  {"ap", round6(cr.curve.ap)},
                                  {"ap_decrease", round6(cr.ap_decrease)},
                                  {"ap_improved", cr.ap_decrease < 0},
                                  {"asr", round6(cr.asr)},
                                  {"frames", cr.frames},
                                  {"skipped_boxes", cr.skipped_boxes}});
    }
    j["detectors"].push_back(std::move(dj));
  }
  return j;
}

inline void write_report(const std::filesystem::path& path, const EvalReport& r) {
  auto os = io::open_out(path);
  os << to_json(r).dump(2) << "\n";
}

inline void write_pr_csv(const std::filesystem::path& path, const PrCurve& curve) {
  auto os = io::open_out(path);
  os << "threshold,precision,recall\n";
  for (const PrPoint& p : curve.points) {
    os << io::fmt6(p.threshold) << ',' << io::fmt6(p.precision) << ',' << io::fmt6(p.recall) << "\n";
  }
}

inline void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  auto os = io::open_out(path);
  os << "proportion,asr,frames\n";
  for (const SweepRow& r : rows) os << io::fmt6(r.proportion) << ',' << io::fmt6(r.asr) << ',' << r.frames << "\n";
}

}  // namespace irpatch::eval
