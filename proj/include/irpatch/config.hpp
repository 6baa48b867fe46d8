#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "irpatch/attack.hpp"
#include "irpatch/detector.hpp"
#include "irpatch/evaluation.hpp"
#include "irpatch/scene.hpp"

// Run configuration: a JSON document with dataset / detector / attack /
// transform / eval / sweep blocks. Every field has a default and unknown keys
// are rejected.
namespace irpatch::config {

using nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DatasetBlock {
  std::size_t count = 2000;
  std::optional<std::uint64_t> seed;
  scene::SceneConfig scene;
};

struct DetectorBlock {
  std::string variant = "base";
  std::optional<std::uint64_t> seed;
  detector::TrainConfig train;
};

struct SweepBlock {
  std::string param = "lambda";
  std::vector<double> values{0, 0.01, 0.05, 0.1, 0.5, 1};
  std::vector<double> proportions{0.3, 0.25, 0.2, 0.15, 0.1, 0.05, 0};
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "runs/default";
  DatasetBlock dataset;
  DetectorBlock detector;
  attack::AttackConfig attack;
  std::optional<std::uint64_t> attack_seed;
  eval::EvalConfig eval;
  std::optional<std::uint64_t> eval_seed;
  bool baselines = true;
  SweepBlock sweep;

  std::uint64_t dataset_seed() const { return dataset.seed.value_or(derive(seed, "dataset")); }
  std::uint64_t detector_seed() const { return detector.seed.value_or(derive(seed, "detector")); }

  /// Attack and eval configs with their seeds resolved and the shared
  /// transform/proportion settings copied into the eval block.
  attack::AttackConfig resolved_attack() const {
    attack::AttackConfig a = attack;
    a.seed = attack_seed.value_or(derive(seed, "attack"));
    return a;
  }
  eval::EvalConfig resolved_eval() const {
    eval::EvalConfig e = eval;
    e.seed = eval_seed.value_or(derive(seed, "eval"));
    e.transform = attack.transform;
    e.proportion = attack.proportion;
    e.tile_reps = attack.tile_reps;
    return e;
  }

  static std::uint64_t derive(std::uint64_t master, const char* name) { return make_stream(master, name)() >> 11; }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, _] : j.items()) {
    if (!ok.contains(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <class T>
void read(const json& j, const char* key, std::optional<T>& out, const std::string& where) {
  if (!j.contains(key)) return;
  T v{};
  read(j, key, v, where);
  out = v;
}

inline void read_interval(const json& j, const char* key, warp::Interval& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
    throw ConfigError(where + "." + key + ": expected [lo, hi]");
  }
  out = {v[0].get<double>(), v[1].get<double>()};
  if (out.lo > out.hi) throw ConfigError(where + "." + key + ": lo exceeds hi");
}

inline void read_size_range(const json& j, const char* key, warp::SizeRange& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number_unsigned() || !v[1].is_number_unsigned()) {
    throw ConfigError(where + "." + key + ": expected [lo, hi] of non-negative integers");
  }
  out = {v[0].get<std::size_t>(), v[1].get<std::size_t>()};
  if (out.lo > out.hi || out.lo < 1) throw ConfigError(where + "." + key + ": need 1 <= lo <= hi");
}

}  // namespace detail

inline void merge(const json& j, attack::TransformConfig& t) {
  const std::string w = "transform";
  detail::check_keys(j, {"tps_k", "tps_sigma", "rot_max_deg", "scale_range", "contrast_range",
                         "brightness_range", "noise_std_max", "crop_range"},
                     w);
  detail::read(j, "tps_k", t.tps_k, w);
  detail::read(j, "tps_sigma", t.tps_sigma, w);
  detail::read(j, "rot_max_deg", t.rot_max_deg, w);
  detail::read_interval(j, "scale_range", t.scale_range, w);
  detail::read_interval(j, "contrast_range", t.contrast_range, w);
  detail::read_interval(j, "brightness_range", t.brightness_range, w);
  detail::read(j, "noise_std_max", t.noise_std_max, w);
  detail::read_size_range(j, "crop_range", t.crop_range, w);
}

inline void merge(const json& j, RunConfig& c) {
  detail::check_keys(j, {"seed", "out", "dataset", "detector", "attack", "transform", "eval", "sweep"}, "config");
  detail::read(j, "seed", c.seed, "config");
  detail::read(j, "out", c.out, "config");

  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    const std::string w = "dataset";
    detail::check_keys(d, {"count", "seed", "size", "persons_min", "persons_max", "background_range", "body_range",
                           "height_range", "max_person_iou", "max_attempts"},
                       w);
    detail::read(d, "count", c.dataset.count, w);
    detail::read(d, "seed", c.dataset.seed, w);
    scene::SceneConfig& s = c.dataset.scene;
    detail::read(d, "size", s.size, w);
    detail::read(d, "persons_min", s.persons_min, w);
    detail::read(d, "persons_max", s.persons_max, w);
    warp::Interval bg{s.background_lo, s.background_hi}, body{s.body_lo, s.body_hi}, h{s.height_lo, s.height_hi};
    detail::read_interval(d, "background_range", bg, w);
    detail::read_interval(d, "body_range", body, w);
    detail::read_interval(d, "height_range", h, w);
    s.background_lo = bg.lo, s.background_hi = bg.hi;
    s.body_lo = body.lo, s.body_hi = body.hi;
    s.height_lo = h.lo, s.height_hi = h.hi;
    detail::read(d, "max_person_iou", s.max_person_iou, w);
    detail::read(d, "max_attempts", s.max_attempts, w);
  }
  if (j.contains("detector")) {
    const json& d = j["detector"];
    const std::string w = "detector";
    detail::check_keys(d, {"variant", "seed", "epochs", "batch", "lr", "momentum", "box_weight", "clip_norm",
                           "eval_every", "ap_score_threshold"},
                       w);
    detail::read(d, "variant", c.detector.variant, w);
    detail::read(d, "seed", c.detector.seed, w);
    detector::TrainConfig& t = c.detector.train;
    detail::read(d, "epochs", t.epochs, w);
    detail::read(d, "batch", t.batch, w);
    detail::read(d, "lr", t.lr, w);
    detail::read(d, "momentum", t.momentum, w);
    detail::read(d, "box_weight", t.box_weight, w);
    detail::read(d, "clip_norm", t.clip_norm, w);
    detail::read(d, "eval_every", t.eval_every, w);
    detail::read(d, "ap_score_threshold", t.ap_score_threshold, w);
  }
  if (j.contains("attack")) {
    const json& a = j["attack"];
    const std::string w = "attack";
    detail::check_keys(a, {"n", "tile_reps", "lambda", "tau", "proportion_range", "lr", "momentum", "iterations",
                           "batch", "seed", "select_iou"},
                       w);
    attack::AttackConfig& t = c.attack;
    detail::read(a, "n", t.n, w);
    detail::read(a, "tile_reps", t.tile_reps, w);
    detail::read(a, "lambda", t.lambda, w);
    detail::read(a, "tau", t.tau, w);
    detail::read_interval(a, "proportion_range", t.proportion, w);
    detail::read(a, "lr", t.lr, w);
    detail::read(a, "momentum", t.momentum, w);
    detail::read(a, "iterations", t.iterations, w);
    detail::read(a, "batch", t.batch, w);
    detail::read(a, "seed", c.attack_seed, w);
    detail::read(a, "select_iou", t.select_iou, w);
  }
  if (j.contains("transform")) merge(j["transform"], c.attack.transform);
  if (j.contains("eval")) {
    const json& e = j["eval"];
    const std::string w = "eval";
    detail::check_keys(e, {"seed", "gt_mode", "ap_score_threshold", "ap_iou", "nms_iou", "asr_score_threshold",
                           "asr_iou", "gt_score_threshold", "baselines"},
                       w);
    detail::read(e, "seed", c.eval_seed, w);
    if (e.contains("gt_mode")) {
      std::string m;
      detail::read(e, "gt_mode", m, w);
      try {
        c.eval.gt_mode = eval::parse_gt_mode(m);
      } catch (const std::invalid_argument& ex) {
        throw ConfigError(std::string("eval.gt_mode: ") + ex.what());
      }
    }
    detail::read(e, "ap_score_threshold", c.eval.ap_score_threshold, w);
    detail::read(e, "ap_iou", c.eval.ap_iou, w);
    detail::read(e, "nms_iou", c.eval.nms_iou, w);
    detail::read(e, "asr_score_threshold", c.eval.asr_score_threshold, w);
    detail::read(e, "asr_iou", c.eval.asr_iou, w);
    detail::read(e, "gt_score_threshold", c.eval.gt_score_threshold, w);
    detail::read(e, "baselines", c.baselines, w);
  }
  if (j.contains("sweep")) {
    const json& s = j["sweep"];
    const std::string w = "sweep";
    detail::check_keys(s, {"param", "values", "proportions"}, w);
    detail::read(s, "param", c.sweep.param, w);
    detail::read(s, "values", c.sweep.values, w);
    detail::read(s, "proportions", c.sweep.proportions, w);
  }
}

inline RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig c;
  merge(j, c);
  return c;
}

/// Full configuration echo with resolved seeds.
inline json to_json(const RunConfig& c) {
  const attack::AttackConfig a = c.resolved_attack();
  const eval::EvalConfig e = c.resolved_eval();
  const scene::SceneConfig& s = c.dataset.scene;
  const detector::TrainConfig& t = c.detector.train;
  using eval::round6;
  return {{"seed", c.seed},
          {"out", c.out},
          {"dataset",
           {{"count", c.dataset.count},
            {"seed", c.dataset_seed()},
            {"size", s.size},
            {"persons_min", s.persons_min},
            {"persons_max", s.persons_max},
            {"background_range", {round6(s.background_lo), round6(s.background_hi)}},
            {"body_range", {round6(s.body_lo), round6(s.body_hi)}},
            {"height_range", {round6(s.height_lo), round6(s.height_hi)}},
            {"max_person_iou", round6(s.max_person_iou)},
            {"max_attempts", s.max_attempts}}},
          {"detector",
           {{"variant", c.detector.variant},
            {"seed", c.detector_seed()},
            {"epochs", t.epochs},
            {"batch", t.batch},
            {"lr", round6(t.lr)},
            {"momentum", round6(t.momentum)},
            {"box_weight", round6(t.box_weight)},
            {"clip_norm", round6(t.clip_norm)},
            {"eval_every", t.eval_every},
            {"ap_score_threshold", round6(t.ap_score_threshold)}}},
          {"attack",
           {{"n", a.n},
            {"tile_reps", a.tile_reps},
            {"lambda", round6(a.lambda)},
            {"tau", round6(a.tau)},
            {"proportion_range", {round6(a.proportion.lo), round6(a.proportion.hi)}},
            {"lr", round6(a.lr)},
            {"momentum", round6(a.momentum)},
            {"iterations", a.iterations},
            {"batch", a.batch},
            {"seed", a.seed},
            {"select_iou", round6(a.select_iou)}}},
          {"transform", eval::to_json(a.transform)},
          {"eval",
           {{"seed", e.seed},
            {"gt_mode", eval::gt_mode_name(e.gt_mode)},
            {"ap_score_threshold", round6(e.ap_score_threshold)},
            {"ap_iou", round6(e.ap_iou)},
            {"nms_iou", round6(e.nms_iou)},
            {"asr_score_threshold", round6(e.asr_score_threshold)},
            {"asr_iou", round6(e.asr_iou)},
            {"gt_score_threshold", round6(e.gt_score_threshold)},
            {"baselines", c.baselines}}},
          {"sweep", {{"param", c.sweep.param}, {"values", c.sweep.values}, {"proportions", c.sweep.proportions}}}};
}

}  // namespace irpatch::config
