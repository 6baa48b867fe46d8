#pragma once

#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "irpatch/attack.hpp"
#include "irpatch/config.hpp"
#include "irpatch/detector.hpp"
#include "irpatch/evaluation.hpp"
#include "irpatch/io.hpp"
#include "irpatch/pattern.hpp"
#include "irpatch/scene.hpp"

// End-to-end steps shared by the command-line tool and the acceptance suite.
// Each step writes its artifacts under an output directory.
namespace irpatch::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

/// Manifest key holding wall-clock data; nothing else in any artifact varies
/// between identical runs.
inline constexpr const char* kTimestampKey = "timestamp";

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline void write_json(const fs::path& path, const json& j) { io::open_out(path, false) << j.dump(2) << '\n'; }

// ---- dataset -----------------------------------------------------------------

inline scene::Dataset gen_data(const config::RunConfig& cfg, const fs::path& dir) {
  if (cfg.dataset.count < 1) throw std::invalid_argument("gen-data: count must be at least 1");
  scene::Dataset ds = scene::generate_dataset(cfg.dataset.count, cfg.dataset_seed(), cfg.dataset.scene);
  scene::write_dataset(ds, dir);
  return ds;
}

// ---- detector ----------------------------------------------------------------

struct TrainOutcome {
  detector::DetectorWeights weights;
  std::vector<detector::TrainLogRow> log;
  double train_ap = 0;
  double test_ap = 0;
};

inline void write_train_log(const fs::path& path, const std::vector<detector::TrainLogRow>& log) {
  auto os = io::open_out(path, false);
  os << "epoch,loss,test_ap\n";
  for (const auto& r : log) {
    os << r.epoch << ',' << io::fmt6(r.loss) << ',' << (r.test_ap < 0 ? std::string() : io::fmt6(r.test_ap)) << '\n';
  }
}

/// Trains and writes `weights_path` plus `<weights_path>.log.csv`.
inline TrainOutcome train_detector(const scene::Dataset& ds, const std::string& variant,
                                   const detector::TrainConfig& tc, const fs::path& weights_path,
                                   const detector::TrainLogger& logger = {}) {
  std::vector<detector::TrainLogRow> log;
  detector::DetectorWeights w = detector::train(ds, detector::variant(variant), tc, &log, logger);
  TrainOutcome out{std::move(w), std::move(log), 0, 0};
  detector::write_weights(weights_path, out.weights);
  write_train_log(fs::path(weights_path.string() + ".log.csv"), out.log);
  if (!ds.train.empty()) out.train_ap = detector::average_precision(out.weights, ds.select(ds.train), tc.ap_score_threshold);
  if (!ds.test.empty()) out.test_ap = detector::average_precision(out.weights, ds.select(ds.test), tc.ap_score_threshold);
  return out;
}

// ---- attack ------------------------------------------------------------------

struct NamedModel {
  std::string name;
  detector::DetectorWeights weights;
};

inline NamedModel load_model(const fs::path& path) { return {path.stem().string(), detector::read_weights(path)}; }

inline void write_trace(const fs::path& path, const std::vector<attack::TraceRow>& trace) {
  auto os = io::open_out(path, false);
  os << "iteration,loss,l_obj,l_black\n";
  for (const auto& r : trace) {
    os << r.iteration << ',' << io::fmt6(r.loss) << ',' << io::fmt6(r.l_obj) << ',' << io::fmt6(r.l_black) << '\n';
  }
}

/// Optimizes against every model jointly and writes patch.png, latent.txt,
/// trace.csv and manifest.json into `dir`.
inline attack::AttackResult run_attack(const std::vector<NamedModel>& models, const scene::Dataset& ds,
                                       const config::RunConfig& cfg, const fs::path& dir,
                                       const attack::IterationHook& hook = {}) {
  if (models.empty()) throw std::invalid_argument("attack: at least one model is required");
  const attack::AttackConfig ac = cfg.resolved_attack();
  std::vector<const detector::DetectorWeights*> dets;
  json names = json::array();
  for (const auto& m : models) {
    dets.push_back(&m.weights);
    names.push_back(m.name);
  }
  attack::AttackResult r = attack::optimize_patch(dets, ds.select(ds.train), ac, hook);
  pattern::write_patch_png(dir / "patch.png", r.patch);
  pattern::write_latent(dir / "latent.txt", r.latent, ac.tau);
  write_trace(dir / "trace.csv", r.trace);
  write_json(dir / "manifest.json", {{"format", "irpatch-attack/1"},
                                     {"models", names},
                                     {"loss", models.size() > 1 ? "ensemble" : "single"},
                                     {"black_ratio", eval::round6(r.black_ratio)},
                                     {"skipped_boxes", r.skipped_boxes},
                                     {"config", config::to_json(cfg)},
                                     {kTimestampKey, utc_now()}});
  return r;
}

// ---- evaluation --------------------------------------------------------------

struct EvalModelSpec {
  NamedModel model;
  bool held_out = false;
};

inline std::vector<eval::Condition> with_baselines(std::vector<eval::Condition> conds, std::size_t n,
                                                   std::uint64_t eval_seed) {
  Rng rng = make_stream(eval_seed, "random-baseline");
  conds.push_back({"random", attack::make_baseline_patch(attack::BaselineKind::random, n, rng), {}});
  conds.push_back({"blank", attack::make_baseline_patch(attack::BaselineKind::blank, n, rng), {}});
  return conds;
}

inline std::string safe_name(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return s;
}

/// Writes report.json and one PR-curve CSV per detector and condition.
inline eval::EvalReport run_eval(const std::vector<EvalModelSpec>& models, const scene::Dataset& ds,
                                 const std::vector<eval::Condition>& conditions, const eval::EvalConfig& ec,
                                 const fs::path& dir) {
  std::vector<eval::EvalModel> em;
  for (const auto& m : models) em.push_back({m.model.name, &m.model.weights, m.held_out});
  eval::EvalReport rep = eval::evaluate_conditions(em, ds.select(ds.test), conditions, ec);
  eval::write_report(dir / "report.json", rep);
  for (const auto& d : rep.detectors) {
    eval::write_pr_csv(dir / ("pr_" + safe_name(d.name) + "_clean.csv"), d.clean);
    for (const auto& c : d.conditions) {
      eval::write_pr_csv(dir / ("pr_" + safe_name(d.name) + "_" + safe_name(c.name) + ".csv"), c.curve);
    }
  }
  return rep;
}

/// AP_drop(optimized) > AP_drop(random) > AP_drop(blank) > 0 for every
/// detector that has all three conditions. Returns the violations.
inline std::vector<std::string> ordering_violations(const eval::EvalReport& rep) {
  std::vector<std::string> out;
  for (const auto& d : rep.detectors) {
    const eval::ConditionResult *o = nullptr, *r = nullptr, *b = nullptr;
    for (const auto& c : d.conditions) {
      if (c.name == "optimized") o = &c;
      if (c.name == "random") r = &c;
      if (c.name == "blank") b = &c;
    }
    if (!o || !r || !b) continue;
    auto check = [&](bool ok, const std::string& what) {
      if (!ok) out.push_back(d.name + ": " + what);
    };
    check(o->ap_decrease > r->ap_decrease, "optimized drop " + io::fmt6(o->ap_decrease) + " <= random " +
                                               io::fmt6(r->ap_decrease));
    check(r->ap_decrease > b->ap_decrease,
          "random drop " + io::fmt6(r->ap_decrease) + " <= blank " + io::fmt6(b->ap_decrease));
    check(b->ap_decrease > 0, "blank drop " + io::fmt6(b->ap_decrease) + " <= 0");
  }
  return out;
}

// ---- sweeps ------------------------------------------------------------------

struct SweepPoint {
  double value = 0;
  double ap_decrease = 0;
  double black_ratio = 0;
  double asr = 0;
};

inline bool is_sweep_param(const std::string& p) { return p == "lambda" || p == "resolution" || p == "proportion"; }

/// One attack and evaluation per value, all with the same seeds. Only the
/// first model is evaluated; attacks use every model. Each value's artifacts
/// go to dir/<param>-<value>/ and the table to dir/sweep_<param>.csv.
inline std::vector<SweepPoint> run_param_sweep(const std::string& param, const std::vector<double>& values,
                                               const std::vector<NamedModel>& models, const scene::Dataset& ds,
                                               const config::RunConfig& cfg, const fs::path& dir) {
  if (param != "lambda" && param != "resolution") throw std::invalid_argument("sweep: unknown param '" + param + "'");
  if (values.size() < 2) throw std::invalid_argument("sweep: need at least two values");
  std::vector<SweepPoint> rows;
  for (double v : values) {
    config::RunConfig c = cfg;
    if (param == "lambda") {
      c.attack.lambda = v;
    } else {
      if (v < 1 || v != std::floor(v)) throw std::invalid_argument("sweep: resolution must be a positive integer");
      c.attack.n = static_cast<std::size_t>(v);
    }
    const fs::path sub = dir / (param + "-" + io::fmt6(v));
    const attack::AttackResult r = run_attack(models, ds, c, sub);
    const eval::EvalReport rep =
        run_eval({{models.front(), false}}, ds, {{"optimized", r.patch, {}}}, c.resolved_eval(), sub);
    const auto& cr = rep.detectors.front().conditions.front();
    rows.push_back({v, cr.ap_decrease, r.black_ratio, cr.asr});
  }
  auto os = io::open_out(dir / ("sweep_" + param + ".csv"), false);
  os << param << ",ap_decrease,black_ratio,asr\n";
  for (const auto& r : rows) {
    os << io::fmt6(r.value) << ',' << io::fmt6(r.ap_decrease) << ',' << io::fmt6(r.black_ratio) << ','
       << io::fmt6(r.asr) << '\n';
  }
  return rows;
}

/// ASR of a fixed patch pinned to each proportion, written to
/// dir/sweep_proportion.csv.
inline std::vector<eval::SweepRow> run_proportion_sweep(const NamedModel& model, const scene::Dataset& ds,
                                                        const pattern::Patch& patch,
                                                        const std::vector<double>& proportions,
                                                        const eval::EvalConfig& ec, const fs::path& dir) {
  if (proportions.empty()) throw std::invalid_argument("sweep: no proportions");
  auto rows = eval::scale_sweep(model.weights, ds.select(ds.test), patch, proportions, ec);
  eval::write_sweep_csv(dir / "sweep_proportion.csv", rows);
  return rows;
}

}  // namespace irpatch::pipeline
