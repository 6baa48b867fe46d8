// irpatch: generate data, train detectors, optimize patches, evaluate, sweep.
//
// Exit status: 0 success, 1 property violation under --assert-ordering,
// 2 usage or input error.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "irpatch/config.hpp"
#include "irpatch/io.hpp"
#include "irpatch/pipeline.hpp"

namespace fs = std::filesystem;
using namespace irpatch;

namespace {

constexpr int kExitAssertion = 1;
constexpr int kExitInput = 2;

template <class T>
void override_with(const std::optional<T>& flag, T& field) {
  if (flag) field = *flag;
}

config::RunConfig load_config(const std::string& path) {
  return path.empty() ? config::RunConfig{} : config::load(path);
}

// Paths left off the command line fall back to the config's output directory.
void default_path(std::string& flag, const config::RunConfig& cfg, const std::string& leaf) {
  if (flag.empty()) flag = (fs::path(cfg.out) / leaf).string();
}

std::vector<pipeline::NamedModel> load_models(const std::vector<std::string>& paths) {
  std::vector<pipeline::NamedModel> out;
  for (const auto& p : paths) out.push_back(pipeline::load_model(p));
  return out;
}

struct PatchArg {
  std::string name;
  std::string source;  // file path, or "random" / "blank"
};

// "name=path", "path", "random" or "blank".
PatchArg parse_patch_arg(const std::string& arg, bool first_file) {
  if (arg == "random" || arg == "blank") return {arg, arg};
  const auto eq = arg.find('=');
  if (eq != std::string::npos) return {arg.substr(0, eq), arg.substr(eq + 1)};
  return {first_file ? "optimized" : fs::path(arg).stem().string(), arg};
}

void log_epoch(const detector::TrainLogRow& r) {
  std::cerr << "epoch " << r.epoch << " loss " << io::fmt6(r.loss);
  if (r.test_ap >= 0) std::cerr << " test_ap " << io::fmt6(r.test_ap);
  std::cerr << '\n';
}

attack::IterationHook progress_hook(std::size_t total) {
  return [total](std::size_t i, const pattern::PatternLatent&, const attack::TraceRow& r) {
    if (i % 100 == 0 || i + 1 == total) {
      std::cerr << "iter " << i << " L " << io::fmt6(r.loss) << " L_obj " << io::fmt6(r.l_obj) << " L_black "
                << io::fmt6(r.l_black) << '\n';
    }
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Binary adversarial patches against a synthetic thermal person detector"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_out, gen_config;
  std::optional<std::size_t> gen_count, gen_size;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--out", gen_out, "Output directory (default: <config out>/data)");
  gen->add_option("--count", gen_count, "Number of scenes");
  gen->add_option("--seed", gen_seed, "Dataset seed");
  gen->add_option("--size", gen_size, "Image side in pixels");
  gen->add_option("--config", gen_config, "Run configuration JSON");

  // train
  auto* tr = app.add_subcommand("train", "Train a detector");
  std::string tr_data, tr_out, tr_config;
  std::optional<std::string> tr_variant;
  std::optional<std::size_t> tr_epochs;
  std::optional<std::uint64_t> tr_seed;
  std::optional<double> tr_lr;
  tr->add_option("--data", tr_data, "Dataset directory (default: <config out>/data)");
  tr->add_option("--out", tr_out, "Weight file to write (default: <config out>/<variant>.weights)");
  tr->add_option("--variant", tr_variant, "Topology variant (base, wide, deep, slim)");
  tr->add_option("--epochs", tr_epochs, "Training epochs");
  tr->add_option("--seed", tr_seed, "Initialization and shuffling seed");
  tr->add_option("--lr", tr_lr, "Learning rate");
  tr->add_option("--config", tr_config, "Run configuration JSON");

  // attack
  auto* at = app.add_subcommand("attack", "Optimize a patch against one or more detectors");
  std::vector<std::string> at_models;
  std::string at_data, at_out, at_config;
  std::optional<std::size_t> at_iters, at_n;
  std::optional<double> at_lambda, at_lr;
  std::optional<std::uint64_t> at_seed;
  at->add_option("--model", at_models, "Weight file; repeat for an ensemble")->required();
  at->add_option("--data", at_data, "Dataset directory (default: <config out>/data)");
  at->add_option("--out", at_out, "Output directory (default: <config out>/attack)");
  at->add_option("--config", at_config, "Run configuration JSON");
  at->add_option("--iterations", at_iters, "Optimization iterations");
  at->add_option("--lambda", at_lambda, "Black-ratio weight");
  at->add_option("--n", at_n, "Basic patch resolution");
  at->add_option("--lr", at_lr, "Learning rate");
  at->add_option("--seed", at_seed, "Attack seed");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate patches on the test split");
  std::vector<std::string> ev_models, ev_held, ev_patches;
  std::string ev_data, ev_out, ev_config;
  std::optional<std::string> ev_gt;
  std::optional<std::uint64_t> ev_seed;
  bool ev_no_baselines = false, ev_assert = false;
  ev->add_option("--model", ev_models, "Weight file of an attacked detector");
  ev->add_option("--held-out", ev_held, "Weight file of a detector not used by the attack");
  ev->add_option("--data", ev_data, "Dataset directory (default: <config out>/data)");
  ev->add_option("--patch", ev_patches, "Patch PNG as [name=]path, or random / blank")->required();
  ev->add_option("--gt-mode", ev_gt, "dataset or clean-model-output");
  ev->add_option("--out", ev_out, "Output directory (default: <config out>/eval)");
  ev->add_option("--config", ev_config, "Run configuration JSON");
  ev->add_option("--seed", ev_seed, "Evaluation seed");
  ev->add_flag("--no-baselines", ev_no_baselines, "Do not add random and blank conditions");
  ev->add_flag("--assert-ordering", ev_assert, "Exit 1 unless optimized > random > blank > 0 in AP decrease");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Attack and evaluate over a parameter grid");
  std::string sw_data, sw_out, sw_config, sw_patch;
  std::optional<std::string> sw_param;
  std::vector<double> sw_values;
  std::vector<std::string> sw_models;
  std::optional<std::size_t> sw_iters;
  sw->add_option("--param", sw_param, "lambda, resolution or proportion (default: config sweep.param)");
  sw->add_option("--values", sw_values, "Values to sweep, at least two (default: config sweep block)");
  sw->add_option("--model", sw_models, "Weight file; repeat for an ensemble")->required();
  sw->add_option("--data", sw_data, "Dataset directory (default: <config out>/data)");
  sw->add_option("--out", sw_out, "Output directory (default: <config out>/sweep-<param>)");
  sw->add_option("--config", sw_config, "Run configuration JSON");
  sw->add_option("--patch", sw_patch, "Patch PNG for the proportion sweep");
  sw->add_option("--iterations", sw_iters, "Optimization iterations per value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInput;
  }

  try {
    if (*gen) {
      config::RunConfig cfg = load_config(gen_config);
      override_with(gen_count, cfg.dataset.count);
      override_with(gen_size, cfg.dataset.scene.size);
      if (gen_seed) cfg.dataset.seed = gen_seed;
      default_path(gen_out, cfg, "data");
      const scene::Dataset ds = pipeline::gen_data(cfg, gen_out);
      std::cout << "wrote " << ds.scenes.size() << " scenes (" << ds.train.size() << " train, " << ds.test.size()
                << " test) to " << gen_out << '\n';
    } else if (*tr) {
      config::RunConfig cfg = load_config(tr_config);
      override_with(tr_variant, cfg.detector.variant);
      override_with(tr_epochs, cfg.detector.train.epochs);
      override_with(tr_lr, cfg.detector.train.lr);
      if (tr_seed) cfg.detector.seed = tr_seed;
      default_path(tr_data, cfg, "data");
      default_path(tr_out, cfg, cfg.detector.variant + ".weights");
      detector::TrainConfig tc = cfg.detector.train;
      tc.seed = cfg.detector_seed();
      const detector::Topology& topo = detector::variant(cfg.detector.variant);
      const scene::Dataset ds = scene::read_dataset(tr_data);
      if (ds.config.size % topo.total_stride() != 0) {
        throw ShapeError("train: image size " + std::to_string(ds.config.size) + " is not a multiple of stride " +
                         std::to_string(topo.total_stride()));
      }
      const auto out = pipeline::train_detector(ds, cfg.detector.variant, tc, tr_out, log_epoch);
      std::cout << "train_ap " << io::fmt6(out.train_ap) << " test_ap " << io::fmt6(out.test_ap) << '\n';
    } else if (*at) {
      config::RunConfig cfg = load_config(at_config);
      override_with(at_iters, cfg.attack.iterations);
      override_with(at_lambda, cfg.attack.lambda);
      override_with(at_n, cfg.attack.n);
      override_with(at_lr, cfg.attack.lr);
      if (at_seed) cfg.attack_seed = at_seed;
      default_path(at_data, cfg, "data");
      default_path(at_out, cfg, "attack");
      const auto models = load_models(at_models);
      const scene::Dataset ds = scene::read_dataset(at_data);
      const auto r = pipeline::run_attack(models, ds, cfg, at_out, progress_hook(cfg.attack.iterations));
      std::cout << "black_ratio " << io::fmt6(r.black_ratio) << " final_loss "
                << (r.trace.empty() ? std::string("n/a") : io::fmt6(r.trace.back().loss)) << '\n';
    } else if (*ev) {
      config::RunConfig cfg = load_config(ev_config);
      if (ev_seed) cfg.eval_seed = ev_seed;
      if (ev_gt) cfg.eval.gt_mode = eval::parse_gt_mode(*ev_gt);
      if (ev_no_baselines) cfg.baselines = false;
      default_path(ev_data, cfg, "data");
      default_path(ev_out, cfg, "eval");
      if (ev_models.empty() && ev_held.empty()) throw std::invalid_argument("eval: pass --model or --held-out");
      std::vector<pipeline::EvalModelSpec> models;
      for (const auto& p : ev_models) models.push_back({pipeline::load_model(p), false});
      for (const auto& p : ev_held) models.push_back({pipeline::load_model(p), true});
      const eval::EvalConfig ec = cfg.resolved_eval();

      std::vector<eval::Condition> conds;
      std::size_t n = cfg.attack.n;
      bool first_file = true;
      for (const auto& arg : ev_patches) {
        const PatchArg pa = parse_patch_arg(arg, first_file);
        if (pa.source == "random" || pa.source == "blank") continue;
        first_file = false;
        if (!fs::exists(pa.source)) throw io::FormatError("eval: patch file not found: " + pa.source);
        pattern::Patch p = pattern::read_patch_png(pa.source);
        if (p.mode() != pattern::PatchMode::hard) p = pattern::binarize(p);
        if (conds.empty()) n = p.grid().dim(0);
        conds.push_back({pa.name, p, {}});
      }
      Rng rng = make_stream(ec.seed, "random-baseline");
      auto has = [&](const std::string& name) {
        for (const auto& c : conds) {
          if (c.name == name) return true;
        }
        return false;
      };
      for (const auto& arg : ev_patches) {
        if (arg == "random" && !has("random")) conds.push_back({"random", pattern::random_hard_patch(n, rng), {}});
        if (arg == "blank" && !has("blank")) conds.push_back({"blank", pattern::blank_patch(n), {}});
      }
      if (cfg.baselines) {
        std::vector<eval::Condition> base = pipeline::with_baselines({}, n, ec.seed);
        for (auto& c : base) {
          if (!has(c.name)) conds.push_back(std::move(c));
        }
      }
      const scene::Dataset ds = scene::read_dataset(ev_data);
      const eval::EvalReport rep = pipeline::run_eval(models, ds, conds, ec, ev_out);
      pipeline::write_json(fs::path(ev_out) / "manifest.json",
                           {{"format", "irpatch-eval-run/1"},
                            {"config", config::to_json(cfg)},
                            {pipeline::kTimestampKey, pipeline::utc_now()}});
      for (const auto& d : rep.detectors) {
        std::cout << d.name << (d.held_out ? " (held out)" : "") << " clean_ap " << io::fmt6(d.clean.ap) << '\n';
        for (const auto& c : d.conditions) {
          std::cout << "  " << c.name << " ap " << io::fmt6(c.curve.ap) << " ap_decrease " << io::fmt6(c.ap_decrease)
                    << " asr " << io::fmt6(c.asr) << '\n';
        }
      }
      if (ev_assert) {
        const auto bad = pipeline::ordering_violations(rep);
        for (const auto& b : bad) std::cerr << "ordering violated: " << b << '\n';
        if (!bad.empty()) return kExitAssertion;
      }
    } else if (*sw) {
      config::RunConfig cfg = load_config(sw_config);
      override_with(sw_iters, cfg.attack.iterations);
      const std::string param = sw_param.value_or(cfg.sweep.param);
      if (!pipeline::is_sweep_param(param)) {
        throw std::invalid_argument("sweep: unknown param '" + param + "' (lambda, resolution, proportion)");
      }
      if (sw_values.empty()) sw_values = param == "proportion" ? cfg.sweep.proportions : cfg.sweep.values;
      if (sw_values.size() < 2) throw std::invalid_argument("sweep: need at least two values");
      default_path(sw_data, cfg, "data");
      default_path(sw_out, cfg, "sweep-" + param);
      const auto models = load_models(sw_models);
      const scene::Dataset ds = scene::read_dataset(sw_data);
      if (param == "proportion") {
        pattern::Patch patch = pattern::blank_patch(1);
        if (!sw_patch.empty()) {
          patch = pattern::read_patch_png(sw_patch);
          if (patch.mode() != pattern::PatchMode::hard) patch = pattern::binarize(patch);
        } else {
          patch = pipeline::run_attack(models, ds, cfg, fs::path(sw_out) / "attack",
                                       progress_hook(cfg.attack.iterations))
                      .patch;
        }
        for (const auto& r : pipeline::run_proportion_sweep(models.front(), ds, patch, sw_values,
                                                            cfg.resolved_eval(), sw_out)) {
          std::cout << "proportion " << io::fmt6(r.proportion) << " asr " << io::fmt6(r.asr) << '\n';
        }
      } else {
        for (const auto& r : pipeline::run_param_sweep(param, sw_values, models, ds, cfg, sw_out)) {
          std::cout << param << ' ' << io::fmt6(r.value) << " ap_decrease " << io::fmt6(r.ap_decrease)
                    << " black_ratio " << io::fmt6(r.black_ratio) << '\n';
        }
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return 0;
}
