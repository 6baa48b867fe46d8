#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "irpatch/detector.hpp"
#include "irpatch/ops.hpp"
#include "irpatch/optim.hpp"
#include "irpatch/pattern.hpp"
#include "irpatch/rng.hpp"
#include "irpatch/scene.hpp"
#include "irpatch/warp.hpp"

// Compositing the transformed pattern onto persons, the objectness and
// black-ratio losses, and the patch optimization loop.
namespace irpatch::attack {

using warp::Interval;

/// Transform sampling block of the run configuration.
struct TransformConfig {
  std::size_t tps_k = 16;
  double tps_sigma = 0.05;  // fraction of the crop side
  double tps_mu = 0.0;
  double rot_max_deg = 20.0;
  Interval scale_range{0.9, 1.1};
  Interval contrast_range{0.8, 1.2};
  Interval brightness_range{-0.1, 0.1};
  double noise_std_max = 0.02;
  warp::SizeRange crop_range{10, 30};

  warp::EotRanges eot_ranges() const {
    return {rot_max_deg, scale_range, contrast_range, brightness_range, noise_std_max};
  }
};

struct AttackConfig {
  std::size_t n = 20;
  std::size_t tile_reps = 5;
  double lambda = 0.1;
  double tau = pattern::kDefaultTau;
  Interval proportion{0.1, 0.3};
  double lr = 0.03;
  double momentum = 0.9;
  std::size_t iterations = 1000;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
  double select_iou = 0.3;
  TransformConfig transform;

  void validate() const {
    if (n < 1) throw std::invalid_argument("attack: N must be at least 1");
    if (tile_reps < 1) throw std::invalid_argument("attack: tile reps must be at least 1");
    if (lambda < 0) throw std::invalid_argument("attack: lambda must be non-negative");
    if (!(tau > 0)) throw std::invalid_argument("attack: tau must be positive");
    if (!(proportion.lo > 0) || proportion.hi > 1 || proportion.lo > proportion.hi) {
      throw std::invalid_argument("attack: proportion range must lie in (0, 1]");
    }
    if (batch < 1) throw std::invalid_argument("attack: batch must be at least 1");
    if (transform.crop_range.hi > n * tile_reps) {
      throw std::invalid_argument("attack: crop range exceeds the tiled pattern side " + std::to_string(n * tile_reps));
    }
  }
};

/// Generators for each random element of the transform chain.
struct ChainStreams {
  Rng crop, tps, eot, paste;

  static ChainStreams make(std::uint64_t seed, std::uint64_t index) {
    return {make_stream(seed, "crop", index), make_stream(seed, "tps", index), make_stream(seed, "eot", index),
            make_stream(seed, "paste", index)};
  }
};

/// Patch side relative to the box height grows linearly with the crop side
/// across the configured ranges.
inline double crop_proportion(std::size_t side, const warp::SizeRange& crop, Interval proportion) {
  if (crop.hi == crop.lo) return 0.5 * (proportion.lo + proportion.hi);
  const double t = static_cast<double>(side - crop.lo) / static_cast<double>(crop.hi - crop.lo);
  return proportion.lo + t * (proportion.hi - proportion.lo);
}

/// One transformed patch instance ready for compositing.
struct PreparedPatch {
  diff::Var pixels;  // [S, S]
  Tensor support;    // [S, S] coverage after rotation/scale
  warp::CropSpec crop;
  warp::EotParams eot;
  double proportion = 0;
};

/// random crop -> TPS -> EOT on the tiled pattern.
inline PreparedPatch transform_chain(const diff::Var& tiled, const TransformConfig& cfg, Interval proportion,
                                     ChainStreams& rs) {
  auto [cropped, spec] = warp::random_crop(tiled, rs.crop, cfg.crop_range);
  const warp::TpsWarpField field = warp::random_tps_field(spec.side, cfg.tps_k, cfg.tps_sigma, cfg.tps_mu, rs.tps);
  diff::Var deformed = warp::tps_warp(cropped, field);
  warp::EotParams p = sample_eot_params(cfg.eot_ranges(), rs.eot);
  p.translate_row = uniform(rs.paste, 0.0, 1.0);
  p.translate_col = uniform(rs.paste, 0.0, 1.0);
  diff::Var out = warp::eot_transform(deformed, p, rs.eot);
  return {out, warp::eot_support(spec.side, p), spec, p, crop_proportion(spec.side, cfg.crop_range, proportion)};
}

struct PasteOutcome {
  diff::Var image;
  bool skipped = false;
};

inline constexpr double kMinPatchPixels = 1.0;

/// Resizes `patch` to proportion x box height (bilinear), positions it inside
/// the box at the given fractions of the free room, and replaces the covered
/// pixels. Partial coverage at the rotated border blends by `support`.
inline PasteOutcome paste_patch(const diff::Var& image, const scene::Box& box, const diff::Var& patch,
                                const Tensor& support, double proportion, double frac_row = 0.5,
                                double frac_col = 0.5) {
  const Shape& is = image.value().shape();
  const Shape& ps = patch.value().shape();
  if (is.size() != 2 || ps.size() != 2 || ps[0] != ps[1] || support.shape() != ps) {
    throw ShapeError("paste: image " + shape_str(is) + ", patch " + shape_str(ps) + ", support " +
                     shape_str(support.shape()));
  }
  const double side = std::min({proportion * box.height(), box.width(), box.height()});
  if (!(side >= kMinPatchPixels)) return {image, true};
  const double y0 = box.y_min + std::clamp(frac_row, 0.0, 1.0) * (box.height() - side);
  const double x0 = box.x_min + std::clamp(frac_col, 0.0, 1.0) * (box.width() - side);
  const auto H = static_cast<std::ptrdiff_t>(is[0]), W = static_cast<std::ptrdiff_t>(is[1]);
  // Pixels whose centers fall inside [y0, y0+side) x [x0, x0+side).
  const auto r0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(y0 - 0.5)));
  const auto r1 = std::min<std::ptrdiff_t>(H, static_cast<std::ptrdiff_t>(std::ceil(y0 + side - 0.5)));
  const auto c0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(x0 - 0.5)));
  const auto c1 = std::min<std::ptrdiff_t>(W, static_cast<std::ptrdiff_t>(std::ceil(x0 + side - 0.5)));
  if (r1 <= r0 || c1 <= c0) return {image, true};
  const auto rh = static_cast<std::size_t>(r1 - r0), rw = static_cast<std::size_t>(c1 - c0);

  const double S = static_cast<double>(ps[0]);
  const double hi = S - 1.0;
  Tensor coords({rh, rw, 2});
  for (std::size_t i = 0; i < rh; ++i) {
    const double u = std::clamp((static_cast<double>(r0) + static_cast<double>(i) + 0.5 - y0) / side * S - 0.5, 0.0, hi);
    for (std::size_t j = 0; j < rw; ++j) {
      const double v = std::clamp((static_cast<double>(c0) + static_cast<double>(j) + 0.5 - x0) / side * S - 0.5, 0.0, hi);
      coords[2 * (i * rw + j)] = u;
      coords[2 * (i * rw + j) + 1] = v;
    }
  }
  diff::Tape& tape = *image.tape;
  const Tensor alpha_region = [&] {
    diff::Tape scratch;
    return diff::bilinear_sample(scratch.constant(support), scratch.constant(coords)).value();
  }();
  diff::Var sampled = diff::bilinear_sample(patch, tape.constant(coords));
  diff::Var weighted = diff::mul(sampled, tape.constant(alpha_region));

  Tensor keep(is, 1.0);
  std::vector<std::ptrdiff_t> index(is[0] * is[1], -1);
  for (std::size_t i = 0; i < rh; ++i) {
    for (std::size_t j = 0; j < rw; ++j) {
      const std::size_t flat = static_cast<std::size_t>(r0 + static_cast<std::ptrdiff_t>(i)) * is[1] +
                               static_cast<std::size_t>(c0 + static_cast<std::ptrdiff_t>(j));
      keep[flat] = 1.0 - alpha_region[i * rw + j];
      index[flat] = static_cast<std::ptrdiff_t>(i * rw + j);
    }
  }
  diff::Var placed = diff::gather(weighted, std::move(index), is);
  diff::Var out = diff::add(diff::mul(image, tape.constant(std::move(keep))), placed);
  return {diff::clamp(out, 0.0, 1.0), false};
}

/// Patches every person of `scene` with an independent chain draw.
struct PatchedImage {
  diff::Var image;
  std::size_t skipped = 0;
};

inline PatchedImage patch_scene(const scene::Scene& s, const diff::Var& tiled, const TransformConfig& cfg,
                                Interval proportion, ChainStreams& rs,
                                std::optional<double> fixed_proportion = std::nullopt) {
  diff::Tape& tape = *tiled.tape;
  PatchedImage out{tape.constant(s.image), 0};
  for (const scene::Box& box : s.boxes) {
    const PreparedPatch pp = transform_chain(tiled, cfg, proportion, rs);
    const double prop = fixed_proportion.value_or(pp.proportion);
    const PasteOutcome r =
        paste_patch(out.image, box, pp.pixels, pp.support, prop, pp.eot.translate_row, pp.eot.translate_col);
    out.image = r.image;
    out.skipped += r.skipped ? 1 : 0;
  }
  return out;
}

/// Cells read by the objectness loss: those whose decoded box overlaps a
/// ground-truth person with IOU >= select_iou, plus each person's center cell.
inline std::vector<std::ptrdiff_t> person_cells(const detector::DetectionMap& map, const std::vector<scene::Box>& gts,
                                                double select_iou) {
  std::vector<std::ptrdiff_t> cells;
  const std::size_t G = map.grid_h(), Gw = map.grid_w();
  const double st = static_cast<double>(map.stride);
  for (std::size_t r = 0; r < G; ++r) {
    for (std::size_t c = 0; c < Gw; ++c) {
      const scene::Box b = detector::cell_box(map.offsets, r, c, map.stride, map.image_h, map.image_w);
      bool hit = false;
      for (const scene::Box& g : gts) {
        const auto gc = std::min(Gw - 1, static_cast<std::size_t>(g.center_x() / st));
        const auto gr = std::min(G - 1, static_cast<std::size_t>(g.center_y() / st));
        hit = hit || (gr == r && gc == c) || scene::iou(b, g) >= select_iou;
      }
      if (hit) cells.push_back(static_cast<std::ptrdiff_t>(r * Gw + c));
    }
  }
  return cells;
}

/// Per-image aggregated objectness: max of sigmoid objectness over the
/// person cells. Nullopt for an image without ground truth.
inline std::optional<diff::Var> image_objectness(const detector::DetectionVars& out, const detector::DetectionMap& map,
                                                 const std::vector<scene::Box>& gts, double select_iou) {
  if (gts.empty()) return std::nullopt;
  std::vector<std::ptrdiff_t> cells = person_cells(map, gts, select_iou);
  const std::size_t k = cells.size();
  diff::Var picked = diff::gather(out.objectness_logit, std::move(cells), {k});
  return diff::max_all(diff::sigmoid(picked));
}

/// Mean over images of the per-image objectness; images without persons
/// contribute zero.
inline diff::Var objectness_loss(diff::Tape& tape, const std::vector<std::optional<diff::Var>>& per_image) {
  if (per_image.empty()) throw std::invalid_argument("objectness_loss: empty batch");
  std::vector<diff::Var> terms;
  for (const auto& v : per_image) terms.push_back(v ? diff::reshape(*v, {1}) : tape.constant(Tensor({1}, 0.0)));
  return diff::mean(diff::concat(terms, 0));
}

/// L = L_obj + lambda * L_black.
inline diff::Var total_loss(const diff::Var& l_obj, const diff::Var& l_black, double lambda) {
  if (lambda < 0) throw std::invalid_argument("total_loss: lambda must be non-negative");
  return diff::add(l_obj, diff::scale(l_black, lambda));
}

/// L = sum_i L_obj^(i) + lambda * L_black.
inline diff::Var ensemble_loss(const std::vector<diff::Var>& l_obj, const diff::Var& l_black, double lambda) {
  if (l_obj.empty()) throw std::invalid_argument("ensemble_loss: need at least one detector");
  diff::Var acc = l_obj.front();
  for (std::size_t i = 1; i < l_obj.size(); ++i) acc = diff::add(acc, l_obj[i]);
  return total_loss(acc, l_black, lambda);
}

enum class BaselineKind { random, blank };

inline pattern::Patch make_baseline_patch(BaselineKind kind, std::size_t n, Rng& rng) {
  return kind == BaselineKind::blank ? pattern::blank_patch(n) : pattern::random_hard_patch(n, rng);
}

struct TraceRow {
  std::size_t iteration = 0;
  double loss = 0;
  double l_obj = 0;
  double l_black = 0;
};

struct AttackResult {
  pattern::PatternLatent latent;
  pattern::Patch patch;  // hard P_basic
  std::vector<TraceRow> trace;
  double black_ratio = 0;
  std::size_t skipped_boxes = 0;
};

class AttackDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string describe(const AttackConfig& c) {
  std::ostringstream os;
  os << "N=" << c.n << " reps=" << c.tile_reps << " lambda=" << c.lambda << " tau=" << c.tau << " lr=" << c.lr
     << " momentum=" << c.momentum << " batch=" << c.batch << " seed=" << c.seed;
  return os.str();
}

/// Called before each update with the iteration index, the latent being
/// differentiated and the trace row for it.
using IterationHook = std::function<void(std::size_t, const pattern::PatternLatent&, const TraceRow&)>;

/// Optimizes the latent against frozen detectors on the training scenes.
inline AttackResult optimize_patch(const std::vector<const detector::DetectorWeights*>& detectors,
                                   const std::vector<const scene::Scene*>& train, const AttackConfig& cfg,
                                   const IterationHook& hook = {}) {
  cfg.validate();
  if (detectors.empty()) throw std::invalid_argument("optimize_patch: need at least one detector");
  if (train.empty()) throw std::invalid_argument("optimize_patch: no training scenes");
  for (const auto* d : detectors) {
    if (train.front()->image.dim(0) % d->topology.total_stride() != 0) {
      throw ShapeError("optimize_patch: detector '" + d->topology.name + "' incompatible with image size");
    }
  }

  Rng init_rng = make_stream(cfg.seed, "latent-init");
  AttackResult result{pattern::PatternLatent::random(cfg.n, init_rng), pattern::blank_patch(cfg.n), {}, 0, 0};
  Rng gumbel_rng = make_stream(cfg.seed, "gumbel");
  Rng batch_rng = make_stream(cfg.seed, "batch");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  MomentumSgd opt(cfg.lr, cfg.momentum);

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    diff::Tape tape;
    diff::Var logits = tape.leaf(result.latent.logits());
    const pattern::GumbelSample g = pattern::sample_gumbel(cfg.n, gumbel_rng);
    diff::Var soft = pattern::gumbel_softmax(logits, g.g, cfg.tau);
    diff::Var tiled = pattern::tile(soft, cfg.tile_reps);

    std::vector<std::vector<std::optional<diff::Var>>> per_detector(detectors.size());
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), batch_rng);
        cursor = 0;
      }
      const scene::Scene& s = *train[order[cursor++]];
      ChainStreams rs = ChainStreams::make(cfg.seed, it * cfg.batch + b);
      const PatchedImage patched = patch_scene(s, tiled, cfg.transform, cfg.proportion, rs);
      result.skipped_boxes += patched.skipped;
      for (std::size_t f = 0; f < detectors.size(); ++f) {
        const auto& det = *detectors[f];
        const detector::DetectionVars out = detector::forward(det, patched.image);
        const detector::DetectionMap map =
            detector::to_map(out, det.topology.total_stride(), s.image.dim(0), s.image.dim(1));
        per_detector[f].push_back(image_objectness(out, map, s.boxes, cfg.select_iou));
      }
    }
    std::vector<diff::Var> l_obj;
    for (const auto& terms : per_detector) l_obj.push_back(objectness_loss(tape, terms));
    const diff::Var l_black = pattern::black_ratio_loss(logits);
    const diff::Var loss = ensemble_loss(l_obj, l_black, cfg.lambda);

    TraceRow row{it, loss.value().item(), 0, l_black.value().item()};
    for (const auto& l : l_obj) row.l_obj += l.value().item();
    if (!std::isfinite(row.loss)) {
      throw AttackDiverged("optimize_patch: non-finite loss at iteration " + std::to_string(it) + " (" + describe(cfg) +
                           ")");
    }
    if (hook) hook(it, result.latent, row);
    result.trace.push_back(row);

    const diff::Gradients grads = tape.backward(loss);
    opt.step({&result.latent.logits()}, {grads[logits]});
    if (!result.latent.logits().all_finite()) {
      throw AttackDiverged("optimize_patch: non-finite logits after iteration " + std::to_string(it) + " (" +
                           describe(cfg) + ")");
    }
  }
  result.patch = pattern::hard_patch(result.latent);
  result.black_ratio = result.patch.black_ratio();
  return result;
}

}  // namespace irpatch::attack
