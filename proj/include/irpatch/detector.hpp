#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "irpatch/io.hpp"
#include "irpatch/metrics.hpp"
#include "irpatch/ops.hpp"
#include "irpatch/optim.hpp"
#include "irpatch/rng.hpp"
#include "irpatch/scene.hpp"

// Small anchor-free single-scale person detector: stacked 3x3 conv +
// leaky-ReLU blocks down to a G x G cell grid, then a 1x1 head emitting per
// cell an objectness logit, four box offsets and a class logit.
namespace irpatch::detector {

inline constexpr const char* kWeightsMagic = "IRPATCH-DET/1";
inline constexpr std::size_t kHeadChannels = 6;  // obj, dx, dy, log w, log h, cls
inline constexpr double kLeakySlope = 0.1;

struct ConvBlock {
  std::size_t channels;
  std::size_t stride;
  friend bool operator==(const ConvBlock&, const ConvBlock&) = default;
};

struct Topology {
  std::string name;
  std::vector<ConvBlock> blocks;

  std::size_t total_stride() const {
    std::size_t s = 1;
    for (const auto& b : blocks) s *= b.stride;
    return s;
  }

  /// "8:2,16:2,32:2,32:2"
  std::string descriptor() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < blocks.size(); ++i) os << (i ? "," : "") << blocks[i].channels << ':' << blocks[i].stride;
    return os.str();
  }

  static Topology parse(const std::string& name, const std::string& descriptor) {
    Topology t{name, {}};
    std::istringstream is(descriptor);
    std::string part;
    while (std::getline(is, part, ',')) {
      const auto colon = part.find(':');
      if (colon == std::string::npos) throw std::invalid_argument("topology: bad block '" + part + "'");
      t.blocks.push_back({std::stoul(part.substr(0, colon)), std::stoul(part.substr(colon + 1))});
    }
    if (t.blocks.empty()) throw std::invalid_argument("topology: no blocks in '" + descriptor + "'");
    return t;
  }

  friend bool operator==(const Topology&, const Topology&) = default;
};

/// Named architecture variants. All reach a stride-16 grid.
inline const std::map<std::string, Topology>& variants() {
  static const std::map<std::string, Topology> v = {
      {"base", {"base", {{8, 2}, {16, 2}, {32, 2}, {32, 2}}}},
      {"wide", {"wide", {{12, 2}, {24, 2}, {48, 2}, {48, 2}}}},
      {"deep", {"deep", {{8, 2}, {16, 2}, {32, 2}, {32, 2}, {32, 1}}}},
      {"slim", {"slim", {{6, 2}, {12, 2}, {24, 2}, {24, 2}, {24, 1}}}},
  };
  return v;
}

inline const Topology& variant(const std::string& name) {
  const auto& v = variants();
  const auto it = v.find(name);
  if (it == v.end()) {
    std::string names;
    for (const auto& [k, _] : v) names += (names.empty() ? "" : ", ") + k;
    throw std::invalid_argument("unknown detector variant '" + name + "' (known: " + names + ")");
  }
  return it->second;
}

struct DetectorWeights {
  Topology topology;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, Tensor>> params;

  std::vector<Shape> expected_shapes() const {
    std::vector<Shape> shapes;
    std::size_t in = 1;
    for (const auto& b : topology.blocks) {
      shapes.push_back({b.channels, in, 3, 3});
      shapes.push_back({b.channels});
      in = b.channels;
    }
    shapes.push_back({kHeadChannels, in, 1, 1});
    shapes.push_back({kHeadChannels});
    return shapes;
  }

  void validate() const {
    const auto shapes = expected_shapes();
    if (shapes.size() != params.size()) throw std::invalid_argument("detector weights: wrong tensor count");
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      if (params[i].second.shape() != shapes[i]) {
        throw ShapeError("detector weights: " + params[i].first + " has shape " + shape_str(params[i].second.shape()) +
                         ", topology needs " + shape_str(shapes[i]));
      }
      if (!params[i].second.all_finite()) throw std::invalid_argument("detector weights: non-finite " + params[i].first);
    }
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (auto& [_, t] : params) out.push_back(&t);
    return out;
  }

  friend bool operator==(const DetectorWeights& a, const DetectorWeights& b) {
    return a.topology == b.topology && a.seed == b.seed && a.params == b.params;
  }
};

inline std::vector<std::string> parameter_names(const Topology& t) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < t.blocks.size(); ++i) {
    names.push_back("conv" + std::to_string(i) + ".weight");
    names.push_back("conv" + std::to_string(i) + ".bias");
  }
  names.push_back("head.weight");
  names.push_back("head.bias");
  return names;
}

/// He-normal conv kernels, zero biases, a small head with a negative
/// objectness prior.
inline DetectorWeights init_weights(const Topology& topology, std::uint64_t seed) {
  DetectorWeights w{topology, seed, {}};
  Rng rng = make_stream(seed, "detector-init");
  const auto names = parameter_names(topology);
  const auto shapes = w.expected_shapes();
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Tensor t(shapes[i], 0.0);
    const bool head = i + 2 >= shapes.size();
    if (shapes[i].size() == 4) {
      const double fan_in = static_cast<double>(shapes[i][1] * shapes[i][2] * shapes[i][3]);
      const double sd = head ? 0.01 : std::sqrt(2.0 / fan_in);
      for (double& v : t.values()) v = gaussian(rng, sd);
    } else if (head) {
      t[0] = -4.0;
    }
    w.params.emplace_back(names[i], std::move(t));
  }
  return w;
}

/// Per-cell outputs on a tape.
struct DetectionVars {
  diff::Var objectness_logit;  // [G, G]
  diff::Var offsets;           // [4, G, G]
  diff::Var class_logit;       // [G, G]
};

/// Plain per-cell outputs after the sigmoids.
struct DetectionMap {
  Tensor objectness;  // [G, G]
  Tensor offsets;     // [4, G, G]: column offset, row offset, log width, log height (cell units)
  Tensor class_score; // [G, G]
  std::size_t stride = 16;
  std::size_t image_h = 0, image_w = 0;

  std::size_t grid_h() const { return objectness.dim(0); }
  std::size_t grid_w() const { return objectness.dim(1); }
};

/// Records the network on `image`'s tape. Parameters are placed on the tape
/// as trainable leaves when `params_out` is given, otherwise as constants.
inline DetectionVars forward(const DetectorWeights& weights, const diff::Var& image,
                             std::vector<diff::Var>* params_out = nullptr) {
  const Shape& s = image.value().shape();
  const std::size_t stride = weights.topology.total_stride();
  if (s.size() != 2 || s[0] % stride != 0 || s[1] % stride != 0) {
    throw ShapeError("detector: image " + shape_str(s) + " must be 2D with sides divisible by " + std::to_string(stride));
  }
  diff::Tape& tape = *image.tape;
  std::vector<diff::Var> p;
  for (const auto& [_, t] : weights.params) p.push_back(params_out ? tape.leaf(t) : tape.constant(t));
  if (params_out) *params_out = p;

  diff::Var x = diff::reshape(image, {1, s[0], s[1]});
  for (std::size_t i = 0; i < weights.topology.blocks.size(); ++i) {
    x = diff::conv2d(x, p[2 * i], p[2 * i + 1], {weights.topology.blocks[i].stride, 1});
    x = diff::leaky_relu(x, kLeakySlope);
  }
  x = diff::conv2d(x, p[p.size() - 2], p.back(), {1, 0});
  const std::size_t G = x.value().dim(1), Gw = x.value().dim(2);
  return {diff::reshape(diff::slice(x, 0, 0, 1), {G, Gw}), diff::slice(x, 0, 1, 5),
          diff::reshape(diff::slice(x, 0, 5, 6), {G, Gw})};
}

inline DetectionMap to_map(const DetectionVars& v, std::size_t stride, std::size_t image_h, std::size_t image_w) {
  DetectionMap m;
  m.objectness = v.objectness_logit.value();
  for (double& o : m.objectness.values()) o = diff::detail::sigmoid_value(o);
  m.offsets = v.offsets.value();
  m.class_score = v.class_logit.value();
  for (double& c : m.class_score.values()) c = diff::detail::sigmoid_value(c);
  m.stride = stride;
  m.image_h = image_h;
  m.image_w = image_w;
  return m;
}

/// Inference without gradients.
inline DetectionMap predict(const DetectorWeights& weights, const Tensor& image) {
  diff::Tape tape;
  const DetectionVars v = forward(weights, tape.constant(image));
  return to_map(v, weights.topology.total_stride(), image.dim(0), image.dim(1));
}

/// Box predicted by cell (r, c), clamped to the image.
inline scene::Box cell_box(const Tensor& offsets, std::size_t r, std::size_t c, std::size_t stride, std::size_t image_h,
                           std::size_t image_w) {
  const std::size_t G = offsets.dim(1), Gw = offsets.dim(2);
  const double s = static_cast<double>(stride);
  auto off = [&](std::size_t k) { return offsets[(k * G + r) * Gw + c]; };
  const double cx = (static_cast<double>(c) + off(0)) * s;
  const double cy = (static_cast<double>(r) + off(1)) * s;
  const double w = s * std::exp(std::clamp(off(2), -8.0, 8.0));
  const double h = s * std::exp(std::clamp(off(3), -8.0, 8.0));
  const double W = static_cast<double>(image_w), H = static_cast<double>(image_h);
  return {std::clamp(cx - w / 2, 0.0, W), std::clamp(cy - h / 2, 0.0, H), std::clamp(cx + w / 2, 0.0, W),
          std::clamp(cy + h / 2, 0.0, H)};
}

/// Cells whose objectness x class reaches `score_threshold`, then NMS.
inline std::vector<eval::Detection> decode(const DetectionMap& map, double score_threshold, double nms_iou = 0.5) {
  if (!(score_threshold > 0 && score_threshold < 1) || !(nms_iou > 0 && nms_iou < 1)) {
    throw std::invalid_argument("decode: thresholds must lie in (0, 1)");
  }
  std::vector<eval::Detection> dets;
  for (std::size_t r = 0; r < map.grid_h(); ++r) {
    for (std::size_t c = 0; c < map.grid_w(); ++c) {
      const double score = map.objectness.at(r, c) * map.class_score.at(r, c);
      if (score < score_threshold) continue;
      const scene::Box b = cell_box(map.offsets, r, c, map.stride, map.image_h, map.image_w);
      if (b.width() <= 0 || b.height() <= 0) continue;
      dets.push_back({b, score});
    }
  }
  return eval::nms(std::move(dets), nms_iou);
}

// ---- training ---------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 12;
  std::size_t batch = 16;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  double box_weight = 2.0;
  double clip_norm = 10.0;
  std::size_t eval_every = 5;
  double ap_score_threshold = 0.05;
};

struct TrainLogRow {
  std::size_t epoch = 0;
  double loss = 0;
  double train_ap = -1;  // negative when not evaluated
  double test_ap = -1;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Regression targets for one scene: objectness target, per-cell offsets and
/// a positive mask. The positive cell of a box is the cell holding its center.
struct CellTargets {
  Tensor objectness;  // [G, G]
  Tensor offsets;     // [4, G, G]
  std::vector<std::size_t> positives;  // flat cell indices
};

inline CellTargets make_targets(const scene::Scene& s, std::size_t stride) {
  const std::size_t G = s.image.dim(0) / stride, Gw = s.image.dim(1) / stride;
  CellTargets t{Tensor({G, Gw}, 0.0), Tensor({4, G, Gw}, 0.0), {}};
  const double st = static_cast<double>(stride);
  for (const scene::Box& b : s.boxes) {
    const auto c = std::min(Gw - 1, static_cast<std::size_t>(b.center_x() / st));
    const auto r = std::min(G - 1, static_cast<std::size_t>(b.center_y() / st));
    const std::size_t cell = r * Gw + c;
    t.objectness[cell] = 1.0;
    t.offsets[(0 * G + r) * Gw + c] = b.center_x() / st - static_cast<double>(c);
    t.offsets[(1 * G + r) * Gw + c] = b.center_y() / st - static_cast<double>(r);
    t.offsets[(2 * G + r) * Gw + c] = std::log(b.width() / st);
    t.offsets[(3 * G + r) * Gw + c] = std::log(b.height() / st);
    if (std::find(t.positives.begin(), t.positives.end(), cell) == t.positives.end()) t.positives.push_back(cell);
  }
  return t;
}

/// Objectness BCE over all cells, plus smooth-L1 offsets and class BCE at
/// positive cells, for one scene.
inline diff::Var detection_loss(const DetectionVars& out, const CellTargets& t, double box_weight) {
  diff::Var loss = diff::sum(diff::bce_with_logits(out.objectness_logit, t.objectness));
  if (t.positives.empty()) return loss;
  const std::size_t cells = t.objectness.size();
  std::vector<std::ptrdiff_t> idx;
  Tensor box_target({4, t.positives.size()});
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t j = 0; j < t.positives.size(); ++j) {
      idx.push_back(static_cast<std::ptrdiff_t>(k * cells + t.positives[j]));
      box_target[k * t.positives.size() + j] = t.offsets[k * cells + t.positives[j]];
    }
  }
  diff::Var box_pred = diff::gather(out.offsets, idx, {4, t.positives.size()});
  loss = loss + diff::scale(diff::sum(diff::smooth_l1(box_pred, box_target)), box_weight);
  std::vector<std::ptrdiff_t> cls_idx(t.positives.begin(), t.positives.end());
  diff::Var cls = diff::gather(out.class_logit, cls_idx, {t.positives.size()});
  return loss + diff::sum(diff::bce_with_logits(cls, Tensor({t.positives.size()}, 1.0)));
}

/// AP of `weights` on a scene subset at IOU 0.5.
inline double average_precision(const DetectorWeights& weights, const std::vector<const scene::Scene*>& scenes,
                                double score_threshold, double nms_iou = 0.5) {
  std::vector<std::vector<eval::Detection>> dets;
  std::vector<std::vector<scene::Box>> gts;
  for (const scene::Scene* s : scenes) {
    dets.push_back(decode(predict(weights, s->image), score_threshold, nms_iou));
    gts.push_back(s->boxes);
  }
  return eval::pr_curve(dets, gts, 0.5).ap;
}

using TrainLogger = std::function<void(const TrainLogRow&)>;

/// Minibatch momentum SGD on the detection loss, batch-mean gradients, step
/// decay of the learning rate over the final third of training.
inline DetectorWeights train(const scene::Dataset& ds, const Topology& topology, const TrainConfig& cfg,
                             std::vector<TrainLogRow>* log = nullptr, const TrainLogger& logger = {}) {
  DetectorWeights weights = init_weights(topology, cfg.seed);
  if (cfg.epochs == 0) return weights;
  if (ds.train.empty()) throw std::invalid_argument("train: empty training split");
  const std::size_t stride = topology.total_stride();
  std::vector<CellTargets> targets;
  for (const scene::Scene& s : ds.scenes) targets.push_back(make_targets(s, stride));

  MomentumSgd opt(cfg.lr, cfg.momentum);
  Rng shuffle_rng = make_stream(cfg.seed, "detector-batches");
  std::vector<std::size_t> order = ds.train;
  const auto test_scenes = ds.select(ds.test);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (epoch > (2 * cfg.epochs) / 3) opt.set_lr(cfg.lr * 0.1);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::vector<Tensor> grads;
      for (auto* t : weights.tensors()) grads.emplace_back(t->shape(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        diff::Tape tape;
        std::vector<diff::Var> pv;
        const DetectionVars out = forward(weights, tape.constant(ds.scenes[idx].image), &pv);
        const diff::Var loss = detection_loss(out, targets[idx], cfg.box_weight);
        const double lv = loss.value().item();
        if (!std::isfinite(lv)) {
          throw TrainingDiverged("train: non-finite loss at epoch " + std::to_string(epoch) + ", scene " +
                                 std::to_string(ds.scenes[idx].id) + " (lr " + std::to_string(cfg.lr) + ")");
        }
        epoch_loss += lv;
        const diff::Gradients g = tape.backward(loss);
        for (std::size_t k = 0; k < pv.size(); ++k) grads[k] += g[pv[k]];
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (Tensor& g : grads) {
        for (double& v : g.values()) v *= inv;
      }
      clip_global_norm(grads, cfg.clip_norm);
      opt.step(weights.tensors(), grads);
    }
    TrainLogRow row{epoch, epoch_loss / static_cast<double>(order.size())};
    const bool evaluate = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
    if (evaluate && !test_scenes.empty()) row.test_ap = average_precision(weights, test_scenes, cfg.ap_score_threshold);
    if (log) log->push_back(row);
    if (logger) logger(row);
  }
  return weights;
}

struct EnsembleMember {
  std::string variant;
  DetectorWeights weights;
  double test_ap = 0;
  bool meets_floor = false;
};

/// Trains each variant independently, seeding each from `cfg.seed` and its
/// name. Members under `ap_floor` are kept and marked.
inline std::vector<EnsembleMember> make_ensemble(const scene::Dataset& ds, const std::vector<std::string>& names,
                                                 const TrainConfig& cfg, double ap_floor = 0.85,
                                                 const TrainLogger& logger = {}) {
  if (names.size() < 2) throw std::invalid_argument("make_ensemble: need at least two variants");
  std::vector<EnsembleMember> out;
  const auto test = ds.select(ds.test);
  for (const std::string& name : names) {
    TrainConfig c = cfg;
    c.seed = make_stream(cfg.seed, name)() >> 11;
    DetectorWeights w = train(ds, variant(name), c, nullptr, logger);
    const double ap = test.empty() ? 0.0 : average_precision(w, test, c.ap_score_threshold);
    out.push_back({name, std::move(w), ap, ap >= ap_floor});
  }
  return out;
}

// ---- persistence -------------------------------------------------------------
// Text header, then little-endian doubles for each tensor in declared order:
//   IRPATCH-DET/1
//   topology <name> <descriptor>
//   seed <n>
//   tensors <count>
//   <name> <rank> <d0> <d1> ...    (one line per tensor)
//   data

inline void write_weights(const std::filesystem::path& path, const DetectorWeights& w) {
  auto os = io::open_out(path);
  os << kWeightsMagic << "\n"
     << "topology " << w.topology.name << ' ' << w.topology.descriptor() << "\n"
     << "seed " << w.seed << "\n"
     << "tensors " << w.params.size() << "\n";
  for (const auto& [name, t] : w.params) {
    os << name << ' ' << t.rank();
    for (std::size_t d : t.shape()) os << ' ' << d;
    os << "\n";
  }
  os << "data\n";
  for (const auto& [_, t] : w.params) {
    for (double v : t.values()) io::write_f64_le(os, v);
  }
}

inline DetectorWeights read_weights(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io::FormatError(path.string() + ": cannot open");
  auto fail = [&](const std::string& why) { return io::FormatError(path.string() + ": " + why); };
  std::string line, key;
  std::getline(is, line);
  if (line != kWeightsMagic) throw fail("bad magic '" + line + "'");
  DetectorWeights w;
  std::string name, descriptor;
  std::size_t count = 0;
  if (!(is >> key >> name >> descriptor) || key != "topology") throw fail("missing topology");
  try {
    w.topology = Topology::parse(name, descriptor);
  } catch (const std::exception& e) {
    throw fail(e.what());
  }
  if (!(is >> key >> w.seed) || key != "seed") throw fail("missing seed");
  if (!(is >> key >> count) || key != "tensors") throw fail("missing tensor count");
  std::vector<std::pair<std::string, Shape>> index;
  for (std::size_t i = 0; i < count; ++i) {
    std::string tname;
    std::size_t rank = 0;
    if (!(is >> tname >> rank)) throw fail("truncated tensor index");
    Shape s(rank);
    for (auto& d : s) {
      if (!(is >> d)) throw fail("truncated shape of " + tname);
    }
    index.emplace_back(tname, s);
  }
  if (!(is >> key) || key != "data") throw fail("missing data marker");
  is.get();
  for (auto& [tname, s] : index) {
    Tensor t(s);
    for (double& v : t.values()) {
      if (!io::read_f64_le(is, v)) throw fail("truncated data for " + tname);
    }
    w.params.emplace_back(tname, std::move(t));
  }
  try {
    w.validate();
  } catch (const std::exception& e) {
    throw fail(e.what());
  }
  return w;
}

}  // namespace irpatch::detector
