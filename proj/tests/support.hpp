#pragma once

// Shared fixtures for the unit and acceptance tests: random tensors, the
// per-op finite-difference cases, and the full attack-loss chain.

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "irpatch/attack.hpp"
#include "irpatch/detector.hpp"
#include "irpatch/gradcheck.hpp"
#include "irpatch/ops.hpp"
#include "irpatch/pattern.hpp"
#include "irpatch/rng.hpp"
#include "irpatch/scene.hpp"

namespace irpatch::fixtures {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

inline std::size_t dim(Rng& rng, int lo = 1, int hi = 4) { return static_cast<std::size_t>(uniform_int(rng, lo, hi)); }

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes a distinct adjoint.
inline diff::Var weigh(diff::Tape& tape, const diff::Var& v, std::uint64_t seed) {
  Rng rng(seed);
  return diff::sum(diff::mul(v, tape.constant(random_tensor(rng, v.value().shape()))));
}

struct GradCase {
  diff::ScalarFn f;
  Tensor x;
};

using CaseMaker = std::function<GradCase(Rng&)>;

/// One entry per differentiable op (binary ops once per operand).
inline std::vector<std::pair<std::string, CaseMaker>> op_cases() {
  using namespace diff;
  std::vector<std::pair<std::string, CaseMaker>> cases;
  auto unary = [&](const std::string& name, std::function<Var(const Var&)> op, double lo = -1, double hi = 1) {
    cases.emplace_back(name, [op, lo, hi](Rng& rng) {
      const std::uint64_t s = rng();
      Tensor x = random_tensor(rng, {dim(rng), dim(rng)}, lo, hi);
      return GradCase{[op, s](Tape& t, Var v) { return weigh(t, op(v), s); }, std::move(x)};
    });
  };
  auto binary = [&](const std::string& name, std::function<Var(const Var&, const Var&)> op, double lo = -1,
                    double hi = 1) {
    for (int side = 0; side < 2; ++side) {
      cases.emplace_back(name + (side == 0 ? "[lhs]" : "[rhs]"), [op, lo, hi, side](Rng& rng) {
        const std::uint64_t s = rng();
        const Shape shape{dim(rng), dim(rng)};
        Tensor x = random_tensor(rng, shape, lo, hi);
        Tensor other = random_tensor(rng, shape, lo, hi);
        return GradCase{[op, s, other, side](Tape& t, Var v) {
                          Var o = t.constant(other);
                          return weigh(t, side == 0 ? op(v, o) : op(o, v), s);
                        },
                        std::move(x)};
      });
    }
  };

  binary("add", [](const Var& a, const Var& b) { return add(a, b); });
  binary("sub", [](const Var& a, const Var& b) { return sub(a, b); });
  binary("mul", [](const Var& a, const Var& b) { return mul(a, b); });
  binary("div", [](const Var& a, const Var& b) { return div(a, b); }, 0.5, 2.0);
  unary("scalar-mul", [](const Var& a) { return scale(a, -1.7); });
  unary("affine", [](const Var& a) { return affine(a, 0.8, 0.1); });
  unary("leaky-relu", [](const Var& a) { return leaky_relu(a, 0.1); });
  unary("sigmoid", [](const Var& a) { return sigmoid(a); }, -4, 4);
  unary("exp", [](const Var& a) { return exp(a); });
  unary("log", [](const Var& a) { return log(a); }, 0.2, 3.0);
  unary("clamp", [](const Var& a) { return clamp(a, -0.5, 0.5); });
  unary("reduce-sum", [](const Var& a) { return sum(a); });
  unary("reduce-mean", [](const Var& a) { return mean(a); });
  unary("softmax[0]", [](const Var& a) { return softmax(a, 0); }, -3, 3);
  unary("softmax[1]", [](const Var& a) { return softmax(a, 1); }, -3, 3);
  unary("max-over-axis[0]", [](const Var& a) { return max_axis(a, 0); });
  unary("max-over-axis[1]", [](const Var& a) { return max_axis(a, 1); });
  unary("reshape", [](const Var& a) { return reshape(a, {a.value().size()}); });
  unary("slice", [](const Var& a) { return slice(a, 1, 0, 1); });
  unary("concat", [](const Var& a) { return concat({a, scale(a, 2.0), a}, 0); });
  unary("gather", [](const Var& a) {
    const std::size_t n = a.value().size();
    std::vector<std::ptrdiff_t> idx;
    for (std::size_t i = 0; i < 2 * n + 1; ++i) idx.push_back(i % 3 == 2 ? -1 : static_cast<std::ptrdiff_t>((i * 7) % n));
    return gather(a, idx, {idx.size()});
  });
  unary("bce-with-logits", [](const Var& a) {
    Tensor t(a.value().shape());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = i % 2 ? 1.0 : 0.0;
    return bce_with_logits(a, t);
  }, -3, 3);
  unary("smooth-l1", [](const Var& a) { return smooth_l1(a, Tensor(a.value().shape(), 0.3)); }, -3, 3);

  cases.emplace_back("matmul[lhs]", [](Rng& rng) {
    const std::uint64_t s = rng();
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    Tensor b = random_tensor(rng, {k, n});
    return GradCase{[b, s](Tape& t, Var v) { return weigh(t, matmul(v, t.constant(b)), s); }, random_tensor(rng, {m, k})};
  });
  cases.emplace_back("matmul[rhs]", [](Rng& rng) {
    const std::uint64_t s = rng();
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    Tensor a = random_tensor(rng, {m, k});
    return GradCase{[a, s](Tape& t, Var v) { return weigh(t, matmul(t.constant(a), v), s); }, random_tensor(rng, {k, n})};
  });
  auto conv_case = [](int which) {
    return [which](Rng& rng) {
      const std::uint64_t s = rng();
      const std::size_t c = dim(rng, 1, 2), o = dim(rng, 1, 3), k = rng() % 2 ? 3 : 1;
      const std::size_t h = dim(rng, 3, 6), w = dim(rng, 3, 6);
      const Conv2dParams p{static_cast<std::size_t>(uniform_int(rng, 1, 2)), k == 3 ? std::size_t{1} : std::size_t{0}};
      Tensor x = random_tensor(rng, {c, h, w}), wt = random_tensor(rng, {o, c, k, k}), b = random_tensor(rng, {o});
      return GradCase{[=](Tape& t, Var v) {
                        Var xv = which == 0 ? v : t.constant(x);
                        Var wv = which == 1 ? v : t.constant(wt);
                        Var bv = which == 2 ? v : t.constant(b);
                        return weigh(t, conv2d(xv, wv, bv, p), s);
                      },
                      which == 0 ? x : which == 1 ? wt : b};
    };
  };
  cases.emplace_back("conv2d[input]", conv_case(0));
  cases.emplace_back("conv2d[weight]", conv_case(1));
  cases.emplace_back("conv2d[bias]", conv_case(2));
  cases.emplace_back("bilinear-sample[image]", [](Rng& rng) {
    const std::uint64_t s = rng();
    const std::size_t h = dim(rng, 2, 5), w = dim(rng, 2, 5), ho = dim(rng), wo = dim(rng);
    Tensor coords = random_tensor(rng, {ho, wo, 2}, -0.7, static_cast<double>(std::min(h, w)) - 0.3);
    return GradCase{[coords, s](Tape& t, Var v) { return weigh(t, bilinear_sample(v, t.constant(coords)), s); },
                    random_tensor(rng, {h, w}, 0, 1)};
  });
  cases.emplace_back("bilinear-sample[coords]", [](Rng& rng) {
    const std::uint64_t s = rng();
    const std::size_t h = dim(rng, 2, 5), w = dim(rng, 2, 5), ho = dim(rng), wo = dim(rng);
    Tensor img = random_tensor(rng, {h, w}, 0, 1);
    return GradCase{[img, s](Tape& t, Var v) { return weigh(t, bilinear_sample(t.constant(img), v), s); },
                    random_tensor(rng, {ho, wo, 2}, 0.05, static_cast<double>(std::min(h, w)) - 1.05)};
  });
  return cases;
}

// ---- full attack loss -------------------------------------------------------

/// Small random scene set and untrained detector for the chain check.
struct ChainFixture {
  scene::Dataset data;
  detector::DetectorWeights weights;
  attack::AttackConfig cfg;

  explicit ChainFixture(std::uint64_t seed, std::size_t scenes = 2) {
    scene::SceneConfig sc;
    sc.size = 64;
    sc.height_lo = 24;
    sc.height_hi = 48;
    data = scene::generate_dataset(scenes, seed, sc);
    weights = detector::init_weights(detector::variant("base"), seed);
    cfg.n = 6;
    cfg.tile_reps = 5;
    cfg.transform.crop_range = {10, 16};
    cfg.transform.noise_std_max = 0.02;
    cfg.seed = seed;
  }
};

/// Total loss (objectness + lambda * black ratio) as a function of
/// `positions.size()` chosen logits; all randomness is fixed by `seed`.
inline diff::ScalarFn chain_loss(const ChainFixture& fx, const Tensor& base_logits, std::vector<std::size_t> positions,
                                 std::uint64_t seed) {
  Rng grng = make_stream(seed, "gumbel");
  const Tensor g = pattern::sample_gumbel(fx.cfg.n, grng).g;
  return [&fx, base_logits, positions, seed, g](diff::Tape& tape, diff::Var x) {
    std::vector<std::ptrdiff_t> idx(base_logits.size(), -1);
    for (std::size_t k = 0; k < positions.size(); ++k) idx[positions[k]] = static_cast<std::ptrdiff_t>(k);
    diff::Var logits =
        diff::add(tape.constant(base_logits), diff::gather(x, std::move(idx), base_logits.shape()));
    diff::Var soft = pattern::gumbel_softmax(logits, g, fx.cfg.tau);
    diff::Var tiled = pattern::tile(soft, fx.cfg.tile_reps);
    std::vector<std::optional<diff::Var>> per_image;
    for (std::size_t i = 0; i < fx.data.scenes.size(); ++i) {
      const scene::Scene& s = fx.data.scenes[i];
      attack::ChainStreams rs = attack::ChainStreams::make(seed, i);
      const attack::PatchedImage p = attack::patch_scene(s, tiled, fx.cfg.transform, fx.cfg.proportion, rs);
      const detector::DetectionVars out = detector::forward(fx.weights, p.image);
      const detector::DetectionMap map = detector::to_map(out, 16, s.image.dim(0), s.image.dim(1));
      per_image.push_back(attack::image_objectness(out, map, s.boxes, fx.cfg.select_iou));
    }
    return attack::total_loss(attack::objectness_loss(tape, per_image), pattern::black_ratio_loss(logits),
                              fx.cfg.lambda);
  };
}

/// Runs the chain check on `count` chosen logits; returns the result.
inline diff::GradCheckResult check_chain(std::uint64_t seed, std::size_t count = 10) {
  ChainFixture fx(seed);
  Rng rng = make_stream(seed, "chain-logits");
  const Tensor base = random_tensor(rng, {2, fx.cfg.n, fx.cfg.n}, -1.5, 1.5);
  std::vector<std::size_t> pos;
  while (pos.size() < count) {
    const auto p = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(base.size()) - 1));
    if (std::find(pos.begin(), pos.end(), p) == pos.end()) pos.push_back(p);
  }
  return diff::finite_diff_check(chain_loss(fx, base, pos, seed), Tensor({count}, 0.0));
}

}  // namespace irpatch::fixtures
