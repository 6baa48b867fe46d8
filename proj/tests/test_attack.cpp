#include <gtest/gtest.h>


#include "irpatch/attack.hpp"
#include "irpatch/gradcheck.hpp"
#include "support.hpp"

using namespace irpatch;
using namespace irpatch::attack;

namespace {

diff::Var scalar(diff::Tape& t, double v) { return t.constant(Tensor::scalar(v)); }

AttackConfig small_config(std::uint64_t seed) {
  AttackConfig c;
  c.n = 6;
  c.tile_reps = 5;
  c.transform.crop_range = {10, 16};
  c.iterations = 3;
  c.batch = 2;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Paste, FullHeightCenteredSpansBox) {
  diff::Tape tape;
  const scene::Box box{10, 8, 50, 48};
  const Tensor support({12, 12}, 1.0);
  const PasteOutcome r =
      paste_patch(tape.constant(Tensor({64, 64}, 1.0)), box, tape.constant(Tensor({12, 12}, 0.0)), support, 1.0);
  ASSERT_FALSE(r.skipped);
  const Tensor& img = r.image.value();
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      const bool in = y >= 8 && y < 48 && x >= 10 && x < 50;
      EXPECT_DOUBLE_EQ(img.at(y, x), in ? 0.0 : 1.0) << y << "," << x;
    }
  }
}

TEST(Paste, HalfGreyPatchGivesHalfGreyRegion) {
  diff::Tape tape;
  Rng rng(1);
  const Tensor base = fixtures::random_tensor(rng, {64, 64}, 0, 1);
  const scene::Box box{20, 10, 36, 50};
  const PasteOutcome r = paste_patch(tape.constant(base), box, tape.constant(Tensor({9, 9}, 0.5)),
                                     Tensor({9, 9}, 1.0), 0.3, 0.2, 0.7);
  const double side = 0.3 * 40;
  const double y0 = 10 + 0.2 * (40 - side), x0 = 20 + 0.7 * (16 - side);
  std::size_t covered = 0;
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      const double cy = y + 0.5, cx = x + 0.5;
      const bool in = cy >= y0 && cy < y0 + side && cx >= x0 && cx < x0 + side;
      EXPECT_DOUBLE_EQ(r.image.value().at(y, x), in ? 0.5 : base.at(y, x));
      covered += in;
    }
  }
  EXPECT_EQ(covered, 144u);
}

TEST(Paste, GradientSupportMatchesSampledPixels) {
  // A 30px patch shrunk to 10px reads patch coordinates 3i + 1 exactly, so
  // only those pixels may influence the image.
  const scene::Box box{0, 0, 10, 10};
  Rng rng(2);
  const Tensor patch0 = fixtures::random_tensor(rng, {30, 30}, 0.2, 0.8);
  const diff::ScalarFn f = [&](diff::Tape& t, diff::Var p) {
    return diff::mean(paste_patch(t.constant(Tensor({16, 16}, 0.5)), box, p, Tensor({30, 30}, 1.0), 1.0).image);
  };
  const diff::GradCheckResult check = diff::finite_diff_check(f, patch0);
  EXPECT_TRUE(check.passed(1e-4));

  diff::Tape tape;
  diff::Var p = tape.leaf(patch0);
  const Tensor g = tape.backward(f(tape, p))[p];
  for (std::size_t a = 0; a < 30; ++a) {
    for (std::size_t b = 0; b < 30; ++b) {
      const bool sampled = a % 3 == 1 && b % 3 == 1;
      // numeric derivative for an independent check of positivity
      Tensor plus = patch0, minus = patch0;
      plus.at(a, b) += 1e-4;
      minus.at(a, b) -= 1e-4;
      diff::Tape t1, t2;
      const double fd = (f(t1, t1.leaf(plus)).value().item() - f(t2, t2.leaf(minus)).value().item()) / 2e-4;
      if (sampled) {
        EXPECT_GT(g.at(a, b), 0.0);
        EXPECT_GT(fd, 0.0);
      } else {
        EXPECT_EQ(g.at(a, b), 0.0);
        EXPECT_NEAR(fd, 0.0, 1e-12);
      }
    }
  }
}

TEST(Paste, TooSmallIsSkipped) {
  diff::Tape tape;
  const PasteOutcome r = paste_patch(tape.constant(Tensor({16, 16}, 0.3)), {2, 2, 10, 12},
                                     tape.constant(Tensor({5, 5}, 1.0)), Tensor({5, 5}, 1.0), 0.05);
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(r.image.value(), Tensor({16, 16}, 0.3));
}

TEST(Proportion, LinearInCropSide) {
  EXPECT_DOUBLE_EQ(crop_proportion(10, {10, 30}, {0.1, 0.3}), 0.1);
  EXPECT_DOUBLE_EQ(crop_proportion(30, {10, 30}, {0.1, 0.3}), 0.3);
  EXPECT_NEAR(crop_proportion(20, {10, 30}, {0.1, 0.3}), 0.2, 1e-15);
  EXPECT_DOUBLE_EQ(crop_proportion(12, {12, 12}, {0.1, 0.3}), 0.2);
}

TEST(Losses, Arithmetic) {
  diff::Tape t;
  EXPECT_NEAR(total_loss(scalar(t, 0.5), scalar(t, 0.4), 0.1).value().item(), 0.54, 1e-15);
  EXPECT_EQ(total_loss(scalar(t, 0.37), scalar(t, 0.9), 0.0).value().item(), 0.37);
  EXPECT_EQ(total_loss(scalar(t, 0.0), scalar(t, 0.42), 1.0).value().item(), 0.42);
  EXPECT_THROW(total_loss(scalar(t, 0.0), scalar(t, 0.0), -0.1), std::invalid_argument);

  EXPECT_NEAR(ensemble_loss({scalar(t, 0.2), scalar(t, 0.3), scalar(t, 0.1)}, scalar(t, 0.5), 0.0).value().item(), 0.6,
              1e-15);
  const double with = ensemble_loss({scalar(t, 0.2), scalar(t, 0.3), scalar(t, 0.0)}, scalar(t, 0.5), 0.1).value().item();
  const double without = ensemble_loss({scalar(t, 0.2), scalar(t, 0.3)}, scalar(t, 0.5), 0.1).value().item();
  EXPECT_EQ(with, without);
  EXPECT_THROW(ensemble_loss({}, scalar(t, 0.0), 0.1), std::invalid_argument);
}

TEST(Losses, EnsembleOfOneIsTotalLossBitExact) {
  Rng rng(3);
  for (int k = 0; k < 100; ++k) {
    diff::Tape t;
    const double a = uniform(rng, 0, 1), b = uniform(rng, 0, 1), lambda = uniform(rng, 0, 1);
    EXPECT_EQ(ensemble_loss({scalar(t, a)}, scalar(t, b), lambda).value().item(),
              total_loss(scalar(t, a), scalar(t, b), lambda).value().item());
  }
}

TEST(Losses, ObjectnessIsBatchMean) {
  diff::Tape t;
  EXPECT_NEAR(objectness_loss(t, {scalar(t, 0.3), scalar(t, 0.8)}).value().item(), 0.55, 1e-15);
  EXPECT_NEAR(objectness_loss(t, {scalar(t, 0.3), std::nullopt}).value().item(), 0.15, 1e-15);
  EXPECT_THROW(objectness_loss(t, {}), std::invalid_argument);
}

TEST(Losses, BlindDetectorGivesNearZero) {
  fixtures::ChainFixture fx(4);
  detector::DetectorWeights w = fx.weights;
  for (Tensor* p : w.tensors()) *p = Tensor(p->shape(), 0.0);
  w.params.back().second[0] = -40.0;  // objectness bias
  std::vector<std::optional<diff::Var>> terms;
  diff::Tape tape;
  for (const auto& s : fx.data.scenes) {
    const auto out = detector::forward(w, tape.constant(s.image));
    const auto map = detector::to_map(out, 16, 64, 64);
    terms.push_back(image_objectness(out, map, s.boxes, 0.3));
    if (s.boxes.empty()) {
      EXPECT_FALSE(terms.back().has_value());
    }
  }
  EXPECT_LT(objectness_loss(tape, terms).value().item(), 1e-12);
}

TEST(Losses, PersonCellsIncludeCenterCell) {
  detector::DetectionMap m;
  m.objectness = Tensor({4, 4}, 0.5);
  m.class_score = Tensor({4, 4}, 1.0);
  m.offsets = Tensor({4, 4, 4}, -8.0);  // tiny boxes that overlap nothing
  m.image_h = m.image_w = 64;
  const auto cells = person_cells(m, {{20, 36, 28, 60}}, 0.3);
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0], 3 * 4 + 1);
}

TEST(Baseline, Patches) {
  Rng rng(5);
  const pattern::Patch blank = make_baseline_patch(BaselineKind::blank, 20, rng);
  for (double v : blank.grid().values()) EXPECT_EQ(v, 0.0);
  Rng a(6), b(6);
  const pattern::Patch r = make_baseline_patch(BaselineKind::random, 20, a);
  EXPECT_EQ(r.grid(), make_baseline_patch(BaselineKind::random, 20, b).grid());
  EXPECT_NEAR(r.black_ratio(), 0.5, 0.05);
}

TEST(Optimize, ZeroIterationsReturnsInitialization) {
  fixtures::ChainFixture fx(7, 4);
  AttackConfig c = small_config(7);
  c.n = 20;
  c.transform.crop_range = {10, 30};
  c.iterations = 0;
  const AttackResult r = optimize_patch({&fx.weights}, fx.data.select(fx.data.train), c);
  Rng init = make_stream(7, "latent-init");
  EXPECT_EQ(r.latent, pattern::PatternLatent::random(20, init));
  EXPECT_TRUE(r.trace.empty());
  EXPECT_NEAR(r.black_ratio, 0.5, 0.1);
}

TEST(Optimize, DeterministicAndTraceConsistent) {
  fixtures::ChainFixture fx(8, 6);
  const AttackConfig c = small_config(8);
  std::vector<pattern::PatternLatent> seen;
  const AttackResult a = optimize_patch({&fx.weights}, fx.data.select(fx.data.train), c,
                                        [&](std::size_t, const pattern::PatternLatent& z, const TraceRow&) {
                                          seen.push_back(z);
                                        });
  const AttackResult b = optimize_patch({&fx.weights}, fx.data.select(fx.data.train), c);
  EXPECT_EQ(a.latent, b.latent);
  EXPECT_EQ(a.patch.grid(), b.patch.grid());
  ASSERT_EQ(a.trace.size(), c.iterations);
  ASSERT_EQ(seen.size(), c.iterations);
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    EXPECT_EQ(a.trace[i].loss, b.trace[i].loss);
    diff::Tape t;
    EXPECT_EQ(a.trace[i].l_black, pattern::black_ratio_loss(t.constant(seen[i].logits())).value().item());
    EXPECT_NEAR(a.trace[i].loss, a.trace[i].l_obj + c.lambda * a.trace[i].l_black, 1e-15);
  }
  EXPECT_NE(a.latent, seen.front());
  EXPECT_DOUBLE_EQ(a.black_ratio, a.patch.black_ratio());
}

TEST(Optimize, LambdaZeroTraceIsObjectnessOnly) {
  fixtures::ChainFixture fx(9, 4);
  AttackConfig c = small_config(9);
  c.lambda = 0;
  for (const TraceRow& row : optimize_patch({&fx.weights}, fx.data.select(fx.data.train), c).trace) {
    EXPECT_EQ(row.loss, row.l_obj);
  }
}

TEST(Optimize, EnsembleSumsDetectors) {
  fixtures::ChainFixture fx(10, 4);
  const detector::DetectorWeights other = detector::init_weights(detector::variant("slim"), 3);
  AttackConfig c = small_config(10);
  c.iterations = 1;
  const auto scenes = fx.data.select(fx.data.train);
  const double a = optimize_patch({&fx.weights}, scenes, c).trace[0].l_obj;
  const double b = optimize_patch({&other}, scenes, c).trace[0].l_obj;
  EXPECT_NEAR(optimize_patch({&fx.weights, &other}, scenes, c).trace[0].l_obj, a + b, 1e-12);
}

TEST(Optimize, RejectsBadInputs) {
  fixtures::ChainFixture fx(11, 2);
  AttackConfig c = small_config(11);
  const auto scenes = fx.data.select(fx.data.train);
  EXPECT_THROW(optimize_patch({}, scenes, c), std::invalid_argument);
  c.lambda = -1;
  EXPECT_THROW(optimize_patch({&fx.weights}, scenes, c), std::invalid_argument);
  c = small_config(11);
  c.transform.crop_range = {10, 40};
  EXPECT_THROW(optimize_patch({&fx.weights}, scenes, c), std::invalid_argument);

  scene::Scene odd = fx.data.scenes.front();
  odd.image = Tensor({60, 60}, 0.3);
  odd.boxes.clear();
  EXPECT_THROW(optimize_patch({&fx.weights}, {&odd}, small_config(11)), ShapeError);
}

TEST(Optimize, DivergenceReportsIteration) {
  // Overflowing activations of mixed sign turn into NaN inside the network.
  fixtures::ChainFixture fx(12, 4);
  detector::DetectorWeights w = fx.weights;
  for (Tensor* p : w.tensors()) {
    for (double& v : p->values()) v *= 1e300;
  }
  try {
    optimize_patch({&w}, fx.data.select(fx.data.train), small_config(12));
    FAIL() << "expected AttackDiverged";
  } catch (const AttackDiverged& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("iteration"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lambda=0.1"), std::string::npos) << msg;
  }
}

TEST(Chain, FiniteDifferencesOnTenLogits) {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const diff::GradCheckResult r = fixtures::check_chain(seed);
    EXPECT_TRUE(r.passed(1e-4)) << "seed " << seed << " error " << r.max_rel_error;
  }
}
