#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "irpatch/pattern.hpp"
#include "support.hpp"

using namespace irpatch;
using namespace irpatch::pattern;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("irpatch_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Tensor checkerboard(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) t[i * n + j] = (i + j) % 2 ? 1.0 : 0.0;
  }
  return t;
}

}  // namespace

TEST(Gumbel, ClosedFormExamples) {
  const Tensor g = gumbel_from_uniform(Tensor({2}, {0.5, std::exp(-1.0)}));
  EXPECT_NEAR(g[0], -std::log(std::log(2.0)), 1e-15);
  EXPECT_NEAR(g[0], 0.36651, 5e-6);
  EXPECT_NEAR(g[1], 0.0, 1e-15);
}

TEST(Gumbel, UniformDrawsStayInsideOpenInterval) {
  Rng rng(9);
  const GumbelSample s = sample_gumbel(8, rng);
  EXPECT_EQ(s.u.shape(), (Shape{2, 8, 8}));
  for (std::size_t i = 0; i < s.u.size(); ++i) {
    EXPECT_GT(s.u[i], 0.0);
    EXPECT_LT(s.u[i], 1.0);
    EXPECT_DOUBLE_EQ(s.g[i], -std::log(-std::log(s.u[i])));
  }
  // Clamping keeps the extremes finite.
  EXPECT_TRUE(gumbel_from_uniform(Tensor({2}, {0.0, 1.0})).all_finite());
}

TEST(Gumbel, SampleMeanNearEulerGamma) {
  Rng rng(2);
  double acc = 0;
  std::size_t count = 0;
  for (int k = 0; k < 100; ++k) {
    const GumbelSample s = sample_gumbel(50, rng);
    for (double v : s.g.values()) acc += v;
    count += s.g.size();
  }
  EXPECT_NEAR(acc / static_cast<double>(count), 0.5772156649, 0.01);
}

TEST(GumbelSoftmax, SymmetricLatentGivesHalf) {
  diff::Tape tape;
  const Tensor g({2, 3, 3}, 0.7);
  const Tensor p = gumbel_softmax(tape.constant(Tensor({2, 3, 3}, 0.0)), g).value();
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(GumbelSoftmax, SaturatesTowardDominantClass) {
  diff::Tape tape;
  Tensor logits({2, 2, 2}, 0.0);
  for (std::size_t i = 4; i < 8; ++i) logits[i] = 50.0;
  Rng rng(4);
  const Tensor p = gumbel_softmax(tape.constant(logits), sample_gumbel(2, rng).g).value();
  for (double v : p.values()) EXPECT_GT(v, 1.0 - 1e-12);
}

TEST(GumbelSoftmax, ClassesSumToOne) {
  Rng rng(6);
  for (int k = 0; k < 50; ++k) {
    diff::Tape tape;
    const PatternLatent z = PatternLatent::random(5, rng, 3.0);
    const Tensor y = gumbel_softmax_classes(tape.constant(z.logits()), sample_gumbel(5, rng).g, 0.1).value();
    for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(y[i] + y[25 + i], 1.0, 1e-12);
  }
}

// With gap d = z1 - z0 and L = g1 - g0 ~ Logistic(0, 1), max(y) > 0.999 at
// temperature tau exactly when |d + L| > tau * log(999).
TEST(GumbelSoftmax, LowTemperatureSharpnessMatchesLogisticForm) {
  const double tau = 0.01, c = tau * std::log(999.0);
  auto sigma = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  Rng rng(9);
  const std::size_t n = 20, draws = 2000;
  for (double gap : {0.0, 1.0, 3.0, 6.0}) {
    Tensor logits({2, n, n}, 0.0);
    for (std::size_t i = n * n; i < 2 * n * n; ++i) logits[i] = gap;
    std::size_t sharp = 0;
    for (std::size_t k = 0; k < draws; ++k) {
      diff::Tape tape;
      const Tensor y = gumbel_softmax_classes(tape.constant(logits), sample_gumbel(n, rng).g, tau).value();
      for (std::size_t i = 0; i < n * n; ++i) sharp += std::max(y[i], y[n * n + i]) > 0.999;
    }
    const double expected = 1.0 - (sigma(c - gap) - sigma(-c - gap));
    const double total = static_cast<double>(draws * n * n);
    const double sd = std::sqrt(expected * (1 - expected) / total);
    EXPECT_NEAR(static_cast<double>(sharp) / total, expected, 4 * sd + 1e-12) << "gap " << gap;
  }
}

TEST(GumbelSoftmax, TemperaturesAgreeAfterBinarizing) {
  Rng rng(10);
  const std::size_t n = 20;
  std::size_t agree = 0, total = 0;
  for (int k = 0; k < 200; ++k) {
    const PatternLatent z = PatternLatent::random(n, rng, 2.0);
    const Tensor g = sample_gumbel(n, rng).g;
    diff::Tape tape;
    const Tensor a = binarize(gumbel_softmax(tape.constant(z.logits()), g, 0.1).value());
    const Tensor b = binarize(gumbel_softmax(tape.constant(z.logits()), g, 0.01).value());
    for (std::size_t i = 0; i < a.size(); ++i) agree += a[i] == b[i];
    total += a.size();
  }
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(total), 0.95);
}

TEST(GumbelSoftmax, RejectsBadTemperatureAndShape) {
  diff::Tape tape;
  diff::Var z = tape.constant(Tensor({2, 2, 2}, 0.0));
  EXPECT_THROW(gumbel_softmax(z, Tensor({2, 2, 2}, 0.0), 0.0), std::invalid_argument);
  EXPECT_THROW(gumbel_softmax(z, Tensor({2, 3, 3}, 0.0)), ShapeError);
}

TEST(Latent, ProbabilitiesNormalized) {
  Rng rng(8);
  const PatternLatent z = PatternLatent::random(6, rng, 5.0);
  const Tensor p = z.probabilities();
  for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(p[i] + p[36 + i], 1.0, 1e-12);
  EXPECT_THROW(PatternLatent(Tensor({2, 2, 3})), ShapeError);
  EXPECT_THROW(PatternLatent(Tensor({2, 1, 1}, {0.0, std::nan("")})), std::invalid_argument);
}

TEST(Binarize, ThresholdAtHalf) {
  const Tensor h = binarize(Tensor({3}, {0.5, 0.4999, 0.9}));
  EXPECT_EQ(h, Tensor({3}, {1.0, 0.0, 1.0}));
  const Tensor hard = checkerboard(4);
  EXPECT_EQ(binarize(hard), hard);
  EXPECT_EQ(binarize(Patch(hard, PatchMode::soft)).mode(), PatchMode::hard);
}

TEST(Patch, ModeInvariants) {
  EXPECT_THROW(Patch(Tensor({2, 2}, 0.5), PatchMode::hard), std::invalid_argument);
  EXPECT_THROW(Patch(Tensor({2, 2}, 1.5), PatchMode::soft), std::invalid_argument);
  EXPECT_THROW(Patch(Tensor({4}, 0.0), PatchMode::soft), ShapeError);
  EXPECT_DOUBLE_EQ(Patch(checkerboard(4), PatchMode::hard).black_ratio(), 0.5);
}

TEST(Tile, Examples) {
  const Tensor basic = checkerboard(2);
  EXPECT_EQ(tile(basic, 1), basic);
  EXPECT_EQ(tile(basic, 2), checkerboard(4));
  Rng rng(1);
  EXPECT_EQ(tile(fixtures::random_tensor(rng, {20, 20}, 0, 1), 5).shape(), (Shape{100, 100}));
  EXPECT_THROW(tile(basic, 0), std::invalid_argument);
}

TEST(Tile, GradientSumsOverCopies) {
  diff::Tape tape;
  diff::Var x = tape.leaf(Tensor({2, 2}, 0.3));
  const Tensor g = tape.backward(diff::sum(tile(x, 3)))[x];
  for (double v : g.values()) EXPECT_DOUBLE_EQ(v, 9.0);
}

TEST(BlackRatio, Examples) {
  diff::Tape tape;
  auto loss_for = [&](const Tensor& pi0) {
    // logits chosen so softmax reproduces pi0 exactly up to rounding
    Tensor logits({2, pi0.dim(0), pi0.dim(1)});
    const std::size_t nn = pi0.size();
    for (std::size_t i = 0; i < nn; ++i) {
      logits[i] = pi0[i] == 0.0 ? -800.0 : std::log(pi0[i]);
      logits[nn + i] = pi0[i] == 1.0 ? -800.0 : std::log(1.0 - pi0[i]);
    }
    return black_ratio_loss(tape.constant(logits)).value().item();
  };
  EXPECT_NEAR(loss_for(Tensor({3, 3}, 1.0)), 1.0, 1e-12);
  EXPECT_NEAR(loss_for(checkerboard(4)), 0.5, 1e-12);
  EXPECT_NEAR(loss_for(Tensor({5, 5}, 0.473)), 0.473, 1e-12);
}

TEST(HardPatch, ArgmaxOfLogits) {
  Tensor logits({2, 1, 3}, {1.0, 0.0, 0.0, 0.0, 1.0, 0.0});
  EXPECT_THROW(PatternLatent{logits}, ShapeError);
  Tensor sq({2, 2, 2}, {1, 0, 0, -1, 0, 1, 0, 0});
  const Patch p = hard_patch(PatternLatent(sq));
  EXPECT_EQ(p.grid(), Tensor({2, 2}, {0, 1, 1, 1}));
  EXPECT_EQ(p.mode(), PatchMode::hard);
}

TEST(Baselines, BlankAndRandom) {
  EXPECT_DOUBLE_EQ(blank_patch(20).black_ratio(), 1.0);
  Rng a(3), b(3);
  const Patch r = random_hard_patch(20, a);
  EXPECT_EQ(r.grid(), random_hard_patch(20, b).grid());
  EXPECT_NEAR(r.black_ratio(), 0.5, 0.05);
  Rng c(5);
  const double v = random_hard_patch(1, c).grid()[0];
  EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST(Persistence, PatchPngRoundTrip) {
  const fs::path dir = temp_dir("pattern_png");
  Rng rng(12);
  const Patch hard = random_hard_patch(7, rng);
  write_patch_png(dir / "hard.png", hard);
  const Patch back = read_patch_png(dir / "hard.png");
  EXPECT_EQ(back.mode(), PatchMode::hard);
  EXPECT_EQ(back.grid(), hard.grid());
  EXPECT_THROW(read_patch_png(dir / "missing.png"), io::FormatError);
}

TEST(Persistence, LatentRoundTripIsBitExact) {
  const fs::path dir = temp_dir("pattern_latent");
  Rng rng(13);
  const PatternLatent z = PatternLatent::random(9, rng, 2.0);
  write_latent(dir / "z.bin", z, 0.1);
  const LoadedLatent back = read_latent(dir / "z.bin");
  EXPECT_EQ(back.latent, z);
  EXPECT_DOUBLE_EQ(back.tau, 0.1);
  std::ofstream(dir / "bad.bin") << "NOT-A-LATENT\n";
  EXPECT_THROW(read_latent(dir / "bad.bin"), io::FormatError);
}
