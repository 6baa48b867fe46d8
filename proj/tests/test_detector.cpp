#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "irpatch/detector.hpp"
#include "support.hpp"

using namespace irpatch;
using namespace irpatch::detector;
namespace fs = std::filesystem;

namespace {

DetectionMap flat_map(std::size_t g, double objectness) {
  DetectionMap m;
  m.objectness = Tensor({g, g}, objectness);
  m.class_score = Tensor({g, g}, 1.0);
  m.offsets = Tensor({4, g, g}, 0.0);
  for (std::size_t i = 2 * g * g; i < 4 * g * g; ++i) m.offsets[i] = std::log(2.0);  // 32x32 boxes
  for (std::size_t i = 0; i < 2 * g * g; ++i) m.offsets[i] = 0.5;                    // centered in the cell
  m.stride = 16;
  m.image_h = m.image_w = 16 * g;
  return m;
}

scene::Dataset tiny_dataset(std::uint64_t seed, std::size_t count = 10) {
  scene::SceneConfig sc;
  sc.size = 64;
  sc.height_lo = 24;
  sc.height_hi = 48;
  return scene::generate_dataset(count, seed, sc);
}

}  // namespace

TEST(Variants, KnownNamesAndStride) {
  for (const std::string name : {"base", "wide", "deep", "slim"}) EXPECT_EQ(variant(name).total_stride(), 16u);
  try {
    variant("huge");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("base"), std::string::npos);
  }
  const Topology t = variant("deep");
  EXPECT_EQ(Topology::parse(t.name, t.descriptor()), t);
}

TEST(Forward, AllZeroWeightsGiveHalf) {
  DetectorWeights w = init_weights(variant("base"), 1);
  for (Tensor* t : w.tensors()) *t = Tensor(t->shape(), 0.0);
  Rng rng(2);
  const DetectionMap m = predict(w, fixtures::random_tensor(rng, {64, 64}, 0, 1));
  EXPECT_EQ(m.grid_h(), 4u);
  for (double v : m.objectness.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Forward, DeterministicAndShapeChecked) {
  const DetectorWeights w = init_weights(variant("base"), 3);
  Rng rng(4);
  const Tensor img = fixtures::random_tensor(rng, {64, 64}, 0, 1);
  EXPECT_EQ(predict(w, img).objectness, predict(w, img).objectness);
  EXPECT_THROW(predict(w, Tensor({60, 64}, 0.5)), ShapeError);
}

TEST(Forward, ShiftBySixteenPixelsShiftsOneCell) {
  const DetectorWeights w = init_weights(variant("base"), 5);
  Rng rng(6);
  const std::size_t S = 128;
  const Tensor a = fixtures::random_tensor(rng, {S, S}, 0, 1);
  Tensor b = fixtures::random_tensor(rng, {S, S}, 0, 1);
  for (std::size_t r = 16; r < S; ++r) {
    for (std::size_t c = 0; c < S; ++c) b.at(r, c) = a.at(r - 16, c);
  }
  const Tensor oa = predict(w, a).objectness, ob = predict(w, b).objectness;
  const std::size_t G = S / 16;
  // Cells whose receptive field stays clear of the borders in both images.
  for (std::size_t r = 1; r + 3 < G; ++r) {
    for (std::size_t c = 1; c + 1 < G; ++c) EXPECT_NEAR(ob.at(r + 1, c), oa.at(r, c), 1e-12) << r << "," << c;
  }
}

TEST(Decode, Examples) {
  EXPECT_TRUE(decode(flat_map(4, 0.5), 0.7).empty());

  DetectionMap one = flat_map(4, 0.01);
  one.objectness.at(1, 2) = 0.99;
  const auto dets = decode(one, 0.5);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_DOUBLE_EQ(dets[0].score, 0.99);

  // Two neighbouring cells predicting nearly the same box.
  DetectionMap two = flat_map(4, 0.01);
  two.objectness.at(1, 1) = 0.9;
  two.objectness.at(1, 2) = 0.8;
  const std::size_t g = 4;
  two.offsets[(0 * g + 1) * g + 2] = -0.5 + 0.05;  // cell (1,2) shifted left onto (1,1)
  const scene::Box b1 = cell_box(two.offsets, 1, 1, 16, 64, 64), b2 = cell_box(two.offsets, 1, 2, 16, 64, 64);
  EXPECT_GE(scene::iou(b1, b2), 0.9);
  const auto kept = decode(two, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_DOUBLE_EQ(kept[0].score, 0.9);

  EXPECT_THROW(decode(two, 0.0), std::invalid_argument);
}

TEST(Decode, IdempotentOnItsOwnOutput) {
  Rng rng(13);
  for (int k = 0; k < 20; ++k) {
    DetectionMap m = flat_map(8, 0.5);
    m.objectness = fixtures::random_tensor(rng, {8, 8}, 0.01, 0.99);
    m.offsets = fixtures::random_tensor(rng, {4, 8, 8}, 0, 1.5);  // boxes of 1 to 4.5 cells overlap often
    const auto dets = decode(m, 0.05);
    ASSERT_FALSE(dets.empty());
    EXPECT_EQ(eval::nms(dets, 0.5), dets);
  }
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  const scene::Dataset ds = tiny_dataset(7);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 11;
  EXPECT_EQ(train(ds, variant("base"), cfg), init_weights(variant("base"), 11));
}

TEST(Train, SameSeedSameWeights) {
  const scene::Dataset ds = tiny_dataset(8);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 4;
  cfg.seed = 3;
  std::vector<TrainLogRow> log;
  const DetectorWeights a = train(ds, variant("slim"), cfg, &log);
  EXPECT_EQ(a, train(ds, variant("slim"), cfg));
  ASSERT_EQ(log.size(), 2u);
  EXPECT_TRUE(std::isfinite(log[0].loss));
  EXPECT_NE(a, init_weights(variant("slim"), 3));
}

TEST(Ensemble, NeedsTwoVariants) {
  const scene::Dataset ds = tiny_dataset(9);
  EXPECT_THROW(make_ensemble(ds, {"base"}, {}), std::invalid_argument);
}

TEST(Persistence, WeightsRoundTripBitExact) {
  const fs::path dir = fs::temp_directory_path() / "irpatch_test_weights";
  fs::create_directories(dir);
  const DetectorWeights w = init_weights(variant("wide"), 12);
  write_weights(dir / "w.bin", w);
  EXPECT_EQ(read_weights(dir / "w.bin"), w);
}

TEST(Persistence, CorruptWeightsRejected) {
  const fs::path dir = fs::temp_directory_path() / "irpatch_test_weights";
  fs::create_directories(dir);
  write_weights(dir / "w.bin", init_weights(variant("base"), 12));
  const auto full = fs::file_size(dir / "w.bin");
  fs::resize_file(dir / "w.bin", full - 8);
  EXPECT_THROW(read_weights(dir / "w.bin"), io::FormatError);
  std::ofstream(dir / "junk.bin") << "hello\n";
  EXPECT_THROW(read_weights(dir / "junk.bin"), io::FormatError);
}
