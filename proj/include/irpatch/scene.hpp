#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "irpatch/io.hpp"
#include "irpatch/rng.hpp"
#include "irpatch/tensor.hpp"

// Synthetic grayscale "thermal" scenes: cool smooth backgrounds with warm
// upright persons, plus dataset persistence.
namespace irpatch::scene {

/// Axis-aligned person box in continuous pixel coordinates; pixel (r, c)
/// covers [c, c+1) x [r, r+1).
struct Box {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct Scene {
  std::size_t id = 0;
  Tensor image;  // [H, W] in [0, 1]
  std::vector<Box> boxes;
  /// Fewer persons were placed than requested.
  bool shortfall = false;

  friend bool operator==(const Scene& a, const Scene& b) {
    return a.id == b.id && a.image == b.image && a.boxes == b.boxes;
  }
};

struct SceneConfig {
  std::size_t size = 128;
  std::size_t persons_min = 1;
  std::size_t persons_max = 3;
  double background_lo = 0.1, background_hi = 0.4;
  double body_lo = 0.7, body_hi = 0.95;
  double height_lo = 32, height_hi = 72;
  double max_person_iou = 0.1;
  std::size_t max_attempts = 100;

  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SceneConfig, size, persons_min, persons_max, background_lo, background_hi, body_lo,
                                   body_hi, height_lo, height_hi, max_person_iou, max_attempts)

/// Box invariants: ordered corners, inside the image, at least 4 wide and 8
/// tall, taller than wide. Returns an empty string when valid.
inline std::string box_violation(const Box& b, std::size_t image_h, std::size_t image_w) {
  if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max)) return "corners not ordered";
  if (b.x_min < 0 || b.y_min < 0 || b.x_max > static_cast<double>(image_w) || b.y_max > static_cast<double>(image_h)) {
    return "box outside image";
  }
  if (b.width() < 4 || b.height() < 8) return "box too small";
  if (!(b.height() > b.width())) return "box not taller than wide";
  return {};
}

namespace detail {

inline double smoothstep_alpha(double signed_dist) { return std::clamp(0.5 - signed_dist, 0.0, 1.0); }

// Low-frequency field: a coarse random lattice upsampled bilinearly.
inline Tensor smooth_noise(std::size_t size, double amplitude, Rng& rng) {
  constexpr std::size_t kLattice = 5;
  double lattice[kLattice][kLattice];
  for (auto& row : lattice) {
    for (double& v : row) v = uniform(rng, -amplitude, amplitude);
  }
  Tensor field({size, size});
  const double step = static_cast<double>(size - 1) / (kLattice - 1);
  for (std::size_t r = 0; r < size; ++r) {
    const double fy = static_cast<double>(r) / step;
    const auto iy = std::min<std::size_t>(static_cast<std::size_t>(fy), kLattice - 2);
    const double wy = fy - static_cast<double>(iy);
    for (std::size_t c = 0; c < size; ++c) {
      const double fx = static_cast<double>(c) / step;
      const auto ix = std::min<std::size_t>(static_cast<std::size_t>(fx), kLattice - 2);
      const double wx = fx - static_cast<double>(ix);
      field.at(r, c) = (1 - wy) * ((1 - wx) * lattice[iy][ix] + wx * lattice[iy][ix + 1]) +
                       wy * ((1 - wx) * lattice[iy + 1][ix] + wx * lattice[iy + 1][ix + 1]);
    }
  }
  return field;
}

struct Person {
  Box box;
  double intensity;
};

// Head circle on top of an elliptical torso, both tight to the box.
inline void render_person(Tensor& image, const Person& p) {
  const Box& b = p.box;
  const double h = b.height(), cx = b.center_x();
  const double head_r = 0.13 * h;
  const double head_cy = b.y_min + head_r;
  const double torso_top = b.y_min + 1.7 * head_r;
  const double rx = 0.5 * b.width();
  const double ry = 0.5 * (b.y_max - torso_top);
  const double torso_cy = torso_top + ry;
  const std::size_t H = image.dim(0), W = image.dim(1);
  const auto r0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.y_min) - 1));
  const auto r1 = std::min(H, static_cast<std::size_t>(std::ceil(b.y_max) + 1));
  const auto c0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.x_min) - 1));
  const auto c1 = std::min(W, static_cast<std::size_t>(std::ceil(b.x_max) + 1));
  for (std::size_t r = r0; r < r1; ++r) {
    const double y = static_cast<double>(r) + 0.5;
    for (std::size_t c = c0; c < c1; ++c) {
      const double x = static_cast<double>(c) + 0.5;
      const double head_sd = std::hypot(x - cx, y - head_cy) - head_r;
      const double e = std::hypot((x - cx) / rx, (y - torso_cy) / ry);
      const double torso_sd = (e - 1.0) * std::min(rx, ry);
      const double alpha = std::max(smoothstep_alpha(head_sd), smoothstep_alpha(torso_sd));
      if (alpha <= 0) continue;
      const double body = p.intensity - 0.06 * (y - b.y_min) / h;
      image.at(r, c) = (1 - alpha) * image.at(r, c) + alpha * body;
    }
  }
}

}  // namespace detail

/// One scene from its own generator. Pixel values are quantized to the 8-bit
/// grid so that persistence is lossless.
inline Scene generate_scene(Rng& rng, const SceneConfig& cfg, std::size_t id = 0) {
  const std::size_t S = cfg.size;
  Scene scene;
  scene.id = id;
  const double base = uniform(rng, cfg.background_lo, cfg.background_hi);
  scene.image = detail::smooth_noise(S, 0.04, rng);
  for (double& v : scene.image.values()) v += base;

  const int structures = uniform_int(rng, 0, 3);
  for (int k = 0; k < structures; ++k) {
    const auto w = static_cast<std::size_t>(uniform_int(rng, 8, static_cast<int>(S / 3)));
    const auto h = static_cast<std::size_t>(uniform_int(rng, 8, static_cast<int>(S / 3)));
    const auto x0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(S - w)));
    const auto y0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(S - h)));
    const double drop = uniform(rng, 0.03, 0.08);
    for (std::size_t r = y0; r < y0 + h; ++r) {
      for (std::size_t c = x0; c < x0 + w; ++c) scene.image.at(r, c) -= drop;
    }
  }

  const auto wanted = static_cast<std::size_t>(
      uniform_int(rng, static_cast<int>(cfg.persons_min), static_cast<int>(cfg.persons_max)));
  std::vector<detail::Person> persons;
  for (std::size_t n = 0; n < wanted; ++n) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < cfg.max_attempts && !placed; ++attempt) {
      const double h = uniform(rng, cfg.height_lo, std::min(cfg.height_hi, static_cast<double>(S)));
      const double w = h * uniform(rng, 0.35, 0.45);
      const double x0 = uniform(rng, 0.0, static_cast<double>(S) - w);
      const double y0 = uniform(rng, 0.0, static_cast<double>(S) - h);
      const Box box{x0, y0, x0 + w, y0 + h};
      const bool clear = std::all_of(persons.begin(), persons.end(),
                                     [&](const detail::Person& p) { return iou(p.box, box) <= cfg.max_person_iou; });
      if (clear) {
        persons.push_back({box, uniform(rng, cfg.body_lo, cfg.body_hi)});
        placed = true;
      }
    }
    if (!placed) scene.shortfall = true;
  }
  for (const auto& p : persons) {
    detail::render_person(scene.image, p);
    scene.boxes.push_back(p.box);
  }
  for (double& v : scene.image.values()) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return scene;
}

struct Dataset {
  std::uint64_t seed = 0;
  SceneConfig config;
  std::vector<Scene> scenes;
  std::vector<std::size_t> train;  // indices into scenes
  std::vector<std::size_t> test;

  std::vector<const Scene*> select(const std::vector<std::size_t>& idx) const {
    std::vector<const Scene*> out;
    for (std::size_t i : idx) out.push_back(&scenes.at(i));
    return out;
  }
};

/// Deterministic train/test partition of `count` scene indices.
inline void split_dataset(Dataset& ds, double train_fraction = 0.8) {
  std::vector<std::size_t> order(ds.scenes.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_stream(ds.seed, "split");
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(order.size())));
  ds.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(ds.train.begin(), ds.train.end());
  std::sort(ds.test.begin(), ds.test.end());
}

inline Dataset generate_dataset(std::size_t count, std::uint64_t seed, const SceneConfig& cfg = {}) {
  Dataset ds;
  ds.seed = seed;
  ds.config = cfg;
  ds.scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_stream(seed, "scene", i);
    ds.scenes.push_back(generate_scene(rng, cfg, i));
  }
  split_dataset(ds);
  return ds;
}

// ---- persistence -----------------------------------------------------------
//   images/{id}.pgm     P5 8-bit
//   annotations.jsonl   {"id": .., "boxes": [[x_min, y_min, x_max, y_max], ..]}
//   manifest.json       seed, config echo, split lists

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  auto ann = io::open_out(dir / "annotations.jsonl", false);
  std::vector<std::size_t> shortfall;
  for (const Scene& s : ds.scenes) {
    io::write_pgm(dir / "images" / (std::to_string(s.id) + ".pgm"), s.image);
    nlohmann::json boxes = nlohmann::json::array();
    for (const Box& b : s.boxes) boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
    ann << nlohmann::json{{"id", s.id}, {"boxes", boxes}}.dump() << '\n';
    if (s.shortfall) shortfall.push_back(s.id);
  }
  auto ids = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> out;
    for (std::size_t i : idx) out.push_back(ds.scenes[i].id);
    return out;
  };
  nlohmann::json manifest{{"format", "irpatch-dataset/1"},
                          {"seed", ds.seed},
                          {"count", ds.scenes.size()},
                          {"config", ds.config},
                          {"split", {{"train", ids(ds.train)}, {"test", ids(ds.test)}}},
                          {"shortfall", shortfall}};
  io::open_out(dir / "manifest.json", false) << manifest.dump(2) << '\n';
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = dir / "manifest.json";
  const fs::path ann_path = dir / "annotations.jsonl";
  std::ifstream mf(manifest_path);
  if (!mf) throw io::FormatError(manifest_path.string() + ": missing");
  Dataset ds;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    ds.config = manifest.at("config").get<SceneConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw io::FormatError(manifest_path.string() + ": " + e.what());
  }

  std::ifstream af(ann_path);
  if (!af) throw io::FormatError(ann_path.string() + ": missing");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(af, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = ann_path.string() + ":" + std::to_string(line_no);
    Scene s;
    try {
      const auto rec = nlohmann::json::parse(line);
      s.id = rec.at("id").get<std::size_t>();
      for (const auto& b : rec.at("boxes")) {
        if (b.size() != 4) throw io::FormatError(where + ": box needs 4 coordinates");
        s.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw io::FormatError(where + ": " + e.what());
    }
    const fs::path img = dir / "images" / (std::to_string(s.id) + ".pgm");
    s.image = io::read_pgm(img);
    for (const Box& b : s.boxes) {
      const std::string why = box_violation(b, s.image.dim(0), s.image.dim(1));
      if (!why.empty()) throw io::FormatError(where + ": invalid box (" + why + ")");
    }
    ds.scenes.push_back(std::move(s));
  }

  auto index_of = [&](std::size_t id) -> std::size_t {
    for (std::size_t i = 0; i < ds.scenes.size(); ++i) {
      if (ds.scenes[i].id == id) return i;
    }
    throw io::FormatError(manifest_path.string() + ": split references unknown id " + std::to_string(id));
  };
  try {
    for (std::size_t id : manifest.at("split").at("train").get<std::vector<std::size_t>>()) ds.train.push_back(index_of(id));
    for (std::size_t id : manifest.at("split").at("test").get<std::vector<std::size_t>>()) ds.test.push_back(index_of(id));
    for (std::size_t id : manifest.value("shortfall", std::vector<std::size_t>{})) ds.scenes[index_of(id)].shortfall = true;
  } catch (const nlohmann::json::exception& e) {
    throw io::FormatError(manifest_path.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace irpatch::scene
