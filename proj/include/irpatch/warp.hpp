#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "irpatch/ops.hpp"
#include "irpatch/rng.hpp"
#include "irpatch/tensor.hpp"

// Geometric and photometric transforms applied to the tiled pattern before it
// is composited: random crop, thin-plate-spline deformation, and the EOT
// augmentation chain. All are differentiable in the patch pixels.
namespace irpatch::warp {

struct Point {
  double row = 0;
  double col = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

// ---- random crop -----------------------------------------------------------

struct CropSpec {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t side = 0;
};

struct SizeRange {
  std::size_t lo = 10;
  std::size_t hi = 30;
};

inline diff::Var crop(const diff::Var& grid, const CropSpec& spec) {
  const Shape& s = grid.value().shape();
  if (s.size() != 2 || spec.side == 0 || spec.row + spec.side > s[0] || spec.col + spec.side > s[1]) {
    throw std::invalid_argument("crop: window (" + std::to_string(spec.row) + ", " + std::to_string(spec.col) + ") side " +
                                std::to_string(spec.side) + " outside " + shape_str(s));
  }
  std::vector<std::ptrdiff_t> idx(spec.side * spec.side);
  for (std::size_t i = 0; i < spec.side; ++i) {
    for (std::size_t j = 0; j < spec.side; ++j) {
      idx[i * spec.side + j] = static_cast<std::ptrdiff_t>((spec.row + i) * s[1] + spec.col + j);
    }
  }
  return diff::gather(grid, std::move(idx), {spec.side, spec.side});
}

inline CropSpec sample_crop(std::size_t rows, std::size_t cols, SizeRange range, Rng& rng) {
  if (range.lo < 1 || range.lo > range.hi || range.hi > std::min(rows, cols)) {
    throw std::invalid_argument("random_crop: size range [" + std::to_string(range.lo) + ", " + std::to_string(range.hi) +
                                "] does not fit a " + std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  CropSpec spec;
  spec.side = static_cast<std::size_t>(uniform_int(rng, static_cast<int>(range.lo), static_cast<int>(range.hi)));
  spec.row = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(rows - spec.side)));
  spec.col = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(cols - spec.side)));
  return spec;
}

inline std::pair<diff::Var, CropSpec> random_crop(const diff::Var& tiled, Rng& rng, SizeRange range = {}) {
  const Shape& s = tiled.value().shape();
  const CropSpec spec = sample_crop(s.at(0), s.at(1), range, rng);
  return {crop(tiled, spec), spec};
}

// ---- thin plate spline -----------------------------------------------------

inline double tps_kernel(double r2) { return r2 > 0.0 ? r2 * std::log(r2) : 0.0; }

/// Planar map f(p) = A [1, row, col]^T + sum_k w_k U(|p - c_k|) with
/// U(r) = r^2 log r^2.
struct TpsWarpField {
  std::vector<Point> centers;
  /// Rows: output row / col; columns: constant, row, col.
  Eigen::Matrix<double, 2, 3> affine = Eigen::Matrix<double, 2, 3>::Zero();
  /// K x 2 kernel weights (row, col outputs).
  Eigen::MatrixX2d weights;
  double mu = 0.0;

  Point operator()(Point p) const {
    double r = affine(0, 0) + affine(0, 1) * p.row + affine(0, 2) * p.col;
    double c = affine(1, 0) + affine(1, 1) * p.row + affine(1, 2) * p.col;
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const double dr = p.row - centers[k].row, dc = p.col - centers[k].col;
      const double u = tps_kernel(dr * dr + dc * dc);
      r += weights(static_cast<Eigen::Index>(k), 0) * u;
      c += weights(static_cast<Eigen::Index>(k), 1) * u;
    }
    return {r, c};
  }
};

/// Solves the regularized TPS system mapping src[k] to dst[k].
inline TpsWarpField tps_fit(const std::vector<Point>& src, const std::vector<Point>& dst, double mu = 0.0) {
  const std::size_t K = src.size();
  if (K < 3 || dst.size() != K) {
    throw std::invalid_argument("tps_fit: need >= 3 matching point pairs, got " + std::to_string(K) + " and " +
                                std::to_string(dst.size()));
  }
  if (mu < 0) throw std::invalid_argument("tps_fit: regularization must be non-negative");
  const auto n = static_cast<Eigen::Index>(K);
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n + 3, n + 3);
  Eigen::MatrixX2d rhs = Eigen::MatrixX2d::Zero(n + 3, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Point& pi = src[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < n; ++j) {
      const Point& pj = src[static_cast<std::size_t>(j)];
      const double dr = pi.row - pj.row, dc = pi.col - pj.col;
      L(i, j) = tps_kernel(dr * dr + dc * dc);
    }
    L(i, i) += mu;
    L(i, n) = L(n, i) = 1.0;
    L(i, n + 1) = L(n + 1, i) = pi.row;
    L(i, n + 2) = L(n + 2, i) = pi.col;
    rhs(i, 0) = dst[static_cast<std::size_t>(i)].row;
    rhs(i, 1) = dst[static_cast<std::size_t>(i)].col;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(L);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible()) {
    throw std::invalid_argument("tps_fit: singular system (rank " + std::to_string(lu.rank()) + " of " +
                                std::to_string(K + 3) + "); control points are duplicated or collinear");
  }
  const Eigen::MatrixX2d sol = lu.solve(rhs);
  TpsWarpField field;
  field.centers = src;
  field.mu = mu;
  field.weights = sol.topRows(n);
  for (int out = 0; out < 2; ++out) {
    for (int a = 0; a < 3; ++a) field.affine(out, a) = sol(n + a, out);
  }
  return field;
}

/// Uniform g x g control grid spanning [0, side-1]^2.
inline std::vector<Point> control_grid(std::size_t side, std::size_t per_axis) {
  if (per_axis < 2) throw std::invalid_argument("control_grid: need at least 2 points per axis");
  std::vector<Point> pts;
  const double span = static_cast<double>(side) - 1.0;
  for (std::size_t i = 0; i < per_axis; ++i) {
    for (std::size_t j = 0; j < per_axis; ++j) {
      pts.push_back({span * static_cast<double>(i) / static_cast<double>(per_axis - 1),
                     span * static_cast<double>(j) / static_cast<double>(per_axis - 1)});
    }
  }
  return pts;
}

/// Control grid side for K points; K must be a perfect square >= 4.
inline std::size_t grid_per_axis(std::size_t k) {
  const auto g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(k))));
  if (g < 2 || g * g != k) throw std::invalid_argument("tps_k must be a perfect square >= 4, got " + std::to_string(k));
  return g;
}

/// Gaussian jitter of each coordinate, clamped to the patch bounds widened by
/// 10% on every side (lo..hi is the unwidened coordinate span).
inline std::vector<Point> sample_tps_targets(const std::vector<Point>& src, double sigma, Rng& rng, double lo,
                                             double hi) {
  if (sigma < 0) throw std::invalid_argument("sample_tps_targets: sigma must be non-negative");
  const double margin = 0.1 * (hi - lo);
  std::vector<Point> dst;
  dst.reserve(src.size());
  for (const Point& p : src) {
    const double dr = gaussian(rng, sigma);
    const double dc = gaussian(rng, sigma);
    dst.push_back({std::clamp(p.row + dr, lo - margin, hi + margin), std::clamp(p.col + dc, lo - margin, hi + margin)});
  }
  return dst;
}

/// Sampling coordinates [H, W, 2] obtained by evaluating `field` at every
/// output pixel.
inline Tensor sampling_grid(const TpsWarpField& field, std::size_t rows, std::size_t cols) {
  Tensor coords({rows, cols, 2});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const Point p = field({static_cast<double>(r), static_cast<double>(c)});
      coords[2 * (r * cols + c)] = p.row;
      coords[2 * (r * cols + c) + 1] = p.col;
    }
  }
  return coords;
}

/// Backward-mapped resampling: out(q) = patch(field(q)); samples outside the
/// patch read as 0.
inline diff::Var tps_warp(const diff::Var& patch, const TpsWarpField& field) {
  const Shape& s = patch.value().shape();
  Tensor coords = sampling_grid(field, s.at(0), s.at(1));
  return diff::bilinear_sample(patch, patch.tape->constant(std::move(coords)));
}

/// Random cloth deformation for a square patch: the control grid is jittered
/// and the field that pulls each jittered point back to its grid position is
/// returned, so tps_warp moves grid content onto the jittered targets.
inline TpsWarpField random_tps_field(std::size_t side, std::size_t k, double sigma_fraction, double mu, Rng& rng) {
  const std::vector<Point> grid = control_grid(side, grid_per_axis(k));
  const double span = static_cast<double>(side) - 1.0;
  const std::vector<Point> targets = sample_tps_targets(grid, sigma_fraction * static_cast<double>(side), rng, 0.0, span);
  return tps_fit(targets, grid, mu);
}

// ---- expectation over transformation ----------------------------------------

struct Interval {
  double lo = 0;
  double hi = 0;
};

struct EotRanges {
  double rot_max_deg = 20.0;
  Interval scale{0.9, 1.1};
  Interval contrast{0.8, 1.2};
  Interval brightness{-0.1, 0.1};
  double noise_std_max = 0.02;
};

/// One draw from the transformation set. Translation is a position within
/// the free room of the target box, as fractions in [0, 1]; the compositor
/// consumes it.
struct EotParams {
  double translate_row = 0.5;
  double translate_col = 0.5;
  double rotation = 0.0;
  double scale = 1.0;
  double brightness = 0.0;
  double contrast = 1.0;
  double noise_std = 0.0;

  static EotParams identity() { return {}; }
};

inline EotParams sample_eot_params(const EotRanges& r, Rng& rng) {
  EotParams p;
  p.translate_row = uniform(rng, 0.0, 1.0);
  p.translate_col = uniform(rng, 0.0, 1.0);
  const double rot = r.rot_max_deg * std::numbers::pi / 180.0;
  p.rotation = uniform(rng, -rot, rot);
  p.scale = uniform(rng, r.scale.lo, r.scale.hi);
  p.contrast = uniform(rng, r.contrast.lo, r.contrast.hi);
  p.brightness = uniform(rng, r.brightness.lo, r.brightness.hi);
  p.noise_std = uniform(rng, 0.0, r.noise_std_max);
  return p;
}

/// Coordinates realizing rotation and scaling about the patch center.
inline Tensor rotation_grid(std::size_t side, double rotation, double scale) {
  if (!(scale > 0)) throw std::invalid_argument("eot: scale must be positive, got " + std::to_string(scale));
  const double c = (static_cast<double>(side) - 1.0) / 2.0;
  const double cs = std::cos(rotation) / scale, sn = std::sin(rotation) / scale;
  Tensor coords({side, side, 2});
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t q = 0; q < side; ++q) {
      const double dr = static_cast<double>(r) - c, dq = static_cast<double>(q) - c;
      coords[2 * (r * side + q)] = c + cs * dr - sn * dq;
      coords[2 * (r * side + q) + 1] = c + sn * dr + cs * dq;
    }
  }
  return coords;
}

/// Fraction of each output pixel covered by the rotated and scaled patch.
inline Tensor eot_support(std::size_t side, const EotParams& p) {
  diff::Tape tape;
  diff::Var ones = tape.constant(Tensor({side, side}, 1.0));
  return diff::bilinear_sample(ones, tape.constant(rotation_grid(side, p.rotation, p.scale))).value();
}

/// rotation+scale -> contrast about 0.5 -> brightness -> additive noise ->
/// clamp to [0, 1]. Noise is drawn from `rng`.
inline diff::Var eot_transform(const diff::Var& patch, const EotParams& p, Rng& rng) {
  const Shape& s = patch.value().shape();
  if (s.size() != 2 || s[0] != s[1]) throw ShapeError("eot: expected a square patch, got " + shape_str(s));
  const std::size_t side = s[0];
  diff::Tape& tape = *patch.tape;
  diff::Var x = diff::bilinear_sample(patch, tape.constant(rotation_grid(side, p.rotation, p.scale)));
  x = diff::affine(x, p.contrast, 0.5 * (1.0 - p.contrast) + p.brightness);
  Tensor noise({side, side});
  for (double& v : noise.values()) v = gaussian(rng, p.noise_std);
  x = diff::add(x, tape.constant(std::move(noise)));
  return diff::clamp(x, 0.0, 1.0);
}

}  // namespace irpatch::warp
