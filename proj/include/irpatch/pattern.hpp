#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <random>
#include <sstream>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "irpatch/io.hpp"
#include "irpatch/ops.hpp"
#include "irpatch/rng.hpp"
#include "irpatch/tensor.hpp"

// Binary pattern representation: latent class logits, the Gumbel-softmax
// relaxation to a soft patch, hard binarization, tiling and the black-pixel
// budget.
namespace irpatch::pattern {

inline constexpr double kDefaultTau = 0.1;
inline constexpr double kUniformClampEps = 1e-12;
inline constexpr const char* kLatentMagic = "IRPATCH-LATENT/1";

enum class PatchMode { soft, hard };

/// Grayscale grid in [0, 1]. 0 is black (insulated), 1 is white (body heat).
class Patch {
 public:
  Patch(Tensor grid, PatchMode mode) : grid_(std::move(grid)), mode_(mode) {
    if (grid_.rank() != 2) throw ShapeError("patch: expected a 2D grid, got " + shape_str(grid_.shape()));
    for (double v : grid_.values()) {
      const bool ok = mode_ == PatchMode::hard ? (v == 0.0 || v == 1.0) : (v >= 0.0 && v <= 1.0);
      if (!ok) throw std::invalid_argument("patch: value " + std::to_string(v) + " invalid for its mode");
    }
  }

  const Tensor& grid() const noexcept { return grid_; }
  PatchMode mode() const noexcept { return mode_; }
  std::size_t rows() const { return grid_.dim(0); }
  std::size_t cols() const { return grid_.dim(1); }

  /// Fraction of exactly-black pixels.
  double black_ratio() const {
    const auto zeros = std::count(grid_.values().begin(), grid_.values().end(), 0.0);
    return static_cast<double>(zeros) / static_cast<double>(grid_.size());
  }

 private:
  Tensor grid_;
  PatchMode mode_;
};

/// Per-pixel unnormalized log-probabilities, shape [2, N, N]; channel 0 is
/// black and channel 1 white.
class PatternLatent {
 public:
  explicit PatternLatent(Tensor logits) : logits_(std::move(logits)) {
    if (logits_.rank() != 3 || logits_.dim(0) != 2 || logits_.dim(1) != logits_.dim(2)) {
      throw ShapeError("latent: expected [2, N, N] logits, got " + shape_str(logits_.shape()));
    }
    if (!logits_.all_finite()) throw std::invalid_argument("latent: non-finite logit");
  }

  /// Independent logits uniform in [-spread, spread].
  static PatternLatent random(std::size_t n, Rng& rng, double spread = 0.1) {
    if (n == 0) throw std::invalid_argument("latent: N must be at least 1");
    Tensor logits({2, n, n});
    for (double& v : logits.values()) v = uniform(rng, -spread, spread);
    return PatternLatent(std::move(logits));
  }

  std::size_t side() const { return logits_.dim(1); }
  const Tensor& logits() const noexcept { return logits_; }
  Tensor& logits() noexcept { return logits_; }

  /// Normalized class probabilities [2, N, N].
  Tensor probabilities() const {
    Tensor p(logits_.shape());
    const std::size_t nn = side() * side();
    for (std::size_t i = 0; i < nn; ++i) {
      const double a = logits_[i], b = logits_[nn + i];
      const double m = std::max(a, b);
      const double ea = std::exp(a - m), eb = std::exp(b - m);
      p[i] = ea / (ea + eb);
      p[nn + i] = eb / (ea + eb);
    }
    return p;
  }

  friend bool operator==(const PatternLatent&, const PatternLatent&) = default;

 private:
  Tensor logits_;
};

/// Uniform draws and the Gumbel noise g = -log(-log u), both [2, N, N].
struct GumbelSample {
  Tensor u;
  Tensor g;
};

inline Tensor gumbel_from_uniform(const Tensor& u) {
  Tensor g(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double uc = std::clamp(u[i], kUniformClampEps, 1.0 - kUniformClampEps);
    g[i] = -std::log(-std::log(uc));
  }
  return g;
}

inline GumbelSample sample_gumbel(std::size_t n, Rng& rng) {
  Tensor u({2, n, n});
  for (double& v : u.values()) v = std::clamp(uniform(rng, 0.0, 1.0), kUniformClampEps, 1.0 - kUniformClampEps);
  Tensor g = gumbel_from_uniform(u);
  return {std::move(u), std::move(g)};
}

/// Relaxed one-hot y = softmax((g + log pi) / tau) over the class axis, [2, N, N].
/// log pi differs from the logits by a per-pixel constant that the softmax
/// cancels, so the logits are used directly.
inline diff::Var gumbel_softmax_classes(const diff::Var& logits, const Tensor& gumbel, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: temperature must be positive");
  if (gumbel.shape() != logits.shape()) {
    throw ShapeError("gumbel_softmax: noise " + shape_str(gumbel.shape()) + " vs logits " + shape_str(logits.shape()));
  }
  diff::Var noise = logits.tape->constant(gumbel);
  return diff::softmax(diff::scale(diff::add(logits, noise), 1.0 / tau), 0);
}

/// Soft patch p~ = y_1 (probability mass on white), [N, N].
inline diff::Var gumbel_softmax(const diff::Var& logits, const Tensor& gumbel, double tau = kDefaultTau) {
  const std::size_t n = logits.value().dim(1);
  diff::Var y = gumbel_softmax_classes(logits, gumbel, tau);
  return diff::reshape(diff::slice(y, 0, 1, 2), {n, n});
}

/// Hard threshold at 0.5: p = 1 where p~ >= 0.5.
inline Tensor binarize(const Tensor& soft) {
  Tensor hard(soft.shape());
  for (std::size_t i = 0; i < soft.size(); ++i) hard[i] = soft[i] >= 0.5 ? 1.0 : 0.0;
  return hard;
}

inline Patch binarize(const Patch& soft) { return Patch(binarize(soft.grid()), PatchMode::hard); }

/// Hard patch obtained from the latent without noise (argmax class).
inline Patch hard_patch(const PatternLatent& latent) {
  const std::size_t n = latent.side();
  Tensor grid({n, n});
  const Tensor& l = latent.logits();
  for (std::size_t i = 0; i < n * n; ++i) grid[i] = l[n * n + i] >= l[i] ? 1.0 : 0.0;
  return Patch(std::move(grid), PatchMode::hard);
}

/// Source indices for periodic expansion of an [n, n] grid by `reps`.
inline std::vector<std::ptrdiff_t> tile_indices(std::size_t rows, std::size_t cols, std::size_t reps) {
  const std::size_t R = rows * reps, C = cols * reps;
  std::vector<std::ptrdiff_t> idx(R * C);
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) idx[i * C + j] = static_cast<std::ptrdiff_t>((i % rows) * cols + (j % cols));
  }
  return idx;
}

inline diff::Var tile(const diff::Var& basic, std::size_t reps) {
  if (reps == 0) throw std::invalid_argument("tile: reps must be at least 1");
  const Shape& s = basic.value().shape();
  if (s.size() != 2) throw ShapeError("tile: expected 2D grid, got " + shape_str(s));
  return diff::gather(basic, tile_indices(s[0], s[1], reps), {s[0] * reps, s[1] * reps});
}

inline Tensor tile(const Tensor& basic, std::size_t reps) {
  diff::Tape tape;
  return tile(tape.constant(basic), reps).value();
}

/// Mean black probability over the grid: sum(pi_0) / N^2.
inline diff::Var black_ratio_loss(const diff::Var& logits) {
  return diff::mean(diff::slice(diff::softmax(logits, 0), 0, 0, 1));
}

inline Patch random_hard_patch(std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("random patch: N must be at least 1");
  Tensor grid({n, n});
  std::bernoulli_distribution coin(0.5);
  for (double& v : grid.values()) v = coin(rng) ? 1.0 : 0.0;
  return Patch(std::move(grid), PatchMode::hard);
}

inline Patch blank_patch(std::size_t n) {
  if (n == 0) throw std::invalid_argument("blank patch: N must be at least 1");
  return Patch(Tensor({n, n}, 0.0), PatchMode::hard);
}

// ---- persistence -----------------------------------------------------------

inline void write_patch_png(const std::filesystem::path& path, const Patch& patch) {
  io::write_png(path, patch.grid());
}

/// Reads an 8-bit PNG. A file holding only 0 and 255 loads as a hard patch.
inline Patch read_patch_png(const std::filesystem::path& path) {
  Tensor grid = io::read_png(path);
  const bool hard = std::all_of(grid.values().begin(), grid.values().end(), [](double v) { return v == 0.0 || v == 1.0; });
  return Patch(std::move(grid), hard ? PatchMode::hard : PatchMode::soft);
}

/// Text header (magic, N, tau) then 2*N*N little-endian doubles in
/// (channel, row, col) order.
inline void write_latent(const std::filesystem::path& path, const PatternLatent& latent, double tau) {
  auto os = io::open_out(path);
  std::ostringstream header;
  header.precision(17);
  header << kLatentMagic << "\nN " << latent.side() << "\ntau " << tau << "\n";
  os << header.str();
  for (double v : latent.logits().values()) io::write_f64_le(os, v);
}

struct LoadedLatent {
  PatternLatent latent;
  double tau;
};

inline LoadedLatent read_latent(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io::FormatError(path.string() + ": cannot open");
  std::string magic, key_n, key_tau;
  std::size_t n = 0;
  double tau = 0;
  std::getline(is, magic);
  if (magic != kLatentMagic) throw io::FormatError(path.string() + ": bad magic '" + magic + "'");
  if (!(is >> key_n >> n >> key_tau >> tau) || key_n != "N" || key_tau != "tau" || n == 0) {
    throw io::FormatError(path.string() + ": malformed header");
  }
  is.get();
  Tensor logits({2, n, n});
  for (double& v : logits.values()) {
    if (!io::read_f64_le(is, v)) throw io::FormatError(path.string() + ": truncated logits");
  }
  return {PatternLatent(std::move(logits)), tau};
}

}  // namespace irpatch::pattern
