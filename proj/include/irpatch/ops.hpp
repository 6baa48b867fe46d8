#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "irpatch/tape.hpp"
#include "irpatch/tensor.hpp"

// Differentiable operations. Every op validates shapes, computes the forward
// value eagerly and records its adjoint on the tape of its inputs.
namespace irpatch::diff {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

[[noreturn]] inline void shape_fail(OpKind kind, const std::string& what) {
  throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

inline Tape& same_tape(OpKind kind, const Var& a, const Var& b) {
  if (a.tape == nullptr || a.tape != b.tape) shape_fail(kind, "operands are on different tapes");
  return *a.tape;
}

// b either matches a exactly or is a single element broadcast over a.
inline bool broadcast_rhs(OpKind kind, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return false;
  if (b.size() == 1) return true;
  shape_fail(kind, "incompatible extents " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

inline void add_to(Tensor* dst, std::size_t i, double v) {
  if (dst) (*dst)[i] += v;
}

template <class Forward, class DaFn, class DbFn>
Var binary(OpKind kind, const Var& a, const Var& b, Forward fwd, DaFn da, DbFn db) {
  Tape& tape = same_tape(kind, a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool bc = broadcast_rhs(kind, av, bv);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[bc ? 0 : i]);
  return tape.record(kind, {a, b}, std::move(out), [bc, da, db](const BackwardArgs& g) {
    const Tensor& x = *g.inputs[0];
    const Tensor& y = *g.inputs[1];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t j = bc ? 0 : i;
      const double up = g.upstream[i];
      add_to(g.grads[0], i, up * da(x[i], y[j]));
      add_to(g.grads[1], j, up * db(x[i], y[j]));
    }
  });
}

template <class Forward, class Deriv>
Var unary(OpKind kind, const Var& a, Forward fwd, Deriv deriv) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return a.tape->record(kind, {a}, std::move(out), [deriv](const BackwardArgs& g) {
    if (!g.grads[0]) return;
    const Tensor& x = *g.inputs[0];
    for (std::size_t i = 0; i < x.size(); ++i) (*g.grads[0])[i] += g.upstream[i] * deriv(x[i], g.output[i]);
  });
}

inline std::size_t checked_axis(OpKind kind, const Tensor& t, std::size_t axis) {
  if (axis >= t.rank()) {
    shape_fail(kind, "axis " + std::to_string(axis) + " out of range for " + shape_str(t.shape()));
  }
  return axis;
}

// outer * extent * inner decomposition around an axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  return detail::binary(
      OpKind::add, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(
      OpKind::sub, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(
      OpKind::mul, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
  for (double v : b.value().values()) {
    if (v == 0.0) throw DomainError("div: zero divisor");
  }
  return detail::binary(
      OpKind::div, a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

inline Var scale(const Var& a, double s) {
  return detail::unary(
      OpKind::scalar_mul, a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

/// a * gain + offset with constant gain and offset.
inline Var affine(const Var& a, double gain, double offset) {
  return detail::unary(
      OpKind::affine, a, [=](double x) { return gain * x + offset; }, [gain](double, double) { return gain; });
}

inline Var leaky_relu(const Var& a, double slope = 0.1) {
  return detail::unary(
      OpKind::leaky_relu, a, [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      OpKind::sigmoid, a, [](double x) { return detail::sigmoid_value(x); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(const Var& a) {
  return detail::unary(
      OpKind::exp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(v));
  }
  return detail::unary(
      OpKind::log, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// Pass-through gradient on [lo, hi], zero outside.
inline Var clamp(const Var& a, double lo, double hi) {
  return detail::unary(
      OpKind::clamp, a, [=](double x) { return std::clamp(x, lo, hi); },
      [=](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

/// Hard threshold: 1 where x >= threshold else 0. Has no derivative; backward
/// through it is reported by Gradients::crossed_nondifferentiable().
inline Var step(const Var& a, double threshold) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] >= threshold ? 1.0 : 0.0;
  return a.tape->record(OpKind::step, {a}, std::move(out), nullptr, /*differentiable=*/false);
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record(OpKind::reduce_sum, {a}, Tensor::scalar(s), [](const BackwardArgs& g) {
    if (!g.grads[0]) return;
    const double up = g.upstream[0];
    for (double& v : g.grads[0]->values()) v += up;
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record(OpKind::reduce_mean, {a}, Tensor::scalar(s / n), [n](const BackwardArgs& g) {
    if (!g.grads[0]) return;
    const double up = g.upstream[0] / n;
    for (double& v : g.grads[0]->values()) v += up;
  });
}

/// Softmax along `axis`, computed with max subtraction.
inline Var softmax(const Var& a, std::size_t axis) {
  const Tensor& av = a.value();
  detail::checked_axis(OpKind::softmax, av, axis);
  const auto sp = detail::split_axis(av.shape(), axis);
  Tensor out(av.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.extent; ++k) m = std::max(m, av[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const double e = std::exp(av[base + k * sp.inner] - m);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.extent; ++k) out[base + k * sp.inner] /= z;
    }
  }
  return a.tape->record(OpKind::softmax, {a}, std::move(out), [sp](const BackwardArgs& g) {
    if (!g.grads[0]) return;
    const Tensor& y = g.output;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.extent * sp.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.extent; ++k) {
          const std::size_t i = base + k * sp.inner;
          dot += g.upstream[i] * y[i];
        }
        for (std::size_t k = 0; k < sp.extent; ++k) {
          const std::size_t i = base + k * sp.inner;
          (*g.grads[0])[i] += y[i] * (g.upstream[i] - dot);
        }
      }
    }
  });
}

/// Maximum along `axis`; the axis is removed from the result shape. The
/// adjoint is routed to the first maximal element.
inline Var max_axis(const Var& a, std::size_t axis) {
  const Tensor& av = a.value();
  detail::checked_axis(OpKind::max_axis, av, axis);
  const auto sp = detail::split_axis(av.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < av.rank(); ++i) {
    if (i != axis) out_shape.push_back(av.dim(i));
  }
  Tensor out(out_shape);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      std::size_t best = base;
      for (std::size_t k = 1; k < sp.extent; ++k) {
        const std::size_t i = base + k * sp.inner;
        if (av[i] > av[best]) best = i;
      }
      out[o * sp.inner + in] = av[best];
      argmax[o * sp.inner + in] = best;
    }
  }
  return a.tape->record(OpKind::max_axis, {a}, std::move(out), [argmax = std::move(argmax)](const BackwardArgs& g) {
    if (!g.grads[0]) return;
    for (std::size_t j = 0; j < argmax.size(); ++j) (*g.grads[0])[argmax[j]] += g.upstream[j];
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->record(OpKind::reshape, {a}, std::move(out), [](const BackwardArgs& g) {
    if (!g.grads[0]) return;
    for (std::size_t i = 0; i < g.upstream.size(); ++i) (*g.grads[0])[i] += g.upstream[i];
  });
}

/// Maximum over every element, as a scalar.
inline Var max_all(const Var& a) { return max_axis(reshape(a, {a.value().size()}), 0); }

/// Half-open range [begin, end) along `axis`.
inline Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  detail::checked_axis(OpKind::slice, av, axis);
  if (begin >= end || end > av.dim(axis)) {
    detail::shape_fail(OpKind::slice, "range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                          ") outside axis of extent " + std::to_string(av.dim(axis)));
  }
  const auto sp = detail::split_axis(av.shape(), axis);
  Shape out_shape = av.shape();
  out_shape[axis] = end - begin;
  Tensor out(out_shape);
  const std::size_t len = end - begin;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(av.data() + (o * sp.extent + begin) * sp.inner, len * sp.inner, out.data() + o * len * sp.inner);
  }
  return a.tape->record(OpKind::slice, {a}, std::move(out), [sp, begin, len](const BackwardArgs& g) {
    if (!g.grads[0]) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      double* dst = g.grads[0]->data() + (o * sp.extent + begin) * sp.inner;
      const double* src = g.upstream.data() + o * len * sp.inner;
      for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) detail::shape_fail(OpKind::concat, "no inputs");
  const Tensor& first = parts.front().value();
  detail::checked_axis(OpKind::concat, first, axis);
  Shape out_shape = first.shape();
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    const Shape& s = p.value().shape();
    if (p.tape != parts.front().tape) detail::shape_fail(OpKind::concat, "operands are on different tapes");
    bool ok = s.size() == first.rank();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first.dim(i);
    if (!ok) {
      detail::shape_fail(OpKind::concat, "extents " + shape_str(s) + " incompatible with " + shape_str(first.shape()) +
                                             " along axis " + std::to_string(axis));
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const auto sp = detail::split_axis(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pv.data() + o * extents[k] * sp.inner, extents[k] * sp.inner,
                  out.data() + (o * sp.extent + offset) * sp.inner);
    }
    offset += extents[k];
  }
  return parts.front().tape->record(OpKind::concat, parts, std::move(out), [sp, extents](const BackwardArgs& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      if (Tensor* dst = g.grads[k]) {
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* src = g.upstream.data() + (o * sp.extent + off) * sp.inner;
          double* d = dst->data() + o * extents[k] * sp.inner;
          for (std::size_t i = 0; i < extents[k] * sp.inner; ++i) d[i] += src[i];
        }
      }
      off += extents[k];
    }
  });
}

/// out[i] = a[index[i]], or 0 where index[i] < 0. Repeated indices accumulate
/// their adjoints, which makes this the carrier for tiling and cropping.
inline Var gather(const Var& a, std::vector<std::ptrdiff_t> index, Shape out_shape) {
  const Tensor& av = a.value();
  if (shape_size(out_shape) != index.size()) {
    detail::shape_fail(OpKind::gather, std::to_string(index.size()) + " indices for output " + shape_str(out_shape));
  }
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= static_cast<std::ptrdiff_t>(av.size())) {
      detail::shape_fail(OpKind::gather, "index " + std::to_string(index[i]) + " outside " + shape_str(av.shape()));
    }
    out[i] = index[i] < 0 ? 0.0 : av[static_cast<std::size_t>(index[i])];
  }
  return a.tape->record(OpKind::gather, {a}, std::move(out), [index = std::move(index)](const BackwardArgs& g) {
    if (!g.grads[0]) return;
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] >= 0) (*g.grads[0])[static_cast<std::size_t>(index[i])] += g.upstream[i];
    }
  });
}

inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(OpKind::matmul, a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    detail::shape_fail(OpKind::matmul, "cannot multiply " + shape_str(av.shape()) + " by " + shape_str(bv.shape()));
  }
  const auto m = static_cast<Eigen::Index>(av.dim(0));
  const auto k = static_cast<Eigen::Index>(av.dim(1));
  const auto n = static_cast<Eigen::Index>(bv.dim(1));
  Tensor out({av.dim(0), bv.dim(1)});
  detail::MapMat(out.data(), m, n).noalias() = detail::CMapMat(av.data(), m, k) * detail::CMapMat(bv.data(), k, n);
  return tape.record(OpKind::matmul, {a, b}, std::move(out), [m, k, n](const BackwardArgs& g) {
    detail::CMapMat up(g.upstream.data(), m, n);
    if (g.grads[0]) {
      detail::MapMat(g.grads[0]->data(), m, k).noalias() += up * detail::CMapMat(g.inputs[1]->data(), k, n).transpose();
    }
    if (g.grads[1]) {
      detail::MapMat(g.grads[1]->data(), k, n).noalias() += detail::CMapMat(g.inputs[0]->data(), m, k).transpose() * up;
    }
  });
}

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Square-kernel 2D convolution (cross-correlation) of a single image.
/// x: [C, H, W], weight: [O, C, k, k], bias: [O] -> [O, Ho, Wo].
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dParams p = {}) {
  Tape& tape = detail::same_tape(OpKind::conv2d, x, weight);
  detail::same_tape(OpKind::conv2d, x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.dim(0) || wv.dim(2) != wv.dim(3) ||
      bv.size() != wv.dim(0)) {
    detail::shape_fail(OpKind::conv2d, "input " + shape_str(xv.shape()) + ", weight " + shape_str(wv.shape()) +
                                           ", bias " + shape_str(bv.shape()));
  }
  if (p.stride == 0) detail::shape_fail(OpKind::conv2d, "stride must be positive");
  const std::size_t C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const std::size_t O = wv.dim(0), K = wv.dim(2);
  if (H + 2 * p.pad < K || W + 2 * p.pad < K) {
    detail::shape_fail(OpKind::conv2d, "kernel " + std::to_string(K) + " larger than padded input " + shape_str(xv.shape()));
  }
  const std::size_t Ho = (H + 2 * p.pad - K) / p.stride + 1;
  const std::size_t Wo = (W + 2 * p.pad - K) / p.stride + 1;
  const std::size_t rows = C * K * K, cols = Ho * Wo;

  // im2col: row (c, ky, kx), column (oy, ox).
  auto cols_buf = std::make_shared<Storage>(rows * cols, 0.0);
  std::vector<std::ptrdiff_t> src_index(rows * cols, -1);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < K; ++ky) {
      for (std::size_t kx = 0; kx < K; ++kx) {
        const std::size_t row = (c * K + ky) * K + kx;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - static_cast<std::ptrdiff_t>(p.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - static_cast<std::ptrdiff_t>(p.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            const std::size_t src = (c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix);
            (*cols_buf)[row * cols + oy * Wo + ox] = xv[src];
            src_index[row * cols + oy * Wo + ox] = static_cast<std::ptrdiff_t>(src);
          }
        }
      }
    }
  }
  Tensor out({O, Ho, Wo});
  const auto eO = static_cast<Eigen::Index>(O), eR = static_cast<Eigen::Index>(rows),
             eC = static_cast<Eigen::Index>(cols);
  detail::MapMat om(out.data(), eO, eC);
  om.noalias() = detail::CMapMat(wv.data(), eO, eR) * detail::CMapMat(cols_buf->data(), eR, eC);
  for (std::size_t o = 0; o < O; ++o) om.row(static_cast<Eigen::Index>(o)).array() += bv[o];

  return tape.record(OpKind::conv2d, {x, weight, bias}, std::move(out),
                     [cols_buf, src_index = std::move(src_index), eO, eR, eC](const BackwardArgs& g) {
                       detail::CMapMat up(g.upstream.data(), eO, eC);
                       if (g.grads[1]) {
                         detail::MapMat(g.grads[1]->data(), eO, eR).noalias() +=
                             up * detail::CMapMat(cols_buf->data(), eR, eC).transpose();
                       }
                       if (g.grads[2]) {
                         for (Eigen::Index o = 0; o < eO; ++o) (*g.grads[2])[static_cast<std::size_t>(o)] += up.row(o).sum();
                       }
                       if (g.grads[0]) {
                         detail::RowMat dcols = detail::CMapMat(g.inputs[1]->data(), eO, eR).transpose() * up;
                         const double* d = dcols.data();
                         for (std::size_t i = 0; i < src_index.size(); ++i) {
                           if (src_index[i] >= 0) (*g.grads[0])[static_cast<std::size_t>(src_index[i])] += d[i];
                         }
                       }
                     });
}

/// Samples image [H, W] at fractional (row, col) coordinates [Ho, Wo, 2].
/// Corners outside the grid read as zero and receive no gradient. The
/// coordinate adjoint is the derivative of the bilinear interpolant.
inline Var bilinear_sample(const Var& image, const Var& coords) {
  Tape& tape = detail::same_tape(OpKind::bilinear_sample, image, coords);
  const Tensor& iv = image.value();
  const Tensor& cv = coords.value();
  if (iv.rank() != 2 || cv.rank() != 3 || cv.dim(2) != 2) {
    detail::shape_fail(OpKind::bilinear_sample,
                       "image " + shape_str(iv.shape()) + " with coordinates " + shape_str(cv.shape()));
  }
  const auto H = static_cast<std::ptrdiff_t>(iv.dim(0));
  const auto W = static_cast<std::ptrdiff_t>(iv.dim(1));
  const std::size_t n = cv.dim(0) * cv.dim(1);

  auto pixel = [H, W](const Tensor& img, std::ptrdiff_t r, std::ptrdiff_t c) {
    return (r < 0 || c < 0 || r >= H || c >= W) ? 0.0 : img[static_cast<std::size_t>(r * W + c)];
  };

  Tensor out({cv.dim(0), cv.dim(1)});
  for (std::size_t i = 0; i < n; ++i) {
    const double y = cv[2 * i], x = cv[2 * i + 1];
    const double fy = std::floor(y), fx = std::floor(x);
    const double wy = y - fy, wx = x - fx;
    const auto r0 = static_cast<std::ptrdiff_t>(fy), c0 = static_cast<std::ptrdiff_t>(fx);
    out[i] = (1 - wy) * ((1 - wx) * pixel(iv, r0, c0) + wx * pixel(iv, r0, c0 + 1)) +
             wy * ((1 - wx) * pixel(iv, r0 + 1, c0) + wx * pixel(iv, r0 + 1, c0 + 1));
  }
  return tape.record(OpKind::bilinear_sample, {image, coords}, std::move(out), [n, H, W, pixel](const BackwardArgs& g) {
    const Tensor& img = *g.inputs[0];
    const Tensor& co = *g.inputs[1];
    Tensor* dimg = g.grads[0];
    Tensor* dco = g.grads[1];
    for (std::size_t i = 0; i < n; ++i) {
      const double up = g.upstream[i];
      if (up == 0.0) continue;
      const double y = co[2 * i], x = co[2 * i + 1];
      const double fy = std::floor(y), fx = std::floor(x);
      const double wy = y - fy, wx = x - fx;
      const auto r0 = static_cast<std::ptrdiff_t>(fy), c0 = static_cast<std::ptrdiff_t>(fx);
      if (dimg) {
        const std::ptrdiff_t rs[4] = {r0, r0, r0 + 1, r0 + 1};
        const std::ptrdiff_t cs[4] = {c0, c0 + 1, c0, c0 + 1};
        const double ws[4] = {(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx};
        for (int k = 0; k < 4; ++k) {
          if (rs[k] >= 0 && cs[k] >= 0 && rs[k] < H && cs[k] < W) {
            (*dimg)[static_cast<std::size_t>(rs[k] * W + cs[k])] += up * ws[k];
          }
        }
      }
      if (dco) {
        const double p00 = pixel(img, r0, c0), p01 = pixel(img, r0, c0 + 1);
        const double p10 = pixel(img, r0 + 1, c0), p11 = pixel(img, r0 + 1, c0 + 1);
        (*dco)[2 * i] += up * ((1 - wx) * (p10 - p00) + wx * (p11 - p01));
        (*dco)[2 * i + 1] += up * ((1 - wy) * (p01 - p00) + wy * (p11 - p10));
      }
    }
  });
}

/// Elementwise binary cross-entropy on logits against constant targets.
inline Var bce_with_logits(const Var& logits, const Tensor& targets) {
  const Tensor& z = logits.value();
  if (z.shape() != targets.shape()) {
    detail::shape_fail(OpKind::bce_with_logits,
                       "logits " + shape_str(z.shape()) + " vs targets " + shape_str(targets.shape()));
  }
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::max(z[i], 0.0) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  return logits.tape->record(OpKind::bce_with_logits, {logits}, std::move(out), [targets](const BackwardArgs& g) {
    if (!g.grads[0]) return;
    const Tensor& zz = *g.inputs[0];
    for (std::size_t i = 0; i < zz.size(); ++i) {
      (*g.grads[0])[i] += g.upstream[i] * (detail::sigmoid_value(zz[i]) - targets[i]);
    }
  });
}

/// Elementwise Huber loss with unit transition point.
inline Var smooth_l1(const Var& pred, const Tensor& target) {
  const Tensor& p = pred.value();
  if (p.shape() != target.shape()) {
    detail::shape_fail(OpKind::smooth_l1, "prediction " + shape_str(p.shape()) + " vs target " + shape_str(target.shape()));
  }
  Tensor out(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - target[i];
    out[i] = std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  }
  return pred.tape->record(OpKind::smooth_l1, {pred}, std::move(out), [target](const BackwardArgs& g) {
    if (!g.grads[0]) return;
    const Tensor& pp = *g.inputs[0];
    for (std::size_t i = 0; i < pp.size(); ++i) {
      const double d = pp[i] - target[i];
      (*g.grads[0])[i] += g.upstream[i] * (std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0));
    }
  });
}

}  // namespace irpatch::diff
