#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>

#include "irpatch/tape.hpp"
#include "irpatch/tensor.hpp"

namespace irpatch::diff {

/// Builds a scalar on `tape` from the leaf `x`.
using ScalarFn = std::function<Var(Tape& tape, Var x)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  /// Set when backpropagation crossed a hard threshold.
  bool nondifferentiable = false;
  /// First coordinate whose perturbed evaluation was not finite.
  std::optional<std::size_t> nonfinite_index;

  bool passed(double tol) const { return !nondifferentiable && !nonfinite_index && max_rel_error <= tol; }
};

/// Compares the tape gradient of f at x with central differences,
/// |analytic - numeric| / max(1, |numeric|), maximised over coordinates.
inline GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5) {
  GradCheckResult result;
  Tensor analytic(x.shape(), 0.0);
  {
    Tape tape;
    Var in = tape.leaf(x);
    Var out = f(tape, in);
    if (!out.value().all_finite()) {
      result.nonfinite_index = 0;
      return result;
    }
    Gradients grads = tape.backward(out);
    result.nondifferentiable = grads.crossed_nondifferentiable();
    if (grads.has(in)) analytic = grads[in];
  }

  auto evaluate = [&f](const Tensor& at) {
    Tape tape;
    return f(tape, tape.leaf(at, false)).value().item();
  };

  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    const double hi = orig + eps, lo = orig - eps;
    probe[i] = hi;
    const double plus = evaluate(probe);
    probe[i] = lo;
    const double minus = evaluate(probe);
    probe[i] = orig;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      result.nonfinite_index = i;
      return result;
    }
    const double numeric = (plus - minus) / (hi - lo);  // the step actually taken
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace irpatch::diff
