#pragma once

// Finite-difference verification of tape gradients. Always run in 64-bit:
// central differences at h=1e-5 leave ~1e-10 of headroom there, none in f32.

#include <cstdint>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace davit {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t coords_checked = 0;
};

namespace detail {

inline double rel_err(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

}  // namespace detail

// Compare the tape gradient of a scalar-valued function against central
// differences at every coordinate of every input, or at `max_coords_per_input`
// randomly sampled coordinates when the input is large. `f` must be a pure
// function (Tape<double>&, inputs as Values) -> scalar Value.
template <typename F>
GradCheckReport grad_check_multi(F&& f, const std::vector<Tensor<double>>& inputs,
                                 double h = 1e-5, int64_t max_coords_per_input = 0,
                                 uint64_t seed = 7) {
  // Analytic pass.
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Value> vals;
    vals.reserve(inputs.size());
    for (const auto& in : inputs) vals.push_back(tape.leaf(in, true));
    Value loss = f(tape, vals);
    if (tape.value(loss).numel() != 1)
      throw ShapeError("grad_check: function must produce a scalar, got " +
                       shape_str(tape.value(loss).shape));
    tape.backward(loss);
    for (Value v : vals) analytic.push_back(tape.grad_or_zeros(v));
  }

  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> tape(false);
    std::vector<Value> vals;
    vals.reserve(xs.size());
    for (const auto& in : xs) vals.push_back(tape.leaf(in, false));
    return tape.value(f(tape, vals))[0];
  };

  GradCheckReport report;
  Rng rng(seed);
  std::vector<Tensor<double>> work = inputs;
  for (size_t t = 0; t < inputs.size(); ++t) {
    const int64_t n = inputs[t].numel();
    std::vector<int64_t> coords;
    if (max_coords_per_input > 0 && max_coords_per_input < n) {
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      rng.shuffle(all.begin(), all.end());
      coords.assign(all.begin(), all.begin() + max_coords_per_input);
    } else {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    }
    for (const int64_t i : coords) {
      const double orig = work[t][i];
      work[t][i] = orig + h;
      const double fp = eval(work);
      work[t][i] = orig - h;
      const double fm = eval(work);
      work[t][i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      report.max_rel_err = std::max(report.max_rel_err, detail::rel_err(analytic[t][i], numeric));
      ++report.coords_checked;
    }
  }
  return report;
}

// Single-input convenience: returns the worst relative error over all coords.
template <typename F>
double grad_check(F&& f, const Tensor<double>& x, double h = 1e-5) {
  auto wrapped = [&f](Tape<double>& t, const std::vector<Value>& vs) { return f(t, vs[0]); };
  return grad_check_multi(wrapped, {x}, h).max_rel_err;
}

}  // namespace davit
