#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fssi/autodiff.hpp"
#include "fssi/ops.hpp"
#include "fssi/random.hpp"
#include "fssi/tensor.hpp"

namespace fssi::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Values with |x| >= margin so kinks (relu, max) stay out of reach of the
// finite-difference step.
inline Tensor random_away_from_zero(const Shape& shape, Rng& rng, double margin = 0.05) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double m = rng.uniform(margin, 1.0);
    t[i] = rng.uniform() < 0.5 ? -m : m;
  }
  return t;
}

// Builds the scalar loss from one leaf per input tensor.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t points = 0;
  std::size_t fewest_points = 0;  // smallest single check folded in by merge()

  void merge(const GradCheckResult& other) {
    const std::size_t theirs = other.fewest_points ? other.fewest_points : other.points;
    fewest_points = points == 0 ? theirs : std::min(fewest_points, theirs);
    max_rel_error = std::max(max_rel_error, other.max_rel_error);
    points += other.points;
  }
};

// |analytic - numeric| / max(|analytic|, |numeric|), or the plain absolute
// difference when both are below `floor` in magnitude combined.
inline double gradient_error(double analytic, double numeric, double floor = 1e-8) {
  const double scale = std::abs(analytic) + std::abs(numeric);
  if (scale < floor) return std::abs(analytic - numeric);
  return std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
}

// Central differences with step `h` at up to `per_input` random coordinates
// of each input (all of them when fewer).
inline GradCheckResult grad_check(const LossBuilder& build, const std::vector<Tensor>& inputs,
                                  Rng& rng, std::size_t per_input = 20, double h = 1e-5) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
    const Var loss = build(tape, leaves);
    tape.backward(loss);
    for (const Var& v : leaves) analytic.push_back(tape.grad(v));
  }
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape tape(GradMode::kDisabled);
    std::vector<Var> leaves;
    for (const Tensor& t : xs) leaves.push_back(tape.constant(t));
    return build(tape, leaves).value()[0];
  };

  GradCheckResult result;
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t n = inputs[i].size();
    const auto coords = rng.sample_without_replacement(n, std::min(n, per_input));
    for (std::size_t c : coords) {
      const double x0 = inputs[i][c];
      probe[i][c] = x0 + h;
      const double up = evaluate(probe);
      probe[i][c] = x0 - h;
      const double down = evaluate(probe);
      probe[i][c] = x0;
      const double numeric = (up - down) / (2.0 * h);
      result.max_rel_error = std::max(result.max_rel_error, gradient_error(analytic[i][c], numeric));
      ++result.points;
    }
  }
  return result;
}

// sum(y * w) for a fixed random w, so every output element gets a distinct
// upstream gradient.
inline Var project(Var y, std::uint64_t seed) {
  Rng rng(seed);
  const Var w = y.tape->constant(random_tensor(y.shape(), rng));
  return ops::sum(ops::mul(y, w));
}

}  // namespace fssi::testing
