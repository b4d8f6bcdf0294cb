// Central-difference gradient verification for everything the tape can
// differentiate.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sermtl/tape.hpp"

namespace sermtl {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Builds the op under test on a fresh tape from leaves created at
// `point` (in order) and returns the output var (any shape).
using GradCheckBuild = std::function<Var(Tape&, const std::vector<Var>&)>;

// Compares analytic gradients against central differences with step
// h = 1e-5. Non-scalar outputs are contracted with a fixed random
// projection so the whole Jacobian action is exercised. Relative error
// is |a - n| / max(|a|, |n|, 1e-8), maximized over every input element.
// Throws NumericError if the forward value at `point` is not finite.
GradCheckReport finite_diff_check(const std::string& op_name,
                                  const GradCheckBuild& build,
                                  const std::vector<Tensor>& point,
                                  double tolerance,
                                  std::uint64_t projection_seed = 0);

// Runs the full suite: every differentiable op at `points_per_op`
// random points (kinks excluded), tolerance 1e-4. One report per op
// with the max relative error across points.
std::vector<GradCheckReport> run_gradient_suite(std::uint64_t seed,
                                                int points_per_op = 100);

}  // namespace sermtl
