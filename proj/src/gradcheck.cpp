#include "sermtl/gradcheck.hpp"

#include <cmath>

#include "sermtl/rng.hpp"

namespace sermtl {

namespace {

constexpr double kStep = 1e-5;

// Scalar objective: projected output of the op at the given inputs.
double forward_scalar(const GradCheckBuild& build,
                      const std::vector<Tensor>& inputs,
                      const Tensor& projection) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  Var out = build(tape, vars);
  const Tensor& v = tape.val(out);
  double acc = 0.0;
  for (std::size_t i = 0; i < v.numel(); ++i) acc += v[i] * projection[i];
  return acc;
}

}  // namespace

GradCheckReport finite_diff_check(const std::string& op_name,
                                  const GradCheckBuild& build,
                                  const std::vector<Tensor>& point,
                                  double tolerance,
                                  std::uint64_t projection_seed) {
  // Analytic pass.
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(point.size());
  for (const Tensor& t : point) vars.push_back(tape.leaf(t, true));
  Var out = build(tape, vars);
  const Tensor& value = tape.val(out);
  if (!value.all_finite()) {
    throw NumericError("finite_diff_check(" + op_name +
                       "): non-finite forward value");
  }

  // Fixed projection in [0.5, 1.5] so no output component is ignored.
  auto eng = make_engine(mix_seed(projection_seed, 0x70726f6aULL));
  std::uniform_real_distribution<double> unif(0.5, 1.5);
  Tensor projection(value.shape());
  for (std::size_t i = 0; i < projection.numel(); ++i)
    projection[i] = unif(eng);

  Tape atape;
  std::vector<Var> avars;
  for (const Tensor& t : point) avars.push_back(atape.leaf(t, true));
  Var aout = build(atape, avars);
  atape.accum_grad(aout, projection);
  atape.backward_seeded();

  GradCheckReport report;
  report.op_name = op_name;
  report.tolerance = tolerance;

  std::vector<Tensor> probe = point;
  for (std::size_t p = 0; p < point.size(); ++p) {
    const Tensor analytic = atape.grad_or_zeros(avars[p]);
    for (std::size_t i = 0; i < point[p].numel(); ++i) {
      const double orig = probe[p][i];
      probe[p][i] = orig + kStep;
      const double fp = forward_scalar(build, probe, projection);
      probe[p][i] = orig - kStep;
      const double fm = forward_scalar(build, probe, projection);
      probe[p][i] = orig;
      const double numeric = (fp - fm) / (2.0 * kStep);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-8});
      report.max_rel_error = std::max(report.max_rel_error, rel);
    }
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace sermtl
