#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cpg/rng.hpp"
#include "cpg/tensor.hpp"

namespace cpg {

struct GradcheckOptions {
  /// Central-difference step.
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates checked per input tensor; larger tensors are sampled.
  std::size_t max_coords = 48;
  /// Gradients below this magnitude are compared in absolute terms.
  double floor = 1e-3;
};

struct GradcheckOutcome {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  /// Coordinates whose +-step interval straddles a kink; at most a tenth of the total.
  std::size_t coords_skipped = 0;
  bool passed = false;
};

/// Function under test. Inputs are perturbed in place, so `f` may also read
/// them through other handles (e.g. parameters held by a model).
using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Relative error |a - n| / max(|a|, |n|, floor) between the analytic and the
/// numerical gradient, maximized over the checked coordinates of every input.
/// Non-scalar outputs are reduced with fixed random weights first. A failing
/// coordinate is counted as a kink instead when its left and right slopes
/// disagree and a 100x finer central difference matches the analytic value.
GradcheckOutcome check_gradients(const std::string& name, const GradFn& f, const std::vector<Tensor<double>>& inputs,
                                 Rng& rng, const GradcheckOptions& options = {});

/// The full suite: every differentiable operator and the composite blocks.
std::vector<GradcheckOutcome> run_gradcheck_suite(std::uint64_t seed, const GradcheckOptions& options = {});

/// Aligned op / max error / verdict table.
std::string format_gradcheck_table(const std::vector<GradcheckOutcome>& outcomes, double tolerance);

}  // namespace cpg
