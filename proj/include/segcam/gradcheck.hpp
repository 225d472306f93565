#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "segcam/graph.hpp"
#include "segcam/tensor.hpp"

namespace segcam {

/// One evaluation of a scalar function. `pattern` identifies the linear
/// piece the evaluation landed on (see Graph::activation_pattern); leave it 0
/// for smooth functions.
struct Evaluation {
  double value = 0.0;
  std::uint64_t pattern = 0;
};

using ScalarFunction = std::function<Evaluation(const TensorD&)>;

struct FiniteDiffOptions {
  double h = 1e-3;
  // Coordinates to check; empty means all.
  std::vector<std::size_t> coordinates;
  // Skip coordinates whose stencil x +- h changes the activation pattern:
  // central differences are not valid across a ReLU or max-pool switch.
  bool skip_pattern_changes = true;
  // Five-point stencil (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h instead
  // of the central difference. For smooth objectives with large third
  // derivatives relative to the gradient (softmax losses).
  bool fourth_order = false;
};

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

/// Relative error |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double analytic, double numeric);

/// Compares `analytic` with central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
/// Throws std::runtime_error when f returns a non-finite value.
FiniteDiffReport finite_diff_check(const ScalarFunction& f, const TensorD& analytic, const TensorD& point,
                                   const FiniteDiffOptions& options);

/// Smooth-function shorthand returning the maximum relative error.
double finite_diff_check(const std::function<double(const TensorD&)>& f, const TensorD& analytic,
                         const TensorD& point, double h);

struct GradcheckOptions {
  std::uint64_t seed = 0;
  int seeds = 20;
  int image_size = 16;
  int depth = 2;
  int base_channels = 8;
  int num_classes = 4;
  // Sampled coordinates per parameter tensor / per tap for the U-Net checks.
  int samples_per_tensor = 3;
  double h = 1e-3;
  double tolerance = 1e-4;
  Fault fault = Fault::None;
};

struct GradcheckRow {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;  // aggregated over seeds, one per check
  double max_relative_error = 0.0;
  double seconds = 0.0;
  bool passed = false;
};

/// 64-bit finite-difference suite: every graph op on random small shapes,
/// the cross-entropy loss, and parameter and tap gradients of the summed
/// logit objective of a random U-Net, repeated over `seeds` seeds.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

}  // namespace segcam
