#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace cpnet {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  float epsilon = 1e-2f;
  double tolerance = 1e-2;
  /// Coordinates probed per tensor; smaller tensors are probed exhaustively.
  std::size_t max_probes = 32;
};

/// Comparison of tape gradients against central differences for one tensor.
struct GradcheckGroup {
  std::string name;          // "<case>/<tensor>", e.g. "conv2d/kernel"
  std::size_t probed = 0;    // coordinates compared
  std::size_t unstable = 0;  // coordinates skipped because a relu, max or top-k choice flipped
  double max_abs_gradient = 0.0;  // largest tape gradient among compared coordinates
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradcheckReport {
  GradcheckOptions options;
  std::vector<GradcheckGroup> groups;

  bool group_passed(const GradcheckGroup& g) const;
  bool passed() const;
};

/// Denominator floor as a fraction of the largest tape gradient in the same
/// case. f32 central differences carry absolute noise of roughly
/// ulp(loss) / epsilon, so entries that are zero up to rounding (biases in
/// front of a batch norm, for instance) are compared against the case's
/// gradient scale instead of their own.
inline constexpr double kGradcheckFloor = 1e-2;

/// |analytic - numeric| / max(|analytic|, |numeric|, kGradcheckFloor * case_scale).
double gradcheck_relative_error(double analytic, double numeric, double case_scale);

/// Checks every differentiable op on random inputs in [-1, 1], the CE layer,
/// and the full toy CPNet loss on a small geometry with non-zero CP gammas.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

/// One line per group plus a verdict line.
void write_gradcheck_report(std::ostream& out, const GradcheckReport& report);

}  // namespace cpnet
