#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "distillforge/autodiff.hpp"

namespace distillforge {

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor for the relative error, so coordinates whose true
  /// derivative is ~0 are compared absolutely.
  double floor = 1e-6;
  /// The floor is raised to the smallest derivative central differences can
  /// resolve to this relative accuracy given the rounding noise of the loss.
  double resolution = 1e-4;
  /// Coordinates where the one-sided differences disagree by more than this
  /// (relative) straddle a kink (relu, max-pool switch); they are retried
  /// with a smaller step and skipped if the disagreement persists.
  double kink_tolerance = 1e-3;
  /// Coordinates probed per parameter; 0 probes all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t coords_checked = 0;
  std::size_t kinks_skipped = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t kinks_skipped = 0;
};

/// Builds a scalar loss on the given (fresh) tape. Must be a pure function of
/// the parameter values: any randomness has to be re-seeded on every call.
using LossBuilder = std::function<Var<double>(Tape<double>&)>;

/// Compares backward() against central differences for every listed parameter.
GradCheckReport finite_diff_check(const LossBuilder& build, const std::vector<Parameter<double>*>& params,
                                  const GradCheckOptions& options = {});

}  // namespace distillforge
