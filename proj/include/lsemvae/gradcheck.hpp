#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "lsemvae/params.hpp"

namespace lsemvae {

/// Builds a scalar loss on a fresh tape from bound parameters.
using LossBuilder = std::function<Var(ParamBinder<double>&)>;

struct GradCheckOptions {
  double h = 1e-5;
  /// Coordinates probed per tensor; 0 probes every coordinate.
  std::size_t coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  /// Probes whose +/-h perturbation crossed a relu or clamp kink; the central
  /// difference is meaningless there, so they are excluded from the maximum.
  std::size_t skipped_kinks = 0;
  /// Probes where both the analytic and the numeric derivative are below the
  /// rounding floor of the difference quotient (structurally zero gradients).
  std::size_t below_noise = 0;
};

/// max over probed coordinates of |analytic - (f(p+h) - f(p-h)) / 2h| / (|analytic| + 1e-8).
GradCheckResult finite_diff_check(const LossBuilder& build, const ParamStore<double>& params,
                                  const GradCheckOptions& options = {});

}  // namespace lsemvae
