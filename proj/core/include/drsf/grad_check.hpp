// Central finite-difference verification of tape gradients.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "drsf/optim.hpp"
#include "drsf/tensor.hpp"

namespace drsf {

struct GradCheckOptions {
  double step = 1e-5;
  /// 0 checks every coordinate; otherwise a seeded random subset of this size.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  double abs_floor = 1e-8;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

/// Worst |analytic - numeric| / max(|analytic|, |numeric|, abs_floor) over the checked coordinates.
GradCheckReport grad_check(const std::function<Tensor(std::span<const Tensor>)>& f, std::span<const Tensor> inputs,
                           const GradCheckOptions& options = {});

/// Single-input convenience form; step must lie in [1e-7, 1e-3].
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step = 1e-5);

/// Checks gradients of `loss` (which must read parameters through bind()) with
/// respect to the parameters of `store` whose names start with `prefix`.
GradCheckReport grad_check_params(const std::function<Tensor()>& loss, ParameterStore& store,
                                  const GradCheckOptions& options = {}, std::string_view prefix = {});

}  // namespace drsf
