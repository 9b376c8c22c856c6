// Catalogue of finite-difference checks covering every differentiable
// operation plus the composed DFDR layer and the domain classifier loss.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "drsf/grad_check.hpp"
#include "drsf/rng.hpp"

namespace drsf {

struct GradCase {
  std::string name;
  /// Builds the inputs and the scalar function for one random instance.
  std::function<void(RngStream& rng, std::vector<Tensor>& inputs,
                     std::function<Tensor(std::span<const Tensor>)>& f)>
      make;
};

std::vector<GradCase> standard_grad_cases();

struct GradCaseResult {
  std::string name;
  std::size_t instances = 0;
  double worst_rel_error = 0.0;
};

/// Runs `instances` seeded random instances of every case.
std::vector<GradCaseResult> run_grad_suite(std::size_t instances, std::uint64_t seed,
                                           const GradCheckOptions& options = {});

}  // namespace drsf
