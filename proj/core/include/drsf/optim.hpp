// Named trainable parameters and the momentum SGD update.
#pragma once

#include <deque>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "drsf/tensor.hpp"

namespace drsf {

struct Parameter {
  std::string name;
  Tensor value;
  std::vector<double> velocity;
};

/// Ordered collection with unique dotted names. References stay valid across add().
class ParameterStore {
 public:
  Parameter& add(std::string name, const Tensor& value);

  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  const Parameter* find(std::string_view name) const;

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

  /// Total scalar count over parameters whose name starts with `prefix`.
  std::size_t scalar_count(std::string_view prefix = {}) const;

 private:
  std::deque<Parameter> params_;
};

/// Parameter value as a variable of the active gradient tape (shared per tape
/// by name), or the plain value when no gradient tape is active.
Tensor bind(const Parameter& p);

/// v <- momentum * v + g;  p <- p - lr * v.
void sgd_step(std::span<Parameter* const> params, const GradientMap& grads, double lr, double momentum);
void sgd_step(ParameterStore& store, const GradientMap& grads, double lr, double momentum);

}  // namespace drsf
