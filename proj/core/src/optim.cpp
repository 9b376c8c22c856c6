#include "drsf/optim.hpp"

namespace drsf {

Parameter& ParameterStore::add(std::string name, const Tensor& value) {
  if (name.empty()) throw InvalidArgument("parameter name must not be empty");
  if (find(name) != nullptr) throw InvalidArgument("duplicate parameter name: " + name);
  Parameter& p = params_.emplace_back();
  p.name = std::move(name);
  p.value = value.as_trainable();
  p.velocity.assign(value.numel(), 0.0);
  return p;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const Parameter& ParameterStore::get(std::string_view name) const {
  if (const Parameter* p = find(name)) return *p;
  throw InvalidArgument("unknown parameter: " + std::string(name));
}

Parameter& ParameterStore::get(std::string_view name) {
  return const_cast<Parameter&>(static_cast<const ParameterStore&>(*this).get(name));
}

std::size_t ParameterStore::scalar_count(std::string_view prefix) const {
  std::size_t total = 0;
  for (const auto& p : params_) {
    if (std::string_view(p.name).starts_with(prefix)) total += p.value.numel();
  }
  return total;
}

Tensor bind(const Parameter& p) {
  Tape* tape = Tape::active();
  if (tape != nullptr && tape->kind() == Tape::Kind::gradient) return tape->watch(p.name, p.value);
  return p.value.detach();
}

void sgd_step(std::span<Parameter* const> params, const GradientMap& grads, double lr, double momentum) {
  if (!(lr > 0.0)) throw InvalidArgument("sgd_step: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("sgd_step: momentum must lie in [0,1)");
  for (const Parameter* p : params) {
    auto it = grads.find(p->name);
    if (it == grads.end()) throw InvalidArgument("sgd_step: missing gradient for " + p->name);
    if (it->second.shape() != p->value.shape()) throw ShapeError("sgd_step: gradient shape mismatch for " + p->name);
  }
  for (Parameter* p : params) {
    const auto g = grads.find(p->name)->second.values();
    const auto old = p->value.values();
    std::vector<double> next(old.size());
    for (std::size_t i = 0; i < old.size(); ++i) {
      p->velocity[i] = momentum * p->velocity[i] + g[i];
      next[i] = old[i] - lr * p->velocity[i];
    }
    p->value = Tensor(p->value.shape(), std::move(next)).as_trainable();
  }
}

void sgd_step(ParameterStore& store, const GradientMap& grads, double lr, double momentum) {
  std::vector<Parameter*> all;
  for (auto& p : store) all.push_back(&p);
  sgd_step(all, grads, lr, momentum);
}

}  // namespace drsf
