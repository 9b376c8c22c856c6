#include "drsf/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "drsf/rng.hpp"

namespace drsf {

namespace {

struct Coord {
  std::size_t slot;
  std::size_t index;
};

std::vector<Coord> choose_coords(const std::vector<std::size_t>& sizes, const GradCheckOptions& options) {
  std::vector<Coord> all;
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    for (std::size_t i = 0; i < sizes[s]; ++i) all.push_back({s, i});
  }
  if (options.max_coords == 0 || options.max_coords >= all.size()) return all;
  RngStream rng(options.seed);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < options.max_coords; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(all.size() - i));
    std::swap(all[i], all[j]);
  }
  all.resize(options.max_coords);
  return all;
}

Tensor perturbed(const Tensor& t, std::size_t index, double delta) {
  std::vector<double> v = t.to_vector();
  v[index] += delta;
  return Tensor(t.shape(), std::move(v));
}

double rel_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

void check_step(double step) {
  if (!(step >= 1e-7 && step <= 1e-3)) throw InvalidArgument("grad_check: step must lie in [1e-7, 1e-3]");
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(std::span<const Tensor>)>& f, std::span<const Tensor> inputs,
                           const GradCheckOptions& options) {
  check_step(options.step);
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Tensor> vars;
    for (const Tensor& x : inputs) vars.push_back(tape.variable(x.detach()));
    const Tensor y = f(vars);
    if (y.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued");
    tape.backward(y);
    for (const Tensor& v : vars) analytic.push_back(tape.gradient(v));
  }

  std::vector<std::size_t> sizes;
  std::vector<Tensor> base;
  for (const Tensor& x : inputs) {
    sizes.push_back(x.numel());
    base.push_back(x.detach());
  }

  GradCheckReport report;
  for (const Coord& c : choose_coords(sizes, options)) {
    std::vector<Tensor> plus = base;
    std::vector<Tensor> minus = base;
    plus[c.slot] = perturbed(base[c.slot], c.index, options.step);
    minus[c.slot] = perturbed(base[c.slot], c.index, -options.step);
    const double numeric = (f(plus).item() - f(minus).item()) / (2.0 * options.step);
    report.max_rel_error =
        std::max(report.max_rel_error, rel_error(analytic[c.slot][c.index], numeric, options.abs_floor));
    ++report.coords_checked;
  }
  return report;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  GradCheckOptions options;
  options.step = step;
  const Tensor inputs[] = {x};
  return grad_check([&f](std::span<const Tensor> in) { return f(in[0]); }, inputs, options).max_rel_error;
}

GradCheckReport grad_check_params(const std::function<Tensor()>& loss, ParameterStore& store,
                                  const GradCheckOptions& options, std::string_view prefix) {
  check_step(options.step);
  std::vector<Parameter*> params;
  for (auto& p : store) {
    if (std::string_view(p.name).starts_with(prefix)) params.push_back(&p);
  }

  GradientMap grads;
  {
    Tape tape;
    const Tensor y = loss();
    if (y.numel() != 1) throw ShapeError("grad_check_params: loss must be scalar-valued");
    grads = tape.backward(y);
  }

  std::vector<std::size_t> sizes;
  for (const Parameter* p : params) sizes.push_back(p->value.numel());

  GradCheckReport report;
  for (const Coord& c : choose_coords(sizes, options)) {
    Parameter& p = *params[c.slot];
    const Tensor original = p.value;
    p.value = perturbed(original, c.index, options.step).as_trainable();
    const double up = loss().item();
    p.value = perturbed(original, c.index, -options.step).as_trainable();
    const double down = loss().item();
    p.value = original;

    const auto it = grads.find(p.name);
    const double analytic = it == grads.end() ? 0.0 : it->second[c.index];
    const double numeric = (up - down) / (2.0 * options.step);
    report.max_rel_error = std::max(report.max_rel_error, rel_error(analytic, numeric, options.abs_floor));
    ++report.coords_checked;
  }
  return report;
}

}  // namespace drsf
