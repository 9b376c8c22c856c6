#include "drsf/tensor.hpp"

#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace drsf {

namespace {

thread_local Tape* t_active_tape = nullptr;
thread_local std::vector<std::string> t_scopes;
std::atomic<std::uint64_t> g_next_tape_id{1};

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("tensor constructed with non-finite value");
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

bool Tensor::on_active_tape() const noexcept {
  const Tape* tape = Tape::active();
  return node_.has_value() && tape != nullptr && tape->id() == tape_;
}

Tensor Tensor::detach() const {
  Tensor out = *this;
  out.requires_grad_ = false;
  out.node_.reset();
  out.tape_ = 0;
  return out;
}

Tensor Tensor::with_shape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

Tensor Tensor::as_trainable() const {
  Tensor out = detach();
  out.requires_grad_ = true;
  return out;
}

Tape::Tape(Kind kind) : kind_(kind), id_(g_next_tape_id.fetch_add(1)), previous_(t_active_tape) {
  t_active_tape = this;
}

Tape::~Tape() {
  if (t_active_tape == this) t_active_tape = previous_;
}

Tape* Tape::active() noexcept { return t_active_tape; }

Tensor Tape::variable(const Tensor& value, std::string name) {
  TapeNode node;
  node.op = "leaf";
  node.scope = OpScope::current();
  node.shape = value.shape();
  node.leaf_name = name;
  node.differentiable = true;
  const std::size_t id = nodes_.size();
  nodes_.push_back(std::move(node));
  if (!name.empty()) named_leaves_[name] = id;

  Tensor out = value.detach();
  out.requires_grad_ = true;
  out.node_ = id;
  out.tape_ = id_;
  return out;
}

Tensor Tape::watch(std::string_view name, const Tensor& value) {
  if (auto it = named_leaves_.find(name); it != named_leaves_.end()) {
    Tensor out = value.detach();
    out.requires_grad_ = true;
    out.node_ = it->second;
    out.tape_ = id_;
    return out;
  }
  return variable(value, std::string(name));
}

Tensor Tape::record(std::string_view op, Shape shape, std::vector<double> values,
                    std::span<const Tensor* const> operands, BackwardFn backward) {
  bool any_variable = false;
  for (const Tensor* t : operands) {
    if (t->node_ && t->tape_ == id_) {
      any_variable = true;
    } else if (kind_ == Kind::gradient && t->requires_grad_) {
      throw InvalidArgument(std::string(op) + ": trainable operand is not bound to the active tape");
    }
  }

  Tensor out(std::move(shape), std::move(values));
  if (!any_variable && kind_ != Kind::trace) return out;

  TapeNode node;
  node.op = std::string(op);
  node.scope = OpScope::current();
  node.shape = out.shape();
  node.differentiable = any_variable;
  for (const Tensor* t : operands) {
    if (t->node_ && t->tape_ == id_) {
      node.inputs.emplace_back(*t->node_);
    } else {
      node.inputs.emplace_back(std::nullopt);
    }
  }
  if (any_variable) node.backward = std::move(backward);
  const std::size_t id = nodes_.size();
  nodes_.push_back(std::move(node));
  if (any_variable) {
    out.requires_grad_ = true;
    out.node_ = id;
    out.tape_ = id_;
  }
  return out;
}

GradientMap Tape::backward(const Tensor& loss) {
  if (consumed_) throw InvalidArgument("backward: tape already consumed; reset it first");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  consumed_ = true;

  grads_.assign(nodes_.size(), {});
  if (loss.node_ && loss.tape_ == id_) {
    const std::size_t root = *loss.node_;
    grads_[root].assign(1, 1.0);
    std::vector<std::vector<double>*> slots;
    for (std::size_t i = root + 1; i-- > 0;) {
      TapeNode& node = nodes_[i];
      if (grads_[i].empty() || !node.backward) continue;
      slots.clear();
      for (const auto& in : node.inputs) {
        if (!in) {
          slots.push_back(nullptr);
          continue;
        }
        auto& g = grads_[*in];
        if (g.empty()) g.assign(shape_numel(nodes_[*in].shape), 0.0);
        slots.push_back(&g);
      }
      node.backward(grads_[i], slots);
    }
  }

  GradientMap out;
  for (const auto& [name, id] : named_leaves_) {
    const Shape& shape = nodes_[id].shape;
    if (grads_[id].empty()) {
      out.emplace(name, Tensor::zeros(shape));
    } else {
      out.emplace(name, Tensor(shape, grads_[id]));
    }
  }
  return out;
}

Tensor Tape::gradient(const Tensor& t) const {
  if (!t.node_ || t.tape_ != id_) throw InvalidArgument("gradient: tensor is not a variable of this tape");
  const std::size_t id = *t.node_;
  if (id >= grads_.size() || grads_[id].empty()) return Tensor::zeros(nodes_[id].shape);
  return Tensor(nodes_[id].shape, grads_[id]);
}

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
  named_leaves_.clear();
  consumed_ = false;
  id_ = g_next_tape_id.fetch_add(1);
}

OpScope::OpScope(std::string label) { t_scopes.push_back(std::move(label)); }

OpScope::~OpScope() { t_scopes.pop_back(); }

std::string OpScope::current() {
  std::string out;
  for (const auto& s : t_scopes) {
    if (!out.empty()) out += '/';
    out += s;
  }
  return out;
}

Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                   std::span<const Tensor* const> operands, BackwardFn backward) {
  // The Tensor constructor rejects non-finite values; rethrow with the op name.
  try {
    if (Tape* tape = Tape::active()) {
      return tape->record(op, std::move(shape), std::move(values), operands, std::move(backward));
    }
    return Tensor(std::move(shape), std::move(values));
  } catch (const NumericError&) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

}  // namespace drsf
