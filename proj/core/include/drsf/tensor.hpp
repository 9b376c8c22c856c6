// Dense f64 tensors recorded on a reverse-mode gradient tape.
//
// A Tensor is an immutable value: shape plus a shared, read-only buffer.
// Operations executed while a Tape is active on the current thread record
// a node (op name, scope label, operand ids, backward rule) whenever one of
// their operands is a variable of that tape. Tensors that are not bound to
// the active tape behave as constants.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace drsf {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when an operation would produce NaN/Inf or divide by ~0.
class NumericError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or hash-mismatched dataset/checkpoint files.
class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

class Tensor {
 public:
  /// Scalar zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_->size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const double> values() const noexcept { return {data_->data(), data_->size()}; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double item() const;
  std::vector<double> to_vector() const { return *data_; }

  /// True for tape variables and for parameter values awaiting binding.
  bool requires_grad() const noexcept { return requires_grad_; }
  std::optional<std::size_t> node_id() const noexcept { return node_; }
  std::uint64_t tape_id() const noexcept { return tape_; }

  /// Variable of the currently active gradient tape.
  bool on_active_tape() const noexcept;

  /// Same values, no tape binding, requires_grad false.
  Tensor detach() const;
  /// Same values and tape binding, new shape (numel must agree).
  Tensor with_shape(Shape shape) const;
  /// Marks a detached value as trainable (used for parameter values).
  Tensor as_trainable() const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  bool requires_grad_ = false;
  std::optional<std::size_t> node_;
  std::uint64_t tape_ = 0;
};

/// Backward rule: receives the output gradient and one accumulation buffer per
/// operand (nullptr when that operand is not differentiable).
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<std::vector<double>* const> grad_in)>;

struct TapeNode {
  std::string op;
  std::string scope;
  Shape shape;
  std::vector<std::optional<std::size_t>> inputs;
  BackwardFn backward;
  std::string leaf_name;
  bool differentiable = false;
};

using GradientMap = std::map<std::string, Tensor, std::less<>>;

class Tape {
 public:
  /// gradient: records differentiable ops for backward.
  /// trace: additionally records every op (constants included) for graph audits.
  enum class Kind { gradient, trace };

  explicit Tape(Kind kind = Kind::gradient);
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Innermost tape constructed on this thread and not yet destroyed.
  static Tape* active() noexcept;

  Kind kind() const noexcept { return kind_; }
  std::uint64_t id() const noexcept { return id_; }
  const std::vector<TapeNode>& nodes() const noexcept { return nodes_; }

  /// New leaf variable holding `value`; named leaves are reported by backward().
  Tensor variable(const Tensor& value, std::string name = {});
  /// Named leaf, reused when the same name is watched twice.
  Tensor watch(std::string_view name, const Tensor& value);

  /// Reverse sweep from a scalar loss. Allowed once per tape.
  GradientMap backward(const Tensor& loss);
  /// Accumulated gradient of any variable after backward(); zeros if unreached.
  Tensor gradient(const Tensor& t) const;

  /// Records an op result. Used by operation implementations.
  Tensor record(std::string_view op, Shape shape, std::vector<double> values,
                std::span<const Tensor* const> operands, BackwardFn backward);

  /// Drops all nodes and gradients; the tape can be reused.
  void reset();

 private:
  Kind kind_;
  std::uint64_t id_;
  Tape* previous_;
  bool consumed_ = false;
  std::vector<TapeNode> nodes_;
  std::vector<std::vector<double>> grads_;
  std::map<std::string, std::size_t, std::less<>> named_leaves_;
};

/// Labels nodes recorded while alive, e.g. "dfdr/interference". Nested labels join with '/'.
class OpScope {
 public:
  explicit OpScope(std::string label);
  ~OpScope();
  OpScope(const OpScope&) = delete;
  OpScope& operator=(const OpScope&) = delete;

  static std::string current();
};

/// Builds an op result: validates finiteness, records on the active tape if needed.
Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                   std::span<const Tensor* const> operands, BackwardFn backward);

inline Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                          std::initializer_list<const Tensor*> operands, BackwardFn backward) {
  return make_result(op, std::move(shape), std::move(values),
                     std::span<const Tensor* const>(operands.begin(), operands.size()), std::move(backward));
}

}  // namespace drsf
