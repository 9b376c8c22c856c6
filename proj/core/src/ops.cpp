#include "drsf/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace drsf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t mid = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.mid = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

bool broadcastable(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i] != a[i] && b[i] != 1) return false;
  }
  return true;
}

// Walks every linear index i of `full` together with the index j of the
// element of `small` it maps to when `small` is broadcast (extents equal or 1)
// to `full`. Adjacent axes with the same broadcast pattern are merged, so the
// walk is a short odometer around a tight inner loop. Order is always i = 0..n-1.
class Broadcast {
 public:
  Broadcast(const Shape& full, const Shape& small) : n_(shape_numel(full)) {
    std::size_t stride = 1;
    std::vector<std::size_t> ext, str;
    for (std::size_t i = full.size(); i-- > 0;) {
      const std::size_t s = small[i] == 1 ? 0 : stride;
      stride *= small[i];
      if (full[i] == 1) continue;
      if (!ext.empty() && ((s == 0 && str.back() == 0) || (s != 0 && s == str.back() * ext.back()))) {
        ext.back() *= full[i];
        continue;
      }
      ext.push_back(full[i]);
      str.push_back(s);
    }
    extent_.assign(ext.rbegin(), ext.rend());
    stride_.assign(str.rbegin(), str.rend());
  }

  std::size_t size() const noexcept { return n_; }

  template <typename F>
  void for_each(F&& f) const {
    if (extent_.empty()) {
      for (std::size_t i = 0; i < n_; ++i) f(i, std::size_t{0});
      return;
    }
    const std::size_t inner = extent_.back(), inner_stride = stride_.back();
    const std::size_t outer_rank = extent_.size() - 1;
    std::vector<std::size_t> idx(outer_rank, 0);
    std::size_t offset = 0;
    for (std::size_t base = 0; base < n_; base += inner) {
      if (inner_stride == 0) {
        for (std::size_t t = 0; t < inner; ++t) f(base + t, offset);
      } else {
        for (std::size_t t = 0; t < inner; ++t) f(base + t, offset + t * inner_stride);
      }
      for (std::size_t d = outer_rank; d-- > 0;) {
        ++idx[d];
        offset += stride_[d];
        if (idx[d] < extent_[d]) break;
        offset -= stride_[d] * idx[d];
        idx[d] = 0;
      }
    }
  }

 private:
  std::size_t n_;
  std::vector<std::size_t> extent_;
  std::vector<std::size_t> stride_;
};

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

template <typename F, typename G>
Tensor unary(const char* op, const Tensor& a, F forward, G derivative) {
  const auto x = a.values();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward(x[i]);
  auto out_values = std::make_shared<std::vector<double>>(y);
  return make_result(op, a.shape(), std::move(y), {&a},
                     [a, out_values, derivative](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       const auto x = a.values();
                       auto& ga = *gin[0];
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * derivative(x[i], (*out_values)[i]);
                     });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

void check_distribution(const Tensor& t, std::size_t class_axis, double tol, const char* what) {
  const AxisSplit s = split_at(t.shape(), class_axis);
  const auto v = t.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      double total = 0.0;
      for (std::size_t k = 0; k < s.mid; ++k) {
        const double p = v[(o * s.mid + k) * s.inner + in];
        if (p < 0.0) throw InvalidArgument(std::string(what) + ": negative probability");
        total += p;
      }
      if (std::abs(total - 1.0) > tol) {
        throw InvalidArgument(std::string(what) + ": row sums to " + std::to_string(total) + ", expected 1");
      }
    }
  }
}

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const char* name = names[static_cast<int>(op)];
  if (!broadcastable(a.shape(), b.shape())) {
    throw ShapeError(std::string(name) + ": cannot broadcast " + shape_str(b.shape()) + " to " + shape_str(a.shape()));
  }
  const bool same = a.shape() == b.shape();
  auto bc = same ? std::shared_ptr<const Broadcast>() : std::make_shared<const Broadcast>(a.shape(), b.shape());
  // f(i, j): i indexes a (and the output), j indexes b.
  auto walk = [bc](std::size_t n, auto&& f) {
    if (!bc) {
      for (std::size_t i = 0; i < n; ++i) f(i, i);
    } else {
      bc->for_each(f);
    }
  };
  const auto x = a.values();
  const auto y = b.values();
  const std::size_t n = x.size();

  if (op == BinaryOp::div) {
    for (double v : y) {
      if (std::abs(v) < 1e-300) throw NumericError("div: divisor magnitude below 1e-300");
    }
  }

  std::vector<double> out(n);
  double* o = out.data();
  switch (op) {
    case BinaryOp::add:
      walk(n, [&](std::size_t i, std::size_t j) { o[i] = x[i] + y[j]; });
      break;
    case BinaryOp::sub:
      walk(n, [&](std::size_t i, std::size_t j) { o[i] = x[i] - y[j]; });
      break;
    case BinaryOp::mul:
      walk(n, [&](std::size_t i, std::size_t j) { o[i] = x[i] * y[j]; });
      break;
    case BinaryOp::div:
      walk(n, [&](std::size_t i, std::size_t j) { o[i] = x[i] / y[j]; });
      break;
  }

  return make_result(name, a.shape(), std::move(out), {&a, &b},
                     [op, a, b, walk](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       const auto x = a.values();
                       const auto y = b.values();
                       double* ga = gin[0] ? gin[0]->data() : nullptr;
                       double* gb = gin[1] ? gin[1]->data() : nullptr;
                       const std::size_t n = g.size();
                       switch (op) {
                         case BinaryOp::add:
                           if (ga) for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                           if (gb) walk(n, [&](std::size_t i, std::size_t j) { gb[j] += g[i]; });
                           break;
                         case BinaryOp::sub:
                           if (ga) for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                           if (gb) walk(n, [&](std::size_t i, std::size_t j) { gb[j] -= g[i]; });
                           break;
                         case BinaryOp::mul:
                           if (ga) walk(n, [&](std::size_t i, std::size_t j) { ga[i] += g[i] * y[j]; });
                           if (gb) walk(n, [&](std::size_t i, std::size_t j) { gb[j] += g[i] * x[i]; });
                           break;
                         case BinaryOp::div:
                           if (ga) walk(n, [&](std::size_t i, std::size_t j) { ga[i] += g[i] / y[j]; });
                           if (gb) {
                             walk(n, [&](std::size_t i, std::size_t j) {
                               const double d = y[j];
                               gb[j] -= g[i] * x[i] / (d * d);
                             });
                           }
                           break;
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::div, a, b); }

Tensor affine(const Tensor& a, double scale, double shift) {
  return unary(
      "affine", a, [scale, shift](double x) { return scale * x + shift; },
      [scale](double, double) { return scale; });
}

Tensor broadcast_to(const Tensor& b, const Shape& shape) {
  if (!broadcastable(shape, b.shape())) {
    throw ShapeError("broadcast_to: cannot broadcast " + shape_str(b.shape()) + " to " + shape_str(shape));
  }
  auto bc = std::make_shared<const Broadcast>(shape, b.shape());
  const auto y = b.values();
  std::vector<double> out(bc->size());
  bc->for_each([&](std::size_t i, std::size_t j) { out[i] = y[j]; });
  return make_result("broadcast_to", shape, std::move(out), {&b},
                     [bc](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       double* gb = gin[0]->data();
                       bc->for_each([&](std::size_t i, std::size_t j) { gb[j] += g[i]; });
                     });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.values()) {
    if (v < 0.0) throw NumericError("sqrt of a negative value");
  }
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) {
        if (y == 0.0) throw NumericError("sqrt: gradient at zero");
        return 0.5 / y;
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw NumericError("log of a non-positive value");
  }
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x) {
  return unary("softplus", x, stable_softplus, [](double v, double) { return stable_sigmoid(v); });
}

Tensor log_softmax(const Tensor& x, std::size_t class_axis) {
  const AxisSplit s = split_at(x.shape(), class_axis);
  const auto v = x.values();
  auto out = std::make_shared<std::vector<double>>(v.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.mid * s.inner + in;
      double hi = v[base];
      for (std::size_t k = 1; k < s.mid; ++k) hi = std::max(hi, v[base + k * s.inner]);
      double acc = 0.0;
      for (std::size_t k = 0; k < s.mid; ++k) acc += std::exp(v[base + k * s.inner] - hi);
      const double lse = hi + std::log(acc);
      for (std::size_t k = 0; k < s.mid; ++k) (*out)[base + k * s.inner] = v[base + k * s.inner] - lse;
    }
  }
  std::vector<double> values = *out;
  return make_result("log_softmax", x.shape(), std::move(values), {&x},
                     [s, out](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       auto& gx = *gin[0];
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t in = 0; in < s.inner; ++in) {
                           const std::size_t base = o * s.mid * s.inner + in;
                           double gsum = 0.0;
                           for (std::size_t k = 0; k < s.mid; ++k) gsum += g[base + k * s.inner];
                           for (std::size_t k = 0; k < s.mid; ++k) {
                             const std::size_t i = base + k * s.inner;
                             gx[i] += g[i] - std::exp((*out)[i]) * gsum;
                           }
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x, std::size_t class_axis) {
  const AxisSplit s = split_at(x.shape(), class_axis);
  const auto v = x.values();
  auto out = std::make_shared<std::vector<double>>(v.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.mid * s.inner + in;
      double hi = v[base];
      for (std::size_t k = 1; k < s.mid; ++k) hi = std::max(hi, v[base + k * s.inner]);
      double acc = 0.0;
      for (std::size_t k = 0; k < s.mid; ++k) {
        const double e = std::exp(v[base + k * s.inner] - hi);
        (*out)[base + k * s.inner] = e;
        acc += e;
      }
      for (std::size_t k = 0; k < s.mid; ++k) (*out)[base + k * s.inner] /= acc;
    }
  }
  std::vector<double> values = *out;
  return make_result("softmax", x.shape(), std::move(values), {&x},
                     [s, out](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       auto& gx = *gin[0];
                       const auto& y = *out;
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t in = 0; in < s.inner; ++in) {
                           const std::size_t base = o * s.mid * s.inner + in;
                           double dot = 0.0;
                           for (std::size_t k = 0; k < s.mid; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
                           for (std::size_t k = 0; k < s.mid; ++k) {
                             const std::size_t i = base + k * s.inner;
                             gx[i] += y[i] * (g[i] - dot);
                           }
                         }
                       }
                     });
}

Tensor activation(Activation kind, const Tensor& x, std::size_t class_axis) {
  switch (kind) {
    case Activation::sigmoid:
      return sigmoid(x);
    case Activation::relu:
      return relu(x);
    case Activation::softplus:
      return softplus(x);
    case Activation::log_softmax:
      return log_softmax(x, class_axis);
  }
  throw InvalidArgument("unknown activation");
}

Tensor reduce(Reduction stat, const Tensor& x, std::vector<std::size_t> axes, bool keep_dims) {
  if (axes.empty()) throw InvalidArgument("reduce: empty axis set");
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  Shape kept = x.shape();
  for (std::size_t a : axes) {
    if (a >= kept.size()) throw ShapeError("reduce: axis out of range for " + shape_str(x.shape()));
    kept[a] = 1;
  }
  Shape out_shape;
  if (keep_dims) {
    out_shape = kept;
  } else {
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (!std::binary_search(axes.begin(), axes.end(), i)) out_shape.push_back(kept[i]);
    }
  }
  const std::size_t m = shape_numel(kept);
  const std::size_t count = x.numel() / m;
  if (count == 0) throw ShapeError("reduce: zero-sized reduction");
  auto bc = std::make_shared<const Broadcast>(x.shape(), kept);
  const auto v = x.values();

  std::vector<double> acc(m, 0.0);
  bc->for_each([&](std::size_t i, std::size_t j) { acc[j] += v[i]; });
  if (stat == Reduction::sum) {
    return make_result("reduce_sum", out_shape, std::move(acc), {&x},
                       [bc](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                         if (!gin[0]) return;
                         double* gx = gin[0]->data();
                         bc->for_each([&](std::size_t i, std::size_t j) { gx[i] += g[j]; });
                       });
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (double& a : acc) a *= inv;
  if (stat == Reduction::mean) {
    return make_result("reduce_mean", out_shape, std::move(acc), {&x},
                       [bc, inv](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                         if (!gin[0]) return;
                         double* gx = gin[0]->data();
                         bc->for_each([&](std::size_t i, std::size_t j) { gx[i] += g[j] * inv; });
                       });
  }
  auto means = std::make_shared<std::vector<double>>(std::move(acc));
  std::vector<double> var(m, 0.0);
  bc->for_each([&](std::size_t i, std::size_t j) {
    const double d = v[i] - (*means)[j];
    var[j] += d * d;
  });
  for (double& s : var) s *= inv;
  return make_result("reduce_var", out_shape, std::move(var), {&x},
                     [x, bc, means, inv](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       const auto v = x.values();
                       double* gx = gin[0]->data();
                       bc->for_each([&](std::size_t i, std::size_t j) { gx[i] += g[j] * 2.0 * (v[i] - (*means)[j]) * inv; });
                     });
}

Tensor sum(const Tensor& x) {
  if (x.rank() == 0) return reshape(x, {});
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return reduce(Reduction::sum, x, std::move(axes), false);
}

Tensor mean(const Tensor& x) {
  if (x.rank() == 0) return reshape(x, {});
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return reduce(Reduction::mean, x, std::move(axes), false);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> values(x.values().begin(), x.values().end());
  return make_result("reshape", std::move(shape), std::move(values), {&x},
                     [](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                     });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    probe[axis] = out_shape[axis];
    if (probe != out_shape) throw ShapeError("concat: incompatible shapes");
    widths.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  out_shape[axis] = total;
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].values();
    const std::size_t w = widths[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * s.mid * s.inner + offset * s.inner));
    }
    offset += widths[p];
  }
  auto backward = [s, widths](std::span<const double> g, std::span<std::vector<double>* const> gin) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      const std::size_t w = widths[p] * s.inner;
      if (gin[p]) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          const std::size_t src = o * s.mid * s.inner + offset * s.inner;
          for (std::size_t j = 0; j < w; ++j) (*gin[p])[o * w + j] += g[src + j];
        }
      }
      offset += widths[p];
    }
  };
  std::vector<const Tensor*> operands;
  for (const Tensor& p : parts) operands.push_back(&p);
  return make_result("concat", out_shape, std::move(out), operands, backward);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  std::vector<double> out(n * m);
  MutMap(out.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m)).noalias() =
      ConstMap(a.values().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)) *
      ConstMap(b.values().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
  return make_result("matmul", {n, m}, std::move(out), {&a, &b},
                     [a, b, n, k, m](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       const auto N = static_cast<Eigen::Index>(n);
                       const auto K = static_cast<Eigen::Index>(k);
                       const auto M = static_cast<Eigen::Index>(m);
                       ConstMap G(g.data(), N, M);
                       if (gin[0]) MutMap(gin[0]->data(), N, K).noalias() += G * ConstMap(b.values().data(), K, M).transpose();
                       if (gin[1]) MutMap(gin[1]->data(), K, M).noalias() += ConstMap(a.values().data(), N, K).transpose() * G;
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  require_rank("linear", bias, 1);
  if (x.dim(1) != w.dim(0) || bias.dim(0) != w.dim(1)) {
    throw ShapeError("linear: shape mismatch x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) + " b" +
                     shape_str(bias.shape()));
  }
  return add(matmul(x, w), reshape(bias, {1, bias.dim(0)}));
}

Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& bias) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", k, 4);
  require_rank("conv2d", bias, 1);
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = k.dim(0);
  if (k.dim(1) != cin || k.dim(2) != 3 || k.dim(3) != 3 || bias.dim(0) != cout) {
    throw ShapeError("conv2d: kernel " + shape_str(k.shape()) + " / bias " + shape_str(bias.shape()) +
                     " incompatible with input " + shape_str(x.shape()));
  }
  const std::size_t hw = h * w;
  const std::size_t ck = cin * 9;
  auto cols = std::make_shared<std::vector<double>>(n * ck * hw, 0.0);
  const auto xv = x.values();
  for (std::size_t b = 0; b < n; ++b) {
    double* col = cols->data() + b * ck * hw;
    for (std::size_t c = 0; c < cin; ++c) {
      const double* plane = xv.data() + (b * cin + c) * hw;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          double* row = col + ((c * 3 + ky) * 3 + kx) * hw;
          for (std::size_t y = 0; y < h; ++y) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
              row[y * w + xx] = plane[static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)];
            }
          }
        }
      }
    }
  }

  const auto CO = static_cast<Eigen::Index>(cout);
  const auto CK = static_cast<Eigen::Index>(ck);
  const auto HW = static_cast<Eigen::Index>(hw);
  std::vector<double> out(n * cout * hw);
  ConstMap K(k.values().data(), CO, CK);
  const auto bv = bias.values();
  for (std::size_t b = 0; b < n; ++b) {
    MutMap O(out.data() + b * cout * hw, CO, HW);
    O.noalias() = K * ConstMap(cols->data() + b * ck * hw, CK, HW);
    for (std::size_t c = 0; c < cout; ++c) O.row(static_cast<Eigen::Index>(c)).array() += bv[c];
  }

  return make_result(
      "conv2d", {n, cout, h, w}, std::move(out), {&x, &k, &bias},
      [k, cols, n, cin, cout, h, w](std::span<const double> g, std::span<std::vector<double>* const> gin) {
        const std::size_t hw = h * w;
        const std::size_t ck = cin * 9;
        const auto CO = static_cast<Eigen::Index>(cout);
        const auto CK = static_cast<Eigen::Index>(ck);
        const auto HW = static_cast<Eigen::Index>(hw);
        ConstMap K(k.values().data(), CO, CK);
        std::vector<double> dcol(gin[0] ? ck * hw : 0);
        for (std::size_t b = 0; b < n; ++b) {
          ConstMap G(g.data() + b * cout * hw, CO, HW);
          ConstMap C(cols->data() + b * ck * hw, CK, HW);
          if (gin[1]) MutMap(gin[1]->data(), CO, CK).noalias() += G * C.transpose();
          if (gin[2]) {
            for (std::size_t c = 0; c < cout; ++c) (*gin[2])[c] += G.row(static_cast<Eigen::Index>(c)).sum();
          }
          if (gin[0]) {
            MutMap(dcol.data(), CK, HW).noalias() = K.transpose() * G;
            double* gx = gin[0]->data() + b * cin * hw;
            for (std::size_t c = 0; c < cin; ++c) {
              for (std::size_t ky = 0; ky < 3; ++ky) {
                for (std::size_t kx = 0; kx < 3; ++kx) {
                  const double* row = dcol.data() + ((c * 3 + ky) * 3 + kx) * hw;
                  for (std::size_t y = 0; y < h; ++y) {
                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t xx = 0; xx < w; ++xx) {
                      const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
                      if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                      gx[c * hw + static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] += row[y * w + xx];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

Tensor conv1x1(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank("conv1x1", x, 4);
  require_rank("conv1x1", w, 2);
  require_rank("conv1x1", bias, 1);
  const std::size_t n = x.dim(0), cin = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t cout = w.dim(1);
  if (w.dim(0) != cin || bias.dim(0) != cout) {
    throw ShapeError("conv1x1: weight " + shape_str(w.shape()) + " / bias " + shape_str(bias.shape()) +
                     " incompatible with input " + shape_str(x.shape()));
  }
  const auto CI = static_cast<Eigen::Index>(cin);
  const auto CO = static_cast<Eigen::Index>(cout);
  const auto HW = static_cast<Eigen::Index>(hw);
  std::vector<double> out(n * cout * hw);
  ConstMap W(w.values().data(), CI, CO);
  const auto bv = bias.values();
  for (std::size_t b = 0; b < n; ++b) {
    MutMap O(out.data() + b * cout * hw, CO, HW);
    O.noalias() = W.transpose() * ConstMap(x.values().data() + b * cin * hw, CI, HW);
    for (std::size_t c = 0; c < cout; ++c) O.row(static_cast<Eigen::Index>(c)).array() += bv[c];
  }
  return make_result("conv1x1", {n, cout, x.dim(2), x.dim(3)}, std::move(out), {&x, &w, &bias},
                     [x, w, n, cin, cout, hw](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       const auto CI = static_cast<Eigen::Index>(cin);
                       const auto CO = static_cast<Eigen::Index>(cout);
                       const auto HW = static_cast<Eigen::Index>(hw);
                       ConstMap W(w.values().data(), CI, CO);
                       for (std::size_t b = 0; b < n; ++b) {
                         ConstMap G(g.data() + b * cout * hw, CO, HW);
                         ConstMap X(x.values().data() + b * cin * hw, CI, HW);
                         if (gin[0]) MutMap(gin[0]->data() + b * cin * hw, CI, HW).noalias() += W * G;
                         if (gin[1]) MutMap(gin[1]->data(), CI, CO).noalias() += X * G.transpose();
                         if (gin[2]) {
                           for (std::size_t c = 0; c < cout; ++c) (*gin[2])[c] += G.row(static_cast<Eigen::Index>(c)).sum();
                         }
                       }
                     });
}

Tensor avg_pool2(const Tensor& x) {
  require_rank("avg_pool2", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("avg_pool2: odd spatial size " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  const auto v = x.values();
  std::vector<double> out(n * c * oh * ow);
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = v.data() + p * h * w;
    double* dst = out.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const double* s = src + 2 * y * w + 2 * xx;
        dst[y * ow + xx] = 0.25 * (s[0] + s[1] + s[w] + s[w + 1]);
      }
    }
  }
  return make_result("avg_pool2", {n, c, oh, ow}, std::move(out), {&x},
                     [n, c, h, w](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       const std::size_t oh = h / 2, ow = w / 2;
                       for (std::size_t p = 0; p < n * c; ++p) {
                         double* dst = gin[0]->data() + p * h * w;
                         const double* src = g.data() + p * oh * ow;
                         for (std::size_t y = 0; y < oh; ++y) {
                           for (std::size_t xx = 0; xx < ow; ++xx) {
                             const double q = 0.25 * src[y * ow + xx];
                             double* d = dst + 2 * y * w + 2 * xx;
                             d[0] += q;
                             d[1] += q;
                             d[w] += q;
                             d[w + 1] += q;
                           }
                         }
                       }
                     });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (x.rank() < 2) throw ShapeError("upsample_nearest: need at least two axes");
  if (factor == 0) throw InvalidArgument("upsample_nearest: factor must be positive");
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (h * w);
  const std::size_t oh = h * factor, ow = w * factor;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  const auto v = x.values();
  std::vector<double> out(planes * oh * ow);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        out[(p * oh + y) * ow + xx] = v[(p * h + y / factor) * w + xx / factor];
      }
    }
  }
  return make_result("upsample_nearest", out_shape, std::move(out), {&x},
                     [planes, h, w, factor](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       const std::size_t oh = h * factor, ow = w * factor;
                       for (std::size_t p = 0; p < planes; ++p) {
                         for (std::size_t y = 0; y < oh; ++y) {
                           for (std::size_t xx = 0; xx < ow; ++xx) {
                             (*gin[0])[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
                           }
                         }
                       }
                     });
}

Tensor pairwise_sq_dists(const Tensor& x, const Tensor& y) {
  require_rank("pairwise_sq_dists", x, 2);
  require_rank("pairwise_sq_dists", y, 2);
  const std::size_t n = x.dim(0), m = y.dim(0), d = x.dim(1);
  if (y.dim(1) != d) throw ShapeError("pairwise_sq_dists: feature widths differ");
  const auto xv = x.values();
  const auto yv = y.values();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = xv[i * d + c] - yv[j * d + c];
        acc += diff * diff;
      }
      out[i * m + j] = acc;
    }
  }
  return make_result("pairwise_sq_dists", {n, m}, std::move(out), {&x, &y},
                     [x, y, n, m, d](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       const auto xv = x.values();
                       const auto yv = y.values();
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < m; ++j) {
                           const double gij = 2.0 * g[i * m + j];
                           if (gij == 0.0) continue;
                           for (std::size_t c = 0; c < d; ++c) {
                             const double diff = xv[i * d + c] - yv[j * d + c];
                             if (gin[0]) (*gin[0])[i * d + c] += gij * diff;
                             if (gin[1]) (*gin[1])[j * d + c] -= gij * diff;
                           }
                         }
                       }
                     });
}

Tensor scale_gradient(const Tensor& x, double factor) {
  std::vector<double> values(x.values().begin(), x.values().end());
  return make_result("scale_gradient", x.shape(), std::move(values), {&x},
                     [factor](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += factor * g[i];
                     });
}

Tensor cross_entropy_soft(const Tensor& logits, const Tensor& targets, std::size_t class_axis) {
  require_same_shape("cross_entropy_soft", logits, targets);
  check_distribution(targets, class_axis, 1e-6, "cross_entropy_soft targets");
  const AxisSplit s = split_at(logits.shape(), class_axis);
  const std::size_t positions = s.outer * s.inner;
  const auto z = logits.values();
  const auto t = targets.values();
  auto probs = std::make_shared<std::vector<double>>(z.size());
  double loss = 0.0;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.mid * s.inner + in;
      double hi = z[base];
      for (std::size_t k = 1; k < s.mid; ++k) hi = std::max(hi, z[base + k * s.inner]);
      double acc = 0.0;
      for (std::size_t k = 0; k < s.mid; ++k) acc += std::exp(z[base + k * s.inner] - hi);
      const double lse = hi + std::log(acc);
      for (std::size_t k = 0; k < s.mid; ++k) {
        const std::size_t i = base + k * s.inner;
        const double ls = z[i] - lse;
        (*probs)[i] = std::exp(ls);
        if (t[i] != 0.0) loss -= t[i] * ls;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(positions);
  return make_result("cross_entropy_soft", {}, {loss * inv}, {&logits},
                     [targets, probs, s, inv](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       const auto t = targets.values();
                       const double scale = g[0] * inv;
                       for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t in = 0; in < s.inner; ++in) {
                           const std::size_t base = o * s.mid * s.inner + in;
                           double tsum = 0.0;
                           for (std::size_t k = 0; k < s.mid; ++k) tsum += t[base + k * s.inner];
                           for (std::size_t k = 0; k < s.mid; ++k) {
                             const std::size_t i = base + k * s.inner;
                             (*gin[0])[i] += scale * ((*probs)[i] * tsum - t[i]);
                           }
                         }
                       }
                     });
}

Tensor mean_entropy(const Tensor& probs, std::size_t class_axis) {
  check_distribution(probs, class_axis, 1e-6, "mean_entropy");
  const AxisSplit s = split_at(probs.shape(), class_axis);
  const double inv = 1.0 / static_cast<double>(s.outer * s.inner);
  double h = 0.0;
  for (double p : probs.values()) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return make_result("mean_entropy", {}, {h * inv}, {&probs},
                     [probs, inv](std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       if (!gin[0]) return;
                       const auto p = probs.values();
                       for (std::size_t i = 0; i < p.size(); ++i) {
                         if (p[i] > 0.0) (*gin[0])[i] -= g[0] * inv * (std::log(p[i]) + 1.0);
                       }
                     });
}

}  // namespace drsf
