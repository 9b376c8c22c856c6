#include "drsf/grad_suite.hpp"

#include <algorithm>
#include <cmath>

#include "drsf/dfdr.hpp"
#include "drsf/mdsf.hpp"
#include "drsf/ops.hpp"
#include "drsf/rng.hpp"

namespace drsf {

namespace {

using Fn = std::function<Tensor(std::span<const Tensor>)>;

Tensor normal(RngStream& rng, Shape shape, double sd = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = sd * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

Tensor uniform(RngStream& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Values bounded away from zero so kinks (relu) and poles (div) stay out of the stencil.
Tensor away_from_zero(RngStream& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

Tensor distribution(RngStream& rng, Shape shape) { return softmax(normal(rng, std::move(shape)), 1).detach(); }

// Projects a tensor-valued output onto a fixed random direction.
Tensor project(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

GradCase unary(std::string name, Shape shape, std::function<Tensor(RngStream&, Shape)> sample,
               std::function<Tensor(const Tensor&)> op) {
  return {std::move(name), [shape, sample, op](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
            in = {sample(rng, shape)};
            const Tensor w = normal(rng, op(in[0]).shape());
            f = [op, w](std::span<const Tensor> x) { return project(op(x[0]), w); };
          }};
}

GradCase binary(std::string name, Shape a, Shape b, std::function<Tensor(RngStream&, Shape)> sample_b,
                std::function<Tensor(const Tensor&, const Tensor&)> op) {
  return {std::move(name), [a, b, sample_b, op](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
            in = {normal(rng, a), sample_b(rng, b)};
            const Tensor w = normal(rng, op(in[0], in[1]).shape());
            f = [op, w](std::span<const Tensor> x) { return project(op(x[0], x[1]), w); };
          }};
}

Tensor sample_normal(RngStream& rng, Shape s) { return normal(rng, std::move(s)); }

}  // namespace

std::vector<GradCase> standard_grad_cases() {
  std::vector<GradCase> cases;
  const auto positive = [](RngStream& rng, Shape s) { return uniform(rng, std::move(s), 0.5, 2.0); };
  const auto nonzero = [](RngStream& rng, Shape s) { return away_from_zero(rng, std::move(s), 0.5, 2.0); };
  const auto kink_free = [](RngStream& rng, Shape s) { return away_from_zero(rng, std::move(s), 0.05, 2.0); };

  cases.push_back(binary("add", {2, 3, 4}, {2, 3, 4}, sample_normal, [](auto& a, auto& b) { return add(a, b); }));
  cases.push_back(binary("add_broadcast", {2, 3, 4}, {1, 3, 1}, sample_normal, [](auto& a, auto& b) { return add(a, b); }));
  cases.push_back(binary("sub", {3, 4}, {1, 4}, sample_normal, [](auto& a, auto& b) { return sub(a, b); }));
  cases.push_back(binary("mul", {2, 3, 4}, {2, 1, 4}, sample_normal, [](auto& a, auto& b) { return mul(a, b); }));
  cases.push_back(binary("div", {3, 4}, {3, 4}, nonzero, [](auto& a, auto& b) { return div(a, b); }));
  cases.push_back(unary("affine", {3, 5}, sample_normal, [](const Tensor& x) { return affine(x, -1.7, 0.3); }));
  cases.push_back(unary("broadcast_to", {1, 3, 1}, sample_normal, [](const Tensor& x) { return broadcast_to(x, {2, 3, 4}); }));
  cases.push_back(unary("sqrt", {3, 4}, positive, [](const Tensor& x) { return sqrt(x); }));
  cases.push_back(unary("exp", {3, 4}, sample_normal, [](const Tensor& x) { return exp(x); }));
  cases.push_back(unary("log", {3, 4}, positive, [](const Tensor& x) { return log(x); }));
  cases.push_back(unary("sigmoid", {3, 4}, sample_normal, [](const Tensor& x) { return sigmoid(x); }));
  cases.push_back(unary("relu", {3, 4}, kink_free, [](const Tensor& x) { return relu(x); }));
  cases.push_back(unary("softplus", {3, 4}, sample_normal, [](const Tensor& x) { return softplus(x); }));
  cases.push_back(unary("log_softmax", {2, 4, 3}, sample_normal, [](const Tensor& x) { return log_softmax(x, 1); }));
  cases.push_back(unary("softmax", {2, 4, 3}, sample_normal, [](const Tensor& x) { return softmax(x, 1); }));
  cases.push_back(unary("reduce_sum", {2, 3, 4}, sample_normal,
                        [](const Tensor& x) { return reduce(Reduction::sum, x, {0, 2}, false); }));
  cases.push_back(unary("reduce_mean", {2, 3, 4}, sample_normal,
                        [](const Tensor& x) { return reduce(Reduction::mean, x, {1}, true); }));
  cases.push_back(unary("reduce_var", {2, 3, 4}, sample_normal,
                        [](const Tensor& x) { return reduce(Reduction::var, x, {2}, false); }));
  cases.push_back(unary("reshape", {2, 6}, sample_normal, [](const Tensor& x) { return reshape(x, {3, 4}); }));
  cases.push_back(binary("concat", {2, 3}, {2, 2}, sample_normal, [](const Tensor& a, const Tensor& b) {
    const Tensor parts[] = {a, b};
    return concat(parts, 1);
  }));
  cases.push_back(binary("matmul", {3, 4}, {4, 2}, sample_normal, [](auto& a, auto& b) { return matmul(a, b); }));
  cases.push_back({"linear", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {3, 4}), normal(rng, {4, 2}), normal(rng, {2})};
                     const Tensor w = normal(rng, {3, 2});
                     f = [w](std::span<const Tensor> x) { return project(linear(x[0], x[1], x[2]), w); };
                   }});
  cases.push_back({"conv2d", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {2, 2, 5, 4}), normal(rng, {3, 2, 3, 3}, 0.5), normal(rng, {3})};
                     const Tensor w = normal(rng, {2, 3, 5, 4});
                     f = [w](std::span<const Tensor> x) { return project(conv2d(x[0], x[1], x[2]), w); };
                   }});
  cases.push_back({"conv1x1", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {2, 3, 2, 3}), normal(rng, {3, 4}), normal(rng, {4})};
                     const Tensor w = normal(rng, {2, 4, 2, 3});
                     f = [w](std::span<const Tensor> x) { return project(conv1x1(x[0], x[1], x[2]), w); };
                   }});
  cases.push_back(unary("avg_pool2", {2, 2, 4, 6}, sample_normal, [](const Tensor& x) { return avg_pool2(x); }));
  cases.push_back(unary("upsample_nearest", {2, 2, 2, 3}, sample_normal,
                        [](const Tensor& x) { return upsample_nearest(x, 2); }));
  cases.push_back(binary("pairwise_sq_dists", {3, 4}, {5, 4}, sample_normal,
                         [](auto& a, auto& b) { return pairwise_sq_dists(a, b); }));
  cases.push_back({"cross_entropy_soft", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {2, 4, 2, 3})};
                     const Tensor t = distribution(rng, {2, 4, 2, 3});
                     f = [t](std::span<const Tensor> x) { return cross_entropy_soft(x[0], t, 1); };
                   }});
  cases.push_back(unary("mean_entropy", {3, 4}, sample_normal,
                        [](const Tensor& x) { return mean_entropy(softmax(x, 1), 1); }));

  // Feature-disentanglement pieces.
  cases.push_back(unary("instance_stats", {2, 3, 3, 4}, sample_normal, [](const Tensor& x) {
    const dfdr::InstanceStats s = dfdr::instance_stats(x, dfdr::kDefaultEpsilon);
    const Tensor parts[] = {s.mu, s.sigma};
    return concat(parts, 1);
  }));
  cases.push_back({"decouple", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {2, 3, 3, 4}), uniform(rng, {3}, 0.5, 1.5), normal(rng, {3}, 0.3)};
                     const Tensor wp = normal(rng, {2, 3, 3, 4});
                     const Tensor ws = normal(rng, {2, 3, 3, 4});
                     f = [wp, ws](std::span<const Tensor> x) {
                       const dfdr::DecoupledFeatures d = dfdr::decouple(x[0], {x[1], x[2], dfdr::kDefaultEpsilon});
                       return add(project(d.f_pri, wp), project(d.f_sha, ws));
                     };
                   }});
  cases.push_back({"style_descriptor", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {2, 3, 3, 4}), uniform(rng, {3}, 0.5, 1.5), normal(rng, {3}, 0.3)};
                     const Tensor w = normal(rng, {2, 3, 2});
                     f = [w](std::span<const Tensor> x) {
                       const dfdr::DecoupledFeatures d = dfdr::decouple(x[0], {x[1], x[2], dfdr::kDefaultEpsilon});
                       return project(dfdr::style_descriptor(d), w);
                     };
                   }});
  cases.push_back({"cra_forward", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {4, 3, 2}), normal(rng, {3, 2}, 0.7), uniform(rng, {3}, 0.5, 1.5),
                           normal(rng, {3}, 0.3)};
                     const Tensor w = normal(rng, {4, 3});
                     f = [w](std::span<const Tensor> x) {
                       dfdr::CraParams p{x[1], x[2], x[3], dfdr::RunningStats::identity(3)};
                       return project(dfdr::cra_forward(x[0], p, Mode::train).attention, w);
                     };
                   }});
  cases.push_back({"reassemble", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {2, 3, 2, 3}), uniform(rng, {2, 3}, 0.1, 0.9)};
                     const Tensor wg = normal(rng, {2, 3, 2, 3});
                     const Tensor wi = normal(rng, {2, 3, 2, 3});
                     f = [wg, wi](std::span<const Tensor> x) {
                       const Tensor ones = Tensor::full({3}, 1.0);
                       const Tensor zeros = Tensor::zeros({3});
                       const dfdr::DecoupledFeatures d = dfdr::decouple(x[0], {ones, zeros, dfdr::kDefaultEpsilon});
                       const dfdr::ReassembledFeatures r = dfdr::reassemble(d, x[1]);
                       return add(project(r.gain, wg), project(r.interference, wi));
                     };
                   }});
  cases.push_back({"mmd_squared", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {4, 3}), normal(rng, {5, 3}, 1.3)};
                     // Fixed bandwidth: the median heuristic is piecewise constant in the inputs.
                     dfdr::MmdConfig cfg;
                     cfg.bandwidth = dfdr::MmdConfig::Bandwidth::fixed;
                     cfg.fixed_bandwidth = 1.5;
                     f = [cfg](std::span<const Tensor> x) { return dfdr::mmd_squared(x[0], x[1], cfg); };
                   }});
  cases.push_back(unary("prediction_entropy", {2, 4, 2, 3}, sample_normal, [](const Tensor& x) {
    return dfdr::prediction_entropy(softmax(x, 1), TaskMode::segmentation);
  }));
  cases.push_back({"reassembly_loss", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {uniform(rng, {}, 0.0, 2.0), uniform(rng, {}, 0.0, 2.0), uniform(rng, {}, 0.0, 2.0)};
                     f = [](std::span<const Tensor> x) { return dfdr::reassembly_loss(x[0], x[1], x[2]); };
                   }});
  cases.push_back({"dfdr_layer", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {3, 4, 3, 3}), uniform(rng, {4}, 0.5, 1.5), normal(rng, {4}, 0.3),
                           normal(rng, {4, 2}, 0.7), uniform(rng, {4}, 0.5, 1.5), normal(rng, {4}, 0.3)};
                     const Tensor wg = normal(rng, {3, 4, 3, 3});
                     const Tensor wi = normal(rng, {3, 4, 3, 3});
                     f = [wg, wi](std::span<const Tensor> x) {
                       dfdr::CraParams cra{x[3], x[4], x[5], dfdr::RunningStats::identity(4)};
                       const dfdr::LayerOutput out =
                           dfdr::dfdr_layer_forward(x[0], {x[1], x[2], dfdr::kDefaultEpsilon}, cra, Mode::train);
                       return add(project(out.gain, wg), project(out.side->reassembled.interference, wi));
                     };
                   }});

  // Fusion and the domain classifier.
  cases.push_back(binary("fuse_features", {2, 3, 2, 2}, {2, 3, 2, 2}, sample_normal,
                         [](auto& a, auto& b) { return mdsf::fuse_features(a, b, 0.37); }));
  cases.push_back({"domain_classifier", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {3, 4, 2, 2}), normal(rng, {4, 5}, 0.5), normal(rng, {5}, 0.2),
                           normal(rng, {5, 3}, 0.5), normal(rng, {3}, 0.2)};
                     const Tensor w = normal(rng, {3, 3});
                     f = [w](std::span<const Tensor> x) {
                       return project(mdsf::domain_classifier_forward(x[0], {x[1], x[2], x[3], x[4]}), w);
                     };
                   }});
  // Gradient reversal is not a true derivative, so only the classifier parameters are checked here.
  cases.push_back({"adversarial_loss_classifier", [](RngStream& rng, std::vector<Tensor>& in, Fn& f) {
                     in = {normal(rng, {4, 5}, 0.5), normal(rng, {5}, 0.2), normal(rng, {5, 3}, 0.5),
                           normal(rng, {3}, 0.2)};
                     const Tensor src = normal(rng, {2, 4, 2, 2});
                     std::vector<Tensor> pts = {normal(rng, {2, 4, 2, 2}), normal(rng, {2, 4, 2, 2})};
                     mdsf::FusedBatch fused;
                     fused.features = normal(rng, {2, 4, 2, 2});
                     const mdsf::DomainLabel a = mdsf::fuse_labels(mdsf::DomainLabel::one_hot(0, 3),
                                                                   mdsf::DomainLabel::one_hot(1, 3), 0.3);
                     fused.labels = {a, a};
                     f = [src, pts, fused](std::span<const Tensor> x) {
                       return mdsf::adversarial_loss(src, pts, fused, {x[0], x[1], x[2], x[3]}, mdsf::GrlConfig{1.0});
                     };
                   }});
  return cases;
}

std::vector<GradCaseResult> run_grad_suite(std::size_t instances, std::uint64_t seed, const GradCheckOptions& options) {
  std::vector<GradCaseResult> results;
  for (const GradCase& c : standard_grad_cases()) {
    GradCaseResult r{c.name, instances, 0.0};
    RngStream rng(mix_seed(seed, tag_hash(c.name)));
    for (std::size_t i = 0; i < instances; ++i) {
      std::vector<Tensor> inputs;
      std::function<Tensor(std::span<const Tensor>)> f;
      try {
        c.make(rng, inputs, f);
        r.worst_rel_error = std::max(r.worst_rel_error, grad_check(f, inputs, options).max_rel_error);
      } catch (const Error& e) {
        throw Error("grad case " + c.name + ": " + e.what());
      }
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace drsf
