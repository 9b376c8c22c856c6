#include "drsf/mdsf.hpp"

#include <algorithm>
#include <cmath>

#include "drsf/ops.hpp"

namespace drsf::mdsf {

DomainLabel DomainLabel::one_hot(std::size_t index, std::size_t num_domains) {
  if (index >= num_domains) throw InvalidArgument("DomainLabel::one_hot: index out of range");
  DomainLabel label;
  label.distribution.assign(num_domains, 0.0);
  label.distribution[index] = 1.0;
  return label;
}

void DomainLabel::validate(double tol) const {
  if (distribution.empty()) throw InvalidArgument("DomainLabel: empty distribution");
  double total = 0.0;
  for (double p : distribution) {
    if (!(p >= 0.0)) throw InvalidArgument("DomainLabel: negative or non-finite entry");
    total += p;
  }
  if (std::abs(total - 1.0) > tol) throw InvalidArgument("DomainLabel: entries do not sum to 1");
}

double sample_lambda(double alpha, RngStream& rng) {
  if (!(alpha > 0.0)) throw InvalidArgument("sample_lambda: alpha must be positive");
  return std::clamp(rng.beta(alpha, alpha), kLambdaClamp, 1.0 - kLambdaClamp);
}

namespace {

void check_lambda(double lambda) {
  if (!(lambda > 0.0 && lambda < 1.0)) throw InvalidArgument("fusion coefficient must lie in (0,1)");
}

}  // namespace

Tensor fuse_features(const Tensor& source_pri, const Tensor& pseudo_gain, double lambda) {
  check_lambda(lambda);
  if (source_pri.shape() != pseudo_gain.shape()) {
    throw ShapeError("fuse_features: shape mismatch " + shape_str(source_pri.shape()) + " vs " +
                     shape_str(pseudo_gain.shape()));
  }
  OpScope scope("mdsf/fuse");
  return add(scale(source_pri, lambda), scale(pseudo_gain, 1.0 - lambda));
}

DomainLabel fuse_labels(const DomainLabel& source, const DomainLabel& pseudo, double lambda) {
  check_lambda(lambda);
  source.validate();
  pseudo.validate();
  if (source.distribution.size() != pseudo.distribution.size()) {
    throw InvalidArgument("fuse_labels: label widths differ");
  }
  DomainLabel out;
  out.distribution.resize(source.distribution.size());
  for (std::size_t i = 0; i < out.distribution.size(); ++i) {
    out.distribution[i] = lambda * source.distribution[i] + (1.0 - lambda) * pseudo.distribution[i];
  }
  return out;
}

FusedBatch average_fusions(std::span<const FusedBatch> fusions) {
  if (fusions.empty()) throw InvalidArgument("average_fusions: no fusions to average");
  OpScope scope("mdsf/average");
  const std::size_t k = fusions.size();
  const std::size_t n = fusions[0].labels.size();
  for (const FusedBatch& f : fusions) {
    if (f.features.shape() != fusions[0].features.shape() || f.labels.size() != n) {
      throw ShapeError("average_fusions: fusions have different shapes");
    }
  }
  FusedBatch out;
  Tensor total = fusions[0].features;
  for (std::size_t i = 1; i < k; ++i) total = add(total, fusions[i].features);
  const double inv = 1.0 / static_cast<double>(k);
  out.features = k == 1 ? fusions[0].features : scale(total, inv);

  out.labels.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t width = fusions[0].labels[s].distribution.size();
    std::vector<double> acc(width, 0.0);
    for (const FusedBatch& f : fusions) {
      if (f.labels[s].distribution.size() != width) throw ShapeError("average_fusions: label widths differ");
      for (std::size_t j = 0; j < width; ++j) acc[j] += f.labels[s].distribution[j];
    }
    if (k != 1) {
      for (double& a : acc) a *= inv;
    }
    out.labels[s].distribution = std::move(acc);
  }
  double lambda_total = 0.0;
  for (const FusedBatch& f : fusions) lambda_total += f.lambda_used;
  out.lambda_used = lambda_total * inv;
  out.domain_index.reset();
  return out;
}

Tensor grl(const Tensor& x, const GrlConfig& cfg) {
  if (!(cfg.factor >= 0.0)) throw InvalidArgument("grl: factor must be non-negative");
  OpScope scope("mdsf/grl");
  return scale_gradient(x, -cfg.factor);
}

Tensor domain_classifier_forward(const Tensor& features, const DomainClassifierParams& params) {
  OpScope scope("mdsf/classifier");
  if (features.rank() != 4) throw ShapeError("domain classifier expects N x C x H x W features");
  if (params.hidden_w.rank() != 2 || features.dim(1) != params.hidden_w.dim(0)) {
    throw ShapeError("domain classifier: channel count " + std::to_string(features.dim(1)) +
                     " does not match hidden layer " + shape_str(params.hidden_w.shape()));
  }
  const Tensor pooled = reduce(Reduction::mean, features, {2, 3}, false);
  const Tensor hidden = relu(linear(pooled, params.hidden_w, params.hidden_b));
  return linear(hidden, params.out_w, params.out_b);
}

Tensor label_tensor(std::span<const DomainLabel> labels) {
  if (labels.empty()) throw InvalidArgument("label_tensor: no labels");
  const std::size_t width = labels[0].distribution.size();
  std::vector<double> values;
  values.reserve(labels.size() * width);
  for (const DomainLabel& l : labels) {
    if (l.distribution.size() != width) throw ShapeError("label_tensor: label widths differ");
    values.insert(values.end(), l.distribution.begin(), l.distribution.end());
  }
  return Tensor({labels.size(), width}, std::move(values));
}

namespace {

Tensor uniform_label_targets(std::size_t n, std::size_t index, std::size_t num_domains) {
  const DomainLabel label = DomainLabel::one_hot(index, num_domains);
  std::vector<DomainLabel> labels(n, label);
  return label_tensor(labels);
}

}  // namespace

Tensor adversarial_loss(const Tensor& source_gain, std::span<const Tensor> pseudo_gains, const FusedBatch& fused_avg,
                        const DomainClassifierParams& params, const GrlConfig& grl_cfg) {
  if (pseudo_gains.empty()) throw InvalidArgument("adversarial_loss: at least one pseudo domain is required");
  const std::size_t num_domains = params.num_domains();
  if (num_domains != pseudo_gains.size() + 1) {
    throw ShapeError("adversarial_loss: classifier has " + std::to_string(num_domains) + " outputs for " +
                     std::to_string(pseudo_gains.size()) + " pseudo domains");
  }
  OpScope scope("loss/adv");
  auto ce = [&](const Tensor& features, const Tensor& targets) {
    return cross_entropy_soft(domain_classifier_forward(grl(features, grl_cfg), params), targets, 1);
  };

  const Tensor source_term = ce(source_gain, uniform_label_targets(source_gain.dim(0), 0, num_domains));
  Tensor pseudo_total;
  for (std::size_t i = 0; i < pseudo_gains.size(); ++i) {
    Tensor term = ce(pseudo_gains[i], uniform_label_targets(pseudo_gains[i].dim(0), i + 1, num_domains));
    pseudo_total = i == 0 ? term : add(pseudo_total, term);
  }
  const Tensor pseudo_term = scale(pseudo_total, 1.0 / static_cast<double>(pseudo_gains.size()));
  const Tensor fused_term = ce(fused_avg.features, label_tensor(fused_avg.labels));
  return add(add(source_term, pseudo_term), fused_term);
}

}  // namespace drsf::mdsf
