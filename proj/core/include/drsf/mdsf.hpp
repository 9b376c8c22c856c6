// Multi-pseudo-domain soft fusion.
//
// Source primary features are interpolated with each pseudo domain's gain
// features using a Beta-sampled coefficient; the matching domain labels are
// interpolated with the same coefficient. A gradient-reversed domain
// classifier is trained on source, pseudo and averaged fused features.
//
// Domain label codebook: index 0 is the source, 1..K are pseudo domains.
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "drsf/optim.hpp"
#include "drsf/rng.hpp"
#include "drsf/tensor.hpp"

namespace drsf::mdsf {

struct DomainLabel {
  std::vector<double> distribution;

  static DomainLabel one_hot(std::size_t index, std::size_t num_domains);
  /// Throws unless entries are non-negative and sum to 1 within `tol`.
  void validate(double tol = 1e-9) const;
};

struct FusedBatch {
  Tensor features;
  std::vector<DomainLabel> labels;  // one per sample
  double lambda_used = 0.5;
  std::optional<std::size_t> domain_index;  // nullopt once averaged
};

struct GrlConfig {
  double factor = 1.0;
};

/// Hidden width defaults to 64; operates on globally average-pooled features.
struct DomainClassifierParams {
  Tensor hidden_w;  // [C x Hd]
  Tensor hidden_b;  // [Hd]
  Tensor out_w;     // [Hd x (K+1)]
  Tensor out_b;     // [K+1]

  std::size_t num_domains() const { return out_b.numel(); }
};

inline constexpr double kLambdaClamp = 1e-6;

/// One Beta(alpha, alpha) draw (two gamma draws), clamped to [1e-6, 1 - 1e-6].
double sample_lambda(double alpha, RngStream& rng);

/// lambda * source_pri + (1 - lambda) * pseudo_gain.
Tensor fuse_features(const Tensor& source_pri, const Tensor& pseudo_gain, double lambda);

DomainLabel fuse_labels(const DomainLabel& source, const DomainLabel& pseudo, double lambda);

/// Arithmetic mean of features and label distributions.
FusedBatch average_fusions(std::span<const FusedBatch> fusions);

/// Gradient reversal: identity forward, gradient scaled by -factor.
Tensor grl(const Tensor& x, const GrlConfig& cfg);

/// Global average pool -> relu(linear) -> linear logits [N x (K+1)].
Tensor domain_classifier_forward(const Tensor& features, const DomainClassifierParams& params);

/// Stacks per-sample labels into an [N x (K+1)] target tensor.
Tensor label_tensor(std::span<const DomainLabel> labels);

/// CE(D(grl(F_s)), L_s) + mean_i CE(D(grl(F_pt_i)), L_pt_i) + CE(D(grl(F_sf)), L_sf).
Tensor adversarial_loss(const Tensor& source_gain, std::span<const Tensor> pseudo_gains, const FusedBatch& fused_avg,
                        const DomainClassifierParams& params, const GrlConfig& grl_cfg);

}  // namespace drsf::mdsf
