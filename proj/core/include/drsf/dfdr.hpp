// Discriminative feature decoupling and reassembly.
//
// An instance-normalization split of N x C x H x W activations into a primary
// part (normalized, affine-transformed) and a shared residual, a channel gate
// computed from the shared part's statistics, and two complementary
// reassemblies of the halves. Alignment (MMD) and entropy-ordering losses live
// here too because they consume the split directly.
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "drsf/tensor.hpp"
#include "drsf/types.hpp"

namespace drsf::dfdr {

inline constexpr double kDefaultEpsilon = 1e-5;

struct AffineParams {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  double epsilon = kDefaultEpsilon;
};

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;

  static RunningStats identity(std::size_t channels);
};

struct CraParams {
  Tensor weight;    // [C x 2], acting on (mean, std) of the shared part
  Tensor bn_gamma;  // [C]
  Tensor bn_beta;   // [C]
  RunningStats running;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;
};

struct InstanceStats {
  Tensor mu;     // [N x C]
  Tensor sigma;  // [N x C], sqrt(population variance + epsilon)
};

struct DecoupledFeatures {
  Tensor f_pri;
  Tensor f_sha;
  Tensor mu;
  Tensor sigma;
};

struct ReassembledFeatures {
  Tensor gain;
  Tensor interference;
  Tensor attention;  // [N x C]
};

struct CraResult {
  Tensor attention;
  /// Running statistics after this call (unchanged in eval mode).
  RunningStats running;
};

struct MmdConfig {
  enum class Bandwidth { median_heuristic, fixed };
  Bandwidth bandwidth = Bandwidth::median_heuristic;
  double fixed_bandwidth = 1.0;
};

InstanceStats instance_stats(const Tensor& f, double epsilon);

DecoupledFeatures decouple(const Tensor& f, const AffineParams& affine);

/// Q[n,c] = [mu(F_sha) || sigma(F_sha)], shape [N x C x 2].
Tensor style_descriptor(const DecoupledFeatures& decoupled, double epsilon = kDefaultEpsilon);

/// Channel recalibration attention: per-channel linear map of q, batch
/// normalization over the batch axis, sigmoid. Train mode requires N >= 2 and
/// folds the population batch statistics into the running averages.
CraResult cra_forward(const Tensor& q, const CraParams& params, Mode mode);

/// gain = f_pri + V * f_sha, interference = f_pri + (1 - V) * f_sha.
ReassembledFeatures reassemble(const DecoupledFeatures& decoupled, const Tensor& attention);

/// Resolved RBF bandwidth for a pair of pooled sample sets.
double resolve_bandwidth(const Tensor& x, const Tensor& y, const MmdConfig& cfg);

/// Biased RBF MMD^2 between sample sets [n x d] and [m x d]; kernel exp(-d^2 / (2 h^2)).
Tensor mmd_squared(const Tensor& x, const Tensor& y, const MmdConfig& cfg);

/// Feature maps are globally average pooled to [N x C]; returns the mean over
/// pseudo domains of MMD^2(source, pseudo_i).
Tensor mmd_loss(const Tensor& source_pri, std::span<const Tensor> pseudo_pri, const MmdConfig& cfg = {});

/// Mean Shannon entropy (nats). Classification expects [N x K]; segmentation
/// expects [N x K x H x W] and averages over every pixel of every sample.
Tensor prediction_entropy(const Tensor& probs, TaskMode mode);

/// softplus(h_gain - h_pri) + softplus(h_pri - h_interf).
Tensor reassembly_loss(const Tensor& h_gain, const Tensor& h_pri, const Tensor& h_interf);

struct LayerSide {
  DecoupledFeatures decoupled;
  ReassembledFeatures reassembled;
};

struct LayerOutput {
  Tensor gain;
  std::optional<LayerSide> side;  // train mode only
  RunningStats running;
};

/// Full decouple -> descriptor -> attention -> reassembly pipeline. Eval mode
/// uses running statistics and builds the gain branch only.
LayerOutput dfdr_layer_forward(const Tensor& f, const AffineParams& affine, const CraParams& cra, Mode mode);

}  // namespace drsf::dfdr
