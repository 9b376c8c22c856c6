#include "drsf/dfdr.hpp"

#include <algorithm>
#include <cmath>

#include "drsf/ops.hpp"

namespace drsf::dfdr {

namespace {

void require_feature_map(const char* op, const Tensor& f) {
  if (f.rank() != 4) throw ShapeError(std::string(op) + ": expected N x C x H x W, got " + shape_str(f.shape()));
}

Tensor per_channel(const Tensor& v, std::size_t channels) {
  if (v.rank() != 1 || v.dim(0) != channels) {
    throw ShapeError("per-channel parameter " + shape_str(v.shape()) + " does not match " + std::to_string(channels) +
                     " channels");
  }
  return reshape(v, {1, channels, 1, 1});
}

Tensor pooled(const Tensor& f) {
  if (f.rank() == 2) return f;
  require_feature_map("mmd", f);
  return reduce(Reduction::mean, f, {2, 3}, false);
}

}  // namespace

RunningStats RunningStats::identity(std::size_t channels) {
  return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

InstanceStats instance_stats(const Tensor& f, double epsilon) {
  require_feature_map("instance_stats", f);
  if (epsilon < 0.0) throw InvalidArgument("instance_stats: epsilon must be non-negative");
  Tensor mu = reduce(Reduction::mean, f, {2, 3}, false);
  Tensor var = reduce(Reduction::var, f, {2, 3}, false);
  return {std::move(mu), sqrt(affine(var, 1.0, epsilon))};
}

DecoupledFeatures decouple(const Tensor& f, const AffineParams& affine_params) {
  require_feature_map("decouple", f);
  OpScope scope("dfdr/decouple");
  const std::size_t n = f.dim(0), c = f.dim(1);
  InstanceStats stats = instance_stats(f, affine_params.epsilon);
  const Tensor mu4 = reshape(stats.mu, {n, c, 1, 1});
  const Tensor sigma4 = reshape(stats.sigma, {n, c, 1, 1});
  const Tensor normalized = div(sub(f, mu4), sigma4);
  Tensor f_pri = add(mul(normalized, per_channel(affine_params.gamma, c)), per_channel(affine_params.beta, c));
  Tensor f_sha = sub(f, f_pri);
  return {std::move(f_pri), std::move(f_sha), std::move(stats.mu), std::move(stats.sigma)};
}

Tensor style_descriptor(const DecoupledFeatures& decoupled, double epsilon) {
  OpScope scope("dfdr/style");
  const Tensor& sha = decoupled.f_sha;
  require_feature_map("style_descriptor", sha);
  const std::size_t n = sha.dim(0), c = sha.dim(1);
  const InstanceStats stats = instance_stats(sha, epsilon);
  const Tensor parts[] = {reshape(stats.mu, {n, c, 1}), reshape(stats.sigma, {n, c, 1})};
  return concat(parts, 2);
}

CraResult cra_forward(const Tensor& q, const CraParams& params, Mode mode) {
  OpScope scope("dfdr/cra");
  if (q.rank() != 3 || q.dim(2) != 2) throw ShapeError("cra_forward: expected N x C x 2, got " + shape_str(q.shape()));
  const std::size_t n = q.dim(0), c = q.dim(1);
  if (params.weight.shape() != Shape{c, 2}) throw ShapeError("cra_forward: weight must be C x 2");
  if (params.running.mean.size() != c || params.running.var.size() != c) {
    throw ShapeError("cra_forward: running statistics do not match channel count");
  }
  const Tensor gamma = reshape(params.bn_gamma, {1, c});
  const Tensor beta = reshape(params.bn_beta, {1, c});
  const Tensor t = reduce(Reduction::sum, mul(q, reshape(params.weight, {1, c, 2})), {2}, false);

  CraResult result;
  Tensor t_hat;
  if (mode == Mode::train) {
    if (n < 2) throw InvalidArgument("cra_forward: train mode needs at least 2 samples");
    const Tensor batch_mean = reduce(Reduction::mean, t, {0}, true);
    const Tensor batch_var = reduce(Reduction::var, t, {0}, true);
    t_hat = add(mul(div(sub(t, batch_mean), sqrt(affine(batch_var, 1.0, params.bn_epsilon))), gamma), beta);
    // Running variance tracks the population batch variance used for normalization.
    const double m = params.bn_momentum;
    result.running = params.running;
    for (std::size_t ch = 0; ch < c; ++ch) {
      result.running.mean[ch] = (1.0 - m) * params.running.mean[ch] + m * batch_mean[ch];
      result.running.var[ch] = (1.0 - m) * params.running.var[ch] + m * batch_var[ch];
    }
  } else {
    for (double v : params.running.var) {
      if (!(v > 0.0)) throw InvalidArgument("cra_forward: running variance must be positive");
    }
    const Tensor rm({1, c}, params.running.mean);
    const Tensor rv({1, c}, params.running.var);
    t_hat = add(mul(div(sub(t, rm), sqrt(affine(rv, 1.0, params.bn_epsilon))), gamma), beta);
    result.running = params.running;
  }
  result.attention = sigmoid(t_hat);
  return result;
}

namespace {

void check_attention(const DecoupledFeatures& d, const Tensor& attention) {
  const Tensor& f = d.f_pri;
  require_feature_map("reassemble", f);
  if (attention.shape() != Shape{f.dim(0), f.dim(1)}) {
    throw ShapeError("reassemble: attention " + shape_str(attention.shape()) + " does not match features " +
                     shape_str(f.shape()));
  }
  // Saturated sigmoids may round to exactly 0 or 1; anything outside [0,1] is a caller error.
  for (double v : attention.values()) {
    if (v < 0.0 || v > 1.0) throw InvalidArgument("reassemble: attention outside [0,1]");
  }
}

Tensor gain_branch(const DecoupledFeatures& d, const Tensor& v4) {
  OpScope scope("dfdr/gain");
  return add(d.f_pri, mul(d.f_sha, v4));
}

}  // namespace

ReassembledFeatures reassemble(const DecoupledFeatures& decoupled, const Tensor& attention) {
  check_attention(decoupled, attention);
  const std::size_t n = attention.dim(0), c = attention.dim(1);
  const Tensor v4 = reshape(attention, {n, c, 1, 1});
  Tensor gain = gain_branch(decoupled, v4);
  Tensor interference;
  {
    OpScope scope("dfdr/interference");
    interference = add(decoupled.f_pri, mul(decoupled.f_sha, affine(v4, -1.0, 1.0)));
  }
  return {std::move(gain), std::move(interference), attention};
}

double resolve_bandwidth(const Tensor& x, const Tensor& y, const MmdConfig& cfg) {
  if (cfg.bandwidth == MmdConfig::Bandwidth::fixed) {
    if (!(cfg.fixed_bandwidth > 0.0)) throw InvalidArgument("mmd: fixed bandwidth must be positive");
    return cfg.fixed_bandwidth;
  }
  const std::size_t d = x.dim(1);
  std::vector<const double*> rows;
  for (std::size_t i = 0; i < x.dim(0); ++i) rows.push_back(x.values().data() + i * d);
  for (std::size_t i = 0; i < y.dim(0); ++i) rows.push_back(y.values().data() + i * d);
  std::vector<double> dists;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = rows[i][k] - rows[j][k];
        acc += diff * diff;
      }
      dists.push_back(std::sqrt(acc));
    }
  }
  std::sort(dists.begin(), dists.end());
  const std::size_t m = dists.size();
  const double median = m % 2 == 1 ? dists[m / 2] : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
  return median > 0.0 ? median : 1.0;
}

Tensor mmd_squared(const Tensor& x, const Tensor& y, const MmdConfig& cfg) {
  OpScope scope("dfdr/mmd");
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1)) {
    throw ShapeError("mmd: expected [n x d] and [m x d], got " + shape_str(x.shape()) + " and " + shape_str(y.shape()));
  }
  if (x.dim(0) < 2 || y.dim(0) < 2) throw InvalidArgument("mmd: every sample set needs at least 2 samples");
  const double h = resolve_bandwidth(x, y, cfg);
  const double coef = -1.0 / (2.0 * h * h);
  auto kernel_mean = [coef](const Tensor& a, const Tensor& b) { return mean(exp(scale(pairwise_sq_dists(a, b), coef))); };
  // Both cross orderings are included so that swapping x and y is bitwise symmetric.
  return sub(add(kernel_mean(x, x), kernel_mean(y, y)), add(kernel_mean(x, y), kernel_mean(y, x)));
}

Tensor mmd_loss(const Tensor& source_pri, std::span<const Tensor> pseudo_pri, const MmdConfig& cfg) {
  if (pseudo_pri.empty()) throw InvalidArgument("mmd_loss: at least one pseudo domain is required");
  const Tensor xs = pooled(source_pri);
  Tensor total;
  for (std::size_t i = 0; i < pseudo_pri.size(); ++i) {
    Tensor term = mmd_squared(xs, pooled(pseudo_pri[i]), cfg);
    total = i == 0 ? term : add(total, term);
  }
  return scale(total, 1.0 / static_cast<double>(pseudo_pri.size()));
}

Tensor prediction_entropy(const Tensor& probs, TaskMode mode) {
  const std::size_t expected_rank = mode == TaskMode::classification ? 2 : 4;
  if (probs.rank() != expected_rank) {
    throw ShapeError("prediction_entropy: unexpected shape " + shape_str(probs.shape()) + " for task mode " +
                     std::string(to_string(mode)));
  }
  return mean_entropy(probs, 1);
}

Tensor reassembly_loss(const Tensor& h_gain, const Tensor& h_pri, const Tensor& h_interf) {
  OpScope scope("loss/rea");
  for (const Tensor* h : {&h_gain, &h_pri, &h_interf}) {
    if (h->numel() != 1) throw ShapeError("reassembly_loss: entropies must be scalars");
    if (h->item() < 0.0) throw InvalidArgument("reassembly_loss: entropies must be non-negative");
  }
  return add(softplus(sub(h_gain, h_pri)), softplus(sub(h_pri, h_interf)));
}

LayerOutput dfdr_layer_forward(const Tensor& f, const AffineParams& affine_params, const CraParams& cra, Mode mode) {
  require_feature_map("dfdr_layer_forward", f);
  if (affine_params.gamma.numel() != f.dim(1)) throw ShapeError("dfdr_layer_forward: channel mismatch");
  DecoupledFeatures decoupled = decouple(f, affine_params);
  const Tensor q = style_descriptor(decoupled, affine_params.epsilon);
  CraResult cra_out = cra_forward(q, cra, mode);

  LayerOutput out;
  out.running = std::move(cra_out.running);
  if (mode == Mode::eval) {
    check_attention(decoupled, cra_out.attention);
    const Tensor v4 = reshape(cra_out.attention, {f.dim(0), f.dim(1), 1, 1});
    out.gain = gain_branch(decoupled, v4);
    return out;
  }
  ReassembledFeatures reassembled = reassemble(decoupled, cra_out.attention);
  out.gain = reassembled.gain;
  out.side = LayerSide{std::move(decoupled), std::move(reassembled)};
  return out;
}

}  // namespace drsf::dfdr
