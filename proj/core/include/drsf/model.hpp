// Small convolutional backbone with optional DFDR after each stage, task
// heads, an optional domain classifier, and the checkpoint format.
//
// Stage s: conv3x3 -> relu -> (DFDR if dfdr_mask[s]) -> 2x2 average pool
// (every stage but the last). Parameter names:
//   backbone.stage<s>.conv.{weight,bias}
//   dfdr.<s>.affine.{gamma,beta}, dfdr.<s>.cra.{weight,bn_gamma,bn_beta}
//   head.{weight,bias}
//   mdsf.classifier.{hidden.weight,hidden.bias,out.weight,out.bias}
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "drsf/dfdr.hpp"
#include "drsf/mdsf.hpp"
#include "drsf/optim.hpp"
#include "drsf/tensor.hpp"
#include "drsf/types.hpp"

namespace drsf::model {

struct BackboneConfig {
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::vector<bool> dfdr_mask{true, true, true};
  std::size_t in_channels = 3;

  std::size_t stages() const noexcept { return stage_channels.size(); }
  bool any_dfdr() const;
  void validate() const;
};

struct TaskHead {
  TaskMode mode = TaskMode::segmentation;
  std::size_t num_classes = 4;
};

struct ModelConfig {
  BackboneConfig backbone;
  TaskHead head;
  /// Domain classifier outputs (K + 1); 0 builds no classifier.
  std::size_t num_domains = 0;
  std::size_t classifier_hidden = 64;
  double dfdr_epsilon = dfdr::kDefaultEpsilon;
  double bn_momentum = 0.1;

  void validate() const;
};

struct StageSide {
  std::size_t stage = 0;
  dfdr::LayerSide side;
  /// Running CRA statistics after folding in this forward pass's batch.
  dfdr::RunningStats running;
};

struct ForwardResult {
  Tensor logits;
  /// Final-stage output consumed by the head (gain branch when DFDR is present).
  Tensor features;
  /// Final-stage primary features, or `features` when the last stage has no DFDR.
  Tensor final_primary;
  /// One entry per DFDR-equipped stage; empty in eval mode.
  std::vector<StageSide> sides;
};

class Model {
 public:
  /// Each parameter is initialised from its own stream derived from (seed, name).
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  ParameterStore& params() noexcept { return params_; }
  const ParameterStore& params() const noexcept { return params_; }

  const std::optional<dfdr::RunningStats>& running(std::size_t stage) const;
  void set_running(std::size_t stage, dfdr::RunningStats stats);

  ForwardResult forward(const Tensor& images, Mode mode) const;

  /// Continues from the (post-DFDR) output of `stage` through the remaining
  /// stages and the head. Downstream DFDR layers use batch statistics; their
  /// running-stat updates are discarded.
  Tensor forward_from(std::size_t stage, const Tensor& stage_output, std::size_t out_h, std::size_t out_w) const;

  /// Segmentation: 1x1 linear then nearest upsampling to out_h x out_w.
  /// Classification: global average pool then linear.
  Tensor head_forward(const Tensor& features, std::size_t out_h, std::size_t out_w) const;

  dfdr::AffineParams affine(std::size_t stage) const;
  dfdr::CraParams cra(std::size_t stage) const;
  bool has_classifier() const noexcept { return config_.num_domains > 0; }
  mdsf::DomainClassifierParams classifier() const;

 private:
  Tensor run_stage(std::size_t stage, const Tensor& x, Mode mode, std::optional<StageSide>* side) const;

  ModelConfig config_;
  ParameterStore params_;
  std::vector<std::optional<dfdr::RunningStats>> running_;
};

struct ParamCount {
  std::size_t total = 0;
  std::size_t dfdr_only = 0;
  double delta_fraction = 0.0;
};

/// Inference model only (backbone, DFDR, head); the domain classifier is a
/// training-time component and is excluded.
ParamCount count_params(const Model& model);

/// Closed form of the per-stage DFDR overhead: affine (2C) + CRA linear (2C) + CRA batch-norm affine (2C).
constexpr std::size_t dfdr_stage_params(std::size_t channels) { return 6 * channels; }

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

std::string serialize_checkpoint(const Model& model);
/// SHA-256 over configuration, names, shapes and values.
std::string checkpoint_hash(const Model& model);
void save_checkpoint(const Model& model, const std::string& path);
/// Rebuilds the model described by the checkpoint. Throws DataError on corruption.
Model load_checkpoint(const std::string& path);
Model deserialize_checkpoint(const std::string& bytes);

}  // namespace drsf::model
