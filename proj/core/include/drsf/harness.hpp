// Experiment orchestration: configuration, the joint training step, a plain
// supervised reference trainer, evaluation, ablation suites and metrics files.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "drsf/model.hpp"
#include "drsf/rng.hpp"
#include "drsf/synth.hpp"
#include "drsf/tensor.hpp"
#include "drsf/types.hpp"

namespace drsf::harness {

struct UdaPluginConfig {
  std::string name;
  double weight = 0.0;
};

/// Parameters for an in-memory benchmark, used when no data_dir is given.
struct BenchmarkOptions {
  std::size_t image_size = 32;
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  std::uint64_t master_seed = 42;
};

struct ExperimentConfig {
  double lambda1 = 0.5;  // alignment
  double lambda2 = 0.8;  // entropy ordering
  double lambda3 = 0.5;  // adversarial fusion
  double beta_alpha = 2.0;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  std::size_t steps = 3000;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::vector<bool> dfdr_mask{true, true, true};
  TaskMode task_mode = TaskMode::segmentation;
  std::size_t K = 3;
  /// Indices into the benchmark's pseudo domains; empty selects the first K.
  std::vector<std::size_t> pseudo_domains;
  std::string data_dir;
  BenchmarkOptions benchmark;
  std::optional<UdaPluginConfig> uda_plugin;
  std::size_t classifier_hidden = 64;
  double grl_factor = 1.0;
  /// Training-loss rows are recorded every log_every steps (0: final step only).
  std::size_t log_every = 0;
  std::size_t eval_batch = 50;
  /// When false, wall_ms is written as 0 so metrics files are byte-reproducible.
  bool record_wall_clock = true;

  /// Throws ConfigError on violated invariants.
  void validate() const;
  /// Selected pseudo-domain indices (pseudo_domains, or 0..K-1).
  std::vector<std::size_t> pseudo_indices() const;
  /// Model layout implied by this configuration.
  model::ModelConfig model_config() const;
};

/// Strict JSON: unknown keys and wrong types raise ConfigError.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json(const ExperimentConfig& cfg);

/// task + lambda1 * align + lambda2 * rea + lambda3 * adv. Throws NumericError on non-finite input.
Tensor total_loss(const Tensor& task, const Tensor& align, const Tensor& rea, const Tensor& adv,
                  const ExperimentConfig& cfg);

using UdaLossFn = std::function<Tensor(std::span<const Tensor> pseudo_logits, TaskMode mode)>;

/// Adds a named plugin to the process-wide registry ("entropy-min" is built in).
void register_uda_plugin(const std::string& name, UdaLossFn fn);
bool has_uda_plugin(const std::string& name);
/// Unweighted plugin loss. Throws ConfigError for an unknown name.
Tensor uda_loss(const std::string& name, std::span<const Tensor> pseudo_logits, TaskMode mode);

struct DomainBatch {
  Tensor images;   // N x 3 x H x W
  Tensor targets;  // one-hot: N x classes x H x W (segmentation) or N x classes
};

DomainBatch make_batch(const synth::DomainDataset& ds, std::span<const std::size_t> indices, TaskMode mode);
/// `count` indices drawn uniformly with replacement.
std::vector<std::size_t> sample_indices(std::size_t dataset_size, std::size_t count, RngStream& rng);

struct LossBreakdown {
  double task = 0.0;
  double align = 0.0;
  double rea = 0.0;
  double adv = 0.0;
  double uda = 0.0;
  double total = 0.0;
  /// Fraction of correct source predictions in this batch.
  double source_accuracy = 0.0;
};

class Trainer {
 public:
  Trainer(const ExperimentConfig& cfg, model::Model& model);

  /// One forward/backward/update over a source batch and one batch per selected pseudo domain.
  LossBreakdown train_step(const DomainBatch& source, std::span<const DomainBatch> pseudo, RngStream& rng);

 private:
  ExperimentConfig cfg_;
  model::Model& model_;
};

/// Reference trainer: conv/relu/pool backbone and head, cross-entropy on the
/// source batch, one SGD step. Ignores DFDR and the domain classifier.
class PlainTrainer {
 public:
  PlainTrainer(const ExperimentConfig& cfg, model::Model& model);
  double train_step(const DomainBatch& source);

 private:
  ExperimentConfig cfg_;
  model::Model& model_;
};

/// Argmax over the class axis, lowest index on ties.
std::vector<std::uint16_t> predict(const model::Model& model, const Tensor& images);

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);
  void add(std::span<const std::uint16_t> truth, std::span<const std::uint16_t> predicted);
  std::uint64_t at(std::size_t truth, std::size_t predicted) const;
  std::size_t classes() const noexcept { return classes_; }
  std::uint64_t total() const;
  double accuracy() const;
  /// Mean IoU over classes present in truth or prediction.
  double mean_iou() const;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

/// Accuracy (classification) or mIoU (segmentation) in eval mode. Throws on an empty dataset.
double evaluate(const model::Model& model, const synth::DomainDataset& ds, TaskMode mode, std::size_t batch = 50);

/// Arithmetic mean of per-target metrics.
double mean_over_targets(std::span<const double> metrics);

struct MetricsRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::string domain;
  double metric = 0.0;
  LossBreakdown losses;
  double wall_ms = 0.0;
};

struct RunResult {
  std::vector<MetricsRecord> records;
  std::vector<std::string> target_names;
  std::vector<double> target_metrics;
  double mpt = 0.0;
  std::optional<model::Model> model;
};

/// Loads data_dir, or builds the in-memory benchmark described by cfg.benchmark.
synth::Benchmark load_benchmark_for(const ExperimentConfig& cfg);

/// Full training run for one seed followed by evaluation on every target.
/// Throws NumericError if a loss becomes non-finite.
RunResult run_training(const ExperimentConfig& cfg, const synth::Benchmark& bench, std::uint64_t seed,
                       const std::string& run_id = "run");

enum class Suite { loss_toggles, layer_mask, per_pseudo_domain };
Suite parse_suite(const std::string& name);
std::string to_string(Suite suite);

struct AblationRowSpec {
  std::string name;
  ExperimentConfig cfg;
};

/// Configurations of a suite derived from a base configuration.
///   loss_toggles      : all 8 on/off combinations of (align, rea, adv). DFDR
///                       layers exist only when align or rea is on; pseudo
///                       data is used only when some loss is on.
///   layer_mask        : baseline, each single stage 1..S-1, stages 1..S-1, all S stages.
///   per_pseudo_domain : baseline, each pseudo domain alone, all selected pseudo domains.
/// The baseline row is source-only supervised training without DFDR.
std::vector<AblationRowSpec> suite_rows(Suite suite, const ExperimentConfig& base,
                                        const std::vector<std::string>& pseudo_names);

struct AblationRow {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<double> seed_metrics;  // mPT per seed
  double mean = 0.0;
  double stddev = 0.0;                // sample standard deviation
};

struct AblationTable {
  Suite suite = Suite::loss_toggles;
  std::vector<AblationRow> rows;
  std::vector<MetricsRecord> records;
};

struct AblationOptions {
  /// Worker threads; 0 reads DRSF_THREADS, falling back to hardware concurrency.
  std::size_t threads = 0;
  /// Restrict to these row names (empty: every row).
  std::vector<std::string> only_rows;
};

std::size_t thread_cap_from_env();

AblationTable run_ablation(Suite suite, const ExperimentConfig& base, const synth::Benchmark& bench,
                           const AblationOptions& options = {});

void write_ablation_csv(const AblationTable& table, const std::string& path);

/// CSV header in column order.
inline constexpr const char* kMetricsHeader =
    "run_id,seed,step,domain,metric,loss_task,loss_align,loss_rea,loss_adv,loss_uda,wall_ms";

/// Numbers use 12 significant digits.
std::string metrics_csv(std::span<const MetricsRecord> records);
/// Writes <stem>.csv and <stem>.json; the JSON echoes the config, gives final
/// per-domain metric mean/stddev across runs, and the CSV's SHA-256.
void emit_metrics(std::span<const MetricsRecord> records, const ExperimentConfig& cfg, const std::string& stem);
std::string metrics_summary_json(std::span<const MetricsRecord> records, const ExperimentConfig& cfg);

}  // namespace drsf::harness
