// drsf command line: dataset generation, training, evaluation, ablations and
// the gradient self-check. Exit codes: 0 ok, 1 other failure, 2 config error,
// 3 data error, 4 numeric failure.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "drsf/grad_suite.hpp"
#include "drsf/harness.hpp"
#include "drsf/model.hpp"
#include "drsf/synth.hpp"

namespace fs = std::filesystem;
using namespace drsf;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

harness::ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? harness::ExperimentConfig{} : harness::load_config(path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

int cmd_generate(const std::string& config_path, const std::string& out) {
  harness::ExperimentConfig cfg = config_or_default(config_path);
  cfg.data_dir.clear();
  const synth::Benchmark bench = harness::load_benchmark_for(cfg);
  ensure_dir(out);
  synth::save_benchmark(bench, out);
  std::cout << "wrote " << 2 + bench.pseudo.size() + bench.targets.size() << " datasets to " << out << "\n";
  return kOk;
}

int cmd_train(const std::string& config_path, const std::string& out) {
  const harness::ExperimentConfig cfg = config_or_default(config_path);
  const synth::Benchmark bench = harness::load_benchmark_for(cfg);
  ensure_dir(out);
  std::vector<harness::MetricsRecord> records;
  for (std::uint64_t seed : cfg.seeds) {
    const std::string run_id = "seed" + std::to_string(seed);
    harness::RunResult r = harness::run_training(cfg, bench, seed, run_id);
    model::save_checkpoint(*r.model, (fs::path(out) / (run_id + ".ckpt")).string());
    std::printf("%s mPT=%.6f", run_id.c_str(), r.mpt);
    for (std::size_t i = 0; i < r.target_names.size(); ++i) {
      std::printf(" %s=%.6f", r.target_names[i].c_str(), r.target_metrics[i]);
    }
    std::printf("\n");
    records.insert(records.end(), r.records.begin(), r.records.end());
  }
  harness::emit_metrics(records, cfg, (fs::path(out) / "metrics").string());
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, std::size_t batch) {
  const model::Model m = model::load_checkpoint(checkpoint);
  const synth::Benchmark bench = synth::load_benchmark(data_dir);
  const TaskMode mode = m.config().head.mode;
  std::vector<double> metrics;
  for (const synth::DomainDataset& t : bench.targets) {
    metrics.push_back(harness::evaluate(m, t, mode, batch));
    std::printf("%s %s=%.6f\n", t.manifest.domain_name.c_str(),
                mode == TaskMode::segmentation ? "mIoU" : "accuracy", metrics.back());
  }
  std::printf("mPT=%.6f\n", harness::mean_over_targets(metrics));
  return kOk;
}

int cmd_ablate(const std::string& suite_name, const std::string& config_path, const std::string& out,
               std::size_t threads, const std::vector<std::string>& rows) {
  const harness::Suite suite = harness::parse_suite(suite_name);
  const harness::ExperimentConfig cfg = config_or_default(config_path);
  const synth::Benchmark bench = harness::load_benchmark_for(cfg);
  harness::AblationOptions options;
  options.threads = threads;
  options.only_rows = rows;
  const harness::AblationTable table = harness::run_ablation(suite, cfg, bench, options);
  ensure_dir(out);
  harness::write_ablation_csv(table, (fs::path(out) / ("ablation_" + suite_name + ".csv")).string());
  harness::emit_metrics(table.records, cfg, (fs::path(out) / ("ablation_" + suite_name + "_metrics")).string());
  for (const harness::AblationRow& row : table.rows) {
    std::printf("%-16s %.6f +- %.6f (n=%zu)\n", row.name.c_str(), row.mean, row.stddev, row.seeds.size());
  }
  return kOk;
}

int cmd_grad_check(std::size_t instances, std::uint64_t seed, double tolerance) {
  bool ok = true;
  for (const GradCaseResult& r : run_grad_suite(instances, seed)) {
    const bool pass = r.worst_rel_error < tolerance;
    ok = ok && pass;
    std::printf("%-28s %s max_rel_error=%.3e\n", r.name.c_str(), pass ? "ok  " : "FAIL", r.worst_rel_error);
  }
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-domain generalization lab: synthetic benchmarks, training and ablations"};
  app.require_subcommand(1);

  std::string config, out = "out", checkpoint, data, suite;
  std::size_t threads = 0, instances = 5, eval_batch = 50;
  std::vector<std::string> rows;
  std::uint64_t seed = 0;
  double tolerance = 1e-4;

  CLI::App* gen = app.add_subcommand("generate-data", "Build the synthetic benchmark and write it to a directory");
  gen->add_option("--config", config, "Experiment config (JSON); its benchmark block sets sizes and seed");
  gen->add_option("--out", out, "Output directory")->required();

  CLI::App* train = app.add_subcommand("train", "Train one model per seed; write checkpoints and metrics");
  train->add_option("--config", config, "Experiment config (JSON)")->required();
  train->add_option("--out", out, "Output directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on every target domain of a benchmark");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", data, "Benchmark directory written by generate-data")->required();
  eval->add_option("--batch", eval_batch, "Evaluation batch size")->check(CLI::PositiveNumber);

  CLI::App* ablate = app.add_subcommand("ablate", "Run an ablation suite over all configured seeds");
  ablate->add_option("--suite", suite, "loss_toggles | layer_mask | per_pseudo_domain")->required();
  ablate->add_option("--config", config, "Base experiment config (JSON)");
  ablate->add_option("--out", out, "Output directory");
  ablate->add_option("--threads", threads, "Worker threads (default: DRSF_THREADS or hardware concurrency)");
  ablate->add_option("--rows", rows, "Run only these rows of the suite");

  CLI::App* grad = app.add_subcommand("grad-check", "Finite-difference check of every differentiable operation");
  grad->add_option("--instances", instances, "Random instances per operation")->check(CLI::PositiveNumber);
  grad->add_option("--seed", seed, "Seed for the random instances");
  grad->add_option("--tolerance", tolerance, "Maximum accepted relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (gen->parsed()) return cmd_generate(config, out);
    if (train->parsed()) return cmd_train(config, out);
    if (eval->parsed()) return cmd_eval(checkpoint, data, eval_batch);
    if (ablate->parsed()) return cmd_ablate(suite, config, out, threads, rows);
    if (grad->parsed()) return cmd_grad_check(instances, seed, tolerance);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
