#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "drsf/dfdr.hpp"
#include "drsf/harness.hpp"
#include "drsf/mdsf.hpp"
#include "drsf/ops.hpp"
#include "json.hpp"

using namespace drsf;
using namespace drsf::harness;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.stage_channels = {4, 8};
  c.dfdr_mask = {true, true};
  c.batch_size = 4;
  c.steps = 4;
  c.seeds = {0, 1};
  c.K = 3;
  c.classifier_hidden = 8;
  c.benchmark.image_size = 8;
  c.benchmark.train_size = 12;
  c.benchmark.test_size = 6;
  c.eval_batch = 4;
  c.record_wall_clock = false;
  return c;
}

ExperimentConfig baseline_config() {
  ExperimentConfig c = tiny_config();
  c.K = 0;
  c.lambda1 = c.lambda2 = c.lambda3 = 0.0;
  c.dfdr_mask = {false, false};
  return c;
}

const synth::Benchmark& tiny_bench() {
  static const synth::Benchmark b = load_benchmark_for(tiny_config());
  return b;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

Tensor s(double v) { return Tensor::scalar(v); }

std::vector<DomainBatch> pseudo_batches(const ExperimentConfig& cfg, const std::vector<std::size_t>& idx) {
  std::vector<DomainBatch> out;
  for (std::size_t p : cfg.pseudo_indices()) out.push_back(make_batch(tiny_bench().pseudo[p], idx, cfg.task_mode));
  return out;
}

}  // namespace

TEST(TotalLoss, PublishedWeightsProbe) {
  ExperimentConfig c;
  EXPECT_EQ(total_loss(s(1.0), s(0.2), s(0.2), s(0.2), c).item(), 1.36);
}

TEST(TotalLoss, ZeroWeightsGiveTaskAlone) {
  ExperimentConfig c;
  c.lambda1 = c.lambda2 = c.lambda3 = 0.0;
  EXPECT_EQ(total_loss(s(0.731), s(5.0), s(6.0), s(7.0), c).item(), 0.731);
}

// The weighted sum is rounded once: compare with the exact sum of the exact
// products, rounded to double.
TEST(TotalLoss, MatchesCorrectlyRoundedDirectFormula) {
  using wide = boost::multiprecision::cpp_bin_float_50;
  RngStream rng(1);
  for (int i = 0; i < 2000; ++i) {
    ExperimentConfig c;
    c.lambda1 = rng.uniform(0, 2);
    c.lambda2 = rng.uniform(0, 2);
    c.lambda3 = rng.uniform(0, 2);
    const double t = rng.uniform(0, 5), a = rng.uniform(0, 5), r = rng.uniform(0, 5), d = rng.uniform(0, 5);
    const wide exact = wide(t) + wide(c.lambda1) * wide(a) + wide(c.lambda2) * wide(r) + wide(c.lambda3) * wide(d);
    EXPECT_EQ(total_loss(s(t), s(a), s(r), s(d), c).item(), exact.convert_to<double>());
  }
}

TEST(TotalLoss, GradientIsTheWeights) {
  ExperimentConfig c;
  Tape tape;
  const Tensor v[] = {tape.variable(s(0.3)), tape.variable(s(0.4)), tape.variable(s(0.5)), tape.variable(s(0.6))};
  tape.backward(total_loss(v[0], v[1], v[2], v[3], c));
  EXPECT_EQ(tape.gradient(v[0]).item(), 1.0);
  EXPECT_EQ(tape.gradient(v[1]).item(), 0.5);
  EXPECT_EQ(tape.gradient(v[2]).item(), 0.8);
  EXPECT_EQ(tape.gradient(v[3]).item(), 0.5);
}

TEST(TotalLoss, RejectsNonScalarAndNegativeWeights) {
  ExperimentConfig c;
  EXPECT_THROW(total_loss(Tensor::zeros({2}), s(0), s(0), s(0), c), ShapeError);
  c.lambda2 = -0.1;
  EXPECT_THROW(total_loss(s(0), s(0), s(0), s(0), c), InvalidArgument);
}

TEST(Config, DefaultsValidate) { EXPECT_NO_THROW(ExperimentConfig{}.validate()); }

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = tiny_config();
  c.uda_plugin = UdaPluginConfig{"entropy-min", 0.25};
  c.pseudo_domains = {2, 0, 1};
  const ExperimentConfig back = parse_config(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(back.pseudo_domains, c.pseudo_domains);
  ASSERT_TRUE(back.uda_plugin.has_value());
  EXPECT_EQ(back.uda_plugin->weight, 0.25);
}

TEST(Config, StrictKeysAndTypes) {
  EXPECT_THROW(parse_config(R"({"lambda4": 1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"steps": "ten"})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"steps": -3})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"benchmark": {"size": 3}})"), ConfigError);
  EXPECT_THROW(parse_config("{not json"), ConfigError);
  EXPECT_NO_THROW(parse_config("{}"));
}

TEST(Config, InvariantViolations) {
  EXPECT_THROW(parse_config(R"({"lambda1": -1})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"steps": 0})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"seeds": []})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"dfdr_mask": [true, true]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"uda_plugin": {"name": "nope", "weight": 1}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"K": 2, "pseudo_domains": [0, 0]})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"benchmark": {"image_size": 30}})"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, ClassifierOnlyWhenAdversarialTermIsActive) {
  ExperimentConfig c;
  EXPECT_EQ(c.model_config().num_domains, 4u);
  c.lambda3 = 0.0;
  EXPECT_EQ(c.model_config().num_domains, 0u);
  c = ExperimentConfig{};
  c.K = 0;
  EXPECT_EQ(c.model_config().num_domains, 0u);
}

TEST(UdaPlugin, EntropyMinValues) {
  const Tensor one_hot({2, 4}, {50, 0, 0, 0, 0, 0, 50, 0});
  const Tensor uniform = Tensor::zeros({2, 4});
  const Tensor a[] = {one_hot};
  const Tensor b[] = {uniform, uniform};
  EXPECT_NEAR(uda_loss("entropy-min", a, TaskMode::classification).item(), 0.0, 1e-18);
  EXPECT_NEAR(uda_loss("entropy-min", b, TaskMode::classification).item(), std::log(4.0), 1e-15);
  EXPECT_THROW(uda_loss("missing", b, TaskMode::classification), ConfigError);
}

TEST(UdaPlugin, RegistryAcceptsCustomPlugins) {
  register_uda_plugin("test-const", [](std::span<const Tensor>, TaskMode) { return Tensor::scalar(0.5); });
  EXPECT_TRUE(has_uda_plugin("test-const"));
  const Tensor x[] = {Tensor::zeros({1, 2})};
  EXPECT_EQ(uda_loss("test-const", x, TaskMode::classification).item(), 0.5);
}

TEST(Batching, OneHotTargetsMatchLabels) {
  const auto& ds = tiny_bench().source_train;
  const std::size_t idx[] = {3, 0};
  const DomainBatch seg = make_batch(ds, idx, TaskMode::segmentation);
  EXPECT_EQ(seg.images.shape(), (Shape{2, 3, 8, 8}));
  EXPECT_EQ(seg.targets.shape(), (Shape{2, 4, 8, 8}));
  for (std::size_t p = 0; p < 64; ++p) {
    const std::uint16_t label = ds.pixel_labels[3 * 64 + p];
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(seg.targets[k * 64 + p], k == label ? 1.0 : 0.0);
  }
  EXPECT_EQ(seg.images[0], static_cast<double>(ds.images[3 * 192]));
  const DomainBatch cls = make_batch(ds, idx, TaskMode::classification);
  EXPECT_EQ(cls.targets[ds.image_labels[0] + 4], 1.0);
}

TEST(TrainStep, BaselineMatchesPlainTrainerExactly) {
  const ExperimentConfig cfg = baseline_config();
  model::Model a(cfg.model_config(), 7), b(cfg.model_config(), 7);
  Trainer drsf_trainer(cfg, a);
  PlainTrainer plain(cfg, b);
  RngStream data(3), fusion(4);
  for (int step = 0; step < 30; ++step) {
    const auto idx = sample_indices(tiny_bench().source_train.size(), cfg.batch_size, data);
    const DomainBatch src = make_batch(tiny_bench().source_train, idx, cfg.task_mode);
    const LossBreakdown l = drsf_trainer.train_step(src, {}, fusion);
    const double p = plain.train_step(src);
    ASSERT_NEAR(l.total, p, 1e-12) << "step " << step;
    ASSERT_EQ(l.total, l.task);
  }
  EXPECT_EQ(model::checkpoint_hash(a), model::checkpoint_hash(b));
}

TEST(TrainStep, LossComponentsFiniteAndNonNegative) {
  ExperimentConfig cfg = tiny_config();
  cfg.uda_plugin = UdaPluginConfig{"entropy-min", 0.1};
  model::Model m(cfg.model_config(), 1);
  Trainer t(cfg, m);
  RngStream data(5), fusion(6);
  for (int step = 0; step < 100; ++step) {
    const auto idx = sample_indices(tiny_bench().source_train.size(), cfg.batch_size, data);
    const LossBreakdown l =
        t.train_step(make_batch(tiny_bench().source_train, idx, cfg.task_mode), pseudo_batches(cfg, idx), fusion);
    for (double v : {l.task, l.align, l.rea, l.adv, l.uda, l.total}) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_GE(v, -1e-15);
    }
    ASSERT_GT(l.align + l.rea + l.adv, 0.0);
    ASSERT_GE(l.source_accuracy, 0.0);
    ASSERT_LE(l.source_accuracy, 1.0);
  }
}

TEST(TrainStep, PseudoBatchCountMustMatchK) {
  const ExperimentConfig cfg = tiny_config();
  model::Model m(cfg.model_config(), 1);
  Trainer t(cfg, m);
  RngStream rng(1);
  const std::size_t idx[] = {0, 1, 2, 3};
  const DomainBatch src = make_batch(tiny_bench().source_train, idx, cfg.task_mode);
  const DomainBatch one[] = {src};
  EXPECT_THROW(t.train_step(src, one, rng), InvalidArgument);
}

TEST(Evaluate, PerfectPredictionAndConfusionOracle) {
  ConfusionMatrix perfect(4);
  const std::vector<std::uint16_t> truth = {0, 1, 2, 2, 3, 0, 1, 1};
  perfect.add(truth, truth);
  EXPECT_EQ(perfect.mean_iou(), 1.0);
  EXPECT_EQ(perfect.accuracy(), 1.0);

  ConfusionMatrix bg(4);
  const std::vector<std::uint16_t> all_bg(truth.size(), 0);
  bg.add(truth, all_bg);
  // Background IoU = 2 / 8, the three shape classes score 0.
  EXPECT_NEAR(bg.mean_iou(), (2.0 / 8.0) / 4.0, 1e-12);

  RngStream rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint16_t> t(200), p(200);
    for (auto& v : t) v = static_cast<std::uint16_t>(rng.below(3));  // class 3 never appears in truth
    for (auto& v : p) v = static_cast<std::uint16_t>(rng.below(3));
    ConfusionMatrix cm(4);
    cm.add(t, p);
    double sum = 0.0;
    int present = 0;
    for (std::uint16_t k = 0; k < 4; ++k) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < t.size(); ++i) {
        tp += t[i] == k && p[i] == k;
        fp += t[i] != k && p[i] == k;
        fn += t[i] == k && p[i] != k;
      }
      if (tp + fp + fn == 0) continue;
      sum += static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      ++present;
    }
    EXPECT_NEAR(cm.mean_iou(), sum / present, 1e-12);
  }
}

TEST(Evaluate, MptIsArithmeticMean) {
  const double m[] = {0.4, 0.6};
  EXPECT_EQ(mean_over_targets(m), 0.5);
  EXPECT_THROW(mean_over_targets({}), InvalidArgument);
}

TEST(Evaluate, MetricInUnitIntervalAndEmptyDatasetRejected) {
  const ExperimentConfig cfg = tiny_config();
  const model::Model m(cfg.model_config(), 0);
  const double v = evaluate(m, tiny_bench().targets[0], cfg.task_mode, 4);
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 1.0);
  synth::DomainDataset empty;
  EXPECT_THROW(evaluate(m, empty, cfg.task_mode), InvalidArgument);
}

TEST(Evaluate, ArgmaxTiesGoToLowestIndex) {
  ExperimentConfig cfg = baseline_config();
  model::Model m(cfg.model_config(), 0);
  for (const char* name : {"head.weight", "head.bias"}) {
    Parameter& p = m.params().get(name);
    p.value = Tensor::zeros(p.value.shape()).as_trainable();
  }
  for (std::uint16_t v : predict(m, Tensor::zeros({1, 3, 8, 8}))) EXPECT_EQ(v, 0);
}

TEST(Evaluate, InferenceGraphHasNoTrainingOnlyNodes) {
  const ExperimentConfig cfg = tiny_config();
  const model::Model m(cfg.model_config(), 0);
  const DomainBatch b = make_batch(tiny_bench().targets[0], std::vector<std::size_t>{0, 1}, cfg.task_mode);
  Tape tape(Tape::Kind::trace);
  predict(m, b.images);
  for (const TapeNode& n : tape.nodes()) {
    EXPECT_EQ(n.scope.find("interference"), std::string::npos);
    EXPECT_EQ(n.scope.find("mdsf"), std::string::npos);
    EXPECT_EQ(n.scope.find("loss"), std::string::npos);
  }
}

TEST(Runs, SameSeedBitIdenticalDifferentSeedsDiffer) {
  const ExperimentConfig cfg = tiny_config();
  const RunResult a = run_training(cfg, tiny_bench(), 0);
  const RunResult b = run_training(cfg, tiny_bench(), 0);
  const RunResult c = run_training(cfg, tiny_bench(), 1);
  EXPECT_EQ(metrics_csv(a.records), metrics_csv(b.records));
  EXPECT_EQ(model::checkpoint_hash(*a.model), model::checkpoint_hash(*b.model));
  EXPECT_NE(model::checkpoint_hash(*a.model), model::checkpoint_hash(*c.model));
  EXPECT_NE(metrics_csv(a.records), metrics_csv(c.records));
  EXPECT_EQ(a.target_metrics.size(), 2u);
  EXPECT_EQ(a.mpt, mean_over_targets(a.target_metrics));
}

TEST(Runs, ZeroWeightPluginIsBitwiseNoPlugin) {
  ExperimentConfig with = tiny_config();
  with.uda_plugin = UdaPluginConfig{"entropy-min", 0.0};
  const RunResult a = run_training(tiny_config(), tiny_bench(), 3);
  const RunResult b = run_training(with, tiny_bench(), 3);
  EXPECT_EQ(model::checkpoint_hash(*a.model), model::checkpoint_hash(*b.model));
  EXPECT_EQ(metrics_csv(a.records), metrics_csv(b.records));
}

TEST(Suites, RowStructure) {
  const std::vector<std::string> names = {"night", "fog", "dusk"};
  auto row_names = [&](Suite s, const ExperimentConfig& c) {
    std::vector<std::string> out;
    for (const auto& r : suite_rows(s, c, names)) out.push_back(r.name);
    return out;
  };
  EXPECT_EQ(row_names(Suite::loss_toggles, ExperimentConfig{}),
            (std::vector<std::string>{"baseline", "align", "rea", "align+rea", "adv", "align+adv", "rea+adv", "full"}));
  ExperimentConfig four;
  four.stage_channels = {8, 8, 8, 8};
  four.dfdr_mask.assign(4, true);
  EXPECT_EQ(row_names(Suite::layer_mask, four),
            (std::vector<std::string>{"baseline", "s1", "s2", "s3", "s123", "s1234"}));
  EXPECT_EQ(row_names(Suite::per_pseudo_domain, ExperimentConfig{}),
            (std::vector<std::string>{"baseline", "+night", "+fog", "+dusk", "all"}));

  for (const auto& r : suite_rows(Suite::loss_toggles, ExperimentConfig{}, names)) {
    if (r.name == "baseline") {
      EXPECT_EQ(r.cfg.K, 0u);
      EXPECT_EQ(std::count(r.cfg.dfdr_mask.begin(), r.cfg.dfdr_mask.end(), true), 0);
    }
    // Toggles change loss weights only; the architecture matches the full model.
    if (r.name != "baseline") EXPECT_EQ(r.cfg.dfdr_mask, ExperimentConfig{}.dfdr_mask) << r.name;
    if (r.name == "full") {
      EXPECT_EQ(config_to_json(r.cfg), config_to_json(ExperimentConfig{}));
    }
  }
  EXPECT_THROW(parse_suite("nope"), ConfigError);
  EXPECT_EQ(parse_suite("layer_mask"), Suite::layer_mask);
}

TEST(Suites, LossToggleTableHasEightRowsTimesSeeds) {
  ExperimentConfig cfg = tiny_config();
  cfg.steps = 2;
  AblationOptions opts;
  opts.threads = 2;
  const AblationTable t = run_ablation(Suite::loss_toggles, cfg, tiny_bench(), opts);
  ASSERT_EQ(t.rows.size(), 8u);
  std::size_t runs = 0;
  for (const AblationRow& r : t.rows) {
    EXPECT_EQ(r.seeds, cfg.seeds);
    runs += r.seed_metrics.size();
    const double mean = (r.seed_metrics[0] + r.seed_metrics[1]) / 2.0;
    EXPECT_NEAR(r.mean, mean, 1e-15);
    EXPECT_NEAR(r.stddev, std::abs(r.seed_metrics[0] - r.seed_metrics[1]) / std::sqrt(2.0), 1e-15);
  }
  EXPECT_EQ(runs, 16u);

  // Worker count does not change results.
  opts.threads = 1;
  const AblationTable serial = run_ablation(Suite::loss_toggles, cfg, tiny_bench(), opts);
  EXPECT_EQ(metrics_csv(serial.records), metrics_csv(t.records));
}

TEST(Suites, OnlyRowsFilter) {
  ExperimentConfig cfg = tiny_config();
  cfg.steps = 1;
  cfg.seeds = {0};
  AblationOptions opts;
  opts.only_rows = {"full", "baseline"};
  const AblationTable t = run_ablation(Suite::loss_toggles, cfg, tiny_bench(), opts);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0].name, "baseline");
  opts.only_rows = {"bogus"};
  EXPECT_THROW(run_ablation(Suite::loss_toggles, cfg, tiny_bench(), opts), ConfigError);
}

TEST(Suites, ThreadCapFromEnvironment) {
  ::setenv("DRSF_THREADS", "3", 1);
  EXPECT_EQ(thread_cap_from_env(), 3u);
  ::unsetenv("DRSF_THREADS");
  EXPECT_GE(thread_cap_from_env(), 1u);
}

TEST(Metrics, EmptyRecordsGiveHeaderOnlyCsv) {
  EXPECT_EQ(metrics_csv({}), std::string(kMetricsHeader) + "\n");
}

TEST(Metrics, CsvParseBackRecoversTwelveDigitValues) {
  RngStream rng(11);
  std::vector<MetricsRecord> recs;
  for (int i = 0; i < 40; ++i) {
    auto twelve = [&](double lo, double hi) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.12g", rng.uniform(lo, hi));
      return std::strtod(buf, nullptr);
    };
    MetricsRecord r;
    r.run_id = "run" + std::to_string(i % 3);
    r.seed = static_cast<std::uint64_t>(i % 3);
    r.step = static_cast<std::size_t>(i);
    r.domain = i % 2 ? "fog" : "train";
    r.metric = twelve(0, 1);
    r.losses = {twelve(0, 3), twelve(0, 1), twelve(0, 5), twelve(0, 4), twelve(0, 2), 0.0, 0.0};
    r.wall_ms = twelve(0, 1e4);
    recs.push_back(r);
  }
  const std::vector<std::string> lines = split(metrics_csv(recs), '\n');
  ASSERT_EQ(lines.size(), recs.size() + 1);
  EXPECT_EQ(lines[0], kMetricsHeader);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto f = split(lines[i + 1], ',');
    ASSERT_EQ(f.size(), 11u);
    const MetricsRecord& r = recs[i];
    EXPECT_EQ(f[0], r.run_id);
    EXPECT_EQ(std::stoull(f[1]), r.seed);
    EXPECT_EQ(std::stoull(f[2]), r.step);
    EXPECT_EQ(f[3], r.domain);
    const double want[] = {r.metric, r.losses.task, r.losses.align, r.losses.rea, r.losses.adv, r.losses.uda, r.wall_ms};
    for (std::size_t k = 0; k < 7; ++k) EXPECT_EQ(std::strtod(f[4 + k].c_str(), nullptr), want[k]);
  }
}

TEST(Metrics, DelimiterInFieldRejected) {
  MetricsRecord r;
  r.run_id = "a,b";
  EXPECT_THROW(metrics_csv(std::vector<MetricsRecord>{r}), InvalidArgument);
}

TEST(Metrics, JsonSummaryMatchesCsvRows) {
  const ExperimentConfig cfg = tiny_config();
  std::vector<MetricsRecord> recs;
  for (std::uint64_t seed : {0, 1}) {
    const RunResult r = run_training(cfg, tiny_bench(), seed, "seed" + std::to_string(seed));
    recs.insert(recs.end(), r.records.begin(), r.records.end());
  }
  const auto dir = std::filesystem::temp_directory_path() / "drsf_test_metrics";
  std::filesystem::create_directories(dir);
  const std::string stem = (dir / "m").string();
  emit_metrics(recs, cfg, stem);

  std::ifstream csv_in(stem + ".csv");
  std::stringstream csv;
  csv << csv_in.rdbuf();
  std::ifstream json_in(stem + ".json");
  const auto j = nlohmann::json::parse(json_in);
  EXPECT_EQ(j["config"]["steps"], cfg.steps);
  EXPECT_EQ(j["csv_sha256"].get<std::string>().size(), 64u);

  std::map<std::string, std::vector<double>> final_rows;
  const auto lines = split(csv.str(), '\n');
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split(lines[i], ',');
    if (std::stoull(f[2]) == cfg.steps) final_rows[f[3]].push_back(std::strtod(f[4].c_str(), nullptr));
  }
  ASSERT_FALSE(final_rows.empty());
  for (const auto& [domain, values] : final_rows) {
    const double mean = (values[0] + values[1]) / 2.0;
    EXPECT_NEAR(j["final"][domain]["mean"].get<double>(), mean, 1e-12) << domain;
    EXPECT_EQ(j["final"][domain]["count"].get<std::size_t>(), 2u);
  }
}

TEST(Probe, ClassifierTrainingOnFrozenFeaturesLowersAdversarialTerms) {
  RngStream rng(21);
  auto rand = [&](Shape shape, double mean) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = mean + rng.normal();
    return Tensor(std::move(shape), std::move(v));
  };
  const Tensor src = rand({6, 4, 2, 2}, 0.0);
  const Tensor pts[] = {rand({6, 4, 2, 2}, 0.8), rand({6, 4, 2, 2}, -0.8)};
  std::vector<mdsf::FusedBatch> fusions;
  for (std::size_t i = 0; i < 2; ++i) {
    mdsf::FusedBatch f;
    f.features = mdsf::fuse_features(src, pts[i], 0.5);
    f.labels.assign(6, mdsf::fuse_labels(mdsf::DomainLabel::one_hot(0, 3), mdsf::DomainLabel::one_hot(i + 1, 3), 0.5));
    fusions.push_back(f);
  }
  const mdsf::FusedBatch avg = mdsf::average_fusions(fusions);
  std::vector<Tensor> p = {rand({4, 8}, 0.0), Tensor::zeros({8}), rand({8, 3}, 0.0), Tensor::zeros({3})};
  for (Tensor& t : p) t = scale(t, 0.3);
  double prev = INFINITY;
  for (int step = 0; step < 50; ++step) {
    Tape tape;
    std::vector<Tensor> v;
    for (const Tensor& t : p) v.push_back(tape.variable(t));
    const Tensor loss = mdsf::adversarial_loss(src, pts, avg, {v[0], v[1], v[2], v[3]}, {});
    ASSERT_LT(loss.item(), prev) << "step " << step;
    prev = loss.item();
    tape.backward(loss);
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = sub(p[k], scale(tape.gradient(v[k]), 0.05));
  }
}
