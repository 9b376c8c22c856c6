// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.
// `--only 3,5` restricts the run to selected criteria.
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "drsf/dfdr.hpp"
#include "drsf/grad_suite.hpp"
#include "drsf/harness.hpp"
#include "drsf/mdsf.hpp"
#include "drsf/model.hpp"
#include "drsf/ops.hpp"
#include "drsf/synth.hpp"

using namespace drsf;

namespace {

// Reduced compute profile for the training-trend criteria; one run of the full
// default profile (32 px, 2000 images, 3000 steps) costs about 17 CPU-minutes.
constexpr std::size_t kTrendImage = 16;
constexpr std::size_t kTrendSteps = 1500;
constexpr std::size_t kTrendTrain = 400;
constexpr std::size_t kTrendTest = 100;

// Margins measured once on the reduced profile (full-baseline 0.1215, s12-s123
// 0.0187) and committed as regression floors.
constexpr double kFullOverBaselineFloor = 0.12;
constexpr double kFirstStagesOverAllFloor = 0.018;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_tensor(RngStream& rng, Shape shape, double sd = 1.0, double mean = 0.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = mean + sd * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// 1. Algebraic invariants

Outcome invariants() {
  const auto t0 = std::chrono::steady_clock::now();
  RngStream rng(mix_seed(1, tag_hash("acceptance/invariants")));
  double recon = 0.0, compl_err = 0.0, label_err = 0.0, grl_err = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.below(3), c = 1 + rng.below(4), h = 1 + rng.below(4), w = 1 + rng.below(4);
    const Tensor f = random_tensor(rng, {n, c, h, w}, rng.uniform(0.1, 5.0), rng.uniform(-3.0, 3.0));
    const dfdr::AffineParams a{random_tensor(rng, {c}, 0.5, 1.0), random_tensor(rng, {c}), dfdr::kDefaultEpsilon};
    const dfdr::DecoupledFeatures d = dfdr::decouple(f, a);
    for (std::size_t i = 0; i < f.numel(); ++i) recon = std::max(recon, std::abs(d.f_pri[i] + d.f_sha[i] - f[i]));

    const dfdr::CraParams cra{random_tensor(rng, {c, 2}), random_tensor(rng, {c}, 0.5, 1.0), random_tensor(rng, {c}),
                              dfdr::RunningStats::identity(c)};
    const dfdr::CraResult att = dfdr::cra_forward(dfdr::style_descriptor(d), cra, Mode::train);
    const dfdr::ReassembledFeatures r = dfdr::reassemble(d, att.attention);
    for (std::size_t i = 0; i < f.numel(); ++i) {
      compl_err = std::max(compl_err, std::abs(r.gain[i] + r.interference[i] - 2.0 * d.f_pri[i] - d.f_sha[i]));
    }

    const std::size_t k = 1 + rng.below(5);
    const double lambda = mdsf::sample_lambda(rng.uniform(0.2, 5.0), rng);
    const mdsf::DomainLabel l = mdsf::fuse_labels(mdsf::DomainLabel::one_hot(0, k + 1),
                                                  mdsf::DomainLabel::one_hot(1 + rng.below(k), k + 1), lambda);
    double total = 0.0;
    for (double p : l.distribution) total += p;
    label_err = std::max(label_err, std::abs(total - 1.0));

    // GRL: gradient through the reversal equals -factor times the plain gradient.
    const double factor = rng.uniform(0.0, 3.0);
    const Tensor x0 = random_tensor(rng, {n, c});
    const Tensor wts = random_tensor(rng, {n, c});
    auto grad_of = [&](bool reversed) {
      Tape tape;
      const Tensor x = tape.variable(x0);
      const Tensor y = reversed ? mdsf::grl(x, {factor}) : x;
      tape.backward(sum(mul(exp(scale(y, 0.3)), wts)));
      return tape.gradient(x);
    };
    const Tensor g_rev = grad_of(true), g = grad_of(false);
    for (std::size_t i = 0; i < g.numel(); ++i) grl_err = std::max(grl_err, std::abs(g_rev[i] + factor * g[i]));
  }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "decouple " << recon << ", complementarity " << compl_err << ", labels " << label_err << ", grl " << grl_err
     << "; " << fmt("%.1f s", secs);
  return {recon < 1e-9 && compl_err < 1e-9 && label_err < 1e-9 && grl_err == 0.0 && secs < 30.0, os.str()};
}

// ---------------------------------------------------------------------------
// 2. Autodiff oracle

Outcome autodiff() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t cases = 0;
  bool enough = true;
  for (const GradCaseResult& r : run_grad_suite(5, 0)) {
    ++cases;
    enough = enough && r.instances >= 5;
    if (r.worst_rel_error >= worst) {
      worst = r.worst_rel_error;
      worst_name = r.name;
    }
  }
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << cases << " cases x 5 instances, worst " << worst << " (" << worst_name << "); " << fmt("%.1f s", secs);
  return {enough && worst < 1e-4 && secs < 120.0, os.str()};
}

// ---------------------------------------------------------------------------
// 3. Formula oracles

double rbf_mean(const Tensor& a, const Tensor& b, double h) {
  const std::size_t d = a.dim(1);
  double s = 0.0;
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < b.dim(0); ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < d; ++k) d2 += (a[i * d + k] - b[j * d + k]) * (a[i * d + k] - b[j * d + k]);
      s += std::exp(-d2 / (2.0 * h * h));
    }
  }
  return s / static_cast<double>(a.dim(0) * b.dim(0));
}

double soft_ce_rows(const Tensor& logits, const std::vector<std::vector<double>>& labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits[r * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits[r * k + j] - mx);
    for (std::size_t j = 0; j < k; ++j) total -= labels[r][j] * (logits[r * k + j] - mx - std::log(z));
  }
  return total / static_cast<double>(n);
}

Outcome formulas() {
  RngStream rng(mix_seed(3, tag_hash("acceptance/formulas")));
  double mmd_err = 0.0, mmd_self = 0.0, rea_err = 0.0, adv_err = 0.0, ent_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor(rng, {2 + rng.below(6), 4});
    const Tensor y = random_tensor(rng, {2 + rng.below(6), 4}, rng.uniform(0.5, 2.0), rng.uniform(-1.0, 1.0));
    const double h = dfdr::resolve_bandwidth(x, y, {});
    const double oracle = rbf_mean(x, x, h) + rbf_mean(y, y, h) - 2.0 * rbf_mean(x, y, h);
    mmd_err = std::max(mmd_err, std::abs(dfdr::mmd_squared(x, y, {}).item() - oracle));
    mmd_self = std::max(mmd_self, std::abs(dfdr::mmd_squared(x, x, {}).item()));

    const double g = rng.uniform(0, 3), p = rng.uniform(0, 3), i = rng.uniform(0, 3);
    const double rea = dfdr::reassembly_loss(Tensor::scalar(g), Tensor::scalar(p), Tensor::scalar(i)).item();
    rea_err = std::max(rea_err, std::abs(rea - (std::log1p(std::exp(g - p)) + std::log1p(std::exp(p - i)))));

    // Adversarial objective against per-row cross-entropy sums.
    const std::size_t k = 1 + rng.below(3), n = 2 + rng.below(3), c = 3;
    const Tensor src = random_tensor(rng, {n, c, 2, 2});
    std::vector<Tensor> pts;
    std::vector<mdsf::FusedBatch> fusions;
    for (std::size_t d = 0; d < k; ++d) {
      pts.push_back(random_tensor(rng, {n, c, 2, 2}, 1.0, 0.5));
      const double lam = mdsf::sample_lambda(2.0, rng);
      mdsf::FusedBatch f;
      f.features = mdsf::fuse_features(src, pts.back(), lam);
      f.labels.assign(n, mdsf::fuse_labels(mdsf::DomainLabel::one_hot(0, k + 1),
                                           mdsf::DomainLabel::one_hot(d + 1, k + 1), lam));
      fusions.push_back(f);
    }
    const mdsf::FusedBatch avg = mdsf::average_fusions(fusions);
    const mdsf::DomainClassifierParams cls{random_tensor(rng, {c, 5}, 0.5), random_tensor(rng, {5}, 0.1),
                                           random_tensor(rng, {5, k + 1}, 0.5), random_tensor(rng, {k + 1}, 0.1)};
    auto rows = [&](std::size_t idx) {
      std::vector<std::vector<double>> r(n, std::vector<double>(k + 1, 0.0));
      for (auto& v : r) v[idx] = 1.0;
      return r;
    };
    double want = soft_ce_rows(mdsf::domain_classifier_forward(src, cls), rows(0));
    double pseudo = 0.0;
    for (std::size_t d = 0; d < k; ++d) pseudo += soft_ce_rows(mdsf::domain_classifier_forward(pts[d], cls), rows(d + 1));
    want += pseudo / static_cast<double>(k);
    std::vector<std::vector<double>> fused_rows;
    for (const auto& l : avg.labels) fused_rows.push_back(l.distribution);
    want += soft_ce_rows(mdsf::domain_classifier_forward(avg.features, cls), fused_rows);
    adv_err = std::max(adv_err, std::abs(mdsf::adversarial_loss(src, pts, avg, cls, {}).item() - want));

    // Pixel entropy against a triple loop.
    const Tensor probs = softmax(random_tensor(rng, {2, 3, 3, 4}, 2.0), 1);
    double ent = 0.0;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t hh = 0; hh < 3; ++hh) {
        for (std::size_t ww = 0; ww < 4; ++ww) {
          for (std::size_t kk = 0; kk < 3; ++kk) {
            const double v = probs[((b * 3 + kk) * 3 + hh) * 4 + ww];
            ent -= v * std::log(v);
          }
        }
      }
    }
    ent /= 24.0;
    ent_err = std::max(ent_err, std::abs(dfdr::prediction_entropy(probs, TaskMode::segmentation).item() - ent));
  }
  const double probe = harness::total_loss(Tensor::scalar(1.0), Tensor::scalar(0.2), Tensor::scalar(0.2),
                                           Tensor::scalar(0.2), harness::ExperimentConfig{}).item();
  std::ostringstream os;
  os << "mmd " << mmd_err << ", mmd(X,X) " << mmd_self << ", reassembly " << rea_err << ", adversarial " << adv_err
     << ", pixel entropy " << ent_err << ", weighted total " << fmt("%.17g", probe);
  const bool ok = mmd_err < 1e-10 && mmd_self < 1e-10 && rea_err < 1e-10 && adv_err < 1e-10 && ent_err < 1e-10 &&
                  probe == 1.36;
  return {ok, os.str()};
}

// ---------------------------------------------------------------------------
// 4. Beta sampler

Outcome sampler() {
  RngStream rng(mix_seed(4, tag_hash("acceptance/beta")));
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double l = mdsf::sample_lambda(2.0, rng);
    s += l;
    s2 += l * l;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  std::ostringstream os;
  os << "mean " << fmt("%.5f", mean) << ", variance " << fmt("%.5f", var);
  return {std::abs(mean - 0.5) <= 0.01 && std::abs(var - 0.05) <= 0.005, os.str()};
}

// ---------------------------------------------------------------------------
// 5. Baseline equivalence

harness::ExperimentConfig trend_config() {
  harness::ExperimentConfig c;
  c.stage_channels = {8, 16, 32};
  c.dfdr_mask = {true, true, true};
  c.steps = kTrendSteps;
  c.benchmark.image_size = kTrendImage;
  c.benchmark.train_size = kTrendTrain;
  c.benchmark.test_size = kTrendTest;
  c.record_wall_clock = false;
  return c;
}

Outcome baseline_equivalence(const synth::Benchmark& bench) {
  harness::ExperimentConfig cfg = trend_config();
  cfg.K = 0;
  cfg.lambda1 = cfg.lambda2 = cfg.lambda3 = 0.0;
  cfg.dfdr_mask.assign(cfg.stage_channels.size(), false);
  model::Model a(cfg.model_config(), 11), b(cfg.model_config(), 11);
  harness::Trainer drsf_trainer(cfg, a);
  harness::PlainTrainer plain(cfg, b);
  RngStream data(12), fusion(13);
  double worst = 0.0;
  for (int step = 0; step < 200; ++step) {
    const auto idx = harness::sample_indices(bench.source_train.size(), cfg.batch_size, data);
    const harness::DomainBatch src = harness::make_batch(bench.source_train, idx, cfg.task_mode);
    const double l1 = drsf_trainer.train_step(src, {}, fusion).total;
    worst = std::max(worst, std::abs(l1 - plain.train_step(src)));
  }
  std::ostringstream os;
  os << "200 steps, worst per-step loss gap " << worst;
  return {worst <= 1e-12, os.str()};
}

// ---------------------------------------------------------------------------
// 6. Loss-toggle trend

const harness::AblationRow& row(const harness::AblationTable& t, const std::string& name) {
  for (const auto& r : t.rows) {
    if (r.name == name) return r;
  }
  throw Error("missing ablation row " + name);
}

Outcome loss_toggle_trend(const synth::Benchmark& bench) {
  const std::clock_t c0 = std::clock();
  harness::AblationOptions opts;
  opts.only_rows = {"baseline", "align", "rea", "adv", "full"};
  const harness::AblationTable t = harness::run_ablation(harness::Suite::loss_toggles, trend_config(), bench, opts);
  const double cpu_min = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC / 60.0;
  const auto& base = row(t, "baseline");
  const auto& full = row(t, "full");
  int wins = 0;
  for (std::size_t i = 0; i < full.seed_metrics.size(); ++i) wins += full.seed_metrics[i] > base.seed_metrics[i];
  bool ordering = true;
  std::ostringstream os;
  os << "full>baseline in " << wins << "/5 seeds; means";
  for (const auto& r : t.rows) os << " " << r.name << "=" << fmt("%.4f", r.mean);
  for (const char* single : {"align", "rea", "adv"}) {
    ordering = ordering && full.mean >= row(t, single).mean && row(t, single).mean >= base.mean;
  }
  const double margin = full.mean - base.mean;
  os << "; margin " << fmt("%.4f", margin) << " (floor " << fmt("%.4f", kFullOverBaselineFloor) << "); "
     << fmt("%.1f CPU-min", cpu_min);
  return {wins >= 4 && ordering && margin >= kFullOverBaselineFloor && cpu_min < 20.0, os.str()};
}

// ---------------------------------------------------------------------------
// 7. Layer-placement trend

Outcome layer_trend(const synth::Benchmark& bench) {
  const harness::ExperimentConfig cfg = trend_config();
  const std::size_t stages = cfg.stage_channels.size();
  // Rows run one at a time so that a diverging placement is reported instead of aborting the suite.
  std::vector<std::pair<std::string, std::optional<double>>> means;
  for (const auto& spec : harness::suite_rows(harness::Suite::layer_mask, cfg, {})) {
    harness::AblationOptions opts;
    opts.only_rows = {spec.name};
    try {
      means.emplace_back(spec.name, harness::run_ablation(harness::Suite::layer_mask, cfg, bench, opts).rows.at(0).mean);
    } catch (const NumericError&) {
      means.emplace_back(spec.name, std::nullopt);
    }
  }
  const auto mean_of = [&](const std::string& name) {
    for (const auto& [n, m] : means) {
      if (n == name) return m;
    }
    throw Error("missing ablation row " + name);
  };
  std::string first = "s", all = "s";
  for (std::size_t s = 1; s <= stages; ++s) {
    if (s < stages) first += std::to_string(s);
    all += std::to_string(s);
  }
  const std::optional<double> base = mean_of("baseline");
  bool all_above = base.has_value();
  std::ostringstream os;
  os << "means";
  for (const auto& [name, m] : means) {
    os << " " << name << "=" << (m ? fmt("%.4f", *m) : std::string("diverged"));
    all_above = all_above && m && *m >= *base;
  }
  const std::optional<double> a = mean_of(first), b = mean_of(all);
  const bool margin_ok = a && b && *a - *b >= kFirstStagesOverAllFloor;
  os << "; " << first << "-" << all << " " << (a && b ? fmt("%.4f", *a - *b) : std::string("n/a")) << " (floor "
     << fmt("%.4f", kFirstStagesOverAllFloor) << ")";
  return {all_above && margin_ok, os.str()};
}

// ---------------------------------------------------------------------------
// 8. Parameter overhead

Outcome overhead() {
  const model::Model m(model::ModelConfig{}, 0);
  const model::ParamCount c = model::count_params(m);
  std::size_t closed_dfdr = 0, closed_total = 0, in = 3;
  for (std::size_t ch : model::BackboneConfig{}.stage_channels) {
    closed_total += in * ch * 9 + ch;
    closed_dfdr += model::dfdr_stage_params(ch);
    in = ch;
  }
  closed_total += in * 4 + 4 + closed_dfdr;
  const double delta = static_cast<double>(closed_dfdr) / static_cast<double>(closed_total - closed_dfdr);
  std::ostringstream os;
  os << "total " << c.total << ", dfdr " << c.dfdr_only << ", delta_fraction " << fmt("%.5f", c.delta_fraction);
  return {c.total == closed_total && c.dfdr_only == closed_dfdr && c.delta_fraction == delta && delta < 0.10, os.str()};
}

// ---------------------------------------------------------------------------
// 9. Determinism and persistence

Outcome determinism() {
  harness::ExperimentConfig cfg = trend_config();
  cfg.steps = 40;
  cfg.benchmark.train_size = 40;
  cfg.benchmark.test_size = 20;
  cfg.log_every = 10;
  const synth::Benchmark bench = harness::load_benchmark_for(cfg);
  const harness::RunResult a = harness::run_training(cfg, bench, 7);
  const harness::RunResult b = harness::run_training(cfg, bench, 7);
  const bool csv_same = harness::metrics_csv(a.records) == harness::metrics_csv(b.records);
  const bool ckpt_same = model::checkpoint_hash(*a.model) == model::checkpoint_hash(*b.model);

  const auto dir = std::filesystem::temp_directory_path() / "drsf_acceptance_bench";
  std::filesystem::remove_all(dir);
  synth::save_benchmark(bench, dir.string());
  const synth::Benchmark back = synth::load_benchmark(dir.string());
  bool data_same = synth::serialize_dataset(back.source_train) == synth::serialize_dataset(bench.source_train) &&
                   synth::serialize_dataset(back.source_test) == synth::serialize_dataset(bench.source_test);
  for (std::size_t i = 0; i < bench.pseudo.size(); ++i) {
    data_same = data_same && synth::serialize_dataset(back.pseudo[i]) == synth::serialize_dataset(bench.pseudo[i]);
  }
  for (std::size_t i = 0; i < bench.targets.size(); ++i) {
    data_same = data_same && synth::serialize_dataset(back.targets[i]) == synth::serialize_dataset(bench.targets[i]);
  }
  const std::string ckpt = (dir / "a.ckpt").string();
  model::save_checkpoint(*a.model, ckpt);
  const bool ckpt_roundtrip = model::checkpoint_hash(model::load_checkpoint(ckpt)) == model::checkpoint_hash(*a.model);
  std::filesystem::remove_all(dir);
  std::ostringstream os;
  os << "metrics csv " << (csv_same ? "identical" : "DIFFERS") << ", checkpoint hash "
     << (ckpt_same ? "identical" : "DIFFERS") << ", dataset round-trip " << (data_same ? "bit-exact" : "DIFFERS")
     << ", checkpoint round-trip " << (ckpt_roundtrip ? "bit-exact" : "DIFFERS");
  return {csv_same && ckpt_same && data_same && ckpt_roundtrip, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  const auto selected = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  std::optional<synth::Benchmark> trend_bench;
  auto bench = [&]() -> const synth::Benchmark& {
    if (!trend_bench) trend_bench = harness::load_benchmark_for(trend_config());
    return *trend_bench;
  };

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"algebraic invariants", invariants},
      {"autodiff oracle", autodiff},
      {"formula oracles", formulas},
      {"Beta(2,2) sampler", sampler},
      {"baseline equivalence", [&] { return baseline_equivalence(bench()); }},
      {"loss-toggle trend", [&] { return loss_toggle_trend(bench()); }},
      {"layer-placement trend", [&] { return layer_trend(bench()); }},
      {"parameter overhead", overhead},
      {"determinism and persistence", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
