#include "drsf/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

#include "drsf/dfdr.hpp"
#include "drsf/hash.hpp"
#include "drsf/mdsf.hpp"
#include "drsf/ops.hpp"
#include "drsf/optim.hpp"

namespace drsf::harness {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  for (double l : {lambda1, lambda2, lambda3}) {
    if (!(l >= 0.0) || !std::isfinite(l)) fail("loss weights must be finite and non-negative");
  }
  if (!(beta_alpha > 0.0)) fail("beta_alpha must be positive");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0,1)");
  if (batch_size < 2) fail("batch_size must be at least 2 (batch statistics need two samples)");
  if (steps == 0) fail("steps must be at least 1");
  if (seeds.empty()) fail("seeds must not be empty");
  if (stage_channels.empty()) fail("stage_channels must not be empty");
  if (dfdr_mask.size() != stage_channels.size()) fail("dfdr_mask length must equal the number of stages");
  if (!pseudo_domains.empty() && pseudo_domains.size() != K) fail("pseudo_domains must list exactly K indices");
  for (std::size_t i = 0; i < pseudo_domains.size(); ++i) {
    for (std::size_t j = i + 1; j < pseudo_domains.size(); ++j) {
      if (pseudo_domains[i] == pseudo_domains[j]) fail("pseudo_domains must not repeat an index");
    }
  }
  if (uda_plugin) {
    if (!has_uda_plugin(uda_plugin->name)) fail("unknown uda plugin: " + uda_plugin->name);
    if (!(uda_plugin->weight >= 0.0)) fail("uda plugin weight must be non-negative");
    if (uda_plugin->weight > 0.0 && K == 0) fail("a uda plugin needs pseudo domains (K >= 1)");
  }
  if (classifier_hidden == 0) fail("classifier_hidden must be positive");
  if (!(grl_factor >= 0.0)) fail("grl_factor must be non-negative");
  if (eval_batch == 0) fail("eval_batch must be positive");
  const std::size_t factor = std::size_t{1} << (stage_channels.size() - 1);
  if (data_dir.empty() && benchmark.image_size % factor != 0) {
    fail("benchmark.image_size must be divisible by 2^(stages-1)");
  }
  if (benchmark.train_size == 0 || benchmark.test_size == 0) fail("benchmark sizes must be positive");
}

std::vector<std::size_t> ExperimentConfig::pseudo_indices() const {
  if (!pseudo_domains.empty()) return pseudo_domains;
  std::vector<std::size_t> idx(K);
  for (std::size_t i = 0; i < K; ++i) idx[i] = i;
  return idx;
}

model::ModelConfig ExperimentConfig::model_config() const {
  model::ModelConfig m;
  m.backbone.stage_channels = stage_channels;
  m.backbone.dfdr_mask = dfdr_mask;
  m.head.mode = task_mode;
  m.head.num_classes = 4;
  m.num_domains = (K > 0 && lambda3 > 0.0) ? K + 1 : 0;
  m.classifier_hidden = classifier_hidden;
  return m;
}

namespace {

template <typename T>
T get_as(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

double get_number(const json& j, const std::string& key) {
  if (!j.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return j.get<double>();
}

std::size_t get_count(const json& j, const std::string& key) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) {
    throw ConfigError("config key '" + key + "' must be a non-negative integer");
  }
  return j.get<std::size_t>();
}

template <typename F>
void for_each_strict(const json& obj, const std::string& where, F handle) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) handle(it.key(), it.value());
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  for_each_strict(root, "config", [&](const std::string& key, const json& v) {
    if (key == "lambda1") c.lambda1 = get_number(v, key);
    else if (key == "lambda2") c.lambda2 = get_number(v, key);
    else if (key == "lambda3") c.lambda3 = get_number(v, key);
    else if (key == "beta_alpha") c.beta_alpha = get_number(v, key);
    else if (key == "lr") c.lr = get_number(v, key);
    else if (key == "momentum") c.momentum = get_number(v, key);
    else if (key == "batch_size") c.batch_size = get_count(v, key);
    else if (key == "steps") c.steps = get_count(v, key);
    else if (key == "seeds") c.seeds = get_as<std::vector<std::uint64_t>>(v, key);
    else if (key == "stage_channels") c.stage_channels = get_as<std::vector<std::size_t>>(v, key);
    else if (key == "dfdr_mask") c.dfdr_mask = get_as<std::vector<bool>>(v, key);
    else if (key == "task_mode") {
      try {
        c.task_mode = parse_task_mode(get_as<std::string>(v, key));
      } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
      }
    }
    else if (key == "K") c.K = get_count(v, key);
    else if (key == "pseudo_domains") c.pseudo_domains = get_as<std::vector<std::size_t>>(v, key);
    else if (key == "data_dir") c.data_dir = get_as<std::string>(v, key);
    else if (key == "benchmark") {
      for_each_strict(v, "benchmark", [&](const std::string& k, const json& bv) {
        if (k == "image_size") c.benchmark.image_size = get_count(bv, k);
        else if (k == "train_size") c.benchmark.train_size = get_count(bv, k);
        else if (k == "test_size") c.benchmark.test_size = get_count(bv, k);
        else if (k == "master_seed") c.benchmark.master_seed = get_as<std::uint64_t>(bv, k);
        else throw ConfigError("unknown config key 'benchmark." + k + "'");
      });
    }
    else if (key == "uda_plugin") {
      if (v.is_null()) {
        c.uda_plugin.reset();
        return;
      }
      UdaPluginConfig plugin;
      for_each_strict(v, "uda_plugin", [&](const std::string& k, const json& pv) {
        if (k == "name") plugin.name = get_as<std::string>(pv, k);
        else if (k == "weight") plugin.weight = get_number(pv, k);
        else throw ConfigError("unknown config key 'uda_plugin." + k + "'");
      });
      c.uda_plugin = plugin;
    }
    else if (key == "classifier_hidden") c.classifier_hidden = get_count(v, key);
    else if (key == "grl_factor") c.grl_factor = get_number(v, key);
    else if (key == "log_every") c.log_every = get_count(v, key);
    else if (key == "eval_batch") c.eval_batch = get_count(v, key);
    else if (key == "record_wall_clock") c.record_wall_clock = get_as<bool>(v, key);
    else throw ConfigError("unknown config key '" + key + "'");
  });
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text);
}

namespace {

json config_json(const ExperimentConfig& c) {
  json j;
  j["lambda1"] = c.lambda1;
  j["lambda2"] = c.lambda2;
  j["lambda3"] = c.lambda3;
  j["beta_alpha"] = c.beta_alpha;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["batch_size"] = c.batch_size;
  j["steps"] = c.steps;
  j["seeds"] = c.seeds;
  j["stage_channels"] = c.stage_channels;
  j["dfdr_mask"] = c.dfdr_mask;
  j["task_mode"] = std::string(to_string(c.task_mode));
  j["K"] = c.K;
  j["pseudo_domains"] = c.pseudo_domains;
  j["data_dir"] = c.data_dir;
  j["benchmark"] = {{"image_size", c.benchmark.image_size},
                    {"train_size", c.benchmark.train_size},
                    {"test_size", c.benchmark.test_size},
                    {"master_seed", c.benchmark.master_seed}};
  if (c.uda_plugin) {
    j["uda_plugin"] = {{"name", c.uda_plugin->name}, {"weight", c.uda_plugin->weight}};
  } else {
    j["uda_plugin"] = nullptr;
  }
  j["classifier_hidden"] = c.classifier_hidden;
  j["grl_factor"] = c.grl_factor;
  j["log_every"] = c.log_every;
  j["eval_batch"] = c.eval_batch;
  j["record_wall_clock"] = c.record_wall_clock;
  return j;
}

}  // namespace

std::string config_to_json(const ExperimentConfig& cfg) { return config_json(cfg).dump(2); }

// ---------------------------------------------------------------------------
// Losses

Tensor total_loss(const Tensor& task, const Tensor& align, const Tensor& rea, const Tensor& adv,
                  const ExperimentConfig& cfg) {
  for (const Tensor* t : {&task, &align, &rea, &adv}) {
    if (t->numel() != 1) throw ShapeError("total_loss: loss terms must be scalars");
    if (!std::isfinite(t->item())) throw NumericError("total_loss: non-finite loss term");
  }
  for (double l : {cfg.lambda1, cfg.lambda2, cfg.lambda3}) {
    if (!(l >= 0.0)) throw InvalidArgument("total_loss: loss weights must be non-negative");
  }
  OpScope scope("loss/total");
  const std::array<double, 4> w{1.0, cfg.lambda1, cfg.lambda2, cfg.lambda3};
  const std::array<double, 4> x{task.item(), align.item(), rea.item(), adv.item()};
  // Compensated dot product (error-free products and sums), so the weighted
  // total is rounded once rather than after every partial sum.
  double sum = 0.0, err = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double prod = w[i] * x[i];
    const double prod_err = std::fma(w[i], x[i], -prod);
    const double t = sum + prod;
    const double z = t - sum;
    err += ((sum - (t - z)) + (prod - z)) + prod_err;
    sum = t;
  }
  return make_result("weighted_sum", {}, {sum + err}, {&task, &align, &rea, &adv},
                     [w](std::span<const double> g, std::span<std::vector<double>* const> grad_in) {
                       for (std::size_t i = 0; i < 4; ++i) {
                         if (grad_in[i]) (*grad_in[i])[0] += w[i] * g[0];
                       }
                     });
}

namespace {

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, UdaLossFn>& registry() {
  static std::map<std::string, UdaLossFn> r = [] {
    std::map<std::string, UdaLossFn> init;
    // Pseudo-domain batches treated as unlabeled targets: mean prediction entropy.
    init["entropy-min"] = [](std::span<const Tensor> logits, TaskMode mode) {
      if (logits.empty()) throw InvalidArgument("entropy-min: no pseudo-domain outputs");
      Tensor total;
      for (std::size_t i = 0; i < logits.size(); ++i) {
        Tensor h = dfdr::prediction_entropy(softmax(logits[i], 1), mode);
        total = i == 0 ? h : add(total, h);
      }
      return scale(total, 1.0 / static_cast<double>(logits.size()));
    };
    return init;
  }();
  return r;
}

}  // namespace

void register_uda_plugin(const std::string& name, UdaLossFn fn) {
  if (name.empty() || !fn) throw InvalidArgument("register_uda_plugin: empty name or function");
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(fn);
}

bool has_uda_plugin(const std::string& name) {
  std::lock_guard lock(registry_mutex());
  return registry().count(name) > 0;
}

Tensor uda_loss(const std::string& name, std::span<const Tensor> pseudo_logits, TaskMode mode) {
  UdaLossFn fn;
  {
    std::lock_guard lock(registry_mutex());
    const auto it = registry().find(name);
    if (it == registry().end()) throw ConfigError("unknown uda plugin: " + name);
    fn = it->second;
  }
  OpScope scope("loss/uda");
  Tensor loss = fn(pseudo_logits, mode);
  if (loss.numel() != 1 || !std::isfinite(loss.item())) throw NumericError("uda plugin " + name + " returned a non-finite or non-scalar loss");
  return loss;
}

// ---------------------------------------------------------------------------
// Batches

std::vector<std::size_t> sample_indices(std::size_t dataset_size, std::size_t count, RngStream& rng) {
  if (dataset_size == 0) throw InvalidArgument("sample_indices: empty dataset");
  std::vector<std::size_t> idx(count);
  for (std::size_t& i : idx) i = static_cast<std::size_t>(rng.below(dataset_size));
  return idx;
}

DomainBatch make_batch(const synth::DomainDataset& ds, std::span<const std::size_t> indices, TaskMode mode) {
  const std::size_t h = ds.manifest.height, w = ds.manifest.width, hw = h * w;
  const std::size_t k = ds.manifest.class_count;
  const std::size_t n = indices.size();
  std::vector<double> images(n * 3 * hw);
  const bool seg = mode == TaskMode::segmentation;
  std::vector<double> targets(seg ? n * k * hw : n * k, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t i = indices[b];
    if (i >= ds.size()) throw InvalidArgument("make_batch: index out of range");
    std::copy_n(ds.images.begin() + static_cast<std::ptrdiff_t>(i * 3 * hw), 3 * hw,
                images.begin() + static_cast<std::ptrdiff_t>(b * 3 * hw));
    if (seg) {
      for (std::size_t p = 0; p < hw; ++p) targets[(b * k + ds.pixel_labels[i * hw + p]) * hw + p] = 1.0;
    } else {
      targets[b * k + ds.image_labels[i]] = 1.0;
    }
  }
  DomainBatch batch;
  batch.images = Tensor({n, 3, h, w}, std::move(images));
  batch.targets = seg ? Tensor({n, k, h, w}, std::move(targets)) : Tensor({n, k}, std::move(targets));
  return batch;
}

namespace {

// Argmax over axis 1 with lowest-index ties.
std::vector<std::uint16_t> argmax_classes(const Tensor& t) {
  const std::size_t n = t.dim(0), k = t.dim(1);
  const std::size_t inner = t.numel() / (n * k);
  const auto v = t.values();
  std::vector<std::uint16_t> out(n * inner);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < inner; ++p) {
      std::size_t best = 0;
      double best_v = v[(b * k) * inner + p];
      for (std::size_t c = 1; c < k; ++c) {
        const double x = v[(b * k + c) * inner + p];
        if (x > best_v) {
          best_v = x;
          best = c;
        }
      }
      out[b * inner + p] = static_cast<std::uint16_t>(best);
    }
  }
  return out;
}

double batch_accuracy(const Tensor& logits, const Tensor& targets) {
  const auto pred = argmax_classes(logits);
  const auto truth = argmax_classes(targets);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

void apply_sgd(model::Model& model, const GradientMap& grads, const ExperimentConfig& cfg) {
  // Parameters outside the graph (e.g. an unused classifier) keep their values and momentum.
  std::vector<Parameter*> active;
  for (Parameter& p : model.params()) {
    if (grads.count(p.name) > 0) active.push_back(&p);
  }
  sgd_step(active, grads, cfg.lr, cfg.momentum);
}

void commit_running(model::Model& model, const model::ForwardResult& fwd) {
  for (const model::StageSide& s : fwd.sides) model.set_running(s.stage, s.running);
}

}  // namespace

// ---------------------------------------------------------------------------
// Trainers

Trainer::Trainer(const ExperimentConfig& cfg, model::Model& model) : cfg_(cfg), model_(model) {
  cfg_.validate();
  if (cfg_.lambda3 > 0.0 && cfg_.K > 0 && !model_.has_classifier()) {
    throw ConfigError("Trainer: adversarial loss requested but the model has no domain classifier");
  }
}

LossBreakdown Trainer::train_step(const DomainBatch& source, std::span<const DomainBatch> pseudo, RngStream& rng) {
  const std::size_t k = cfg_.K;
  if (pseudo.size() != k) {
    throw InvalidArgument("train_step: got " + std::to_string(pseudo.size()) + " pseudo-domain batches, config has K=" +
                          std::to_string(k));
  }
  for (const DomainBatch& b : pseudo) {
    if (b.images.shape() != source.images.shape()) throw ShapeError("train_step: domain batches must have equal shapes");
  }
  const TaskMode mode = cfg_.task_mode;
  const std::size_t out_h = source.images.dim(2), out_w = source.images.dim(3);
  const bool has_dfdr = model_.config().backbone.any_dfdr();

  Tape tape;
  // Running statistics are folded in domain order: source, then pseudo 1..K.
  const model::ForwardResult src = model_.forward(source.images, Mode::train);
  commit_running(model_, src);
  std::vector<model::ForwardResult> pts;
  pts.reserve(k);
  for (const DomainBatch& b : pseudo) {
    pts.push_back(model_.forward(b.images, Mode::train));
    commit_running(model_, pts.back());
  }

  Tensor task;
  {
    OpScope scope("loss/task");
    task = cross_entropy_soft(src.logits, source.targets, 1);
    if (k > 0) {
      for (std::size_t i = 0; i < k; ++i) task = add(task, cross_entropy_soft(pts[i].logits, pseudo[i].targets, 1));
      task = scale(task, 1.0 / static_cast<double>(k + 1));
    }
  }

  Tensor align = Tensor::scalar(0.0);
  if (cfg_.lambda1 > 0.0 && k > 0 && has_dfdr) {
    OpScope scope("loss/align");
    for (std::size_t j = 0; j < src.sides.size(); ++j) {
      std::vector<Tensor> pseudo_pri;
      for (const model::ForwardResult& p : pts) pseudo_pri.push_back(p.sides[j].side.decoupled.f_pri);
      align = add(align, dfdr::mmd_loss(src.sides[j].side.decoupled.f_pri, pseudo_pri));
    }
  }

  Tensor rea = Tensor::scalar(0.0);
  if (cfg_.lambda2 > 0.0 && has_dfdr) {
    const Tensor h_gain = dfdr::prediction_entropy(softmax(src.logits, 1), mode);
    for (const model::StageSide& s : src.sides) {
      const Tensor h_pri =
          dfdr::prediction_entropy(softmax(model_.forward_from(s.stage, s.side.decoupled.f_pri, out_h, out_w), 1), mode);
      Tensor h_interf;
      {
        OpScope scope("dfdr/interference");
        h_interf = dfdr::prediction_entropy(
            softmax(model_.forward_from(s.stage, s.side.reassembled.interference, out_h, out_w), 1), mode);
      }
      rea = add(rea, dfdr::reassembly_loss(h_gain, h_pri, h_interf));
    }
  }

  Tensor adv = Tensor::scalar(0.0);
  if (cfg_.lambda3 > 0.0 && k > 0) {
    OpScope scope("mdsf");
    const std::size_t n = source.images.dim(0);
    const mdsf::DomainLabel source_label = mdsf::DomainLabel::one_hot(0, k + 1);
    std::vector<mdsf::FusedBatch> fusions;
    std::vector<Tensor> pseudo_gains;
    for (std::size_t i = 0; i < k; ++i) {
      const double lambda = mdsf::sample_lambda(cfg_.beta_alpha, rng);
      mdsf::FusedBatch f;
      f.features = mdsf::fuse_features(src.final_primary, pts[i].features, lambda);
      f.labels.assign(n, mdsf::fuse_labels(source_label, mdsf::DomainLabel::one_hot(i + 1, k + 1), lambda));
      f.lambda_used = lambda;
      f.domain_index = i + 1;
      fusions.push_back(std::move(f));
      pseudo_gains.push_back(pts[i].features);
    }
    const mdsf::FusedBatch averaged = mdsf::average_fusions(fusions);
    adv = mdsf::adversarial_loss(src.features, pseudo_gains, averaged, model_.classifier(),
                                 mdsf::GrlConfig{cfg_.grl_factor});
  }

  Tensor total = total_loss(task, align, rea, adv, cfg_);
  LossBreakdown out;
  if (cfg_.uda_plugin && cfg_.uda_plugin->weight > 0.0) {
    std::vector<Tensor> logits;
    for (const model::ForwardResult& p : pts) logits.push_back(p.logits);
    const Tensor u = uda_loss(cfg_.uda_plugin->name, logits, mode);
    out.uda = u.item();
    total = add(total, scale(u, cfg_.uda_plugin->weight));
  }
  if (!std::isfinite(total.item())) throw NumericError("train_step: non-finite total loss");

  const GradientMap grads = tape.backward(total);
  apply_sgd(model_, grads, cfg_);

  out.task = task.item();
  out.align = align.item();
  out.rea = rea.item();
  out.adv = adv.item();
  out.total = total.item();
  out.source_accuracy = batch_accuracy(src.logits, source.targets);
  return out;
}

PlainTrainer::PlainTrainer(const ExperimentConfig& cfg, model::Model& model) : cfg_(cfg), model_(model) {
  cfg_.validate();
}

double PlainTrainer::train_step(const DomainBatch& source) {
  const ParameterStore& params = model_.params();
  const std::size_t stages = model_.config().backbone.stages();
  Tape tape;
  Tensor x = source.images;
  for (std::size_t s = 0; s < stages; ++s) {
    const std::string prefix = "backbone.stage" + std::to_string(s) + ".conv.";
    x = relu(conv2d(x, bind(params.get(prefix + "weight")), bind(params.get(prefix + "bias"))));
    if (s + 1 < stages) x = avg_pool2(x);
  }
  const Tensor w = bind(params.get("head.weight"));
  const Tensor b = bind(params.get("head.bias"));
  Tensor logits;
  if (model_.config().head.mode == TaskMode::classification) {
    logits = linear(reduce(Reduction::mean, x, {2, 3}, false), w, b);
  } else {
    logits = conv1x1(x, w, b);
    const std::size_t factor = source.images.dim(2) / x.dim(2);
    if (factor > 1) logits = upsample_nearest(logits, factor);
  }
  const Tensor loss = cross_entropy_soft(logits, source.targets, 1);
  const GradientMap grads = tape.backward(loss);
  apply_sgd(model_, grads, cfg_);
  return loss.item();
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<std::uint16_t> predict(const model::Model& model, const Tensor& images) {
  return argmax_classes(model.forward(images, Mode::eval).logits);
}

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw InvalidArgument("ConfusionMatrix: no classes");
}

void ConfusionMatrix::add(std::span<const std::uint16_t> truth, std::span<const std::uint16_t> predicted) {
  if (truth.size() != predicted.size()) throw ShapeError("ConfusionMatrix::add: length mismatch");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= classes_ || predicted[i] >= classes_) throw InvalidArgument("ConfusionMatrix::add: class out of range");
    ++counts_[truth[i] * classes_ + predicted[i]];
  }
}

std::uint64_t ConfusionMatrix::at(std::size_t truth, std::size_t predicted) const {
  return counts_.at(truth * classes_ + predicted);
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t c : counts_) t += c;
  return t;
}

double ConfusionMatrix::accuracy() const {
  const std::uint64_t t = total();
  if (t == 0) throw InvalidArgument("ConfusionMatrix: empty");
  std::uint64_t diag = 0;
  for (std::size_t k = 0; k < classes_; ++k) diag += at(k, k);
  return static_cast<double>(diag) / static_cast<double>(t);
}

double ConfusionMatrix::mean_iou() const {
  if (total() == 0) throw InvalidArgument("ConfusionMatrix: empty");
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < classes_; ++k) {
    const std::uint64_t tp = at(k, k);
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t j = 0; j < classes_; ++j) {
      if (j == k) continue;
      fp += at(j, k);
      fn += at(k, j);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    sum += static_cast<double>(tp) / static_cast<double>(denom);
    ++present;
  }
  return sum / static_cast<double>(present);
}

double evaluate(const model::Model& model, const synth::DomainDataset& ds, TaskMode mode, std::size_t batch) {
  if (ds.size() == 0) throw InvalidArgument("evaluate: empty dataset");
  if (batch == 0) throw InvalidArgument("evaluate: batch must be positive");
  ConfusionMatrix cm(model.config().head.num_classes);
  const std::size_t hw = ds.manifest.height * ds.manifest.width;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t n = std::min(batch, ds.size() - start);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    const DomainBatch b = make_batch(ds, idx, mode);
    const std::vector<std::uint16_t> pred = predict(model, b.images);
    if (mode == TaskMode::segmentation) {
      cm.add(std::span(ds.pixel_labels).subspan(start * hw, n * hw), pred);
    } else {
      cm.add(std::span(ds.image_labels).subspan(start, n), pred);
    }
  }
  return mode == TaskMode::segmentation ? cm.mean_iou() : cm.accuracy();
}

double mean_over_targets(std::span<const double> metrics) {
  if (metrics.empty()) throw InvalidArgument("mean_over_targets: no targets");
  double sum = 0.0;
  for (double m : metrics) sum += m;
  return sum / static_cast<double>(metrics.size());
}

// ---------------------------------------------------------------------------
// Runs

synth::Benchmark load_benchmark_for(const ExperimentConfig& cfg) {
  if (!cfg.data_dir.empty()) return synth::load_benchmark(cfg.data_dir);
  synth::BenchmarkSpec spec = synth::default_benchmark_spec();
  const std::size_t s = cfg.benchmark.image_size;
  spec.scene.height = s;
  spec.scene.width = s;
  spec.scene.min_extent = std::max<std::size_t>(2, s / 4);
  spec.scene.max_extent = std::max<std::size_t>(spec.scene.min_extent, s / 2);
  spec.train_size = cfg.benchmark.train_size;
  spec.test_size = cfg.benchmark.test_size;
  spec.master_seed = cfg.benchmark.master_seed;
  return synth::build_benchmark(spec);
}

RunResult run_training(const ExperimentConfig& cfg, const synth::Benchmark& bench, std::uint64_t seed,
                       const std::string& run_id) {
  cfg.validate();
  const std::vector<std::size_t> idx = cfg.pseudo_indices();
  std::vector<const synth::DomainDataset*> pseudo;
  for (std::size_t i : idx) {
    if (i >= bench.pseudo.size()) {
      throw ConfigError("pseudo domain index " + std::to_string(i) + " exceeds the benchmark's " +
                        std::to_string(bench.pseudo.size()) + " pseudo domains");
    }
    pseudo.push_back(&bench.pseudo[i]);
  }
  if (bench.targets.empty()) throw DataError("benchmark has no target domains");
  const std::size_t factor = std::size_t{1} << (cfg.stage_channels.size() - 1);
  if (bench.source_train.manifest.height % factor != 0 || bench.source_train.manifest.width % factor != 0) {
    throw ConfigError("image size is not divisible by 2^(stages-1)");
  }

  const auto t0 = std::chrono::steady_clock::now();
  auto wall = [&]() -> double {
    if (!cfg.record_wall_clock) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };

  RunResult result;
  result.model.emplace(cfg.model_config(), mix_seed(seed, tag_hash("init")));
  model::Model& model = *result.model;
  Trainer trainer(cfg, model);
  RngStream data_rng(mix_seed(seed, tag_hash("data")));
  RngStream fusion_rng(mix_seed(seed, tag_hash("fusion")));

  LossBreakdown last;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const DomainBatch src = make_batch(bench.source_train, sample_indices(bench.source_train.size(), cfg.batch_size, data_rng),
                                       cfg.task_mode);
    std::vector<DomainBatch> pts;
    for (const synth::DomainDataset* d : pseudo) {
      pts.push_back(make_batch(*d, sample_indices(d->size(), cfg.batch_size, data_rng), cfg.task_mode));
    }
    last = trainer.train_step(src, pts, fusion_rng);
    if ((cfg.log_every > 0 && step % cfg.log_every == 0) || step == cfg.steps) {
      result.records.push_back({run_id, seed, step, "train", last.source_accuracy, last, wall()});
    }
  }

  for (const synth::DomainDataset& t : bench.targets) {
    const double m = evaluate(model, t, cfg.task_mode, cfg.eval_batch);
    result.target_names.push_back(t.manifest.domain_name);
    result.target_metrics.push_back(m);
    result.records.push_back({run_id, seed, cfg.steps, t.manifest.domain_name, m, last, wall()});
  }
  result.mpt = mean_over_targets(result.target_metrics);
  result.records.push_back({run_id, seed, cfg.steps, "mPT", result.mpt, last, wall()});
  return result;
}

// ---------------------------------------------------------------------------
// Ablations

Suite parse_suite(const std::string& name) {
  if (name == "loss_toggles") return Suite::loss_toggles;
  if (name == "layer_mask") return Suite::layer_mask;
  if (name == "per_pseudo_domain") return Suite::per_pseudo_domain;
  throw ConfigError("unknown ablation suite: " + name);
}

std::string to_string(Suite suite) {
  switch (suite) {
    case Suite::loss_toggles:
      return "loss_toggles";
    case Suite::layer_mask:
      return "layer_mask";
    case Suite::per_pseudo_domain:
      return "per_pseudo_domain";
  }
  return "unknown";
}

namespace {

ExperimentConfig baseline_of(const ExperimentConfig& base) {
  ExperimentConfig c = base;
  c.lambda1 = c.lambda2 = c.lambda3 = 0.0;
  c.K = 0;
  c.pseudo_domains.clear();
  c.uda_plugin.reset();
  c.dfdr_mask.assign(c.stage_channels.size(), false);
  return c;
}

}  // namespace

std::vector<AblationRowSpec> suite_rows(Suite suite, const ExperimentConfig& base,
                                        const std::vector<std::string>& pseudo_names) {
  std::vector<AblationRowSpec> rows;
  rows.push_back({"baseline", baseline_of(base)});
  const std::size_t stages = base.stage_channels.size();
  switch (suite) {
    case Suite::loss_toggles: {
      static const char* names[] = {"align", "rea", "adv"};
      for (unsigned bits = 1; bits < 8; ++bits) {
        const bool align = bits & 1u, rea = bits & 2u, adv = bits & 4u;
        ExperimentConfig c = base;
        c.lambda1 = align ? base.lambda1 : 0.0;
        c.lambda2 = rea ? base.lambda2 : 0.0;
        c.lambda3 = adv ? base.lambda3 : 0.0;
        std::string name;
        for (unsigned b = 0; b < 3; ++b) {
          if (bits & (1u << b)) name += (name.empty() ? "" : "+") + std::string(names[b]);
        }
        rows.push_back({bits == 7 ? "full" : name, c});
      }
      break;
    }
    case Suite::layer_mask: {
      if (stages < 2) throw ConfigError("layer_mask suite needs at least two stages");
      auto masked = [&](std::size_t upto_exclusive, std::optional<std::size_t> single) {
        ExperimentConfig c = base;
        c.dfdr_mask.assign(stages, false);
        if (single) {
          c.dfdr_mask[*single] = true;
        } else {
          for (std::size_t s = 0; s < upto_exclusive; ++s) c.dfdr_mask[s] = true;
        }
        return c;
      };
      for (std::size_t s = 0; s + 1 < stages; ++s) rows.push_back({"s" + std::to_string(s + 1), masked(0, s)});
      std::string first, all;
      for (std::size_t s = 0; s < stages; ++s) {
        if (s + 1 < stages) first += std::to_string(s + 1);
        all += std::to_string(s + 1);
      }
      // With two stages the "first stages" row coincides with the single-stage row.
      if (stages > 2) rows.push_back({"s" + first, masked(stages - 1, std::nullopt)});
      rows.push_back({"s" + all, masked(stages, std::nullopt)});
      break;
    }
    case Suite::per_pseudo_domain: {
      const std::vector<std::size_t> selected = base.pseudo_indices();
      if (selected.empty()) throw ConfigError("per_pseudo_domain suite needs K >= 1");
      for (std::size_t i : selected) {
        if (i >= pseudo_names.size()) throw ConfigError("pseudo domain index out of range");
        ExperimentConfig c = base;
        c.K = 1;
        c.pseudo_domains = {i};
        rows.push_back({"+" + pseudo_names[i], c});
      }
      rows.push_back({"all", base});
      break;
    }
  }
  return rows;
}

std::size_t thread_cap_from_env() {
  std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DRSF_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return hw;
}

namespace {

double sample_stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

AblationTable run_ablation(Suite suite, const ExperimentConfig& base, const synth::Benchmark& bench,
                           const AblationOptions& options) {
  base.validate();
  std::vector<std::string> names;
  for (const synth::DomainDataset& d : bench.pseudo) names.push_back(d.manifest.domain_name);
  std::vector<AblationRowSpec> specs = suite_rows(suite, base, names);
  if (!options.only_rows.empty()) {
    for (const std::string& want : options.only_rows) {
      const auto it = std::find_if(specs.begin(), specs.end(), [&](const AblationRowSpec& r) { return r.name == want; });
      if (it == specs.end()) throw ConfigError("suite " + to_string(suite) + " has no row named " + want);
    }
    // Rows keep suite order regardless of the order they were requested in.
    std::erase_if(specs, [&](const AblationRowSpec& r) {
      return std::find(options.only_rows.begin(), options.only_rows.end(), r.name) == options.only_rows.end();
    });
  }

  struct Job {
    std::size_t row;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t r = 0; r < specs.size(); ++r) {
    for (std::uint64_t s : base.seeds) jobs.push_back({r, s});
  }
  std::vector<std::optional<RunResult>> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t j = next.fetch_add(1); j < jobs.size(); j = next.fetch_add(1)) {
      try {
        const AblationRowSpec& spec = specs[jobs[j].row];
        RunResult r = run_training(spec.cfg, bench, jobs[j].seed,
                                   to_string(suite) + "/" + spec.name + "/seed" + std::to_string(jobs[j].seed));
        r.model.reset();
        results[j] = std::move(r);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const std::size_t cap = options.threads > 0 ? options.threads : thread_cap_from_env();
  const std::size_t threads = std::max<std::size_t>(1, std::min(cap, jobs.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  AblationTable table;
  table.suite = suite;
  for (std::size_t r = 0; r < specs.size(); ++r) {
    AblationRow row;
    row.name = specs[r].name;
    for (std::size_t j = 0; j < jobs.size(); ++j) {
      if (jobs[j].row != r) continue;
      row.seeds.push_back(jobs[j].seed);
      row.seed_metrics.push_back(results[j]->mpt);
      table.records.insert(table.records.end(), results[j]->records.begin(), results[j]->records.end());
    }
    row.mean = mean_over_targets(row.seed_metrics);
    row.stddev = sample_stddev(row.seed_metrics);
    table.rows.push_back(std::move(row));
  }
  return table;
}

namespace {

std::string fmt12(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

void require_csv_safe(const std::string& s) {
  if (s.find_first_of(",\n\r\"") != std::string::npos) throw InvalidArgument("metrics: field contains a CSV delimiter: " + s);
}

}  // namespace

void write_ablation_csv(const AblationTable& table, const std::string& path) {
  std::string out = "suite,row,seeds,mean,stddev,seed_metrics\n";
  for (const AblationRow& r : table.rows) {
    std::string per;
    for (std::size_t i = 0; i < r.seed_metrics.size(); ++i) per += (i ? ";" : "") + fmt12(r.seed_metrics[i]);
    out += to_string(table.suite) + "," + r.name + "," + std::to_string(r.seeds.size()) + "," + fmt12(r.mean) + "," +
           fmt12(r.stddev) + "," + per + "\n";
  }
  write_file(path, out);
}

std::string metrics_csv(std::span<const MetricsRecord> records) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const MetricsRecord& r : records) {
    require_csv_safe(r.run_id);
    require_csv_safe(r.domain);
    out += r.run_id + "," + std::to_string(r.seed) + "," + std::to_string(r.step) + "," + r.domain + "," + fmt12(r.metric) +
           "," + fmt12(r.losses.task) + "," + fmt12(r.losses.align) + "," + fmt12(r.losses.rea) + "," +
           fmt12(r.losses.adv) + "," + fmt12(r.losses.uda) + "," + fmt12(r.wall_ms) + "\n";
  }
  return out;
}

std::string metrics_summary_json(std::span<const MetricsRecord> records, const ExperimentConfig& cfg) {
  // Final rows of each run: the records at that run's largest step.
  std::map<std::string, std::size_t> final_step;
  for (const MetricsRecord& r : records) final_step[r.run_id] = std::max(final_step[r.run_id], r.step);
  std::map<std::string, std::vector<double>> by_domain;
  for (const MetricsRecord& r : records) {
    if (r.step == final_step[r.run_id]) by_domain[r.domain].push_back(r.metric);
  }
  json domains = json::object();
  for (const auto& [name, values] : by_domain) {
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    domains[name] = {{"mean", mean}, {"stddev", sample_stddev(values)}, {"count", values.size()}};
  }
  json j;
  j["config"] = config_json(cfg);
  j["final"] = domains;
  j["csv_sha256"] = sha256_hex(metrics_csv(records));
  return j.dump(2);
}

void emit_metrics(std::span<const MetricsRecord> records, const ExperimentConfig& cfg, const std::string& stem) {
  write_file(stem + ".csv", metrics_csv(records));
  write_file(stem + ".json", metrics_summary_json(records, cfg));
}

}  // namespace drsf::harness
