#include "drsf/model.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include "drsf/hash.hpp"
#include "drsf/ops.hpp"
#include "drsf/rng.hpp"

namespace drsf::model {

namespace {

std::string stage_prefix(std::size_t s) { return "backbone.stage" + std::to_string(s) + ".conv."; }
std::string dfdr_prefix(std::size_t s) { return "dfdr." + std::to_string(s) + "."; }

Tensor uniform_tensor(Shape shape, double bound, RngStream rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

bool BackboneConfig::any_dfdr() const {
  for (bool b : dfdr_mask) {
    if (b) return true;
  }
  return false;
}

void BackboneConfig::validate() const {
  if (stage_channels.empty()) throw InvalidArgument("BackboneConfig: at least one stage is required");
  for (std::size_t c : stage_channels) {
    if (c == 0) throw InvalidArgument("BackboneConfig: stage width must be positive");
  }
  if (dfdr_mask.size() != stage_channels.size()) {
    throw InvalidArgument("BackboneConfig: dfdr_mask has " + std::to_string(dfdr_mask.size()) + " entries for " +
                          std::to_string(stage_channels.size()) + " stages");
  }
  if (in_channels == 0) throw InvalidArgument("BackboneConfig: in_channels must be positive");
}

void ModelConfig::validate() const {
  backbone.validate();
  if (head.num_classes < 2) throw InvalidArgument("TaskHead: at least two classes are required");
  if (num_domains == 1) throw InvalidArgument("ModelConfig: a domain classifier needs at least two domains");
  if (num_domains > 0 && classifier_hidden == 0) throw InvalidArgument("ModelConfig: classifier_hidden must be positive");
  if (!(dfdr_epsilon >= 0.0)) throw InvalidArgument("ModelConfig: dfdr_epsilon must be non-negative");
  if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw InvalidArgument("ModelConfig: bn_momentum must lie in [0,1]");
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const BackboneConfig& bb = config_.backbone;
  auto init = [&](const std::string& name, Shape shape, double bound) {
    params_.add(name, uniform_tensor(std::move(shape), bound, RngStream(mix_seed(seed, tag_hash(name)))));
  };
  auto constant = [&](const std::string& name, std::size_t n, double value) {
    params_.add(name, Tensor::full({n}, value));
  };

  std::size_t cin = bb.in_channels;
  running_.resize(bb.stages());
  for (std::size_t s = 0; s < bb.stages(); ++s) {
    const std::size_t c = bb.stage_channels[s];
    init(stage_prefix(s) + "weight", {c, cin, 3, 3}, std::sqrt(6.0 / static_cast<double>(cin * 9)));
    constant(stage_prefix(s) + "bias", c, 0.0);
    if (bb.dfdr_mask[s]) {
      constant(dfdr_prefix(s) + "affine.gamma", c, 1.0);
      constant(dfdr_prefix(s) + "affine.beta", c, 0.0);
      init(dfdr_prefix(s) + "cra.weight", {c, 2}, 1.0 / std::sqrt(2.0));
      constant(dfdr_prefix(s) + "cra.bn_gamma", c, 1.0);
      constant(dfdr_prefix(s) + "cra.bn_beta", c, 0.0);
      running_[s] = dfdr::RunningStats::identity(c);
    }
    cin = c;
  }
  const std::size_t k = config_.head.num_classes;
  init("head.weight", {cin, k}, std::sqrt(1.0 / static_cast<double>(cin)));
  constant("head.bias", k, 0.0);
  if (has_classifier()) {
    const std::size_t hd = config_.classifier_hidden;
    init("mdsf.classifier.hidden.weight", {cin, hd}, std::sqrt(6.0 / static_cast<double>(cin)));
    constant("mdsf.classifier.hidden.bias", hd, 0.0);
    init("mdsf.classifier.out.weight", {hd, config_.num_domains}, std::sqrt(1.0 / static_cast<double>(hd)));
    constant("mdsf.classifier.out.bias", config_.num_domains, 0.0);
  }
}

const std::optional<dfdr::RunningStats>& Model::running(std::size_t stage) const {
  if (stage >= running_.size()) throw InvalidArgument("Model::running: stage out of range");
  return running_[stage];
}

void Model::set_running(std::size_t stage, dfdr::RunningStats stats) {
  if (stage >= running_.size() || !running_[stage]) throw InvalidArgument("Model::set_running: stage has no DFDR layer");
  const std::size_t c = config_.backbone.stage_channels[stage];
  if (stats.mean.size() != c || stats.var.size() != c) throw ShapeError("Model::set_running: channel mismatch");
  running_[stage] = std::move(stats);
}

dfdr::AffineParams Model::affine(std::size_t stage) const {
  const std::string p = dfdr_prefix(stage);
  return {bind(params_.get(p + "affine.gamma")), bind(params_.get(p + "affine.beta")), config_.dfdr_epsilon};
}

dfdr::CraParams Model::cra(std::size_t stage) const {
  const std::string p = dfdr_prefix(stage);
  dfdr::CraParams c;
  c.weight = bind(params_.get(p + "cra.weight"));
  c.bn_gamma = bind(params_.get(p + "cra.bn_gamma"));
  c.bn_beta = bind(params_.get(p + "cra.bn_beta"));
  c.running = *running(stage);
  c.bn_momentum = config_.bn_momentum;
  return c;
}

mdsf::DomainClassifierParams Model::classifier() const {
  if (!has_classifier()) throw InvalidArgument("Model::classifier: model was built without a domain classifier");
  return {bind(params_.get("mdsf.classifier.hidden.weight")), bind(params_.get("mdsf.classifier.hidden.bias")),
          bind(params_.get("mdsf.classifier.out.weight")), bind(params_.get("mdsf.classifier.out.bias"))};
}

Tensor Model::run_stage(std::size_t s, const Tensor& x, Mode mode, std::optional<StageSide>* side) const {
  Tensor y;
  {
    OpScope scope("backbone");
    y = relu(conv2d(x, bind(params_.get(stage_prefix(s) + "weight")), bind(params_.get(stage_prefix(s) + "bias"))));
  }
  if (config_.backbone.dfdr_mask[s]) {
    dfdr::LayerOutput out = dfdr::dfdr_layer_forward(y, affine(s), cra(s), mode);
    if (side != nullptr && out.side) *side = StageSide{s, std::move(*out.side), std::move(out.running)};
    y = out.gain;
  }
  return y;
}

ForwardResult Model::forward(const Tensor& images, Mode mode) const {
  const BackboneConfig& bb = config_.backbone;
  if (images.rank() != 4 || images.dim(1) != bb.in_channels) {
    throw ShapeError("Model::forward: expected N x " + std::to_string(bb.in_channels) + " x H x W images, got " +
                     shape_str(images.shape()));
  }
  const std::size_t factor = std::size_t{1} << (bb.stages() - 1);
  if (images.dim(2) % factor != 0 || images.dim(3) % factor != 0) {
    throw ShapeError("Model::forward: image size " + shape_str(images.shape()) + " is not divisible by " +
                     std::to_string(factor));
  }
  ForwardResult result;
  Tensor x = images;
  for (std::size_t s = 0; s < bb.stages(); ++s) {
    std::optional<StageSide> side;
    x = run_stage(s, x, mode, mode == Mode::train ? &side : nullptr);
    const bool last = s + 1 == bb.stages();
    if (last) result.final_primary = side ? side->side.decoupled.f_pri : x;
    if (side) result.sides.push_back(std::move(*side));
    if (!last) {
      OpScope scope("backbone");
      x = avg_pool2(x);
    }
  }
  result.features = x;
  result.logits = head_forward(x, images.dim(2), images.dim(3));
  return result;
}

Tensor Model::forward_from(std::size_t stage, const Tensor& stage_output, std::size_t out_h, std::size_t out_w) const {
  const BackboneConfig& bb = config_.backbone;
  if (stage >= bb.stages()) throw InvalidArgument("Model::forward_from: stage out of range");
  Tensor x = stage_output;
  for (std::size_t s = stage; s < bb.stages(); ++s) {
    if (s > stage) x = run_stage(s, x, Mode::train, nullptr);
    if (s + 1 < bb.stages()) {
      OpScope scope("backbone");
      x = avg_pool2(x);
    }
  }
  return head_forward(x, out_h, out_w);
}

Tensor Model::head_forward(const Tensor& features, std::size_t out_h, std::size_t out_w) const {
  OpScope scope("head");
  const Tensor w = bind(params_.get("head.weight"));
  const Tensor b = bind(params_.get("head.bias"));
  if (features.rank() != 4 || features.dim(1) != w.dim(0)) {
    throw ShapeError("head_forward: features " + shape_str(features.shape()) + " do not match head " + shape_str(w.shape()));
  }
  if (config_.head.mode == TaskMode::classification) {
    return linear(reduce(Reduction::mean, features, {2, 3}, false), w, b);
  }
  if (out_h % features.dim(2) != 0 || out_w % features.dim(3) != 0 || out_h / features.dim(2) != out_w / features.dim(3)) {
    throw ShapeError("head_forward: cannot upsample " + shape_str(features.shape()) + " to " + std::to_string(out_h) + "x" +
                     std::to_string(out_w));
  }
  // A per-pixel linear map commutes with nearest upsampling, so classify first.
  const Tensor logits = conv1x1(features, w, b);
  const std::size_t factor = out_h / features.dim(2);
  return factor == 1 ? logits : upsample_nearest(logits, factor);
}

ParamCount count_params(const Model& model) {
  ParamCount c;
  const ParameterStore& p = model.params();
  c.total = p.scalar_count("backbone.") + p.scalar_count("dfdr.") + p.scalar_count("head.");
  c.dfdr_only = p.scalar_count("dfdr.");
  c.delta_fraction = static_cast<double>(c.dfdr_only) / static_cast<double>(c.total - c.dfdr_only);
  return c;
}

namespace {

constexpr std::string_view kMagic = "drsf-checkpoint";

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(static_cast<std::size_t>(v[i]));
  }
  return out;
}

std::string config_line(const ModelConfig& c) {
  return "stage_channels=" + join(c.backbone.stage_channels) + " dfdr_mask=" + join(c.backbone.dfdr_mask) +
         " in_channels=" + std::to_string(c.backbone.in_channels) + " task=" + std::string(to_string(c.head.mode)) +
         " classes=" + std::to_string(c.head.num_classes) + " num_domains=" + std::to_string(c.num_domains) +
         " classifier_hidden=" + std::to_string(c.classifier_hidden) + " dfdr_epsilon=" + format_exact(c.dfdr_epsilon) +
         " bn_momentum=" + format_exact(c.bn_momentum);
}

struct Entry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

std::vector<Entry> entries(const Model& model) {
  std::vector<Entry> out;
  for (const Parameter& p : model.params()) out.push_back({p.name, p.value.shape(), p.value.to_vector()});
  const auto& channels = model.config().backbone.stage_channels;
  for (std::size_t s = 0; s < channels.size(); ++s) {
    if (const auto& r = model.running(s)) {
      out.push_back({dfdr_prefix(s) + "cra.running_mean", {channels[s]}, r->mean});
      out.push_back({dfdr_prefix(s) + "cra.running_var", {channels[s]}, r->var});
    }
  }
  return out;
}

// Manifest text without the hash line, and the data block.
std::pair<std::string, std::string> encode(const Model& model) {
  std::string head = std::string(kMagic) + " " + std::to_string(kCheckpointFormatVersion) + "\n";
  head += "config " + config_line(model.config()) + "\n";
  std::string data;
  for (const Entry& e : entries(model)) {
    head += "tensor " + e.name + " f64 " + join(e.shape) + "\n";
    for (double v : e.values) put_f64_le(data, v);
  }
  return {head, data};
}

std::string hash_of(const std::string& head, const std::string& data) {
  Sha256 h;
  h.update(head);
  h.update(data);
  return h.hex_digest();
}

std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError("checkpoint: bad integer '" + std::string(s) + "'");
  return v;
}

double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError("checkpoint: bad number '" + std::string(s) + "'");
  return v;
}

std::vector<std::size_t> parse_list(std::string_view s) {
  std::vector<std::size_t> out;
  while (!s.empty()) {
    const std::size_t comma = s.find(',');
    out.push_back(parse_u64(s.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

ModelConfig parse_config(const std::string& line) {
  std::istringstream in(line);
  std::map<std::string, std::string> kv;
  std::string token;
  while (in >> token) {
    const std::size_t eq = token.find('=');
    if (eq == std::string::npos) throw DataError("checkpoint: malformed config field '" + token + "'");
    kv[token.substr(0, eq)] = token.substr(eq + 1);
  }
  auto field = [&](const char* key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw DataError(std::string("checkpoint: config lacks ") + key);
    return it->second;
  };
  ModelConfig c;
  c.backbone.stage_channels = parse_list(field("stage_channels"));
  c.backbone.dfdr_mask.clear();
  for (std::size_t b : parse_list(field("dfdr_mask"))) {
    if (b > 1) throw DataError("checkpoint: dfdr_mask entries must be 0 or 1");
    c.backbone.dfdr_mask.push_back(b == 1);
  }
  c.backbone.in_channels = parse_u64(field("in_channels"));
  try {
    c.head.mode = parse_task_mode(field("task"));
  } catch (const InvalidArgument& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  c.head.num_classes = parse_u64(field("classes"));
  c.num_domains = parse_u64(field("num_domains"));
  c.classifier_hidden = parse_u64(field("classifier_hidden"));
  c.dfdr_epsilon = parse_double(field("dfdr_epsilon"));
  c.bn_momentum = parse_double(field("bn_momentum"));
  return c;
}

}  // namespace

std::string serialize_checkpoint(const Model& model) {
  auto [head, data] = encode(model);
  const std::string hash = hash_of(head, data);
  return head + "content_hash " + hash + "\ndata\n" + data;
}

std::string checkpoint_hash(const Model& model) {
  const auto [head, data] = encode(model);
  return hash_of(head, data);
}

void save_checkpoint(const Model& model, const std::string& path) { write_file(path, serialize_checkpoint(model)); }

Model load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

Model deserialize_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw DataError("checkpoint is truncated inside the manifest");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  const std::string first = next_line();
  if (first.rfind(std::string(kMagic) + " ", 0) != 0) throw DataError("not a checkpoint file (bad magic)");
  const std::uint64_t version = parse_u64(std::string_view(first).substr(kMagic.size() + 1));
  if (version != kCheckpointFormatVersion) {
    throw DataError("unsupported checkpoint format version " + std::to_string(version));
  }
  std::string head = first + "\n";
  const std::string config = next_line();
  if (config.rfind("config ", 0) != 0) throw DataError("checkpoint: missing config line");
  head += config + "\n";

  struct Declared {
    std::string name;
    Shape shape;
  };
  std::vector<Declared> declared;
  std::string declared_hash;
  for (std::string line = next_line(); line != "data"; line = next_line()) {
    std::istringstream in(line);
    std::string kind;
    in >> kind;
    if (kind == "tensor") {
      std::string name, dtype, shape;
      if (!(in >> name >> dtype >> shape) || dtype != "f64") throw DataError("checkpoint: malformed tensor line '" + line + "'");
      declared.push_back({name, parse_list(shape)});
      head += line + "\n";
    } else if (kind == "content_hash") {
      in >> declared_hash;
    } else {
      throw DataError("checkpoint: unexpected manifest line '" + line + "'");
    }
  }
  if (declared_hash.empty()) throw DataError("checkpoint: missing content_hash");

  std::size_t expected = 0;
  for (const Declared& d : declared) expected += shape_numel(d.shape) * 8;
  const std::size_t available = bytes.size() - pos;
  if (available != expected) {
    throw DataError("checkpoint is " + std::string(available < expected ? "truncated" : "oversized") + ": " +
                    std::to_string(available) + " data bytes, expected " + std::to_string(expected));
  }
  const std::string data = bytes.substr(pos);
  if (hash_of(head, data) != declared_hash) throw DataError("checkpoint is corrupt: content hash mismatch");

  ModelConfig cfg;
  try {
    cfg = parse_config(config.substr(7));
    cfg.validate();
  } catch (const InvalidArgument& e) {
    throw DataError(std::string("checkpoint: invalid config: ") + e.what());
  }
  Model model(cfg, 0);
  const std::vector<Entry> expected_entries = entries(model);
  if (expected_entries.size() != declared.size()) {
    throw DataError("checkpoint declares " + std::to_string(declared.size()) + " tensors, model expects " +
                    std::to_string(expected_entries.size()));
  }
  std::map<std::string, std::vector<double>> running_values;
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  for (const Declared& d : declared) {
    std::vector<double> values(shape_numel(d.shape));
    for (double& v : values) {
      v = get_f64_le(p);
      p += 8;
    }
    if (const Parameter* existing = model.params().find(d.name)) {
      if (existing->value.shape() != d.shape) {
        throw DataError("checkpoint: shape of " + d.name + " is " + shape_str(d.shape) + ", model expects " +
                        shape_str(existing->value.shape()));
      }
      model.params().get(d.name).value = Tensor(d.shape, std::move(values)).as_trainable();
    } else {
      running_values[d.name] = std::move(values);
    }
  }
  const auto& channels = cfg.backbone.stage_channels;
  for (std::size_t s = 0; s < channels.size(); ++s) {
    if (!model.running(s)) continue;
    auto mean_it = running_values.find(dfdr_prefix(s) + "cra.running_mean");
    auto var_it = running_values.find(dfdr_prefix(s) + "cra.running_var");
    if (mean_it == running_values.end() || var_it == running_values.end()) {
      throw DataError("checkpoint: missing running statistics for stage " + std::to_string(s));
    }
    if (mean_it->second.size() != channels[s] || var_it->second.size() != channels[s]) {
      throw DataError("checkpoint: running statistics for stage " + std::to_string(s) + " have the wrong length");
    }
    model.set_running(s, {std::move(mean_it->second), std::move(var_it->second)});
    running_values.erase(mean_it);
    running_values.erase(dfdr_prefix(s) + "cra.running_var");
  }
  if (!running_values.empty()) throw DataError("checkpoint: unknown tensor " + running_values.begin()->first);
  return model;
}

}  // namespace drsf::model
