#include "drsf/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>

#include "drsf/hash.hpp"
#include "drsf/tensor.hpp"

namespace drsf::synth {

namespace {

bool is_token(const std::string& s) {
  if (s.empty()) return false;
  return std::none_of(s.begin(), s.end(), [](char ch) { return ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '='; });
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

void SceneSpec::validate() const {
  if (height == 0 || width == 0) throw InvalidArgument("SceneSpec: empty canvas");
  if (min_shapes > max_shapes) throw InvalidArgument("SceneSpec: min_shapes > max_shapes");
  if (max_shapes > 0 && shape_inventory.empty()) throw InvalidArgument("SceneSpec: empty shape inventory");
  if (min_extent == 0 || min_extent > max_extent) throw InvalidArgument("SceneSpec: invalid shape extent range");
  if (max_extent > std::min(height, width)) throw InvalidArgument("SceneSpec: shapes do not fit inside the canvas");
  if (class_count != 4) throw InvalidArgument("SceneSpec: class_count must be 4 (background + 3 shapes)");
  if (palette.size() != class_count) throw InvalidArgument("SceneSpec: palette needs one colour per class");
  for (const Rgb& c : palette) {
    for (double v : c) {
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("SceneSpec: palette colours must lie in [0,1]");
    }
  }
  if (!(color_jitter >= 0.0) || !(background_texture >= 0.0)) throw InvalidArgument("SceneSpec: negative jitter");
}

Scene rasterize(const SceneSpec& spec, const std::vector<ShapeInstance>& shapes, const Rgb& background) {
  const std::size_t h = spec.height, w = spec.width, hw = h * w;
  Scene scene{h, w, std::vector<double>(3 * hw), std::vector<std::uint16_t>(hw, 0)};
  for (std::size_t c = 0; c < 3; ++c) std::fill_n(scene.image.begin() + static_cast<std::ptrdiff_t>(c * hw), hw, background[c]);
  for (const ShapeInstance& s : shapes) {
    if (s.extent == 0 || s.x0 + s.extent > w || s.y0 + s.extent > h) {
      throw InvalidArgument("rasterize: shape does not fit inside the canvas");
    }
    const double e = static_cast<double>(s.extent);
    const double half = 0.5 * e;
    for (std::size_t y = s.y0; y < s.y0 + s.extent; ++y) {
      const double py = static_cast<double>(y - s.y0) + 0.5;
      for (std::size_t x = s.x0; x < s.x0 + s.extent; ++x) {
        const double px = static_cast<double>(x - s.x0) + 0.5;
        bool inside = false;
        switch (s.kind) {
          case ShapeKind::square:
            inside = true;
            break;
          case ShapeKind::circle:
            inside = (px - half) * (px - half) + (py - half) * (py - half) <= half * half;
            break;
          case ShapeKind::triangle:
            // Apex at the top centre, base along the bottom edge.
            inside = std::abs(px - half) <= 0.5 * py;
            break;
        }
        if (!inside) continue;
        const std::size_t i = y * w + x;
        scene.labels[i] = static_cast<std::uint16_t>(s.kind);
        for (std::size_t c = 0; c < 3; ++c) scene.image[c * hw + i] = s.color[c];
      }
    }
  }
  return scene;
}

Scene generate_scene(const SceneSpec& spec, RngStream& rng) {
  spec.validate();
  auto jitter = [&](const Rgb& base) {
    Rgb out{};
    for (std::size_t c = 0; c < 3; ++c) out[c] = clamp01(base[c] + rng.uniform(-spec.color_jitter, spec.color_jitter));
    return out;
  };
  const Rgb background = jitter(spec.palette[0]);
  const std::size_t count = spec.min_shapes + rng.below(spec.max_shapes - spec.min_shapes + 1);
  std::vector<ShapeInstance> shapes;
  shapes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ShapeInstance s;
    s.kind = spec.shape_inventory[rng.below(spec.shape_inventory.size())];
    s.extent = spec.min_extent + rng.below(spec.max_extent - spec.min_extent + 1);
    s.x0 = rng.below(spec.width - s.extent + 1);
    s.y0 = rng.below(spec.height - s.extent + 1);
    s.color = jitter(spec.palette[static_cast<std::size_t>(s.kind)]);
    shapes.push_back(s);
  }
  Scene scene = rasterize(spec, shapes, background);
  if (spec.background_texture > 0.0) {
    const std::size_t hw = scene.height * scene.width;
    for (std::size_t i = 0; i < hw; ++i) {
      if (scene.labels[i] != 0) continue;
      for (std::size_t c = 0; c < 3; ++c) {
        double& v = scene.image[c * hw + i];
        v = clamp01(v + spec.background_texture * rng.normal());
      }
    }
  }
  return scene;
}

void StyleTransform::validate() const {
  if (!is_token(name)) throw InvalidArgument("StyleTransform: name must be a non-empty token without whitespace");
  const double params[] = {brightness, gains[0], gains[1], gains[2], contrast, fog_alpha,
                           fog_color[0], fog_color[1], fog_color[2], noise_sigma};
  for (double v : params) {
    if (!std::isfinite(v)) throw InvalidArgument("StyleTransform '" + name + "': non-finite parameter");
  }
  if (!(contrast > 0.0)) throw InvalidArgument("StyleTransform '" + name + "': contrast must be positive");
  if (!(fog_alpha >= 0.0 && fog_alpha < 1.0)) throw InvalidArgument("StyleTransform '" + name + "': fog_alpha must lie in [0,1)");
  if (!(noise_sigma >= 0.0)) throw InvalidArgument("StyleTransform '" + name + "': noise_sigma must be non-negative");
}

std::vector<double> apply_style(const std::vector<double>& image, std::size_t height, std::size_t width,
                                const StyleTransform& t, RngStream& rng) {
  t.validate();
  const std::size_t hw = height * width;
  if (image.size() != 3 * hw) throw ShapeError("apply_style: image must be 3 x H x W");
  std::vector<double> out(image.size());
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double x = image[c * hw + i];
      if (!(x >= 0.0 && x <= 1.0)) throw InvalidArgument("apply_style: input pixels must lie in [0,1]");
      double v = t.contrast * (t.gains[c] * x + t.brightness) * (1.0 - t.fog_alpha) + t.fog_alpha * t.fog_color[c];
      if (t.noise_sigma > 0.0) v += t.noise_sigma * rng.normal();
      out[c * hw + i] = clamp01(v);
    }
  }
  return out;
}

double style_distance(const StyleTransform& a, const StyleTransform& b) {
  auto vec = [](const StyleTransform& t) {
    return std::array<double, 10>{t.brightness, t.gains[0], t.gains[1], t.gains[2], t.contrast, t.fog_alpha,
                                  t.fog_alpha * t.fog_color[0], t.fog_alpha * t.fog_color[1],
                                  t.fog_alpha * t.fog_color[2], t.noise_sigma};
  };
  const auto va = vec(a), vb = vec(b);
  double d = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) d = std::max(d, std::abs(va[i] - vb[i]));
  return d;
}

std::uint16_t dominant_class(const std::vector<std::uint16_t>& labels, std::size_t class_count) {
  std::vector<std::size_t> counts(class_count, 0);
  for (std::uint16_t l : labels) {
    if (l >= class_count) throw InvalidArgument("dominant_class: label out of range");
    ++counts[l];
  }
  std::uint16_t best = 0;
  std::size_t best_count = 0;
  for (std::size_t k = 1; k < class_count; ++k) {
    if (counts[k] > best_count) {
      best = static_cast<std::uint16_t>(k);
      best_count = counts[k];
    }
  }
  return best;
}

std::string DomainDataset::compute_hash() const {
  const DatasetManifest& m = manifest;
  Sha256 h;
  std::string header = "drsf-dataset-content";
  put_u64_le(header, m.count);
  put_u64_le(header, m.height);
  put_u64_le(header, m.width);
  put_u64_le(header, m.class_count);
  h.update(header);
  std::string block;
  block.reserve(images.size() * 4);
  for (float v : images) put_f32_le(block, v);
  h.update(block);
  block.clear();
  for (std::uint16_t v : pixel_labels) put_u16_le(block, v);
  for (std::uint16_t v : image_labels) put_u16_le(block, v);
  h.update(block);
  return h.hex_digest();
}

BenchmarkSpec default_benchmark_spec() {
  BenchmarkSpec spec;
  spec.source_transform = StyleTransform{};
  spec.source_transform.name = "day";

  StyleTransform night;
  night.name = "night";
  night.brightness = -0.12;
  night.gains = {0.55, 0.55, 0.65};
  night.contrast = 0.9;
  night.noise_sigma = 0.03;
  night.seed = 1;

  StyleTransform fog;
  fog.name = "fog";
  fog.fog_alpha = 0.45;
  fog.fog_color = {0.75, 0.75, 0.78};
  fog.contrast = 0.9;
  fog.noise_sigma = 0.01;
  fog.seed = 2;

  StyleTransform dusk;
  dusk.name = "dusk";
  dusk.brightness = -0.05;
  dusk.gains = {0.70, 0.75, 1.15};
  dusk.contrast = 1.1;
  dusk.noise_sigma = 0.02;
  dusk.seed = 3;

  StyleTransform deep_night;
  deep_night.name = "deep-night";
  deep_night.brightness = -0.2;
  deep_night.gains = {0.42, 0.45, 0.55};
  deep_night.contrast = 0.8;
  deep_night.noise_sigma = 0.05;
  deep_night.seed = 11;

  StyleTransform dim_fog;
  dim_fog.name = "dim-fog";
  dim_fog.brightness = -0.08;
  dim_fog.gains = {0.65, 0.65, 0.7};
  dim_fog.fog_alpha = 0.3;
  dim_fog.fog_color = {0.55, 0.55, 0.6};
  dim_fog.contrast = 0.85;
  dim_fog.noise_sigma = 0.03;
  dim_fog.seed = 12;

  spec.pseudo_transforms = {night, fog, dusk};
  spec.target_transforms = {deep_night, dim_fog};
  return spec;
}

namespace {

DomainDataset make_dataset(const BenchmarkSpec& spec, const std::string& name, const std::string& split,
                           std::uint64_t scene_seed, std::size_t count, const StyleTransform& transform) {
  DomainDataset ds;
  DatasetManifest& m = ds.manifest;
  m.domain_name = name;
  m.split = split;
  m.master_seed = spec.master_seed;
  m.scene_seed = scene_seed;
  m.transform = transform;
  m.count = count;
  m.height = spec.scene.height;
  m.width = spec.scene.width;
  m.class_count = spec.scene.class_count;
  const std::size_t hw = m.height * m.width;
  ds.images.resize(count * 3 * hw);
  ds.pixel_labels.resize(count * hw);
  ds.image_labels.resize(count);
  const std::uint64_t style_seed =
      mix_seed(mix_seed(spec.master_seed, tag_hash("style/" + name + "/" + split)), transform.seed);
  for (std::size_t i = 0; i < count; ++i) {
    RngStream scene_rng(mix_seed(scene_seed, i));
    const Scene scene = generate_scene(spec.scene, scene_rng);
    RngStream style_rng(mix_seed(style_seed, i));
    const std::vector<double> styled = apply_style(scene.image, scene.height, scene.width, transform, style_rng);
    std::transform(styled.begin(), styled.end(), ds.images.begin() + static_cast<std::ptrdiff_t>(i * 3 * hw),
                   [](double v) { return static_cast<float>(v); });
    std::copy(scene.labels.begin(), scene.labels.end(), ds.pixel_labels.begin() + static_cast<std::ptrdiff_t>(i * hw));
    ds.image_labels[i] = dominant_class(scene.labels, m.class_count);
  }
  m.content_hash = ds.compute_hash();
  return ds;
}

}  // namespace

Benchmark build_benchmark(const BenchmarkSpec& spec) {
  spec.scene.validate();
  spec.source_transform.validate();
  if (spec.train_size == 0 || spec.test_size == 0) throw InvalidArgument("build_benchmark: empty split");
  for (const StyleTransform& p : spec.pseudo_transforms) p.validate();
  for (const StyleTransform& t : spec.target_transforms) t.validate();
  for (const StyleTransform& p : spec.pseudo_transforms) {
    for (const StyleTransform& t : spec.target_transforms) {
      const double d = style_distance(p, t);
      if (d < spec.disjoint_margin) {
        throw InvalidArgument("build_benchmark: target '" + t.name + "' overlaps pseudo domain '" + p.name +
                              "' (distance " + std::to_string(d) + " < margin " + std::to_string(spec.disjoint_margin) + ")");
      }
    }
  }

  Benchmark b;
  const std::uint64_t train_scenes = mix_seed(spec.master_seed, tag_hash("scene/train"));
  b.source_train = make_dataset(spec, spec.source_transform.name, "train", train_scenes, spec.train_size, spec.source_transform);
  b.source_test = make_dataset(spec, spec.source_transform.name, "test", mix_seed(spec.master_seed, tag_hash("scene/test")),
                               spec.test_size, spec.source_transform);
  for (const StyleTransform& p : spec.pseudo_transforms) {
    b.pseudo.push_back(make_dataset(spec, p.name, "train", train_scenes, spec.train_size, p));
  }
  for (const StyleTransform& t : spec.target_transforms) {
    b.targets.push_back(make_dataset(spec, t.name, "test", mix_seed(spec.master_seed, tag_hash("scene/target/" + t.name)),
                                     spec.test_size, t));
  }

  std::vector<const DomainDataset*> domains{&b.source_train};
  for (const DomainDataset& d : b.pseudo) domains.push_back(&d);
  for (const DomainDataset& d : b.targets) domains.push_back(&d);
  if (domains.size() >= 2) {
    const double sep = min_style_separation(domains);
    if (sep < spec.separation_margin) {
      throw InvalidArgument("build_benchmark: domains are not separated (min channel-mean gap " + std::to_string(sep) + ")");
    }
  }
  return b;
}

Rgb channel_means(const DomainDataset& ds) {
  const std::size_t hw = ds.manifest.height * ds.manifest.width;
  Rgb means{};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const float* p = ds.images.data() + (i * 3 + c) * hw;
      for (std::size_t k = 0; k < hw; ++k) means[c] += p[k];
    }
  }
  const double denom = static_cast<double>(ds.size() * hw);
  for (double& m : means) m /= denom;
  return means;
}

double min_style_separation(const std::vector<const DomainDataset*>& datasets) {
  std::vector<Rgb> means;
  for (const DomainDataset* d : datasets) means.push_back(channel_means(*d));
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < means.size(); ++i) {
    for (std::size_t j = i + 1; j < means.size(); ++j) {
      double gap = 0.0;
      for (std::size_t c = 0; c < 3; ++c) gap = std::max(gap, std::abs(means[i][c] - means[j][c]));
      best = std::min(best, gap);
    }
  }
  return best;
}

namespace {

constexpr std::string_view kMagic = "drsf-dataset";

std::string join3(const Rgb& v) {
  return format_exact(v[0]) + "," + format_exact(v[1]) + "," + format_exact(v[2]);
}

double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError("dataset manifest: bad number '" + std::string(s) + "'");
  return v;
}

std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError("dataset manifest: bad integer '" + std::string(s) + "'");
  return v;
}

Rgb parse_rgb(std::string_view s) {
  Rgb out{};
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t comma = s.find(',');
    if ((c < 2) != (comma != std::string_view::npos)) throw DataError("dataset manifest: expected three components");
    out[c] = parse_double(s.substr(0, comma));
    if (c < 2) s.remove_prefix(comma + 1);
  }
  return out;
}

std::string transform_line(const StyleTransform& t) {
  return "name=" + t.name + " brightness=" + format_exact(t.brightness) + " gains=" + join3(t.gains) +
         " contrast=" + format_exact(t.contrast) + " fog_alpha=" + format_exact(t.fog_alpha) +
         " fog_color=" + join3(t.fog_color) + " noise_sigma=" + format_exact(t.noise_sigma) +
         " seed=" + std::to_string(t.seed);
}

StyleTransform parse_transform(const std::string& line) {
  std::istringstream in(line);
  std::map<std::string, std::string> kv;
  std::string token;
  while (in >> token) {
    const std::size_t eq = token.find('=');
    if (eq == std::string::npos) throw DataError("dataset manifest: malformed transform field '" + token + "'");
    kv[token.substr(0, eq)] = token.substr(eq + 1);
  }
  auto field = [&](const char* key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw DataError(std::string("dataset manifest: transform lacks ") + key);
    return it->second;
  };
  StyleTransform t;
  t.name = field("name");
  t.brightness = parse_double(field("brightness"));
  t.gains = parse_rgb(field("gains"));
  t.contrast = parse_double(field("contrast"));
  t.fog_alpha = parse_double(field("fog_alpha"));
  t.fog_color = parse_rgb(field("fog_color"));
  t.noise_sigma = parse_double(field("noise_sigma"));
  t.seed = parse_u64(field("seed"));
  return t;
}

}  // namespace

std::string serialize_dataset(const DomainDataset& ds) {
  const DatasetManifest& m = ds.manifest;
  const std::size_t hw = m.height * m.width;
  if (ds.images.size() != m.count * 3 * hw || ds.pixel_labels.size() != m.count * hw || ds.image_labels.size() != m.count) {
    throw ShapeError("serialize_dataset: blocks do not match manifest dimensions");
  }
  if (!is_token(m.domain_name) || !is_token(m.split)) throw InvalidArgument("serialize_dataset: names must be tokens");
  std::string out;
  out += std::string(kMagic) + " " + std::to_string(m.format_version) + "\n";
  out += "domain " + m.domain_name + "\n";
  out += "split " + m.split + "\n";
  out += "master_seed " + std::to_string(m.master_seed) + "\n";
  out += "scene_seed " + std::to_string(m.scene_seed) + "\n";
  out += "count " + std::to_string(m.count) + "\n";
  out += "height " + std::to_string(m.height) + "\n";
  out += "width " + std::to_string(m.width) + "\n";
  out += "class_count " + std::to_string(m.class_count) + "\n";
  out += "transform " + (m.transform ? transform_line(*m.transform) : std::string("none")) + "\n";
  out += "content_hash " + ds.compute_hash() + "\n";
  out += "data\n";
  out.reserve(out.size() + ds.images.size() * 4 + (ds.pixel_labels.size() + ds.image_labels.size()) * 2);
  for (float v : ds.images) put_f32_le(out, v);
  for (std::uint16_t v : ds.pixel_labels) put_u16_le(out, v);
  for (std::uint16_t v : ds.image_labels) put_u16_le(out, v);
  return out;
}

DomainDataset deserialize_dataset(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw DataError("dataset file is truncated inside the manifest");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  const std::string first = next_line();
  if (first.rfind(std::string(kMagic) + " ", 0) != 0) throw DataError("not a dataset file (bad magic)");
  const std::uint64_t version = parse_u64(std::string_view(first).substr(kMagic.size() + 1));
  if (version != kDatasetFormatVersion) {
    throw DataError("unsupported dataset format version " + std::to_string(version) + " (expected " +
                    std::to_string(kDatasetFormatVersion) + ")");
  }
  std::map<std::string, std::string> kv;
  for (std::string line = next_line(); line != "data"; line = next_line()) {
    const std::size_t sp = line.find(' ');
    if (sp == std::string::npos) throw DataError("dataset manifest: malformed line '" + line + "'");
    kv[line.substr(0, sp)] = line.substr(sp + 1);
  }
  auto field = [&](const char* key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw DataError(std::string("dataset manifest: missing ") + key);
    return it->second;
  };

  DomainDataset ds;
  DatasetManifest& m = ds.manifest;
  m.format_version = static_cast<std::uint32_t>(version);
  m.domain_name = field("domain");
  m.split = field("split");
  m.master_seed = parse_u64(field("master_seed"));
  m.scene_seed = parse_u64(field("scene_seed"));
  m.count = parse_u64(field("count"));
  m.height = parse_u64(field("height"));
  m.width = parse_u64(field("width"));
  m.class_count = parse_u64(field("class_count"));
  if (field("transform") != "none") m.transform = parse_transform(field("transform"));
  const std::string declared_hash = field("content_hash");

  const std::size_t hw = m.height * m.width;
  const std::size_t n_img = m.count * 3 * hw, n_lab = m.count * hw;
  const std::size_t expected = n_img * 4 + (n_lab + m.count) * 2;
  const std::size_t available = bytes.size() - pos;
  if (available < expected) {
    throw DataError("dataset file is truncated: " + std::to_string(available) + " of " + std::to_string(expected) +
                    " data bytes present");
  }
  if (available > expected) throw DataError("dataset file has " + std::to_string(available - expected) + " trailing bytes");

  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
  ds.images.resize(n_img);
  for (std::size_t i = 0; i < n_img; ++i, p += 4) ds.images[i] = get_f32_le(p);
  ds.pixel_labels.resize(n_lab);
  for (std::size_t i = 0; i < n_lab; ++i, p += 2) ds.pixel_labels[i] = get_u16_le(p);
  ds.image_labels.resize(m.count);
  for (std::size_t i = 0; i < m.count; ++i, p += 2) ds.image_labels[i] = get_u16_le(p);

  m.content_hash = ds.compute_hash();
  if (m.content_hash != declared_hash) {
    throw DataError("dataset file is corrupt: content hash " + m.content_hash + " does not match manifest " + declared_hash);
  }
  return ds;
}

void save_dataset(const DomainDataset& ds, const std::string& path) { write_file(path, serialize_dataset(ds)); }

DomainDataset load_dataset(const std::string& path) { return deserialize_dataset(read_file(path)); }

void save_benchmark(const Benchmark& bench, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::string index = "drsf-benchmark 1\n";
  auto put = [&](const std::string& role, const DomainDataset& ds, std::size_t i) {
    const std::string file = role + "-" + std::to_string(i) + "-" + ds.manifest.domain_name + ".drsfd";
    save_dataset(ds, (std::filesystem::path(dir) / file).string());
    index += role + " " + file + " " + ds.manifest.content_hash + "\n";
  };
  put("source_train", bench.source_train, 0);
  put("source_test", bench.source_test, 0);
  for (std::size_t i = 0; i < bench.pseudo.size(); ++i) put("pseudo", bench.pseudo[i], i);
  for (std::size_t i = 0; i < bench.targets.size(); ++i) put("target", bench.targets[i], i);
  write_file((std::filesystem::path(dir) / "benchmark.index").string(), index);
}

Benchmark load_benchmark(const std::string& dir) {
  std::istringstream in(read_file((std::filesystem::path(dir) / "benchmark.index").string()));
  std::string line;
  if (!std::getline(in, line) || line != "drsf-benchmark 1") throw DataError("benchmark.index: unsupported header");
  Benchmark b;
  bool have_train = false, have_test = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string role, file, hash;
    if (!(fields >> role >> file >> hash)) throw DataError("benchmark.index: malformed line '" + line + "'");
    DomainDataset ds = load_dataset((std::filesystem::path(dir) / file).string());
    if (ds.manifest.content_hash != hash) throw DataError("benchmark.index: hash mismatch for " + file);
    if (role == "source_train") {
      b.source_train = std::move(ds);
      have_train = true;
    } else if (role == "source_test") {
      b.source_test = std::move(ds);
      have_test = true;
    } else if (role == "pseudo") {
      b.pseudo.push_back(std::move(ds));
    } else if (role == "target") {
      b.targets.push_back(std::move(ds));
    } else {
      throw DataError("benchmark.index: unknown role '" + role + "'");
    }
  }
  if (!have_train || !have_test) throw DataError("benchmark.index: source datasets missing");
  return b;
}

}  // namespace drsf::synth
