// Procedural labeled scenes and label-preserving style transforms.
//
// Scenes are flat-shaded shapes on a textured background with exact per-pixel
// class ids (0 = background, 1 = circle, 2 = square, 3 = triangle). A style
// transform only touches pixel values, so restyled copies of a scene carry the
// source label map unchanged.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "drsf/rng.hpp"

namespace drsf::synth {

enum class ShapeKind : std::uint16_t { circle = 1, square = 2, triangle = 3 };

using Rgb = std::array<double, 3>;

struct SceneSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<ShapeKind> shape_inventory{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  std::size_t min_extent = 8;
  std::size_t max_extent = 16;
  std::size_t class_count = 4;
  /// Base colour per class id; index 0 is the background.
  std::vector<Rgb> palette{{0.45, 0.45, 0.45}, {0.80, 0.30, 0.25}, {0.30, 0.70, 0.35}, {0.30, 0.35, 0.80}};
  /// Uniform per-shape colour perturbation half-width.
  double color_jitter = 0.12;
  /// Per-pixel Gaussian texture on the background.
  double background_texture = 0.04;

  /// Throws InvalidArgument on an unusable spec.
  void validate() const;
};

/// Axis-aligned bounding box [x0, x0 + extent) x [y0, y0 + extent).
struct ShapeInstance {
  ShapeKind kind = ShapeKind::square;
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  std::size_t extent = 1;
  Rgb color{};
};

/// Planar 3 x H x W image in [0,1] plus an H x W class map.
struct Scene {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> image;
  std::vector<std::uint16_t> labels;
};

/// Rasterizes shapes in order (later wins) onto a flat background. Pixel
/// (x, y) belongs to a shape when its centre (x + 0.5, y + 0.5) is inside it.
Scene rasterize(const SceneSpec& spec, const std::vector<ShapeInstance>& shapes, const Rgb& background);

/// Random scene: shape count uniform in [min_shapes, max_shapes].
Scene generate_scene(const SceneSpec& spec, RngStream& rng);

struct StyleTransform {
  std::string name = "identity";
  double brightness = 0.0;
  Rgb gains{1.0, 1.0, 1.0};
  double contrast = 1.0;
  double fog_alpha = 0.0;
  Rgb fog_color{0.0, 0.0, 0.0};
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// clamp(contrast * (gains * x + brightness) * (1 - fog) + fog * fog_color + noise, 0, 1).
/// Noise is drawn from `rng` only when noise_sigma > 0.
std::vector<double> apply_style(const std::vector<double>& image, std::size_t height, std::size_t width,
                                const StyleTransform& transform, RngStream& rng);

/// Max-abs distance between the parameter vectors
/// (brightness, gains, contrast, fog_alpha, fog_alpha * fog_color, noise_sigma).
double style_distance(const StyleTransform& a, const StyleTransform& b);

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

struct DatasetManifest {
  std::uint32_t format_version = kDatasetFormatVersion;
  std::string domain_name;
  std::string split;  // "train" or "test"
  std::uint64_t master_seed = 0;
  std::uint64_t scene_seed = 0;
  std::optional<StyleTransform> transform;
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t class_count = 0;
  std::string content_hash;
};

struct DomainDataset {
  DatasetManifest manifest;
  std::vector<float> images;                // count x 3 x H x W
  std::vector<std::uint16_t> pixel_labels;  // count x H x W
  std::vector<std::uint16_t> image_labels;  // dominant foreground class, 0 if none

  std::size_t size() const noexcept { return manifest.count; }
  /// SHA-256 over dimensions and the three data blocks.
  std::string compute_hash() const;
};

/// Most frequent non-background class; ties go to the lowest id; 0 when no foreground.
std::uint16_t dominant_class(const std::vector<std::uint16_t>& labels, std::size_t class_count);

struct BenchmarkSpec {
  SceneSpec scene;
  StyleTransform source_transform;
  std::vector<StyleTransform> pseudo_transforms;
  std::vector<StyleTransform> target_transforms;
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  std::uint64_t master_seed = 42;
  /// Minimum style_distance between any pseudo and any target transform.
  double disjoint_margin = 0.05;
  /// Minimum per-channel mean difference between any two domains' image statistics.
  double separation_margin = 0.01;
};

/// Night / fog / dusk pseudo domains and two held-out targets.
BenchmarkSpec default_benchmark_spec();

struct Benchmark {
  DomainDataset source_train;
  DomainDataset source_test;
  std::vector<DomainDataset> pseudo;   // restyled copies of source_train scenes
  std::vector<DomainDataset> targets;  // fresh scenes, held-out styles
};

/// Throws InvalidArgument if a target transform lies within the margin of a pseudo transform.
Benchmark build_benchmark(const BenchmarkSpec& spec);

/// Per-channel image means of a dataset.
Rgb channel_means(const DomainDataset& ds);

/// Smallest max-channel mean gap between any two of the given datasets.
double min_style_separation(const std::vector<const DomainDataset*>& datasets);

/// Text manifest terminated by a "data" line, then LE f32 images, LE u16 pixel labels, LE u16 image labels.
std::string serialize_dataset(const DomainDataset& ds);
DomainDataset deserialize_dataset(const std::string& bytes);

void save_dataset(const DomainDataset& ds, const std::string& path);
/// Throws DataError on truncation, hash mismatch or unsupported version.
DomainDataset load_dataset(const std::string& path);

/// One dataset file per domain/split plus a "benchmark.index" listing them.
void save_benchmark(const Benchmark& bench, const std::string& dir);
Benchmark load_benchmark(const std::string& dir);

}  // namespace drsf::synth
