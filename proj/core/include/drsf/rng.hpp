// Seeded random streams.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. All derived distributions are implemented here (not with the
// implementation-defined <random> distributions) so that a seed reproduces the
// same draws on every standard library:
//   uniform  : top 53 bits of one engine output, scaled to [0,1)
//   normal   : Marsaglia polar method, spare value cached
//   gamma    : Marsaglia-Tsang squeeze; shape < 1 boosted via U^(1/shape)
//   beta     : X/(X+Y) with X,Y ~ Gamma(a), Gamma(b)
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string_view>

namespace drsf {

/// SplitMix64 finalizer over the pair; used to derive child seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;
/// FNV-1a of a tag string, for naming derived streams.
std::uint64_t tag_hash(std::string_view tag) noexcept;

class RngStream {
 public:
  static constexpr std::string_view algorithm = "mt19937_64";

  explicit RngStream(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }
  /// Number of raw 64-bit engine outputs consumed so far.
  std::uint64_t draws() const noexcept { return draws_; }

  std::uint64_t next_u64();
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n), unbiased.
  std::uint64_t below(std::uint64_t n);
  double normal();
  double gamma(double shape);
  double beta(double a, double b);

  /// Independent stream seeded by mix_seed(seed(), tag).
  RngStream derive(std::uint64_t tag) const { return RngStream(mix_seed(seed_, tag)); }

 private:
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
  std::mt19937_64 engine_;
  std::optional<double> spare_normal_;
};

}  // namespace drsf
