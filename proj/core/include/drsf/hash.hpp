// Content hashing and little-endian binary encoding for persisted artifacts.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace drsf {

/// Incremental SHA-256; digest is lowercase hex.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const unsigned char> bytes);
  void update(std::string_view text);
  std::string hex_digest();

 private:
  void* ctx_;
  bool finished_ = false;
};

std::string sha256_hex(std::string_view bytes);

/// Fixed little-endian encoders, independent of host byte order.
void put_u16_le(std::string& out, std::uint16_t v);
void put_u32_le(std::string& out, std::uint32_t v);
void put_u64_le(std::string& out, std::uint64_t v);
void put_f32_le(std::string& out, float v);
void put_f64_le(std::string& out, double v);

std::uint16_t get_u16_le(const unsigned char* p);
std::uint32_t get_u32_le(const unsigned char* p);
std::uint64_t get_u64_le(const unsigned char* p);
float get_f32_le(const unsigned char* p);
double get_f64_le(const unsigned char* p);

/// Shortest decimal text that parses back to exactly `v`.
std::string format_exact(double v);

std::string read_file(const std::string& path);
/// Writes via a temporary file and rename.
void write_file(const std::string& path, std::string_view bytes);

}  // namespace drsf
