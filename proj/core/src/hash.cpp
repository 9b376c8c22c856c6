#include "drsf/hash.hpp"

#include <openssl/evp.h>

#include <bit>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "drsf/tensor.hpp"

namespace drsf {

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  if (!ctx_ || EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_));
    throw Error("sha256: digest initialisation failed");
  }
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(std::span<const unsigned char> bytes) {
  if (finished_) throw Error("sha256: update after digest");
  if (EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), bytes.data(), bytes.size()) != 1) {
    throw Error("sha256: update failed");
  }
}

void Sha256::update(std::string_view text) {
  update(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::string Sha256::hex_digest() {
  if (finished_) throw Error("sha256: digest already taken");
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md, &len) != 1) throw Error("sha256: final failed");
  finished_ = true;
  static constexpr char digits[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(digits[md[i] >> 4]);
    hex.push_back(digits[md[i] & 0xF]);
  }
  return hex;
}

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex_digest();
}

namespace {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void put_u16_le(std::string& out, std::uint16_t v) { put_le(out, v); }
void put_u32_le(std::string& out, std::uint32_t v) { put_le(out, v); }
void put_u64_le(std::string& out, std::uint64_t v) { put_le(out, v); }
void put_f32_le(std::string& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }
void put_f64_le(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

std::uint16_t get_u16_le(const unsigned char* p) { return get_le<std::uint16_t>(p); }
std::uint32_t get_u32_le(const unsigned char* p) { return get_le<std::uint32_t>(p); }
std::uint64_t get_u64_le(const unsigned char* p) { return get_le<std::uint64_t>(p); }
float get_f32_le(const unsigned char* p) { return std::bit_cast<float>(get_le<std::uint32_t>(p)); }
double get_f64_le(const unsigned char* p) { return std::bit_cast<double>(get_le<std::uint64_t>(p)); }

std::string format_exact(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw DataError("read failed: " + path);
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

}  // namespace drsf
