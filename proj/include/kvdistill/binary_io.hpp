#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

namespace kvdistill::binary {

// Little-endian byte sink. Values are encoded byte by byte so the output does
// not depend on host endianness.
class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v), 4); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }

  const std::vector<unsigned char>& buffer() const { return buf_; }
  // Writes to a temporary sibling, then renames over `path`. Throws IoError.
  void write_file(const std::filesystem::path& path) const;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  std::vector<unsigned char> buf_;
};

// Little-endian byte source over an in-memory file image. Reading past the
// end throws IoError("truncated ...").
class Reader {
 public:
  explicit Reader(std::vector<unsigned char> data, std::string what)
      : data_(std::move(data)), what_(std::move(what)) {}
  static Reader from_file(const std::filesystem::path& path, std::string what);

  void bytes(void* out, std::size_t n);
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(get(4))); }
  double f64() { return std::bit_cast<double>(get(8)); }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t size() const { return data_.size(); }

 private:
  std::uint64_t get(int n);
  void need(std::size_t n) const;

  std::vector<unsigned char> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace kvdistill::binary
