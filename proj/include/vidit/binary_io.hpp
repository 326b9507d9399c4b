#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "vidit/error.hpp"

namespace vidit::io {

// Little-endian byte writer/reader. The host is assumed little-endian (checked
// at compile time in binary_io.cpp).
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) { raw(&v, sizeof v); }
  void u32(uint32_t v) { raw(&v, sizeof v); }
  void u64(uint64_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void bytes(const void* p, size_t n) { raw(p, n); }
  void str(const std::string& s) { raw(s.data(), s.size()); }

  const std::vector<unsigned char>& buffer() const { return buf_; }
  std::vector<unsigned char>& buffer() { return buf_; }

 private:
  void raw(const void* p, size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& data) : data_(data) {}

  uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
  uint16_t u16() { uint16_t v; raw(&v, sizeof v); return v; }
  uint32_t u32() { uint32_t v; raw(&v, sizeof v); return v; }
  uint64_t u64() { uint64_t v; raw(&v, sizeof v); return v; }
  float f32() { float v; raw(&v, sizeof v); return v; }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void bytes(void* out, size_t n) { raw(out, n); }

  size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(size_t n) const {
    if (pos_ + n > data_.size()) throw IoError("unexpected end of data");
  }
  void raw(void* out, size_t n) {
    need(n);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  const std::vector<unsigned char>& data_;
  size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& data);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace vidit::io
