// SPDX-License-Identifier: Apache-2.0
// Little-endian primitives for the binary artifacts.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "cllm4rec/errors.hpp"

namespace cllm4rec {

/// Writes `content` to `path` via a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

class ByteWriter {
 public:
  template <typename U>
  void put(U value) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void put_bytes(std::string_view s) { bytes_.append(s.data(), s.size()); }

  const std::string& bytes() const noexcept { return bytes_; }
  void save(const std::filesystem::path& path) const { write_file_atomic(path, bytes_); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes, std::string source = {})
      : bytes_(std::move(bytes)), source_(std::move(source)) {}
  static ByteReader open(const std::filesystem::path& path) { return ByteReader(read_file(path), path.string()); }

  template <typename U>
  U get() {
    static_assert(std::is_unsigned_v<U>);
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) {
      throw FormatError((source_.empty() ? std::string("input") : source_) + ": truncated at byte " +
                        std::to_string(pos_));
    }
  }

 private:
  std::string bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace cllm4rec
