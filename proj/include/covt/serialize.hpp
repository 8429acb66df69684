// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "covt/tensor.hpp"

namespace covt {

/// Little-endian byte sink.
class ByteWriter {
 public:
  void put_u32(std::uint32_t v);
  void put_u64(std::uint64_t v);
  void put_f64(double v);
  void put_bytes(std::string_view bytes);
  /// u64 length prefix followed by the bytes.
  void put_string(std::string_view s);

  const std::vector<std::byte>& bytes() const { return buf_; }
  std::vector<std::byte> take() { return std::move(buf_); }

 private:
  std::vector<std::byte> buf_;
};

/// Little-endian byte source; every failure reports the offset it stopped at.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  std::uint32_t get_u32();
  std::uint64_t get_u64();
  double get_f64();
  std::string get_bytes(std::size_t n);
  std::string get_string();

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, std::string_view what);

  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

/// Tensor blob: "CVT1", u64 rank, u64 dims, float64 payload.
void encode_tensor(ByteWriter& out, const Tensor& t);
Tensor decode_tensor(ByteReader& in);

std::vector<std::byte> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace covt
