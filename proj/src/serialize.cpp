// SPDX-License-Identifier: Apache-2.0
#include "covt/serialize.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "covt/error.hpp"

namespace covt {

namespace {

constexpr std::string_view kTensorMagic = "CVT1";
// Guards against absurd allocations when decoding garbage.
constexpr std::uint64_t kMaxRank = 16;

}  // namespace

void ByteWriter::put_u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
}

void ByteWriter::put_u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
}

void ByteWriter::put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::put_bytes(std::string_view bytes) {
  for (char c : bytes) buf_.push_back(static_cast<std::byte>(c));
}

void ByteWriter::put_string(std::string_view s) {
  put_u64(s.size());
  put_bytes(s);
}

void ByteReader::need(std::size_t n, std::string_view what) {
  if (bytes_.size() - pos_ < n) {
    throw FormatError("truncated input while reading " + std::string(what) + ": need " + std::to_string(n) +
                          " bytes, " + std::to_string(bytes_.size() - pos_) + " left",
                      pos_);
  }
}

std::uint32_t ByteReader::get_u32() {
  need(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::to_integer<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::get_u64() {
  need(8, "u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::to_integer<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

double ByteReader::get_f64() { return std::bit_cast<double>(get_u64()); }

std::string ByteReader::get_bytes(std::size_t n) {
  need(n, "byte string");
  std::string s(n, '\0');
  for (std::size_t i = 0; i < n; ++i) s[i] = static_cast<char>(bytes_[pos_ + i]);
  pos_ += n;
  return s;
}

std::string ByteReader::get_string() {
  const auto start = pos_;
  const auto n = get_u64();
  if (n > bytes_.size() - pos_) {
    throw FormatError("string length " + std::to_string(n) + " exceeds remaining input", start);
  }
  return get_bytes(n);
}

void encode_tensor(ByteWriter& out, const Tensor& t) {
  out.put_bytes(kTensorMagic);
  out.put_u64(t.rank());
  for (auto d : t.shape()) out.put_u64(d);
  for (double v : t.data()) out.put_f64(v);
}

Tensor decode_tensor(ByteReader& in) {
  const auto start = in.offset();
  if (in.get_bytes(kTensorMagic.size()) != kTensorMagic) throw FormatError("bad tensor magic", start);
  const auto rank_at = in.offset();
  const auto rank = in.get_u64();
  if (rank > kMaxRank) throw FormatError("implausible tensor rank " + std::to_string(rank), rank_at);
  Shape shape(rank);
  for (auto& d : shape) {
    const auto at = in.offset();
    d = in.get_u64();
    if (d == 0) throw FormatError("zero tensor dimension", at);
  }
  const auto payload_at = in.offset();
  std::size_t n = 1;
  for (auto d : shape) {
    if (d > (std::uint64_t{1} << 40) / n) throw FormatError("tensor too large", payload_at);
    n *= d;
  }
  std::vector<double> data(n);
  for (auto& v : data) v = in.get_f64();
  return Tensor(std::move(shape), std::move(data));
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for reading");
  std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<std::byte>(raw[i]);
  return out;
}

void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace covt
