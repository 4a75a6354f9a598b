#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <system_error>
#include <vector>

#include <zlib.h>

#include "dvat/error.hpp"
#include "dvat/network.hpp"
#include "dvat/tensor.hpp"

// Binary container shared by checkpoints and adversarial-example batches.
//
//   "DVAT"                     4 bytes
//   version                    u32 (= 1)
//   text block                 u32 length + UTF-8 bytes
//   tensor count               u32
//   per tensor                 u32 name length + UTF-8 name, u8 rank, u32 x rank extents,
//                              raw float32 values
//   CRC32 of all bytes above   u32
//
// All integers and floats are little-endian.
namespace dvat {

// Shortest decimal form that parses back to the same double.
inline std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw InternalError("format_real failed");
  return std::string(buf, end);
}

inline double parse_real(std::string_view s) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw FormatError(FormatError::Kind::kMalformed, "bad real '" + std::string(s) + "'");
  return v;
}

inline constexpr char kContainerMagic[4] = {'D', 'V', 'A', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
  std::string text;
  std::vector<NamedTensor<float>> tensors;

  friend bool operator==(const Container&, const Container&) = default;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks so large buffers are safe.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8(const char* what) {
    need(1, what);
    return data_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw FormatError(FormatError::Kind::kTruncated,
                        std::string("truncated container while reading ") + what + " at byte " +
                            std::to_string(pos_));
    }
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_container(const Container& c) {
  detail::ByteWriter w;
  w.bytes(std::string_view(kContainerMagic, 4));
  w.u32(kContainerVersion);
  w.str(c.text);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.value.rank() > 255) throw ConfigError("tensor '" + t.name + "' has rank above 255");
    w.str(t.name);
    w.u8(static_cast<std::uint8_t>(t.value.rank()));
    for (std::size_t e : t.value.shape) w.u32(static_cast<std::uint32_t>(e));
    for (float v : t.value.data) w.f32(v);
  }
  auto& buf = w.buffer();
  const std::uint32_t crc = crc32_of(buf);
  w.u32(crc);
  return std::move(buf);
}

inline Container decode_container(std::span<const std::uint8_t> bytes) {
  using K = FormatError::Kind;
  if (bytes.size() < 4) throw FormatError(K::kTruncated, "truncated container: no magic");
  if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0) throw FormatError(K::kBadMagic, "bad magic");
  detail::ByteReader r(bytes.subspan(4));
  const std::uint32_t version = r.u32("version");
  if (version != kContainerVersion) {
    throw FormatError(K::kVersionMismatch, "version mismatch: file has " + std::to_string(version) +
                                               ", reader supports " + std::to_string(kContainerVersion));
  }
  Container c;
  c.text = r.str("text block");
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor<float> t;
    t.name = r.str("tensor name");
    const std::uint8_t rank = r.u8("tensor rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.u32("tensor extent");
    const std::size_t n = numel(shape);
    if (n > r.remaining() / 4) {
      throw FormatError(K::kTruncated, "truncated container inside tensor '" + t.name + "'");
    }
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32("tensor values");
    t.value = Tensor<float>(std::move(shape), std::move(values));
    c.tensors.push_back(std::move(t));
  }
  const std::size_t body = 4 + r.pos();
  const std::uint32_t stored = r.u32("crc");
  if (r.remaining() != 0) throw FormatError(K::kMalformed, "trailing bytes after container crc");
  if (crc32_of(bytes.first(body)) != stored) throw FormatError(K::kCrcMismatch, "crc mismatch");
  return c;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatError::Kind::kIo, "write failed for " + path.string());
}

inline void save_container(const Container& c, const std::filesystem::path& path) {
  write_file_bytes(path, encode_container(c));
}

inline Container load_container(const std::filesystem::path& path) {
  return decode_container(read_file_bytes(path));
}

}  // namespace dvat
