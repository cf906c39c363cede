#pragma once

// Tagged binary container shared by model checkpoints ("DOSE3CKP") and
// density models ("DOSE3GMM"). All integers and floats are little-endian.
//
//   magic        8 bytes
//   version      u16
//   entry count  u32
//   per entry    u16 name length, name bytes, u8 dtype, u8 rank,
//                u32 dims[rank], u64 payload offset, u64 byte length
//   payload size u64
//   payload      raw entry bytes
//   crc32        u32 over the payload

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <initializer_list>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dose3/error.hpp"

namespace dose3::io {

inline constexpr std::uint16_t kContainerVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1, I64 = 2, U8 = 3 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::I64: return 8;
    case DType::U8: return 1;
  }
  return 0;
}

struct Entry {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint32_t> shape;
  std::vector<std::uint8_t> bytes;
};

namespace le {

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <class T>
T get(const std::uint8_t* p) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  T v;
  std::memcpy(&v, raw, sizeof(T));
  return v;
}

}  // namespace le

template <class T>
Entry make_entry(std::string name, DType dtype, std::vector<std::uint32_t> shape, std::span<const T> values) {
  Entry e{std::move(name), dtype, std::move(shape), {}};
  e.bytes.reserve(values.size() * sizeof(T));
  for (const T& v : values) le::put(e.bytes, v);
  return e;
}

inline Entry f32_entry(std::string name, std::vector<std::uint32_t> shape, std::span<const float> v) {
  return make_entry(std::move(name), DType::F32, std::move(shape), v);
}
inline Entry f64_entry(std::string name, std::vector<std::uint32_t> shape, std::span<const double> v) {
  return make_entry(std::move(name), DType::F64, std::move(shape), v);
}
inline Entry i64_entry(std::string name, std::span<const std::int64_t> v) {
  return make_entry(std::move(name), DType::I64, {static_cast<std::uint32_t>(v.size())}, v);
}
inline Entry i64_entry(std::string name, std::initializer_list<std::int64_t> v) {
  return i64_entry(std::move(name), std::span<const std::int64_t>(v.begin(), v.size()));
}
inline Entry f64_entry(std::string name, std::vector<std::uint32_t> shape, std::initializer_list<double> v) {
  return f64_entry(std::move(name), std::move(shape), std::span<const double>(v.begin(), v.size()));
}
inline Entry string_entry(std::string name, const std::string& s) {
  Entry e{std::move(name), DType::U8, {static_cast<std::uint32_t>(s.size())}, {}};
  e.bytes.assign(s.begin(), s.end());
  return e;
}

template <class T>
std::vector<T> entry_values(const Entry& e, DType expected) {
  if (e.dtype != expected) throw Error(ErrorKind::ArchMismatch, "entry '" + e.name + "' has unexpected dtype");
  const std::size_t n = e.bytes.size() / sizeof(T);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = le::get<T>(e.bytes.data() + i * sizeof(T));
  return out;
}

inline std::string entry_string(const Entry& e) { return std::string(e.bytes.begin(), e.bytes.end()); }

inline std::uint32_t crc32_of(const std::vector<std::uint8_t>& data, std::size_t offset, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  const std::uint8_t* p = data.data() + offset;
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<std::uint8_t> encode_container(const std::string& magic, const std::vector<Entry>& entries) {
  if (magic.size() != 8) throw Error(ErrorKind::ConfigError, "container magic must be 8 bytes");
  std::vector<std::uint8_t> out(magic.begin(), magic.end());
  le::put<std::uint16_t>(out, kContainerVersion);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    std::size_t expect = dtype_size(e.dtype);
    for (auto d : e.shape) expect *= d;
    if (expect != e.bytes.size()) throw Error(ErrorKind::ShapeError, "entry '" + e.name + "' size does not match shape");
    le::put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    le::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    le::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) le::put<std::uint32_t>(out, d);
    le::put<std::uint64_t>(out, offset);
    le::put<std::uint64_t>(out, e.bytes.size());
    offset += e.bytes.size();
  }
  le::put<std::uint64_t>(out, offset);
  const std::size_t payload_start = out.size();
  for (const auto& e : entries) out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  le::put<std::uint32_t>(out, crc32_of(out, payload_start, out.size() - payload_start));
  return out;
}

inline std::vector<Entry> decode_container(const std::vector<std::uint8_t>& data, const std::string& magic) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > data.size()) throw Error(ErrorKind::ChecksumError, "container truncated");
  };
  if (data.size() < 8 || std::memcmp(data.data(), magic.data(), 8) != 0) {
    throw Error(ErrorKind::BadMagic, "expected magic " + magic);
  }
  pos = 8;
  need(2);
  const auto version = le::get<std::uint16_t>(data.data() + pos);
  pos += 2;
  if (version != kContainerVersion) {
    throw Error(ErrorKind::VersionMismatch, "container version " + std::to_string(version) + ", expected " +
                                               std::to_string(kContainerVersion));
  }
  need(4);
  const auto count = le::get<std::uint32_t>(data.data() + pos);
  pos += 4;
  struct Pending {
    Entry entry;
    std::uint64_t offset, length;
  };
  std::vector<Pending> pending;
  for (std::uint32_t i = 0; i < count; ++i) {
    Pending p;
    need(2);
    const auto nlen = le::get<std::uint16_t>(data.data() + pos);
    pos += 2;
    need(nlen + 2);
    p.entry.name.assign(reinterpret_cast<const char*>(data.data() + pos), nlen);
    pos += nlen;
    p.entry.dtype = static_cast<DType>(data[pos++]);
    const std::uint8_t rank = data[pos++];
    need(4u * rank + 16);
    for (std::uint8_t r = 0; r < rank; ++r, pos += 4) p.entry.shape.push_back(le::get<std::uint32_t>(data.data() + pos));
    p.offset = le::get<std::uint64_t>(data.data() + pos);
    p.length = le::get<std::uint64_t>(data.data() + pos + 8);
    pos += 16;
    pending.push_back(std::move(p));
  }
  need(8);
  const auto payload_size = le::get<std::uint64_t>(data.data() + pos);
  pos += 8;
  if (payload_size > data.size() - pos || data.size() - pos - payload_size < 4) {
    throw Error(ErrorKind::ChecksumError, "container truncated");
  }
  const std::size_t payload_start = pos;
  const auto stored = le::get<std::uint32_t>(data.data() + payload_start + payload_size);
  if (stored != crc32_of(data, payload_start, payload_size)) throw Error(ErrorKind::ChecksumError, "payload CRC mismatch");
  std::vector<Entry> out;
  for (auto& p : pending) {
    if (p.offset + p.length > payload_size) throw Error(ErrorKind::ChecksumError, "entry outside payload");
    std::size_t expect = dtype_size(p.entry.dtype);
    for (auto d : p.entry.shape) expect *= d;
    if (expect != p.length) throw Error(ErrorKind::ChecksumError, "entry '" + p.entry.name + "' has inconsistent size");
    const auto* b = data.data() + payload_start + p.offset;
    p.entry.bytes.assign(b, b + p.length);
    out.push_back(std::move(p.entry));
  }
  return out;
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(ErrorKind::IoError, "write failed: " + path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_container(const std::string& path, const std::string& magic, const std::vector<Entry>& entries) {
  write_file_bytes(path, encode_container(magic, entries));
}

inline std::map<std::string, Entry> read_container(const std::string& path, const std::string& magic) {
  std::map<std::string, Entry> out;
  for (auto& e : decode_container(read_file_bytes(path), magic)) out.emplace(e.name, std::move(e));
  return out;
}

}  // namespace dose3::io
