#pragma once

// Binary checkpoint container.
//
//   "TERRACKP"  u32 version
//   u32 n_meta   { u32 len, key bytes, u32 len, value bytes }*
//   u32 n_blocks { u32 len, name bytes, u8 dtype (1=f32, 2=f64), u32 ndim, u64 dims[ndim], payload }*
//   "TERRAEND"
//
// All integers and floats are little-endian; floats are IEEE-754.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <type_traits>
#include <vector>

#include "terra/error.hpp"

namespace terra {

inline constexpr char kContainerMagic[8] = {'T', 'E', 'R', 'R', 'A', 'C', 'K', 'P'};
inline constexpr char kContainerEnd[8] = {'T', 'E', 'R', 'R', 'A', 'E', 'N', 'D'};
inline constexpr std::uint32_t kContainerVersion = 1;

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what) {}
};

struct Block {
  std::string name;
  std::uint8_t dtype = 2;  // 1 = f32, 2 = f64
  std::vector<std::uint64_t> shape;
  std::vector<double> values;  // widened copy of the payload

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }
};

struct Container {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<Block> blocks;

  const std::string* find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return &v;
    return nullptr;
  }
  const std::string& meta_at(const std::string& key) const {
    if (const auto* v = find_meta(key)) return *v;
    throw FormatError("checkpoint is missing metadata key '" + key + "'");
  }
  const Block* find_block(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return &b;
    return nullptr;
  }
  const Block& block_at(const std::string& name) const {
    if (const auto* b = find_block(name)) return *b;
    throw FormatError("checkpoint is missing block '" + name + "'");
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
void put(std::string& out, U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    out.append(bytes.data(), sizeof(U));
  } else {
    char bytes[sizeof(U)];
    std::memcpy(bytes, &v, sizeof(U));
    out.append(bytes, sizeof(U));
  }
}

inline void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    if constexpr (std::endian::native == std::endian::big) {
      std::array<char, sizeof(U)> bytes;
      std::memcpy(bytes.data(), data_.data() + pos_, sizeof(U));
      std::reverse(bytes.begin(), bytes.end());
      v = std::bit_cast<U>(bytes);
    } else {
      std::memcpy(&v, data_.data() + pos_, sizeof(U));
    }
    pos_ += sizeof(U);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() { return get_bytes(get<std::uint32_t>()); }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError("checkpoint is truncated");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const Container& c) {
  std::string out(kContainerMagic, 8);
  detail::put<std::uint32_t>(out, kContainerVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    detail::put_string(out, k);
    detail::put_string(out, v);
  }
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(c.blocks.size()));
  for (const auto& b : c.blocks) {
    if (b.values.size() != b.numel()) throw FormatError("block '" + b.name + "' payload does not match its shape");
    detail::put_string(out, b.name);
    detail::put<std::uint8_t>(out, b.dtype);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) detail::put<std::uint64_t>(out, d);
    for (double v : b.values) {
      if (b.dtype == 1) detail::put<float>(out, static_cast<float>(v));
      else detail::put<double>(out, v);
    }
  }
  out.append(kContainerEnd, 8);
  return out;
}

inline Container decode_container(std::string bytes) {
  detail::Reader in(std::move(bytes));
  if (in.get_bytes(8) != std::string(kContainerMagic, 8)) throw FormatError("not a checkpoint (bad magic bytes)");
  const auto version = in.get<std::uint32_t>();
  if (version != kContainerVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kContainerVersion) + ")");
  Container c;
  const auto n_meta = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = in.get_string();
    auto v = in.get_string();
    c.meta.emplace_back(std::move(k), std::move(v));
  }
  const auto n_blocks = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    Block b;
    b.name = in.get_string();
    b.dtype = in.get<std::uint8_t>();
    if (b.dtype != 1 && b.dtype != 2) throw FormatError("block '" + b.name + "' has unknown dtype");
    const auto ndim = in.get<std::uint32_t>();
    if (ndim > 8) throw FormatError("block '" + b.name + "' has implausible rank");
    for (std::uint32_t d = 0; d < ndim; ++d) b.shape.push_back(in.get<std::uint64_t>());
    const std::size_t n = b.numel();
    b.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) b.values[k] = b.dtype == 1 ? in.get<float>() : in.get<double>();
    c.blocks.push_back(std::move(b));
  }
  if (in.get_bytes(8) != std::string(kContainerEnd, 8)) throw FormatError("checkpoint trailer missing");
  if (!in.at_end()) throw FormatError("trailing bytes after checkpoint");
  return c;
}

inline void write_container(const Container& c, const std::string& path) {
  const std::string bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(std::move(bytes));
}

template <class T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 1 : 2;
}

}  // namespace terra
