#pragma once

// Checkpoint container:
//
//   "PCSN" | u32 version | u32 config_len | config (UTF-8 JSON)
//   | u32 tensor_count | tensor records... | u32 crc32
//
// Each tensor record is u32 name_len | name | u8 dtype (1 = f32, 2 = f64)
// | u32 rank | u64 dims[rank] | little-endian scalars. The CRC32 covers every
// byte between the version field and the checksum.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "pcsnet/image_io.hpp"
#include "pcsnet/tensor.hpp"

namespace pcsnet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class ChecksumError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct Checkpoint {
  std::string config;
  std::vector<std::pair<std::string, AnyTensor>> tensors;

  const AnyTensor& find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw std::runtime_error("checkpoint has no tensor '" + name + "'");
  }

  bool contains(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    return std::visit([](const auto& t) { return t.template cast<T>(); }, find(name));
  }

  template <typename T>
  void put(std::string name, Tensor<T> t) {
    tensors.emplace_back(std::move(name), AnyTensor(std::move(t)));
  }
};

namespace detail {

class ByteWriter {
 public:
  template <typename V>
  void pod(V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(V));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::size_t begin, std::size_t end) : buf_(b), pos_(begin), end_(end) {}

  template <typename V>
  V pod() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw FormatError("truncated checkpoint");
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_, end_;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, data, static_cast<uInt>(n));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter body;
  body.pod<std::uint32_t>(static_cast<std::uint32_t>(ck.config.size()));
  body.raw(ck.config.data(), ck.config.size());
  body.pod<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, any] : ck.tensors) {
    body.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    body.raw(name.data(), name.size());
    std::visit(
        [&](const auto& t) {
          using V = typename std::decay_t<decltype(t)>::value_type;
          body.pod<std::uint8_t>(std::is_same_v<V, float> ? 1 : 2);
          body.pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
          for (auto d : t.shape()) body.pod<std::uint64_t>(d);
          body.raw(t.data(), t.size() * sizeof(V));
        },
        any);
  }
  detail::ByteWriter out;
  out.raw("PCSN", 4);
  out.pod<std::uint32_t>(kCheckpointVersion);
  out.raw(body.bytes.data(), body.bytes.size());
  out.pod<std::uint32_t>(detail::crc32_of(body.bytes.data(), body.bytes.size()));
  return out.bytes;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "PCSN", 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  const std::size_t body_begin = 8, body_end = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body_end, 4);
  if (stored != detail::crc32_of(bytes.data() + body_begin, body_end - body_begin))
    throw ChecksumError("checkpoint checksum mismatch (file corrupted or truncated)");

  detail::ByteReader in(bytes, body_begin, body_end);
  Checkpoint ck;
  ck.config.resize(in.pod<std::uint32_t>());
  in.raw(ck.config.data(), ck.config.size());
  const auto count = in.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(in.pod<std::uint32_t>(), '\0');
    in.raw(name.data(), name.size());
    const auto dtype = in.pod<std::uint8_t>();
    const auto rank = in.pod<std::uint32_t>();
    if (rank > 8) throw FormatError("checkpoint tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.pod<std::uint64_t>());
    const std::size_t elem = dtype == 1 ? 4 : dtype == 2 ? 8 : 0;
    if (!elem) throw FormatError("checkpoint tensor '" + name + "' has unknown dtype");
    if (shape_numel(shape) * elem > in.remaining()) throw FormatError("truncated checkpoint tensor '" + name + "'");
    if (dtype == 1) {
      Tensor<float> t(shape);
      in.raw(t.data(), t.size() * 4);
      ck.tensors.emplace_back(std::move(name), std::move(t));
    } else {
      Tensor<double> t(shape);
      in.raw(t.data(), t.size() * 8);
      ck.tensors.emplace_back(std::move(name), std::move(t));
    }
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes in checkpoint");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace pcsnet
