#pragma once

// Binary PPM (P6) / PGM (P5) with 8-bit samples.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcsnet/tensor.hpp"

namespace pcsnet {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Image8 {
  std::size_t width = 0, height = 0, channels = 0;  // channels: 1 (PGM) or 3 (PPM)
  std::vector<std::uint8_t> pixels;                 // interleaved, row-major

  friend bool operator==(const Image8&, const Image8&) = default;
};

namespace detail {

inline std::size_t read_header_int(const std::vector<std::uint8_t>& buf, std::size_t& pos, const std::string& path) {
  for (;;) {
    while (pos < buf.size() && std::isspace(buf[pos])) ++pos;
    if (pos < buf.size() && buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= buf.size() || !std::isdigit(buf[pos])) throw FormatError("malformed PNM header in " + path);
  std::size_t v = 0;
  while (pos < buf.size() && std::isdigit(buf[pos])) {
    v = v * 10 + static_cast<std::size_t>(buf[pos] - '0');
    if (v > (1u << 24)) throw FormatError("PNM dimension too large in " + path);
    ++pos;
  }
  return v;
}

}  // namespace detail

inline Image8 decode_pnm(const std::vector<std::uint8_t>& buf, const std::string& path = "<memory>") {
  if (buf.size() < 2 || buf[0] != 'P') throw FormatError("unsupported format (not a PNM file): " + path);
  const char kind = static_cast<char>(buf[1]);
  if (kind != '5' && kind != '6')
    throw FormatError(std::string("unsupported format P") + kind + " in " + path + " (only binary P5/P6)");
  std::size_t pos = 2;
  Image8 img;
  img.channels = kind == '6' ? 3 : 1;
  img.width = detail::read_header_int(buf, pos, path);
  img.height = detail::read_header_int(buf, pos, path);
  const std::size_t maxval = detail::read_header_int(buf, pos, path);
  if (maxval != 255) throw FormatError("unsupported PNM maxval " + std::to_string(maxval) + " in " + path);
  if (pos >= buf.size() || !std::isspace(buf[pos])) throw FormatError("malformed PNM header in " + path);
  ++pos;
  const std::size_t n = img.width * img.height * img.channels;
  if (buf.size() - pos < n) throw FormatError("truncated PNM payload in " + path);
  img.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

inline std::vector<std::uint8_t> encode_pnm(const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw FormatError("PNM supports 1 or 3 channels");
  if (img.pixels.size() != img.width * img.height * img.channels) throw FormatError("image buffer size mismatch");
  const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline Image8 read_pnm(const std::filesystem::path& path) { return decode_pnm(read_file(path), path.string()); }

inline void write_pnm(const std::filesystem::path& path, const Image8& img) { write_file(path, encode_pnm(img)); }

/// Linear [0,1] -> [0,255] with round-half-up; out-of-range values clamp.
template <typename T>
std::uint8_t quantize(T v) {
  const double x = std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(std::floor(x + 0.5));
}

/// [C,H,W] floats in [0,1] from an 8-bit image.
template <typename T>
Tensor<T> to_tensor(const Image8& img) {
  Tensor<T> t(Shape{img.channels, img.height, img.width});
  const std::size_t hw = img.width * img.height;
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < img.channels; ++c)
      t[c * hw + p] = static_cast<T>(img.pixels[p * img.channels + c]) / T{255};
  return t;
}

/// Accepts [C,H,W] or [1,C,H,W] with C in {1,3}.
template <typename T>
Image8 to_image(const Tensor<T>& t) {
  Shape s = t.shape();
  if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
  if (s.size() == 2) s.insert(s.begin(), 1);
  if (s.size() != 3 || (s[0] != 1 && s[0] != 3)) throw ShapeError("to_image: unsupported shape " + shape_str(t.shape()));
  Image8 img{s[2], s[1], s[0], std::vector<std::uint8_t>(t.size())};
  const std::size_t hw = img.width * img.height;
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < img.channels; ++c) img.pixels[p * img.channels + c] = quantize(t[c * hw + p]);
  return img;
}

/// Single-channel heatmap as PGM, values clamped to [0,1].
template <typename T>
void write_heatmap(const Tensor<T>& map, const std::filesystem::path& path) {
  auto img = to_image(map.reshaped(Shape{1, map.dim(map.rank() - 2), map.dim(map.rank() - 1)}));
  write_pnm(path, img);
}

}  // namespace pcsnet
