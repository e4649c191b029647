#pragma once

// Binary PPM (P6) / PGM (P5) with maxval 255. Pixel values in [-1, 1] map
// linearly onto [0, 255], rounding half away from zero.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mcdiff/tensor.hpp"

namespace mcdiff {

inline std::uint8_t unit_to_byte(double v) {
  const double b = std::round((v + 1.0) * 0.5 * 255.0);
  return static_cast<std::uint8_t>(std::clamp(b, 0.0, 255.0));
}

inline double byte_to_unit(std::uint8_t b) { return double(b) / 255.0 * 2.0 - 1.0; }

// img: [3, H, W] -> P6, or [1, H, W] -> P5.
template <typename T>
std::vector<std::uint8_t> encode_pnm(const Tensor<T>& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw ShapeError("encode_pnm: need [1,H,W] or [3,H,W], got " + shape_str(img.shape()));
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::string header =
      std::string(c == 3 ? "P6" : "P5") + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) out.push_back(unit_to_byte(double(img[(ch * h + y) * w + x])));
  return out;
}

namespace detail {

struct PnmCursor {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  void skip_space_and_comments() {
    while (pos < buf.size()) {
      const char ch = char(buf[pos]);
      if (ch == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        ++pos;
      } else {
        break;
      }
    }
  }

  std::size_t read_uint(const char* what) {
    skip_space_and_comments();
    if (pos >= buf.size() || !std::isdigit(buf[pos]))
      throw FormatError(std::string("pnm: malformed header, expected ") + what);
    std::size_t v = 0;
    while (pos < buf.size() && std::isdigit(buf[pos])) {
      v = v * 10 + (buf[pos++] - '0');
      if (v > (1u << 24)) throw FormatError(std::string("pnm: ") + what + " too large");
    }
    return v;
  }
};

}  // namespace detail

// Decodes P5/P6 bytes into [C, H, W] with values in [-1, 1].
template <typename T>
Tensor<T> decode_pnm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw FormatError("pnm: bad magic (expected P5 or P6)");
  const std::size_t c = bytes[1] == '6' ? 3 : 1;
  detail::PnmCursor cur{bytes, 2};
  const std::size_t w = cur.read_uint("width");
  const std::size_t h = cur.read_uint("height");
  const std::size_t maxval = cur.read_uint("maxval");
  if (w == 0 || h == 0) throw FormatError("pnm: zero image extent");
  if (maxval != 255) throw FormatError("pnm: maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (cur.pos >= bytes.size() || !std::isspace(bytes[cur.pos]))
    throw FormatError("pnm: missing whitespace after maxval");
  ++cur.pos;
  const std::size_t need = c * h * w;
  if (bytes.size() - cur.pos < need)
    throw FormatError("pnm: truncated payload (" + std::to_string(bytes.size() - cur.pos) + " of " +
                      std::to_string(need) + " bytes)");
  Tensor<T> out(Shape{c, h, w});
  const std::uint8_t* p = bytes.data() + cur.pos;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) out[(ch * h + y) * w + x] = T(byte_to_unit(*p++));
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

template <typename T>
void write_pnm(const std::filesystem::path& path, const Tensor<T>& img) {
  write_file_bytes(path, encode_pnm(img));
}

template <typename T>
Tensor<T> read_pnm(const std::filesystem::path& path) {
  try {
    return decode_pnm<T>(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace mcdiff
