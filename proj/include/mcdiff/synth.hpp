#pragma once

// Synthetic single-shape scenes with exact ground truth: a colored target
// image, its binary silhouette, and a two-token prompt.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mcdiff/image_io.hpp"
#include "mcdiff/rng.hpp"

namespace mcdiff {

enum class ShapeKind { circle, square, triangle };
enum class ColorName { red, green, blue, yellow };

struct Rgb8 {
  std::uint8_t r, g, b;
};

inline constexpr std::array<ShapeKind, 3> kShapes{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
inline constexpr std::array<ColorName, 4> kColors{ColorName::red, ColorName::green, ColorName::blue,
                                                  ColorName::yellow};
inline constexpr std::array<Rgb8, 4> kPalette{Rgb8{200, 40, 40}, Rgb8{40, 200, 40}, Rgb8{40, 40, 200},
                                              Rgb8{220, 220, 40}};
inline constexpr std::uint8_t kBackgroundGray = 128;

inline const char* to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

inline const char* to_string(ColorName c) {
  switch (c) {
    case ColorName::red: return "red";
    case ColorName::green: return "green";
    case ColorName::blue: return "blue";
    case ColorName::yellow: return "yellow";
  }
  return "?";
}

inline ShapeKind parse_shape(std::string_view s) {
  for (auto k : kShapes)
    if (s == to_string(k)) return k;
  throw DomainError("unknown shape '" + std::string(s) + "'");
}

inline ColorName parse_color(std::string_view s) {
  for (auto c : kColors)
    if (s == to_string(c)) return c;
  throw DomainError("unknown color '" + std::string(s) + "'");
}

inline Rgb8 palette(ColorName c) { return kPalette[std::size_t(c)]; }

struct Canvas {
  std::size_t width = 16;
  std::size_t height = 16;
};

struct SceneSpec {
  ShapeKind shape = ShapeKind::circle;
  ColorName color = ColorName::red;
  int cx = 0;
  int cy = 0;
  int size = 3;  // radius / half-extent in pixels

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

inline constexpr int kMinShapeSize = 3;

// Largest size that still leaves a 1-pixel margin on the canvas.
inline int max_shape_size(const Canvas& c) { return (int(std::min(c.width, c.height)) - 3) / 2; }

inline std::string scene_violation(const SceneSpec& s, const Canvas& c) {
  if (s.size < kMinShapeSize) return "size " + std::to_string(s.size) + " below minimum 3";
  const int w = int(c.width), h = int(c.height);
  if (s.cx - s.size < 1 || s.cx + s.size > w - 2 || s.cy - s.size < 1 || s.cy + s.size > h - 2)
    return "shape does not fit inside the canvas with a 1-pixel margin";
  return {};
}

inline void validate_scene(const SceneSpec& s, const Canvas& c) {
  if (auto why = scene_violation(s, c); !why.empty()) throw DomainError("scene: " + why);
}

// Pixel-center membership test shared by every renderer.
inline bool inside_shape(const SceneSpec& s, int x, int y) {
  const int dx = x - s.cx, dy = y - s.cy;
  switch (s.shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= s.size * s.size;
    case ShapeKind::square: return std::abs(dx) <= s.size && std::abs(dy) <= s.size;
    case ShapeKind::triangle:  // apex up, base on row cy + size
      return dy >= -s.size && dy <= s.size && 2 * std::abs(dx) <= dy + s.size;
  }
  return false;
}

// Row-major H*W mask; no validation.
inline std::vector<bool> rasterize(const SceneSpec& s, const Canvas& c) {
  std::vector<bool> m(c.width * c.height);
  for (std::size_t y = 0; y < c.height; ++y)
    for (std::size_t x = 0; x < c.width; ++x) m[y * c.width + x] = inside_shape(s, int(x), int(y));
  return m;
}

enum class Validation { strict, none };

// [3, H, W] in [-1, 1]: palette color on mid-gray background.
template <typename T>
Tensor<T> render_target(const SceneSpec& s, const Canvas& c, Validation v = Validation::strict) {
  if (v == Validation::strict) validate_scene(s, c);
  const auto mask = rasterize(s, c);
  const Rgb8 col = palette(s.color);
  const std::array<T, 3> fg{T(byte_to_unit(col.r)), T(byte_to_unit(col.g)), T(byte_to_unit(col.b))};
  const T bg = T(byte_to_unit(kBackgroundGray));
  const std::size_t hw = c.width * c.height;
  Tensor<T> out(Shape{3, c.height, c.width});
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = mask[i] ? fg[ch] : bg;
  return out;
}

// [1, H, W]: +1 inside the shape, -1 elsewhere.
template <typename T>
Tensor<T> render_layout(const SceneSpec& s, const Canvas& c, Validation v = Validation::strict) {
  if (v == Validation::strict) validate_scene(s, c);
  const auto mask = rasterize(s, c);
  Tensor<T> out(Shape{1, c.height, c.width});
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] ? T(1) : T(-1);
  return out;
}

inline std::vector<std::string> make_prompt(const SceneSpec& s) { return {to_string(s.color), to_string(s.shape)}; }

template <typename T>
struct DataSample {
  Tensor<T> target;  // [3, H, W]
  Tensor<T> layout;  // [1, H, W]
  std::vector<std::string> prompt;
  SceneSpec scene;
};

// Uniform over shape, color and size, then center uniform over positions
// that keep the margin. Sample i draws from its own stream split off `seed`.
inline SceneSpec random_scene(Rng& rng, const Canvas& c) {
  const int max_size = max_shape_size(c);
  if (max_size < kMinShapeSize) throw DomainError("canvas too small for any valid scene");
  SceneSpec s;
  s.shape = kShapes[rng.uniform_int(kShapes.size())];
  s.color = kColors[rng.uniform_int(kColors.size())];
  s.size = kMinShapeSize + int(rng.uniform_int(std::uint64_t(max_size - kMinShapeSize + 1)));
  const int lo = s.size + 1;
  s.cx = lo + int(rng.uniform_int(std::uint64_t(int(c.width) - 2 - s.size - lo + 1)));
  s.cy = lo + int(rng.uniform_int(std::uint64_t(int(c.height) - 2 - s.size - lo + 1)));
  return s;
}

inline std::vector<SceneSpec> generate_scenes(std::size_t n, const Canvas& c, std::uint64_t seed) {
  const Rng root(seed);
  std::vector<SceneSpec> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = root.split("scene/" + std::to_string(i));
    out.push_back(random_scene(r, c));
  }
  return out;
}

template <typename T>
std::vector<DataSample<T>> generate_dataset(std::size_t n, const Canvas& c, std::uint64_t seed) {
  std::vector<DataSample<T>> out;
  out.reserve(n);
  for (const auto& s : generate_scenes(n, c, seed))
    out.push_back({render_target<T>(s, c), render_layout<T>(s, c), make_prompt(s), s});
  return out;
}

// Manifest line: "<index> <shape> <color> <cx> <cy> <size>".
inline std::string manifest_line(std::size_t index, const SceneSpec& s) {
  std::ostringstream os;
  os << index << ' ' << to_string(s.shape) << ' ' << to_string(s.color) << ' ' << s.cx << ' ' << s.cy << ' '
     << s.size;
  return os.str();
}

struct ManifestRecord {
  std::size_t index;
  SceneSpec scene;
};

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    ManifestRecord r{};
    std::string shape, color;
    if (!(is >> r.index >> shape >> color >> r.scene.cx >> r.scene.cy >> r.scene.size))
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed manifest record");
    r.scene.shape = parse_shape(shape);
    r.scene.color = parse_color(color);
    out.push_back(r);
  }
  return out;
}

inline std::string index_name(const char* prefix, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05zu.%s", prefix, i, ext);
  return buf;
}

// Writes target_XXXXX.ppm, layout_XXXXX.pgm and manifest.txt into dir.
template <typename T>
void write_dataset(const std::filesystem::path& dir, const std::vector<DataSample<T>>& data) {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.txt");
  if (!man) throw Error("cannot write " + (dir / "manifest.txt").string());
  for (std::size_t i = 0; i < data.size(); ++i) {
    write_pnm(dir / index_name("target", i, "ppm"), data[i].target);
    write_pnm(dir / index_name("layout", i, "pgm"), data[i].layout);
    man << manifest_line(i, data[i].scene) << '\n';
  }
}

}  // namespace mcdiff
