#pragma once

// Layout and color metrics for generated images plus the sweep contact sheet.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mcdiff/synth.hpp"
#include <json.hpp>

namespace mcdiff {

// Euclidean RGB distance from the background gray (in [-1, 1] units) above
// which a pixel counts as foreground. Background sits at 0 and every palette
// color is more than 0.6 away.
inline constexpr double kForegroundThreshold = 0.25;

template <typename T>
std::vector<bool> foreground_mask(const Tensor<T>& rgb, double threshold = kForegroundThreshold) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("foreground_mask: need [3,H,W]");
  const std::size_t hw = rgb.dim(1) * rgb.dim(2);
  const double bg = byte_to_unit(kBackgroundGray);
  std::vector<bool> m(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    double d2 = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = double(rgb[c * hw + i]) - bg;
      d2 += d * d;
    }
    m[i] = std::sqrt(d2) > threshold;
  }
  return m;
}

template <typename T>
std::vector<bool> layout_mask(const Tensor<T>& layout) {
  if (layout.rank() != 3 || layout.dim(0) != 1) throw ShapeError("layout_mask: need [1,H,W]");
  std::vector<bool> m(layout.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = layout[i] > T(0);
  return m;
}

// IoU of two equal-size masks; two empty masks give 1.
inline double mask_iou(const std::vector<bool>& a, const std::vector<bool>& b) {
  if (a.size() != b.size()) throw ShapeError("mask_iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

template <typename T>
double layout_iou(const Tensor<T>& generated, const Tensor<T>& layout) {
  if (generated.rank() != 3 || layout.rank() != 3 || generated.dim(1) != layout.dim(1) ||
      generated.dim(2) != layout.dim(2))
    throw ShapeError("layout_iou: extents " + shape_str(generated.shape()) + " vs " + shape_str(layout.shape()));
  return mask_iou(foreground_mask(generated), layout_mask(layout));
}

struct ColorAdherence {
  bool matches = false;
  std::array<double, 3> mean_rgb{};  // 0..255 scale
  ColorName nearest = ColorName::red;
};

// Mean RGB over the layout foreground and its nearest palette entry.
// Distances within 1e-6 of each other count as ties; the lower palette index
// wins a tie.
template <typename T>
ColorAdherence color_adherence(const Tensor<T>& generated, const Tensor<T>& layout, ColorName target) {
  if (generated.rank() != 3 || generated.dim(0) != 3) throw ShapeError("color_adherence: need [3,H,W]");
  const auto m = layout_mask(layout);
  const std::size_t hw = generated.dim(1) * generated.dim(2);
  if (m.size() != hw) throw ShapeError("color_adherence: extent mismatch");
  ColorAdherence out;
  std::size_t n = 0;
  for (std::size_t i = 0; i < hw; ++i) {
    if (!m[i]) continue;
    ++n;
    for (std::size_t c = 0; c < 3; ++c) out.mean_rgb[c] += (double(generated[c * hw + i]) + 1.0) * 127.5;
  }
  if (n == 0) return out;
  for (auto& v : out.mean_rgb) v /= double(n);
  double best = std::numeric_limits<double>::infinity();
  for (auto c : kColors) {
    const Rgb8 p = palette(c);
    const double d = std::hypot(out.mean_rgb[0] - p.r, out.mean_rgb[1] - p.g, out.mean_rgb[2] - p.b);
    if (d < best - 1e-6) {
      best = d;
      out.nearest = c;
    }
  }
  out.matches = out.nearest == target;
  return out;
}

template <typename T>
double pixel_mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("pixel_mse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - double(b[i])) * (double(a[i]) - double(b[i]));
  return s / double(a.size());
}

// A 1-channel layout lifted to 3 channels by replication; 3-channel passes through.
template <typename T>
Tensor<T> as_rgb(const Tensor<T>& img) {
  if (img.rank() == 3 && img.dim(0) == 3) return img;
  if (img.rank() != 3 || img.dim(0) != 1) throw ShapeError("as_rgb: need [1,H,W] or [3,H,W]");
  const std::size_t hw = img.dim(1) * img.dim(2);
  Tensor<T> out(Shape{3, img.dim(1), img.dim(2)});
  for (std::size_t c = 0; c < 3; ++c) std::copy_n(img.data().data(), hw, &out[c * hw]);
  return out;
}

// Silhouette derived from an RGB image via the foreground threshold.
template <typename T>
Tensor<T> layout_from_rgb(const Tensor<T>& rgb) {
  const auto m = foreground_mask(rgb);
  Tensor<T> out(Shape{1, rgb.dim(1), rgb.dim(2)});
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] ? T(1) : T(-1);
  return out;
}

struct MetricsRecord {
  std::string id;
  int sigma = 0;
  double guidance = 0;
  double strength = -1;  // negative: SDEdit disabled
  double iou = 0;
  bool color_ok = false;
  double mse = 0;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json j{{"id", r.id}, {"sigma", r.sigma}, {"s", r.guidance}, {"iou", r.iou},
                   {"color_ok", r.color_ok}, {"mse", r.mse}, {"seed", r.seed}};
  j["strength"] = r.strength < 0 ? nlohmann::json(nullptr) : nlohmann::json(r.strength);
  return j;
}

struct MetricsSummary {
  std::size_t count = 0;
  double mean_iou = 0;
  double color_rate = 0;
  double mean_mse = 0;
};

inline MetricsSummary summarize(const std::vector<MetricsRecord>& recs) {
  MetricsSummary s;
  s.count = recs.size();
  if (recs.empty()) return s;
  for (const auto& r : recs) {
    s.mean_iou += r.iou;
    s.color_rate += r.color_ok ? 1.0 : 0.0;
    s.mean_mse += r.mse;
  }
  s.mean_iou /= double(s.count);
  s.color_rate /= double(s.count);
  s.mean_mse /= double(s.count);
  return s;
}

// Tiles [C, H, W] images row by row (`cols` per row) with 1-pixel black
// separators between tiles. Missing tail cells stay black.
template <typename T>
Tensor<T> contact_sheet(const std::vector<Tensor<T>>& tiles, std::size_t cols) {
  if (tiles.empty() || cols == 0) throw ShapeError("contact_sheet: empty grid");
  const Shape& s = tiles[0].shape();
  const std::size_t c = s.at(0), h = s.at(1), w = s.at(2);
  const std::size_t rows = (tiles.size() + cols - 1) / cols;
  const std::size_t H = rows * h + (rows - 1), W = cols * w + (cols - 1);
  Tensor<T> out(Shape{c, H, W}, T(-1));
  for (std::size_t k = 0; k < tiles.size(); ++k) {
    if (tiles[k].shape() != s) throw ShapeError("contact_sheet: tiles differ in shape");
    const std::size_t oy = (k / cols) * (h + 1), ox = (k % cols) * (w + 1);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out[(ch * H + oy + y) * W + ox + x] = tiles[k][(ch * h + y) * w + x];
  }
  return out;
}

}  // namespace mcdiff
