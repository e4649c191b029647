#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>

#include "mcdiff/metrics.hpp"
#include "mcdiff/synth.hpp"

using namespace mcdiff;

namespace {
const Canvas kCanvas{16, 16};

std::size_t count(const std::vector<bool>& m) { return std::size_t(std::count(m.begin(), m.end(), true)); }
}  // namespace

TEST(Synth, FullCanvasSquareIsAllColor) {
  // Validation off: a canvas-covering square violates the margin rule.
  const SceneSpec s{ShapeKind::square, ColorName::blue, 8, 8, 8};
  const auto img = render_target<double>(s, kCanvas, Validation::none);
  const double b = byte_to_unit(200), o = byte_to_unit(40);
  for (std::size_t i = 0; i < 256; ++i) {
    EXPECT_EQ(img[i], o);
    EXPECT_EQ(img[256 + i], o);
    EXPECT_EQ(img[512 + i], b);
  }
  EXPECT_THROW(render_target<double>(s, kCanvas), DomainError);
}

TEST(Synth, CircleCenterAndCorner) {
  const SceneSpec s{ShapeKind::circle, ColorName::red, 8, 8, 3};
  const auto img = render_target<double>(s, kCanvas);
  EXPECT_EQ(img.at({0, 8, 8}), byte_to_unit(200));
  EXPECT_EQ(img.at({0, 0, 0}), byte_to_unit(128));
  EXPECT_EQ(img.at({1, 0, 0}), byte_to_unit(128));
}

TEST(Synth, CircleAreaNearAnalytic) {
  const Canvas big{32, 32};
  for (int r = 3; r <= 6; ++r) {
    const double area = double(count(rasterize({ShapeKind::circle, ColorName::red, 15, 15, r}, big)));
    const double exact = std::numbers::pi * r * r;
    EXPECT_NEAR(area / exact, 1.0, 0.15) << "r=" << r;
  }
}

TEST(Synth, TriangleHasApexUp) {
  const auto m = rasterize({ShapeKind::triangle, ColorName::red, 8, 8, 4}, kCanvas);
  std::size_t top = 0, bottom = 0;
  for (int x = 0; x < 16; ++x) {
    top += m[4 * 16 + x];
    bottom += m[12 * 16 + x];
  }
  EXPECT_EQ(top, 1u);
  EXPECT_EQ(bottom, 9u);
}

TEST(Synth, SceneInvariants) {
  EXPECT_THROW(validate_scene({ShapeKind::circle, ColorName::red, 8, 8, 2}, kCanvas), DomainError);
  EXPECT_THROW(validate_scene({ShapeKind::circle, ColorName::red, 3, 8, 3}, kCanvas), DomainError);
  EXPECT_NO_THROW(validate_scene({ShapeKind::circle, ColorName::red, 4, 4, 3}, kCanvas));
  EXPECT_NO_THROW(validate_scene({ShapeKind::circle, ColorName::red, 11, 11, 3}, kCanvas));
  EXPECT_THROW(validate_scene({ShapeKind::circle, ColorName::red, 12, 11, 3}, kCanvas), DomainError);
}

TEST(Synth, LayoutMatchesTargetForegroundExactly) {
  for (const auto& s : generate_dataset<double>(300, kCanvas, 5)) {
    EXPECT_EQ(layout_iou(s.target, s.layout), 1.0);
    for (auto v : s.layout.vec()) EXPECT_TRUE(v == 1.0 || v == -1.0);
    for (auto v : s.target.vec()) EXPECT_TRUE(v >= -1.0 && v <= 1.0);
  }
}

TEST(Synth, ColorDoesNotChangeLayout) {
  SceneSpec a{ShapeKind::square, ColorName::red, 7, 9, 4}, b = a;
  b.color = ColorName::yellow;
  EXPECT_EQ(render_layout<float>(a, kCanvas), render_layout<float>(b, kCanvas));
}

TEST(Synth, ShiftedScenesOverlapLittle) {
  for (auto shape : kShapes)
    for (int size = 3; size <= 4; ++size) {
      const SceneSpec a{shape, ColorName::red, 5, 8, size};
      const SceneSpec b{shape, ColorName::red, 5 + size, 8, size};
      const Canvas wide{24, 16};
      EXPECT_LT(mask_iou(rasterize(a, wide), rasterize(b, wide)), 0.5) << to_string(shape) << size;
    }
}

TEST(Synth, DatasetDeterministicBalancedAndValid) {
  const auto a = generate_scenes(4096, kCanvas, 17), b = generate_scenes(4096, kCanvas, 17);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, generate_scenes(4096, kCanvas, 18));
  std::map<std::pair<int, int>, int> cells;
  for (const auto& s : a) {
    EXPECT_TRUE(scene_violation(s, kCanvas).empty());
    ++cells[{int(s.shape), int(s.color)}];
  }
  ASSERT_EQ(cells.size(), 12u);
  for (const auto& [k, n] : cells) EXPECT_NEAR(n, 4096.0 / 12, 0.2 * 4096 / 12);
}

TEST(Synth, PromptAndNames) {
  EXPECT_EQ(make_prompt({ShapeKind::triangle, ColorName::green, 8, 8, 3}),
            (std::vector<std::string>{"green", "triangle"}));
  EXPECT_EQ(parse_color("blue"), ColorName::blue);
  EXPECT_EQ(parse_shape("square"), ShapeKind::square);
  EXPECT_THROW(parse_color("purple"), DomainError);
  EXPECT_EQ(index_name("target", 42, "ppm"), "target_00042.ppm");
}

TEST(Synth, ManifestRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "mcdiff_synth_manifest";
  std::filesystem::remove_all(dir);
  const auto data = generate_dataset<float>(5, kCanvas, 3);
  write_dataset(dir, data);
  const auto recs = read_manifest(dir / "manifest.txt");
  ASSERT_EQ(recs.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(recs[i].index, i);
    EXPECT_EQ(recs[i].scene, data[i].scene);
    EXPECT_TRUE(std::filesystem::exists(dir / index_name("target", i, "ppm")));
    EXPECT_TRUE(std::filesystem::exists(dir / index_name("layout", i, "pgm")));
  }
  std::filesystem::remove_all(dir);
}
