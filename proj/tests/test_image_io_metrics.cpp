#include <gtest/gtest.h>

#include <filesystem>

#include "mcdiff/image_io.hpp"
#include "mcdiff/metrics.hpp"
#include "support/golden_images.hpp"

using namespace mcdiff;

namespace {
std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }
}  // namespace

TEST(Pnm, GoldenBytes) {
  for (const auto& g : mcdiff::testing::golden_images()) {
    const auto expect = read_file_bytes(std::filesystem::path(MCDIFF_GOLDEN_DIR) / g.file);
    EXPECT_EQ(encode_pnm(g.image), expect) << g.file;
    EXPECT_EQ(encode_pnm(g.image.cast<float>()), expect) << g.file;
  }
}

TEST(Pnm, WhitePixelFileSize) {
  const auto b = encode_pnm(Tensor<double>(Shape{3, 1, 1}, 1.0));
  ASSERT_EQ(b.size(), 14u);  // 11-byte header + 3 payload bytes
  EXPECT_EQ(std::string(b.begin(), b.begin() + 11), "P6\n1 1\n255\n");
  EXPECT_EQ(b[11], 255);
}

TEST(Pnm, RoundingAndClamping) {
  EXPECT_EQ(unit_to_byte(-1.0), 0);
  EXPECT_EQ(unit_to_byte(0.0), 128);  // 127.5 rounds away from zero
  EXPECT_EQ(unit_to_byte(1.0), 255);
  EXPECT_EQ(unit_to_byte(2.0), 255);
  EXPECT_EQ(unit_to_byte(-2.0), 0);
}

TEST(Pnm, ByteRoundTrip) {
  Rng rng(3);
  std::vector<std::uint8_t> payload(3 * 5 * 7);
  for (auto& b : payload) b = std::uint8_t(rng.uniform_int(256));
  auto file = bytes_of("P6\n7 5\n255\n");
  file.insert(file.end(), payload.begin(), payload.end());
  EXPECT_EQ(encode_pnm(decode_pnm<double>(file)), file);
  EXPECT_EQ(encode_pnm(decode_pnm<float>(file)), file);
}

TEST(Pnm, ReadsCommentsAndWhitespace) {
  auto file = bytes_of("P5 # gray\n2\t1\n# max\n255\n");
  file.push_back(0);
  file.push_back(255);
  const auto img = decode_pnm<double>(file);
  EXPECT_EQ(img.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(img[0], -1.0);
  EXPECT_EQ(img[1], 1.0);
}

TEST(Pnm, Rejections) {
  EXPECT_THROW(decode_pnm<double>(bytes_of("P3\n1 1\n255\n")), FormatError);
  EXPECT_THROW(decode_pnm<double>(bytes_of("P6\n1 1\n65535\n\1\2\3\4\5\6")), FormatError);
  try {
    decode_pnm<double>(bytes_of("P5\n1 1\n15\nx"));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("maxval"), std::string::npos);
  }
  EXPECT_THROW(decode_pnm<double>(bytes_of("P6\n2 2\n255\nabc")), FormatError);
  EXPECT_THROW(decode_pnm<double>(bytes_of("P6\nx 2\n255\n")), FormatError);
  EXPECT_THROW(encode_pnm(Tensor<double>(Shape{2, 2, 2})), ShapeError);
}

TEST(Pnm, FileErrorsNamePath) {
  try {
    read_pnm<double>("/nonexistent/dir/img.ppm");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/img.ppm"), std::string::npos);
  }
}

TEST(Metrics, MaskIouExamples) {
  std::vector<bool> a{1, 1, 0, 0}, b{0, 0, 1, 1}, c{0, 1, 1, 0};
  EXPECT_EQ(mask_iou(a, a), 1.0);
  EXPECT_EQ(mask_iou(a, b), 0.0);
  EXPECT_DOUBLE_EQ(mask_iou(a, c), 1.0 / 3.0);
  EXPECT_EQ(mask_iou({0, 0}, {0, 0}), 1.0);
  EXPECT_THROW(mask_iou(a, {1}), ShapeError);
}

TEST(Metrics, RenderedTargetHasPerfectIouAndColor) {
  const Canvas cv{16, 16};
  for (auto col : kColors) {
    const SceneSpec s{ShapeKind::circle, col, 8, 8, 4};
    const auto img = render_target<double>(s, cv), lay = render_layout<double>(s, cv);
    EXPECT_EQ(layout_iou(img, lay), 1.0);
    const auto ca = color_adherence(img, lay, col);
    EXPECT_TRUE(ca.matches);
    EXPECT_NEAR(ca.mean_rgb[0], palette(col).r, 1e-9);
    EXPECT_NEAR(ca.mean_rgb[2], palette(col).b, 1e-9);
    EXPECT_FALSE(color_adherence(img, lay, col == ColorName::red ? ColorName::blue : ColorName::red).matches);
  }
}

TEST(Metrics, ColorTieGoesToLowerPaletteIndex) {
  // Half red, half blue foreground: mean (120, 40, 120) is equidistant.
  Tensor<double> img(Shape{3, 1, 2}), lay(Shape{1, 1, 2}, 1.0);
  const Rgb8 r = palette(ColorName::red), b = palette(ColorName::blue);
  img.at({0, 0, 0}) = byte_to_unit(r.r);
  img.at({1, 0, 0}) = byte_to_unit(r.g);
  img.at({2, 0, 0}) = byte_to_unit(r.b);
  img.at({0, 0, 1}) = byte_to_unit(b.r);
  img.at({1, 0, 1}) = byte_to_unit(b.g);
  img.at({2, 0, 1}) = byte_to_unit(b.b);
  const auto ca = color_adherence(img, lay, ColorName::blue);
  EXPECT_EQ(ca.nearest, ColorName::red);
  EXPECT_FALSE(ca.matches);
}

TEST(Metrics, ForegroundThresholdSeparatesBackgroundAndPalette) {
  const double bg = byte_to_unit(kBackgroundGray);
  for (auto c : kColors) {
    const Rgb8 p = palette(c);
    const double d = std::hypot(byte_to_unit(p.r) - bg, byte_to_unit(p.g) - bg, byte_to_unit(p.b) - bg);
    EXPECT_GT(d, 0.6);
  }
  Tensor<double> gray(Shape{3, 2, 2}, bg);
  for (bool m : foreground_mask(gray)) EXPECT_FALSE(m);
}

TEST(Metrics, PixelMseAndRgbLift) {
  Tensor<double> a(Shape{1, 2, 2}, 1.0), b(Shape{1, 2, 2}, -1.0);
  EXPECT_EQ(pixel_mse(a, b), 4.0);
  EXPECT_EQ(pixel_mse(a, a), 0.0);
  const auto rgb = as_rgb(a);
  EXPECT_EQ(rgb.shape(), (Shape{3, 2, 2}));
  EXPECT_EQ(layout_from_rgb(rgb), a);
  EXPECT_THROW(pixel_mse(a, rgb), ShapeError);
}

TEST(Metrics, SummaryAverages) {
  std::vector<MetricsRecord> r(2);
  r[0].iou = 0.5;
  r[0].color_ok = true;
  r[1].iou = 1.0;
  r[1].mse = 2.0;
  const auto s = summarize(r);
  EXPECT_EQ(s.count, 2u);
  EXPECT_DOUBLE_EQ(s.mean_iou, 0.75);
  EXPECT_DOUBLE_EQ(s.color_rate, 0.5);
  EXPECT_DOUBLE_EQ(s.mean_mse, 1.0);
  const auto j = to_json(r[0]);
  EXPECT_TRUE(j.at("strength").is_null());
}

TEST(Metrics, ContactSheetLayout) {
  std::vector<Tensor<double>> tiles;
  for (int k = 0; k < 5; ++k) tiles.emplace_back(Shape{1, 2, 3}, 0.1 * k);
  const auto sheet = contact_sheet(tiles, 2);
  // 3 rows x 2 cols of 2x3 tiles with 1-pixel separators.
  EXPECT_EQ(sheet.shape(), (Shape{1, 8, 7}));
  EXPECT_EQ(sheet.at({0, 0, 0}), 0.0);
  EXPECT_EQ(sheet.at({0, 0, 3}), -1.0);  // separator column
  EXPECT_DOUBLE_EQ(sheet.at({0, 0, 4}), 0.1);
  EXPECT_EQ(sheet.at({0, 2, 0}), -1.0);  // separator row
  EXPECT_DOUBLE_EQ(sheet.at({0, 3, 0}), 0.2);
  EXPECT_DOUBLE_EQ(sheet.at({0, 6, 2}), 0.4);
  EXPECT_EQ(sheet.at({0, 6, 4}), -1.0);  // empty tail cell
  EXPECT_THROW(contact_sheet<double>({}, 2), ShapeError);
}
