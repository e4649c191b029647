#include <gtest/gtest.h>

#include "mcdiff/model.hpp"
#include "mcdiff/synth.hpp"

using namespace mcdiff;

namespace {

double l2(const Tensor<float>& a, const Tensor<float>& b) { return l2_distance(a, b); }

Tensor<float> layout_batch(const std::vector<SceneSpec>& scenes) {
  const Canvas cv{16, 16};
  Tensor<float> out(Shape{scenes.size(), 1, 16, 16});
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto l = render_layout<float>(scenes[i], cv);
    std::copy(l.vec().begin(), l.vec().end(), &out[i * 256]);
  }
  return out;
}

}  // namespace

TEST(Vocab, EncodesToFixedLength) {
  PromptVocab v(8);
  const auto ids = v.encode_text("red circle");
  ASSERT_EQ(ids.size(), 8u);
  EXPECT_EQ(ids[0], v.id("red"));
  EXPECT_EQ(ids[1], v.id("circle"));
  for (std::size_t i = 2; i < 8; ++i) EXPECT_EQ(ids[i], PromptVocab::kPad);
  EXPECT_EQ(v.encode_text(""), v.null_prompt());
  EXPECT_EQ(v.encode_text("<null>"), v.null_prompt());
  EXPECT_THROW(v.encode_text("red circle <null>"), DomainError);
  EXPECT_THROW(v.encode_text("purple circle"), DomainError);
  EXPECT_THROW(v.encode_text("red red red red red red red red red"), DomainError);
  EXPECT_THROW(PromptVocab({"a", "b"}, 8), FormatError);
}

TEST(PromptEncoderTest, TableRowsAreOrthonormalAndFrozen) {
  Rng rng(1);
  PromptEncoder<double> e(9, 16, rng);
  EXPECT_FALSE(e.table.trainable);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 9; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < 16; ++k) dot += e.table.value[i * 16 + k] * e.table.value[j * 16 + k];
      EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-12);
    }
  Tape<double> tp;
  EXPECT_FALSE(tp.param(e.table).requires_grad());
}

TEST(PromptEncoderTest, LookupRowsAndSharedTokens) {
  Model<float> m(ModelConfig{}, 3);
  const auto& v = m.vocab();
  const auto a = m.prompt_encoder().encode(v.encode_text("red circle"));
  const auto b = m.prompt_encoder().encode(v.encode_text("blue circle"));
  const auto pad = m.prompt_encoder().encode(v.null_prompt());
  EXPECT_EQ(a.shape(), (Shape{8, 64}));
  for (std::size_t j = 0; j < 64; ++j) {
    EXPECT_EQ(a[64 + j], b[64 + j]);
    EXPECT_EQ(a[j], m.prompt_encoder().table.value[std::size_t(v.id("red")) * 64 + j]);
    EXPECT_EQ(a[2 * 64 + j], pad[j]);
  }
  EXPECT_NE(a[0], b[0]);
}

TEST(ImageEncoderTest, DefaultGivesSixteenTokens) {
  const ConditionConfig c;
  EXPECT_EQ(c.image_len(), 16u);
  EXPECT_EQ(c.seq_len(), 24u);
  Model<float> m(ModelConfig{}, 3);
  Tape<float> tp(false);
  const auto z = m.encode_images(tp, tp.constant(Tensor<float>(Shape{2, 1, 16, 16}))).value();
  EXPECT_EQ(z.shape(), (Shape{2, 16, 64}));
  // All-zero input twice: identical output.
  Tape<float> tp2(false);
  EXPECT_EQ(m.encode_images(tp2, tp2.constant(Tensor<float>(Shape{2, 1, 16, 16}))).value(), z);
  EXPECT_THROW(m.encode_images(tp, tp.constant(Tensor<float>(Shape{1, 1, 12, 12}))), ShapeError);
}

TEST(ImageEncoderTest, SensitiveToTranslation) {
  Model<float> m(ModelConfig{}, 4);
  Tape<float> tp(false);
  const SceneSpec a{ShapeKind::square, ColorName::red, 4, 7, 3};
  SceneSpec b = a;
  b.cx += 7;
  const auto z = m.encode_images(tp, tp.constant(layout_batch({a, b}))).value();
  Tensor<float> za(Shape{16, 64}, std::vector<float>(z.vec().begin(), z.vec().begin() + 1024));
  Tensor<float> zb(Shape{16, 64}, std::vector<float>(z.vec().begin() + 1024, z.vec().end()));
  EXPECT_GT(l2(za, zb), 0.0);
}

TEST(ImageEncoderTest, WidePresetWidths) {
  const auto c = ConditionConfig::wide();
  EXPECT_EQ(c.d_embed, 768u);
  EXPECT_EQ(c.fusion_layers, 6u);
  EXPECT_EQ(c.fusion_heads, 8u);
  EXPECT_EQ(c.fusion_hidden, 3072u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Fusion, ShapeNullAndOrderSensitivity) {
  Model<float> m(ModelConfig{}, 5);
  Tape<float> tp(false);
  const auto& v = m.vocab();
  Var<float> zp = m.encode_prompts(tp, {v.encode_text("green triangle")});
  Var<float> zx = m.encode_images(tp, tp.constant(layout_batch({{ShapeKind::triangle, ColorName::green, 8, 8, 4}})));
  Var<float> zphi = reshape(m.z_phi(tp), Shape{1, 16, 64});
  const auto z = m.fuse(tp, zp, zx).value();
  EXPECT_EQ(z.shape(), (Shape{1, 24, 64}));
  EXPECT_EQ(m.null_image().value.shape(), (Shape{16, 64}));
  EXPECT_GT(l2_distance(z, m.fuse(tp, zp, zphi).value()), 0.0f);

  // Swapping the first 8 image tokens with the text block keeps the
  // multiset of input rows but not their positions.
  Var<float> zx_head = reshape(zx, Shape{1, 16, 64});
  auto xs = zx_head.value();
  Tensor<float> head(Shape{1, 8, 64}, std::vector<float>(xs.vec().begin(), xs.vec().begin() + 512));
  Tensor<float> tail(Shape{1, 8, 64}, std::vector<float>(xs.vec().begin() + 512, xs.vec().end()));
  Var<float> swapped_x = concat<float>({zp, tp.constant(tail)}, 1);
  const auto z2 = m.fuse(tp, tp.constant(head), swapped_x).value();
  EXPECT_GT(l2_distance(z, z2), 0.0f);
  EXPECT_THROW(m.fuse(tp, zp, zp), ShapeError);
}

TEST(Dropout, RatesMatchProbabilities) {
  Rng rng(2024);
  const auto flags = draw_condition_dropout(rng, 100000, 0.1, 0.6);
  double t = 0, x = 0, both = 0;
  for (const auto& f : flags) {
    t += f.text;
    x += f.image;
    both += f.text && f.image;
  }
  EXPECT_NEAR(t / 1e5, 0.1, 0.005);
  EXPECT_NEAR(x / 1e5, 0.6, 0.005);
  EXPECT_NEAR(both / 1e5, 0.06, 0.005);
}

TEST(Dropout, BoundaryProbabilities) {
  Rng rng(1);
  for (const auto& f : draw_condition_dropout(rng, 1000, 0.0, 0.0)) EXPECT_FALSE(f.text || f.image);
  for (const auto& f : draw_condition_dropout(rng, 1000, 1.0, 1.0)) EXPECT_TRUE(f.text && f.image);
  EXPECT_THROW(draw_condition_dropout(rng, 1, 1.5, 0.0), DomainError);
}

TEST(Dropout, AppliesNullBlocksPerSample) {
  Rng rng(9);
  Tape<double> tp(false);
  Var<double> zp = tp.constant(Tensor<double>(Shape{64, 2, 3}, 1.0));
  Var<double> zx = tp.constant(Tensor<double>(Shape{64, 4, 3}, 2.0));
  Var<double> tn = tp.constant(Tensor<double>(Shape{2, 3}, -1.0));
  Var<double> phi = tp.constant(Tensor<double>(Shape{4, 3}, -2.0));
  const auto r = apply_condition_dropout(zp, zx, tn, phi, rng, 0.5, 0.5);
  for (std::size_t b = 0; b < 64; ++b) {
    EXPECT_EQ(r.z_p.value()[b * 6], r.flags[b].text ? -1.0 : 1.0);
    EXPECT_EQ(r.z_x.value()[b * 12 + 11], r.flags[b].image ? -2.0 : 2.0);
  }
}
