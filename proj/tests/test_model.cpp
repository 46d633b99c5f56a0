#include <gtest/gtest.h>

#include <filesystem>

#include "v2xvlm/model.hpp"
#include "v2xvlm/scenario.hpp"
#include "v2xvlm/verify.hpp"

using namespace v2x;

namespace {

Image solid(std::size_t h, std::size_t w, std::uint8_t v) { return Image(h, w, 3, v); }

Image noise_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Image img(h, w, 3);
  Rng rng(seed);
  for (auto& px : img.data) px = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

ModelConfig small_config() {
  ModelConfig c;
  c.d = 64;
  c.heads = 4;
  c.patch = 8;
  c.img_height = 16;
  c.img_max_width = 32;
  return c;
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::usage_error;
}

}  // namespace

TEST(ConcatViews, ShapeAndLeftBlock) {
  const Image v = noise_image(64, 96, 1);
  const Image i = noise_image(64, 96, 2);
  const Image c = concat_views(v, i);
  EXPECT_EQ(c.height, 64u);
  EXPECT_EQ(c.width, 192u);
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t col = 0; col < 96; ++col)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        ASSERT_EQ(c.at(r, col, ch), v.at(r, col, ch));
        ASSERT_EQ(c.at(r, col + 96, ch), i.at(r, col, ch));
      }
}

TEST(ConcatViews, VehicleOnlyAndErrors) {
  const Image v = noise_image(64, 96, 1);
  EXPECT_EQ(concat_views(v, Image(64, 0, 3)), v);
  EXPECT_EQ(code_of([&] { concat_views(v, solid(32, 96, 0)); }), Errc::height_mismatch);
  EXPECT_EQ(code_of([&] { concat_views(v, Image(64, 96, 1)); }), Errc::channel_mismatch);
}

TEST(EncodeImage, ShapeContract) {
  const ModelConfig c = small_config();
  const Model m(c, 0);
  const auto e = encode_image(noise_image(16, 32, 3), m);
  EXPECT_EQ(e.tokens.rows(), 8u);
  EXPECT_EQ(e.tokens.cols(), 64u);
  EXPECT_EQ(e.z.size(), c.d_prime);
}

TEST(EncodeImage, DeterministicAndContentSensitive) {
  const Model m(small_config(), 0);
  const Image img = noise_image(16, 32, 4);
  EXPECT_EQ(encode_image(img, m).z, encode_image(img, m).z);
  const auto z0 = encode_image(solid(16, 32, 0), m).z;
  const auto z1 = encode_image(solid(16, 32, 255), m).z;
  double dist = 0;
  for (std::size_t i = 0; i < z0.size(); ++i) dist += (z0[i] - z1[i]) * (z0[i] - z1[i]);
  EXPECT_GT(dist, 0.0);
}

TEST(EncodeImage, IndivisibleGrid) {
  const Model m(small_config(), 0);
  EXPECT_EQ(code_of([&] { encode_image(noise_image(16, 30, 1), m); }), Errc::indivisible_patch_grid);
}

TEST(EncodeImage, DoublingWidthDoublesTokens) {
  const ModelConfig c = small_config();
  const Model m(c, 0);
  EXPECT_EQ(encode_image(noise_image(16, 16, 1), m).tokens.rows() * 2,
            encode_image(noise_image(16, 32, 1), m).tokens.rows());
}

TEST(EncodeText, ShapeDeterminismAndDistinctPrompts) {
  const Model m(ModelConfig::student(), 0);
  const auto& vocab = Vocabulary::instance();
  const auto p1 = vocab.tokenize("plan the future trajectory to go straight through the intersection .");
  const auto p2 = vocab.tokenize("plan the future trajectory to turn left at the intersection .");
  const auto a = encode_text(p1, m);
  EXPECT_EQ(a.tokens.rows(), p1.ids.size());
  EXPECT_EQ(a.h.size(), m.config().d_prime);
  EXPECT_EQ(a.h, encode_text(p1, m).h);
  EXPECT_NE(a.h, encode_text(p2, m).h);
}

TEST(EncodeText, Errors) {
  const Model m(ModelConfig::student(), 0);
  EXPECT_EQ(code_of([&] { encode_text(PromptTokens{}, m); }), Errc::empty_prompt);
  EXPECT_EQ(code_of([&] { encode_text(PromptTokens{{1, 9999}}, m); }), Errc::unknown_token_id);
}

TEST(Forward, ShapeDeterminismAndOrderSensitivity) {
  const Model m(ModelConfig::student(), 0);
  const auto s = generate_scene(Maneuver::left_turn, 3);
  const auto p = Vocabulary::instance().tokenize(s.prompt.full_text());
  const auto out = m.forward(s.vehicle, s.infra, p);
  EXPECT_EQ(out.logits.rows(), 2 * m.config().horizon);
  EXPECT_EQ(out.logits.cols(), 131u);
  EXPECT_TRUE(out.logits.all_finite());
  EXPECT_EQ(out.logits, m.forward(s.vehicle, s.infra, p).logits);
  PromptTokens rev = p;
  std::reverse(rev.ids.begin(), rev.ids.end());
  EXPECT_NE(out.logits, m.forward(s.vehicle, s.infra, rev).logits);
}

TEST(Tokenize, ZeroTrajectoryUsesCenterBin) {
  const ModelConfig c;
  const auto t = tokenize_trajectory(Trajectory(3, {0.0, 0.0}), c);
  ASSERT_EQ(t.ids.size(), 8u);
  EXPECT_EQ(t.ids.front(), c.bos());
  EXPECT_EQ(t.ids.back(), c.eos());
  for (std::size_t i = 1; i + 1 < t.ids.size(); ++i) EXPECT_EQ(t.ids[i], 64u);
}

TEST(Tokenize, RoundTripWithinHalfBin) {
  const ModelConfig c;
  const Trajectory t{{1.0, -2.0}, {2.0, -4.0}};
  const auto back = detokenize_trajectory(tokenize_trajectory(t, c), c);
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_LE(std::abs(back[i].x - t[i].x), 0.25);
    EXPECT_LE(std::abs(back[i].y - t[i].y), 0.25);
  }
  Rng rng(17);
  for (int k = 0; k < 1000; ++k) {
    Trajectory r(9);
    for (auto& w : r) w = {rng.uniform(-32.0, 32.0), rng.uniform(-32.0, 32.0)};
    const auto b = detokenize_trajectory(tokenize_trajectory(r, c), c);
    for (std::size_t i = 0; i < r.size(); ++i) {
      ASSERT_LE(std::abs(b[i].x - r[i].x), 0.25 + 1e-12);
      ASSERT_LE(std::abs(b[i].y - r[i].y), 0.25 + 1e-12);
    }
  }
}

TEST(Tokenize, Errors) {
  const ModelConfig c;
  EXPECT_EQ(code_of([&] { tokenize_trajectory({{32.0, 0.0}}, c); }), Errc::out_of_range_coordinate);
  EXPECT_EQ(code_of([&] { tokenize_trajectory({{0.0, -32.5}}, c); }), Errc::out_of_range_coordinate);
  auto t = tokenize_trajectory({{1.0, 1.0}}, c);
  t.ids.pop_back();
  EXPECT_EQ(code_of([&] { detokenize_trajectory(t, c); }), Errc::malformed_token_sequence);
  auto odd = tokenize_trajectory({{1.0, 1.0}}, c);
  odd.ids.insert(odd.ids.begin() + 1, 3);
  EXPECT_EQ(code_of([&] { detokenize_trajectory(odd, c); }), Errc::malformed_token_sequence);
}

TEST(GreedyDecode, PicksCoordinateArgmax) {
  ModelConfig c;
  c.horizon = 1;
  Matrix logits(2, c.vocab_coord(), 0.0);
  logits(0, 10) = 5.0;
  logits(0, c.eos()) = 9.0;  // special tokens are never emitted mid-sequence
  logits(1, 100) = 1.0;
  const auto t = greedy_decode(logits, c);
  EXPECT_EQ(t.ids, (std::vector<std::size_t>{c.bos(), 10, 100, c.eos()}));
}

TEST(Checkpoint, RoundTripAtFloatPrecision) {
  const Model m(ModelConfig::student(), 5);
  const auto path = std::filesystem::temp_directory_path() / "v2xvlm_ckpt_test.bin";
  save_checkpoint(path.string(), m);
  const Model back = load_checkpoint(path.string());
  Model rounded = m;
  round_to_float(rounded);
  EXPECT_EQ(back.config(), m.config());
  EXPECT_TRUE(back.params() == rounded.params());
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsBadMagic) {
  const auto path = std::filesystem::temp_directory_path() / "v2xvlm_ckpt_bad.bin";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE0000";
  }
  EXPECT_EQ(code_of([&] { load_checkpoint(path.string()); }), Errc::bad_magic);
  std::filesystem::remove(path);
}

TEST(ModelGradcheck, TinyConfigTotalObjective) {
  const auto r = verify::model_gradcheck(50, 0);
  EXPECT_TRUE(r.pass) << r.worst << " " << r.detail;
}
