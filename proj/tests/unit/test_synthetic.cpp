#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "test_util.hpp"

using namespace cobit;

namespace {

bool has_word(const std::string& caption, const std::string& word) {
  std::istringstream is(caption);
  for (std::string w; is >> w;)
    if (w == word) return true;
  return false;
}

/// Uniform noise with standard deviation sigma, clamped to [0, 1].
RawImage with_noise(RawImage img, double sigma, Pcg32& rng) {
  const double half = sigma * std::sqrt(3.0);
  for (auto& p : img.pixels) p = std::clamp(float(p + rng.uniform(-half, half)), 0.f, 1.f);
  return img;
}

}  // namespace

TEST(Scenes, FieldFrequenciesAreUniform) {
  Pcg32 rng(1, 1);
  std::array<int, 4> shapes{}, colors{};
  std::array<int, 5> positions{};
  std::array<int, 2> sizes{};
  for (int i = 0; i < 10000; ++i) {
    const ShapeScene s = generate_scene(rng);
    ++shapes[std::size_t(s.shape)], ++colors[std::size_t(s.color)];
    ++positions[std::size_t(s.position)], ++sizes[std::size_t(s.size)];
    ASSERT_GE(s.background, 0.f);
    ASSERT_LT(s.background, kMaxBackground);
  }
  for (int c : shapes) EXPECT_TRUE(c >= 2200 && c <= 2800) << c;
  for (int c : colors) EXPECT_TRUE(c >= 2200 && c <= 2800) << c;
  for (int c : positions) EXPECT_TRUE(c >= 1750 && c <= 2250) << c;
  for (int c : sizes) EXPECT_TRUE(c >= 4700 && c <= 5300) << c;
}

TEST(Scenes, SeededAndDistinctStreams) {
  Pcg32 a(5, 1), b(5, 1), c(6, 1);
  std::vector<ShapeScene> sa, sb, sc;
  for (int i = 0; i < 20; ++i) sa.push_back(generate_scene(a)), sb.push_back(generate_scene(b)), sc.push_back(generate_scene(c));
  EXPECT_EQ(sa, sb);
  EXPECT_NE(sa, sc);
  EXPECT_EQ(make_example(99, CaptionGrammar{}).caption, make_example(99, CaptionGrammar{}).caption);
}

TEST(Scenes, ComboIndexRoundTrips) {
  for (std::size_t c = 0; c < kSceneCombos; ++c) EXPECT_EQ(ShapeScene::from_combo(c).combo(), c);
}

TEST(Render, RedSquareAtTheCentre) {
  ShapeScene s;
  s.background = 0.125f;
  const RawImage img = render_scene(s);
  ASSERT_EQ(img.height, 32u);
  EXPECT_EQ(img.at(16, 16, 0), 1.f);
  EXPECT_EQ(img.at(16, 16, 1), 0.f);
  EXPECT_EQ(img.at(16, 16, 2), 0.f);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(img.at(0, 0, c), 0.125f);
  // Small half extent 4: pixel centres 12.5 .. 19.5 on both axes.
  std::size_t red = 0;
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const bool inside = y >= 12 && y <= 19 && x >= 12 && x <= 19;
      EXPECT_EQ(img.at(y, x, 0) == 1.f, inside) << y << "," << x;
      red += inside;
    }
  EXPECT_EQ(red, 64u);
  EXPECT_EQ(render_scene(s), img);
}

TEST(Render, ShapesCoverTheExpectedAreas) {
  auto area = [](ShapeKind k, SizeKind z) {
    ShapeScene s;
    s.shape = k;
    s.size = z;
    s.color = Color::blue;
    const RawImage img = render_scene(s);
    std::size_t n = 0;
    for (std::size_t i = 0; i < 32 * 32; ++i) n += img.pixels[i * 3 + 2] == 1.f;
    return n;
  };
  EXPECT_EQ(area(ShapeKind::square, SizeKind::large), 14u * 14u);
  // Circle of radius 7 covers about pi * 49 pixels; triangle half the square.
  EXPECT_NEAR(double(area(ShapeKind::circle, SizeKind::large)), M_PI * 49, 12);
  EXPECT_NEAR(double(area(ShapeKind::triangle, SizeKind::large)), 14 * 14 / 2.0, 14);
  EXPECT_LT(area(ShapeKind::cross, SizeKind::large), area(ShapeKind::square, SizeKind::large));
  EXPECT_LT(area(ShapeKind::circle, SizeKind::small), area(ShapeKind::circle, SizeKind::large));
}

TEST(Captions, NameTheColourAndShape) {
  const CaptionGrammar g;
  Pcg32 rng(2, 2);
  std::set<std::size_t> templates_seen;
  for (int i = 0; i < 2000; ++i) {
    const ShapeScene s = generate_scene(rng);
    const std::string cap = caption_scene(s, g, rng);
    EXPECT_TRUE(has_word(cap, name(s.color))) << cap;
    EXPECT_TRUE(has_word(cap, name(s.shape))) << cap;
    for (std::size_t t = 0; t < g.templates.size(); ++t)
      if (cap == g.fill(t, s)) templates_seen.insert(t);
  }
  EXPECT_EQ(templates_seen.size(), g.templates.size());
}

TEST(Captions, LargeCorpusUsesExactlyTheGrammarWords) {
  const CaptionGrammar g;
  const TextVocab closed = build_text_vocab(g.enumerate());
  std::vector<std::string> corpus;
  for (const auto& e : make_examples(1, 100000, g)) corpus.push_back(e.caption);
  const TextVocab v = build_text_vocab(corpus);
  std::set<std::string> a(v.tokens().begin(), v.tokens().end()), b(closed.tokens().begin(), closed.tokens().end());
  EXPECT_EQ(a, b);
}

TEST(Oracle, RecoversEveryCleanRendering) {
  // 160 combinations on the darkest and a light background.
  for (float bg : {0.f, 0.2f})
    for (std::size_t c = 0; c < kSceneCombos; ++c) {
      const ShapeScene s = ShapeScene::from_combo(c, bg);
      const auto [shape, color] = classify_rendering(render_scene(s));
      EXPECT_EQ(shape, s.shape) << c << " bg " << bg;
      EXPECT_EQ(color, s.color) << c << " bg " << bg;
    }
}

TEST(Oracle, ToleratesUniformNoise) {
  Pcg32 rng(3, 3);
  int correct = 0;
  for (int i = 0; i < 1000; ++i) {
    const ShapeScene s = generate_scene(rng);
    const auto [shape, color] = classify_rendering(with_noise(render_scene(s), 0.05, rng));
    correct += shape == s.shape && color == s.color;
  }
  EXPECT_GE(correct, 990);
}

TEST(Oracle, SurvivesTheTrainedCodebook) {
  const RunConfig cfg;
  const World w = make_world(cfg);
  int wrong = 0;
  for (float bg : {0.f, 0.2f})
    for (std::size_t c = 0; c < kSceneCombos; ++c) {
      const ShapeScene s = ShapeScene::from_combo(c, bg);
      const auto [shape, color] = classify_rendering(dequantize(w.codebook, quantize_image(w.codebook, render_scene(s))));
      wrong += shape != s.shape || color != s.color;
    }
  EXPECT_EQ(wrong, 0);
  EXPECT_THROW(classify_rendering(RawImage(16, 16)), ShapeError);
}

TEST(Manifest, RoundTrips) {
  const auto path = (std::filesystem::temp_directory_path() / "cobit_manifest_test.txt").string();
  const auto ex = make_examples(10, 50, CaptionGrammar{});
  write_manifest(ex, path);
  const auto back = read_manifest(path);
  ASSERT_EQ(back.size(), ex.size());
  for (std::size_t i = 0; i < ex.size(); ++i) {
    EXPECT_EQ(back[i].seed, ex[i].seed);
    EXPECT_EQ(back[i].scene, ex[i].scene);
    EXPECT_EQ(back[i].caption, ex[i].caption);
  }
  {
    std::ofstream out(path);
    out << "1 hexagon red center small 0 the red hexagon\n";
  }
  EXPECT_THROW(read_manifest(path), FormatError);
  std::filesystem::remove(path);
}
