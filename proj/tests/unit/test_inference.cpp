#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include "test_util.hpp"

using namespace cobit;

namespace {

/// Upper-tail p-value of Pearson's statistic for observed counts against
/// expected probabilities.
double chi_square_p(const std::vector<std::size_t>& counts, const std::vector<double>& probs) {
  std::size_t n = 0;
  for (auto c : counts) n += c;
  double stat = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = probs[i] * double(n);
    stat += (double(counts[i]) - e) * (double(counts[i]) - e) / e;
  }
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared(double(counts.size() - 1)), stat));
}

struct Fixture {
  ModelConfig cfg;
  TextVocab vocab;
  Codebook codebook;
  std::unique_ptr<CobitModel<float>> model;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.cfg = cobit::testing::small_run().model;
    x.cfg.init_std = 0.2;  // sharper logits, so samples vary with the prefix
    x.vocab = build_text_vocab(CaptionGrammar{}.enumerate());
    x.cfg.text_vocab = x.vocab.size();
    std::vector<RawImage> imgs;
    for (const auto& e : make_examples(1, 64, CaptionGrammar{})) imgs.push_back(render_scene(e.scene));
    x.codebook = train_codebook(imgs, x.cfg.codebook_size, 3, x.cfg.patch_size, 4).codebook;
    x.model = std::make_unique<CobitModel<float>>(x.cfg);
    return x;
  }();
  return f;
}

}  // namespace

TEST(Cfg, EndpointsReturnTheBranchExactly) {
  const std::vector<float> c{1.5f, -0.f, 3.f}, u{0.f, 0.f, -2.f};
  const auto one = cfg_interpolate<float>(c, u, 1.0), zero = cfg_interpolate<float>(c, u, 0.0);
  EXPECT_TRUE(cobit::testing::bit_equal(one, c));
  EXPECT_TRUE(cobit::testing::bit_equal(zero, u));
  EXPECT_TRUE(std::signbit(one[1]));
  const auto two = cfg_interpolate<float>(c, u, 2.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_FLOAT_EQ(two[i], 2 * c[i] - u[i]);
  EXPECT_THROW(cfg_interpolate<float>(c, std::vector<float>{1.f}, 2.0), ShapeError);
}

TEST(TopK, KEqualOneIsArgmaxWithLowestIdOnTies) {
  const std::vector<float> x{0.f, 3.f, 1.f, 3.f};
  Pcg32 rng(1, 1), mirror(1, 1);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(top_k_sample<float>(x, 1, rng), 1);
  for (int i = 0; i < 10; ++i) (void)mirror.uniform();
  EXPECT_EQ(rng.state_bytes(), mirror.state_bytes());  // one draw per call, even for k = 1
  EXPECT_EQ(argmax_lowest<float>(x), 1);
  EXPECT_THROW(top_k_sample<float>(x, 0, rng), Error);
  EXPECT_THROW(top_k_sample<float>(x, 5, rng), Error);
}

TEST(TopK, UniformLogitsWithFullKAreUniform) {
  const std::vector<float> x(10, 0.5f);
  Pcg32 rng(2, 2);
  std::vector<std::size_t> counts(10, 0);
  for (int i = 0; i < 10000; ++i) ++counts[std::size_t(top_k_sample<float>(x, 10, rng))];
  EXPECT_GT(chi_square_p(counts, std::vector<double>(10, 0.1)), 0.01);
}

TEST(TopK, EqualLogitsKeepTheLowestIds) {
  const std::vector<float> x(10, 0.5f);
  Pcg32 rng(5, 5);
  std::vector<std::size_t> counts(4, 0);
  for (int i = 0; i < 10000; ++i) {
    const int id = top_k_sample<float>(x, 4, rng);
    ASSERT_LT(id, 4);
    ++counts[std::size_t(id)];
  }
  EXPECT_GT(chi_square_p(counts, {0.25, 0.25, 0.25, 0.25}), 0.01);
}

TEST(TopK, FrequenciesFollowTheRenormalisedSoftmax) {
  // Top three carry weights 3 : 2 : 1; the rest are cut off.
  const std::vector<double> x{std::log(2.0), -5.0, std::log(3.0), 0.0, -1.0};
  Pcg32 rng(3, 3);
  std::vector<std::size_t> counts(5, 0);
  for (int i = 0; i < 60000; ++i) ++counts[std::size_t(top_k_sample<double>(x, 3, rng))];
  EXPECT_EQ(counts[1] + counts[4], 0u);
  EXPECT_GT(chi_square_p({counts[2], counts[0], counts[3]}, {0.5, 1.0 / 3, 1.0 / 6}), 0.01);
}

TEST(TopK, DominantLogitAlmostAlwaysWins) {
  std::vector<float> x(50, 0.f);
  x[17] = 30.f;
  Pcg32 rng(4, 4);
  int hits = 0;
  for (int i = 0; i < 10000; ++i) hits += top_k_sample<float>(x, 50, rng) == 17;
  EXPECT_GE(hits, 9999);
}

TEST(Generate, IncrementalSamplerMatchesFullRecompute) {
  const Fixture& f = fixture();
  for (double alpha : {0.0, 1.0, 2.0}) {
    const SamplerConfig s{8, 3, 11, alpha};
    const auto fast = generate_image(*f.model, f.vocab, f.codebook, "a large green circle at the top-right", s);
    const auto slow = generate_image_naive(*f.model, f.vocab, f.codebook, "a large green circle at the top-right", s);
    ASSERT_EQ(fast.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(fast[i].grid, slow[i].grid) << "alpha " << alpha << " sample " << i;
      EXPECT_EQ(fast[i].image, slow[i].image);
    }
  }
}

TEST(Generate, SamplesAreSeededPerIndex) {
  const Fixture& f = fixture();
  const auto a = generate_image(*f.model, f.vocab, f.codebook, "the red cross", SamplerConfig{8, 3, 5, 2.0});
  const auto b = generate_image(*f.model, f.vocab, f.codebook, "the red cross", SamplerConfig{8, 3, 5, 2.0});
  const auto two = generate_image(*f.model, f.vocab, f.codebook, "the red cross", SamplerConfig{8, 2, 5, 2.0});
  const auto other = generate_image(*f.model, f.vocab, f.codebook, "the red cross", SamplerConfig{8, 3, 6, 2.0});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a[i].grid, b[i].grid);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a[i].grid, two[i].grid);  // independent of the batch size
  EXPECT_NE(a[0].grid, a[1].grid);
  EXPECT_NE(a[0].grid, other[0].grid);
}

TEST(Generate, ImagesAreCodebookRenderings) {
  const Fixture& f = fixture();
  for (const auto& g : generate_image(*f.model, f.vocab, f.codebook, "the blue square", SamplerConfig{8, 2, 1, 2.0})) {
    EXPECT_EQ(g.image, dequantize(f.codebook, g.grid));
    EXPECT_EQ(quantize_image(f.codebook, g.image), g.grid);
  }
  SamplerConfig bad{0, 1, 1, 2.0};
  EXPECT_THROW(generate_image(*f.model, f.vocab, f.codebook, "the blue square", bad), Error);
}

TEST(Caption, GreedyBatchMatchesPerImageFullRecompute) {
  const Fixture& f = fixture();
  Pcg32 rng(7, 7);
  std::vector<RawImage> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(render_scene(generate_scene(rng)));
  std::vector<const RawImage*> ptrs;
  for (const auto& i : imgs) ptrs.push_back(&i);
  const auto batched = generate_caption_ids(*f.model, ptrs);
  ASSERT_EQ(batched.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(batched[i], generate_caption_ids_naive(*f.model, imgs[i])) << i;
    EXPECT_EQ(batched[i].ids[0], kBos);
    EXPECT_LE(batched[i].ids.size(), f.cfg.max_text_len);
  }
  EXPECT_EQ(generate_captions(*f.model, f.vocab, ptrs, 2), generate_captions(*f.model, f.vocab, ptrs, 100));
}

TEST(Embeddings, ChunkingDoesNotChangeResults) {
  const Fixture& f = fixture();
  Pcg32 rng(8, 8);
  std::vector<RawImage> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(render_scene(generate_scene(rng)));
  std::vector<const RawImage*> ptrs;
  for (const auto& i : imgs) ptrs.push_back(&i);
  EXPECT_TRUE(cobit::testing::bit_equal(image_embeddings(*f.model, ptrs, 2).values(),
                                        image_embeddings(*f.model, ptrs, 64).values()));
  const std::vector<std::string> texts{"the red square", "a photo of a blue cross", "the green circle"};
  const Tensor<float> t = text_embeddings(*f.model, f.vocab, texts);
  for (std::size_t i = 0; i < 3; ++i) {
    double n = 0;
    for (std::size_t e = 0; e < f.cfg.dim; ++e) n += double(t[i * f.cfg.dim + e]) * t[i * f.cfg.dim + e];
    EXPECT_NEAR(n, 1.0, 1e-5);
  }
}

TEST(Rerank, PicksTheBestScoringCandidate) {
  const Fixture& f = fixture();
  const RawImage a = render_scene(ShapeScene{}), b = render_scene(ShapeScene::from_combo(77, 0.1f));
  EXPECT_EQ(rerank_images(*f.model, f.vocab, "the red square", {&a}), 0u);
  EXPECT_EQ(rerank_images(*f.model, f.vocab, "the red square", {&a, &a}), 0u);
  const auto s = similarity(image_embeddings(*f.model, {&a, &b}), text_embeddings(*f.model, f.vocab, {"the red square"}));
  EXPECT_EQ(rerank_images(*f.model, f.vocab, "the red square", {&a, &b}), s[1] > s[0] ? 1u : 0u);
  EXPECT_THROW(rerank_images(*f.model, f.vocab, "x", {}), Error);
}

TEST(Classify, CraftedEmbeddingsAndClassNames) {
  const Tensor<double> classes({3, 2}, {1, 0, 0, 1, -1, 0});
  const Tensor<double> images({4, 2}, {0.9, 0.1, 0.1, 0.9, -1, 0.05, 0.7071, 0.7071});
  EXPECT_EQ(classify_embeddings(images, classes), (std::vector<std::size_t>{0, 1, 2, 0}));
  const auto names = shape_color_classes();
  ASSERT_EQ(names.size(), 16u);
  for (std::size_t c = 0; c < kSceneCombos; ++c) {
    const ShapeScene s = ShapeScene::from_combo(c);
    EXPECT_EQ(names[s.label()], std::string(name(s.color)) + " " + name(s.shape));
  }
  EXPECT_THROW(PromptTemplateSet{{"no slot"}}.validate(), Error);
  EXPECT_EQ(PromptTemplateSet{}.fill(0, "red square"), "a photo of a red square");
}

TEST(Retrieve, RanksByCosineWithStableTies) {
  const Tensor<double> g({3, 2}, {1, 0, 0, 1, 1, 0});  // items 0 and 2 tie
  const Tensor<double> q({2, 2}, {1, 0, 0.6, 0.8});
  const auto r = retrieve(q, g, [](std::size_t qi, std::size_t item) { return qi == 0 ? item == 2 : item == 1; });
  EXPECT_EQ(r.ranked[0], (std::vector<std::size_t>{0, 2, 1}));
  EXPECT_EQ(r.ranked[1], (std::vector<std::size_t>{1, 0, 2}));
  EXPECT_EQ(r.first_hit, (std::vector<std::size_t>{1, 0}));
  EXPECT_DOUBLE_EQ(r.recall_at(1), 0.5);
  EXPECT_DOUBLE_EQ(r.recall_at(2), 1.0);
  const auto none = retrieve(q, g, [](std::size_t, std::size_t) { return false; });
  EXPECT_EQ(none.first_hit, (std::vector<std::size_t>{3, 3}));
  EXPECT_DOUBLE_EQ(none.recall_at(3), 0.0);
}

TEST(Retrieve, SimilarityIsTheDotProduct) {
  const Tensor<float> a({2, 3}, {1, 2, 3, -1, 0, 1}), b({1, 3}, {0.5f, 0.25f, -1});
  EXPECT_EQ(similarity(a, b), (std::vector<double>{-2.0, -1.5}));
  EXPECT_THROW(similarity(a, Tensor<float>({1, 2}, {1, 2})), ShapeError);
}
