#include "test_util.hpp"

using namespace attnmod;
using testutil::TempDir;

namespace {

std::vector<ModelInput> encode_all(const std::vector<std::string>& texts) {
  const auto tok = Tokenizer::bytes();
  std::vector<ModelInput> out;
  for (const auto& t : texts) out.emplace_back(TokenSequence{tok.encode(t), PositionSpec::last()});
  return out;
}

const std::vector<std::string> kPositives{"red apples", "a red car", "red red red", "crimson and red"};
const std::vector<std::string> kNegatives{"green apples", "a blue car", "blue blue", "teal and green"};

}  // namespace

TEST(DiffMeans, IdenticalSetsGiveZeroVector) {
  const auto model = testutil::tiny_causal_model();
  const auto in = encode_all(kPositives);
  const auto msg = testutil::error_message_of([&] { concept_diff_means(model, in, in); });
  EXPECT_NE(msg.find("zero concept vector"), std::string::npos) << msg;
}

TEST(DiffMeans, SinglePromptEqualsItsResidual) {
  const auto model = testutil::tiny_causal_model();
  const auto in = encode_all({"only one"});
  for (int layer = 1; layer <= model.n_layers(); ++layer) {
    const auto v = concept_diff_means(model, in, {}, layer, PositionSpec::last());
    const auto r = residual_at(model, in[0], layer);
    EXPECT_TRUE(std::equal(v.values().begin(), v.values().end(), r.begin(), r.end())) << "layer " << layer;
  }
}

// Independent average over traced r_l values.
TEST(DiffMeans, MatchesTraceAverage) {
  const auto model = testutil::tiny_causal_model();
  const auto pos = encode_all({"first prompt", "second one"});
  const auto neg = encode_all({"third"});
  const int layer = 2;
  const auto v = concept_diff_means(model, pos, neg, layer, PositionSpec::last());
  const auto t0 = forward_traced(model, pos[0]).trace.layers[layer - 1].r_post;
  const auto t1 = forward_traced(model, pos[1]).trace.layers[layer - 1].r_post;
  const auto t2 = forward_traced(model, neg[0]).trace.layers[layer - 1].r_post;
  for (int i = 0; i < model.d_model(); ++i) {
    const double expect = (static_cast<double>(t0[static_cast<size_t>(i)]) + t1[static_cast<size_t>(i)]) / 2.0 - t2[static_cast<size_t>(i)];
    EXPECT_NEAR(v.values()[static_cast<size_t>(i)], expect, 1e-6);
  }
}

TEST(DiffMeans, FinalLayerReadsBeforeFinalNorm) {
  const auto model = testutil::tiny_causal_model();
  const auto in = encode_all({"abc"});
  const auto v = concept_diff_means(model, in, {});
  const auto traced = forward_traced(model, in[0]);
  EXPECT_TRUE(std::equal(v.values().begin(), v.values().end(), traced.trace.final_residual.begin()));
  EXPECT_EQ(v.source().layer, model.n_layers());
}

TEST(DiffMeans, SwapNegatesExactly) {
  const auto model = testutil::tiny_causal_model();
  const auto p = encode_all(kPositives), n = encode_all(kNegatives);
  for (int layer = 1; layer <= model.n_layers(); ++layer) {
    const auto a = concept_diff_means(model, p, n, layer, PositionSpec::last());
    const auto b = concept_diff_means(model, n, p, layer, PositionSpec::last());
    for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.values()[i], -b.values()[i]);
  }
}

TEST(DiffMeans, EmptyNegativesIsPositiveMean) {
  const auto model = testutil::tiny_causal_model();
  const auto p = encode_all(kPositives);
  const auto v = concept_diff_means(model, p, {}, 2, PositionSpec::last());
  std::vector<double> mean(static_cast<size_t>(model.d_model()), 0.0);
  for (const auto& in : p) {
    const auto r = residual_at(model, in, 2);
    for (size_t i = 0; i < mean.size(); ++i) mean[i] += r[i];
  }
  for (size_t i = 0; i < mean.size(); ++i) EXPECT_EQ(v.values()[i], static_cast<float>(mean[i] / 4.0));
}

TEST(DiffMeans, Errors) {
  const auto model = testutil::tiny_causal_model();
  const auto p = encode_all(kPositives);
  EXPECT_EQ(testutil::error_kind_of([&] { concept_diff_means(model, {}, {}, 1, PositionSpec::last()); }), ErrorKind::data);
  EXPECT_EQ(testutil::error_kind_of([&] { concept_diff_means(model, p, {}, 0, PositionSpec::last()); }), ErrorKind::config);
  EXPECT_EQ(testutil::error_kind_of([&] { concept_diff_means(model, p, {}, 4, PositionSpec::last()); }), ErrorKind::config);
}

TEST(Unembedding, IdentityRowsGiveBasisVectors) {
  auto model = testutil::tiny_vit_model();
  Tensor eye({model.config.n_classes, model.d_model()});
  for (int c = 0; c < model.config.n_classes; ++c) eye.data[static_cast<size_t>(c * model.d_model() + c)] = 1.0f;
  model.unembed_w = std::make_shared<const Tensor>(std::move(eye));
  for (int c = 0; c < model.config.n_classes; ++c) {
    const auto v = concept_from_unembedding(model, c);
    for (int i = 0; i < model.d_model(); ++i) EXPECT_EQ(v.values()[static_cast<size_t>(i)], i == c ? 1.0f : 0.0f);
    EXPECT_EQ(v.norm(), 1.0);
  }
}

TEST(Unembedding, BitExactRowCopy) {
  const auto model = testutil::tiny_vit_model();
  const auto v = concept_from_unembedding(model, 4);
  const auto row = model.unembed_w->row(4);
  EXPECT_EQ(std::memcmp(v.values().data(), row.data(), row.size() * sizeof(float)), 0);
}

TEST(Unembedding, Errors) {
  const auto vit = testutil::tiny_vit_model();
  EXPECT_EQ(testutil::error_kind_of([&] { concept_from_unembedding(vit, vit.config.n_classes); }), ErrorKind::config);
  EXPECT_EQ(testutil::error_kind_of([&] { concept_from_unembedding(vit, -1); }), ErrorKind::config);
  const auto lm = testutil::tiny_causal_model();
  EXPECT_EQ(testutil::error_kind_of([&] { concept_from_unembedding(lm, 0); }), ErrorKind::config);
}

TEST(External, LoadsVerbatim) {
  TempDir dir;
  std::vector<float> values(768);
  std::mt19937_64 rng(3);
  for (auto& v : values) v = std::normal_distribution<float>()(rng);
  write_vector_file(dir / "v.bin", values);
  const auto v = concept_load_external(dir / "v.bin", 768);
  EXPECT_TRUE(std::equal(v.values().begin(), v.values().end(), values.begin(), values.end()));
  EXPECT_EQ(v.source().kind, ConceptSource::Kind::external);
}

TEST(External, LengthMismatch) {
  TempDir dir;
  write_vector_file(dir / "v.bin", std::vector<float>(767, 1.0f));
  const auto msg = testutil::error_message_of([&] { concept_load_external(dir / "v.bin", 768); });
  EXPECT_NE(msg.find("length mismatch"), std::string::npos) << msg;
}

TEST(External, ZeroAndNonFiniteRejected) {
  TempDir dir;
  write_vector_file(dir / "zero.bin", std::vector<float>(16, 0.0f));
  EXPECT_NE(testutil::error_message_of([&] { concept_load_external(dir / "zero.bin", 16); }).find("zero concept vector"),
            std::string::npos);
  std::vector<float> bad(16, 1.0f);
  bad[3] = std::numeric_limits<float>::quiet_NaN();
  write_vector_file(dir / "nan.bin", bad);
  EXPECT_EQ(testutil::error_kind_of([&] { concept_load_external(dir / "nan.bin", 16); }), ErrorKind::numeric);
}

TEST(Filter, FracOneKeepsOnlyArgmax) {
  const auto model = testutil::tiny_causal_model();
  const auto in = encode_all(kPositives);
  const auto v = concept_diff_means(model, in, encode_all(kNegatives));
  const auto res = filter_by_activation(model, in, v, 1.0, model.n_layers());
  const auto best = std::max_element(res.activations.begin(), res.activations.end()) - res.activations.begin();
  ASSERT_EQ(res.kept.size(), 1u);
  EXPECT_EQ(static_cast<ptrdiff_t>(res.kept[0]), best);
}

TEST(Filter, IdenticalCandidatesAllKept) {
  const auto model = testutil::tiny_causal_model();
  const auto in = encode_all({"same", "same", "same"});
  const ConceptVector v(std::vector<float>(static_cast<size_t>(model.d_model()), 1.0f), {});
  for (double frac : {0.1, 0.8, 1.0}) EXPECT_EQ(filter_by_activation(model, in, v, frac, 2).kept.size(), 3u);
}

// Independent projection oracle on 10 prompts.
TEST(Filter, MatchesBruteForceProjection) {
  const auto model = testutil::tiny_causal_model();
  std::vector<std::string> texts;
  for (int i = 0; i < 10; ++i) texts.push_back("prompt number " + std::to_string(i * 7));
  const auto in = encode_all(texts);
  std::mt19937_64 rng(4);
  std::vector<float> vv(static_cast<size_t>(model.d_model()));
  for (auto& x : vv) x = std::normal_distribution<float>()(rng);
  const ConceptVector v(vv, {});
  const int layer = 2;
  std::vector<double> proj;
  for (const auto& x : in) {
    const auto r = forward_traced(model, x).trace.layers[layer - 1].r_post;
    double dot = 0.0, nn = 0.0;
    for (size_t i = 0; i < r.size(); ++i) {
      dot += static_cast<double>(r[i]) * vv[i];
      nn += static_cast<double>(vv[i]) * vv[i];
    }
    proj.push_back(dot / std::sqrt(nn));
  }
  const double mx = *std::max_element(proj.begin(), proj.end());
  ASSERT_GT(mx, 0.0);
  std::vector<size_t> expect;
  for (size_t i = 0; i < proj.size(); ++i)
    if (proj[i] >= 0.8 * mx) expect.push_back(i);
  const auto res = filter_by_activation(model, in, v, 0.8, layer);
  EXPECT_EQ(res.kept, expect);
  for (size_t i = 0; i < proj.size(); ++i) EXPECT_NEAR(res.activations[i], proj[i], 1e-9);
}

TEST(Filter, MonotoneInFrac) {
  const auto model = testutil::tiny_causal_model();
  std::vector<std::string> texts;
  for (int i = 0; i < 12; ++i) texts.push_back(std::string(static_cast<size_t>(1 + i % 5), static_cast<char>('a' + i)));
  const auto in = encode_all(texts);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<float> vv(static_cast<size_t>(model.d_model()));
    for (auto& x : vv) x = std::normal_distribution<float>()(rng);
    const ConceptVector v(vv, {});
    size_t prev = texts.size() + 1;
    for (double frac = 0.05; frac <= 1.0; frac += 0.05) {
      const auto kept = filter_by_activation(model, in, v, frac, 3).kept.size();
      EXPECT_LE(kept, prev);
      EXPECT_GE(kept, 1u);
      prev = kept;
    }
  }
}

TEST(Filter, PromptVariantReturnsDataset) {
  const auto model = testutil::tiny_causal_model();
  const InputEncoder enc(model.config, Tokenizer::bytes());
  const auto v = concept_diff_means(model, encode_all(kPositives), encode_all(kNegatives));
  const auto ds = filter_prompts_by_activation(model, enc, kPositives, v, 0.8, 3, PositionSpec::last());
  EXPECT_FALSE(ds.positives.empty());
  for (const auto& p : ds.positives) EXPECT_NE(std::find(kPositives.begin(), kPositives.end(), p), kPositives.end());
  EXPECT_EQ(testutil::error_kind_of([&] { filter_by_activation(model, {}, v, 0.8, 3); }), ErrorKind::data);
  EXPECT_EQ(testutil::error_kind_of([&] { filter_by_activation(model, encode_all({"a"}), v, 0.0, 3); }), ErrorKind::config);
}

TEST(Dataset, LoadsAllLineKinds) {
  TempDir dir;
  std::ofstream(dir / "text.jsonl") << "{\"text\": \"one\"}\n\n{\"text\": \"two\"}\n";
  const auto a = load_prompt_dataset(dir / "text.jsonl");
  EXPECT_EQ(a.positives, (std::vector<std::string>{"one", "two"}));
  EXPECT_FALSE(a.negatives.has_value());
  std::ofstream(dir / "pairs.jsonl") << "{\"pos\": \"p1\", \"neg\": \"n1\"}\n{\"pos\": \"p2\", \"neg\": \"n2\"}\n";
  const auto b = load_prompt_dataset(dir / "pairs.jsonl");
  EXPECT_EQ(b.positives, (std::vector<std::string>{"p1", "p2"}));
  EXPECT_EQ(*b.negatives, (std::vector<std::string>{"n1", "n2"}));
  std::ofstream(dir / "img.jsonl") << "{\"path\": \"x.npy\", \"label\": 3}\n";
  const auto c = load_prompt_dataset(dir / "img.jsonl");
  EXPECT_TRUE(c.images);
  EXPECT_EQ(c.labels, (std::vector<int>{3}));
  EXPECT_EQ(std::filesystem::path(c.positives[0]), dir / "x.npy");
  EXPECT_EQ(c.position, PositionSpec::cls());
}

TEST(Dataset, RejectsEmptyAndMalformed) {
  TempDir dir;
  std::ofstream(dir / "empty.jsonl") << "\n";
  EXPECT_EQ(testutil::error_kind_of([&] { load_prompt_dataset(dir / "empty.jsonl"); }), ErrorKind::data);
  std::ofstream(dir / "blank.jsonl") << "{\"text\": \"\"}\n";
  EXPECT_EQ(testutil::error_kind_of([&] { load_prompt_dataset(dir / "blank.jsonl"); }), ErrorKind::data);
  std::ofstream(dir / "bad.jsonl") << "{not json}\n";
  EXPECT_EQ(testutil::error_kind_of([&] { load_prompt_dataset(dir / "bad.jsonl"); }), ErrorKind::data);
}
