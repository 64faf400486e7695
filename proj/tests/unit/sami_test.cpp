#include "test_util.hpp"

using namespace attnmod;
using testutil::max_abs_diff;

namespace {

AttentionModule random_module(std::mt19937_64& rng, const ModelConfig& c, int k) {
  std::vector<HeadId> all;
  for (int l = 0; l < c.n_layers; ++l)
    for (int h = 0; h < c.n_heads; ++h) all.push_back({l, h});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<size_t>(k));
  return module_from_heads(all, c.model_id);
}

}  // namespace

TEST(Intervention, UnitScalarIsBitwiseNoop) {
  const auto model = testutil::tiny_causal_model();
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const auto seq = testutil::random_tokens(rng, 1 + trial * 4, 256);
    const InterventionSpec hook{random_module(rng, model.config, 5), 1.0f, InterventionMode::runtime_hook};
    auto edit = hook;
    edit.mode = InterventionMode::weight_edit;
    const auto base = forward(model, seq);
    EXPECT_EQ(forward_with_intervention(model, seq, hook), base);
    EXPECT_EQ(forward_with_intervention(model, seq, edit), base);
  }
}

TEST(Intervention, UnitScalarEditKeepsWeights) {
  const auto model = testutil::tiny_causal_model();
  std::mt19937_64 rng(2);
  const InterventionSpec spec{random_module(rng, model.config, 5), 1.0f, InterventionMode::weight_edit};
  const auto edited = edit_weights(model, spec);
  EXPECT_EQ(export_native(edited), export_native(model));
}

// Property: hook and weight-edit logits agree for random modules, scalars and inputs.
TEST(Intervention, ModesAgree) {
  const auto model = testutil::tiny_causal_model();
  std::mt19937_64 rng(3);
  for (float s : {-1.7f, -1.0f, 0.0f, 0.5f, 1.4f, 1e4f}) {
    for (int trial = 0; trial < 8; ++trial) {
      const auto seq = testutil::random_tokens(rng, 2 + static_cast<int>(rng() % 30), 256);
      const InterventionSpec hook{random_module(rng, model.config, 1 + static_cast<int>(rng() % 6)), s,
                                  InterventionMode::runtime_hook};
      auto edit = hook;
      edit.mode = InterventionMode::weight_edit;
      const auto a = forward_with_intervention(model, seq, hook);
      const auto b = forward_with_intervention(model, seq, edit);
      float scale = 1.0f;
      for (float x : a) scale = std::max(scale, std::abs(x));
      EXPECT_LT(max_abs_diff(a, b), 1e-4f * scale) << "s=" << s;
    }
  }
}

TEST(Intervention, VitModesAgree) {
  const auto model = testutil::tiny_vit_model();
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const ImageInput in{testutil::random_image(rng, model.config)};
    const InterventionSpec hook{random_module(rng, model.config, 3), -1.0f, InterventionMode::runtime_hook};
    auto edit = hook;
    edit.mode = InterventionMode::weight_edit;
    EXPECT_LT(max_abs_diff(forward_with_intervention(model, in, hook), forward_with_intervention(model, in, edit)), 1e-4f);
  }
}

// s=0 on a whole layer: that layer's attention block adds only its bias.
TEST(Intervention, ZeroOnWholeLayerLeavesBias) {
  const auto model = testutil::tiny_causal_model();
  const int layer = 1;
  std::vector<HeadId> heads;
  for (int h = 0; h < model.n_heads(); ++h) heads.push_back({layer, h});
  const InterventionSpec spec{module_from_heads(heads), 0.0f, InterventionMode::runtime_hook};
  const TokenSequence seq{{10, 20, 30, 40}, PositionSpec::last()};
  ResidualTrace trace;
  forward_with_intervention(model, seq, spec, &trace);
  const auto& lt = trace.layers[layer];
  for (int h = 0; h < model.n_heads(); ++h)
    for (float x : trace.head(layer, h)) EXPECT_EQ(x, 0.0f);
  for (int i = 0; i < model.d_model(); ++i) {
    const float expect = lt.r_prev[static_cast<size_t>(i)] + lt.attn_bias[static_cast<size_t>(i)];
    EXPECT_NEAR(lt.r_post[static_cast<size_t>(i)] - lt.mlp[static_cast<size_t>(i)], expect, 1e-5f);
  }
}

// s=-1 on a single-layer model: r_post equals baseline r_post - 2 * sum of module a.
TEST(Intervention, NegativeUnitReflectsModule) {
  const auto model = random_model(testutil::tiny_causal_config(1, 4, 32), 9, 0.3);
  const TokenSequence seq{{1, 2, 3, 4, 5, 6}, PositionSpec::last()};
  const InterventionSpec spec{module_from_heads({{0, 1}, {0, 3}}), -1.0f, InterventionMode::runtime_hook};
  const auto base = forward_traced(model, seq).trace;
  ResidualTrace after;
  forward_with_intervention(model, seq, spec, &after);
  const auto& b = base.layers[0];
  const auto& a = after.layers[0];
  for (int i = 0; i < 32; ++i) {
    const size_t k = static_cast<size_t>(i);
    const float attn_delta = -2.0f * (base.head(0, 1)[k] + base.head(0, 3)[k]);
    EXPECT_NEAR((a.r_post[k] - a.mlp[k]) - (b.r_post[k] - b.mlp[k]), attn_delta, 1e-5f);
    EXPECT_EQ(after.head(0, 1)[k], -base.head(0, 1)[k]);
  }
}

// Heads outside the module, in layers up to and including the first module
// layer, are bit-identical.
TEST(Intervention, LocalityBeforeAndAtModuleLayer) {
  const auto model = testutil::tiny_causal_model();
  const TokenSequence seq{{7, 8, 9}, PositionSpec::last()};
  const InterventionSpec spec{module_from_heads({{1, 0}, {2, 2}}), 3.0f, InterventionMode::runtime_hook};
  const auto base = forward_traced(model, seq).trace;
  ResidualTrace after;
  forward_with_intervention(model, seq, spec, &after);
  for (int l = 0; l <= 1; ++l)
    for (int h = 0; h < model.n_heads(); ++h) {
      if (spec.module.contains({l, h})) continue;
      const auto x = base.head(l, h), y = after.head(l, h);
      EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << l << "," << h;
    }
}

TEST(Intervention, EditThenInverseRestoresLogits) {
  const auto model = testutil::tiny_causal_model();
  std::mt19937_64 rng(5);
  for (float s : {-1.7f, 0.5f, 3.0f, 1e3f}) {
    const auto mod = random_module(rng, model.config, 4);
    const auto once = edit_weights(model, {mod, s, InterventionMode::weight_edit});
    const auto back = edit_weights(once, {mod, 1.0f / s, InterventionMode::weight_edit});
    const auto seq = testutil::random_tokens(rng, 12, 256);
    EXPECT_LT(max_abs_diff(forward(back, seq), forward(model, seq)), 1e-4f) << s;
  }
}

TEST(Intervention, CompositionMultipliesScalars) {
  const auto model = testutil::tiny_causal_model();
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const auto mod = random_module(rng, model.config, 3);
    const float s1 = std::uniform_real_distribution<float>(-2, 2)(rng), s2 = std::uniform_real_distribution<float>(-2, 2)(rng);
    const auto twice = edit_weights(edit_weights(model, {mod, s1, InterventionMode::weight_edit}), {mod, s2, InterventionMode::weight_edit});
    const auto seq = testutil::random_tokens(rng, 10, 256);
    const auto a = forward(twice, seq);
    const auto b = forward_with_intervention(model, seq, {mod, s1 * s2, InterventionMode::runtime_hook});
    EXPECT_LT(max_abs_diff(a, b), 1e-4f);
  }
}

TEST(Intervention, EditSharesUntouchedTensorsAndKeepsOriginal) {
  const auto model = testutil::tiny_causal_model();
  const auto before = export_native(model);
  const auto mod = module_from_heads({{1, 0}, {1, 3}});
  EditReport report;
  const auto edited = edit_weights(model, {mod, -1.0f, InterventionMode::weight_edit}, &report);
  EXPECT_EQ(export_native(model), before);
  EXPECT_NE(edited.layers[1].attn_out_w, model.layers[1].attn_out_w);
  EXPECT_EQ(edited.layers[1].attn_out_b, model.layers[1].attn_out_b);
  EXPECT_EQ(edited.layers[0].attn_out_w, model.layers[0].attn_out_w);
  EXPECT_EQ(edited.layers[1].qkv_w, model.layers[1].qkv_w);
  EXPECT_EQ(report.tensors_touched, (std::vector<std::string>{"blocks.1.attn.out.weight"}));
  EXPECT_EQ(report.elements_scaled, 2 * 32 * 8);
  // exactly the two column blocks changed
  const auto& w0 = *model.layers[1].attn_out_w;
  const auto& w1 = *edited.layers[1].attn_out_w;
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) {
      const size_t i = static_cast<size_t>(r * 32 + c);
      const int head = c / 8;
      EXPECT_EQ(w1.data[i], (head == 0 || head == 3) ? -w0.data[i] : w0.data[i]);
    }
}

TEST(Intervention, SpecValidation) {
  const auto model = testutil::tiny_causal_model();
  const InterventionSpec outside{module_from_heads({{3, 0}}), -1.0f, InterventionMode::runtime_hook};
  const TokenSequence seq{{1}, PositionSpec::last()};
  EXPECT_EQ(testutil::error_kind_of([&] { forward_with_intervention(model, seq, outside); }), ErrorKind::config);
  const InterventionSpec nan{module_from_heads({{0, 0}}), std::numeric_limits<float>::quiet_NaN(), InterventionMode::runtime_hook};
  EXPECT_EQ(testutil::error_kind_of([&] { forward_with_intervention(model, seq, nan); }), ErrorKind::numeric);
  EXPECT_EQ(parse_mode("weight-edit"), InterventionMode::weight_edit);
  EXPECT_EQ(testutil::error_kind_of([] { parse_mode("magic"); }), ErrorKind::config);
}

TEST(GenerateIntervention, UnitScalarMatchesPlain) {
  const auto model = testutil::tiny_causal_model();
  const auto tok = Tokenizer::bytes();
  GenerateParams p;
  p.max_new_tokens = 10;
  std::mt19937_64 rng(7);
  const InterventionSpec spec{random_module(rng, model.config, 5), 1.0f, InterventionMode::runtime_hook};
  EXPECT_EQ(generate_with_intervention(model, tok, "prompt", spec, p).text, generate(model, tok, "prompt", p));
}

TEST(GenerateIntervention, PlantedHeadFlipsGreedyToken) {
  const auto tok = Tokenizer::bytes();
  GenerateParams p;
  p.max_new_tokens = 1;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const auto pl = make_planted_lm(seed);
    const InterventionSpec off{module_from_heads({pl.planted}), 0.0f, InterventionMode::runtime_hook};
    for (const auto& t : pl.triggers) {
      EXPECT_EQ(generate_ids(pl.model, tok, t, p).new_ids[0], pl.token_a);
      EXPECT_EQ(generate_with_intervention(pl.model, tok, t, off, p).new_ids[0], pl.token_b);
      auto edit = off;
      edit.mode = InterventionMode::weight_edit;
      EXPECT_EQ(generate_with_intervention(pl.model, tok, t, edit, p).new_ids[0], pl.token_b);
    }
  }
}

TEST(GridSearch, SingleCandidate) {
  const auto res = grid_search_scalar({}, {2.5f}, [](const InterventionSpec&) { return 1.0; });
  EXPECT_EQ(res.best_s, 2.5f);
  EXPECT_EQ(res.table.size(), 1u);
}

TEST(GridSearch, AnalyticArgmax) {
  const auto res = grid_search_scalar({}, {0.5f, 1.0f, 2.0f}, [](const InterventionSpec& s) { return -std::abs(s.s - 1.0); });
  EXPECT_EQ(res.best_s, 1.0f);
  EXPECT_EQ(res.best_value, 0.0);
}

TEST(GridSearch, TiesPreferSmallerMagnitude) {
  const auto res = grid_search_scalar({}, {-4.0f, 2.0f, -1.0f, 3.0f}, [](const InterventionSpec&) { return 0.0; });
  EXPECT_EQ(res.best_s, -1.0f);
}

TEST(GridSearch, FailuresRecordedAndSkipped) {
  const auto res = grid_search_scalar({}, {1.0f, 2.0f, 3.0f}, [](const InterventionSpec& s) {
    if (s.s == 3.0f) throw std::runtime_error("boom");
    if (s.s == 1.0f) return std::nan("");
    return 5.0;
  });
  EXPECT_EQ(res.best_s, 2.0f);
  ASSERT_EQ(res.table.size(), 3u);
  EXPECT_FALSE(res.table[0].value.has_value());
  EXPECT_FALSE(res.table[2].value.has_value());
  EXPECT_EQ(res.table[2].error, "boom");
  EXPECT_EQ(testutil::error_kind_of([] { grid_search_scalar({}, {}, [](const InterventionSpec&) { return 0.0; }); }),
            ErrorKind::config);
}

// Powers of ten on a toy LM with a repetition objective: one row per candidate.
TEST(GridSearch, RepetitionSweepOnToyModel) {
  const auto pl = make_planted_lm(3);
  const auto tok = Tokenizer::bytes();
  GenerateParams p;
  p.max_new_tokens = 12;
  const InterventionSpec tmpl{module_from_heads({pl.planted}), 1.0f, InterventionMode::runtime_hook};
  const auto res = grid_search_scalar(tmpl, {10.0f, 100.0f, 1000.0f, 10000.0f}, [&](const InterventionSpec& s) {
    const auto g = generate_with_intervention(pl.model, tok, pl.triggers[0], s, p);
    std::string spaced;
    for (char c : g.text) (spaced += c) += ' ';
    return repetition_score(spaced, 1);
  });
  EXPECT_EQ(res.table.size(), 4u);
  for (const auto& row : res.table) EXPECT_TRUE(row.value.has_value());
}

TEST(Presets, BuiltinsCarryDocumentedScalars) {
  const auto& p = builtin_presets();
  EXPECT_EQ(p.at("sae_negative").s, -1.0f);
  EXPECT_EQ(p.at("sae_positive").s, 1e4f);
  EXPECT_EQ(p.at("reasoning_llama").s, 1.4f);
  EXPECT_EQ(p.at("reasoning_gemma").s, 1.2f);
  EXPECT_EQ(p.at("safety_llama2").s, -1.7f);
  EXPECT_EQ(p.at("safety_qwen").s, -0.7f);
  EXPECT_EQ(p.at("safety_gemma").s, -0.8f);
  EXPECT_EQ(p.at("sae_negative").k, 5);
  EXPECT_EQ(p.at("safety_llama2").k, 10);
  EXPECT_EQ(p.at("vit_negative").k, 3);
}

TEST(Presets, FileOverridesAndResolvesPaths) {
  testutil::TempDir dir;
  std::ofstream(dir / "presets.json") << R"({"mine": {"module": "m.json", "s": -2.5, "mode": "weight-edit"},
                                            "sae_negative": {"s": -0.5}})";
  const auto p = load_presets(dir / "presets.json");
  EXPECT_EQ(p.at("mine").s, -2.5f);
  EXPECT_EQ(p.at("mine").mode, InterventionMode::weight_edit);
  EXPECT_EQ(std::filesystem::path(p.at("mine").module_path), dir / "m.json");
  EXPECT_EQ(p.at("sae_negative").s, -0.5f);
  EXPECT_EQ(p.at("safety_qwen").s, -0.7f);
}

TEST(EditReport, FractionFromConfigOnly) {
  auto c = testutil::tiny_causal_config();
  const auto mod = module_from_heads({{0, 0}, {2, 1}, {2, 3}});
  const auto r = edit_report(c, mod);
  EXPECT_EQ(r.elements_scaled, 3 * c.d_model * c.d_head);
  EXPECT_EQ(r.total_params, c.parameter_count());
  EXPECT_DOUBLE_EQ(r.fraction, static_cast<double>(r.elements_scaled) / static_cast<double>(r.total_params));
  EXPECT_EQ(r.tensors_touched.size(), 2u);
  const auto j = edit_report_json(r);
  EXPECT_TRUE(j.contains("fraction_of_total_params"));
}
