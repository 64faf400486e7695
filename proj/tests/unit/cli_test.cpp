#include <sstream>

#include "cli_app.hpp"
#include "test_util.hpp"

using namespace attnmod;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
  return rows;
}

class CliTest : public ::testing::Test {
 protected:
  testutil::TempDir dir;
  std::string w() const { return dir.path().string(); }

  CliResult run(std::vector<std::string> args) {
    args.insert(args.begin(), {"--workdir", w()});
    return invoke(std::move(args));
  }

  void plant(const std::string& out, int seed = 1) {
    const auto r = run({"make-planted", "--seed", std::to_string(seed), "--out", out});
    ASSERT_EQ(r.code, 0) << r.err;
  }

  CliResult discover(const std::string& model, const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"discover", "--model", model, "--concept", "external", "--vector", model + "/vstar.bin",
                                  "--dataset", model + "/triggers.jsonl", "--out", out};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  }
};

}  // namespace

TEST_F(CliTest, PlantedHeadRanksFirst) {
  for (int seed : {1, 2}) {
    const std::string m = "m" + std::to_string(seed), d = "d" + std::to_string(seed);
    plant(m, seed);
    const auto r = discover(m, d);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto planted = testutil::read_json(dir / m / "planted.json")["planted"];
    const auto mod = testutil::read_json(dir / d / "module.json");
    EXPECT_EQ(mod["heads"][0]["layer"], planted["layer"]);
    EXPECT_EQ(mod["heads"][0]["head"], planted["head"]);
    EXPECT_GT(mod["heads"][0]["score"].get<double>(), 0.99);
    EXPECT_EQ(mod["k"], 5);
    for (const char* f : {"heatmap.csv", "heatmap.svg", "heatmap.json", "sorted_scores.csv", "concept.bin"})
      EXPECT_TRUE(fs::exists(dir / d / f)) << f;
  }
  EXPECT_NE(slurp(dir / "m1" / "model.safetensors"), slurp(dir / "m2" / "model.safetensors"));
}

TEST_F(CliTest, DiffMeansOnTriggersFindsPlantedHead) {
  plant("m", 4);
  const auto r = run({"discover", "--model", "m", "--dataset", "m/triggers.jsonl", "--k", "1", "--out", "d"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto planted = testutil::read_json(dir / "m" / "planted.json")["planted"];
  const auto mod = testutil::read_json(dir / "d" / "module.json");
  EXPECT_EQ(mod["heads"][0]["layer"], planted["layer"]);
  EXPECT_EQ(mod["heads"][0]["head"], planted["head"]);
}

TEST_F(CliTest, ZeroKIsConfigError) {
  plant("m");
  const auto r = discover("m", "d", {"--k", "0"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--k 0 out of range"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "d" / "module.json"));
}

TEST_F(CliTest, PlantingOutsideGridIsConfigError) {
  EXPECT_EQ(run({"make-planted", "--planted-layer", "5", "--out", "m"}).code, 2);
  EXPECT_EQ(run({"make-planted", "--planted-head", "0", "--out", "m"}).code, 2);
  EXPECT_EQ(run({"make-planted", "--arch", "vit", "--planted-layer", "9", "--out", "v"}).code, 2);
}

TEST_F(CliTest, ExitCodes) {
  plant("m");
  EXPECT_EQ(run({"discover", "--model", "missing", "--dataset", "m/triggers.jsonl", "--out", "d"}).code, 4);
  EXPECT_EQ(run({"discover", "--model", "m", "--dataset", "missing.jsonl", "--out", "d"}).code, 3);
  write_vector_file(dir / "zero.bin", std::vector<float>(64, 0.0f));
  EXPECT_EQ(run({"discover", "--model", "m", "--concept", "external", "--vector", "zero.bin", "--dataset",
                 "m/triggers.jsonl", "--out", "d"})
                .code,
            5);
  EXPECT_EQ(run({"discover", "--model", "m", "--concept", "nonsense", "--out", "d"}).code, 2);
  EXPECT_EQ(run({"no-such-command"}).code, 2);
  EXPECT_EQ(invoke({"--help"}).code, 0);
}

TEST_F(CliTest, RerunGivesIdenticalOutputs) {
  plant("m");
  ASSERT_EQ(discover("m", "a").code, 0);
  ASSERT_EQ(discover("m", "b").code, 0);
  for (const char* f : {"module.json", "heatmap.csv", "heatmap.svg", "heatmap.json", "sorted_scores.csv", "concept.bin"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  plant("m2");
  EXPECT_EQ(slurp(dir / "m" / "model.safetensors"), slurp(dir / "m2" / "model.safetensors"));
}

TEST_F(CliTest, UnitScalarLeavesTextUnchanged) {
  plant("m");
  ASSERT_EQ(discover("m", "d").code, 0);
  for (const char* mode : {"runtime-hook", "weight-edit"}) {
    const auto r = run({"intervene", "--model", "m", "--module", "d/module.json", "--s", "1", "--mode", mode, "--dataset",
                        "m/triggers.jsonl", "--max-new-tokens", "6", "--out", std::string("i-") + mode});
    ASSERT_EQ(r.code, 0) << r.err;
    for (const auto& row : read_jsonl(dir / (std::string("i-") + mode) / "generations.jsonl"))
      EXPECT_EQ(row["baseline"], row["intervened"]);
    EXPECT_EQ(testutil::read_json(dir / (std::string("i-") + mode) / "report.json")["n_identical"], 8);
  }
}

TEST_F(CliTest, PresetSuppressesPlantedToken) {
  plant("m", 5);
  ASSERT_EQ(discover("m", "d", {"--k", "1"}).code, 0);
  const auto r = run({"intervene", "--model", "m", "--module", "d/module.json", "--preset", "sae_negative", "--dataset",
                      "m/triggers.jsonl", "--target", "A", "--max-new-tokens", "3", "--out", "i"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = testutil::read_json(dir / "i" / "report.json");
  EXPECT_EQ(rep["intervention"]["s"], -1.0);
  EXPECT_LT(rep["logprob_shift"]["aggregate"].get<double>(), 0.0);
  for (double v : rep["logprob_shift"]["values"]) EXPECT_LT(v, 0.0);
  EXPECT_LT(rep["sign_test"]["p_value"].get<double>(), 0.05);
  for (const auto& row : read_jsonl(dir / "i" / "generations.jsonl")) {
    EXPECT_EQ(row["baseline"], "AAA");
    EXPECT_EQ(row["intervened"], "BBB");
  }
}

TEST_F(CliTest, ExplicitScalarOverridesPreset) {
  plant("m");
  ASSERT_EQ(discover("m", "d").code, 0);
  ASSERT_EQ(run({"intervene", "--model", "m", "--module", "d/module.json", "--preset", "sae_negative", "--s", "0.5",
                 "--prompt", "hi", "--max-new-tokens", "1", "--out", "i"})
                .code,
            0);
  EXPECT_EQ(testutil::read_json(dir / "i" / "report.json")["intervention"]["s"], 0.5);
  EXPECT_EQ(run({"intervene", "--model", "m", "--preset", "sae_negative", "--prompt", "hi", "--out", "j"}).code, 2);
  EXPECT_EQ(run({"intervene", "--model", "m", "--module", "d/module.json", "--preset", "nope", "--prompt", "hi", "--out", "j"}).code, 2);
}

TEST_F(CliTest, WeightEditCheckpointMatchesHook) {
  plant("m", 3);
  ASSERT_EQ(discover("m", "d", {"--k", "3"}).code, 0);
  const auto r = run({"intervene", "--model", "m", "--module", "d/module.json", "--s", "0.5", "--mode", "weight-edit",
                      "--prompt", "abc", "--max-new-tokens", "2", "--out", "e"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto er = testutil::read_json(dir / "e" / "edit_report.json");
  EXPECT_EQ(er["elements_scaled"], 3 * 64 * 16);
  const Model base = load_model(dir / "m" / "config.json", dir / "m" / "model.safetensors");
  const Model edited = load_model(dir / "e" / "config.json", dir / "e" / "model.safetensors");
  const auto mod = load_module(dir / "d" / "module.json");
  const auto scaling = head_scaling({mod, 0.5f, InterventionMode::runtime_hook}, base.config);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 8; ++i) {
    const auto seq = testutil::random_tokens(rng, 1 + static_cast<int>(rng() % 30), 256);
    const auto hook = forward_scaled(base, seq, scaling);
    const auto plain = forward(edited, seq);
    EXPECT_LT(testutil::max_abs_diff(hook, plain), 1e-4);
  }
}

TEST_F(CliTest, LargeScalarWarns) {
  plant("m");
  ASSERT_EQ(discover("m", "d").code, 0);
  const auto r = run({"intervene", "--model", "m", "--module", "d/module.json", "--s", "2e5", "--prompt", "x",
                      "--max-new-tokens", "1", "--out", "i"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  const auto quiet = run({"intervene", "--model", "m", "--module", "d/module.json", "--s", "-1e5", "--prompt", "x",
                          "--max-new-tokens", "1", "--out", "j"});
  EXPECT_EQ(quiet.err, "");
}

TEST_F(CliTest, GridSearchPicksSuppressingScalar) {
  plant("m", 6);
  ASSERT_EQ(discover("m", "d", {"--k", "1"}).code, 0);
  const auto r = run({"gridsearch", "--model", "m", "--module", "d/module.json", "--s-list", "1,0.5,0,-1", "--objective",
                      "logprob-shift", "--minimize", "--target", "A", "--dataset", "m/triggers.jsonl", "--out", "g"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = testutil::read_json(dir / "g" / "gridsearch.json");
  EXPECT_EQ(j["best_s"], -1.0);
  EXPECT_EQ(j["table"].size(), 4u);
  EXPECT_EQ(j["table"][0]["value"], 0.0);
  const auto csv = slurp(dir / "g" / "gridsearch.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "s,value,error");
  EXPECT_EQ(run({"gridsearch", "--model", "m", "--module", "d/module.json", "--s-list", "1", "--prompt", "x", "--out", "h"}).code, 2);
}

TEST_F(CliTest, VitSweepThroughCli) {
  ASSERT_EQ(run({"make-planted", "--arch", "vit", "--seed", "2", "--images-per-class", "6", "--out", "v"}).code, 0);
  const auto info = testutil::read_json(dir / "v" / "planted.json");
  const int target = info["target"];
  const auto r = run({"discover", "--model", "v", "--concept", "unembed", "--label", std::to_string(target), "--dataset",
                      "v/images.jsonl", "--out", "vd"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto mod = testutil::read_json(dir / "vd" / "module.json");
  EXPECT_EQ(mod["k"], 3);
  for (const auto& h : mod["heads"]) EXPECT_NE(std::find(info["target_heads"].begin(), info["target_heads"].end(),
                                                         nlohmann::json{{"layer", h["layer"]}, {"head", h["head"]}}),
                                               info["target_heads"].end());
  ASSERT_EQ(run({"vit-sweep", "--model", "v", "--module", "vd/module.json", "--images", "v/images.jsonl", "--label",
                 std::to_string(target), "--s-range", "-1:1:0.5", "--out", "vs"})
                .code,
            0);
  const auto rep = testutil::read_json(dir / "vs" / "report.json");
  const double chance = 1.0 / 8;
  EXPECT_LE(rep["metadata"]["rows"][0]["target_acc"].get<double>(), chance);
  EXPECT_NEAR(rep["metadata"]["rows"][0]["non_target_acc"].get<double>(),
              rep["metadata"]["baseline"]["non_target_acc"].get<double>(), 0.05);
  EXPECT_EQ(rep["values"].size(), 5u);
  const auto cls = run({"classify", "--model", "v", "--images", "v/images.jsonl", "--out", "vc"});
  EXPECT_EQ(cls.code, 0);
  EXPECT_NE(cls.out.find("accuracy"), std::string::npos);
  EXPECT_EQ(read_jsonl(dir / "vc" / "predictions.jsonl").size(), 48u);
}

TEST_F(CliTest, OneManifestPerOutputDirectory) {
  plant("m");
  ASSERT_EQ(discover("m", "d").code, 0);
  ASSERT_EQ(run({"intervene", "--model", "m", "--module", "d/module.json", "--s", "0", "--mode", "weight-edit", "--prompt",
                 "x", "--max-new-tokens", "1", "--out", "i"})
                .code,
            0);
  ASSERT_EQ(run({"make-planted", "--arch", "vit", "--images-per-class", "1", "--out", "v"}).code, 0);
  for (const char* sub : {"m", "d", "i", "v"}) {
    int manifests = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / sub)) {
      EXPECT_FALSE(e.is_directory()) << e.path();
      manifests += e.path().filename() == "manifest.json";
    }
    EXPECT_EQ(manifests, 1) << sub;
    const auto m = testutil::read_json(dir / sub / "manifest.json");
    for (const char* key : {"command", "config", "inputs", "version", "started_at", "finished_at"})
      EXPECT_TRUE(m.contains(key)) << key;
  }
  const auto m = testutil::read_json(dir / "d" / "manifest.json");
  EXPECT_EQ(m["inputs"]["model.weights"]["fnv1a64"].get<std::string>().size(), 16u);
  EXPECT_EQ(m["config"]["k"], 5);
}

TEST_F(CliTest, ConfigFilePrecedence) {
  plant("m");
  std::ofstream(dir / "run.toml") << "[discover]\nk = 2\nconcept = \"external\"\nvector = \"m/vstar.bin\"\n";
  const std::string cfg = (dir / "run.toml").string();
  ASSERT_EQ(run({"--config", cfg, "discover", "--model", "m", "--dataset", "m/triggers.jsonl", "--out", "a"}).code, 0);
  EXPECT_EQ(testutil::read_json(dir / "a" / "module.json")["k"], 2);
  ASSERT_EQ(run({"--config", cfg, "discover", "--model", "m", "--dataset", "m/triggers.jsonl", "--k", "4", "--out", "b"}).code, 0);
  EXPECT_EQ(testutil::read_json(dir / "b" / "module.json")["k"], 4);
  EXPECT_EQ(testutil::read_json(dir / "b" / "manifest.json")["config"]["concept"], "external");
}

TEST_F(CliTest, DiffMeansCache) {
  plant("m");
  const fs::path cache = dir / "cache";
  setenv("ATTNMOD_CACHE_DIR", cache.c_str(), 1);
  const std::vector<std::string> args{"discover", "--model", "m", "--dataset", "m/triggers.jsonl", "--out"};
  auto a = args, b = args;
  a.push_back("a");
  b.push_back("b");
  ASSERT_EQ(run(a).code, 0);
  ASSERT_EQ(std::distance(fs::directory_iterator(cache), fs::directory_iterator()), 1);
  ASSERT_EQ(run(b).code, 0);
  unsetenv("ATTNMOD_CACHE_DIR");
  EXPECT_EQ(slurp(dir / "a" / "module.json"), slurp(dir / "b" / "module.json"));
}

TEST(CliHelpers, PngMatchesNpy) {
  testutil::TempDir dir;
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = 5;
  im.height = 3;
  im.format = PNG_FORMAT_RGB;
  std::vector<png_byte> px(5 * 3 * 3);
  for (size_t i = 0; i < px.size(); ++i) px[i] = static_cast<png_byte>(i * 17 % 256);
  ASSERT_TRUE(png_image_write_to_file(&im, (dir / "a.png").c_str(), 0, px.data(), 0, nullptr));
  const auto raw = cli::load_image(dir / "a.png");
  ASSERT_EQ(raw.height, 3);
  ASSERT_EQ(raw.width, 5);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 5; ++x)
        EXPECT_EQ(raw.chw[static_cast<size_t>((c * 3 + y) * 5 + x)], px[static_cast<size_t>((y * 5 + x) * 3 + c)] / 255.0f);
  save_npy_image(dir / "a.npy", raw);
  EXPECT_EQ(cli::load_image(dir / "a.npy").chw, raw.chw);
  std::ofstream(dir / "bad.png") << "not a png";
  EXPECT_EQ(testutil::error_kind_of([&] { cli::load_image(dir / "bad.png"); }), ErrorKind::data);
}

TEST(CliHelpers, SRange) {
  EXPECT_EQ(cli::parse_s_range("-1:1:0.5"), (std::vector<float>{-1.0f, -0.5f, 0.0f, 0.5f, 1.0f}));
  EXPECT_EQ(cli::parse_s_range("0:0:1"), (std::vector<float>{0.0f}));
  EXPECT_EQ(cli::parse_s_range("-1:1:0.1").size(), 21u);
  for (const char* bad : {"1:0:0.1", "0:1:0", "0:1", "a:b:c"})
    EXPECT_EQ(testutil::error_kind_of([&] { cli::parse_s_range(bad); }), ErrorKind::config) << bad;
}

TEST(CliHelpers, Fnv1a) {
  testutil::TempDir dir;
  std::ofstream(dir / "e.txt") << "";
  std::ofstream(dir / "a.txt") << "a";
  EXPECT_EQ(cli::hex64(cli::fnv1a64(dir / "e.txt")), "cbf29ce484222325");
  EXPECT_EQ(cli::hex64(cli::fnv1a64(dir / "a.txt")), "af63dc4c8601ec8c");
}
