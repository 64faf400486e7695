#pragma once

#include <png.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "attnmod/attnmod.hpp"

namespace attnmod::cli {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";

inline uint64_t fnv1a64(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::data, "cannot read " + path.string());
  uint64_t h = 0xcbf29ce484222325ull;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[static_cast<size_t>(i)]);
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// PNG via libpng's simplified API, anything else as NPY. No resizing.
inline RawImage load_image(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext != ".png") return load_npy_image(path);
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str()))
    fail(ErrorKind::data, path.string() + ": " + im.message);
  im.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&im);
    fail(ErrorKind::data, path.string() + ": " + im.message);
  }
  RawImage raw{static_cast<int>(im.height), static_cast<int>(im.width), {}};
  const size_t plane = static_cast<size_t>(raw.height) * raw.width;
  raw.chw.resize(3 * plane);
  for (size_t i = 0; i < plane; ++i)
    for (size_t c = 0; c < 3; ++c) raw.chw[c * plane + i] = buf[i * 3 + c] / 255.0f;
  return raw;
}

// Per-invocation state: path resolution, hashed inputs, the manifest.
class Run {
 public:
  Run(std::string command, std::vector<std::string> argv, std::ostream& out, std::ostream& err)
      : out(out), err(err), command_(std::move(command)), argv_(std::move(argv)), started_(utc_now()) {}

  fs::path workdir = ".";
  int threads = 1;
  nlohmann::json resolved = nlohmann::json::object();
  std::ostream& out;
  std::ostream& err;

  fs::path path(const std::string& p) const {
    if (p.empty()) return {};
    fs::path q(p);
    return q.is_relative() ? workdir / q : q;
  }

  fs::path out_dir(const std::string& p) const {
    const fs::path d = path(p);
    std::error_code ec;
    fs::create_directories(d, ec);
    if (ec) fail(ErrorKind::data, "cannot create output directory " + d.string() + ": " + ec.message());
    return d;
  }

  void hash_input(const std::string& role, const fs::path& p) {
    if (inputs_.contains(role)) return;
    inputs_[role] = {{"path", p.string()}, {"fnv1a64", hex64(fnv1a64(p))}};
  }

  std::string input_hash(const std::string& role) const { return inputs_.at(role)["fnv1a64"]; }

  void write_manifest(const fs::path& dir) const {
    nlohmann::json m;
    m["tool"] = "attnmod";
    m["version"] = kToolVersion;
    m["command"] = command_;
    m["argv"] = argv_;
    m["config"] = resolved;
    m["inputs"] = inputs_;
    m["started_at"] = started_;
    m["finished_at"] = utc_now();
    write_text(dir / "manifest.json", m.dump(2) + "\n");
  }

  static void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) fail(ErrorKind::data, "cannot write " + p.string());
    f << text;
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  nlohmann::json inputs_ = nlohmann::json::object();
  std::string started_;
};

struct LoadedModel {
  Model model;
  std::optional<Tokenizer> tokenizer;
  fs::path dir;

  const Tokenizer& tok() const {
    if (!tokenizer) fail(ErrorKind::config, "model at " + dir.string() + " has no tokenizer (vocab.json + merges.txt)");
    return *tokenizer;
  }
  InputEncoder encoder() const { return InputEncoder(model.config, tokenizer, load_image); }
};

// DIR holds config.json and model.safetensors, plus vocab.json and merges.txt
// for BPE models. Byte-level models (vocab <= 256) need no tokenizer files.
inline LoadedModel load_model_dir(Run& run, const std::string& arg) {
  LoadedModel lm;
  lm.dir = run.path(arg);
  const fs::path cfg = lm.dir / "config.json", weights = lm.dir / "model.safetensors";
  if (!fs::exists(cfg)) fail(ErrorKind::model, "no config.json in " + lm.dir.string());
  if (!fs::exists(weights)) fail(ErrorKind::model, "no model.safetensors in " + lm.dir.string());
  run.hash_input("model.config", cfg);
  run.hash_input("model.weights", weights);
  lm.model = load_model(cfg, weights);
  if (lm.model.config.model_id.empty()) lm.model.config.model_id = fs::absolute(lm.dir).lexically_normal().filename().string();
  const fs::path vocab = lm.dir / "vocab.json", merges = lm.dir / "merges.txt";
  if (fs::exists(vocab) && fs::exists(merges)) {
    run.hash_input("model.vocab", vocab);
    run.hash_input("model.merges", merges);
    lm.tokenizer = Tokenizer::load_bpe(vocab, merges);
  } else if (lm.model.config.arch == Arch::causal_lm && lm.model.config.vocab_size <= 256) {
    lm.tokenizer = Tokenizer::bytes();
  }
  return lm;
}

inline void copy_tokenizer(const LoadedModel& lm, const fs::path& dir) {
  for (const char* f : {"vocab.json", "merges.txt"})
    if (fs::exists(lm.dir / f)) fs::copy_file(lm.dir / f, dir / f, fs::copy_options::overwrite_existing);
}

inline AttentionModule load_module_checked(Run& run, const fs::path& p, const Model& model) {
  run.hash_input("module", p);
  auto mod = load_module(p, model.config.model_id);
  if (mod.model_mismatch)
    run.err << "warning: module " << p.string() << " was discovered on model '" << mod.model_id << "', not '"
            << model.config.model_id << "'\n";
  return mod;
}

// Resolves --module / --preset / --s / --mode. Explicit flags win over the
// preset, the preset over defaults.
struct SpecArgs {
  std::string module;
  std::string preset;
  std::string presets_file;
  float s = 1.0f;
  std::string mode = "runtime-hook";
  CLI::Option* s_opt = nullptr;
  CLI::Option* mode_opt = nullptr;

  void add(CLI::App* sub, bool with_s) {
    sub->add_option("--module", module, "module JSON from discover");
    sub->add_option("--preset", preset, "named scalar preset (e.g. sae_negative)");
    sub->add_option("--presets", presets_file, "preset file overriding the built-ins");
    if (with_s) s_opt = sub->add_option("--s", s, "intervention scalar");
    mode_opt = sub->add_option("--mode", mode, "runtime-hook | weight-edit")
                   ->check(CLI::IsMember({"runtime-hook", "weight-edit"}));
  }

  InterventionSpec resolve(Run& run, const Model& model) const {
    InterventionSpec spec;
    std::string module_path = module.empty() ? std::string() : run.path(module).string();
    spec.s = s;
    spec.mode = parse_mode(mode);
    if (!preset.empty()) {
      const auto presets = presets_file.empty() ? builtin_presets() : load_presets(run.path(presets_file));
      if (!presets_file.empty()) run.hash_input("presets", run.path(presets_file));
      const auto it = presets.find(preset);
      if (it == presets.end()) fail(ErrorKind::config, "unknown preset '" + preset + "'");
      if (!s_opt || s_opt->count() == 0) spec.s = it->second.s;
      if (mode_opt->count() == 0) spec.mode = it->second.mode;
      if (module_path.empty()) module_path = it->second.module_path;
    }
    if (module_path.empty()) fail(ErrorKind::config, "no module: pass --module or a preset that names one");
    spec.module = load_module_checked(run, module_path, model);
    validate_spec(spec, model.config);
    if (std::abs(spec.s) > kLargeScalarWarning)
      run.err << "warning: |s| = " << std::abs(spec.s) << " exceeds " << kLargeScalarWarning << "\n";
    return spec;
  }
};

inline nlohmann::json spec_json(const InterventionSpec& spec) {
  return {{"module", module_to_json(spec.module)}, {"s", spec.s}, {"mode", to_string(spec.mode)}};
}

// Prompts from repeated --prompt flags or the positives of a dataset file.
inline std::vector<std::string> gather_prompts(Run& run, const std::vector<std::string>& prompts, const std::string& dataset) {
  if (!prompts.empty() && !dataset.empty()) fail(ErrorKind::config, "pass --prompt or --dataset, not both");
  if (!dataset.empty()) {
    const auto p = run.path(dataset);
    run.hash_input("dataset", p);
    const auto ds = load_prompt_dataset(p);
    if (ds.images) fail(ErrorKind::data, "dataset " + p.string() + " holds images, not prompts");
    return ds.positives;
  }
  if (prompts.empty()) fail(ErrorKind::config, "no prompts: pass --prompt or --dataset");
  for (const auto& p : prompts)
    if (p.empty()) fail(ErrorKind::data, "empty prompt");
  return prompts;
}

inline std::vector<float> parse_s_range(const std::string& r) {
  std::vector<double> parts;
  std::stringstream ss(r);
  std::string item;
  while (std::getline(ss, item, ':')) {
    try {
      size_t used = 0;
      parts.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorKind::config, "bad --s-range '" + r + "' (expected a:b:step)");
    }
  }
  if (parts.size() != 3 || !(parts[2] > 0) || parts[1] < parts[0])
    fail(ErrorKind::config, "bad --s-range '" + r + "' (expected a:b:step with a <= b, step > 0)");
  std::vector<float> out;
  const int n = static_cast<int>(std::floor((parts[1] - parts[0]) / parts[2] + 1e-9));
  for (int i = 0; i <= n; ++i) out.push_back(static_cast<float>(parts[0] + i * parts[2]));
  return out;
}

inline std::vector<LabeledImage> load_labeled_images(Run& run, const LoadedModel& lm, const std::string& file) {
  const auto p = run.path(file);
  run.hash_input("images", p);
  const auto ds = load_prompt_dataset(p);
  if (!ds.images) fail(ErrorKind::data, p.string() + " holds no image entries");
  const auto enc = lm.encoder();
  std::vector<LabeledImage> out;
  for (size_t i = 0; i < ds.positives.size(); ++i) {
    if (ds.labels[i] < 0) fail(ErrorKind::data, "image " + ds.positives[i] + " has no label");
    out.push_back({std::get<ImageInput>(enc.image(ds.positives[i], PositionSpec::cls())).image, ds.labels[i]});
  }
  return out;
}

// Options of `sub` as a JSON object, after flags, config file and defaults
// have been merged.
inline nlohmann::json resolved_options(const CLI::App* app) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* opt : app->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string& name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    const auto& res = opt->results();
    if (res.empty()) {
      if (opt->get_type_size() == 0) j[name] = false;
      else if (!opt->get_default_str().empty()) j[name] = opt->get_default_str();
      else j[name] = nullptr;
    } else if (opt->get_type_size() == 0) {
      j[name] = true;
    } else if (res.size() == 1 && opt->get_expected_max() <= 1) {
      j[name] = res.front();
    } else {
      j[name] = res;
    }
  }
  return j;
}

inline std::string fixed(double v, int prec = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

// ---------------------------------------------------------------- discover

struct DiscoverArgs {
  std::string model, concept_kind = "diff-means", dataset, vector, position, out;
  std::optional<int> k, layer;
  int label = -1;
  std::optional<double> filter_frac;
};

inline void cmd_discover(Run& run, const DiscoverArgs& a) {
  const auto lm = load_model_dir(run, a.model);
  const Model& model = lm.model;
  const int total = model.n_layers() * model.n_heads();
  const int k = a.k.value_or(model.config.arch == Arch::vit_classifier ? 3 : 5);
  if (k < 1 || k > total)
    fail(ErrorKind::config, "--k " + std::to_string(k) + " out of range [1, " + std::to_string(total) + "]");
  const int layer = a.layer.value_or(model.n_layers());
  if (layer < 1 || layer > model.n_layers())
    fail(ErrorKind::config, "--layer " + std::to_string(layer) + " out of range [1, " + std::to_string(model.n_layers()) + "]");
  if (a.dataset.empty()) fail(ErrorKind::config, "--dataset is required");

  const fs::path ds_path = run.path(a.dataset);
  run.hash_input("dataset", ds_path);
  PromptDataset ds = load_prompt_dataset(ds_path);
  const PositionSpec pos = a.position.empty() ? ds.position : parse_position(a.position);
  const auto enc = lm.encoder();

  std::vector<std::string> positives = ds.positives, negatives;
  if (ds.negatives) negatives = *ds.negatives;
  if (ds.images && a.label >= 0) {
    positives.clear();
    for (size_t i = 0; i < ds.positives.size(); ++i)
      (ds.labels[i] == a.label ? positives : negatives).push_back(ds.positives[i]);
    if (positives.empty()) fail(ErrorKind::data, "no images with label " + std::to_string(a.label));
  }
  auto inputs = enc.encode(positives, ds.images, pos);

  std::optional<ConceptVector> v;
  if (a.concept_kind == "diff-means") {
    const char* cache_env = std::getenv("ATTNMOD_CACHE_DIR");
    fs::path cache_file;
    if (cache_env && *cache_env) {
      const std::string key = run.input_hash("model.weights") + run.input_hash("dataset") + std::to_string(layer) +
                              pos.str() + std::to_string(a.label);
      uint64_t h = 0xcbf29ce484222325ull;
      for (unsigned char c : key) h = (h ^ c) * 0x100000001b3ull;
      cache_file = fs::path(cache_env) / ("diffmeans-" + hex64(h) + ".bin");
    }
    if (!cache_file.empty() && fs::exists(cache_file)) {
      v.emplace(read_vector_file(cache_file), ConceptSource{ConceptSource::Kind::diff_means, layer, pos, -1, {}});
      if (static_cast<int>(v->size()) != model.d_model()) fail(ErrorKind::data, "stale cache entry " + cache_file.string());
    } else {
      v.emplace(concept_diff_means(model, inputs, enc.encode(negatives, ds.images, pos), layer, pos));
      if (!cache_file.empty()) {
        fs::create_directories(cache_file.parent_path());
        write_vector_file(cache_file, v->values());
      }
    }
  } else if (a.concept_kind == "unembed") {
    if (a.label < 0) fail(ErrorKind::config, "--concept unembed needs --label");
    v.emplace(concept_from_unembedding(model, a.label));
  } else {
    if (a.vector.empty()) fail(ErrorKind::config, "--concept external needs --vector");
    const fs::path vp = run.path(a.vector);
    run.hash_input("vector", vp);
    v.emplace(concept_load_external(vp, model.d_model()));
  }

  int filtered_out = 0;
  if (a.filter_frac) {
    const auto fr = filter_by_activation(model, inputs, *v, *a.filter_frac, layer);
    std::vector<ModelInput> kept;
    for (size_t i : fr.kept) kept.push_back(inputs[i]);
    filtered_out = static_cast<int>(inputs.size() - kept.size());
    inputs = std::move(kept);
  }

  const auto scores = score_heads(model, inputs, *v, run.threads);
  const auto module = select_topk(scores, k, model.config.model_id);

  const fs::path out = run.out_dir(a.out);
  Run::write_text(out / "heatmap.csv", heatmap_csv(scores));
  Run::write_text(out / "heatmap.svg", heatmap_svg(scores, &module));
  Run::write_text(out / "heatmap.json", heatmap_metadata(scores, &module).dump(2) + "\n");
  Run::write_text(out / "sorted_scores.csv", sorted_scores_csv(scores));
  save_module(module, out / "module.json");
  write_vector_file(out / "concept.bin", v->values());
  run.resolved["k"] = k;
  run.resolved["layer"] = layer;
  run.resolved["position"] = pos.str();
  run.resolved["n_inputs"] = inputs.size();
  run.resolved["filtered_out"] = filtered_out;
  run.write_manifest(out);

  run.out << "concept " << v->source().str() << ", " << inputs.size() << " inputs\n";
  for (const auto& h : module.heads)
    run.out << "  layer " << h.id.layer + 1 << " head " << h.id.head + 1 << "  " << fixed(h.score) << "\n";
}

// ---------------------------------------------------------------- intervene

struct GenArgs {
  int max_new_tokens = 32;
  bool sample = false;
  uint64_t seed = 0;
  float temperature = 1.0f;

  void add(CLI::App* sub) {
    sub->add_option("--max-new-tokens", max_new_tokens)->check(CLI::NonNegativeNumber);
    sub->add_flag("--sample", sample, "sample instead of greedy decoding");
    sub->add_option("--seed", seed);
    sub->add_option("--temperature", temperature);
  }
  GenerateParams params() const {
    return {max_new_tokens, sample ? GenerateParams::Mode::sample : GenerateParams::Mode::greedy, seed, temperature};
  }
};

struct InterveneArgs {
  std::string model, dataset, out;
  std::vector<std::string> prompts, targets;
  SpecArgs spec;
  GenArgs gen;
};

inline void cmd_intervene(Run& run, const InterveneArgs& a) {
  const auto lm = load_model_dir(run, a.model);
  const auto spec = a.spec.resolve(run, lm.model);
  const auto prompts = gather_prompts(run, a.prompts, a.dataset);
  const Tokenizer& tok = lm.tok();
  const auto params = a.gen.params();

  EditReport er;
  std::optional<Model> edited;
  if (spec.mode == InterventionMode::weight_edit) edited = edit_weights(lm.model, spec, &er);
  const auto scaling = head_scaling(spec, lm.model.config);

  const fs::path out = run.out_dir(a.out);
  std::ostringstream lines;
  int identical = 0;
  for (size_t i = 0; i < prompts.size(); ++i) {
    const auto base = generate_ids(lm.model, tok, prompts[i], params);
    const auto inter = edited ? generate_ids(*edited, tok, prompts[i], params)
                              : generate_ids(lm.model, tok, prompts[i], params, &scaling);
    identical += base.new_ids == inter.new_ids;
    nlohmann::json row{{"index", i}, {"prompt", prompts[i]}, {"baseline", base.text}, {"intervened", inter.text}};
    lines << row.dump() << "\n";
    run.out << "[" << i << "] " << prompts[i] << "\n    baseline:   " << base.text << "\n    intervened: " << inter.text
            << "\n";
  }
  Run::write_text(out / "generations.jsonl", lines.str());

  nlohmann::json report{{"intervention", spec_json(spec)}, {"n_prompts", prompts.size()}, {"n_identical", identical}};
  if (!a.targets.empty()) {
    const auto shift = concept_token_logprob_shift(lm.model, tok, spec, prompts, a.targets);
    const auto st = sign_test(shift.values);
    report["logprob_shift"] = shift.to_json();
    report["sign_test"] = {{"positive", st.positive}, {"negative", st.negative}, {"zero", st.zero}, {"p_value", st.p_value}};
    run.out << "logprob shift " << fixed(shift.aggregate) << " (sign test p=" << st.p_value << ")\n";
  }
  Run::write_text(out / "report.json", report.dump(2) + "\n");
  if (edited) {
    Run::write_text(out / "edit_report.json", edit_report_json(er).dump(2) + "\n");
    save_model(*edited, out / "config.json", out / "model.safetensors");
    copy_tokenizer(lm, out);
    run.out << "edited " << er.elements_scaled << " of " << er.total_params << " parameters (" << fixed(100 * er.fraction, 4)
            << "%)\n";
  }
  run.resolved["s"] = spec.s;
  run.resolved["mode"] = to_string(spec.mode);
  run.write_manifest(out);
}

// ---------------------------------------------------------------- gridsearch

struct GridArgs {
  std::string model, dataset, out, objective = "logprob-shift", markers;
  std::vector<std::string> prompts, targets;
  std::vector<float> s_list;
  bool minimize = false;
  int ngram = 1;
  SpecArgs spec;
  GenArgs gen;
};

inline void cmd_gridsearch(Run& run, const GridArgs& a) {
  const auto lm = load_model_dir(run, a.model);
  const auto tmpl = a.spec.resolve(run, lm.model);
  const auto prompts = gather_prompts(run, a.prompts, a.dataset);
  const Tokenizer& tok = lm.tok();
  const auto params = a.gen.params();
  for (float s : a.s_list)
    if (std::abs(s) > kLargeScalarWarning) run.err << "warning: candidate s = " << s << " exceeds " << kLargeScalarWarning << "\n";
  if (a.objective == "logprob-shift" && a.targets.empty()) fail(ErrorKind::config, "--objective logprob-shift needs --target");
  std::vector<std::string> markers = default_refusal_markers();
  if (!a.markers.empty()) {
    run.hash_input("markers", run.path(a.markers));
    markers = load_markers(run.path(a.markers));
  }
  const double sign = a.minimize ? -1.0 : 1.0;

  auto generations = [&](const InterventionSpec& spec) {
    std::vector<std::string> gens;
    for (const auto& p : prompts) gens.push_back(generate_with_intervention(lm.model, tok, p, spec, params).text);
    return gens;
  };
  auto objective = [&](const InterventionSpec& spec) -> double {
    if (a.objective == "logprob-shift") return sign * concept_token_logprob_shift(lm.model, tok, spec, prompts, a.targets).aggregate;
    const auto gens = generations(spec);
    if (a.objective == "refusal") return sign * refusal_rate(gens, markers).aggregate;
    double sum = 0.0;
    for (const auto& g : gens) sum += repetition_score(g, a.ngram);
    return sign * sum / static_cast<double>(gens.size());
  };
  const auto res = grid_search_scalar(tmpl, a.s_list, objective);

  const fs::path out = run.out_dir(a.out);
  std::ostringstream csv;
  csv << "s,value,error\n";
  nlohmann::json table = nlohmann::json::array();
  for (const auto& row : res.table) {
    csv << row.s << ',' << (row.value ? fixed(sign * *row.value, 8) : "") << ',' << row.error << '\n';
    table.push_back({{"s", row.s}, {"value", row.value ? nlohmann::json(sign * *row.value) : nlohmann::json()}, {"error", row.error}});
  }
  Run::write_text(out / "gridsearch.csv", csv.str());
  nlohmann::json j{{"objective", a.objective},
                   {"direction", a.minimize ? "minimize" : "maximize"},
                   {"best_s", res.best_s},
                   {"best_value", sign * res.best_value},
                   {"mode", to_string(tmpl.mode)},
                   {"module", module_to_json(tmpl.module)},
                   {"table", table}};
  Run::write_text(out / "gridsearch.json", j.dump(2) + "\n");
  run.write_manifest(out);
  run.out << "best s = " << res.best_s << " (" << a.objective << " " << fixed(sign * res.best_value) << ")\n";
}

// ---------------------------------------------------------------- classify / vit-sweep

struct ClassifyArgs {
  std::string model, images, module, out;
  std::vector<std::string> image;
  float s = 1.0f;
};

inline void cmd_classify(Run& run, const ClassifyArgs& a) {
  const auto lm = load_model_dir(run, a.model);
  if (lm.model.config.arch != Arch::vit_classifier) fail(ErrorKind::config, "classify requires a vit-classifier model");
  std::vector<std::string> paths;
  std::vector<int> labels;
  if (!a.images.empty()) {
    const auto p = run.path(a.images);
    run.hash_input("images", p);
    const auto ds = load_prompt_dataset(p);
    if (!ds.images) fail(ErrorKind::data, p.string() + " holds no image entries");
    paths = ds.positives;
    labels = ds.labels;
  }
  for (const auto& p : a.image) {
    paths.push_back(run.path(p).string());
    labels.push_back(-1);
  }
  if (paths.empty()) fail(ErrorKind::config, "no images: pass --images or --image");
  std::optional<HeadScaling> scaling;
  if (!a.module.empty()) {
    const auto mod = load_module_checked(run, run.path(a.module), lm.model);
    scaling = head_scaling({mod, a.s, InterventionMode::runtime_hook}, lm.model.config);
  }
  const auto enc = lm.encoder();
  const auto& names = lm.model.config.labels;
  std::ostringstream lines;
  int correct = 0, labeled = 0;
  for (size_t i = 0; i < paths.size(); ++i) {
    const auto img = std::get<ImageInput>(enc.image(paths[i], PositionSpec::cls())).image;
    const auto c = classify(lm.model, img, scaling ? &*scaling : nullptr);
    nlohmann::json row{{"path", paths[i]}, {"pred", c.label}, {"score", c.scores[static_cast<size_t>(c.label)]}};
    if (!names.empty()) row["pred_name"] = names[static_cast<size_t>(c.label)];
    if (labels[i] >= 0) {
      row["label"] = labels[i];
      ++labeled;
      correct += labels[i] == c.label;
    }
    lines << row.dump() << "\n";
    run.out << paths[i] << "\t" << c.label << (names.empty() ? "" : "\t" + names[static_cast<size_t>(c.label)]) << "\n";
  }
  if (labeled) run.out << "accuracy " << fixed(static_cast<double>(correct) / labeled, 4) << " on " << labeled << " labeled images\n";
  if (!a.out.empty()) {
    const fs::path out = run.out_dir(a.out);
    Run::write_text(out / "predictions.jsonl", lines.str());
    run.write_manifest(out);
  }
}

struct SweepArgs {
  std::string model, images, module, s_range = "-1:1:0.25", out;
  std::vector<float> s_list;
  int label = -1;
};

inline void cmd_vit_sweep(Run& run, const SweepArgs& a) {
  const auto lm = load_model_dir(run, a.model);
  const auto mod = load_module_checked(run, run.path(a.module), lm.model);
  const auto images = load_labeled_images(run, lm, a.images);
  const auto s_values = a.s_list.empty() ? parse_s_range(a.s_range) : a.s_list;
  const auto sweep = vit_accuracy_sweep(lm.model, mod, images, a.label, s_values);
  const fs::path out = run.out_dir(a.out);
  Run::write_text(out / "sweep.csv", sweep.csv());
  Run::write_text(out / "report.json", sweep.report.to_json().dump(2) + "\n");
  run.resolved["s_values"] = s_values;
  run.write_manifest(out);
  run.out << "baseline target " << fixed(sweep.baseline.target_acc, 4) << " overall " << fixed(sweep.baseline.overall_acc, 4)
          << "\n";
  for (const auto& r : sweep.rows)
    run.out << "s=" << r.s << "  target " << fixed(r.target_acc, 4) << "  overall " << fixed(r.overall_acc, 4) << "\n";
}

// ---------------------------------------------------------------- make-planted

struct PlantedArgs {
  std::string arch = "causal-lm", out;
  uint64_t seed = 0;
  std::optional<int> planted_layer, planted_head;
  int label = -1, target_heads = 3, images_per_class = 8;
};

inline void cmd_make_planted(Run& run, const PlantedArgs& a) {
  const fs::path out = run.out_dir(a.out);
  nlohmann::json info{{"seed", a.seed}, {"arch", a.arch}};
  if (a.arch == "causal-lm") {
    PlantedLmOptions opt;
    if (a.planted_layer) opt.planted_layer = *a.planted_layer - 1;
    if (a.planted_head) opt.planted_head = *a.planted_head - 1;
    if (opt.planted_layer < 0 || opt.planted_layer >= opt.n_layers || opt.planted_head < 0 || opt.planted_head >= opt.n_heads)
      fail(ErrorKind::config, "planted head (layer " + std::to_string(opt.planted_layer + 1) + ", head " +
                                  std::to_string(opt.planted_head + 1) + ") outside the " + std::to_string(opt.n_layers) +
                                  "x" + std::to_string(opt.n_heads) + " head grid");
    const auto pl = make_planted_lm(a.seed, opt);
    save_model(pl.model, out / "config.json", out / "model.safetensors");
    write_vector_file(out / "vstar.bin", pl.direction);
    std::ostringstream lines;
    for (const auto& t : pl.triggers) lines << nlohmann::json{{"text", t}}.dump() << "\n";
    Run::write_text(out / "triggers.jsonl", lines.str());
    info["planted"] = {{"layer", pl.planted.layer + 1}, {"head", pl.planted.head + 1}};
    info["token_a"] = std::string(1, static_cast<char>(pl.token_a));
    info["token_b"] = std::string(1, static_cast<char>(pl.token_b));
    run.out << "planted head: layer " << pl.planted.layer + 1 << " head " << pl.planted.head + 1 << "\n";
  } else if (a.arch == "vit") {
    PlantedVitOptions opt;
    if (a.planted_layer) opt.planted_layer = *a.planted_layer - 1;
    if (a.planted_head) opt.planted_head = *a.planted_head - 1;
    if (a.label >= 0) opt.target = a.label;
    opt.n_target_heads = a.target_heads;
    if (opt.planted_layer < 0 || opt.planted_layer >= opt.n_layers || opt.planted_head < 0 || opt.planted_head >= opt.n_heads)
      fail(ErrorKind::config, "planted head (layer " + std::to_string(opt.planted_layer + 1) + ", head " +
                                  std::to_string(opt.planted_head + 1) + ") outside the " + std::to_string(opt.n_layers) +
                                  "x" + std::to_string(opt.n_heads) + " head grid");
    const auto pv = make_planted_vit(a.seed, opt);
    save_model(pv.model, out / "config.json", out / "model.safetensors");
    const auto row = pv.model.unembed_w->row(pv.target);
    write_vector_file(out / "vstar.bin", std::vector<float>(row.begin(), row.end()));
    const auto set = planted_image_set(pv, a.images_per_class, a.seed + 1);
    std::ostringstream lines;
    for (size_t i = 0; i < set.size(); ++i) {
      std::ostringstream name;
      name << "image_" << std::setw(4) << std::setfill('0') << i << ".npy";
      save_npy_image(out / name.str(), set[i].raw);
      lines << nlohmann::json{{"path", name.str()}, {"label", set[i].label}}.dump() << "\n";
    }
    Run::write_text(out / "images.jsonl", lines.str());
    nlohmann::json heads = nlohmann::json::array();
    for (const auto& h : pv.target_heads) heads.push_back({{"layer", h.layer + 1}, {"head", h.head + 1}});
    info["target"] = pv.target;
    info["target_heads"] = heads;
    info["generic"] = {{"layer", pv.generic.layer + 1}, {"head", pv.generic.head + 1}};
    run.out << "planted target " << pv.target << " in " << pv.target_heads.size() << " heads\n";
  } else {
    fail(ErrorKind::config, "unknown --arch '" + a.arch + "'");
  }
  Run::write_text(out / "planted.json", info.dump(2) + "\n");
  run.write_manifest(out);
}

// ---------------------------------------------------------------- entry

inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"attention module discovery and scalar intervention"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "TOML/INI file of option defaults; flags override it");
  app.require_subcommand(1);
  app.fallthrough();
  std::string workdir = ".";
  int threads = 1;
  app.add_option("--workdir", workdir, "base for relative paths");
  app.add_option("--threads", threads, "worker threads for scoring")->check(CLI::PositiveNumber);

  DiscoverArgs d;
  auto* disc = app.add_subcommand("discover", "score heads against a concept and select the top K");
  disc->add_option("--model", d.model, "model directory")->required();
  disc->add_option("--concept", d.concept_kind)->check(CLI::IsMember({"diff-means", "unembed", "external"}));
  disc->add_option("--dataset", d.dataset, "JSONL prompts, pairs or images");
  disc->add_option("--k", d.k, "module size (default 5 for text, 3 for vision)");
  disc->add_option("--layer", d.layer, "residual index for diff-means, 1..L (default L)");
  disc->add_option("--position", d.position, "last | cls | token index");
  disc->add_option("--label", d.label, "class id (unembed, or image subset for diff-means)");
  disc->add_option("--vector", d.vector, "external concept vector file");
  disc->add_option("--filter-frac", d.filter_frac, "keep inputs whose concept activation reaches this fraction of the max");
  disc->add_option("--out", d.out)->required();

  InterveneArgs iv;
  auto* inter = app.add_subcommand("intervene", "generate with module heads scaled by s");
  inter->add_option("--model", iv.model)->required();
  iv.spec.add(inter, true);
  inter->add_option("--prompt", iv.prompts, "prompt (repeatable)");
  inter->add_option("--dataset", iv.dataset);
  inter->add_option("--target", iv.targets, "concept token(s) for the log-probability shift");
  iv.gen.add(inter);
  inter->add_option("--out", iv.out)->required();

  GridArgs g;
  auto* grid = app.add_subcommand("gridsearch", "pick s from a candidate list");
  grid->add_option("--model", g.model)->required();
  g.spec.add(grid, false);
  grid->add_option("--s-list", g.s_list, "comma-separated candidates")->delimiter(',')->required();
  grid->add_option("--objective", g.objective)->check(CLI::IsMember({"logprob-shift", "refusal", "repetition"}));
  grid->add_flag("--minimize", g.minimize);
  grid->add_option("--prompt", g.prompts);
  grid->add_option("--dataset", g.dataset);
  grid->add_option("--target", g.targets);
  grid->add_option("--markers", g.markers, "refusal marker file");
  grid->add_option("--ngram", g.ngram)->check(CLI::PositiveNumber);
  g.gen.add(grid);
  grid->add_option("--out", g.out)->required();

  ClassifyArgs c;
  auto* cls = app.add_subcommand("classify", "predict image labels");
  cls->add_option("--model", c.model)->required();
  cls->add_option("--images", c.images, "JSONL of {path, label}");
  cls->add_option("--image", c.image, "image file (repeatable)");
  cls->add_option("--module", c.module);
  cls->add_option("--s", c.s);
  cls->add_option("--out", c.out);

  SweepArgs sw;
  auto* sweep = app.add_subcommand("vit-sweep", "target and overall accuracy across s");
  sweep->add_option("--model", sw.model)->required();
  sweep->add_option("--module", sw.module)->required();
  sweep->add_option("--images", sw.images)->required();
  sweep->add_option("--label", sw.label, "target class id")->required();
  sweep->add_option("--s-range", sw.s_range, "a:b:step");
  sweep->add_option("--s-list", sw.s_list)->delimiter(',');
  sweep->add_option("--out", sw.out)->required();

  PlantedArgs p;
  auto* plant = app.add_subcommand("make-planted", "write a model with a known planted head");
  plant->add_option("--arch", p.arch)->check(CLI::IsMember({"causal-lm", "vit"}));
  plant->add_option("--seed", p.seed);
  plant->add_option("--planted-layer", p.planted_layer, "1-based");
  plant->add_option("--planted-head", p.planted_head, "1-based");
  plant->add_option("--label", p.label, "vit target class");
  plant->add_option("--target-heads", p.target_heads, "vit: heads carrying the target");
  plant->add_option("--images-per-class", p.images_per_class)->check(CLI::PositiveNumber);
  plant->add_option("--out", p.out)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? 0 : exit_code(ErrorKind::config);
  }

  CLI::App* sub = app.get_subcommands().front();
  Run run(sub->get_name(), args, out, err);
  run.workdir = workdir;
  run.threads = threads;
  run.resolved = resolved_options(sub);
  run.resolved["workdir"] = workdir;
  run.resolved["threads"] = threads;
  try {
    if (sub == disc) cmd_discover(run, d);
    else if (sub == inter) cmd_intervene(run, iv);
    else if (sub == grid) cmd_gridsearch(run, g);
    else if (sub == cls) cmd_classify(run, c);
    else if (sub == sweep) cmd_vit_sweep(run, sw);
    else cmd_make_planted(run, p);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(ErrorKind::data);
  }
  return 0;
}

}  // namespace attnmod::cli
