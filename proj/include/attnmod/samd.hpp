#pragma once

// Attention-module discovery: score every head by its dataset-averaged cosine
// similarity with a concept vector and keep the TopK.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "attnmod/concepts.hpp"
#include "attnmod/runtime.hpp"

namespace attnmod {

struct HeadId {
  int layer = 0;  // 0-based
  int head = 0;   // 0-based
  auto operator<=>(const HeadId&) const = default;
};

// L x H matrix of mean cosine similarities, stored layer-major.
struct HeadScoreMatrix {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> scores;
  int n_prompts = 0;
  std::string concept_tag;
  std::string position_tag;

  double at(int layer, int head) const { return scores[static_cast<size_t>(layer * n_heads + head)]; }
  double& at(int layer, int head) { return scores[static_cast<size_t>(layer * n_heads + head)]; }
};

// cos(a, v); defined as 0 when a is the zero vector.
inline double cosine(std::span<const float> a, std::span<const float> v, double v_norm) {
  double dot = 0.0, sq = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * v[i];
    sq += static_cast<double>(a[i]) * a[i];
  }
  if (sq == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(sq) * v_norm), -1.0, 1.0);
}

// Per-head cosines for one input: one traced forward pass.
inline std::vector<double> head_cosines(const Model& model, const ModelInput& input, const ConceptVector& v) {
  const auto traced = forward_traced(model, input);
  const int nl = model.n_layers(), nh = model.n_heads();
  std::vector<double> out(static_cast<size_t>(nl * nh));
  for (int l = 0; l < nl; ++l)
    for (int h = 0; h < nh; ++h) out[static_cast<size_t>(l * nh + h)] = cosine(traced.trace.head(l, h), v.values(), v.norm());
  return out;
}

// Mean over inputs of cos(a[l][h], v). Inputs may be scored on `threads`
// workers; per-input matrices are folded in input order.
inline HeadScoreMatrix score_heads(const Model& model, const std::vector<ModelInput>& inputs, const ConceptVector& v,
                                   int threads = 1) {
  if (inputs.empty()) fail(ErrorKind::data, "empty positive dataset");
  if (static_cast<int>(v.size()) != model.d_model())
    fail(ErrorKind::config, "concept vector length " + std::to_string(v.size()) + " does not match d_model " +
                                std::to_string(model.d_model()));
  std::vector<std::vector<double>> per_input(inputs.size());
  auto score_one = [&](size_t i) {
    try {
      per_input[i] = head_cosines(model, inputs[i], v);
    } catch (const Error& e) {
      throw Error(e.kind(), "prompt " + std::to_string(i) + ": " + e.what());
    }
  };
  threads = std::max(1, std::min<int>(threads, static_cast<int>(inputs.size())));
  if (threads == 1) {
    for (size_t i = 0; i < inputs.size(); ++i) score_one(i);
  } else {
    std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (size_t i = static_cast<size_t>(t); i < inputs.size(); i += static_cast<size_t>(threads)) score_one(i);
        } catch (...) {
          errors[static_cast<size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  HeadScoreMatrix m;
  m.n_layers = model.n_layers();
  m.n_heads = model.n_heads();
  m.scores.assign(static_cast<size_t>(m.n_layers * m.n_heads), 0.0);
  m.n_prompts = static_cast<int>(inputs.size());
  m.concept_tag = v.source().str();
  m.position_tag = std::visit([](const auto& in) { return in.position.str(); }, inputs.front());
  for (const auto& cos : per_input)
    for (size_t i = 0; i < cos.size(); ++i) m.scores[i] += cos[i];
  for (auto& s : m.scores) {
    s /= static_cast<double>(inputs.size());
    if (!std::isfinite(s)) fail(ErrorKind::numeric, "non-finite head score");
  }
  return m;
}

struct RankedHead {
  int rank = 0;  // 1-based
  double score = 0.0;
  HeadId id;
};

// Full descending ranking; ties go to the lower layer, then the lower head.
inline std::vector<RankedHead> sorted_scores(const HeadScoreMatrix& m) {
  std::vector<RankedHead> out;
  out.reserve(m.scores.size());
  for (int l = 0; l < m.n_layers; ++l)
    for (int h = 0; h < m.n_heads; ++h) out.push_back({0, m.at(l, h), {l, h}});
  std::stable_sort(out.begin(), out.end(), [](const RankedHead& a, const RankedHead& b) { return a.score > b.score; });
  for (size_t i = 0; i < out.size(); ++i) out[i].rank = static_cast<int>(i) + 1;
  return out;
}

struct ModuleHead {
  HeadId id;
  double score = 0.0;
  bool operator==(const ModuleHead&) const = default;
};

struct AttentionModule {
  std::vector<ModuleHead> heads;  // score non-increasing
  std::string model_id;
  std::string concept_tag;
  std::string position_tag;
  bool model_mismatch = false;  // set by load_module when the file names another model

  int k() const { return static_cast<int>(heads.size()); }
  bool contains(HeadId id) const {
    return std::any_of(heads.begin(), heads.end(), [&](const ModuleHead& h) { return h.id == id; });
  }
  bool operator==(const AttentionModule& o) const {
    return heads == o.heads && model_id == o.model_id && concept_tag == o.concept_tag && position_tag == o.position_tag;
  }
};

inline void validate_module(const AttentionModule& m) {
  if (m.heads.empty()) fail(ErrorKind::data, "module must contain at least one head");
  std::set<HeadId> seen;
  for (size_t i = 0; i < m.heads.size(); ++i) {
    const auto& h = m.heads[i];
    if (h.id.layer < 0 || h.id.head < 0) fail(ErrorKind::data, "module head indices must be >= 1");
    if (!seen.insert(h.id).second)
      fail(ErrorKind::data, "duplicate head (layer " + std::to_string(h.id.layer + 1) + ", head " +
                                std::to_string(h.id.head + 1) + ") in module");
    if (i > 0 && h.score > m.heads[i - 1].score) fail(ErrorKind::data, "module scores must be non-increasing");
  }
}

inline AttentionModule select_topk(const HeadScoreMatrix& m, int k, const std::string& model_id = {}) {
  const int total = m.n_layers * m.n_heads;
  if (k < 1 || k > total)
    fail(ErrorKind::config, "k=" + std::to_string(k) + " out of range [1, " + std::to_string(total) + "]");
  const auto ranked = sorted_scores(m);
  AttentionModule mod;
  mod.model_id = model_id;
  mod.concept_tag = m.concept_tag;
  mod.position_tag = m.position_tag;
  for (int i = 0; i < k; ++i) mod.heads.push_back({ranked[static_cast<size_t>(i)].id, ranked[static_cast<size_t>(i)].score});
  return mod;
}

// Module from explicit heads, e.g. a random control; scores are left at 0.
inline AttentionModule module_from_heads(const std::vector<HeadId>& ids, const std::string& model_id = {}) {
  AttentionModule mod;
  mod.model_id = model_id;
  mod.concept_tag = "manual";
  mod.position_tag = "n/a";
  for (const auto& id : ids) mod.heads.push_back({id, 0.0});
  validate_module(mod);
  return mod;
}

inline constexpr int kModuleSchemaVersion = 1;

inline nlohmann::json module_to_json(const AttentionModule& m) {
  nlohmann::json j;
  j["version"] = kModuleSchemaVersion;
  j["model"] = m.model_id;
  j["concept"] = m.concept_tag;
  j["position"] = m.position_tag;
  j["k"] = m.k();
  j["heads"] = nlohmann::json::array();
  for (const auto& h : m.heads) j["heads"].push_back({{"layer", h.id.layer + 1}, {"head", h.id.head + 1}, {"score", h.score}});
  return j;
}

// `expected_model`, when non-empty and different from the file's model, sets
// model_mismatch instead of failing.
inline AttentionModule module_from_json(const nlohmann::json& j, const std::string& expected_model = {}) {
  AttentionModule m;
  try {
    if (!j.contains("version")) fail(ErrorKind::data, "module schema mismatch: missing version");
    const int version = j.at("version").get<int>();
    if (version != kModuleSchemaVersion) fail(ErrorKind::data, "unknown module version " + std::to_string(version));
    for (const char* key : {"model", "concept", "position", "k", "heads"})
      if (!j.contains(key)) fail(ErrorKind::data, std::string("module schema mismatch: missing ") + key);
    m.model_id = j["model"].get<std::string>();
    m.concept_tag = j["concept"].get<std::string>();
    m.position_tag = j["position"].get<std::string>();
    for (const auto& h : j["heads"])
      m.heads.push_back({{h.at("layer").get<int>() - 1, h.at("head").get<int>() - 1}, h.at("score").get<double>()});
    if (j["k"].get<int>() != m.k()) fail(ErrorKind::data, "module schema mismatch: k does not match heads");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, std::string("module schema mismatch: ") + e.what());
  }
  validate_module(m);
  m.model_mismatch = !expected_model.empty() && expected_model != m.model_id;
  return m;
}

inline void save_module(const AttentionModule& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::data, "cannot write " + path.string());
  out << module_to_json(m).dump(2) << '\n';
}

inline AttentionModule load_module(const std::filesystem::path& path, const std::string& expected_model = {}) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::data, "cannot open module " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, "module " + path.string() + ": " + e.what());
  }
  return module_from_json(j, expected_model);
}

namespace detail {

inline std::string fmt_score(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

// Diverging blue-white-red for [-1, 1].
inline std::string score_color(double v) {
  v = std::clamp(v, -1.0, 1.0);
  int r = 255, g = 255, b = 255;
  if (v >= 0) {
    g = b = static_cast<int>(std::lround(255 * (1.0 - v)));
  } else {
    r = g = static_cast<int>(std::lround(255 * (1.0 + v)));
  }
  std::ostringstream os;
  os << "rgb(" << r << ',' << g << ',' << b << ')';
  return os.str();
}

}  // namespace detail

// H rows x L columns, header layer_1..layer_L.
inline std::string heatmap_csv(const HeadScoreMatrix& m) {
  std::ostringstream os;
  for (int l = 0; l < m.n_layers; ++l) os << (l ? "," : "") << "layer_" << (l + 1);
  os << '\n';
  for (int h = 0; h < m.n_heads; ++h) {
    for (int l = 0; l < m.n_layers; ++l) os << (l ? "," : "") << detail::fmt_score(m.at(l, h));
    os << '\n';
  }
  return os.str();
}

inline nlohmann::json heatmap_metadata(const HeadScoreMatrix& m, const AttentionModule* module) {
  nlohmann::json j;
  j["rows"] = "heads 1..H";
  j["columns"] = "layers 1..L";
  j["n_layers"] = m.n_layers;
  j["n_heads"] = m.n_heads;
  j["n_prompts"] = m.n_prompts;
  j["concept"] = m.concept_tag;
  j["position"] = m.position_tag;
  if (module) j["topk"] = module_to_json(*module)["heads"];
  return j;
}

inline std::string heatmap_svg(const HeadScoreMatrix& m, const AttentionModule* module) {
  constexpr int cell = 24, margin = 60;
  const int w = margin + m.n_layers * cell + 20, h = margin + m.n_heads * cell + 20;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << margin << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"12\">layer</text>\n";
  os << "<text x=\"8\" y=\"" << margin - 8 << "\" font-family=\"sans-serif\" font-size=\"12\">head</text>\n";
  for (int l = 0; l < m.n_layers; ++l)
    os << "<text x=\"" << margin + l * cell + cell / 2 << "\" y=\"" << margin - 8
       << "\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"middle\">" << l + 1 << "</text>\n";
  for (int hd = 0; hd < m.n_heads; ++hd)
    os << "<text x=\"" << margin - 6 << "\" y=\"" << margin + hd * cell + cell / 2 + 3
       << "\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"end\">" << hd + 1 << "</text>\n";
  for (int hd = 0; hd < m.n_heads; ++hd)
    for (int l = 0; l < m.n_layers; ++l)
      os << "<rect x=\"" << margin + l * cell << "\" y=\"" << margin + hd * cell << "\" width=\"" << cell << "\" height=\""
         << cell << "\" fill=\"" << detail::score_color(m.at(l, hd)) << "\"><title>layer " << l + 1 << ", head " << hd + 1
         << ": " << detail::fmt_score(m.at(l, hd)) << "</title></rect>\n";
  if (module)
    for (const auto& mh : module->heads)
      os << "<rect x=\"" << margin + mh.id.layer * cell << "\" y=\"" << margin + mh.id.head * cell << "\" width=\"" << cell
         << "\" height=\"" << cell << "\" fill=\"none\" stroke=\"black\" stroke-width=\"2\"/>\n";
  os << "</svg>\n";
  return os.str();
}

inline std::string sorted_scores_csv(const HeadScoreMatrix& m) {
  std::ostringstream os;
  os << "rank,layer,head,score\n";
  for (const auto& r : sorted_scores(m))
    os << r.rank << ',' << r.id.layer + 1 << ',' << r.id.head + 1 << ',' << detail::fmt_score(r.score) << '\n';
  return os.str();
}

}  // namespace attnmod
