#pragma once

// Scalar attention-module intervention: scale the contributions of the module
// heads by one scalar s, either at runtime or by editing the output projection.

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <optional>
#include <string>
#include <vector>

#include "attnmod/samd.hpp"

namespace attnmod {

enum class InterventionMode { runtime_hook, weight_edit };

inline std::string to_string(InterventionMode m) { return m == InterventionMode::runtime_hook ? "runtime-hook" : "weight-edit"; }

inline InterventionMode parse_mode(const std::string& s) {
  if (s == "runtime-hook" || s == "hook") return InterventionMode::runtime_hook;
  if (s == "weight-edit" || s == "edit") return InterventionMode::weight_edit;
  fail(ErrorKind::config, "unknown intervention mode " + s + " (runtime-hook | weight-edit)");
}

// CLI warns above this magnitude.
inline constexpr double kLargeScalarWarning = 1e5;

struct InterventionSpec {
  AttentionModule module;
  float s = 1.0f;
  InterventionMode mode = InterventionMode::runtime_hook;
};

inline void validate_spec(const InterventionSpec& spec, const ModelConfig& config) {
  if (!std::isfinite(spec.s)) fail(ErrorKind::numeric, "intervention scalar must be finite");
  for (const auto& h : spec.module.heads)
    if (h.id.layer < 0 || h.id.layer >= config.n_layers || h.id.head < 0 || h.id.head >= config.n_heads)
      fail(ErrorKind::config, "module head (layer " + std::to_string(h.id.layer + 1) + ", head " +
                                  std::to_string(h.id.head + 1) + ") outside the model's " +
                                  std::to_string(config.n_layers) + "x" + std::to_string(config.n_heads) + " head grid");
}

inline HeadScaling head_scaling(const InterventionSpec& spec, const ModelConfig& config) {
  validate_spec(spec, config);
  HeadScaling sc;
  sc.n_layers = config.n_layers;
  sc.n_heads = config.n_heads;
  sc.mask.assign(static_cast<size_t>(config.n_layers * config.n_heads), 0);
  for (const auto& h : spec.module.heads) sc.mask[static_cast<size_t>(h.id.layer * config.n_heads + h.id.head)] = 1;
  sc.scale = spec.s;
  return sc;
}

struct EditReport {
  std::vector<std::string> tensors_touched;  // native tensor names
  int64_t elements_scaled = 0;
  int64_t total_params = 0;
  double fraction = 0.0;  // elements_scaled / total_params
};

// Computed from the config alone; no weights needed.
inline EditReport edit_report(const ModelConfig& config, const AttentionModule& module) {
  EditReport r;
  std::set<int> layers;
  for (const auto& h : module.heads) layers.insert(h.id.layer);
  for (int l : layers) r.tensors_touched.push_back("blocks." + std::to_string(l) + ".attn.out.weight");
  r.elements_scaled = static_cast<int64_t>(module.heads.size()) * config.d_model * config.d_head;
  r.total_params = config.parameter_count();
  r.fraction = static_cast<double>(r.elements_scaled) / static_cast<double>(r.total_params);
  return r;
}

inline nlohmann::json edit_report_json(const EditReport& r) {
  return {{"tensors_touched", r.tensors_touched},
          {"elements_scaled", r.elements_scaled},
          {"total_params", r.total_params},
          {"fraction_of_total_params", r.fraction}};
}

// New model whose output-projection column blocks for module heads are scaled
// by s. The bias and every other tensor are shared with the original.
inline Model edit_weights(const Model& model, const InterventionSpec& spec, EditReport* report = nullptr) {
  validate_spec(spec, model.config);
  Model edited = model;
  const int d = model.d_model(), dh = model.config.d_head;
  std::map<int, Tensor> new_out;
  for (const auto& h : spec.module.heads) {
    auto it = new_out.find(h.id.layer);
    if (it == new_out.end())
      it = new_out.emplace(h.id.layer, *model.layers[static_cast<size_t>(h.id.layer)].attn_out_w).first;
    Tensor& w = it->second;
    for (int r = 0; r < d; ++r)
      for (int c = h.id.head * dh; c < (h.id.head + 1) * dh; ++c) w.data[static_cast<size_t>(r * d + c)] *= spec.s;
  }
  for (auto& [layer, tensor] : new_out)
    edited.layers[static_cast<size_t>(layer)].attn_out_w = std::make_shared<const Tensor>(std::move(tensor));
  if (report) *report = edit_report(model.config, spec.module);
  return edited;
}

inline std::vector<float> forward_with_intervention(const Model& model, const ModelInput& input,
                                                    const InterventionSpec& spec, ResidualTrace* trace = nullptr) {
  if (spec.mode == InterventionMode::weight_edit) {
    const Model edited = edit_weights(model, spec);
    if (trace) {
      auto traced = forward_traced(edited, input);
      *trace = std::move(traced.trace);
      return traced.logits;
    }
    return forward(edited, input);
  }
  return forward_scaled(model, input, head_scaling(spec, model.config), trace);
}

inline Generation generate_with_intervention(const Model& model, const Tokenizer& tok, const std::string& prompt,
                                             const InterventionSpec& spec, const GenerateParams& params) {
  if (spec.mode == InterventionMode::weight_edit) return generate_ids(edit_weights(model, spec), tok, prompt, params);
  const auto scaling = head_scaling(spec, model.config);
  return generate_ids(model, tok, prompt, params, &scaling);
}

struct GridRow {
  float s = 0.0f;
  std::optional<double> value;
  std::string error;
};

struct GridSearchResult {
  float best_s = 0.0f;
  double best_value = 0.0;
  std::vector<GridRow> table;  // candidate order
};

// Evaluates every candidate; failures are recorded and skipped. Ties go to the
// smaller |s|.
inline GridSearchResult grid_search_scalar(const InterventionSpec& tmpl, const std::vector<float>& candidates,
                                           const std::function<double(const InterventionSpec&)>& objective) {
  if (candidates.empty()) fail(ErrorKind::config, "grid search needs at least one candidate");
  GridSearchResult res;
  bool found = false;
  for (float s : candidates) {
    GridRow row{s, std::nullopt, {}};
    try {
      InterventionSpec spec = tmpl;
      spec.s = s;
      const double v = objective(spec);
      if (!std::isfinite(v)) throw Error(ErrorKind::numeric, "objective returned a non-finite value");
      row.value = v;
      if (!found || v > res.best_value || (v == res.best_value && std::abs(s) < std::abs(res.best_s))) {
        res.best_s = s;
        res.best_value = v;
        found = true;
      }
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    res.table.push_back(std::move(row));
  }
  if (!found) fail(ErrorKind::numeric, "every grid-search candidate failed");
  return res;
}

// Named scalar settings reported for the original experiments.
struct Preset {
  std::string module_path;  // empty: supplied at run time
  float s = 1.0f;
  InterventionMode mode = InterventionMode::runtime_hook;
  int k = 0;  // default module size for this kind of concept
};

inline const std::map<std::string, Preset>& builtin_presets() {
  static const std::map<std::string, Preset> presets{
      {"sae_negative", {"", -1.0f, InterventionMode::runtime_hook, 5}},
      {"sae_positive", {"", 1e4f, InterventionMode::runtime_hook, 5}},
      {"reasoning_llama", {"", 1.4f, InterventionMode::runtime_hook, 5}},
      {"reasoning_gemma", {"", 1.2f, InterventionMode::runtime_hook, 5}},
      {"safety_llama2", {"", -1.7f, InterventionMode::runtime_hook, 10}},
      {"safety_qwen", {"", -0.7f, InterventionMode::runtime_hook, 10}},
      {"safety_gemma", {"", -0.8f, InterventionMode::runtime_hook, 10}},
      {"vit_negative", {"", -1.0f, InterventionMode::runtime_hook, 3}},
  };
  return presets;
}

// Preset file: {"name": {"module": path, "s": float, "mode": str}, ...}.
// Entries override built-ins of the same name.
inline std::map<std::string, Preset> load_presets(const std::filesystem::path& path) {
  std::map<std::string, Preset> presets = builtin_presets();
  std::ifstream in(path);
  if (!in) fail(ErrorKind::config, "cannot open preset file " + path.string());
  try {
    nlohmann::json j;
    in >> j;
    for (const auto& [name, v] : j.items()) {
      Preset p;
      p.module_path = v.value("module", std::string());
      if (!p.module_path.empty() && std::filesystem::path(p.module_path).is_relative())
        p.module_path = (path.parent_path() / p.module_path).string();
      p.s = v.at("s").get<float>();
      p.mode = parse_mode(v.value("mode", std::string("runtime-hook")));
      p.k = v.value("k", 0);
      presets[name] = p;
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, "preset file " + path.string() + ": " + e.what());
  }
  return presets;
}

}  // namespace attnmod
