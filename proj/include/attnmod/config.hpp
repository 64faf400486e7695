#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <regex>
#include <string>
#include <vector>

#include "attnmod/error.hpp"

namespace attnmod {

enum class Arch { causal_lm, vit_classifier };
enum class Activation { gelu_tanh, gelu_erf };

// Tensor naming scheme of the checkpoint container; see docs/architecture.md.
enum class WeightNaming { automatic, native, gpt2, timm };

inline std::string to_string(Arch a) { return a == Arch::causal_lm ? "causal-lm" : "vit-classifier"; }

inline std::string to_string(WeightNaming n) {
  switch (n) {
    case WeightNaming::automatic: return "auto";
    case WeightNaming::native: return "native";
    case WeightNaming::gpt2: return "gpt2";
    case WeightNaming::timm: return "timm";
  }
  return "auto";
}

struct ModelConfig {
  Arch arch = Arch::causal_lm;
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int d_head = 0;
  int d_mlp = 0;
  int vocab_size = 0;  // causal-lm
  int n_classes = 0;   // vit-classifier
  int max_positions = 0;
  int patch_size = 0;
  int image_size = 0;
  float ln_eps = 1e-5f;
  Activation activation = Activation::gelu_tanh;
  bool tie_embeddings = true;
  WeightNaming naming = WeightNaming::automatic;
  std::array<float, 3> image_mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> image_std{0.5f, 0.5f, 0.5f};
  std::string model_id;
  std::vector<std::string> labels;

  int n_outputs() const { return arch == Arch::causal_lm ? vocab_size : n_classes; }
  int grid() const { return arch == Arch::vit_classifier ? image_size / patch_size : 0; }
  int n_patches() const { return grid() * grid(); }

  // Token positions the model can attend over: max_positions for text, patches + CLS for vision.
  int n_positions() const { return arch == Arch::vit_classifier ? n_patches() + 1 : max_positions; }

  void validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_mlp <= 0)
      fail(ErrorKind::config, "n_layers, n_heads, d_model and d_mlp must be positive");
    if (d_model % n_heads != 0) fail(ErrorKind::config, "d_model not divisible by n_heads");
    if (d_head != d_model / n_heads)
      fail(ErrorKind::config, "d_head must equal d_model / n_heads (" + std::to_string(d_model / n_heads) + ")");
    if (arch == Arch::causal_lm) {
      if (vocab_size <= 0) fail(ErrorKind::config, "vocab_size must be positive");
      if (max_positions <= 0) fail(ErrorKind::config, "max_positions must be positive");
    } else {
      if (n_classes <= 0) fail(ErrorKind::config, "n_classes must be positive");
      if (patch_size <= 0 || image_size <= 0) fail(ErrorKind::config, "patch_size and image_size must be positive");
      if (image_size % patch_size != 0) fail(ErrorKind::config, "patch_size does not divide image_size");
    }
    if (!(ln_eps > 0.0f)) fail(ErrorKind::config, "ln_eps must be positive");
    for (float s : image_std)
      if (!(s > 0.0f)) fail(ErrorKind::config, "image_std entries must be positive");
    if (!labels.empty() && static_cast<int>(labels.size()) != n_outputs())
      fail(ErrorKind::config, "labels list length does not match output count");
  }

  // Parameter count of the architecture, computed from the config alone.
  int64_t parameter_count() const {
    const int64_t d = d_model, m = d_mlp;
    const int64_t per_layer = 2 * d           // ln1
                              + 3 * d * d + 3 * d  // qkv
                              + d * d + d          // out
                              + 2 * d              // ln2
                              + m * d + m          // fc
                              + d * m + d;         // proj
    int64_t total = per_layer * n_layers + 2 * d;  // final norm
    if (arch == Arch::causal_lm) {
      total += static_cast<int64_t>(vocab_size) * d + static_cast<int64_t>(max_positions) * d;
      if (!tie_embeddings) total += static_cast<int64_t>(vocab_size) * d;
    } else {
      const int64_t p = patch_size;
      total += d * 3 * p * p + d + d + static_cast<int64_t>(n_positions()) * d;
      total += static_cast<int64_t>(n_classes) * d + n_classes;
    }
    return total;
  }
};

namespace detail {

inline ModelConfig config_from_hf_gpt2(const nlohmann::json& j) {
  ModelConfig c;
  c.arch = Arch::causal_lm;
  c.n_layers = j.at("n_layer").get<int>();
  c.n_heads = j.at("n_head").get<int>();
  c.d_model = j.at("n_embd").get<int>();
  c.d_head = c.d_model % c.n_heads == 0 ? c.d_model / c.n_heads : 0;
  c.d_mlp = j.contains("n_inner") && !j["n_inner"].is_null() ? j["n_inner"].get<int>() : 4 * c.d_model;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_positions = j.value("n_positions", j.value("n_ctx", 1024));
  c.ln_eps = j.value("layer_norm_epsilon", 1e-5f);
  c.activation = Activation::gelu_tanh;
  c.tie_embeddings = true;
  c.naming = WeightNaming::gpt2;
  c.model_id = j.value("_name_or_path", std::string("gpt2"));
  return c;
}

// timm ViT configs name the size in the architecture string, e.g. vit_base_patch32_224.
inline ModelConfig config_from_timm_vit(const nlohmann::json& j) {
  const std::string name = j.at("architecture").get<std::string>();
  static const std::regex pattern(R"(vit_(tiny|small|base|large)_patch(\d+)_(\d+).*)");
  std::smatch m;
  if (!std::regex_match(name, m, pattern)) fail(ErrorKind::config, "unsupported timm architecture " + name);
  ModelConfig c;
  c.arch = Arch::vit_classifier;
  const std::string size = m[1];
  if (size == "tiny") c.d_model = 192, c.n_layers = 12, c.n_heads = 3;
  if (size == "small") c.d_model = 384, c.n_layers = 12, c.n_heads = 6;
  if (size == "base") c.d_model = 768, c.n_layers = 12, c.n_heads = 12;
  if (size == "large") c.d_model = 1024, c.n_layers = 24, c.n_heads = 16;
  c.d_head = c.d_model / c.n_heads;
  c.d_mlp = 4 * c.d_model;
  c.patch_size = std::stoi(m[2]);
  c.image_size = std::stoi(m[3]);
  if (j.contains("model_args")) {
    const auto& a = j["model_args"];
    c.d_model = a.value("embed_dim", c.d_model);
    c.n_layers = a.value("depth", c.n_layers);
    c.n_heads = a.value("num_heads", c.n_heads);
    c.patch_size = a.value("patch_size", c.patch_size);
    c.image_size = a.value("img_size", c.image_size);
    c.d_head = c.d_model % c.n_heads == 0 ? c.d_model / c.n_heads : 0;
    c.d_mlp = static_cast<int>(a.value("mlp_ratio", 4.0) * c.d_model);
  }
  c.n_classes = j.value("num_classes", 1000);
  c.ln_eps = 1e-6f;
  c.activation = Activation::gelu_erf;
  c.tie_embeddings = false;
  c.naming = WeightNaming::timm;
  if (j.contains("pretrained_cfg")) {
    const auto& pc = j["pretrained_cfg"];
    if (pc.contains("mean")) c.image_mean = pc["mean"].get<std::array<float, 3>>();
    if (pc.contains("std")) c.image_std = pc["std"].get<std::array<float, 3>>();
  }
  if (j.contains("label_names")) c.labels = j["label_names"].get<std::vector<std::string>>();
  c.model_id = name;
  return c;
}

}  // namespace detail

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    if (j.value("model_type", "") == "gpt2") {
      c = detail::config_from_hf_gpt2(j);
    } else if (j.contains("architecture") && !j.contains("arch")) {
      c = detail::config_from_timm_vit(j);
    } else {
      const std::string arch = j.at("arch").get<std::string>();
      if (arch == "causal-lm") {
        c.arch = Arch::causal_lm;
      } else if (arch == "vit-classifier") {
        c.arch = Arch::vit_classifier;
        c.ln_eps = 1e-6f;
        c.activation = Activation::gelu_erf;
        c.tie_embeddings = false;
      } else {
        fail(ErrorKind::config, "unknown arch " + arch);
      }
      const std::string norm = j.value("norm_kind", "pre-layernorm");
      if (norm != "pre-layernorm") fail(ErrorKind::config, "unsupported norm_kind " + norm + " (pre-layernorm only)");
      c.n_layers = j.at("n_layers").get<int>();
      c.n_heads = j.at("n_heads").get<int>();
      c.d_model = j.at("d_model").get<int>();
      c.d_head = j.value("d_head", c.n_heads > 0 && c.d_model % c.n_heads == 0 ? c.d_model / c.n_heads : 0);
      c.d_mlp = j.value("d_mlp", 4 * c.d_model);
      c.vocab_size = j.value("vocab_size", 0);
      c.n_classes = j.value("n_classes", 0);
      c.max_positions = j.value("max_positions", 0);
      c.patch_size = j.value("patch_size", 0);
      c.image_size = j.value("image_size", 0);
      c.ln_eps = j.value("ln_eps", c.ln_eps);
      if (j.contains("activation")) {
        const std::string act = j["activation"].get<std::string>();
        if (act == "gelu_tanh") c.activation = Activation::gelu_tanh;
        else if (act == "gelu_erf") c.activation = Activation::gelu_erf;
        else fail(ErrorKind::config, "unknown activation " + act);
      }
      c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
      const std::string naming = j.value("weight_naming", "auto");
      if (naming == "auto") c.naming = WeightNaming::automatic;
      else if (naming == "native") c.naming = WeightNaming::native;
      else if (naming == "gpt2") c.naming = WeightNaming::gpt2;
      else if (naming == "timm") c.naming = WeightNaming::timm;
      else fail(ErrorKind::config, "unknown weight_naming " + naming);
      if (j.contains("image_mean")) c.image_mean = j["image_mean"].get<std::array<float, 3>>();
      if (j.contains("image_std")) c.image_std = j["image_std"].get<std::array<float, 3>>();
      c.model_id = j.value("model_id", std::string());
      if (j.contains("labels")) c.labels = j["labels"].get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["arch"] = to_string(c.arch);
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_model"] = c.d_model;
  j["d_head"] = c.d_head;
  j["d_mlp"] = c.d_mlp;
  j["norm_kind"] = "pre-layernorm";
  j["ln_eps"] = c.ln_eps;
  j["activation"] = c.activation == Activation::gelu_tanh ? "gelu_tanh" : "gelu_erf";
  j["tie_embeddings"] = c.tie_embeddings;
  j["weight_naming"] = to_string(c.naming);
  j["model_id"] = c.model_id;
  if (c.arch == Arch::causal_lm) {
    j["vocab_size"] = c.vocab_size;
    j["max_positions"] = c.max_positions;
  } else {
    j["n_classes"] = c.n_classes;
    j["patch_size"] = c.patch_size;
    j["image_size"] = c.image_size;
    j["image_mean"] = c.image_mean;
    j["image_std"] = c.image_std;
  }
  if (!c.labels.empty()) j["labels"] = c.labels;
  return j;
}

inline ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::config, "cannot open model config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, "model config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace attnmod
