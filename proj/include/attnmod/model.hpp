#pragma once

// Model weights in canonical layout plus the checkpoint name mapping.
//
// Canonical layout: every linear weight is [out, in] so that y = W x. The
// attention output projection `attn_out` is [d_model, d_model]; head h owns
// its column block [h*d_head, (h+1)*d_head). GPT-2 (HF Conv1D) weights are
// stored [in, out] and are transposed on load.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "attnmod/config.hpp"
#include "attnmod/safetensors.hpp"
#include "attnmod/tensor.hpp"

namespace attnmod {

struct LayerWeights {
  TensorPtr ln1_w, ln1_b;
  TensorPtr qkv_w, qkv_b;  // [3d, d], [3d]; rows ordered q | k | v, heads contiguous within each
  TensorPtr attn_out_w, attn_out_b;  // [d, d], [d]
  TensorPtr ln2_w, ln2_b;
  TensorPtr fc_w, fc_b;      // [d_mlp, d], [d_mlp]
  TensorPtr proj_w, proj_b;  // [d, d_mlp], [d]
};

// Immutable after construction; copies share tensors. Edits replace the
// affected tensor pointers only.
struct Model {
  ModelConfig config;
  // causal-lm
  TensorPtr tok_embed;  // [vocab, d]
  // vit-classifier
  TensorPtr patch_w;    // [d, 3*p*p], flattened (channel, row, col)
  TensorPtr patch_b;    // [d]
  TensorPtr cls_token;  // [d]
  // both
  TensorPtr pos_embed;  // [n_positions, d]
  std::vector<LayerWeights> layers;
  TensorPtr final_ln_w, final_ln_b;
  TensorPtr unembed_w;  // [n_outputs, d]
  TensorPtr unembed_b;  // [n_outputs] or null

  int n_layers() const { return config.n_layers; }
  int n_heads() const { return config.n_heads; }
  int d_model() const { return config.d_model; }
};

namespace detail {

inline Tensor transpose2d(const Tensor& t) {
  const int64_t r = t.dim(0), c = t.dim(1);
  Tensor out(Shape{c, r});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out.data[static_cast<size_t>(j * r + i)] = t.data[static_cast<size_t>(i * c + j)];
  return out;
}

class TensorFetcher {
 public:
  explicit TensorFetcher(const TensorStore& store) : store_(store) {}

  const Tensor* find(const std::vector<std::string>& names) const {
    for (const auto& n : names) {
      const auto it = store_.find(n);
      if (it != store_.end()) return &it->second;
    }
    return nullptr;
  }

  // Fetches the first present name, checks its element count and reshapes to `shape`.
  // `accepted` lists alternative on-disk shapes with the same element count.
  TensorPtr get(const std::vector<std::string>& names, const Shape& shape, bool transpose = false,
                const std::vector<Shape>& accepted = {}) const {
    const Tensor* t = find(names);
    if (!t) fail(ErrorKind::model, "missing tensor " + names.front());
    const Shape on_disk = transpose ? Shape{shape.at(1), shape.at(0)} : shape;
    bool ok = t->shape == on_disk;
    for (const auto& alt : accepted) ok = ok || t->shape == alt;
    if (!ok)
      fail(ErrorKind::model, "shape mismatch for " + names.front() + ": expected " + shape_str(on_disk) + ", found " +
                                 shape_str(t->shape));
    Tensor copy = transpose ? transpose2d(*t) : *t;
    copy.shape = shape;
    return std::make_shared<const Tensor>(std::move(copy));
  }

  std::optional<TensorPtr> maybe(const std::vector<std::string>& names, const Shape& shape, bool transpose = false) const {
    if (!find(names)) return std::nullopt;
    return get(names, shape, transpose);
  }

 private:
  const TensorStore& store_;
};

inline WeightNaming detect_naming(const TensorStore& store) {
  if (store.count("wte.weight") || store.count("transformer.wte.weight")) return WeightNaming::gpt2;
  if (store.count("patch_embed.proj.weight")) return WeightNaming::timm;
  return WeightNaming::native;
}

inline std::vector<std::string> gpt2_names(const std::string& suffix) {
  return {suffix, "transformer." + suffix};
}

}  // namespace detail

inline Model build_model(const ModelConfig& config, const TensorStore& store) {
  config.validate();
  const int64_t d = config.d_model, m = config.d_mlp;
  const int64_t n_out = config.n_outputs();
  WeightNaming naming = config.naming == WeightNaming::automatic ? detail::detect_naming(store) : config.naming;
  if (config.arch == Arch::causal_lm && naming == WeightNaming::timm)
    fail(ErrorKind::config, "timm naming is only valid for vit-classifier");
  if (config.arch == Arch::vit_classifier && naming == WeightNaming::gpt2)
    fail(ErrorKind::config, "gpt2 naming is only valid for causal-lm");

  const detail::TensorFetcher f(store);
  Model model;
  model.config = config;
  model.config.naming = naming;
  const int64_t n_pos = config.n_positions();

  auto native = [](const std::string& s) { return std::vector<std::string>{s}; };

  if (naming == WeightNaming::gpt2) {
    using detail::gpt2_names;
    model.tok_embed = f.get(gpt2_names("wte.weight"), {config.vocab_size, d});
    model.pos_embed = f.get(gpt2_names("wpe.weight"), {n_pos, d});
    for (int l = 0; l < config.n_layers; ++l) {
      const std::string p = "h." + std::to_string(l) + ".";
      LayerWeights lw;
      lw.ln1_w = f.get(gpt2_names(p + "ln_1.weight"), {d});
      lw.ln1_b = f.get(gpt2_names(p + "ln_1.bias"), {d});
      lw.qkv_w = f.get(gpt2_names(p + "attn.c_attn.weight"), {3 * d, d}, true);
      lw.qkv_b = f.get(gpt2_names(p + "attn.c_attn.bias"), {3 * d});
      lw.attn_out_w = f.get(gpt2_names(p + "attn.c_proj.weight"), {d, d}, true);
      lw.attn_out_b = f.get(gpt2_names(p + "attn.c_proj.bias"), {d});
      lw.ln2_w = f.get(gpt2_names(p + "ln_2.weight"), {d});
      lw.ln2_b = f.get(gpt2_names(p + "ln_2.bias"), {d});
      lw.fc_w = f.get(gpt2_names(p + "mlp.c_fc.weight"), {m, d}, true);
      lw.fc_b = f.get(gpt2_names(p + "mlp.c_fc.bias"), {m});
      lw.proj_w = f.get(gpt2_names(p + "mlp.c_proj.weight"), {d, m}, true);
      lw.proj_b = f.get(gpt2_names(p + "mlp.c_proj.bias"), {d});
      model.layers.push_back(std::move(lw));
    }
    model.final_ln_w = f.get(gpt2_names("ln_f.weight"), {d});
    model.final_ln_b = f.get(gpt2_names("ln_f.bias"), {d});
    if (auto head = f.maybe({"lm_head.weight"}, {n_out, d}); head && !config.tie_embeddings) model.unembed_w = *head;
    else model.unembed_w = model.tok_embed;
    return model;
  }

  if (naming == WeightNaming::timm) {
    const int64_t p = config.patch_size;
    model.patch_w = f.get({"patch_embed.proj.weight"}, {d, 3 * p * p}, false, {{d, 3, p, p}});
    model.patch_b = f.get({"patch_embed.proj.bias"}, {d});
    model.cls_token = f.get({"cls_token"}, {d}, false, {{1, 1, d}});
    model.pos_embed = f.get({"pos_embed"}, {n_pos, d}, false, {{1, n_pos, d}});
    for (int l = 0; l < config.n_layers; ++l) {
      const std::string b = "blocks." + std::to_string(l) + ".";
      LayerWeights lw;
      lw.ln1_w = f.get({b + "norm1.weight"}, {d});
      lw.ln1_b = f.get({b + "norm1.bias"}, {d});
      lw.qkv_w = f.get({b + "attn.qkv.weight"}, {3 * d, d});
      lw.qkv_b = f.get({b + "attn.qkv.bias"}, {3 * d});
      lw.attn_out_w = f.get({b + "attn.proj.weight"}, {d, d});
      lw.attn_out_b = f.get({b + "attn.proj.bias"}, {d});
      lw.ln2_w = f.get({b + "norm2.weight"}, {d});
      lw.ln2_b = f.get({b + "norm2.bias"}, {d});
      lw.fc_w = f.get({b + "mlp.fc1.weight"}, {m, d});
      lw.fc_b = f.get({b + "mlp.fc1.bias"}, {m});
      lw.proj_w = f.get({b + "mlp.fc2.weight"}, {d, m});
      lw.proj_b = f.get({b + "mlp.fc2.bias"}, {d});
      model.layers.push_back(std::move(lw));
    }
    model.final_ln_w = f.get({"norm.weight"}, {d});
    model.final_ln_b = f.get({"norm.bias"}, {d});
    model.unembed_w = f.get({"head.weight"}, {n_out, d});
    model.unembed_b = f.get({"head.bias"}, {n_out});
    return model;
  }

  // native
  if (config.arch == Arch::causal_lm) {
    model.tok_embed = f.get(native("tok_embed"), {config.vocab_size, d});
  } else {
    const int64_t p = config.patch_size;
    model.patch_w = f.get(native("patch_embed.weight"), {d, 3 * p * p}, false, {{d, 3, p, p}});
    model.patch_b = f.get(native("patch_embed.bias"), {d});
    model.cls_token = f.get(native("cls_token"), {d}, false, {{1, 1, d}});
  }
  model.pos_embed = f.get(native("pos_embed"), {n_pos, d}, false, {{1, n_pos, d}});
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string b = "blocks." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.ln1_w = f.get(native(b + "ln1.weight"), {d});
    lw.ln1_b = f.get(native(b + "ln1.bias"), {d});
    lw.qkv_w = f.get(native(b + "attn.qkv.weight"), {3 * d, d});
    lw.qkv_b = f.get(native(b + "attn.qkv.bias"), {3 * d});
    lw.attn_out_w = f.get(native(b + "attn.out.weight"), {d, d});
    lw.attn_out_b = f.get(native(b + "attn.out.bias"), {d});
    lw.ln2_w = f.get(native(b + "ln2.weight"), {d});
    lw.ln2_b = f.get(native(b + "ln2.bias"), {d});
    lw.fc_w = f.get(native(b + "mlp.fc.weight"), {m, d});
    lw.fc_b = f.get(native(b + "mlp.fc.bias"), {m});
    lw.proj_w = f.get(native(b + "mlp.proj.weight"), {d, m});
    lw.proj_b = f.get(native(b + "mlp.proj.bias"), {d});
    model.layers.push_back(std::move(lw));
  }
  model.final_ln_w = f.get(native("final_ln.weight"), {d});
  model.final_ln_b = f.get(native("final_ln.bias"), {d});
  if (config.arch == Arch::causal_lm && config.tie_embeddings) {
    model.unembed_w = model.tok_embed;
  } else {
    model.unembed_w = f.get(native("unembed.weight"), {n_out, d});
  }
  if (auto b = f.maybe(native("unembed.bias"), {n_out})) model.unembed_b = *b;
  return model;
}

inline Model load_model(const std::filesystem::path& config_path, const std::filesystem::path& weights_path) {
  const ModelConfig config = load_config(config_path);
  const TensorStore store = load_safetensors(weights_path);
  return build_model(config, store);
}

// Canonical tensors under native names; the inverse of build_model for naming = native.
inline TensorStore export_native(const Model& model) {
  TensorStore store;
  auto put = [&](const std::string& name, const TensorPtr& t) {
    if (t) store.emplace(name, *t);
  };
  if (model.config.arch == Arch::causal_lm) {
    put("tok_embed", model.tok_embed);
  } else {
    put("patch_embed.weight", model.patch_w);
    put("patch_embed.bias", model.patch_b);
    put("cls_token", model.cls_token);
  }
  put("pos_embed", model.pos_embed);
  for (size_t l = 0; l < model.layers.size(); ++l) {
    const auto& lw = model.layers[l];
    const std::string b = "blocks." + std::to_string(l) + ".";
    put(b + "ln1.weight", lw.ln1_w);
    put(b + "ln1.bias", lw.ln1_b);
    put(b + "attn.qkv.weight", lw.qkv_w);
    put(b + "attn.qkv.bias", lw.qkv_b);
    put(b + "attn.out.weight", lw.attn_out_w);
    put(b + "attn.out.bias", lw.attn_out_b);
    put(b + "ln2.weight", lw.ln2_w);
    put(b + "ln2.bias", lw.ln2_b);
    put(b + "mlp.fc.weight", lw.fc_w);
    put(b + "mlp.fc.bias", lw.fc_b);
    put(b + "mlp.proj.weight", lw.proj_w);
    put(b + "mlp.proj.bias", lw.proj_b);
  }
  put("final_ln.weight", model.final_ln_w);
  put("final_ln.bias", model.final_ln_b);
  const bool tied = model.config.arch == Arch::causal_lm && model.unembed_w == model.tok_embed;
  if (!tied) put("unembed.weight", model.unembed_w);
  put("unembed.bias", model.unembed_b);
  return store;
}

// Config that reloads `export_native(model)`.
inline ModelConfig native_config(const Model& model) {
  ModelConfig c = model.config;
  c.naming = WeightNaming::native;
  c.tie_embeddings = c.arch == Arch::causal_lm && model.unembed_w == model.tok_embed;
  return c;
}

inline void save_model(const Model& model, const std::filesystem::path& config_path,
                       const std::filesystem::path& weights_path) {
  std::ofstream out(config_path);
  if (!out) fail(ErrorKind::data, "cannot write " + config_path.string());
  out << config_to_json(native_config(model)).dump(2) << '\n';
  save_safetensors(weights_path, export_native(model), {{"format", "attnmod-native"}});
}

}  // namespace attnmod
