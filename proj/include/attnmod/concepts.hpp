#pragma once

// Concept vectors and the prompt datasets that operationalize a concept.

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "attnmod/runtime.hpp"

namespace attnmod {

struct ConceptSource {
  enum class Kind { diff_means, unembedding, external };
  Kind kind = Kind::external;
  int layer = 0;  // diff_means: residual index r_layer
  PositionSpec position = PositionSpec::last();
  int label = -1;     // unembedding
  std::string path;   // external

  std::string str() const {
    switch (kind) {
      case Kind::diff_means: return "diff-means(layer=" + std::to_string(layer) + ",position=" + position.str() + ")";
      case Kind::unembedding: return "unembedding(label=" + std::to_string(label) + ")";
      case Kind::external: return "external(" + path + ")";
    }
    return "external";
  }
};

// Unnormalized concept direction; cosine scoring normalizes on the fly.
class ConceptVector {
 public:
  ConceptVector(std::vector<float> v, ConceptSource source) : values_(std::move(v)), source_(std::move(source)) {
    double sq = 0.0;
    for (float x : values_) {
      if (!std::isfinite(x)) fail(ErrorKind::numeric, "non-finite value in concept vector");
      sq += static_cast<double>(x) * x;
    }
    norm_ = std::sqrt(sq);
    if (!(norm_ > 0.0)) fail(ErrorKind::numeric, "zero concept vector");
  }

  std::span<const float> values() const { return values_; }
  const ConceptSource& source() const { return source_; }
  double norm() const { return norm_; }
  size_t size() const { return values_.size(); }

  ConceptVector scaled(float c) const {
    std::vector<float> v(values_);
    for (auto& x : v) x *= c;
    return ConceptVector(std::move(v), source_);
  }

 private:
  std::vector<float> values_;
  ConceptSource source_;
  double norm_ = 0.0;
};

// Positive (and optional negative) inputs for a concept. Entries are prompt
// text or image paths, depending on `images`.
struct PromptDataset {
  std::vector<std::string> positives;
  std::optional<std::vector<std::string>> negatives;
  std::vector<int> labels;  // image datasets only; parallel to positives
  bool images = false;
  PositionSpec position = PositionSpec::last();

  void validate() const {
    if (positives.empty()) fail(ErrorKind::data, "empty positive dataset");
    for (const auto& p : positives)
      if (p.empty()) fail(ErrorKind::data, "empty entry in positive dataset");
    if (negatives)
      for (const auto& p : *negatives)
        if (p.empty()) fail(ErrorKind::data, "empty entry in negative dataset");
  }
};

// JSONL: {"text": ...} lines, {"pos": ..., "neg": ...} paired lines, or
// {"path": ..., "label": int} image lines. Relative image paths resolve
// against the dataset file's directory.
inline PromptDataset load_prompt_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::data, "cannot open dataset " + path.string());
  PromptDataset ds;
  std::vector<std::string> negatives;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      if (j.contains("text")) {
        ds.positives.push_back(j["text"].get<std::string>());
      } else if (j.contains("pos")) {
        ds.positives.push_back(j["pos"].get<std::string>());
        if (j.contains("neg")) negatives.push_back(j["neg"].get<std::string>());
      } else if (j.contains("path")) {
        ds.images = true;
        std::filesystem::path p = j["path"].get<std::string>();
        if (p.is_relative()) p = path.parent_path() / p;
        ds.positives.push_back(p.string());
        ds.labels.push_back(j.value("label", -1));
      } else {
        fail(ErrorKind::data, path.string() + ":" + std::to_string(lineno) + ": expected text, pos/neg or path");
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::data, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!negatives.empty()) ds.negatives = std::move(negatives);
  if (ds.images) ds.position = PositionSpec::cls();
  ds.validate();
  return ds;
}

// Turns dataset entries into model inputs. Images are read with `loader`
// (NPY by default) and normalized per the model config.
class InputEncoder {
 public:
  using ImageLoader = std::function<RawImage(const std::filesystem::path&)>;

  InputEncoder(const ModelConfig& config, std::optional<Tokenizer> tokenizer, ImageLoader loader = load_npy_image)
      : config_(config), tokenizer_(std::move(tokenizer)), loader_(std::move(loader)) {}

  ModelInput text(const std::string& s, PositionSpec pos) const {
    if (!tokenizer_) fail(ErrorKind::config, "text input needs a tokenizer");
    return TokenSequence{tokenizer_->encode(s), pos};
  }

  ModelInput image(const std::filesystem::path& p, PositionSpec pos) const {
    return ImageInput{normalize_image(loader_(p), config_), pos};
  }

  std::vector<ModelInput> encode(const std::vector<std::string>& entries, bool images, PositionSpec pos) const {
    std::vector<ModelInput> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(images ? image(e, pos) : text(e, pos));
    return out;
  }

  std::vector<ModelInput> positives(const PromptDataset& ds) const { return encode(ds.positives, ds.images, ds.position); }
  std::vector<ModelInput> negatives(const PromptDataset& ds) const {
    return ds.negatives ? encode(*ds.negatives, ds.images, ds.position) : std::vector<ModelInput>{};
  }

 private:
  ModelConfig config_;
  std::optional<Tokenizer> tokenizer_;
  ImageLoader loader_;
};

inline ModelInput with_position(ModelInput input, PositionSpec pos) {
  std::visit([&](auto& in) { in.position = pos; }, input);
  return input;
}

// r_layer at the input's position of interest.
inline std::vector<float> residual_at(const Model& model, const ModelInput& input, int layer) {
  if (layer < 0 || layer > model.n_layers())
    fail(ErrorKind::config, "layer " + std::to_string(layer) + " out of range [1, " + std::to_string(model.n_layers()) + "]");
  const auto traced = forward_traced(model, input);
  const auto r = traced.trace.residual(layer);
  return {r.begin(), r.end()};
}

namespace detail {

inline std::vector<double> mean_residual(const Model& model, const std::vector<ModelInput>& inputs, int layer) {
  std::vector<double> acc(static_cast<size_t>(model.d_model()), 0.0);
  for (const auto& in : inputs) {
    const auto r = residual_at(model, in, layer);
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += r[i];
  }
  for (auto& v : acc) v /= static_cast<double>(inputs.size());
  return acc;
}

}  // namespace detail

// Mean of r_layer over positives minus mean over negatives (second term zero
// when there are no negatives). `layer` is in [1, L]; r_L is read before the
// final LayerNorm.
inline ConceptVector concept_diff_means(const Model& model, const std::vector<ModelInput>& positives,
                                        const std::vector<ModelInput>& negatives, int layer,
                                        PositionSpec position = PositionSpec::last()) {
  if (positives.empty()) fail(ErrorKind::data, "empty positive dataset");
  if (layer < 1 || layer > model.n_layers())
    fail(ErrorKind::config, "layer " + std::to_string(layer) + " out of range [1, " + std::to_string(model.n_layers()) + "]");
  std::vector<ModelInput> pos, neg;
  for (const auto& p : positives) pos.push_back(with_position(p, position));
  for (const auto& n : negatives) neg.push_back(with_position(n, position));
  const auto mp = detail::mean_residual(model, pos, layer);
  std::vector<float> v(mp.size());
  if (neg.empty()) {
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(mp[i]);
  } else {
    const auto mn = detail::mean_residual(model, neg, layer);
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(mp[i] - mn[i]);
  }
  bool any = false;
  for (float x : v) any = any || x != 0.0f;
  if (!any) fail(ErrorKind::numeric, "zero concept vector");
  return ConceptVector(std::move(v), {ConceptSource::Kind::diff_means, layer, position, -1, {}});
}

inline ConceptVector concept_diff_means(const Model& model, const std::vector<ModelInput>& positives,
                                        const std::vector<ModelInput>& negatives) {
  return concept_diff_means(model, positives, negatives, model.n_layers(), PositionSpec::last());
}

// The classifier-head row for `label`, copied bit-exactly.
inline ConceptVector concept_from_unembedding(const Model& model, int label) {
  if (model.config.arch != Arch::vit_classifier)
    fail(ErrorKind::config, "unembedding concepts require a vit-classifier model");
  if (label < 0 || label >= model.config.n_classes)
    fail(ErrorKind::config, "label " + std::to_string(label) + " out of range [0, " +
                                std::to_string(model.config.n_classes) + ")");
  const auto row = model.unembed_w->row(label);
  return ConceptVector({row.begin(), row.end()}, {ConceptSource::Kind::unembedding, 0, PositionSpec::cls(), label, {}});
}

// Concept vector file: 8-byte magic, u32 little-endian length, then f32 values.
inline constexpr char kConceptMagic[8] = {'A', 'T', 'M', 'C', 'V', 'E', 'C', '1'};

inline std::vector<float> read_vector_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::data, "cannot open concept vector " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() >= 12 && std::memcmp(bytes.data(), kConceptMagic, 8) == 0) {
    uint32_t n = 0;
    std::memcpy(&n, bytes.data() + 8, 4);
    if (bytes.size() != 12 + static_cast<size_t>(n) * 4)
      fail(ErrorKind::data, path.string() + ": length mismatch between header and payload");
    std::vector<float> v(n);
    std::memcpy(v.data(), bytes.data() + 12, static_cast<size_t>(n) * 4);
    return v;
  }
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    return j.get<std::vector<float>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, path.string() + ": neither a binary concept vector nor a JSON array");
  }
}

inline void write_vector_file(const std::filesystem::path& path, std::span<const float> values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::data, "cannot write " + path.string());
  const auto n = static_cast<uint32_t>(values.size());
  out.write(kConceptMagic, 8);
  out.write(reinterpret_cast<const char*>(&n), 4);
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
}

inline ConceptVector concept_load_external(const std::filesystem::path& path, int d_model) {
  auto v = read_vector_file(path);
  if (static_cast<int>(v.size()) != d_model)
    fail(ErrorKind::data, "length mismatch: concept vector has " + std::to_string(v.size()) + " values, model d_model is " +
                              std::to_string(d_model));
  return ConceptVector(std::move(v), {ConceptSource::Kind::external, 0, PositionSpec::last(), -1, path.string()});
}

// <r_layer, v> / |v| at the position of interest.
inline double concept_activation(const Model& model, const ModelInput& input, const ConceptVector& v, int layer) {
  const auto r = residual_at(model, input, layer);
  double dot = 0.0;
  for (size_t i = 0; i < r.size(); ++i) dot += static_cast<double>(r[i]) * v.values()[i];
  return dot / v.norm();
}

struct FilterResult {
  std::vector<size_t> kept;  // indices into the candidates, ascending
  std::vector<double> activations;
  double max_activation = 0.0;
};

// Keeps candidates whose projection onto v reaches max - (1 - frac) * |max|
// (frac * max when max > 0). The max-activating candidate is always kept.
inline FilterResult filter_by_activation(const Model& model, const std::vector<ModelInput>& candidates,
                                         const ConceptVector& v, double frac, int layer) {
  if (candidates.empty()) fail(ErrorKind::data, "no candidate prompts");
  if (!(frac > 0.0 && frac <= 1.0)) fail(ErrorKind::config, "frac must be in (0, 1]");
  FilterResult res;
  for (const auto& c : candidates) res.activations.push_back(concept_activation(model, c, v, layer));
  const auto best = std::max_element(res.activations.begin(), res.activations.end());
  res.max_activation = *best;
  const double threshold = res.max_activation - (1.0 - frac) * std::abs(res.max_activation);
  for (size_t i = 0; i < res.activations.size(); ++i)
    if (res.activations[i] >= threshold || res.activations.begin() + static_cast<ptrdiff_t>(i) == best) res.kept.push_back(i);
  return res;
}

inline PromptDataset filter_prompts_by_activation(const Model& model, const InputEncoder& encoder,
                                                  const std::vector<std::string>& candidates, const ConceptVector& v,
                                                  double frac, int layer, PositionSpec position) {
  const auto inputs = encoder.encode(candidates, false, position);
  const auto res = filter_by_activation(model, inputs, v, frac, layer);
  PromptDataset ds;
  ds.position = position;
  for (size_t i : res.kept) ds.positives.push_back(candidates[i]);
  return ds;
}

}  // namespace attnmod
