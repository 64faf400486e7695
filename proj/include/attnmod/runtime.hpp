#pragma once

// Instrumented pre-LN transformer forward pass.
//
// Every layer computes its attention update as
//   attn = ((a_0 + a_1) + ... + a_{H-1}) + b_o,   a_h = W_o[:, block h] z_h
// and the residual as r_post = (r_prev + attn) + m. The traced and plain
// paths are the same code, so they agree bitwise.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "attnmod/image.hpp"
#include "attnmod/model.hpp"
#include "attnmod/tokenizer.hpp"

namespace attnmod {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXf>;

struct ImageInput {
  Image image;
  PositionSpec position = PositionSpec::cls();
};

using ModelInput = std::variant<TokenSequence, ImageInput>;

// Multiplies a[l][h] by `scale` for every (l, h) in the mask, at every position.
struct HeadScaling {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<uint8_t> mask;  // n_layers * n_heads, row-major by layer
  float scale = 1.0f;

  bool contains(int layer, int head) const {
    return !mask.empty() && mask[static_cast<size_t>(layer * n_heads + head)] != 0;
  }
};

struct LayerTrace {
  std::vector<float> r_prev;
  std::vector<float> heads;  // n_heads * d_model; head h at [h*d, (h+1)*d)
  std::vector<float> attn_bias;
  std::vector<float> mlp;
  std::vector<float> r_post;

  std::span<const float> head(int h, int d_model) const {
    return std::span<const float>(heads).subspan(static_cast<size_t>(h) * d_model, static_cast<size_t>(d_model));
  }
};

// Residual-stream decomposition at one position of interest.
struct ResidualTrace {
  int position = 0;
  int d_model = 0;
  std::vector<LayerTrace> layers;
  std::vector<float> final_residual;  // before the final LayerNorm
  std::vector<float> logits;

  std::span<const float> head(int layer, int h) const { return layers.at(static_cast<size_t>(layer)).head(h, d_model); }

  // r_l for l in [0, L]; r_0 is the embedding.
  std::span<const float> residual(int l) const {
    if (l == 0) return layers.at(0).r_prev;
    return layers.at(static_cast<size_t>(l - 1)).r_post;
  }
};

struct TracedForward {
  std::vector<float> logits;
  ResidualTrace trace;
};

namespace detail {

inline ConstMatrixMap as_matrix(const TensorPtr& t) {
  return ConstMatrixMap(t->data.data(), t->dim(0), t->dim(1));
}

inline ConstVectorMap as_vector(const TensorPtr& t) { return ConstVectorMap(t->data.data(), t->size()); }

inline void layer_norm_rows(const RowMatrix& x, const TensorPtr& w, const TensorPtr& b, float eps, RowMatrix& out) {
  const Eigen::Index rows = x.rows(), cols = x.cols();
  out.resize(rows, cols);
  const float* gw = w->data.data();
  const float* gb = b->data.data();
  for (Eigen::Index r = 0; r < rows; ++r) {
    const float* in = x.row(r).data();
    double mean = 0.0;
    for (Eigen::Index c = 0; c < cols; ++c) mean += in[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (Eigen::Index c = 0; c < cols; ++c) {
      const double diff = in[c] - mean;
      var += diff * diff;
    }
    var /= static_cast<double>(cols);
    const auto inv_std = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    const auto fmean = static_cast<float>(mean);
    float* o = out.row(r).data();
    for (Eigen::Index c = 0; c < cols; ++c) o[c] = (in[c] - fmean) * inv_std * gw[c] + gb[c];
  }
}

inline float gelu(float x, Activation act) {
  if (act == Activation::gelu_erf) return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f));
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

inline int resolve_position(const PositionSpec& pos, int length, Arch arch) {
  switch (pos.kind) {
    case PositionSpec::Kind::last: return length - 1;
    case PositionSpec::Kind::cls:
      if (arch != Arch::vit_classifier) fail(ErrorKind::config, "cls position is only valid for vit-classifier");
      return 0;
    case PositionSpec::Kind::index:
      if (pos.index < 0 || pos.index >= length)
        fail(ErrorKind::data, "position index " + std::to_string(pos.index) + " out of range for length " +
                                  std::to_string(length));
      return pos.index;
  }
  return length - 1;
}

inline RowMatrix embed_tokens(const Model& model, const TokenSequence& tokens) {
  const auto& cfg = model.config;
  if (cfg.arch != Arch::causal_lm) fail(ErrorKind::config, "token input given to a vit-classifier model");
  const auto n = static_cast<int>(tokens.ids.size());
  if (n == 0) fail(ErrorKind::data, "empty input");
  if (n > cfg.max_positions)
    fail(ErrorKind::data, "sequence too long: " + std::to_string(n) + " > max_positions " + std::to_string(cfg.max_positions));
  const auto wte = as_matrix(model.tok_embed);
  const auto wpe = as_matrix(model.pos_embed);
  RowMatrix x(n, cfg.d_model);
  for (int t = 0; t < n; ++t) {
    const int32_t id = tokens.ids[static_cast<size_t>(t)];
    if (id < 0 || id >= cfg.vocab_size) fail(ErrorKind::data, "token id " + std::to_string(id) + " out of range");
    x.row(t) = wte.row(id) + wpe.row(t);
  }
  return x;
}

inline RowMatrix embed_image(const Model& model, const Image& image) {
  const auto& cfg = model.config;
  if (cfg.arch != Arch::vit_classifier) fail(ErrorKind::config, "image input given to a causal-lm model");
  if (image.channels != 3 || image.height != cfg.image_size || image.width != cfg.image_size ||
      image.data.size() != static_cast<size_t>(3 * cfg.image_size * cfg.image_size))
    fail(ErrorKind::data, "wrong image shape: expected 3x" + std::to_string(cfg.image_size) + "x" +
                              std::to_string(cfg.image_size) + ", got " + std::to_string(image.channels) + "x" +
                              std::to_string(image.height) + "x" + std::to_string(image.width));
  const int p = cfg.patch_size, g = cfg.grid(), d = cfg.d_model;
  const auto w = as_matrix(model.patch_w);
  const auto b = as_vector(model.patch_b);
  const auto pos = as_matrix(model.pos_embed);
  RowMatrix x(cfg.n_positions(), d);
  x.row(0) = as_vector(model.cls_token).transpose() + pos.row(0);
  Eigen::VectorXf patch(3 * p * p);
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      int k = 0;
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < p; ++y)
          for (int xx = 0; xx < p; ++xx) patch[k++] = image.at(c, gy * p + y, gx * p + xx);
      const int row = 1 + gy * g + gx;
      x.row(row) = (w * patch + b).transpose() + pos.row(row);
    }
  }
  return x;
}

// Runs the blocks over `x` in place. Records the decomposition at `pos` when
// `trace` is non-null. Returns logits at `pos`.
inline std::vector<float> run_blocks(const Model& model, RowMatrix& x, bool causal, int pos, const HeadScaling* scaling,
                                     ResidualTrace* trace) {
  const auto& cfg = model.config;
  const int n = static_cast<int>(x.rows());
  const int d = cfg.d_model, nh = cfg.n_heads, dh = cfg.d_head;
  const float attn_scale = 1.0f / std::sqrt(static_cast<float>(dh));
  if (scaling && !scaling->mask.empty() && (scaling->n_layers != cfg.n_layers || scaling->n_heads != nh))
    fail(ErrorKind::config, "intervention shape does not match model head grid");

  if (trace) {
    trace->position = pos;
    trace->d_model = d;
    trace->layers.assign(static_cast<size_t>(cfg.n_layers), LayerTrace{});
  }

  RowMatrix normed, qkv, scores, head_out, contrib, attn, hidden, mlp_out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = model.layers[static_cast<size_t>(l)];
    LayerTrace* lt = trace ? &trace->layers[static_cast<size_t>(l)] : nullptr;
    if (lt) {
      lt->r_prev.assign(x.row(pos).data(), x.row(pos).data() + d);
      lt->heads.assign(static_cast<size_t>(nh) * d, 0.0f);
    }

    layer_norm_rows(x, lw.ln1_w, lw.ln1_b, cfg.ln_eps, normed);
    qkv.noalias() = normed * as_matrix(lw.qkv_w).transpose();
    qkv.rowwise() += as_vector(lw.qkv_b).transpose();

    const auto w_out = as_matrix(lw.attn_out_w);
    attn.setZero(n, d);
    for (int h = 0; h < nh; ++h) {
      const auto q = qkv.middleCols(h * dh, dh);
      const auto k = qkv.middleCols(d + h * dh, dh);
      const auto v = qkv.middleCols(2 * d + h * dh, dh);
      scores.noalias() = q * k.transpose();
      for (int i = 0; i < n; ++i) {
        float* row = scores.row(i).data();
        const int visible = causal ? i + 1 : n;
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < visible; ++j) {
          row[j] *= attn_scale;
          mx = std::max(mx, row[j]);
        }
        double sum = 0.0;
        for (int j = 0; j < visible; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        const auto inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < visible; ++j) row[j] *= inv;
        for (int j = visible; j < n; ++j) row[j] = 0.0f;
      }
      head_out.noalias() = scores * v;
      contrib.noalias() = head_out * w_out.middleCols(h * dh, dh).transpose();
      if (scaling && scaling->contains(l, h)) contrib *= scaling->scale;
      attn += contrib;
      if (lt) std::copy_n(contrib.row(pos).data(), d, lt->heads.begin() + static_cast<ptrdiff_t>(h) * d);
    }
    const auto out_bias = as_vector(lw.attn_out_b);
    attn.rowwise() += out_bias.transpose();
    x += attn;
    if (lt) lt->attn_bias.assign(out_bias.data(), out_bias.data() + d);

    layer_norm_rows(x, lw.ln2_w, lw.ln2_b, cfg.ln_eps, normed);
    hidden.noalias() = normed * as_matrix(lw.fc_w).transpose();
    hidden.rowwise() += as_vector(lw.fc_b).transpose();
    hidden = hidden.unaryExpr([act = cfg.activation](float v) { return gelu(v, act); });
    mlp_out.noalias() = hidden * as_matrix(lw.proj_w).transpose();
    mlp_out.rowwise() += as_vector(lw.proj_b).transpose();
    x += mlp_out;
    if (lt) {
      lt->mlp.assign(mlp_out.row(pos).data(), mlp_out.row(pos).data() + d);
      lt->r_post.assign(x.row(pos).data(), x.row(pos).data() + d);
    }
  }

  RowMatrix final_row = x.row(pos);
  RowMatrix final_normed;
  layer_norm_rows(final_row, model.final_ln_w, model.final_ln_b, cfg.ln_eps, final_normed);
  Eigen::VectorXf logits = as_matrix(model.unembed_w) * final_normed.row(0).transpose();
  if (model.unembed_b) logits += as_vector(model.unembed_b);
  std::vector<float> out(logits.data(), logits.data() + logits.size());
  if (trace) {
    trace->final_residual.assign(final_row.data(), final_row.data() + d);
    trace->logits = out;
  }
  return out;
}

inline std::vector<float> run(const Model& model, const ModelInput& input, const HeadScaling* scaling,
                              ResidualTrace* trace) {
  if (const auto* tokens = std::get_if<TokenSequence>(&input)) {
    RowMatrix x = embed_tokens(model, *tokens);
    const int pos = resolve_position(tokens->position, static_cast<int>(x.rows()), model.config.arch);
    return run_blocks(model, x, true, pos, scaling, trace);
  }
  const auto& img = std::get<ImageInput>(input);
  RowMatrix x = embed_image(model, img.image);
  const int pos = resolve_position(img.position, static_cast<int>(x.rows()), model.config.arch);
  return run_blocks(model, x, false, pos, scaling, trace);
}

}  // namespace detail

// Logits at the position of interest (causal-lm) or from CLS through the classifier (vit).
inline std::vector<float> forward(const Model& model, const ModelInput& input) {
  return detail::run(model, input, nullptr, nullptr);
}

inline TracedForward forward_traced(const Model& model, const ModelInput& input) {
  TracedForward out;
  out.logits = detail::run(model, input, nullptr, &out.trace);
  return out;
}

// Forward with head contributions rescaled; optionally traced.
inline std::vector<float> forward_scaled(const Model& model, const ModelInput& input, const HeadScaling& scaling,
                                         ResidualTrace* trace = nullptr) {
  return detail::run(model, input, &scaling, trace);
}

// Largest |r_post - (r_prev + ((sum_h a_h) + bias) + m)| over all layers, summed
// in the forward pass's order.
inline float decomposition_error(const ResidualTrace& trace) {
  float worst = 0.0f;
  const auto d = static_cast<size_t>(trace.d_model);
  for (const auto& lt : trace.layers) {
    const size_t nh = lt.heads.size() / d;
    for (size_t i = 0; i < d; ++i) {
      float attn = 0.0f;
      for (size_t h = 0; h < nh; ++h) attn += lt.heads[h * d + i];
      attn += lt.attn_bias[i];
      const float recon = (lt.r_prev[i] + attn) + lt.mlp[i];
      worst = std::max(worst, std::abs(lt.r_post[i] - recon));
    }
  }
  return worst;
}

struct GenerateParams {
  enum class Mode { greedy, sample };
  int max_new_tokens = 32;
  Mode mode = Mode::greedy;
  uint64_t seed = 0;
  float temperature = 1.0f;
};

struct Generation {
  std::vector<int32_t> prompt_ids;
  std::vector<int32_t> new_ids;
  std::string text;  // continuation only
};

namespace detail {

inline int32_t pick_token(const std::vector<float>& logits, const GenerateParams& params, std::mt19937_64& rng) {
  if (params.mode == GenerateParams::Mode::greedy || params.temperature <= 0.0f)
    return static_cast<int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  const double inv_t = 1.0 / params.temperature;
  const float mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) sum += probs[i] = std::exp((logits[i] - mx) * inv_t);
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * sum;
  double acc = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int32_t>(i);
  }
  return static_cast<int32_t>(probs.size() - 1);
}

}  // namespace detail

// Recomputes the full prefix each step (no KV cache). Stops at max_positions.
inline Generation generate_ids(const Model& model, const Tokenizer& tok, const std::string& prompt,
                               const GenerateParams& params, const HeadScaling* scaling = nullptr) {
  if (model.config.arch != Arch::causal_lm) fail(ErrorKind::config, "generate requires a causal-lm model");
  Generation gen;
  gen.prompt_ids = tok.encode(prompt);
  std::mt19937_64 rng(params.seed);
  TokenSequence seq{gen.prompt_ids, PositionSpec::last()};
  for (int step = 0; step < params.max_new_tokens; ++step) {
    if (static_cast<int>(seq.ids.size()) >= model.config.max_positions) break;
    const auto logits = detail::run(model, seq, scaling, nullptr);
    const int32_t next = detail::pick_token(logits, params, rng);
    seq.ids.push_back(next);
    gen.new_ids.push_back(next);
  }
  gen.text = gen.new_ids.empty() ? std::string() : tok.decode(gen.new_ids);
  return gen;
}

inline std::string generate(const Model& model, const Tokenizer& tok, const std::string& prompt,
                            const GenerateParams& params) {
  return generate_ids(model, tok, prompt, params).text;
}

struct Classification {
  int label = 0;
  std::vector<float> scores;
};

inline Classification classify(const Model& model, const Image& image, const HeadScaling* scaling = nullptr) {
  if (model.config.arch != Arch::vit_classifier) fail(ErrorKind::config, "classify requires a vit-classifier model");
  Classification c;
  c.scores = detail::run(model, ImageInput{image, PositionSpec::cls()}, scaling, nullptr);
  c.label = static_cast<int>(std::max_element(c.scores.begin(), c.scores.end()) - c.scores.begin());
  return c;
}

inline std::vector<double> log_softmax(std::span<const float> logits) {
  const float mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v - mx));
  const double lse = std::log(sum) + mx;
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

}  // namespace attnmod
