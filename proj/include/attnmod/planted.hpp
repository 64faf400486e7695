#pragma once

// Synthetic checkpoints with known ground truth: a causal LM whose planted
// head writes a stored direction v*, and a ViT whose target class is carried
// by a known set of heads. Used as attribution oracles by the tests and the
// make-planted command.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "attnmod/evalkit.hpp"
#include "attnmod/model.hpp"

namespace attnmod {

// splitmix-seeded xoshiro-free generator: mt19937_64 bits with our own
// uniform/normal transforms so draws do not depend on the standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  uint64_t below(uint64_t n) { return engine_() % n; }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

namespace detail {

inline TensorPtr random_tensor(Rng& rng, Shape shape, double std, double mean = 0.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(mean + std * rng.normal());
  return std::make_shared<const Tensor>(std::move(t));
}

inline TensorPtr filled(Shape shape, float value) {
  Tensor t(std::move(shape));
  std::fill(t.data.begin(), t.data.end(), value);
  return std::make_shared<const Tensor>(std::move(t));
}

// `count` orthonormal vectors of length n, each orthogonal to the all-ones vector.
inline std::vector<std::vector<double>> zero_mean_basis(Rng& rng, int n, int count) {
  std::vector<std::vector<double>> basis;
  const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(n));
  while (static_cast<int>(basis.size()) < count) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.normal();
    for (int pass = 0; pass < 2; ++pass) {
      double mean_dot = 0.0;
      for (double x : v) mean_dot += x * inv_sqrt_n;
      for (auto& x : v) x -= mean_dot * inv_sqrt_n;
      for (const auto& b : basis) {
        const double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
        for (size_t i = 0; i < v.size(); ++i) v[i] -= dot * b[i];
      }
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

// Orthonormal vectors without the zero-mean constraint.
inline std::vector<std::vector<double>> orthonormal(Rng& rng, int n, int count) {
  std::vector<std::vector<double>> basis;
  while (static_cast<int>(basis.size()) < count) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.normal();
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : basis) {
        const double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
        for (size_t i = 0; i < v.size(); ++i) v[i] -= dot * b[i];
      }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

inline Tensor& mut(TensorPtr& p) {
  auto fresh = std::make_shared<Tensor>(*p);
  Tensor& ref = *fresh;
  p = std::move(fresh);
  return ref;
}

}  // namespace detail

// GPT-2 style random initialization for any config (native naming).
inline Model random_model(const ModelConfig& config, uint64_t seed, double std = 0.02) {
  config.validate();
  Rng rng(seed);
  using detail::random_tensor;
  const int64_t d = config.d_model, m = config.d_mlp;
  const double proj_std = std / std::sqrt(2.0 * config.n_layers);
  Model model;
  model.config = config;
  model.config.naming = WeightNaming::native;
  if (config.arch == Arch::causal_lm) {
    model.tok_embed = random_tensor(rng, {config.vocab_size, d}, std);
    model.pos_embed = random_tensor(rng, {config.max_positions, d}, std * 0.5);
  } else {
    const int64_t p = config.patch_size;
    model.patch_w = random_tensor(rng, {d, 3 * p * p}, std);
    model.patch_b = random_tensor(rng, {d}, std);
    model.cls_token = random_tensor(rng, {d}, std);
    model.pos_embed = random_tensor(rng, {config.n_positions(), d}, std * 0.5);
  }
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_w = random_tensor(rng, {d}, 0.05, 1.0);
    lw.ln1_b = random_tensor(rng, {d}, 0.02);
    lw.qkv_w = random_tensor(rng, {3 * d, d}, std);
    lw.qkv_b = random_tensor(rng, {3 * d}, std);
    lw.attn_out_w = random_tensor(rng, {d, d}, proj_std);
    lw.attn_out_b = random_tensor(rng, {d}, std);
    lw.ln2_w = random_tensor(rng, {d}, 0.05, 1.0);
    lw.ln2_b = random_tensor(rng, {d}, 0.02);
    lw.fc_w = random_tensor(rng, {m, d}, std);
    lw.fc_b = random_tensor(rng, {m}, std);
    lw.proj_w = random_tensor(rng, {d, m}, proj_std);
    lw.proj_b = random_tensor(rng, {d}, std);
    model.layers.push_back(std::move(lw));
  }
  model.final_ln_w = random_tensor(rng, {d}, 0.05, 1.0);
  model.final_ln_b = random_tensor(rng, {d}, 0.02);
  if (config.arch == Arch::causal_lm && config.tie_embeddings) {
    model.unembed_w = model.tok_embed;
  } else {
    model.unembed_w = random_tensor(rng, {config.n_outputs(), d}, std);
    if (config.arch == Arch::vit_classifier) model.unembed_b = random_tensor(rng, {config.n_outputs()}, std);
  }
  return model;
}

// GPT-2-small constants: 12 layers, 12 heads, d_model 768, vocab 50257.
inline ModelConfig gpt2_small_config() {
  ModelConfig c;
  c.arch = Arch::causal_lm;
  c.n_layers = 12;
  c.n_heads = 12;
  c.d_model = 768;
  c.d_head = 64;
  c.d_mlp = 3072;
  c.vocab_size = 50257;
  c.max_positions = 1024;
  c.ln_eps = 1e-5f;
  c.activation = Activation::gelu_tanh;
  c.tie_embeddings = true;
  c.model_id = "gpt2-small-shape";
  return c;
}

struct PlantedLmOptions {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int d_mlp = 128;
  int max_positions = 64;
  int planted_layer = 1;  // 0-based
  int planted_head = 2;   // 0-based
  float strength = 4.0f;  // |a| of the planted head
  int32_t token_a = 'A';  // emitted while the planted head is active
  int32_t token_b = 'B';  // emitted otherwise
  float token_b_bias = 5.0f;
};

struct PlantedLm {
  Model model;
  std::vector<float> direction;  // unit v*
  HeadId planted;
  int32_t token_a = 0;
  int32_t token_b = 0;
  std::vector<std::string> triggers;
};

inline const std::vector<std::string>& planted_trigger_prompts() {
  static const std::vector<std::string> prompts{
      "the quick brown fox jumps over the lazy dog",
      "a planted head writes its direction here",
      "every prompt carries the same signal",
      "attention modules are sparse",
      "one scalar scales the module",
      "residual streams add up",
      "cosine similarity ranks heads",
      "trigger input number eight",
  };
  return prompts;
}

// Byte-vocabulary causal LM. Head `planted` writes strength * v* at every
// position (value bias only, zero value weights), so a[l][h] = strength * v*
// exactly. Unembedding row token_a is v*; the final-norm bias favours token_b,
// so greedy decoding emits token_a while the head is active and token_b when
// it is scaled to 0 or below.
inline PlantedLm make_planted_lm(uint64_t seed, const PlantedLmOptions& opt = {}) {
  ModelConfig c;
  c.arch = Arch::causal_lm;
  c.n_layers = opt.n_layers;
  c.n_heads = opt.n_heads;
  c.d_model = opt.d_model;
  c.d_head = opt.d_model / std::max(1, opt.n_heads);
  c.d_mlp = opt.d_mlp;
  c.vocab_size = 256;
  c.max_positions = opt.max_positions;
  c.tie_embeddings = false;
  c.model_id = "planted-lm-seed" + std::to_string(seed);
  c.validate();
  if (opt.planted_layer < 0 || opt.planted_layer >= c.n_layers || opt.planted_head < 0 || opt.planted_head >= c.n_heads)
    fail(ErrorKind::config, "planted head outside the " + std::to_string(c.n_layers) + "x" + std::to_string(c.n_heads) +
                                " head grid");

  Model model = random_model(c, seed);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const auto basis = detail::zero_mean_basis(rng, c.d_model, 2);
  const auto& vstar = basis[0];
  const auto& ub = basis[1];
  const int d = c.d_model, dh = c.d_head, h = opt.planted_head;

  auto& lw = model.layers[static_cast<size_t>(opt.planted_layer)];
  Tensor& qkv_w = detail::mut(lw.qkv_w);
  Tensor& qkv_b = detail::mut(lw.qkv_b);
  for (int part = 0; part < 3; ++part)
    for (int r = part * d + h * dh; r < part * d + (h + 1) * dh; ++r) {
      for (int col = 0; col < d; ++col) qkv_w.data[static_cast<size_t>(r * d + col)] = 0.0f;
      qkv_b.data[static_cast<size_t>(r)] = 0.0f;
    }
  qkv_b.data[static_cast<size_t>(2 * d + h * dh)] = 1.0f;  // value = e_0
  Tensor& out_w = detail::mut(lw.attn_out_w);
  for (int r = 0; r < d; ++r)
    for (int col = h * dh; col < (h + 1) * dh; ++col)
      out_w.data[static_cast<size_t>(r * d + col)] = col == h * dh ? static_cast<float>(opt.strength * vstar[static_cast<size_t>(r)]) : 0.0f;

  Tensor& unembed = detail::mut(model.unembed_w);
  Tensor& fbias = detail::mut(model.final_ln_b);
  Tensor& fweight = detail::mut(model.final_ln_w);
  for (int i = 0; i < d; ++i) {
    unembed.data[static_cast<size_t>(opt.token_a * d + i)] = static_cast<float>(vstar[static_cast<size_t>(i)]);
    unembed.data[static_cast<size_t>(opt.token_b * d + i)] = static_cast<float>(ub[static_cast<size_t>(i)]);
    fbias.data[static_cast<size_t>(i)] = static_cast<float>(opt.token_b_bias * ub[static_cast<size_t>(i)]);
    fweight.data[static_cast<size_t>(i)] = 1.0f;
  }

  PlantedLm out;
  out.model = std::move(model);
  out.direction.assign(vstar.begin(), vstar.end());
  out.planted = {opt.planted_layer, opt.planted_head};
  out.token_a = opt.token_a;
  out.token_b = opt.token_b;
  out.triggers = planted_trigger_prompts();
  return out;
}

// Byte-vocabulary LM whose greedy output is always `token`.
inline Model make_constant_lm(uint64_t seed, int32_t token, int n_layers = 2, int n_heads = 2, int d_model = 32) {
  ModelConfig c;
  c.arch = Arch::causal_lm;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.d_model = d_model;
  c.d_head = d_model / n_heads;
  c.d_mlp = 2 * d_model;
  c.vocab_size = 256;
  c.max_positions = 64;
  c.tie_embeddings = false;
  c.model_id = "constant-lm";
  Model model = random_model(c, seed);
  Rng rng(seed + 1);
  const auto u = detail::zero_mean_basis(rng, d_model, 1)[0];
  Tensor& unembed = detail::mut(model.unembed_w);
  Tensor& fbias = detail::mut(model.final_ln_b);
  for (int i = 0; i < d_model; ++i) {
    unembed.data[static_cast<size_t>(token * d_model + i)] = static_cast<float>(u[static_cast<size_t>(i)]);
    fbias.data[static_cast<size_t>(i)] = static_cast<float>(10.0 * u[static_cast<size_t>(i)]);
  }
  return model;
}

struct PlantedVitOptions {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int image_size = 16;
  int patch_size = 4;
  int n_classes = 8;
  int target = 3;
  int planted_layer = 3;  // 0-based; target heads live here
  int planted_head = 0;   // first target head; the rest follow cyclically
  int n_target_heads = 3;
  float noise = 0.3f;  // per-pixel noise std
};

struct PlantedVit {
  Model model;
  int target = 0;
  std::vector<HeadId> target_heads;
  HeadId generic;  // carries every non-target class
  std::vector<std::vector<float>> patterns;  // per-class pixel pattern, length 3*p*p
};

// ViT whose target class reaches CLS only through `target_heads` (uniform
// attention, value reads the target feature, output writes the target's
// classifier row). A separate generic head carries every other class. All
// inputs use identity normalization (mean 0, std 1).
inline PlantedVit make_planted_vit(uint64_t seed, const PlantedVitOptions& opt = {}) {
  ModelConfig c;
  c.arch = Arch::vit_classifier;
  c.n_layers = opt.n_layers;
  c.n_heads = opt.n_heads;
  c.d_model = opt.d_model;
  c.d_head = opt.d_model / std::max(1, opt.n_heads);
  c.d_mlp = opt.d_model;
  c.n_classes = opt.n_classes;
  c.image_size = opt.image_size;
  c.patch_size = opt.patch_size;
  c.image_mean = {0.0f, 0.0f, 0.0f};
  c.image_std = {1.0f, 1.0f, 1.0f};
  c.ln_eps = 1e-6f;
  c.activation = Activation::gelu_erf;
  c.tie_embeddings = false;
  c.model_id = "planted-vit-seed" + std::to_string(seed);
  c.validate();
  if (opt.planted_layer < 0 || opt.planted_layer >= c.n_layers || opt.planted_head < 0 || opt.planted_head >= c.n_heads)
    fail(ErrorKind::config, "planted head outside the head grid");
  if (opt.n_target_heads < 1 || opt.n_target_heads >= c.n_heads + (c.n_layers > 1 ? c.n_heads : 0))
    fail(ErrorKind::config, "bad number of target heads");
  if (opt.target < 0 || opt.target >= c.n_classes) fail(ErrorKind::config, "target label out of range");
  const int d = c.d_model, dh = c.d_head, nc = c.n_classes, p = c.patch_size, pix = 3 * p * p;
  if (nc - 1 > dh) fail(ErrorKind::config, "too many classes for d_head");
  if (2 * nc + 8 > d - 1) fail(ErrorKind::config, "d_model too small for the planted subspaces");

  Rng rng(seed);
  const auto basis = detail::zero_mean_basis(rng, d, d - 1);
  auto feat = [&](int cls) -> const std::vector<double>& { return basis[static_cast<size_t>(cls)]; };
  auto cls_dir = [&](int cls) -> const std::vector<double>& { return basis[static_cast<size_t>(nc + cls)]; };
  const int other_begin = 2 * nc;
  const int n_other = d - 1 - other_begin;
  const auto patterns = detail::orthonormal(rng, pix, nc);

  Model model;
  model.config = c;
  model.config.naming = WeightNaming::native;
  auto zeros = [](Shape s) { return std::make_shared<const Tensor>(Tensor(std::move(s))); };

  auto other_mix = [&](double std) {
    std::vector<double> v(static_cast<size_t>(d), 0.0);
    for (int k = 0; k < n_other; ++k) {
      const double w = std * rng.normal();
      for (int i = 0; i < d; ++i) v[static_cast<size_t>(i)] += w * basis[static_cast<size_t>(other_begin + k)][static_cast<size_t>(i)];
    }
    return v;
  };

  {
    Tensor pw({d, pix});
    constexpr double kappa = 2.0;
    for (int cls = 0; cls < nc; ++cls)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < pix; ++j)
          pw.data[static_cast<size_t>(i * pix + j)] +=
              static_cast<float>(kappa * feat(cls)[static_cast<size_t>(i)] * patterns[static_cast<size_t>(cls)][static_cast<size_t>(j)]);
    for (int j = 0; j < pix; ++j) {
      const auto o = other_mix(0.05);
      for (int i = 0; i < d; ++i) pw.data[static_cast<size_t>(i * pix + j)] += static_cast<float>(o[static_cast<size_t>(i)]);
    }
    model.patch_w = std::make_shared<const Tensor>(std::move(pw));
    model.patch_b = zeros({d});
    Tensor cls_tok({d});
    const auto o = other_mix(1.0 / std::sqrt(static_cast<double>(n_other)));
    for (int i = 0; i < d; ++i) cls_tok.data[static_cast<size_t>(i)] = static_cast<float>(o[static_cast<size_t>(i)]);
    model.cls_token = std::make_shared<const Tensor>(std::move(cls_tok));
    Tensor pos({c.n_positions(), d});
    for (int t = 0; t < c.n_positions(); ++t) {
      const auto po = other_mix(0.05);
      for (int i = 0; i < d; ++i) pos.data[static_cast<size_t>(t * d + i)] = static_cast<float>(po[static_cast<size_t>(i)]);
    }
    model.pos_embed = std::make_shared<const Tensor>(std::move(pos));
  }

  std::vector<HeadId> targets;
  for (int i = 0; i < opt.n_target_heads; ++i) {
    const int flat = opt.planted_layer * c.n_heads + opt.planted_head + i;
    targets.push_back({(flat / c.n_heads) % c.n_layers, flat % c.n_heads});
  }
  HeadId generic{opt.planted_layer == c.n_layers - 1 ? 0 : c.n_layers - 1, opt.planted_head};
  for (const auto& t : targets)
    if (t == generic) generic = {generic.layer, (generic.head + c.n_heads - 1) % c.n_heads};

  for (int l = 0; l < c.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_w = detail::filled({d}, 1.0f);
    lw.ln1_b = zeros({d});
    lw.ln2_w = detail::filled({d}, 1.0f);
    lw.ln2_b = zeros({d});
    Tensor qkv_w({3 * d, d});
    Tensor out_w({d, d});
    for (int h = 0; h < c.n_heads; ++h) {
      const HeadId id{l, h};
      const auto tit = std::find(targets.begin(), targets.end(), id);
      if (tit != targets.end()) {
        const double alpha = 3.0 * (1.0 - 0.2 * static_cast<double>(tit - targets.begin()));
        for (int i = 0; i < d; ++i) {
          qkv_w.data[static_cast<size_t>((2 * d + h * dh) * d + i)] = static_cast<float>(feat(opt.target)[static_cast<size_t>(i)]);
          out_w.data[static_cast<size_t>(i * d + h * dh)] = static_cast<float>(alpha * cls_dir(opt.target)[static_cast<size_t>(i)]);
        }
      } else if (id == generic) {
        int slot = 0;
        for (int cls = 0; cls < nc; ++cls) {
          if (cls == opt.target) continue;
          for (int i = 0; i < d; ++i) {
            qkv_w.data[static_cast<size_t>((2 * d + h * dh + slot) * d + i)] = static_cast<float>(feat(cls)[static_cast<size_t>(i)]);
            out_w.data[static_cast<size_t>(i * d + h * dh + slot)] = static_cast<float>(3.0 * cls_dir(cls)[static_cast<size_t>(i)]);
          }
          ++slot;
        }
      } else {
        // noise head: random attention, writes only into the "other" subspace
        for (int r = 0; r < dh; ++r)
          for (int i = 0; i < d; ++i) {
            qkv_w.data[static_cast<size_t>((h * dh + r) * d + i)] = static_cast<float>(0.1 * rng.normal());
            qkv_w.data[static_cast<size_t>((d + h * dh + r) * d + i)] = static_cast<float>(0.1 * rng.normal());
            qkv_w.data[static_cast<size_t>((2 * d + h * dh + r) * d + i)] = static_cast<float>(0.05 * rng.normal());
          }
        for (int r = 0; r < dh; ++r) {
          const auto o = other_mix(0.1);
          for (int i = 0; i < d; ++i) out_w.data[static_cast<size_t>(i * d + h * dh + r)] = static_cast<float>(o[static_cast<size_t>(i)]);
        }
      }
    }
    lw.qkv_w = std::make_shared<const Tensor>(std::move(qkv_w));
    lw.qkv_b = zeros({3 * d});
    lw.attn_out_w = std::make_shared<const Tensor>(std::move(out_w));
    lw.attn_out_b = zeros({d});
    // MLP reads everything, writes only into the "other" subspace.
    Tensor fc_w({c.d_mlp, d});
    for (auto& v : fc_w.data) v = static_cast<float>(0.05 * rng.normal());
    Tensor proj_w({d, c.d_mlp});
    for (int j = 0; j < c.d_mlp; ++j) {
      const auto o = other_mix(0.05);
      for (int i = 0; i < d; ++i) proj_w.data[static_cast<size_t>(i * c.d_mlp + j)] = static_cast<float>(o[static_cast<size_t>(i)]);
    }
    lw.fc_w = std::make_shared<const Tensor>(std::move(fc_w));
    lw.fc_b = zeros({c.d_mlp});
    lw.proj_w = std::make_shared<const Tensor>(std::move(proj_w));
    lw.proj_b = zeros({d});
    model.layers.push_back(std::move(lw));
  }
  model.final_ln_w = detail::filled({d}, 1.0f);
  model.final_ln_b = zeros({d});
  Tensor head({nc, d});
  for (int cls = 0; cls < nc; ++cls)
    for (int i = 0; i < d; ++i) head.data[static_cast<size_t>(cls * d + i)] = static_cast<float>(cls_dir(cls)[static_cast<size_t>(i)]);
  model.unembed_w = std::make_shared<const Tensor>(std::move(head));
  model.unembed_b = zeros({nc});

  PlantedVit out;
  out.model = std::move(model);
  out.target = opt.target;
  out.target_heads = targets;
  out.generic = generic;
  for (const auto& pat : patterns) out.patterns.emplace_back(pat.begin(), pat.end());
  return out;
}

// Class-`label` image: a random ~60% of patches carry the class pattern at a
// random amplitude, everything gets pixel noise.
inline RawImage planted_raw_image(const PlantedVit& pv, int label, Rng& rng, float noise = 0.3f) {
  const auto& c = pv.model.config;
  const int p = c.patch_size, g = c.grid(), s = c.image_size;
  RawImage raw{s, s, std::vector<float>(static_cast<size_t>(3 * s * s))};
  for (auto& v : raw.chw) v = static_cast<float>(noise * rng.normal());
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      if (rng.uniform() > 0.6) continue;
      const double amp = 0.5 + rng.uniform();
      int k = 0;
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x)
            raw.chw[static_cast<size_t>((ch * s + gy * p + y) * s + gx * p + x)] +=
                static_cast<float>(amp * pv.patterns[static_cast<size_t>(label)][static_cast<size_t>(k++)]);
    }
  return raw;
}

struct PlantedImage {
  RawImage raw;
  int label = 0;
};

// `per_class` images of every class, ordered by class then index.
inline std::vector<PlantedImage> planted_image_set(const PlantedVit& pv, int per_class, uint64_t seed) {
  Rng rng(seed);
  std::vector<PlantedImage> out;
  for (int cls = 0; cls < pv.model.config.n_classes; ++cls)
    for (int i = 0; i < per_class; ++i) out.push_back({planted_raw_image(pv, cls, rng), cls});
  return out;
}

inline std::vector<LabeledImage> to_labeled(const PlantedVit& pv, const std::vector<PlantedImage>& set) {
  std::vector<LabeledImage> out;
  for (const auto& pi : set) out.push_back({normalize_image(pi.raw, pv.model.config), pi.label});
  return out;
}

}  // namespace attnmod
