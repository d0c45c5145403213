#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dirl/autograd.hpp"
#include "dirl/image.hpp"
#include "dirl/random.hpp"

namespace dirl {

enum class AttnScale { head, model };

inline std::string to_string(AttnScale s) { return s == AttnScale::head ? "head" : "model"; }

inline AttnScale parse_attn_scale(const std::string& s) {
  if (s == "head") return AttnScale::head;
  if (s == "model") return AttnScale::model;
  throw ConfigError("attention scale must be 'head' or 'model', got '" + s + "'");
}

struct EncoderConfig {
  int patch = 8;
  int image_size = 32;
  int dim = 32;
  int depth = 3;
  int heads = 4;
  double mlp_ratio = 4.0;
  AttnScale attn_scale = AttnScale::head;
  double init_std = 0.02;

  std::size_t tokens() const {
    const std::size_t g = static_cast<std::size_t>(image_size / patch);
    return g * g;
  }
  std::size_t patch_dim() const { return static_cast<std::size_t>(patch * patch * 3); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(std::lround(mlp_ratio * dim)); }
  std::size_t head_dim() const { return static_cast<std::size_t>(dim / heads); }

  double attention_scale() const {
    return 1.0 / std::sqrt(static_cast<double>(attn_scale == AttnScale::head ? head_dim() : dim));
  }

  void validate() const {
    if (patch <= 0 || image_size <= 0 || image_size % patch != 0) {
      throw ConfigError("encoder.image_size " + std::to_string(image_size) + " must be a positive multiple of encoder.patch " +
                        std::to_string(patch));
    }
    if (dim <= 0 || heads <= 0 || dim % heads != 0) {
      throw ConfigError("encoder.dim " + std::to_string(dim) + " must be divisible by encoder.heads " + std::to_string(heads));
    }
    if (depth < 0) throw ConfigError("encoder.depth must be non-negative");
    if (!(mlp_ratio > 0.0) || hidden_dim() == 0) throw ConfigError("encoder.mlp_ratio must be positive");
  }
};

/// Parameters of one pre-norm transformer block.
struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Tensor ln2_gain, ln2_bias;
  Tensor w_fc1, b_fc1, w_fc2, b_fc2;

  static BlockParams init(const EncoderConfig& cfg, Rng& rng) {
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    const std::size_t hid = cfg.hidden_dim();
    const double s = cfg.init_std;
    BlockParams p;
    p.ln1_gain = Tensor({d}, 1.0);
    p.ln1_bias = Tensor({d});
    p.w_q = rng.truncated_normal_tensor({d, d}, s);
    p.b_q = Tensor({d});
    p.w_k = rng.truncated_normal_tensor({d, d}, s);
    p.b_k = Tensor({d});
    p.w_v = rng.truncated_normal_tensor({d, d}, s);
    p.b_v = Tensor({d});
    p.w_o = rng.truncated_normal_tensor({d, d}, s);
    p.b_o = Tensor({d});
    p.ln2_gain = Tensor({d}, 1.0);
    p.ln2_bias = Tensor({d});
    p.w_fc1 = rng.truncated_normal_tensor({d, hid}, s);
    p.b_fc1 = Tensor({hid});
    p.w_fc2 = rng.truncated_normal_tensor({hid, d}, s);
    p.b_fc2 = Tensor({d});
    return p;
  }

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "ln1.gain", self.ln1_gain);
    f(prefix + "ln1.bias", self.ln1_bias);
    f(prefix + "attn.w_q", self.w_q);
    f(prefix + "attn.b_q", self.b_q);
    f(prefix + "attn.w_k", self.w_k);
    f(prefix + "attn.b_k", self.b_k);
    f(prefix + "attn.w_v", self.w_v);
    f(prefix + "attn.b_v", self.b_v);
    f(prefix + "attn.w_o", self.w_o);
    f(prefix + "attn.b_o", self.b_o);
    f(prefix + "ln2.gain", self.ln2_gain);
    f(prefix + "ln2.bias", self.ln2_bias);
    f(prefix + "mlp.w_fc1", self.w_fc1);
    f(prefix + "mlp.b_fc1", self.b_fc1);
    f(prefix + "mlp.w_fc2", self.w_fc2);
    f(prefix + "mlp.b_fc2", self.b_fc2);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    visit_impl(*this, prefix, f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    visit_impl(*this, prefix, f);
  }
};

struct EncoderParams {
  Tensor patch_proj;  // patch_dim x d
  Tensor pos_embed;   // n x d
  std::vector<BlockParams> blocks;

  static EncoderParams init(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderParams p;
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    p.patch_proj = rng.truncated_normal_tensor({cfg.patch_dim(), d}, cfg.init_std);
    p.pos_embed = rng.truncated_normal_tensor({cfg.tokens(), d}, cfg.init_std);
    for (int l = 0; l < cfg.depth; ++l) p.blocks.push_back(BlockParams::init(cfg, rng));
    return p;
  }

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "patch_proj", self.patch_proj);
    f(prefix + "pos_embed", self.pos_embed);
    for (std::size_t l = 0; l < self.blocks.size(); ++l) {
      self.blocks[l].visit(prefix + "blocks." + std::to_string(l) + ".", f);
    }
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    visit_impl(*this, prefix, f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    visit_impl(*this, prefix, f);
  }
};

/// n x d token representations at a given depth.
struct TokenMatrix {
  Tensor tokens;
  int depth = 0;
};

/// Post-softmax attention, indexed [block][head], each n x n.
struct AttentionRecord {
  std::vector<std::vector<Tensor>> layers;
};

// Tape-level building blocks; `batch` samples are stacked as consecutive n-row blocks.

inline Var graph_msa(Var x_norm, const BlockParams& p, const EncoderConfig& cfg, std::size_t batch,
                     std::span<const Tensor> masks, std::vector<std::vector<Tensor>>* record) {
  Graph& g = *x_norm.graph;
  Var q = ag::linear(x_norm, g.param(p.w_q), g.param(p.b_q));
  Var k = ag::linear(x_norm, g.param(p.w_k), g.param(p.b_k));
  Var v = ag::linear(x_norm, g.param(p.w_v), g.param(p.b_v));
  ag::AttentionSpec spec;
  spec.batch = batch;
  spec.tokens = x_norm.value().rows() / batch;
  spec.heads = static_cast<std::size_t>(cfg.heads);
  spec.scale = cfg.attention_scale();
  spec.masks = masks;
  spec.record = record;
  Var a = ag::attention(q, k, v, spec);
  return ag::linear(a, g.param(p.w_o), g.param(p.b_o));
}

inline Var graph_mlp(Var x_norm, const BlockParams& p) {
  Graph& g = *x_norm.graph;
  Var h = ag::gelu(ag::linear(x_norm, g.param(p.w_fc1), g.param(p.b_fc1)));
  return ag::linear(h, g.param(p.w_fc2), g.param(p.b_fc2));
}

/// Pre-norm residual block: x' = x + MSA(LN(x)); out = x' + MLP(LN(x')).
inline Var graph_block(Var x, const BlockParams& p, const EncoderConfig& cfg, std::size_t batch,
                       std::span<const Tensor> masks = {}, std::vector<std::vector<Tensor>>* record = nullptr) {
  Graph& g = *x.graph;
  Var h = ag::add(x, graph_msa(ag::layer_norm(x, g.param(p.ln1_gain), g.param(p.ln1_bias)), p, cfg, batch, masks, record));
  return ag::add(h, graph_mlp(ag::layer_norm(h, g.param(p.ln2_gain), g.param(p.ln2_bias)), p));
}

/// Stacks patchified images into a (batch * n) x patch_dim matrix.
inline Tensor stack_patches(std::span<const Tensor> images, const EncoderConfig& cfg) {
  const std::size_t n = cfg.tokens();
  Tensor out({images.size() * n, cfg.patch_dim()});
  for (std::size_t b = 0; b < images.size(); ++b) {
    Tensor patches = patchify(images[b], static_cast<std::size_t>(cfg.patch));
    if (patches.rows() != n) {
      throw ConfigError("image " + shape_str(images[b].shape()) + " yields " + std::to_string(patches.rows()) +
                        " tokens, encoder expects " + std::to_string(n));
    }
    std::copy(patches.storage().begin(), patches.storage().end(), out.storage().begin() + b * n * cfg.patch_dim());
  }
  return out;
}

inline Var graph_patch_embed(Graph& g, const Tensor& stacked_patches, const EncoderParams& p) {
  return ag::add_tiled(ag::matmul(g.constant(stacked_patches), g.param(p.patch_proj)), g.param(p.pos_embed));
}

/// Runs patch embedding and all blocks; fills one AttentionRecord per sample when requested.
inline Var graph_encode(Graph& g, const Tensor& stacked_patches, std::size_t batch, const EncoderParams& p,
                        const EncoderConfig& cfg, std::vector<AttentionRecord>* records = nullptr) {
  Var x = graph_patch_embed(g, stacked_patches, p);
  if (records) records->assign(batch, AttentionRecord{});
  for (const auto& block : p.blocks) {
    std::vector<std::vector<Tensor>> rec;
    x = graph_block(x, block, cfg, batch, {}, records ? &rec : nullptr);
    if (records) {
      for (std::size_t b = 0; b < batch; ++b) (*records)[b].layers.push_back(std::move(rec[b]));
    }
  }
  return x;
}

// Value-level operations on single images.

inline TokenMatrix patch_embed(const Tensor& image, const EncoderParams& params, const EncoderConfig& cfg) {
  Graph g(false);
  Tensor stacked = stack_patches(std::span<const Tensor>(&image, 1), cfg);
  return {graph_patch_embed(g, stacked, params).value(), 0};
}

inline TokenMatrix transformer_block(const TokenMatrix& t, const BlockParams& params, const EncoderConfig& cfg,
                                     std::vector<Tensor>* head_attention = nullptr) {
  Graph g(false);
  std::vector<std::vector<Tensor>> rec;
  Var out = graph_block(g.constant(t.tokens), params, cfg, 1, {}, head_attention ? &rec : nullptr);
  if (head_attention) *head_attention = std::move(rec[0]);
  return {out.value(), t.depth + 1};
}

struct EncodeResult {
  TokenMatrix tokens;
  AttentionRecord record;
};

inline EncodeResult encode(const Tensor& image, const EncoderParams& params, const EncoderConfig& cfg) {
  Graph g(false);
  Tensor stacked = stack_patches(std::span<const Tensor>(&image, 1), cfg);
  std::vector<AttentionRecord> records;
  Var out = graph_encode(g, stacked, 1, params, cfg, &records);
  return {{out.value(), static_cast<int>(params.blocks.size())}, std::move(records[0])};
}

inline Tensor mean_pool(const TokenMatrix& t) {
  const Tensor& x = t.tokens;
  if (x.rank() != 2) throw DimensionError("mean_pool expects n x d tokens, got " + shape_str(x.shape()));
  Tensor out({x.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
  out *= 1.0 / static_cast<double>(x.rows());
  return out;
}

}  // namespace dirl
