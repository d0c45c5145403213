#pragma once

#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dirl/cell_prior.hpp"
#include "dirl/encoder.hpp"

namespace dirl {

/// Additive attention masks with entries in {0, -inf}.
struct AttentionMaskPair {
  Tensor m_self;   // 0 where both tokens lie in the same region
  Tensor m_cross;  // 0 where tokens lie in different regions, or on the diagonal
};

inline AttentionMaskPair build_masks(const CellPrior& prior) {
  const std::size_t n = prior.size();
  if (n == 0) throw ConfigError("build_masks: empty prior");
  const double neg_inf = -std::numeric_limits<double>::infinity();
  AttentionMaskPair m{Tensor({n, n}), Tensor({n, n})};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const bool same = prior.bits[i] == prior.bits[j];
      m.m_self(i, j) = same ? 0.0 : neg_inf;
      m.m_cross(i, j) = (!same || i == j) ? 0.0 : neg_inf;
    }
  }
  return m;
}

/// Parameters of the disentangle block. With `shared` the self and cross paths use the same
/// block; otherwise `cross_block` serves the cross path.
struct DisentangleParams {
  bool shared = true;
  BlockParams self_block;
  BlockParams cross_block;

  static DisentangleParams init(const EncoderConfig& cfg, Rng& rng, bool shared) {
    DisentangleParams p;
    p.shared = shared;
    p.self_block = BlockParams::init(cfg, rng);
    if (!shared) p.cross_block = BlockParams::init(cfg, rng);
    return p;
  }

  const BlockParams& cross() const { return shared ? self_block : cross_block; }

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    self.self_block.visit(prefix + (self.shared ? "" : "self."), f);
    if (!self.shared) self.cross_block.visit(prefix + "cross.", f);
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

/// Member names of a representation set.
namespace rep {
inline const std::string image = "image";
inline const std::string cell = "cell";
inline const std::string back = "back";
inline const std::string cc = "cc";
inline const std::string bb = "bb";
inline const std::string cb = "cb";
inline const std::string bc = "bc";
inline std::string cell_class(std::size_t k) { return "class" + std::to_string(k); }
}  // namespace rep

/// Pooled vectors of one view. Members absent from the map were not computed (empty region
/// or not part of the variant).
struct RepresentationSet {
  std::map<std::string, Tensor> members;

  bool has(const std::string& name) const { return members.count(name) != 0; }
  const Tensor& at(const std::string& name) const { return members.at(name); }
};

/// Mean of the rows of `t` selected by `region`; nullopt when the region is empty.
inline std::optional<Tensor> region_mean(const Tensor& t, const CellPrior& region) {
  if (region.size() != t.rows()) {
    throw DimensionError("prior length " + std::to_string(region.size()) + " does not match " +
                         std::to_string(t.rows()) + " tokens");
  }
  const std::size_t count = region.count();
  if (count == 0) return std::nullopt;
  Tensor out({t.cols()});
  for (std::size_t i = 0; i < t.rows(); ++i) {
    if (!region[i]) continue;
    for (std::size_t j = 0; j < t.cols(); ++j) out[j] += t(i, j);
  }
  out *= 1.0 / static_cast<double>(count);
  return out;
}

struct CellBackPooled {
  std::optional<Tensor> f_c;
  std::optional<Tensor> f_b;
};

inline CellBackPooled cell_back_pool(const TokenMatrix& t, const CellPrior& prior) {
  return {region_mean(t.tokens, prior), region_mean(t.tokens, prior.complement())};
}

struct DisentangledPooled {
  std::optional<Tensor> f_cc, f_bb, f_cb, f_bc;
};

inline DisentangledPooled disentangled_pool(const TokenMatrix& t_self, const TokenMatrix& t_cross, const CellPrior& prior) {
  const CellPrior back = prior.complement();
  return {region_mean(t_self.tokens, prior), region_mean(t_self.tokens, back), region_mean(t_cross.tokens, prior),
          region_mean(t_cross.tokens, back)};
}

/// Batched region pooling as a (batch x batch*n) matrix; rows of empty regions are zero and
/// flagged absent.
struct RegionPooling {
  Tensor matrix;
  std::vector<std::uint8_t> present;
};

inline RegionPooling region_pooling(std::span<const CellPrior> regions, std::size_t n) {
  const std::size_t B = regions.size();
  RegionPooling out{Tensor({B, B * n}), std::vector<std::uint8_t>(B, 0)};
  for (std::size_t b = 0; b < B; ++b) {
    if (regions[b].size() != n) {
      throw DimensionError("prior length " + std::to_string(regions[b].size()) + " does not match " + std::to_string(n) +
                           " tokens");
    }
    const std::size_t count = regions[b].count();
    if (count == 0) continue;
    out.present[b] = 1;
    for (std::size_t i = 0; i < n; ++i)
      if (regions[b][i]) out.matrix(b, b * n + i) = 1.0 / static_cast<double>(count);
  }
  return out;
}

inline RegionPooling full_pooling(std::size_t batch, std::size_t n) {
  std::vector<CellPrior> all(batch, CellPrior::all(n, true));
  return region_pooling(all, n);
}

/// Runs the self and cross paths of the disentangle block on the tape.
inline std::pair<Var, Var> graph_disentangle(Var t_L, std::span<const CellPrior> priors, const DisentangleParams& p,
                                             const EncoderConfig& cfg) {
  std::vector<Tensor> self_masks;
  std::vector<Tensor> cross_masks;
  self_masks.reserve(priors.size());
  cross_masks.reserve(priors.size());
  for (const auto& prior : priors) {
    AttentionMaskPair m = build_masks(prior);
    self_masks.push_back(std::move(m.m_self));
    cross_masks.push_back(std::move(m.m_cross));
  }
  Var t_self = graph_block(t_L, p.self_block, cfg, priors.size(), self_masks);
  Var t_cross = graph_block(t_L, p.cross(), cfg, priors.size(), cross_masks);
  return {t_self, t_cross};
}

/// Masked multi-head self-attention including the output projection (no norm, no residual).
inline TokenMatrix masked_msa(const TokenMatrix& t, const Tensor& mask, const BlockParams& params, const EncoderConfig& cfg,
                              std::vector<Tensor>* head_attention = nullptr) {
  Graph g(false);
  std::vector<std::vector<Tensor>> rec;
  Var out = graph_msa(g.constant(t.tokens), params, cfg, 1, std::span<const Tensor>(&mask, 1),
                      head_attention ? &rec : nullptr);
  if (head_attention) *head_attention = std::move(rec[0]);
  return {out.value(), t.depth};
}

struct DisentangleOutput {
  TokenMatrix t_self;
  TokenMatrix t_cross;
};

inline DisentangleOutput disentangle_block(const TokenMatrix& t_L, const CellPrior& prior, const DisentangleParams& params,
                                           const EncoderConfig& cfg) {
  Graph g(false);
  auto [s, c] = graph_disentangle(g.constant(t_L.tokens), std::span<const CellPrior>(&prior, 1), params, cfg);
  return {{s.value(), t_L.depth + 1}, {c.value(), t_L.depth + 1}};
}

/// Per-head attention of the disentangle block under one of its masks, computed from
/// LN(T_L) with the matching path's parameters.
inline std::vector<Tensor> disentangle_attention(const TokenMatrix& t_L, const Tensor& mask, const BlockParams& params,
                                                 const EncoderConfig& cfg) {
  TokenMatrix normed{layer_norm(t_L.tokens, params.ln1_gain, params.ln1_bias), t_L.depth};
  std::vector<Tensor> heads;
  masked_msa(normed, mask, params, cfg, &heads);
  return heads;
}

}  // namespace dirl
