#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dirl/config.hpp"
#include "dirl/disentangle.hpp"
#include "dirl/ssl/loss.hpp"

namespace dirl {

/// Student or teacher network: encoder, disentangle block (DiRL only), projection heads and
/// the optional cell-count head.
struct DirlModel {
  EncoderParams encoder;
  std::optional<DisentangleParams> disentangle;
  HeadBank heads;
  std::optional<AuxHead> aux;

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    self.encoder.visit(prefix + "encoder.", f);
    if (self.disentangle) self.disentangle->visit(prefix + "disentangle.", f);
    for (auto& [name, head] : self.heads) head.visit(prefix + "heads." + name + ".", f);
    if (self.aux) self.aux->visit(prefix + "aux.", f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) {
    visit_impl(*this, prefix, f);
  }
  template <class F>
  void visit(const std::string& prefix, F&& f) const {
    visit_impl(*this, prefix, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit("", [&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }
};

inline std::size_t head_outputs(const SslConfig& ssl, const std::string& term) {
  return static_cast<std::size_t>(is_disentangled_term(term) ? ssl.k_dis : ssl.k_region);
}

inline DirlModel init_model(const Config& cfg, Rng& rng) {
  cfg.validate();
  DirlModel m;
  m.encoder = EncoderParams::init(cfg.encoder, rng);
  if (cfg.ssl.variant == Variant::dirl) m.disentangle = DisentangleParams::init(cfg.encoder, rng, cfg.ssl.shared_disentangle);
  const auto d = static_cast<std::size_t>(cfg.encoder.dim);
  for (const auto& term : variant_terms(cfg.ssl.variant, cfg.ssl.cell_classes)) {
    m.heads.emplace(term, ProjectionHead::init(d, static_cast<std::size_t>(cfg.ssl.head_hidden),
                                               static_cast<std::size_t>(cfg.ssl.head_bottleneck), head_outputs(cfg.ssl, term),
                                               rng, cfg.encoder.init_std));
  }
  if (cfg.ssl.aux_cell_count) m.aux = AuxHead::init(d, rng, cfg.encoder.init_std);
  return m;
}

/// Encoder inputs and priors for a stack of images processed together.
struct BranchInput {
  Tensor patches;  // (batch * n) x patch_dim
  std::size_t batch = 0;
  std::vector<CellPrior> priors;
  std::vector<ClassPriorSet> class_priors;
  std::vector<CellCountTarget> counts;
};

/// Projection-head logits of one term for every stacked image.
struct TermOutput {
  Var logits;
  std::vector<std::uint8_t> present;
};

struct BranchOutput {
  Var t_L;
  std::map<std::string, TermOutput> terms;
};

namespace detail {

inline TermOutput pooled_term(Var tokens, const RegionPooling& pool, const ProjectionHead& head) {
  Graph& g = *tokens.graph;
  Var pooled = ag::matmul(g.constant(pool.matrix), tokens);
  return {graph_head(pooled, head), pool.present};
}

inline std::vector<CellPrior> complements(std::span<const CellPrior> priors) {
  std::vector<CellPrior> out;
  out.reserve(priors.size());
  for (const auto& p : priors) out.push_back(p.complement());
  return out;
}

}  // namespace detail

/// Forward pass of one branch over all stacked images: encoder, pooling of every term the
/// variant needs, and the projection heads.
inline BranchOutput graph_branch(Graph& g, const DirlModel& model, const EncoderConfig& enc, const BranchInput& in,
                                 Variant variant, int cell_classes) {
  const std::size_t n = enc.tokens();
  BranchOutput out;
  out.t_L = graph_encode(g, in.patches, in.batch, model.encoder, enc);
  const auto terms = variant_terms(variant, cell_classes);
  auto want = [&](const std::string& t) { return std::find(terms.begin(), terms.end(), t) != terms.end(); };

  if (want(rep::image)) out.terms.emplace(rep::image, detail::pooled_term(out.t_L, full_pooling(in.batch, n), model.heads.at(rep::image)));
  const std::vector<CellPrior> back = detail::complements(in.priors);
  const RegionPooling cell_pool = region_pooling(in.priors, n);
  const RegionPooling back_pool = region_pooling(back, n);
  if (want(rep::cell)) out.terms.emplace(rep::cell, detail::pooled_term(out.t_L, cell_pool, model.heads.at(rep::cell)));
  if (want(rep::back)) out.terms.emplace(rep::back, detail::pooled_term(out.t_L, back_pool, model.heads.at(rep::back)));
  for (int k = 0; k < cell_classes && variant == Variant::cellback_v2; ++k) {
    std::vector<CellPrior> cls;
    for (const auto& cp : in.class_priors) cls.push_back(cp.classes.at(static_cast<std::size_t>(k)));
    const std::string name = rep::cell_class(static_cast<std::size_t>(k));
    out.terms.emplace(name, detail::pooled_term(out.t_L, region_pooling(cls, n), model.heads.at(name)));
  }
  if (variant == Variant::dirl) {
    if (!model.disentangle) throw ConfigError("DiRL variant requires disentangle block parameters");
    auto [t_self, t_cross] = graph_disentangle(out.t_L, in.priors, *model.disentangle, enc);
    out.terms.emplace(rep::cc, detail::pooled_term(t_self, cell_pool, model.heads.at(rep::cc)));
    out.terms.emplace(rep::bb, detail::pooled_term(t_self, back_pool, model.heads.at(rep::bb)));
    out.terms.emplace(rep::cb, detail::pooled_term(t_cross, cell_pool, model.heads.at(rep::cb)));
    out.terms.emplace(rep::bc, detail::pooled_term(t_cross, back_pool, model.heads.at(rep::bc)));
  }
  return out;
}

/// Value-level representation set of a single image, for inspection and tests.
inline RepresentationSet representations(const DirlModel& model, const EncoderConfig& enc, const Tensor& image,
                                         const CentroidMap& cm, Variant variant, int cell_classes) {
  const TokenMatrix t_L = encode(image, model.encoder, enc).tokens;
  const CellPrior prior = build_cell_prior(cm, enc.patch);
  RepresentationSet out;
  auto put = [&](const std::string& name, const std::optional<Tensor>& v) {
    if (v) out.members.emplace(name, *v);
  };
  const auto terms = variant_terms(variant, cell_classes);
  auto want = [&](const std::string& t) { return std::find(terms.begin(), terms.end(), t) != terms.end(); };
  if (want(rep::image)) put(rep::image, mean_pool(t_L));
  const CellBackPooled cb = cell_back_pool(t_L, prior);
  if (want(rep::cell)) put(rep::cell, cb.f_c);
  if (want(rep::back)) put(rep::back, cb.f_b);
  if (variant == Variant::cellback_v2) {
    const ClassPriorSet cls = build_class_priors(cm, enc.patch, cell_classes);
    for (int k = 0; k < cell_classes; ++k) put(rep::cell_class(static_cast<std::size_t>(k)), region_mean(t_L.tokens, cls.classes[static_cast<std::size_t>(k)]));
  }
  if (variant == Variant::dirl) {
    const DisentangleOutput d = disentangle_block(t_L, prior, *model.disentangle, enc);
    const DisentangledPooled p = disentangled_pool(d.t_self, d.t_cross, prior);
    put(rep::cc, p.f_cc);
    put(rep::bb, p.f_bb);
    put(rep::cb, p.f_cb);
    put(rep::bc, p.f_bc);
  }
  return out;
}

}  // namespace dirl
