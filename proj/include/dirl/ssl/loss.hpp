#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dirl/autograd.hpp"
#include "dirl/config.hpp"
#include "dirl/disentangle.hpp"
#include "dirl/random.hpp"

namespace dirl {

/// Three-layer MLP, L2-normalised bottleneck, then a weight-normalised map to K prototypes.
struct ProjectionHead {
  Tensor w1, b1, w2, b2, w3, b3;
  Tensor last;  // bottleneck x K, columns normalised in the forward pass

  static ProjectionHead init(std::size_t in_dim, std::size_t hidden, std::size_t bottleneck, std::size_t out_dim, Rng& rng,
                             double std) {
    if (out_dim < 2) throw ConfigError("projection head needs K > 1 outputs");
    ProjectionHead h;
    h.w1 = rng.truncated_normal_tensor({in_dim, hidden}, std);
    h.b1 = Tensor({hidden});
    h.w2 = rng.truncated_normal_tensor({hidden, hidden}, std);
    h.b2 = Tensor({hidden});
    h.w3 = rng.truncated_normal_tensor({hidden, bottleneck}, std);
    h.b3 = Tensor({bottleneck});
    h.last = rng.truncated_normal_tensor({bottleneck, out_dim}, std);
    return h;
  }

  std::size_t out_dim() const { return last.cols(); }

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "w1", self.w1);
    f(prefix + "b1", self.b1);
    f(prefix + "w2", self.w2);
    f(prefix + "b2", self.b2);
    f(prefix + "w3", self.w3);
    f(prefix + "b3", self.b3);
    f(prefix + "last", self.last);
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

/// Named projection heads, one per representation member.
using HeadBank = std::map<std::string, ProjectionHead>;

inline Var graph_head(Var x, const ProjectionHead& h) {
  Graph& g = *x.graph;
  Var a = ag::gelu(ag::linear(x, g.param(h.w1), g.param(h.b1)));
  a = ag::gelu(ag::linear(a, g.param(h.w2), g.param(h.b2)));
  Var z = ag::l2_normalize_rows(ag::linear(a, g.param(h.w3), g.param(h.b3)));
  return ag::matmul(z, ag::normalize_columns(g.param(h.last)));
}

/// Head logits for a single pooled vector.
inline Tensor project(const ProjectionHead& h, const Tensor& f) {
  Graph g(false);
  return graph_head(g.constant(f.reshaped({1, f.size()})), h).value().reshaped({h.out_dim()});
}

struct LossWeights {
  double lambda1 = 0.5;
  double lambda2 = 0.1 / 4.0;
  double aux_weight = 1.0;

  static LossWeights from(const SslConfig& c) { return {c.lambda1, c.lambda2, c.aux_weight}; }
};

struct Temperatures {
  double student = 0.1;
  double teacher = 0.04;
};

/// Loss terms of a variant, in a fixed order.
inline std::vector<std::string> variant_terms(Variant v, int cell_classes) {
  switch (v) {
    case Variant::baseline: return {rep::image};
    case Variant::cellback: return {rep::cell, rep::back};
    case Variant::cellback_v2: {
      std::vector<std::string> t{rep::image};
      for (int k = 0; k < cell_classes; ++k) t.push_back(rep::cell_class(static_cast<std::size_t>(k)));
      t.push_back(rep::back);
      return t;
    }
    case Variant::dirl: return {rep::cell, rep::back, rep::cc, rep::bb, rep::cb, rep::bc};
  }
  return {};
}

inline bool is_disentangled_term(const std::string& term) {
  return term == rep::cc || term == rep::bb || term == rep::cb || term == rep::bc;
}

inline double term_weight(Variant v, const std::string& term, const LossWeights& w, int cell_classes) {
  switch (v) {
    case Variant::baseline: return 1.0;
    case Variant::cellback: return w.lambda1;
    case Variant::cellback_v2: return 1.0 / static_cast<double>(cell_classes + 2);
    case Variant::dirl: return is_disentangled_term(term) ? w.lambda2 : w.lambda1;
  }
  return 0.0;
}

/// softmax((logits - center) / temp); the center is only used on the teacher side.
inline Tensor sharpen_and_center(const Tensor& logits, double temp, const Tensor* center = nullptr) {
  if (!(temp > 0.0)) throw ConfigError("temperature must be positive");
  Tensor z({1, logits.size()});
  for (std::size_t k = 0; k < logits.size(); ++k) z[k] = (logits[k] - (center ? (*center)[k] : 0.0)) / temp;
  return softmax_rows(z).reshaped({logits.size()});
}

/// -sum_k p_teacher[k] * log softmax(student_logits / temp)[k]
inline double cross_entropy(const Tensor& p_teacher, const Tensor& student_logits, double temp_student) {
  p_teacher.require_same_shape(student_logits, "cross_entropy");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : student_logits.data()) mx = std::max(mx, v / temp_student);
  double z = 0.0;
  for (double v : student_logits.data()) z += std::exp(v / temp_student - mx);
  const double log_z = mx + std::log(z);
  double ce = 0.0;
  for (std::size_t k = 0; k < p_teacher.size(); ++k) {
    if (p_teacher[k] != 0.0) ce -= p_teacher[k] * (student_logits[k] / temp_student - log_z);
  }
  return ce;
}

/// Symmetrised cross-view loss: each view's teacher output teaches the other view's student.
inline double dino_pair_loss(const std::array<Tensor, 2>& student_logits, const std::array<Tensor, 2>& teacher_logits,
                             const Temperatures& temps, const Tensor* center) {
  double total = 0.0;
  for (int v = 0; v < 2; ++v) {
    const Tensor pt = sharpen_and_center(teacher_logits[v], temps.teacher, center);
    total += cross_entropy(pt, student_logits[1 - v], temps.student);
  }
  return 0.5 * total;
}

struct TermReport {
  std::string term;
  double weight = 0.0;
  std::optional<double> loss;  // nullopt when skipped
};

struct CompositeReport {
  double total = 0.0;
  std::vector<TermReport> terms;
  std::size_t skipped = 0;
};

/// Weighted sum of per-term losses. Terms missing from `term_losses` are skipped and the
/// remaining weights are left as they are.
inline CompositeReport combine_terms(Variant v, const LossWeights& w, int cell_classes,
                                     const std::map<std::string, double>& term_losses) {
  CompositeReport r;
  for (const auto& term : variant_terms(v, cell_classes)) {
    TermReport t{term, term_weight(v, term, w, cell_classes), std::nullopt};
    if (auto it = term_losses.find(term); it != term_losses.end()) {
      t.loss = it->second;
      r.total += t.weight * it->second;
    } else {
      ++r.skipped;
    }
    r.terms.push_back(t);
  }
  if (r.skipped == r.terms.size()) throw NoSignalError("every loss term is absent for this sample");
  return r;
}

/// Composite loss of one sample from the representation sets of both views in both branches.
inline CompositeReport composite_loss(const std::array<RepresentationSet, 2>& student,
                                      const std::array<RepresentationSet, 2>& teacher, const HeadBank& student_heads,
                                      const HeadBank& teacher_heads, const std::map<std::string, Tensor>& centers,
                                      const LossWeights& w, const Temperatures& temps, Variant v, int cell_classes) {
  std::map<std::string, double> losses;
  for (const auto& term : variant_terms(v, cell_classes)) {
    if (!student[0].has(term) || !student[1].has(term) || !teacher[0].has(term) || !teacher[1].has(term)) continue;
    const ProjectionHead& sh = student_heads.at(term);
    const ProjectionHead& th = teacher_heads.at(term);
    std::array<Tensor, 2> s{project(sh, student[0].at(term)), project(sh, student[1].at(term))};
    std::array<Tensor, 2> t{project(th, teacher[0].at(term)), project(th, teacher[1].at(term))};
    auto c = centers.find(term);
    losses[term] = dino_pair_loss(s, t, temps, c == centers.end() ? nullptr : &c->second);
  }
  return combine_terms(v, w, cell_classes, losses);
}

/// Per-token linear regressor for the auxiliary cell-count task.
struct AuxHead {
  Tensor w;  // d x 1
  Tensor b;  // 1

  static AuxHead init(std::size_t d, Rng& rng, double std) { return {rng.truncated_normal_tensor({d, 1}, std), Tensor({1})}; }

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "w", self.w);
    f(prefix + "b", self.b);
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

inline Tensor counts_tensor(const std::vector<const CellCountTarget*>& targets) {
  std::size_t total = 0;
  for (const auto* t : targets) total += t->counts.size();
  Tensor out({total, 1});
  std::size_t i = 0;
  for (const auto* t : targets)
    for (int c : t->counts) out[i++] = static_cast<double>(c);
  return out;
}

/// MSE between per-token count predictions and the patch cell counts.
inline double aux_cell_count_loss(const TokenMatrix& t_L, const CellCountTarget& target, const AuxHead& head) {
  if (target.counts.size() != t_L.tokens.rows()) throw DimensionError("cell count target length does not match token count");
  Graph g(false);
  Var pred = ag::linear(g.constant(t_L.tokens), g.param(head.w), g.param(head.b));
  return ag::mse(pred, counts_tensor({&target})).value()[0];
}

/// teacher <- m * teacher + (1 - m) * student for every parameter.
template <class Params>
void ema_update(Params& teacher, const Params& student, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("EMA momentum must lie in [0, 1]");
  std::vector<std::pair<std::string, const Tensor*>> src;
  student.visit("", [&](const std::string& name, const Tensor& t) { src.emplace_back(name, &t); });
  std::size_t i = 0;
  teacher.visit("", [&](const std::string& name, Tensor& t) {
    if (i >= src.size() || src[i].first != name || src[i].second->shape() != t.shape()) {
      throw CheckpointError("EMA update: teacher parameter '" + name + "' has no matching student parameter");
    }
    const Tensor& s = *src[i].second;
    if (m == 1.0) {
      // unchanged
    } else if (m == 0.0) {
      t = s;
    } else {
      for (std::size_t k = 0; k < t.size(); ++k) t[k] = m * t[k] + (1.0 - m) * s[k];
    }
    ++i;
  });
  if (i != src.size()) throw CheckpointError("EMA update: student has parameters the teacher lacks");
}

/// center <- c_m * center + (1 - c_m) * mean over rows of `batch_logits`.
inline Tensor center_update(const Tensor& center, const Tensor& batch_logits, double c_m) {
  if (batch_logits.rank() != 2 || batch_logits.cols() != center.size()) {
    throw DimensionError("center_update: logits " + shape_str(batch_logits.shape()) + " vs center " + shape_str(center.shape()));
  }
  Tensor mean(center.shape());
  for (std::size_t i = 0; i < batch_logits.rows(); ++i)
    for (std::size_t k = 0; k < batch_logits.cols(); ++k) mean[k] += batch_logits(i, k);
  const double inv = 1.0 / static_cast<double>(batch_logits.rows());
  Tensor out(center.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = c_m * center[k] + (1.0 - c_m) * (mean[k] * inv);
  return out;
}

}  // namespace dirl
