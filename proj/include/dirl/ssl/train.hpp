#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dirl/optim.hpp"
#include "dirl/ssl/model.hpp"
#include "dirl/ssl/views.hpp"

namespace dirl {

struct StepMetrics {
  double loss = 0.0;
  double aux_loss = 0.0;
  std::map<std::string, double> term_loss;         // mean over samples where the term is present
  std::map<std::string, std::size_t> term_skipped;  // samples where the term was absent
  std::size_t samples = 0;
  std::size_t no_signal = 0;
  bool update_skipped = false;
  double lr = 0.0;
  double momentum = 0.0;
};

struct StudentLoss {
  std::optional<Var> total;
  StepMetrics metrics;
};

namespace detail {

inline double row_cross_entropy(const Tensor& logits, std::size_t row, const Tensor& target, double temp) {
  const std::size_t K = logits.cols();
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, logits(row, k) / temp);
  double z = 0.0;
  for (std::size_t k = 0; k < K; ++k) z += std::exp(logits(row, k) / temp - mx);
  const double log_z = mx + std::log(z);
  double ce = 0.0;
  for (std::size_t k = 0; k < K; ++k)
    if (target[k] != 0.0) ce -= target[k] * (logits(row, k) / temp - log_z);
  return ce;
}

inline Tensor row_of(const Tensor& m, std::size_t r) {
  Tensor out({m.cols()});
  for (std::size_t k = 0; k < m.cols(); ++k) out[k] = m(r, k);
  return out;
}

}  // namespace detail

/// Student side of the batch loss given the teacher's logits (constants). `in` holds the two
/// views of B samples stacked as [view 0 of all samples; view 1 of all samples]. Each sample's
/// composite loss is averaged over the samples that carry at least one term.
inline StudentLoss build_student_loss(Graph& g, const DirlModel& student, const BranchInput& in,
                                      const std::map<std::string, Tensor>& teacher_logits,
                                      const std::map<std::string, Tensor>& centers, const Config& cfg) {
  if (in.batch % 2 != 0) throw DimensionError("stacked batch must hold two views per sample");
  const std::size_t B = in.batch / 2;
  const Variant variant = cfg.ssl.variant;
  const int J = cfg.ssl.cell_classes;
  const LossWeights w = LossWeights::from(cfg.ssl);
  const Temperatures temps{cfg.ssl.temp_student, cfg.ssl.temp_teacher};

  BranchOutput out = graph_branch(g, student, cfg.encoder, in, variant, J);
  StudentLoss result;
  StepMetrics& m = result.metrics;
  m.samples = B;

  const auto terms = variant_terms(variant, J);
  std::map<std::string, std::vector<std::uint8_t>> valid;
  std::vector<std::uint8_t> sample_valid(B, 0);
  for (const auto& term : terms) {
    const auto& present = out.terms.at(term).present;
    auto& v = valid[term];
    v.assign(B, 0);
    for (std::size_t b = 0; b < B; ++b) {
      v[b] = present[b] && present[b + B];
      sample_valid[b] = sample_valid[b] || v[b];
    }
  }
  std::size_t b_valid = 0;
  for (auto s : sample_valid) b_valid += s;
  m.no_signal = B - b_valid;

  std::vector<Var> parts;
  std::vector<double> part_weights;
  std::vector<double> sample_loss(B, 0.0);
  for (const auto& term : terms) {
    const TermOutput& t = out.terms.at(term);
    const Tensor& s_logits = t.logits.value();
    const Tensor& t_logits = teacher_logits.at(term);
    if (t_logits.shape() != s_logits.shape()) throw DimensionError("teacher logits for '" + term + "' have the wrong shape");
    const auto& v = valid.at(term);
    std::size_t count = 0;
    for (auto x : v) count += x;
    m.term_skipped[term] = B - count;
    if (count == 0) continue;
    const double weight = term_weight(variant, term, w, J);
    auto c = centers.find(term);
    const Tensor* center = c == centers.end() ? nullptr : &c->second;
    Tensor targets(s_logits.shape());
    std::vector<double> row_w(in.batch, 0.0);
    double term_sum = 0.0;
    for (std::size_t r = 0; r < in.batch; ++r) {
      const std::size_t b = r % B;
      if (!v[b]) continue;
      // view 0 students learn from view 1 teachers and vice versa
      const Tensor p = sharpen_and_center(detail::row_of(t_logits, (r + B) % in.batch), temps.teacher, center);
      std::copy(p.data().begin(), p.data().end(), targets.storage().begin() + static_cast<std::ptrdiff_t>(r * targets.cols()));
      row_w[r] = weight * 0.5 / static_cast<double>(b_valid);
      const double ce = 0.5 * detail::row_cross_entropy(s_logits, r, p, temps.student);
      term_sum += ce;
      sample_loss[b] += weight * ce;
    }
    m.term_loss[term] = term_sum / static_cast<double>(count);
    parts.push_back(ag::soft_cross_entropy(t.logits, std::move(targets), temps.student, std::move(row_w)));
    part_weights.push_back(1.0);
  }

  if (student.aux) {
    std::vector<const CellCountTarget*> targets;
    for (const auto& c : in.counts) targets.push_back(&c);
    Var pred = ag::linear(out.t_L, g.param(student.aux->w), g.param(student.aux->b));
    Var aux = ag::mse(pred, counts_tensor(targets));
    m.aux_loss = aux.value()[0];
    parts.push_back(aux);
    part_weights.push_back(cfg.ssl.aux_weight);
  }

  if (parts.empty()) return result;
  result.total = ag::weighted_sum(g, parts, part_weights);
  m.loss = result.total->value()[0];
  if (!std::isfinite(m.loss)) {
    std::string idx;
    for (std::size_t b = 0; b < B; ++b) {
      if (!std::isfinite(sample_loss[b])) idx += (idx.empty() ? "" : ",") + std::to_string(b);
    }
    if (idx.empty()) idx = "aux";
    throw NonFiniteLossError("non-finite training loss (samples: " + idx + ")");
  }
  return result;
}

/// Teacher logits (no gradient) for every term.
inline std::map<std::string, Tensor> teacher_forward(const DirlModel& teacher, const BranchInput& in, const Config& cfg,
                                                     std::map<std::string, std::vector<std::uint8_t>>* present = nullptr) {
  Graph g(false);
  BranchOutput out = graph_branch(g, teacher, cfg.encoder, in, cfg.ssl.variant, cfg.ssl.cell_classes);
  std::map<std::string, Tensor> logits;
  for (auto& [name, t] : out.terms) {
    logits.emplace(name, t.logits.value());
    if (present) (*present)[name] = t.present;
  }
  return logits;
}

struct TrainState {
  Config cfg;
  DirlModel student;
  DirlModel teacher;
  std::map<std::string, Tensor> centers;
  AdamW optimizer;
  std::uint64_t step = 0;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 0;

  double peak_lr() const {
    return cfg.optim.base_lr * static_cast<double>(cfg.optim.batch_size) / 256.0;
  }
  double lr_at(std::uint64_t s) const { return warmup_cosine(s, warmup_steps, total_steps, peak_lr(), cfg.optim.min_lr); }
  double momentum_at(std::uint64_t s) const { return cosine_ramp(s, total_steps, cfg.ssl.ema_start, cfg.ssl.ema_end); }
};

inline TrainState init_train_state(const Config& cfg, std::uint64_t seed, std::size_t steps_per_epoch) {
  TrainState st;
  st.cfg = cfg;
  Rng rng(derive_seed(seed, {0x1d}));
  st.student = init_model(cfg, rng);
  st.teacher = st.student;
  for (const auto& [name, head] : st.student.heads) st.centers.emplace(name, Tensor({head.out_dim()}));
  st.optimizer = AdamW(AdamWSettings{cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps});
  st.warmup_steps = static_cast<std::uint64_t>(cfg.optim.warmup_epochs) * steps_per_epoch;
  st.total_steps = static_cast<std::uint64_t>(cfg.optim.epochs) * steps_per_epoch;
  return st;
}

/// Student parameters in visit order, with the decay flag (matrices only).
inline void student_parameters(DirlModel& model, std::vector<Tensor*>& params, std::vector<bool>& decay) {
  params.clear();
  decay.clear();
  model.visit("", [&](const std::string&, Tensor& t) {
    params.push_back(&t);
    decay.push_back(t.rank() >= 2);
  });
}

/// One optimisation step: teacher targets, student loss and gradient step, EMA update of the
/// teacher, then the center update.
inline StepMetrics train_step(TrainState& st, std::span<const ViewPair> batch) {
  if (batch.empty()) throw DataError("train_step on an empty batch");
  const Config& cfg = st.cfg;
  const BranchInput in = stack_views(batch, cfg.encoder);
  std::map<std::string, std::vector<std::uint8_t>> present;
  const auto t_logits = teacher_forward(st.teacher, in, cfg, &present);

  Graph g;
  StudentLoss sl = build_student_loss(g, st.student, in, t_logits, st.centers, cfg);
  StepMetrics m = sl.metrics;
  m.lr = st.lr_at(st.step);
  m.momentum = st.momentum_at(st.step);

  if (!sl.total) {
    m.update_skipped = true;
  } else {
    g.backward(*sl.total);
    std::vector<Tensor*> params;
    std::vector<bool> decay;
    student_parameters(st.student, params, decay);
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (Tensor* p : params) {
      grads.push_back(g.grad_of(*p));
      clip_grad_norm(grads.back(), cfg.optim.clip_grad);
    }
    st.optimizer.step(params, grads, decay, m.lr, cfg.optim.weight_decay);
    ema_update(st.teacher, st.student, m.momentum);
  }

  for (auto& [name, center] : st.centers) {
    const Tensor& lg = t_logits.at(name);
    const auto& pr = present.at(name);
    std::size_t rows = 0;
    for (auto p : pr) rows += p;
    if (rows == 0) continue;
    Tensor sel({rows, lg.cols()});
    std::size_t r = 0;
    for (std::size_t i = 0; i < lg.rows(); ++i) {
      if (!pr[i]) continue;
      for (std::size_t k = 0; k < lg.cols(); ++k) sel(r, k) = lg(i, k);
      ++r;
    }
    center = center_update(center, sel, cfg.ssl.center_momentum);
  }
  ++st.step;
  return m;
}

}  // namespace dirl
