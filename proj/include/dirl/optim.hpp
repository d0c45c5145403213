#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dirl/tensor.hpp"

namespace dirl {

struct AdamWSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay. Moment buffers follow the parameter visit order.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWSettings s) : settings_(s) {}

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, const std::vector<bool>& decay,
            double lr, double weight_decay) {
    if (m_.empty()) {
      for (const Tensor* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    }
    if (m_.size() != params.size() || grads.size() != params.size() || decay.size() != params.size()) {
      throw DimensionError("AdamW: parameter count changed between steps");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = grads[i];
      p.require_same_shape(g, "AdamW gradient");
      const double wd = decay[i] ? weight_decay : 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        m_[i][k] = settings_.beta1 * m_[i][k] + (1.0 - settings_.beta1) * g[k];
        v_[i][k] = settings_.beta2 * v_[i][k] + (1.0 - settings_.beta2) * g[k] * g[k];
        const double mhat = m_[i][k] / bc1;
        const double vhat = v_[i][k] / bc2;
        p[k] -= lr * (mhat / (std::sqrt(vhat) + settings_.eps) + wd * p[k]);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void restore(std::vector<Tensor> m, std::vector<Tensor> v, std::uint64_t t) {
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

 private:
  AdamWSettings settings_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t t_ = 0;
};

/// Scales a gradient tensor down so its L2 norm is at most max_norm.
inline void clip_grad_norm(Tensor& g, double max_norm) {
  if (!(max_norm > 0.0)) return;
  double s = 0.0;
  for (double v : g.data()) s += v * v;
  const double norm = std::sqrt(s);
  if (norm > max_norm) g *= max_norm / (norm + 1e-6);
}

/// Linear warmup from 0 to `peak`, then cosine decay to `floor`.
inline double warmup_cosine(std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps, double peak,
                            double floor) {
  if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return floor;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps));
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(M_PI * progress));
}

/// Cosine ramp from `start` to `end` over total_steps.
inline double cosine_ramp(std::uint64_t step, std::uint64_t total_steps, double start, double end) {
  const double progress = total_steps == 0 ? 1.0 : std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return end - (end - start) * (std::cos(M_PI * progress) + 1.0) / 2.0;
}

}  // namespace dirl
