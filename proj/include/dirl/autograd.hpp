#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dirl/tensor.hpp"

namespace dirl {

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
};

/// Reverse-mode tape. Nodes are appended in topological order; backward() walks them in
/// reverse. A tape is single-threaded and lives for one forward/backward pass.
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value) { return push(std::move(value), false, {}); }

  /// Leaf bound to a parameter tensor. The same tensor always maps to the same leaf, so a
  /// parameter used twice accumulates both contributions.
  Var param(const Tensor& p) {
    if (auto it = params_.find(&p); it != params_.end()) return {this, it->second};
    Var v = push(p, grad_enabled_, {});
    params_.emplace(&p, v.id);
    return v;
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Creates an op node. `backward` is dropped when no parent requires a gradient.
  Var make(Tensor value, std::initializer_list<Var> parents, Backward backward) {
    bool needs = false;
    if (grad_enabled_) {
      for (const Var& p : parents) needs = needs || nodes_[p.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  /// Gradient buffer flowing into node `id` (valid during backward).
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }

  /// Accumulation buffer for a parent; nullptr if the parent needs no gradient.
  Tensor* accum(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  void backward(Var root) {
    Node& r = nodes_[root.id];
    if (r.value.size() != 1) {
      throw DimensionError("backward requires a scalar root, got " + shape_str(r.value.shape()));
    }
    if (!r.requires_grad) return;
    r.grad = Tensor(r.value.shape(), 1.0);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  /// Gradient of the last backward() with respect to a bound parameter; zeros when the
  /// parameter was not reached.
  Tensor grad_of(const Tensor& p) const {
    auto it = params_.find(&p);
    if (it == params_.end() || nodes_[it->second].grad.empty()) return Tensor(p.shape());
    return nodes_[it->second].grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Tensor value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(backward)});
    return {this, nodes_.size() - 1};
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> params_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace ag {

inline Var matmul(Var a, Var b) {
  Graph& g = *a.graph;
  return g.make(dirl::matmul(a.value(), b.value()), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    if (Tensor* da = g.accum(a.id)) *da += matmul_nt(dy, g.value(b));
    if (Tensor* db = g.accum(b.id)) *db += matmul_tn(g.value(a), dy);
  });
}

inline Var transpose(Var a) {
  Graph& g = *a.graph;
  return g.make(dirl::transpose(a.value()), {a}, [a](Graph& g, std::size_t self) {
    if (Tensor* da = g.accum(a.id)) *da += dirl::transpose(g.grad(self));
  });
}

inline Var add(Var a, Var b) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  out += b.value();
  return g.make(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    if (Tensor* da = g.accum(a.id)) *da += dy;
    if (Tensor* db = g.accum(b.id)) *db += dy;
  });
}

inline Var scale(Var a, double s) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  out *= s;
  return g.make(std::move(out), {a}, [a, s](Graph& g, std::size_t self) {
    if (Tensor* da = g.accum(a.id)) {
      const Tensor& dy = g.grad(self);
      for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += s * dy[i];
    }
  });
}

/// Adds `bias` (length d) to every row of `x` (m x d).
inline Var add_bias(Var x, Var bias) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || bv.size() != xv.cols()) {
    throw DimensionError("add_bias: shapes " + shape_str(xv.shape()) + " and " + shape_str(bv.shape()));
  }
  Tensor out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv[j];
  return g.make(std::move(out), {x, bias}, [x, bias](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    if (Tensor* dx = g.accum(x.id)) *dx += dy;
    if (Tensor* db = g.accum(bias.id)) {
      for (std::size_t i = 0; i < dy.rows(); ++i)
        for (std::size_t j = 0; j < dy.cols(); ++j) (*db)[j] += dy(i, j);
    }
  });
}

/// Adds the n x d block `pos` to each consecutive n-row block of `x`.
inline Var add_tiled(Var x, Var pos) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  const Tensor& pv = pos.value();
  if (xv.rank() != 2 || pv.rank() != 2 || xv.cols() != pv.cols() || xv.rows() % pv.rows() != 0) {
    throw DimensionError("add_tiled: shapes " + shape_str(xv.shape()) + " and " + shape_str(pv.shape()));
  }
  const std::size_t n = pv.rows();
  Tensor out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += pv(i % n, j);
  return g.make(std::move(out), {x, pos}, [x, pos, n](Graph& g, std::size_t self) {
    const Tensor& dy = g.grad(self);
    if (Tensor* dx = g.accum(x.id)) *dx += dy;
    if (Tensor* dp = g.accum(pos.id)) {
      for (std::size_t i = 0; i < dy.rows(); ++i)
        for (std::size_t j = 0; j < dy.cols(); ++j) (*dp)(i % n, j) += dy(i, j);
    }
  });
}

inline Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

inline Var gelu(Var x) {
  Graph& g = *x.graph;
  Tensor out = x.value();
  for (double& v : out.storage()) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return g.make(std::move(out), {x}, [x](Graph& g, std::size_t self) {
    Tensor* dx = g.accum(x.id);
    if (!dx) return;
    const Tensor& dy = g.grad(self);
    const Tensor& xv = g.value(x);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * M_PI);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      (*dx)[i] += dy[i] * (cdf + v * pdf);
    }
  });
}

inline Var tanh(Var x) {
  Graph& g = *x.graph;
  Tensor out = x.value();
  for (double& v : out.storage()) v = std::tanh(v);
  return g.make(std::move(out), {x}, [x](Graph& g, std::size_t self) {
    Tensor* dx = g.accum(x.id);
    if (!dx) return;
    const Tensor& dy = g.grad(self);
    const Tensor& y = g.value(self);
    for (std::size_t i = 0; i < y.size(); ++i) (*dx)[i] += dy[i] * (1.0 - y[i] * y[i]);
  });
}

inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || gain.value().size() != xv.cols() || bias.value().size() != xv.cols()) {
    throw DimensionError("layer_norm: shapes " + shape_str(xv.shape()) + ", gain " +
                         shape_str(gain.value().shape()) + ", bias " + shape_str(bias.value().shape()));
  }
  const std::size_t m = xv.rows();
  const std::size_t d = xv.cols();
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xv(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) xhat(i, j) = (xv(i, j) - mean) * inv_std[i];
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = xhat(i, j) * gv[j] + bv[j];
  return g.make(std::move(out), {x, gain, bias},
                [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
                  const Tensor& dy = g.grad(self);
                  const std::size_t m = dy.rows();
                  const std::size_t d = dy.cols();
                  if (Tensor* dg = g.accum(gain.id)) {
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < d; ++j) (*dg)[j] += dy(i, j) * xhat(i, j);
                  }
                  if (Tensor* db = g.accum(bias.id)) {
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < d; ++j) (*db)[j] += dy(i, j);
                  }
                  if (Tensor* dx = g.accum(x.id)) {
                    const Tensor& gv = g.value(gain);
                    std::vector<double> dxhat(d);
                    for (std::size_t i = 0; i < m; ++i) {
                      double mean_dxhat = 0.0;
                      double mean_dxhat_xhat = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        dxhat[j] = dy(i, j) * gv[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat(i, j);
                      }
                      mean_dxhat /= static_cast<double>(d);
                      mean_dxhat_xhat /= static_cast<double>(d);
                      for (std::size_t j = 0; j < d; ++j) {
                        (*dx)(i, j) += inv_std[i] * (dxhat[j] - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
                      }
                    }
                  }
                });
}

namespace detail {

// dS = P * (dP - rowsum(dP * P)), row-wise.
inline void softmax_backward_rows(const double* p, const double* dp, double* ds, std::size_t rows,
                                  std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < cols; ++j) dot += p[i * cols + j] * dp[i * cols + j];
    for (std::size_t j = 0; j < cols; ++j) ds[i * cols + j] = p[i * cols + j] * (dp[i * cols + j] - dot);
  }
}

}  // namespace detail

inline Var softmax_rows(Var x, const Tensor* additive_mask = nullptr) {
  Graph& g = *x.graph;
  return g.make(dirl::softmax_rows(x.value(), additive_mask), {x}, [x](Graph& g, std::size_t self) {
    Tensor* dx = g.accum(x.id);
    if (!dx) return;
    const Tensor& p = g.value(self);
    Tensor ds(p.shape());
    detail::softmax_backward_rows(p.ptr(), g.grad(self).ptr(), ds.ptr(), p.rows(), p.cols());
    *dx += ds;
  });
}

/// Batched multi-head attention over `batch` consecutive blocks of `tokens` rows.
struct AttentionSpec {
  std::size_t batch = 1;
  std::size_t tokens = 1;
  std::size_t heads = 1;
  double scale = 1.0;
  // Either empty or one n x n additive mask per batch element.
  std::span<const Tensor> masks{};
  // When set, receives post-softmax probabilities indexed [batch][head].
  std::vector<std::vector<Tensor>>* record = nullptr;
};

inline Var attention(Var q, Var k, Var v, const AttentionSpec& spec) {
  Graph& g = *q.graph;
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t B = spec.batch;
  const std::size_t n = spec.tokens;
  const std::size_t H = spec.heads;
  if (qv.rank() != 2 || qv.rows() != B * n || qv.shape() != kv.shape() || qv.shape() != vv.shape() ||
      qv.cols() % H != 0) {
    throw DimensionError("attention: q " + shape_str(qv.shape()) + ", k " + shape_str(kv.shape()) +
                         ", v " + shape_str(vv.shape()) + " for batch " + std::to_string(B) + " x tokens " +
                         std::to_string(n) + ", heads " + std::to_string(H));
  }
  if (!spec.masks.empty() && spec.masks.size() != B) {
    throw DimensionError("attention: expected " + std::to_string(B) + " masks, got " +
                         std::to_string(spec.masks.size()));
  }
  const std::size_t d = qv.cols();
  const std::size_t dh = d / H;
  // probs[(b * H + h) * n * n + i * n + j]
  std::vector<double> probs(B * H * n * n);
  Tensor out({B * n, d});
  Tensor logits({n, n});
  if (spec.record) spec.record->assign(B, std::vector<Tensor>(H));
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor* mask = spec.masks.empty() ? nullptr : &spec.masks[b];
    if (mask && (mask->rank() != 2 || mask->rows() != n || mask->cols() != n)) {
      throw DimensionError("attention: mask shape " + shape_str(mask->shape()) + " for " + std::to_string(n) + " tokens");
    }
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = qv.ptr() + (b * n + i) * d + c0;
        for (std::size_t j = 0; j < n; ++j) {
          const double* kj = kv.ptr() + (b * n + j) * d + c0;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          logits(i, j) = s * spec.scale;
        }
      }
      Tensor p = dirl::softmax_rows(logits, mask);
      std::copy(p.storage().begin(), p.storage().end(), probs.begin() + (b * H + h) * n * n);
      for (std::size_t i = 0; i < n; ++i) {
        double* oi = out.ptr() + (b * n + i) * d + c0;
        for (std::size_t j = 0; j < n; ++j) {
          const double pij = p(i, j);
          if (pij == 0.0) continue;
          const double* vj = vv.ptr() + (b * n + j) * d + c0;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
      if (spec.record) (*spec.record)[b][h] = std::move(p);
    }
  }
  return g.make(std::move(out), {q, k, v},
                [q, k, v, B, n, H, dh, d, scale = spec.scale, probs = std::move(probs)](Graph& g, std::size_t self) {
                  const Tensor& dy = g.grad(self);
                  const Tensor& qv = g.value(q);
                  const Tensor& kv = g.value(k);
                  const Tensor& vv = g.value(v);
                  Tensor* dq = g.accum(q.id);
                  Tensor* dk = g.accum(k.id);
                  Tensor* dv = g.accum(v.id);
                  std::vector<double> dp(n * n);
                  std::vector<double> ds(n * n);
                  for (std::size_t b = 0; b < B; ++b) {
                    for (std::size_t h = 0; h < H; ++h) {
                      const double* p = probs.data() + (b * H + h) * n * n;
                      const std::size_t c0 = h * dh;
                      for (std::size_t i = 0; i < n; ++i) {
                        const double* dyi = dy.ptr() + (b * n + i) * d + c0;
                        for (std::size_t j = 0; j < n; ++j) {
                          const double* vj = vv.ptr() + (b * n + j) * d + c0;
                          double s = 0.0;
                          for (std::size_t c = 0; c < dh; ++c) s += dyi[c] * vj[c];
                          dp[i * n + j] = s;
                          if (dv && p[i * n + j] != 0.0) {
                            double* dvj = dv->ptr() + (b * n + j) * d + c0;
                            for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[i * n + j] * dyi[c];
                          }
                        }
                      }
                      if (!dq && !dk) continue;
                      detail::softmax_backward_rows(p, dp.data(), ds.data(), n, n);
                      for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                          const double sij = ds[i * n + j] * scale;
                          if (sij == 0.0) continue;
                          if (dq) {
                            double* dqi = dq->ptr() + (b * n + i) * d + c0;
                            const double* kj = kv.ptr() + (b * n + j) * d + c0;
                            for (std::size_t c = 0; c < dh; ++c) dqi[c] += sij * kj[c];
                          }
                          if (dk) {
                            double* dkj = dk->ptr() + (b * n + j) * d + c0;
                            const double* qi = qv.ptr() + (b * n + i) * d + c0;
                            for (std::size_t c = 0; c < dh; ++c) dkj[c] += sij * qi[c];
                          }
                        }
                      }
                    }
                  }
                });
}

/// Rows scaled to unit L2 norm (norm floored at eps).
inline Var l2_normalize_rows(Var x, double eps = 1e-12) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  std::vector<double> norms(xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    double s = 0.0;
    for (double v : xv.row(i)) s += v * v;
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < xv.cols(); ++j) out(i, j) = xv(i, j) / norms[i];
  }
  return g.make(std::move(out), {x}, [x, eps, norms = std::move(norms)](Graph& g, std::size_t self) {
    Tensor* dx = g.accum(x.id);
    if (!dx) return;
    const Tensor& y = g.value(self);
    const Tensor& dy = g.grad(self);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      if (norms[i] <= eps) {
        for (std::size_t j = 0; j < y.cols(); ++j) (*dx)(i, j) += dy(i, j) / eps;
        continue;
      }
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += dy(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) (*dx)(i, j) += (dy(i, j) - y(i, j) * dot) / norms[i];
    }
  });
}

/// Columns scaled to unit L2 norm (weight normalisation with unit gain).
inline Var normalize_columns(Var w) { return transpose(l2_normalize_rows(transpose(w))); }

inline Var select_rows(Var x, std::vector<std::size_t> indices) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  Tensor out({indices.size(), xv.cols()});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= xv.rows()) throw IndexError("select_rows: row " + std::to_string(indices[r]) + " out of range");
    for (std::size_t j = 0; j < xv.cols(); ++j) out(r, j) = xv(indices[r], j);
  }
  return g.make(std::move(out), {x}, [x, indices = std::move(indices)](Graph& g, std::size_t self) {
    Tensor* dx = g.accum(x.id);
    if (!dx) return;
    const Tensor& dy = g.grad(self);
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (std::size_t j = 0; j < dy.cols(); ++j) (*dx)(indices[r], j) += dy(r, j);
  });
}

inline Var sum(Var x) {
  Graph& g = *x.graph;
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return g.make(Tensor::scalar(s), {x}, [x](Graph& g, std::size_t self) {
    Tensor* dx = g.accum(x.id);
    if (!dx) return;
    const double dy = g.grad(self)[0];
    for (double& v : dx->storage()) v += dy;
  });
}

/// sum_b w_b * CE(targets_b, softmax(logits_b / temp)); targets are constants.
inline Var soft_cross_entropy(Var logits, Tensor targets, double temp, std::vector<double> row_weights) {
  Graph& g = *logits.graph;
  const Tensor& lv = logits.value();
  lv.require_same_shape(targets, "soft_cross_entropy");
  if (row_weights.size() != lv.rows()) throw DimensionError("soft_cross_entropy: row weight count mismatch");
  const std::size_t B = lv.rows();
  const std::size_t K = lv.cols();
  Tensor probs(lv.shape());
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, lv(b, k) / temp);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(lv(b, k) / temp - mx);
    const double log_z = mx + std::log(z);
    double ce = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double log_p = lv(b, k) / temp - log_z;
      probs(b, k) = std::exp(log_p);
      if (targets(b, k) != 0.0) ce -= targets(b, k) * log_p;
    }
    if (row_weights[b] != 0.0) total += row_weights[b] * ce;
  }
  return g.make(Tensor::scalar(total), {logits},
                [logits, temp, targets = std::move(targets), probs = std::move(probs),
                 row_weights = std::move(row_weights)](Graph& g, std::size_t self) {
                  Tensor* dl = g.accum(logits.id);
                  if (!dl) return;
                  const double dy = g.grad(self)[0];
                  for (std::size_t b = 0; b < probs.rows(); ++b) {
                    if (row_weights[b] == 0.0) continue;
                    double tsum = 0.0;
                    for (std::size_t k = 0; k < probs.cols(); ++k) tsum += targets(b, k);
                    const double w = dy * row_weights[b] / temp;
                    for (std::size_t k = 0; k < probs.cols(); ++k)
                      (*dl)(b, k) += w * (probs(b, k) * tsum - targets(b, k));
                  }
                });
}

/// Mean squared error against a constant target.
inline Var mse(Var pred, Tensor target) {
  Graph& g = *pred.graph;
  const Tensor& pv = pred.value();
  if (pv.size() != target.size()) {
    throw DimensionError("mse: shapes " + shape_str(pv.shape()) + " and " + shape_str(target.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += (pv[i] - target[i]) * (pv[i] - target[i]);
  const double count = static_cast<double>(pv.size());
  return g.make(Tensor::scalar(s / count), {pred}, [pred, count, target = std::move(target)](Graph& g, std::size_t self) {
    Tensor* dp = g.accum(pred.id);
    if (!dp) return;
    const double dy = g.grad(self)[0];
    const Tensor& pv = g.value(pred);
    for (std::size_t i = 0; i < pv.size(); ++i) (*dp)[i] += dy * 2.0 * (pv[i] - target[i]) / count;
  });
}

/// sum_i weights[i] * terms[i] over scalar nodes.
inline Var weighted_sum(Graph& g, const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size()) throw DimensionError("weighted_sum: term/weight count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) total += weights[i] * terms[i].value()[0];
  Graph::Backward back = [terms, weights](Graph& g, std::size_t self) {
    const double dy = g.grad(self)[0];
    for (std::size_t i = 0; i < terms.size(); ++i) {
      if (Tensor* dt = g.accum(terms[i].id)) (*dt)[0] += dy * weights[i];
    }
  };
  // Parents are only needed for the requires_grad decision.
  bool needs = false;
  for (const Var& t : terms) needs = needs || g.requires_grad(t);
  if (!needs) return g.constant(Tensor::scalar(total));
  Var anchor = terms.front();
  for (const Var& t : terms) {
    if (g.requires_grad(t)) {
      anchor = t;
      break;
    }
  }
  return g.make(Tensor::scalar(total), {anchor}, std::move(back));
}

}  // namespace ag
}  // namespace dirl
