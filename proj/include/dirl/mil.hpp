#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "dirl/autograd.hpp"
#include "dirl/checkpoint.hpp"
#include "dirl/config.hpp"
#include "dirl/dataset.hpp"
#include "dirl/optim.hpp"
#include "dirl/parallel.hpp"
#include "dirl/random.hpp"

namespace dirl {

struct Bag {
  std::string bag_id;
  int label = 0;
  Tensor features;  // N x d
};

struct FeatureArchive {
  std::size_t dim = 0;
  std::vector<Bag> bags;
};

inline constexpr char kFeatureMagic[8] = {'D', 'I', 'R', 'L', 'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;

inline void write_feature_archive(const std::filesystem::path& path, const FeatureArchive& ar) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write feature archive " + path.string());
  out.write(kFeatureMagic, 8);
  bin::put_u32(out, kFeatureVersion);
  bin::put_u64(out, ar.dim);
  for (const auto& b : ar.bags) {
    if (b.features.rank() != 2 || b.features.cols() != ar.dim) throw DimensionError("bag '" + b.bag_id + "' has the wrong feature width");
    bin::put_string(out, b.bag_id);
    bin::put_i64(out, b.label);
    bin::put_u64(out, b.features.rows());
    for (double v : b.features.data()) bin::put_f64(out, v);
  }
  if (!out) throw IoError("write failed for " + path.string());
}

inline FeatureArchive read_feature_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature archive " + path.string());
  bin::Reader r(in, path.string());
  char magic[8];
  r.read(magic, 8);
  if (std::memcmp(magic, kFeatureMagic, 8) != 0) throw CheckpointError(path.string() + " is not a feature archive");
  const std::uint32_t version = r.u32();
  if (version != kFeatureVersion) throw CheckpointError(path.string() + ": unsupported archive version " + std::to_string(version));
  FeatureArchive ar;
  ar.dim = r.u64();
  if (ar.dim == 0 || ar.dim > (1u << 20)) throw CheckpointError(path.string() + ": implausible feature width");
  while (!r.at_end()) {
    Bag b;
    b.bag_id = r.string();
    b.label = static_cast<int>(r.i64());
    const std::uint64_t n = r.u64();
    if (n == 0 || n > (1u << 24)) throw CheckpointError(path.string() + ": bag '" + b.bag_id + "' has invalid size");
    std::vector<double> data(n * ar.dim);
    for (double& v : data) v = r.f64();
    b.features = Tensor({n, ar.dim}, std::move(data));
    ar.bags.push_back(std::move(b));
  }
  return ar;
}

/// Mean-pooled final-layer tokens of every crop, grouped into bags in manifest order.
inline FeatureArchive extract_features(const EncoderParams& encoder, const EncoderConfig& cfg, const Dataset& ds) {
  std::vector<Tensor> feats(ds.crops.size());
  parallel_for(ds.crops.size(), [&](std::size_t i) {
    const Tensor& img = ds.crops[i].image;
    if (image_height(img) != static_cast<std::size_t>(cfg.image_size) || image_width(img) != static_cast<std::size_t>(cfg.image_size)) {
      throw CheckpointError("crop " + crop_path(ds.root, ds.crops[i].bag_id, ds.crops[i].index).string() + " is " +
                            shape_str(img.shape()) + " but the extractor expects " + std::to_string(cfg.image_size) + " pixels");
    }
    feats[i] = mean_pool(encode(img, encoder, cfg).tokens);
  });
  FeatureArchive ar;
  ar.dim = static_cast<std::size_t>(cfg.dim);
  for (const auto& bag : ds.bags) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < ds.crops.size(); ++i)
      if (ds.crops[i].bag_id == bag.bag_id) rows.push_back(i);
    if (rows.empty()) throw DataError("bag '" + bag.bag_id + "' has no crops");
    Tensor f({rows.size(), ar.dim});
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < ar.dim; ++j) f(r, j) = feats[rows[r]][j];
    ar.bags.push_back({bag.bag_id, bag.label, std::move(f)});
  }
  return ar;
}

/// Dual-stream MIL: instance classifier with a critical instance, plus attention pooling
/// keyed on the critical instance's query.
struct MilParams {
  Tensor inst_w, inst_b;  // d x C, C
  Tensor q_w, q_b;        // d x q, q
  Tensor v_w, v_b;        // d x d, d
  Tensor bag_w, bag_b;    // d x C, C

  static MilParams init(std::size_t d, std::size_t classes, std::size_t query_dim, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    auto u = [&](Shape shape) {
      Tensor t(std::move(shape));
      for (double& v : t.storage()) v = rng.uniform(-s, s);
      return t;
    };
    return {u({d, classes}), Tensor({classes}), u({d, query_dim}), Tensor({query_dim}),
            u({d, d}),       Tensor({d}),       u({d, classes}),   Tensor({classes})};
  }

  template <class Self, class F>
  static void visit_impl(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "inst.w", self.inst_w);
    f(prefix + "inst.b", self.inst_b);
    f(prefix + "query.w", self.q_w);
    f(prefix + "query.b", self.q_b);
    f(prefix + "value.w", self.v_w);
    f(prefix + "value.b", self.v_b);
    f(prefix + "bag.w", self.bag_w);
    f(prefix + "bag.b", self.bag_b);
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

struct MilGraphOutput {
  Var bag_logits;       // 1 x C
  Var instance_logits;  // N x C
  Var attention;        // 1 x N
  std::size_t critical = 0;
};

/// Index of the instance with the highest class score; ties go to the lowest index.
inline std::size_t critical_instance(const Tensor& instance_logits) {
  std::size_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < instance_logits.rows(); ++i) {
    for (std::size_t c = 0; c < instance_logits.cols(); ++c) {
      if (instance_logits(i, c) > best_v) {
        best_v = instance_logits(i, c);
        best = i;
      }
    }
  }
  return best;
}

inline MilGraphOutput graph_mil(Var h, const MilParams& p) {
  Graph& g = *h.graph;
  if (h.value().rows() == 0) throw DataError("bag has no instances");
  MilGraphOutput out;
  out.instance_logits = ag::linear(h, g.param(p.inst_w), g.param(p.inst_b));
  out.critical = critical_instance(out.instance_logits.value());
  Var q = ag::tanh(ag::linear(h, g.param(p.q_w), g.param(p.q_b)));
  Var q_crit = ag::select_rows(q, {out.critical});
  out.attention = ag::softmax_rows(ag::transpose(ag::matmul(q, ag::transpose(q_crit))));
  Var value = ag::linear(h, g.param(p.v_w), g.param(p.v_b));
  Var bag_emb = ag::matmul(out.attention, value);
  Var stream2 = ag::linear(bag_emb, g.param(p.bag_w), g.param(p.bag_b));
  Var stream1 = ag::select_rows(out.instance_logits, {out.critical});
  out.bag_logits = ag::scale(ag::add(stream1, stream2), 0.5);
  return out;
}

struct MilForward {
  Tensor bag_logits;       // C
  Tensor instance_logits;  // N x C
  std::vector<double> attention;
  std::size_t critical = 0;
};

inline MilForward mil_forward(const Bag& bag, const MilParams& p) {
  Graph g(false);
  const MilGraphOutput o = graph_mil(g.constant(bag.features), p);
  MilForward f;
  f.bag_logits = o.bag_logits.value().reshaped({o.bag_logits.value().size()});
  f.instance_logits = o.instance_logits.value();
  f.attention.assign(o.attention.value().data().begin(), o.attention.value().data().end());
  f.critical = o.critical;
  return f;
}

inline std::vector<double> softmax_vector(const Tensor& logits) {
  const Tensor p = softmax_rows(logits.reshaped({1, logits.size()}));
  return {p.data().begin(), p.data().end()};
}

/// Rank-based (Mann-Whitney) AUC for binary labels {0, 1}; tied scores share midranks.
inline double compute_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("compute_auc: score/label length mismatch");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw MetricError("compute_auc expects binary labels 0/1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw MetricError("AUC is undefined when one class is absent");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
    i = j + 1;
  }
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == 1) pos_rank_sum += rank[i];
  const double u = pos_rank_sum - static_cast<double>(pos) * (static_cast<double>(pos) + 1.0) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

/// Binary AUC on the class-1 probability, or the one-vs-rest macro average for more classes.
inline double compute_auc_multiclass(const std::vector<std::vector<double>>& probs, std::span<const int> labels,
                                     int classes) {
  if (classes == 2) {
    std::vector<double> s;
    for (const auto& p : probs) s.push_back(p[1]);
    return compute_auc(s, labels);
  }
  double total = 0.0;
  for (int c = 0; c < classes; ++c) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      s.push_back(probs[i][static_cast<std::size_t>(c)]);
      y.push_back(labels[i] == c ? 1 : 0);
    }
    total += compute_auc(s, y);
  }
  return total / classes;
}

inline double macro_f1(std::span<const int> predicted, std::span<const int> labels, int classes) {
  double total = 0.0;
  for (int c = 0; c < classes; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (predicted[i] == c && labels[i] == c) ++tp;
      if (predicted[i] == c && labels[i] != c) ++fp;
      if (predicted[i] != c && labels[i] == c) ++fn;
    }
    total += tp == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
  }
  return total / classes;
}

struct MilMetrics {
  double accuracy = 0.0;
  double auc = 0.0;
  double f1 = 0.0;
  double loss = 0.0;
};

inline MilMetrics evaluate_mil(const MilParams& p, const std::vector<const Bag*>& bags, int classes) {
  if (bags.empty()) throw MetricError("cannot evaluate on an empty bag set");
  std::vector<std::vector<double>> probs;
  std::vector<int> labels, predicted;
  MilMetrics m;
  for (const Bag* b : bags) {
    const MilForward f = mil_forward(*b, p);
    auto pr = softmax_vector(f.bag_logits);
    m.loss -= std::log(std::max(pr[static_cast<std::size_t>(b->label)], 1e-300));
    predicted.push_back(static_cast<int>(std::max_element(pr.begin(), pr.end()) - pr.begin()));
    labels.push_back(b->label);
    probs.push_back(std::move(pr));
  }
  m.loss /= static_cast<double>(bags.size());
  double correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  m.accuracy = correct / static_cast<double>(labels.size());
  m.auc = compute_auc_multiclass(probs, labels, classes);
  m.f1 = macro_f1(predicted, labels, classes);
  return m;
}

inline int class_count(const std::vector<const Bag*>& bags) {
  int mx = -1;
  for (const Bag* b : bags) {
    if (b->label < 0) throw DataError("bag '" + b->bag_id + "' has a negative label");
    mx = std::max(mx, b->label);
  }
  return mx + 1;
}

struct MilTrainResult {
  MilParams params;
  int best_epoch = 0;
  std::vector<MilMetrics> train_history;
};

/// Trains on `train` one bag per step; keeps the epoch with the lowest validation loss (the
/// last epoch when `val` is empty).
inline MilTrainResult train_mil(const std::vector<const Bag*>& train, const std::vector<const Bag*>& val, int classes,
                                const MilConfig& cfg, std::uint64_t seed) {
  if (train.empty()) throw DataError("MIL training set is empty");
  std::vector<int> seen(static_cast<std::size_t>(classes), 0);
  for (const Bag* b : train) {
    if (b->label >= classes) throw DataError("bag label exceeds class count");
    seen[static_cast<std::size_t>(b->label)] = 1;
  }
  if (classes < 2 || std::count(seen.begin(), seen.end(), 1) < 2) throw ConfigError("MIL training needs at least two classes present");
  const std::size_t d = train.front()->features.cols();
  Rng rng(derive_seed(seed, {0x3e1}));
  MilTrainResult res;
  res.params = MilParams::init(d, static_cast<std::size_t>(classes), static_cast<std::size_t>(cfg.query_dim), rng);
  MilParams best = res.params;
  double best_val = std::numeric_limits<double>::infinity();
  AdamW opt;
  std::vector<Tensor*> params;
  std::vector<bool> decay;
  res.params.visit("", [&](const std::string&, Tensor& t) {
    params.push_back(&t);
    decay.push_back(t.rank() >= 2);
  });
  std::vector<std::size_t> order(train.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t i : order) {
      const Bag& b = *train[i];
      Graph g;
      const MilGraphOutput o = graph_mil(g.constant(b.features), res.params);
      Tensor target({1, static_cast<std::size_t>(classes)});
      target[static_cast<std::size_t>(b.label)] = 1.0;
      Var loss = ag::soft_cross_entropy(o.bag_logits, std::move(target), 1.0, {1.0});
      if (!std::isfinite(loss.value()[0])) throw NonFiniteLossError("non-finite MIL loss on bag '" + b.bag_id + "'");
      g.backward(loss);
      std::vector<Tensor> grads;
      for (Tensor* p : params) grads.push_back(g.grad_of(*p));
      opt.step(params, grads, decay, cfg.lr, cfg.weight_decay);
    }
    res.train_history.push_back(evaluate_mil(res.params, train, classes));
    if (!val.empty()) {
      const double v = evaluate_mil(res.params, val, classes).loss;
      if (v < best_val) {
        best_val = v;
        best = res.params;
        res.best_epoch = epoch;
      }
    }
  }
  if (val.empty()) {
    res.best_epoch = cfg.epochs;
  } else {
    res.params = best;
  }
  return res;
}

/// Per-class shuffle, taking round(fraction * class size) bags (at least one when the class
/// has two or more) into the held-out part.
inline std::pair<std::vector<const Bag*>, std::vector<const Bag*>> stratified_split(const std::vector<const Bag*>& bags,
                                                                                    double fraction, std::uint64_t seed) {
  std::map<int, std::vector<const Bag*>> by_class;
  for (const Bag* b : bags) by_class[b->label].push_back(b);
  std::vector<const Bag*> keep, held;
  Rng rng(seed);
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng.engine());
    std::size_t k = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(members.size())));
    if (fraction > 0.0 && k == 0 && members.size() >= 2) k = 1;
    k = std::min(k, members.size() > 0 ? members.size() - 1 : 0);
    held.insert(held.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
    keep.insert(keep.end(), members.begin() + static_cast<std::ptrdiff_t>(k), members.end());
  }
  auto by_id = [](const Bag* a, const Bag* b) { return a->bag_id < b->bag_id; };
  std::sort(keep.begin(), keep.end(), by_id);
  std::sort(held.begin(), held.end(), by_id);
  return {keep, held};
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};

inline MeanSd mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

struct MilSeedResult {
  std::uint64_t seed = 0;
  int best_epoch = 0;
  MilMetrics test;
};

struct MilReport {
  std::vector<MilSeedResult> seeds;
  MeanSd accuracy, auc, f1;
  std::size_t train_bags = 0;
  std::size_t test_bags = 0;
  int classes = 0;
};

/// Fixed test split (mil.split_seed); each seed draws its own validation split, initialisation
/// and bag order.
inline MilReport run_mil(const FeatureArchive& ar, const MilConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("at least one MIL seed is required");
  std::vector<const Bag*> all;
  for (const auto& b : ar.bags) all.push_back(&b);
  const int classes = class_count(all);
  if (classes < 2) throw ConfigError("MIL needs at least two classes, found " + std::to_string(classes));
  auto [pool, test] = stratified_split(all, cfg.test_fraction, derive_seed(static_cast<std::uint64_t>(cfg.split_seed), {0x7e57}));
  if (test.empty()) throw ConfigError("test split is empty; increase mil.test_fraction or the bag count");
  MilReport rep;
  rep.classes = classes;
  rep.test_bags = test.size();
  rep.train_bags = pool.size();
  std::vector<double> acc, auc, f1;
  for (std::uint64_t s : seeds) {
    auto [train, val] = stratified_split(pool, cfg.val_fraction, derive_seed(s, {0x7a1}));
    const MilTrainResult tr = train_mil(train, val, classes, cfg, s);
    MilSeedResult r{s, tr.best_epoch, evaluate_mil(tr.params, test, classes)};
    acc.push_back(r.test.accuracy);
    auc.push_back(r.test.auc);
    f1.push_back(r.test.f1);
    rep.seeds.push_back(r);
  }
  rep.accuracy = mean_sd(acc);
  rep.auc = mean_sd(auc);
  rep.f1 = mean_sd(f1);
  return rep;
}

/// Replaces archive labels by those of a bag manifest, matched on bag_id.
inline void apply_manifest_labels(FeatureArchive& ar, const std::vector<BagEntry>& manifest) {
  std::map<std::string, int> labels;
  for (const auto& e : manifest) labels[e.bag_id] = e.label;
  for (auto& b : ar.bags) {
    auto it = labels.find(b.bag_id);
    if (it == labels.end()) throw DataError("bag '" + b.bag_id + "' is missing from the manifest");
    b.label = it->second;
  }
}

}  // namespace dirl
