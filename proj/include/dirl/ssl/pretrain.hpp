#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dirl/checkpoint.hpp"
#include "dirl/dataset.hpp"
#include "dirl/parallel.hpp"
#include "dirl/ssl/train.hpp"

namespace dirl {

// Checkpoint plumbing for parameter sets.

template <class Params>
void append_tensors(Checkpoint& ckpt, const std::string& prefix, const Params& params) {
  params.visit(prefix, [&](const std::string& name, const Tensor& t) { ckpt.tensors.emplace_back(name, t); });
}

/// Fills every parameter of `params` from `prefix`-named checkpoint tensors.
template <class Params>
void load_tensors(Params& params, const Checkpoint& ckpt, const std::string& prefix, const std::string& source) {
  std::map<std::string, const Tensor*> index;
  for (const auto& [name, t] : ckpt.tensors) index.emplace(name, &t);
  params.visit(prefix, [&](const std::string& name, Tensor& t) {
    auto it = index.find(name);
    if (it == index.end()) throw CheckpointError(source + ": missing tensor '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw CheckpointError(source + ": tensor '" + name + "' has shape " + shape_str(it->second->shape()) + ", expected " +
                            shape_str(t.shape()));
    }
    t = *it->second;
  });
}

inline void append_config(Checkpoint& ckpt, const Config& cfg) {
  for (const auto& [k, v] : cfg.items()) ckpt.fields.emplace_back("cfg." + k, v);
}

inline Config config_from_checkpoint(const Checkpoint& ckpt) {
  Config cfg;
  for (const auto& [k, v] : ckpt.fields)
    if (k.rfind("cfg.", 0) == 0) cfg.set(k.substr(4), v);
  cfg.validate();
  return cfg;
}

inline std::string require_field(const Checkpoint& ckpt, const std::string& key, const std::string& source) {
  const std::string* v = ckpt.field(key);
  if (!v) throw CheckpointError(source + ": missing header field '" + key + "'");
  return *v;
}

inline std::string make_model_id(Variant v, std::uint64_t seed) { return to_string(v) + "-seed" + std::to_string(seed); }

/// Encoder-only feature extractor: patch projection, position embedding and blocks of the
/// teacher.
struct Extractor {
  Config cfg;
  EncoderParams encoder;
  std::string model_id;
};

inline Checkpoint extractor_checkpoint(const TrainState& st, const std::string& model_id, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.fields = {{"kind", "extractor"}, {"model_id", model_id}, {"variant", to_string(st.cfg.ssl.variant)},
                 {"seed", std::to_string(seed)}};
  append_config(ckpt, st.cfg);
  append_tensors(ckpt, "encoder.", st.teacher.encoder);
  return ckpt;
}

inline Checkpoint state_checkpoint(TrainState& st, const std::string& model_id, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.fields = {{"kind", "state"},
                 {"model_id", model_id},
                 {"variant", to_string(st.cfg.ssl.variant)},
                 {"seed", std::to_string(seed)},
                 {"step", std::to_string(st.step)},
                 {"warmup_steps", std::to_string(st.warmup_steps)},
                 {"total_steps", std::to_string(st.total_steps)},
                 {"optim_steps", std::to_string(st.optimizer.steps())}};
  append_config(ckpt, st.cfg);
  append_tensors(ckpt, "student.", st.student);
  append_tensors(ckpt, "teacher.", st.teacher);
  for (const auto& [name, c] : st.centers) ckpt.tensors.emplace_back("center." + name, c);
  for (std::size_t i = 0; i < st.optimizer.first_moments().size(); ++i) {
    ckpt.tensors.emplace_back("optim.m." + std::to_string(i), st.optimizer.first_moments()[i]);
    ckpt.tensors.emplace_back("optim.v." + std::to_string(i), st.optimizer.second_moments()[i]);
  }
  return ckpt;
}

inline TrainState load_train_state(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  const std::string src = path.string();
  if (require_field(ckpt, "kind", src) != "state") throw CheckpointError(src + " is not a training-state checkpoint");
  TrainState st;
  st.cfg = config_from_checkpoint(ckpt);
  Rng rng(0);
  st.student = init_model(st.cfg, rng);
  st.teacher = st.student;
  load_tensors(st.student, ckpt, "student.", src);
  load_tensors(st.teacher, ckpt, "teacher.", src);
  for (const auto& [name, head] : st.student.heads) {
    const Tensor* c = ckpt.tensor("center." + name);
    if (!c || c->size() != head.out_dim()) throw CheckpointError(src + ": missing or malformed center for '" + name + "'");
    st.centers.emplace(name, *c);
  }
  st.step = std::stoull(require_field(ckpt, "step", src));
  st.warmup_steps = std::stoull(require_field(ckpt, "warmup_steps", src));
  st.total_steps = std::stoull(require_field(ckpt, "total_steps", src));
  const std::uint64_t optim_steps = std::stoull(require_field(ckpt, "optim_steps", src));
  st.optimizer = AdamW(AdamWSettings{st.cfg.optim.beta1, st.cfg.optim.beta2, st.cfg.optim.eps});
  if (optim_steps > 0) {
    std::vector<Tensor> m, v;
    for (std::size_t i = 0;; ++i) {
      const Tensor* a = ckpt.tensor("optim.m." + std::to_string(i));
      const Tensor* b = ckpt.tensor("optim.v." + std::to_string(i));
      if (!a || !b) break;
      m.push_back(*a);
      v.push_back(*b);
    }
    st.optimizer.restore(std::move(m), std::move(v), optim_steps);
  }
  return st;
}

/// Reads the teacher encoder from an extractor or a training-state checkpoint.
inline Extractor load_extractor(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  const std::string src = path.string();
  const std::string kind = require_field(ckpt, "kind", src);
  Extractor ex;
  ex.cfg = config_from_checkpoint(ckpt);
  ex.model_id = require_field(ckpt, "model_id", src);
  Rng rng(0);
  ex.encoder = EncoderParams::init(ex.cfg.encoder, rng);
  if (kind == "extractor") {
    load_tensors(ex.encoder, ckpt, "encoder.", src);
  } else if (kind == "state") {
    load_tensors(ex.encoder, ckpt, "teacher.encoder.", src);
  } else {
    throw CheckpointError(src + ": unknown checkpoint kind '" + kind + "'");
  }
  return ex;
}

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double aux_loss = 0.0;
  std::map<std::string, double> term_loss;
  std::map<std::string, std::size_t> term_skipped;
  std::size_t no_signal = 0;
  std::size_t skipped_updates = 0;
  double lr = 0.0;
  double momentum = 0.0;
};

struct PretrainOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  std::uint64_t seed = 0;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct PretrainResult {
  TrainState state;
  std::vector<EpochMetrics> epochs;
  std::string model_id;
};

inline nlohmann::ordered_json epoch_json(const EpochMetrics& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["loss"] = e.loss;
  j["aux_loss"] = e.aux_loss;
  j["lr"] = e.lr;
  j["momentum"] = e.momentum;
  j["no_signal_samples"] = e.no_signal;
  j["skipped_updates"] = e.skipped_updates;
  j["terms"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : e.term_loss) j["terms"][k] = v;
  j["term_skipped"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : e.term_skipped) j["term_skipped"][k] = v;
  return j;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string epoch_tag(int epoch) {
  std::string s = std::to_string(epoch);
  return "epoch_" + std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

/// Self-supervised pretraining over all crops of the dataset. Writes periodic and final
/// checkpoints plus metrics.json when an output directory is given.
inline PretrainResult pretrain(const Dataset& ds, const Config& cfg, const PretrainOptions& opt) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (ds.crops.empty()) throw DataError("pretraining needs a non-empty dataset");
  const std::size_t N = ds.crops.size();
  const std::size_t B = static_cast<std::size_t>(cfg.optim.batch_size);
  const std::size_t steps_per_epoch = (N + B - 1) / B;

  PretrainResult res;
  res.state = init_train_state(cfg, opt.seed, steps_per_epoch);
  res.model_id = make_model_id(cfg.ssl.variant, opt.seed);
  TrainState& st = res.state;
  if (!opt.out_dir.empty()) fs::create_directories(opt.out_dir / "checkpoints");

  std::vector<std::size_t> order(N);
  for (int epoch = 1; epoch <= cfg.optim.epochs; ++epoch) {
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    Rng shuffle(derive_seed(opt.seed, {0x5f, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), shuffle.engine());

    EpochMetrics em;
    em.epoch = epoch;
    std::map<std::string, std::pair<double, std::size_t>> term_acc;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < N; start += B) {
      const std::size_t end = std::min(N, start + B);
      std::vector<ViewPair> batch(end - start);
      parallel_for(batch.size(), [&](std::size_t j) {
        const std::size_t idx = order[start + j];
        Rng rng(derive_seed(opt.seed, {0xa7, static_cast<std::uint64_t>(epoch), idx}));
        batch[j] = make_views(ds.crops[idx].image, ds.crops[idx].centroids, cfg.aug, cfg.encoder.patch, cfg.ssl.cell_classes, rng);
      });
      const StepMetrics m = train_step(st, batch);
      ++steps;
      em.loss += m.loss;
      em.aux_loss += m.aux_loss;
      em.no_signal += m.no_signal;
      em.skipped_updates += m.update_skipped ? 1 : 0;
      em.lr = m.lr;
      em.momentum = m.momentum;
      for (const auto& [k, v] : m.term_loss) {
        term_acc[k].first += v;
        term_acc[k].second += 1;
      }
      for (const auto& [k, v] : m.term_skipped) em.term_skipped[k] += v;
    }
    em.loss /= static_cast<double>(steps);
    em.aux_loss /= static_cast<double>(steps);
    for (const auto& [k, acc] : term_acc) em.term_loss[k] = acc.first / static_cast<double>(acc.second);
    res.epochs.push_back(em);
    if (opt.on_epoch) opt.on_epoch(em);

    if (!opt.out_dir.empty() && cfg.optim.checkpoint_every > 0 && epoch % cfg.optim.checkpoint_every == 0) {
      write_checkpoint(opt.out_dir / "checkpoints" / (epoch_tag(epoch) + ".ckpt"), state_checkpoint(st, res.model_id, opt.seed));
    }
  }

  if (!opt.out_dir.empty()) {
    write_checkpoint(opt.out_dir / "extractor.ckpt", extractor_checkpoint(st, res.model_id, opt.seed));
    write_checkpoint(opt.out_dir / "state.ckpt", state_checkpoint(st, res.model_id, opt.seed));
    nlohmann::ordered_json j;
    j["model_id"] = res.model_id;
    j["variant"] = to_string(cfg.ssl.variant);
    j["seed"] = opt.seed;
    j["crops"] = N;
    j["steps"] = st.step;
    j["epochs"] = nlohmann::ordered_json::array();
    for (const auto& e : res.epochs) j["epochs"].push_back(epoch_json(e));
    write_text_file(opt.out_dir / "metrics.json", j.dump(2) + "\n");
  }
  return res;
}

}  // namespace dirl
