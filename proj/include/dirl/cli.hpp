#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dirl/attention_analysis.hpp"
#include "dirl/hash.hpp"
#include "dirl/mil.hpp"
#include "dirl/ssl/pretrain.hpp"
#include "dirl/synth.hpp"

namespace dirl::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

/// UTC timestamp; SOURCE_DATE_EPOCH pins it for reproducible manifests.
inline std::string timestamp() {
  std::time_t t = 0;
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH"); env && *env) {
    try {
      std::size_t used = 0;
      t = static_cast<std::time_t>(std::stoll(env, &used));
      if (env[used] != '\0') throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw ConfigError("SOURCE_DATE_EPOCH must be an integer, got '" + std::string(env) + "'");
    }
  } else {
    t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Provenance record written into every output directory before work starts.
struct RunManifest {
  std::string command;
  std::vector<std::pair<std::string, std::string>> args;
  std::vector<std::pair<std::string, std::string>> inputs;  // path -> content hash
  std::uint64_t seed = 0;
  std::optional<Config> config;
  std::string started;

  json to_json() const {
    json j;
    j["command"] = command;
    j["seed"] = seed;
    j["started"] = started;
    j["args"] = json::object();
    for (const auto& [k, v] : args) j["args"][k] = v;
    j["inputs"] = json::array();
    for (const auto& [p, h] : inputs) j["inputs"].push_back({{"path", p}, {"content_hash", h}});
    if (config) {
      j["config"] = json::object();
      for (const auto& [k, v] : config->items()) j["config"][k] = v;
    }
    return j;
  }
};

inline void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

inline void require_exists(const fs::path& p, const std::string& flag) {
  if (p.empty()) throw ConfigError(flag + " is required");
  if (!fs::exists(p)) throw IoError(flag + ": " + p.string() + " does not exist");
}

inline void prepare_out_dir(const fs::path& out, bool force) {
  if (out.empty()) throw ConfigError("--out is required");
  if (fs::exists(out) && !fs::is_directory(out)) throw IoError(out.string() + " exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out) && !force) {
    throw IoError("output directory " + out.string() + " is not empty (use --force to overwrite)");
  }
  fs::create_directories(out);
}

inline RunManifest start_run(const std::string& command, const fs::path& out, std::uint64_t seed,
                             std::vector<std::pair<std::string, std::string>> args, const std::vector<fs::path>& inputs,
                             const std::optional<Config>& cfg) {
  RunManifest m;
  m.command = command;
  m.seed = seed;
  m.args = std::move(args);
  for (const auto& p : inputs) m.inputs.emplace_back(p.generic_string(), content_hash(p));
  m.config = cfg;
  m.started = timestamp();
  write_json(out / "run_manifest.json", m.to_json());
  return m;
}

/// Defaults, then the config file, then `key=value` overrides in order.
inline Config resolve_config(const fs::path& file, const std::vector<std::string>& overrides) {
  Config cfg;
  if (!file.empty()) {
    require_exists(file, "--config");
    cfg = Config::load(file);
  }
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

// ---- gen-synthetic

struct GenSyntheticArgs {
  fs::path out;
  fs::path config;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  int crops_per_bag = 16;
  int bags_per_class = 50;
  bool force = false;
};

inline SynthSummary cmd_gen_synthetic(const GenSyntheticArgs& a) {
  Config cfg = resolve_config(a.config, a.overrides);
  cfg.synth.seed = a.seed;
  if (a.crops_per_bag < 1 || a.bags_per_class < 1) throw ConfigError("--crops-per-bag and --bags-per-class must be at least 1");
  prepare_out_dir(a.out, a.force);
  start_run("gen-synthetic", a.out, a.seed,
            {{"crops_per_bag", std::to_string(a.crops_per_bag)}, {"bags_per_class", std::to_string(a.bags_per_class)}}, {}, cfg);
  return generate_dataset(cfg.synth, a.crops_per_bag, a.bags_per_class, a.out, true);
}

// ---- pretrain

struct PretrainArgs {
  std::string variant = "dirl";
  fs::path data;
  fs::path config;
  std::vector<std::string> overrides;
  fs::path out;
  std::uint64_t seed = 0;
  bool aux_cell_count = false;
  std::string attn_scale;
  bool force = false;
  bool quiet = false;
};

inline PretrainResult cmd_pretrain(const PretrainArgs& a) {
  require_exists(a.data, "--data");
  Config cfg = resolve_config(a.config, a.overrides);
  cfg.ssl.variant = parse_variant(a.variant);
  if (a.aux_cell_count) cfg.ssl.aux_cell_count = true;
  if (!a.attn_scale.empty()) cfg.encoder.attn_scale = parse_attn_scale(a.attn_scale);
  cfg.validate();
  const Dataset ds = load_dataset(a.data);
  for (const auto& c : ds.crops) {
    if (image_width(c.image) != static_cast<std::size_t>(cfg.encoder.image_size) ||
        image_height(c.image) != static_cast<std::size_t>(cfg.encoder.image_size)) {
      throw ConfigError("crop " + crop_path(ds.root, c.bag_id, c.index).string() + " does not match encoder.image_size = " +
                        std::to_string(cfg.encoder.image_size));
    }
  }
  prepare_out_dir(a.out, a.force);
  start_run("pretrain", a.out, a.seed, {{"variant", a.variant}, {"data", a.data.generic_string()}}, {a.data}, cfg);
  PretrainOptions opt;
  opt.out_dir = a.out;
  opt.seed = a.seed;
  if (!a.quiet) {
    opt.on_epoch = [&](const EpochMetrics& e) {
      std::cerr << "epoch " << e.epoch << "/" << cfg.optim.epochs << " loss " << e.loss << " lr " << e.lr << "\n";
    };
  }
  return pretrain(ds, cfg, opt);
}

// ---- extract-features

struct ExtractArgs {
  fs::path ckpt;
  fs::path data;
  fs::path out;
  bool force = false;
};

inline FeatureArchive cmd_extract_features(const ExtractArgs& a) {
  require_exists(a.ckpt, "--ckpt");
  require_exists(a.data, "--data");
  const Extractor ex = load_extractor(a.ckpt);
  const Dataset ds = load_dataset(a.data, false);
  prepare_out_dir(a.out, a.force);
  const Checkpoint header = read_checkpoint(a.ckpt);
  const std::string* seed = header.field("seed");
  start_run("extract-features", a.out, seed ? std::stoull(*seed) : 0,
            {{"ckpt", a.ckpt.generic_string()}, {"data", a.data.generic_string()}, {"model_id", ex.model_id}}, {a.ckpt, a.data},
            ex.cfg);
  FeatureArchive ar = extract_features(ex.encoder, ex.cfg.encoder, ds);
  write_feature_archive(a.out / "features.bin", ar);
  return ar;
}

// ---- mil

struct MilArgs {
  fs::path features;
  fs::path manifest;
  fs::path config;
  std::vector<std::string> overrides;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  fs::path out;
  bool force = false;
};

inline json mil_report_json(const MilReport& r) {
  auto ms = [](const MeanSd& m) { return json{{"mean", m.mean}, {"sd", m.sd}}; };
  json j;
  j["classes"] = r.classes;
  j["train_bags"] = r.train_bags;
  j["test_bags"] = r.test_bags;
  j["accuracy"] = ms(r.accuracy);
  j["auc"] = ms(r.auc);
  j["macro_f1"] = ms(r.f1);
  j["seeds"] = json::array();
  for (const auto& s : r.seeds) {
    j["seeds"].push_back({{"seed", s.seed},
                          {"best_epoch", s.best_epoch},
                          {"accuracy", s.test.accuracy},
                          {"auc", s.test.auc},
                          {"macro_f1", s.test.f1},
                          {"loss", s.test.loss}});
  }
  return j;
}

inline MilReport cmd_mil(const MilArgs& a) {
  require_exists(a.features, "--features");
  const Config cfg = resolve_config(a.config, a.overrides);
  FeatureArchive ar = read_feature_archive(a.features);
  std::vector<fs::path> inputs{a.features};
  if (!a.manifest.empty()) {
    require_exists(a.manifest, "--manifest");
    apply_manifest_labels(ar, read_manifest(a.manifest));
    inputs.push_back(a.manifest);
  }
  if (a.seeds.empty()) throw ConfigError("--seeds needs at least one seed");
  prepare_out_dir(a.out, a.force);
  std::string seed_list;
  for (std::size_t i = 0; i < a.seeds.size(); ++i) seed_list += (i ? "," : "") + std::to_string(a.seeds[i]);
  start_run("mil", a.out, a.seeds.front(), {{"seeds", seed_list}}, inputs, cfg);
  const MilReport rep = run_mil(ar, cfg.mil, a.seeds);
  write_json(a.out / "mil_metrics.json", mil_report_json(rep));
  return rep;
}

// ---- analyze-attention

struct AnalyzeArgs {
  fs::path ckpt;
  fs::path data;
  fs::path out;
  std::string which = "agg";
  int layer = -1;  // last
  bool per_head = false;
  int max_overlays = 16;
  bool force = false;
};

struct AnalyzeResult {
  SparsityProfile profile;
  std::vector<SparsityProfile> heads;
  std::size_t crops = 0;
  std::size_t skipped = 0;
};

/// Disentangle block parameters of a DiRL training-state checkpoint, when present.
inline std::optional<DisentangleParams> load_disentangle(const fs::path& path, const Config& cfg) {
  const Checkpoint ckpt = read_checkpoint(path);
  if (cfg.ssl.variant != Variant::dirl || require_field(ckpt, "kind", path.string()) != "state") return std::nullopt;
  Rng rng(0);
  DisentangleParams d = DisentangleParams::init(cfg.encoder, rng, cfg.ssl.shared_disentangle);
  load_tensors(d, ckpt, "teacher.disentangle.", path.string());
  return d;
}

inline json profile_json(const SparsityProfile& p) {
  return json{{"low", p.low}, {"desired", p.desired}, {"high", p.high}};
}

inline AnalyzeResult cmd_analyze_attention(const AnalyzeArgs& a) {
  require_exists(a.ckpt, "--ckpt");
  require_exists(a.data, "--data");
  const MapKind kind = parse_map_kind(a.which);
  const Extractor ex = load_extractor(a.ckpt);
  const EncoderConfig& ecfg = ex.cfg.encoder;
  const int depth = ecfg.depth;
  const int layer = a.layer < 0 ? depth - 1 : a.layer;
  if (layer >= depth) throw IndexError("--layer " + std::to_string(a.layer) + " out of range for depth " + std::to_string(depth));
  if (a.per_head && kind != MapKind::agg) throw ConfigError("--per-head is only defined for --which agg");
  std::optional<DisentangleParams> dis;
  if (needs_disentangle(kind)) {
    dis = load_disentangle(a.ckpt, ex.cfg);
    if (!dis) throw CheckpointError(a.ckpt.string() + ": map '" + a.which + "' needs a DiRL training-state checkpoint (state.ckpt)");
  }
  const Dataset ds = load_dataset(a.data);
  prepare_out_dir(a.out, a.force);
  const Checkpoint header = read_checkpoint(a.ckpt);
  const std::string* seed = header.field("seed");
  start_run("analyze-attention", a.out, seed ? std::stoull(*seed) : 0,
            {{"ckpt", a.ckpt.generic_string()},
             {"data", a.data.generic_string()},
             {"which", a.which},
             {"layer", std::to_string(layer)},
             {"per_head", a.per_head ? "true" : "false"}},
            {a.ckpt, a.data}, ex.cfg);

  const std::size_t n = ds.crops.size();
  std::vector<std::vector<double>> maps(n);
  std::vector<std::vector<std::vector<double>>> head_maps(n);
  std::vector<std::uint8_t> used(n, 0);
  const auto L = static_cast<std::size_t>(layer);
  parallel_for(n, [&](std::size_t i) {
    const CropSample& c = ds.crops[i];
    const EncodeResult enc = encode(c.image, ex.encoder, ecfg);
    const CellPrior prior = build_cell_prior(c.centroids, ecfg.patch);
    const std::size_t cells = prior.count();
    // region maps need both a non-empty row set and, for disentangled maps, a non-empty partner set
    const bool c_rows = kind == MapKind::c || kind == MapKind::cc || kind == MapKind::cb;
    const bool b_rows = kind == MapKind::b || kind == MapKind::bb || kind == MapKind::bc;
    if ((c_rows && cells == 0) || (b_rows && cells == prior.size())) return;
    maps[i] = representation_map(enc, prior, kind, L, ecfg, dis ? &*dis : nullptr);
    if (a.per_head)
      for (const Tensor& h : enc.record.layers[L]) head_maps[i].push_back(column_sums(h));
    used[i] = 1;
  });

  AnalyzeResult res;
  std::vector<double> all;
  std::vector<std::vector<double>> per_head(a.per_head ? static_cast<std::size_t>(ecfg.heads) : 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!used[i]) {
      ++res.skipped;
      continue;
    }
    ++res.crops;
    all.insert(all.end(), maps[i].begin(), maps[i].end());
    for (std::size_t h = 0; h < per_head.size(); ++h) per_head[h].insert(per_head[h].end(), head_maps[i][h].begin(), head_maps[i][h].end());
  }
  if (all.empty()) throw DataError("no crop supports map '" + a.which + "' (every cell prior is empty or full)");
  res.profile = bin_profile(all);
  for (const auto& v : per_head) res.heads.push_back(bin_profile(v));

  fs::create_directories(a.out / "overlays");
  int written = 0;
  for (std::size_t i = 0; i < n && written < a.max_overlays; ++i) {
    if (!used[i]) continue;
    const CropSample& c = ds.crops[i];
    export_overlay(c.image, maps[i], static_cast<std::size_t>(ecfg.patch), a.out / "overlays" / (c.bag_id + "_" + std::to_string(c.index)));
    ++written;
  }

  json j;
  j["model_id"] = ex.model_id;
  j["dataset_id"] = content_hash(a.data);
  j["which"] = a.which;
  j["layer"] = layer;
  j["bins"] = profile_json(res.profile);
  j["token_count"] = res.profile.count;
  j["crops"] = res.crops;
  j["skipped_crops"] = res.skipped;
  if (a.per_head) {
    j["heads"] = json::array();
    for (const auto& p : res.heads) j["heads"].push_back(profile_json(p));
  }
  write_json(a.out / "profile.json", j);
  return res;
}

}  // namespace dirl::cli
