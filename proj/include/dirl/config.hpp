#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dirl/encoder.hpp"

namespace dirl {

enum class Variant { baseline, cellback, cellback_v2, dirl };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::cellback: return "cellback";
    case Variant::cellback_v2: return "cellback-v2";
    case Variant::dirl: return "dirl";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "cellback") return Variant::cellback;
  if (s == "cellback-v2") return Variant::cellback_v2;
  if (s == "dirl") return Variant::dirl;
  throw ConfigError("unknown variant '" + s + "' (expected baseline|cellback|cellback-v2|dirl)");
}

struct SslConfig {
  Variant variant = Variant::dirl;
  int k_region = 256;
  int k_dis = 64;
  int head_hidden = 128;
  int head_bottleneck = 32;
  double temp_student = 0.1;
  double temp_teacher = 0.04;
  double center_momentum = 0.9;
  double ema_start = 0.996;
  double ema_end = 1.0;
  double lambda1 = 0.5;
  double lambda2 = 0.1 / 4.0;
  bool aux_cell_count = false;
  double aux_weight = 1.0;
  int cell_classes = 2;
  bool shared_disentangle = true;
};

struct OptimConfig {
  double base_lr = 5e-4;
  double min_lr = 1e-6;
  double weight_decay = 0.04;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_grad = 3.0;
  int batch_size = 32;
  int epochs = 30;
  int warmup_epochs = 10;
  int checkpoint_every = 10;
};

struct AugConfig {
  double crop_scale_min = 0.4;
  double crop_scale_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  double brightness = 0.4;
  double contrast = 0.4;

  static AugConfig identity() { return {1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0}; }
};

struct MilConfig {
  double lr = 2e-4;
  double weight_decay = 5e-2;
  int epochs = 50;
  int query_dim = 32;
  double val_fraction = 0.2;
  double test_fraction = 0.3;
  int split_seed = 0;
};

/// Per-class regimes for the synthetic crop generator.
struct SynthConfig {
  int image_size = 32;
  double radius_min = 1.0;
  double radius_max = 2.0;
  std::vector<double> density{4.0, 9.0};
  std::vector<double> clustering{0.0, 0.7};
  // One cell-type distribution per class; each inner list has cell_types entries.
  std::vector<std::vector<double>> type_weights{{0.8, 0.2}, {0.3, 0.7}};
  double texture_amplitude = 0.15;
  int classes = 2;
  int cell_types = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size <= 0) throw ConfigError("synth.image_size must be positive");
    if (classes < 1 || cell_types < 1) throw ConfigError("synth.classes and synth.cell_types must be at least 1");
    if (density.size() != static_cast<std::size_t>(classes) || clustering.size() != static_cast<std::size_t>(classes) ||
        type_weights.size() != static_cast<std::size_t>(classes)) {
      throw ConfigError("synth.density, synth.clustering and synth.type_weights need one entry per class");
    }
    for (double c : clustering)
      if (c < 0.0 || c > 1.0) throw ConfigError("synth.clustering values must lie in [0, 1]");
    for (const auto& w : type_weights) {
      if (w.size() != static_cast<std::size_t>(cell_types)) throw ConfigError("synth.type_weights rows need one weight per cell type");
      double s = 0.0;
      for (double v : w) {
        if (v < 0.0) throw ConfigError("synth.type_weights must be non-negative");
        s += v;
      }
      if (s <= 0.0) throw ConfigError("synth.type_weights rows must have positive sum");
    }
    if (!(radius_min > 0.0) || radius_max < radius_min) throw ConfigError("synth radius range is invalid");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError(key + ": expected a number, got '" + s + "'");
  return v;
}

inline long long parse_int(const std::string& key, const std::string& s) {
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

}  // namespace detail

/// Flat `key = value` configuration with namespaced keys. Every key has a default and
/// unknown keys are rejected.
class Config {
 public:
  EncoderConfig encoder;
  SslConfig ssl;
  OptimConfig optim;
  AugConfig aug;
  MilConfig mil;
  SynthConfig synth;

  void set(const std::string& key, const std::string& value) {
    for (auto& b : bindings()) {
      if (b.key == key) {
        b.set(detail::trim(value));
        return;
      }
    }
    throw ConfigError("unknown config key '" + key + "'");
  }

  std::string get(const std::string& key) const {
    for (const auto& b : const_cast<Config*>(this)->bindings())
      if (b.key == key) return b.get();
    throw ConfigError("unknown config key '" + key + "'");
  }

  /// All keys with their current values, sorted by key.
  std::vector<std::pair<std::string, std::string>> items() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& b : const_cast<Config*>(this)->bindings()) out.emplace_back(b.key, b.get());
    std::sort(out.begin(), out.end());
    return out;
  }

  void apply_text(const std::string& text, const std::string& source = "<config>") {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
      try {
        set(detail::trim(line.substr(0, eq)), line.substr(eq + 1));
      } catch (const ConfigError& e) {
        throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    validate();
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    Config c;
    c.apply_text(ss.str(), path.string());
    return c;
  }

  std::string to_text() const {
    std::string out;
    for (const auto& [k, v] : items()) out += k + " = " + v + "\n";
    return out;
  }

  void validate() const {
    encoder.validate();
    synth.validate();
    if (ssl.k_region < 2 || ssl.k_dis < 2) throw ConfigError("projection heads need at least 2 outputs");
    if (ssl.head_hidden < 1 || ssl.head_bottleneck < 1) throw ConfigError("projection head sizes must be positive");
    if (!(ssl.temp_student > 0.0) || !(ssl.temp_teacher > 0.0)) throw ConfigError("temperatures must be positive");
    if (ssl.lambda1 < 0.0 || ssl.lambda2 < 0.0 || ssl.aux_weight < 0.0) throw ConfigError("loss weights must be non-negative");
    if (ssl.lambda1 == 0.0 && ssl.lambda2 == 0.0 && (!ssl.aux_cell_count || ssl.aux_weight == 0.0) &&
        (ssl.variant == Variant::cellback || ssl.variant == Variant::dirl)) {
      throw ConfigError("at least one loss weight must be positive");
    }
    if (ssl.center_momentum < 0.0 || ssl.center_momentum >= 1.0) throw ConfigError("ssl.center_momentum must lie in [0, 1)");
    if (ssl.ema_start <= 0.0 || ssl.ema_start > 1.0 || ssl.ema_end < ssl.ema_start || ssl.ema_end > 1.0) {
      throw ConfigError("ssl.ema_start/ema_end must satisfy 0 < start <= end <= 1");
    }
    if (ssl.cell_classes < 1) throw ConfigError("ssl.cell_classes must be at least 1");
    if (optim.batch_size < 1 || optim.epochs < 1 || optim.warmup_epochs < 0) throw ConfigError("optim batch/epoch counts invalid");
    if (aug.crop_scale_min <= 0.0 || aug.crop_scale_max > 1.0 || aug.crop_scale_min > aug.crop_scale_max) {
      throw ConfigError("aug crop scale range must lie in (0, 1]");
    }
    if (aug.ratio_min <= 0.0 || aug.ratio_max < aug.ratio_min) throw ConfigError("aug ratio range invalid");
    if (mil.epochs < 1 || mil.val_fraction < 0.0 || mil.val_fraction >= 1.0 || mil.test_fraction <= 0.0 ||
        mil.test_fraction >= 1.0) {
      throw ConfigError("mil epochs/fractions invalid");
    }
  }

 private:
  struct Binding {
    std::string key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
  };

  static Binding bind(std::string key, int& v) {
    return {key, [&v] { return std::to_string(v); },
            [&v, key](const std::string& s) { v = static_cast<int>(detail::parse_int(key, s)); }};
  }
  static Binding bind(std::string key, std::uint64_t& v) {
    return {key, [&v] { return std::to_string(v); },
            [&v, key](const std::string& s) { v = static_cast<std::uint64_t>(detail::parse_int(key, s)); }};
  }
  static Binding bind(std::string key, double& v) {
    return {key, [&v] { return detail::format_double(v); }, [&v, key](const std::string& s) { v = detail::parse_double(key, s); }};
  }
  static Binding bind(std::string key, bool& v) {
    return {key, [&v] { return std::string(v ? "true" : "false"); },
            [&v, key](const std::string& s) { v = detail::parse_bool(key, s); }};
  }
  static Binding bind(std::string key, std::vector<double>& v) {
    return {key,
            [&v] {
              std::string out;
              for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + detail::format_double(v[i]);
              return out;
            },
            [&v, key](const std::string& s) {
              v.clear();
              for (const auto& item : detail::split(s, ',')) v.push_back(detail::parse_double(key, item));
            }};
  }
  static Binding bind(std::string key, std::vector<std::vector<double>>& v) {
    return {key,
            [&v] {
              std::string out;
              for (std::size_t i = 0; i < v.size(); ++i) {
                if (i) out += ';';
                for (std::size_t j = 0; j < v[i].size(); ++j) out += (j ? "," : "") + detail::format_double(v[i][j]);
              }
              return out;
            },
            [&v, key](const std::string& s) {
              v.clear();
              for (const auto& row : detail::split(s, ';')) {
                std::vector<double> r;
                for (const auto& item : detail::split(row, ',')) r.push_back(detail::parse_double(key, item));
                v.push_back(std::move(r));
              }
            }};
  }

  std::vector<Binding> bindings() {
    std::vector<Binding> b;
    b.push_back(bind("encoder.patch", encoder.patch));
    b.push_back(bind("encoder.image_size", encoder.image_size));
    b.push_back(bind("encoder.d", encoder.dim));
    b.push_back(bind("encoder.depth", encoder.depth));
    b.push_back(bind("encoder.heads", encoder.heads));
    b.push_back(bind("encoder.mlp_ratio", encoder.mlp_ratio));
    b.push_back(bind("encoder.init_std", encoder.init_std));
    b.push_back({"encoder.attn_scale", [this] { return to_string(encoder.attn_scale); },
                 [this](const std::string& s) { encoder.attn_scale = parse_attn_scale(s); }});
    b.push_back(bind("disentangle.shared_params", ssl.shared_disentangle));
    b.push_back({"ssl.variant", [this] { return to_string(ssl.variant); },
                 [this](const std::string& s) { ssl.variant = parse_variant(s); }});
    b.push_back(bind("ssl.k_region", ssl.k_region));
    b.push_back(bind("ssl.k_dis", ssl.k_dis));
    b.push_back(bind("ssl.head_hidden", ssl.head_hidden));
    b.push_back(bind("ssl.head_bottleneck", ssl.head_bottleneck));
    b.push_back(bind("ssl.temp_student", ssl.temp_student));
    b.push_back(bind("ssl.temp_teacher", ssl.temp_teacher));
    b.push_back(bind("ssl.center_momentum", ssl.center_momentum));
    b.push_back(bind("ssl.ema_start", ssl.ema_start));
    b.push_back(bind("ssl.ema_end", ssl.ema_end));
    b.push_back(bind("ssl.lambda1", ssl.lambda1));
    b.push_back(bind("ssl.lambda2", ssl.lambda2));
    b.push_back(bind("ssl.aux_cell_count", ssl.aux_cell_count));
    b.push_back(bind("ssl.aux_weight", ssl.aux_weight));
    b.push_back(bind("ssl.cell_classes", ssl.cell_classes));
    b.push_back(bind("optim.base_lr", optim.base_lr));
    b.push_back(bind("optim.min_lr", optim.min_lr));
    b.push_back(bind("optim.weight_decay", optim.weight_decay));
    b.push_back(bind("optim.beta1", optim.beta1));
    b.push_back(bind("optim.beta2", optim.beta2));
    b.push_back(bind("optim.eps", optim.eps));
    b.push_back(bind("optim.clip_grad", optim.clip_grad));
    b.push_back(bind("optim.batch_size", optim.batch_size));
    b.push_back(bind("optim.epochs", optim.epochs));
    b.push_back(bind("optim.warmup_epochs", optim.warmup_epochs));
    b.push_back(bind("optim.checkpoint_every", optim.checkpoint_every));
    b.push_back(bind("aug.crop_scale_min", aug.crop_scale_min));
    b.push_back(bind("aug.crop_scale_max", aug.crop_scale_max));
    b.push_back(bind("aug.ratio_min", aug.ratio_min));
    b.push_back(bind("aug.ratio_max", aug.ratio_max));
    b.push_back(bind("aug.flip_prob", aug.flip_prob));
    b.push_back(bind("aug.brightness", aug.brightness));
    b.push_back(bind("aug.contrast", aug.contrast));
    b.push_back(bind("mil.lr", mil.lr));
    b.push_back(bind("mil.weight_decay", mil.weight_decay));
    b.push_back(bind("mil.epochs", mil.epochs));
    b.push_back(bind("mil.query_dim", mil.query_dim));
    b.push_back(bind("mil.val_fraction", mil.val_fraction));
    b.push_back(bind("mil.test_fraction", mil.test_fraction));
    b.push_back(bind("mil.split_seed", mil.split_seed));
    b.push_back(bind("synth.image_size", synth.image_size));
    b.push_back(bind("synth.radius_min", synth.radius_min));
    b.push_back(bind("synth.radius_max", synth.radius_max));
    b.push_back(bind("synth.density", synth.density));
    b.push_back(bind("synth.clustering", synth.clustering));
    b.push_back(bind("synth.type_weights", synth.type_weights));
    b.push_back(bind("synth.texture_amplitude", synth.texture_amplitude));
    b.push_back(bind("synth.classes", synth.classes));
    b.push_back(bind("synth.cell_types", synth.cell_types));
    return b;
  }
};

}  // namespace dirl
