#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dirl/disentangle.hpp"
#include "dirl/encoder.hpp"
#include "dirl/image.hpp"

namespace dirl {

/// Column sums of a head-averaged attention matrix.
struct AggregatedAttention {
  std::vector<double> values;

  double total() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
};

struct SparsityProfile {
  double low = 0.0;      // [0, 0.5)
  double desired = 0.0;  // [0.5, 2]
  double high = 0.0;     // (2, inf)
  std::size_t count = 0;
};

inline Tensor average_heads(std::span<const Tensor> heads) {
  if (heads.empty()) throw DimensionError("no attention heads to average");
  Tensor out(heads[0].shape());
  for (const auto& h : heads) out += h;
  out *= 1.0 / static_cast<double>(heads.size());
  return out;
}

inline std::vector<double> column_sums(const Tensor& a) {
  std::vector<double> out(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += a(i, j);
  return out;
}

inline AggregatedAttention aggregate_heads(std::span<const Tensor> heads) { return {column_sums(average_heads(heads))}; }

inline AggregatedAttention aggregate_attention(const AttentionRecord& record, std::size_t layer) {
  if (layer >= record.layers.size()) {
    throw IndexError("attention layer " + std::to_string(layer) + " out of range (" + std::to_string(record.layers.size()) +
                     " layers)");
  }
  return aggregate_heads(record.layers[layer]);
}

inline SparsityProfile bin_profile(std::span<const double> values) {
  if (values.empty()) throw DataError("bin_profile needs at least one value");
  std::size_t lo = 0, mid = 0, hi = 0;
  for (double v : values) {
    if (!(v >= 0.0)) throw DataError("aggregated attention must be non-negative, got " + std::to_string(v));
    if (v < 0.5)
      ++lo;
    else if (v <= 2.0)
      ++mid;
    else
      ++hi;
  }
  const double n = static_cast<double>(values.size());
  return {static_cast<double>(lo) / n, static_cast<double>(mid) / n, static_cast<double>(hi) / n, values.size()};
}

enum class MapKind { agg, c, b, cc, bb, cb, bc };

inline MapKind parse_map_kind(const std::string& s) {
  if (s == "agg") return MapKind::agg;
  if (s == "c") return MapKind::c;
  if (s == "b") return MapKind::b;
  if (s == "cc") return MapKind::cc;
  if (s == "bb") return MapKind::bb;
  if (s == "cb") return MapKind::cb;
  if (s == "bc") return MapKind::bc;
  throw ConfigError("unknown attention map '" + s + "' (expected agg|c|b|cc|bb|cb|bc)");
}

inline std::string to_string(MapKind k) {
  switch (k) {
    case MapKind::agg: return "agg";
    case MapKind::c: return "c";
    case MapKind::b: return "b";
    case MapKind::cc: return "cc";
    case MapKind::bb: return "bb";
    case MapKind::cb: return "cb";
    case MapKind::bc: return "bc";
  }
  return "?";
}

inline bool needs_disentangle(MapKind k) { return k == MapKind::cc || k == MapKind::bb || k == MapKind::cb || k == MapKind::bc; }

/// Rows of `attention` selected by `rows`, summed down the columns and scaled by n / r, so
/// uniform attention maps to 1 everywhere.
inline std::vector<double> representation_attention(const Tensor& attention, const CellPrior& rows) {
  const std::size_t n = attention.rows();
  if (attention.rank() != 2 || attention.cols() != n) throw DimensionError("attention must be square, got " + shape_str(attention.shape()));
  if (rows.size() != n) throw DimensionError("prior length " + std::to_string(rows.size()) + " does not match " + std::to_string(n) + " tokens");
  const std::size_t r = rows.count();
  if (r == 0) throw DataError("attention map is absent: the selected region has no tokens");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!rows[i]) continue;
    for (std::size_t j = 0; j < n; ++j) out[j] += attention(i, j);
  }
  const double s = static_cast<double>(n) / static_cast<double>(r);
  for (double& v : out) v *= s;
  return out;
}

/// Attention map of one representation member for one encoded crop. Region maps use the
/// encoder layer; disentangled maps recompute the disentangle block's masked attention.
inline std::vector<double> representation_map(const EncodeResult& enc, const CellPrior& prior, MapKind kind,
                                              std::size_t layer, const EncoderConfig& cfg,
                                              const DisentangleParams* disentangle = nullptr) {
  if (kind == MapKind::agg) return aggregate_attention(enc.record, layer).values;
  if (!needs_disentangle(kind)) {
    if (layer >= enc.record.layers.size()) throw IndexError("attention layer " + std::to_string(layer) + " out of range");
    const Tensor a = average_heads(enc.record.layers[layer]);
    return representation_attention(a, kind == MapKind::c ? prior : prior.complement());
  }
  if (!disentangle) throw CheckpointError("map '" + to_string(kind) + "' needs disentangle block parameters");
  const AttentionMaskPair masks = build_masks(prior);
  const bool self_path = kind == MapKind::cc || kind == MapKind::bb;
  const std::vector<Tensor> heads = disentangle_attention(enc.tokens, self_path ? masks.m_self : masks.m_cross,
                                                          self_path ? disentangle->self_block : disentangle->cross(), cfg);
  const bool cell_rows = kind == MapKind::cc || kind == MapKind::cb;
  return representation_attention(average_heads(heads), cell_rows ? prior : prior.complement());
}

inline std::string format_exact(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Map laid out on the token grid, one grid row per line, shortest round-trip formatting.
inline void write_map_csv(const std::filesystem::path& path, std::span<const double> map, std::size_t grid_w) {
  if (grid_w == 0 || map.size() % grid_w != 0) throw DimensionError("map length does not fit the token grid");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t i = 0; i < map.size(); ++i) out << format_exact(map[i]) << ((i + 1) % grid_w == 0 ? "\n" : ",");
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::vector<double> read_map_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<double> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) {
      double v = 0.0;
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) throw DataError(path.string() + ": bad value '" + cell + "'");
      out.push_back(v);
    }
  }
  return out;
}

/// Red overlay with alpha 0.5 * clip(map, 0, 1) over the grayscale crop; nearest-neighbour
/// upsampling from the token grid.
inline Tensor render_overlay(const Tensor& image, std::span<const double> map, std::size_t patch) {
  require_image(image);
  const std::size_t H = image_height(image);
  const std::size_t W = image_width(image);
  if (patch == 0 || H % patch != 0 || W % patch != 0 || (H / patch) * (W / patch) != map.size()) {
    throw DimensionError("map of length " + std::to_string(map.size()) + " does not match the token grid of " +
                         shape_str(image.shape()));
  }
  const Tensor gray = to_grayscale(image);
  const std::size_t gw = W / patch;
  Tensor out(image.shape());
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double alpha = 0.5 * std::clamp(map[(y / patch) * gw + x / patch], 0.0, 1.0);
      const double g = gray(y, x);
      out(y, x, 0) = (1.0 - alpha) * g + alpha;
      out(y, x, 1) = (1.0 - alpha) * g;
      out(y, x, 2) = (1.0 - alpha) * g;
    }
  }
  return out;
}

/// Writes <stem>.png (overlay) and <stem>.csv (raw map).
inline void export_overlay(const Tensor& image, std::span<const double> map, std::size_t patch,
                           const std::filesystem::path& stem) {
  const Tensor overlay = render_overlay(image, map, patch);
  std::filesystem::path png = stem;
  png += ".png";
  std::filesystem::path csv = stem;
  csv += ".csv";
  write_png(png, overlay);
  write_map_csv(csv, map, image_width(image) / patch);
}

}  // namespace dirl
