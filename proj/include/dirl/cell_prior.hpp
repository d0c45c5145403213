#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dirl/error.hpp"

namespace dirl {

struct Centroid {
  int x = 0;
  int y = 0;
  int class_id = 0;

  friend bool operator==(const Centroid&, const Centroid&) = default;
};

/// Cell centroids of one crop, in integer pixel coordinates.
struct CentroidMap {
  int image_w = 0;
  int image_h = 0;
  std::vector<Centroid> centroids;

  void validate() const {
    if (image_w <= 0 || image_h <= 0) throw DataError("centroid map has non-positive image size");
    for (const auto& c : centroids) {
      if (c.x < 0 || c.x >= image_w || c.y < 0 || c.y >= image_h) {
        throw DataError("centroid (" + std::to_string(c.x) + "," + std::to_string(c.y) + ") outside " +
                        std::to_string(image_w) + "x" + std::to_string(image_h) + " image");
      }
      if (c.class_id < 0) throw DataError("negative centroid class id");
    }
  }

  friend bool operator==(const CentroidMap&, const CentroidMap&) = default;
};

/// Per-token binary prior: bit i is set iff patch i holds at least one centroid.
struct CellPrior {
  std::vector<std::uint8_t> bits;

  std::size_t size() const { return bits.size(); }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto b : bits) c += b;
    return c;
  }
  bool operator[](std::size_t i) const { return bits[i] != 0; }

  CellPrior complement() const {
    CellPrior out{bits};
    for (auto& b : out.bits) b = b ? 0 : 1;
    return out;
  }

  static CellPrior all(std::size_t n, bool value) { return CellPrior{std::vector<std::uint8_t>(n, value ? 1 : 0)}; }

  friend bool operator==(const CellPrior&, const CellPrior&) = default;
};

struct ClassPriorSet {
  std::vector<CellPrior> classes;
  CellPrior background;
};

struct CellCountTarget {
  std::vector<int> counts;
};

namespace detail {

inline void check_patch_grid(const CentroidMap& cm, int p) {
  if (p <= 0 || cm.image_w % p != 0 || cm.image_h % p != 0) {
    throw ConfigError("image size " + std::to_string(cm.image_w) + "x" + std::to_string(cm.image_h) +
                      " is not divisible by patch size " + std::to_string(p));
  }
}

inline std::size_t patch_index(const Centroid& c, int image_w, int p) {
  return static_cast<std::size_t>((c.y / p) * (image_w / p) + (c.x / p));
}

}  // namespace detail

inline std::size_t token_count(const CentroidMap& cm, int p) {
  detail::check_patch_grid(cm, p);
  return static_cast<std::size_t>((cm.image_w / p) * (cm.image_h / p));
}

inline CellCountTarget build_cell_counts(const CentroidMap& cm, int p) {
  const std::size_t n = token_count(cm, p);
  cm.validate();
  CellCountTarget out{std::vector<int>(n, 0)};
  for (const auto& c : cm.centroids) ++out.counts[detail::patch_index(c, cm.image_w, p)];
  return out;
}

inline CellPrior build_cell_prior(const CentroidMap& cm, int p) {
  const std::size_t n = token_count(cm, p);
  cm.validate();
  CellPrior out = CellPrior::all(n, false);
  for (const auto& c : cm.centroids) out.bits[detail::patch_index(c, cm.image_w, p)] = 1;
  return out;
}

/// One prior per cell class plus the background prior (tokens with no cell of any class).
inline ClassPriorSet build_class_priors(const CentroidMap& cm, int p, int num_classes) {
  if (num_classes < 1) throw ConfigError("cell class count must be at least 1");
  const std::size_t n = token_count(cm, p);
  cm.validate();
  ClassPriorSet out;
  out.classes.assign(static_cast<std::size_t>(num_classes), CellPrior::all(n, false));
  out.background = CellPrior::all(n, true);
  for (const auto& c : cm.centroids) {
    if (c.class_id >= num_classes) {
      throw DataError("centroid class id " + std::to_string(c.class_id) + " exceeds class count " +
                      std::to_string(num_classes));
    }
    const std::size_t i = detail::patch_index(c, cm.image_w, p);
    out.classes[static_cast<std::size_t>(c.class_id)].bits[i] = 1;
    out.background.bits[i] = 0;
  }
  return out;
}

struct CropRect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
};

/// Geometric part of an augmentation: crop, then resize to out_w x out_h, then optional
/// horizontal flip.
struct Geometry {
  CropRect crop;
  bool flip_h = false;
  int out_w = 0;
  int out_h = 0;

  static Geometry identity(int w, int h) { return Geometry{{0, 0, w, h}, false, w, h}; }
};

/// Maps a source pixel index through a resize with pixel-centre alignment, rounding half up.
inline int resize_coordinate(int x, int src_len, int dst_len) {
  const double mapped = (x + 0.5) * static_cast<double>(dst_len) / static_cast<double>(src_len) - 0.5;
  const int r = static_cast<int>(std::floor(mapped + 0.5));
  return std::clamp(r, 0, dst_len - 1);
}

inline CentroidMap transform_centroids(const CentroidMap& cm, const Geometry& geo) {
  const CropRect& r = geo.crop;
  if (r.width <= 0 || r.height <= 0) throw ConfigError("empty crop rectangle");
  if (r.x < 0 || r.y < 0 || r.x + r.width > cm.image_w || r.y + r.height > cm.image_h) {
    throw ConfigError("crop rectangle exceeds the " + std::to_string(cm.image_w) + "x" +
                      std::to_string(cm.image_h) + " image");
  }
  if (geo.out_w <= 0 || geo.out_h <= 0) throw ConfigError("non-positive resize target");
  CentroidMap out{geo.out_w, geo.out_h, {}};
  for (const auto& c : cm.centroids) {
    const int cx = c.x - r.x;
    const int cy = c.y - r.y;
    if (cx < 0 || cy < 0 || cx >= r.width || cy >= r.height) continue;
    int x = resize_coordinate(cx, r.width, geo.out_w);
    const int y = resize_coordinate(cy, r.height, geo.out_h);
    if (geo.flip_h) x = geo.out_w - 1 - x;
    out.centroids.push_back({x, y, c.class_id});
  }
  return out;
}

inline CentroidMap read_centroid_csv(const std::filesystem::path& path, int image_w, int image_h) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open centroid file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "x,y,class_id") throw DataError(path.string() + ": expected header 'x,y,class_id', got '" + line + "'");
  CentroidMap cm{image_w, image_h, {}};
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream row(line);
    Centroid c;
    char comma1 = 0;
    char comma2 = 0;
    if (!(row >> c.x >> comma1 >> c.y >> comma2 >> c.class_id) || comma1 != ',' || comma2 != ',') {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed row '" + line + "'");
    }
    cm.centroids.push_back(c);
  }
  cm.validate();
  return cm;
}

inline void write_centroid_csv(const std::filesystem::path& path, const CentroidMap& cm) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write centroid file " + path.string());
  out << "x,y,class_id\n";
  for (const auto& c : cm.centroids) out << c.x << ',' << c.y << ',' << c.class_id << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace dirl
