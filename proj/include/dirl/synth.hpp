#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "dirl/cell_prior.hpp"
#include "dirl/config.hpp"
#include "dirl/dataset.hpp"
#include "dirl/image.hpp"
#include "dirl/parallel.hpp"
#include "dirl/random.hpp"

namespace dirl {

struct SynthCrop {
  Tensor image;
  CentroidMap centroids;
};

namespace detail {

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

/// Value noise on a coarse lattice, smoothly interpolated; values in [0, 1].
inline std::vector<double> value_noise(int size, int cell, Rng& rng) {
  const int lattice = size / cell + 2;
  std::vector<double> knots(static_cast<std::size_t>(lattice * lattice));
  for (double& k : knots) k = rng.uniform();
  std::vector<double> out(static_cast<std::size_t>(size * size));
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) / cell;
      const double fy = static_cast<double>(y) / cell;
      const int x0 = static_cast<int>(fx);
      const int y0 = static_cast<int>(fy);
      const double tx = smoothstep(fx - x0);
      const double ty = smoothstep(fy - y0);
      auto at = [&](int i, int j) { return knots[static_cast<std::size_t>(j * lattice + i)]; };
      const double top = at(x0, y0) * (1 - tx) + at(x0 + 1, y0) * tx;
      const double bot = at(x0, y0 + 1) * (1 - tx) + at(x0 + 1, y0 + 1) * tx;
      out[static_cast<std::size_t>(y * size + x)] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

inline int sample_category(const std::vector<double>& weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = rng.uniform(0.0, total);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return static_cast<int>(i);
    u -= weights[i];
  }
  return static_cast<int>(weights.size()) - 1;
}

}  // namespace detail

/// Planted centroid positions: uniform when clustering is 0, otherwise Neyman-Scott clusters
/// with about count * (1 - clustering) parents and Gaussian offsets that tighten as the
/// clustering factor grows.
inline std::vector<std::pair<int, int>> sample_positions(int count, int size, double clustering, Rng& rng) {
  std::vector<std::pair<int, int>> out;
  if (clustering <= 0.0) {
    for (int i = 0; i < count; ++i) {
      const int x = static_cast<int>(rng.index(static_cast<std::size_t>(size)));
      const int y = static_cast<int>(rng.index(static_cast<std::size_t>(size)));
      out.emplace_back(x, y);
    }
    return out;
  }
  const int parents = std::max(1, static_cast<int>(std::lround(count * (1.0 - clustering))));
  std::vector<std::pair<double, double>> centers;
  for (int i = 0; i < parents; ++i) centers.emplace_back(rng.uniform(0.0, size), rng.uniform(0.0, size));
  const double sigma = std::max(1.0, size * (1.0 - clustering) / 4.0);
  for (int i = 0; i < count; ++i) {
    const auto& c = centers[rng.index(centers.size())];
    const double x = rng.normal(c.first, sigma);
    const double y = rng.normal(c.second, sigma);
    out.emplace_back(std::clamp(static_cast<int>(std::floor(x)), 0, size - 1),
                     std::clamp(static_cast<int>(std::floor(y)), 0, size - 1));
  }
  return out;
}

/// One crop of the given bag class: textured background with dark Gaussian blobs. Pixel
/// values are multiples of 1/255 so PNG storage is lossless.
inline SynthCrop generate_crop(const SynthConfig& cfg, int class_id, Rng& rng) {
  cfg.validate();
  if (class_id < 0 || class_id >= cfg.classes) throw ConfigError("class id " + std::to_string(class_id) + " out of range");
  const int S = cfg.image_size;
  const auto c = static_cast<std::size_t>(class_id);
  const std::vector<double> noise = detail::value_noise(S, std::max(2, S / 4), rng);
  std::vector<double> gray(noise.size());
  for (std::size_t i = 0; i < noise.size(); ++i) gray[i] = 0.8 + cfg.texture_amplitude * (2.0 * noise[i] - 1.0);

  const int count = std::max(1, rng.poisson(cfg.density[c]));
  SynthCrop out;
  out.centroids = CentroidMap{S, S, {}};
  for (const auto& [x, y] : sample_positions(count, S, cfg.clustering[c], rng)) {
    const int type = detail::sample_category(cfg.type_weights[c], rng);
    const double radius = rng.uniform(cfg.radius_min, cfg.radius_max);
    // darker nuclei for lower type ids
    const double depth = 0.6 - 0.3 * static_cast<double>(type) / std::max(1, cfg.cell_types - 1);
    const int reach = static_cast<int>(std::ceil(3.0 * radius));
    for (int py = std::max(0, y - reach); py <= std::min(S - 1, y + reach); ++py) {
      for (int px = std::max(0, x - reach); px <= std::min(S - 1, x + reach); ++px) {
        const double d2 = (px - x) * (px - x) + (py - y) * (py - y);
        gray[static_cast<std::size_t>(py * S + px)] -= depth * std::exp(-d2 / (2.0 * radius * radius));
      }
    }
    out.centroids.centroids.push_back({x, y, type});
  }
  out.image = Tensor({static_cast<std::size_t>(S), static_cast<std::size_t>(S), 3});
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double v = static_cast<double>(to_byte(gray[static_cast<std::size_t>(y * S + x)])) / 255.0;
      for (std::size_t ch = 0; ch < 3; ++ch) out.image(y, x, ch) = v;
    }
  }
  return out;
}

inline std::string bag_name(std::size_t index) {
  std::string s = std::to_string(index);
  return "bag" + std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

struct SynthSummary {
  std::size_t bags = 0;
  std::size_t crops = 0;
};

/// Writes crops/, centroids/ and manifest.csv under `root`. Refuses a non-empty directory
/// unless `force`, in which case only those entries are replaced.
inline SynthSummary generate_dataset(const SynthConfig& cfg, int crops_per_bag, int bags_per_class,
                                     const std::filesystem::path& root, bool force = false) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (crops_per_bag < 1 || bags_per_class < 1) throw ConfigError("crops per bag and bags per class must be at least 1");
  if (fs::exists(root) && !fs::is_directory(root)) throw IoError(root.string() + " exists and is not a directory");
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!force) throw IoError("output directory " + root.string() + " is not empty (use --force to overwrite)");
    fs::remove_all(root / "crops");
    fs::remove_all(root / "centroids");
    fs::remove(root / "manifest.csv");
  }
  std::vector<BagEntry> bags;
  for (int c = 0; c < cfg.classes; ++c)
    for (int b = 0; b < bags_per_class; ++b) bags.push_back({bag_name(bags.size()), c});
  for (const auto& bag : bags) {
    fs::create_directories(root / "crops" / bag.bag_id);
    fs::create_directories(root / "centroids" / bag.bag_id);
  }
  const std::size_t per = static_cast<std::size_t>(crops_per_bag);
  parallel_for(bags.size() * per, [&](std::size_t i) {
    const std::size_t b = i / per;
    const int idx = static_cast<int>(i % per);
    Rng rng(derive_seed(cfg.seed, {b, static_cast<std::uint64_t>(idx)}));
    const SynthCrop crop = generate_crop(cfg, bags[b].label, rng);
    write_png(crop_path(root, bags[b].bag_id, idx), crop.image);
    write_centroid_csv(centroid_path(root, bags[b].bag_id, idx), crop.centroids);
  });
  write_manifest(root / "manifest.csv", bags);
  return {bags.size(), bags.size() * per};
}

}  // namespace dirl
