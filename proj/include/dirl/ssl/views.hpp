#pragma once

#include <array>
#include <cmath>

#include "dirl/config.hpp"
#include "dirl/image.hpp"
#include "dirl/random.hpp"
#include "dirl/ssl/model.hpp"

namespace dirl {

struct View {
  Tensor image;
  CentroidMap centroids;
  CellPrior prior;
  ClassPriorSet class_priors;
  CellCountTarget counts;
  Geometry geometry;
  double brightness = 1.0;
  double contrast = 1.0;
};

struct ViewPair {
  std::array<View, 2> views;
};

/// Random resized crop rectangle: area fraction in [scale_min, scale_max], log-uniform
/// aspect ratio; falls back to the full image after 10 rejected draws.
inline CropRect sample_crop(int w, int h, const AugConfig& aug, Rng& rng) {
  const double area = static_cast<double>(w) * h;
  if (aug.crop_scale_min == 1.0 && aug.crop_scale_max == 1.0 && aug.ratio_min == 1.0 && aug.ratio_max == 1.0) {
    return {0, 0, w, h};
  }
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(aug.crop_scale_min, aug.crop_scale_max);
    const double log_r = rng.uniform(std::log(aug.ratio_min), std::log(aug.ratio_max));
    const double ratio = std::exp(log_r);
    const int cw = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int ch = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (cw < 1 || ch < 1 || cw > w || ch > h) continue;
    const int x = static_cast<int>(rng.index(static_cast<std::size_t>(w - cw + 1)));
    const int y = static_cast<int>(rng.index(static_cast<std::size_t>(h - ch + 1)));
    return {x, y, cw, ch};
  }
  return {0, 0, w, h};
}

inline View make_view(const Tensor& image, const CentroidMap& cm, const Geometry& geo, double brightness, double contrast,
                      int patch, int cell_classes) {
  View v;
  v.geometry = geo;
  v.brightness = brightness;
  v.contrast = contrast;
  v.image = apply_geometry(image, geo);
  if (brightness != 1.0 || contrast != 1.0) v.image = jitter_photometric(v.image, brightness, contrast);
  v.centroids = transform_centroids(cm, geo);
  v.prior = build_cell_prior(v.centroids, patch);
  v.class_priors = build_class_priors(v.centroids, patch, cell_classes);
  v.counts = build_cell_counts(v.centroids, patch);
  return v;
}

/// Two independent augmentations of the same crop. Geometry is mirrored onto the centroids;
/// brightness and contrast only touch the image.
inline ViewPair make_views(const Tensor& image, const CentroidMap& cm, const AugConfig& aug, int patch, int cell_classes,
                           Rng& rng) {
  require_image(image);
  const int w = static_cast<int>(image_width(image));
  const int h = static_cast<int>(image_height(image));
  if (cm.image_w != w || cm.image_h != h) throw DimensionError("centroid map size does not match the image");
  if (patch <= 0 || w % patch != 0 || h % patch != 0) {
    throw ConfigError("view size " + std::to_string(w) + "x" + std::to_string(h) + " is not divisible by patch size " +
                      std::to_string(patch));
  }
  ViewPair pair;
  for (auto& v : pair.views) {
    Geometry geo{sample_crop(w, h, aug, rng), false, w, h};
    geo.flip_h = aug.flip_prob > 0.0 && rng.bernoulli(aug.flip_prob);
    const double b = aug.brightness > 0.0 ? rng.uniform(1.0 - aug.brightness, 1.0 + aug.brightness) : 1.0;
    const double c = aug.contrast > 0.0 ? rng.uniform(1.0 - aug.contrast, 1.0 + aug.contrast) : 1.0;
    v = make_view(image, cm, geo, b, c, patch, cell_classes);
  }
  return pair;
}

/// Stacks both views of every pair: rows for view 0 of all samples first, then view 1.
inline BranchInput stack_views(std::span<const ViewPair> pairs, const EncoderConfig& enc) {
  BranchInput in;
  const std::size_t B = pairs.size();
  in.batch = 2 * B;
  std::vector<Tensor> images;
  images.reserve(2 * B);
  for (int v = 0; v < 2; ++v) {
    for (const auto& p : pairs) {
      images.push_back(p.views[static_cast<std::size_t>(v)].image);
      in.priors.push_back(p.views[static_cast<std::size_t>(v)].prior);
      in.class_priors.push_back(p.views[static_cast<std::size_t>(v)].class_priors);
      in.counts.push_back(p.views[static_cast<std::size_t>(v)].counts);
    }
  }
  in.patches = stack_patches(images, enc);
  return in;
}

}  // namespace dirl
