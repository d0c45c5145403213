#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dirl/cell_prior.hpp"
#include "dirl/image.hpp"
#include "dirl/parallel.hpp"

namespace dirl {

struct BagEntry {
  std::string bag_id;
  int label = 0;

  friend bool operator==(const BagEntry&, const BagEntry&) = default;
};

struct CropSample {
  std::string bag_id;
  int index = 0;
  Tensor image;
  CentroidMap centroids;
};

/// Crop dataset on disk: crops/<bag_id>/<idx>.png, centroids/<bag_id>/<idx>.csv, manifest.csv.
struct Dataset {
  std::filesystem::path root;
  std::vector<BagEntry> bags;
  std::vector<CropSample> crops;
};

inline std::vector<BagEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty manifest");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "bag_id,label") throw DataError(path.string() + ": expected header 'bag_id,label', got '" + line + "'");
  std::vector<BagEntry> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || comma == 0) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed row '" + line + "'");
    }
    BagEntry e;
    e.bag_id = line.substr(0, comma);
    try {
      std::size_t used = 0;
      e.label = std::stoi(line.substr(comma + 1), &used);
      if (used != line.size() - comma - 1 || e.label < 0) throw std::invalid_argument("label");
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": label must be a non-negative integer");
    }
    out.push_back(std::move(e));
  }
  if (out.empty()) throw DataError(path.string() + ": manifest lists no bags");
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<BagEntry>& bags) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << "bag_id,label\n";
  for (const auto& b : bags) out << b.bag_id << ',' << b.label << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

/// Crop indices of a bag directory, ascending.
inline std::vector<int> list_crop_indices(const std::filesystem::path& bag_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(bag_dir)) throw IoError("missing crop directory " + bag_dir.string());
  std::vector<int> out;
  for (const auto& e : fs::directory_iterator(bag_dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".png") continue;
    const std::string stem = e.path().stem().string();
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      throw DataError("unexpected crop file name " + e.path().string());
    }
    out.push_back(std::stoi(stem));
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::filesystem::path crop_path(const std::filesystem::path& root, const std::string& bag, int idx) {
  return root / "crops" / bag / (std::to_string(idx) + ".png");
}

inline std::filesystem::path centroid_path(const std::filesystem::path& root, const std::string& bag, int idx) {
  return root / "centroids" / bag / (std::to_string(idx) + ".csv");
}

/// Loads every crop listed under the manifest's bags, in manifest then index order.
inline Dataset load_dataset(const std::filesystem::path& root, bool with_centroids = true) {
  Dataset ds;
  ds.root = root;
  ds.bags = read_manifest(root / "manifest.csv");
  for (const auto& bag : ds.bags) {
    for (int idx : list_crop_indices(root / "crops" / bag.bag_id)) ds.crops.push_back({bag.bag_id, idx, Tensor{}, CentroidMap{}});
  }
  if (ds.crops.empty()) throw DataError(root.string() + ": dataset contains no crops");
  parallel_for(ds.crops.size(), [&](std::size_t i) {
    CropSample& c = ds.crops[i];
    c.image = read_png(crop_path(root, c.bag_id, c.index));
    const int w = static_cast<int>(image_width(c.image));
    const int h = static_cast<int>(image_height(c.image));
    c.centroids = with_centroids ? read_centroid_csv(centroid_path(root, c.bag_id, c.index), w, h) : CentroidMap{w, h, {}};
  });
  return ds;
}

}  // namespace dirl
