#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "dirl/attention_analysis.hpp"
#include "test_util.hpp"

using namespace dirl;
using namespace dirl::testing;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "dirl_test_attention";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(BinProfile, Boundaries) {
  const std::vector<double> v{0.0, 0.4999, 0.5, 1.0, 2.0, std::nextafter(2.0, 3.0), 7.0, 0.25};
  const SparsityProfile p = bin_profile(v);
  EXPECT_EQ(p.count, 8u);
  EXPECT_DOUBLE_EQ(p.low, 3.0 / 8.0);
  EXPECT_DOUBLE_EQ(p.desired, 3.0 / 8.0);
  EXPECT_DOUBLE_EQ(p.high, 2.0 / 8.0);
}

TEST(BinProfile, InvalidInput) {
  EXPECT_THROW(bin_profile(std::vector<double>{}), DataError);
  EXPECT_THROW(bin_profile(std::vector<double>{1.0, -0.1}), DataError);
  EXPECT_THROW(bin_profile(std::vector<double>{std::numeric_limits<double>::quiet_NaN()}), DataError);
}

TEST(Aggregate, ColumnSumsOfHeadAverage) {
  Rng rng(1);
  std::vector<Tensor> heads{random_attention(rng, 5), random_attention(rng, 5), random_attention(rng, 5)};
  const AggregatedAttention a = aggregate_heads(heads);
  for (std::size_t j = 0; j < 5; ++j) {
    double s = 0.0;
    for (const auto& h : heads)
      for (std::size_t i = 0; i < 5; ++i) s += h(i, j) / 3.0;
    EXPECT_NEAR(a.values[j], s, 1e-14);
  }
  EXPECT_NEAR(a.total(), 5.0, 1e-12);
  EXPECT_THROW(average_heads(std::vector<Tensor>{}), DimensionError);
}

TEST(Aggregate, UniformAttentionIsAllOnes) {
  std::vector<Tensor> heads{Tensor({4, 4}, 0.25)};
  const AggregatedAttention a = aggregate_heads(heads);
  for (double v : a.values) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_DOUBLE_EQ(bin_profile(a.values).desired, 1.0);
}

TEST(Aggregate, EncodeTotalsEqualTokenCount) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    EncoderConfig cfg;
    cfg.init_std = 0.02 + 0.1 * trial;
    const EncoderParams p = EncoderParams::init(cfg, rng);
    const EncodeResult r = encode(random_image(rng, 32, 32), p, cfg);
    for (std::size_t l = 0; l < r.record.layers.size(); ++l) EXPECT_NEAR(aggregate_attention(r.record, l).total(), 16.0, 1e-4);
    EXPECT_THROW(aggregate_attention(r.record, 3), IndexError);
  }
}

TEST(RepresentationAttention, ScalesSelectedRows) {
  const Tensor a = Tensor::matrix(3, 3, {0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.1, 0.1, 0.8});
  const std::vector<double> m = representation_attention(a, CellPrior{{1, 0, 1}});
  EXPECT_NEAR(m[0], 1.5 * 0.3, 1e-15);
  EXPECT_NEAR(m[1], 1.5 * 0.4, 1e-15);
  EXPECT_NEAR(m[2], 1.5 * 1.3, 1e-15);
  const std::vector<double> u = representation_attention(Tensor({4, 4}, 0.25), CellPrior{{0, 1, 0, 0}});
  for (double v : u) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_THROW(representation_attention(a, CellPrior{{0, 0, 0}}), DataError);
  EXPECT_THROW(representation_attention(a, CellPrior{{1, 0}}), DimensionError);
}

TEST(MapKinds, ParseRoundTrip) {
  for (const char* s : {"agg", "c", "b", "cc", "bb", "cb", "bc"}) EXPECT_EQ(to_string(parse_map_kind(s)), s);
  EXPECT_THROW(parse_map_kind("cell"), ConfigError);
  EXPECT_FALSE(needs_disentangle(MapKind::c));
  EXPECT_TRUE(needs_disentangle(MapKind::bc));
}

TEST(RepresentationMap, RegionAndDisentangledMaps) {
  Rng rng(3);
  EncoderConfig cfg;
  cfg.init_std = 0.3;
  const EncoderParams p = EncoderParams::init(cfg, rng);
  const DisentangleParams d = DisentangleParams::init(cfg, rng, false);
  const EncodeResult r = encode(random_image(rng, 32, 32), p, cfg);
  CellPrior prior = CellPrior::all(16, false);
  for (std::size_t i : {0u, 5u, 6u, 11u}) prior.bits[i] = 1;

  const Tensor last = average_heads(r.record.layers[2]);
  EXPECT_EQ(representation_map(r, prior, MapKind::agg, 2, cfg), column_sums(last));
  EXPECT_EQ(representation_map(r, prior, MapKind::c, 2, cfg), representation_attention(last, prior));
  EXPECT_EQ(representation_map(r, prior, MapKind::b, 1, cfg),
            representation_attention(average_heads(r.record.layers[1]), prior.complement()));

  const AttentionMaskPair masks = build_masks(prior);
  const Tensor self_avg = average_heads(disentangle_attention(r.tokens, masks.m_self, d.self_block, cfg));
  const Tensor cross_avg = average_heads(disentangle_attention(r.tokens, masks.m_cross, d.cross_block, cfg));
  EXPECT_EQ(representation_map(r, prior, MapKind::cc, 2, cfg, &d), representation_attention(self_avg, prior));
  EXPECT_EQ(representation_map(r, prior, MapKind::bb, 2, cfg, &d), representation_attention(self_avg, prior.complement()));
  EXPECT_EQ(representation_map(r, prior, MapKind::cb, 2, cfg, &d), representation_attention(cross_avg, prior));
  EXPECT_EQ(representation_map(r, prior, MapKind::bc, 2, cfg, &d), representation_attention(cross_avg, prior.complement()));

  // the cell-to-cell map only places mass on cell columns
  const auto cc = representation_map(r, prior, MapKind::cc, 2, cfg, &d);
  double total = 0.0;
  for (std::size_t j = 0; j < 16; ++j) {
    if (!prior[j]) EXPECT_EQ(cc[j], 0.0);
    total += cc[j];
  }
  EXPECT_NEAR(total, 16.0, 1e-12);

  EXPECT_THROW(representation_map(r, prior, MapKind::cc, 2, cfg), CheckpointError);
  EXPECT_THROW(representation_map(r, prior, MapKind::c, 3, cfg), IndexError);
  EXPECT_THROW(representation_map(r, CellPrior::all(16, false), MapKind::c, 2, cfg), DataError);
}

TEST(MapCsv, RoundTripIsExact) {
  Rng rng(4);
  std::vector<double> map;
  for (int i = 0; i < 16; ++i) map.push_back(std::exp(rng.normal(0.0, 5.0)));
  map[3] = 0.0;
  map[7] = std::numeric_limits<double>::denorm_min();
  map[9] = 0.1;
  const auto path = scratch("map.csv");
  write_map_csv(path, map, 4);
  EXPECT_EQ(read_map_csv(path), map);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 4);
  EXPECT_THROW(write_map_csv(path, map, 5), DimensionError);
}

TEST(MapCsv, BadValueRejected) {
  const auto path = scratch("bad.csv");
  {
    std::ofstream out(path);
    out << "1.0,abc\n";
  }
  EXPECT_THROW(read_map_csv(path), DataError);
  EXPECT_THROW(read_map_csv(scratch("missing.csv")), IoError);
}

TEST(Overlay, BlendsRedOverGray) {
  Tensor img({16, 16, 3});
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x)
      for (std::size_t c = 0; c < 3; ++c) img(y, x, c) = 0.4;
  const std::vector<double> map{0.0, 1.0, 3.0, -1.0};
  const Tensor out = render_overlay(img, map, 8);
  const double g = 0.4;  // grayscale of a neutral pixel
  EXPECT_NEAR(out(0, 0, 0), g, 1e-12);
  EXPECT_NEAR(out(0, 0, 1), g, 1e-12);
  EXPECT_NEAR(out(3, 12, 0), 0.5 * g + 0.5, 1e-12);
  EXPECT_NEAR(out(3, 12, 1), 0.5 * g, 1e-12);
  EXPECT_NEAR(out(12, 2, 0), 0.5 * g + 0.5, 1e-12);  // clipped to 1
  EXPECT_NEAR(out(12, 12, 2), g, 1e-12);             // clipped to 0
  EXPECT_THROW(render_overlay(img, std::vector<double>{1.0, 2.0}, 8), DimensionError);
}

TEST(Overlay, ExportWritesPngAndCsv) {
  Rng rng(5);
  const Tensor img = random_image(rng, 32, 32);
  std::vector<double> map(16);
  for (double& v : map) v = rng.uniform(0.0, 3.0);
  const auto stem = scratch("overlay_0001");
  export_overlay(img, map, 8, stem);
  const Tensor png = read_png(stem.string() + ".png");
  EXPECT_EQ(png.shape(), img.shape());
  const Tensor expected = render_overlay(img, map, 8);
  for (std::size_t i = 0; i < png.size(); ++i) ASSERT_EQ(png[i], to_byte(expected[i]) / 255.0);
  EXPECT_EQ(read_map_csv(stem.string() + ".csv"), map);
}
