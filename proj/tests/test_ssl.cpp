#include <gtest/gtest.h>

#include <cmath>

#include "dirl/ssl/train.hpp"
#include "dirl/ssl/views.hpp"
#include "test_util.hpp"

using namespace dirl;
using namespace dirl::testing;

namespace {

double scalar_softmax_ce(const std::vector<double>& t, double tt, const std::vector<double>& s, double ts,
                         const std::vector<double>& c) {
  // teacher: softmax((t - c) / tt); student: log softmax(s / ts)
  std::vector<double> pt(t.size()), ls(s.size());
  double zt = 0.0, zs = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) zt += std::exp((t[k] - c[k]) / tt);
  for (std::size_t k = 0; k < s.size(); ++k) zs += std::exp(s[k] / ts);
  double ce = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) ce -= std::exp((t[k] - c[k]) / tt) / zt * (s[k] / ts - std::log(zs));
  return ce;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Toy configuration: 4x4 images, 2x2 patches (n = 4), d = 8, two blocks, K = 7.
Config toy_config(Variant v) {
  Config cfg;
  cfg.encoder.patch = 2;
  cfg.encoder.image_size = 4;
  cfg.encoder.dim = 8;
  cfg.encoder.depth = 2;
  cfg.encoder.heads = 2;
  cfg.encoder.init_std = 0.3;
  cfg.ssl.variant = v;
  cfg.ssl.k_region = 7;
  cfg.ssl.k_dis = 7;
  cfg.ssl.head_hidden = 8;
  cfg.ssl.head_bottleneck = 4;
  cfg.optim.batch_size = 2;
  return cfg;
}

std::vector<ViewPair> toy_pairs(Rng& rng, std::size_t count, const AugConfig& aug) {
  std::vector<ViewPair> pairs;
  for (std::size_t i = 0; i < count; ++i) {
    CentroidMap cm{4, 4, {{0, 0, 0}, {3, 1, 1}}};
    if (i % 2 == 1) cm.centroids.push_back({1, 3, 0});
    pairs.push_back(make_views(random_image(rng, 4, 4), cm, aug, 2, 2, rng));
  }
  return pairs;
}

RepresentationSet random_reps(Rng& rng, Variant v, std::size_t d, int J) {
  RepresentationSet r;
  for (const auto& t : variant_terms(v, J)) r.members[t] = random_tensor(rng, {d});
  return r;
}

}  // namespace

TEST(SharpenAndCenter, Examples) {
  const Tensor p = sharpen_and_center(Tensor({2}), 1.0);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  Rng rng(1);
  const Tensor logits = random_tensor(rng, {6});
  const Tensor u = sharpen_and_center(logits, 0.04, &logits);
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 6.0, 1e-15);
  EXPECT_THROW(sharpen_and_center(logits, 0.0), ConfigError);
  EXPECT_THROW(sharpen_and_center(logits, -1.0), ConfigError);
}

TEST(SharpenAndCenter, MatchesScalarOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor(rng, {9});
    const Tensor center = random_tensor(rng, {9}, 0.3);
    const Tensor p = sharpen_and_center(logits, 0.07, &center);
    double z = 0.0;
    for (std::size_t k = 0; k < 9; ++k) z += std::exp((logits[k] - center[k]) / 0.07);
    for (std::size_t k = 0; k < 9; ++k) EXPECT_NEAR(p[k], std::exp((logits[k] - center[k]) / 0.07) / z, 1e-14);
  }
}

TEST(DinoPairLoss, IdenticalDistributionsGiveEntropy) {
  Rng rng(3);
  const Tensor l = random_tensor(rng, {5});
  const Temperatures temps{0.5, 0.5};
  const Tensor zero({5});
  const double loss = dino_pair_loss({l, l}, {l, l}, temps, &zero);
  const Tensor p = sharpen_and_center(l, 0.5);
  double h = 0.0;
  for (double v : p.data()) h -= v * std::log(v);
  EXPECT_NEAR(loss, h, 1e-14);
  EXPECT_GE(loss, 0.0);
}

TEST(DinoPairLoss, SharpTeacherPicksArgmax) {
  const Tensor t = Tensor({4}, std::vector<double>{0.1, 0.9, 0.3, 0.2});
  const Tensor s = Tensor({4}, std::vector<double>{0.5, -0.2, 0.1, 0.4});
  const double loss = dino_pair_loss({s, s}, {t, t}, Temperatures{0.1, 1e-3}, nullptr);
  double z = 0.0;
  for (double v : s.data()) z += std::exp(v / 0.1);
  EXPECT_NEAR(loss, -(s[1] / 0.1 - std::log(z)), 1e-9);
}

TEST(DinoPairLoss, MatchesScalarOracleAndCrossesViews) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::array<Tensor, 2> s{random_tensor(rng, {5}), random_tensor(rng, {5})};
    std::array<Tensor, 2> t{random_tensor(rng, {5}), random_tensor(rng, {5})};
    const Tensor c = random_tensor(rng, {5}, 0.2);
    const double loss = dino_pair_loss(s, t, Temperatures{0.1, 0.04}, &c);
    const double oracle = 0.5 * (scalar_softmax_ce(values(t[0]), 0.04, values(s[1]), 0.1, values(c)) +
                                 scalar_softmax_ce(values(t[1]), 0.04, values(s[0]), 0.1, values(c)));
    EXPECT_NEAR(loss, oracle, 1e-12);
    EXPECT_GE(loss, 0.0);
  }
}

TEST(CompositeLoss, WeightingArithmetic) {
  const LossWeights w{0.5, 0.025, 1.0};
  std::map<std::string, double> ones;
  for (const auto& t : variant_terms(Variant::dirl, 2)) ones[t] = 1.0;
  const CompositeReport r = combine_terms(Variant::dirl, w, 2, ones);
  EXPECT_NEAR(r.total, 1.1, 1e-12);
  EXPECT_EQ(r.skipped, 0u);
  EXPECT_EQ(r.terms.size(), 6u);
}

TEST(CompositeLoss, TruthTable) {
  const LossWeights w{0.5, 0.025, 1.0};
  const std::map<std::string, double> L{{"image", 2.0}, {"cell", 3.0},   {"back", 5.0},  {"cc", 7.0},  {"bb", 11.0},
                                        {"cb", 13.0},   {"bc", 17.0},    {"class0", 19.0}, {"class1", 23.0}};
  EXPECT_DOUBLE_EQ(combine_terms(Variant::baseline, w, 2, L).total, 2.0);
  EXPECT_DOUBLE_EQ(combine_terms(Variant::cellback, w, 2, L).total, 0.5 * 3.0 + 0.5 * 5.0);
  EXPECT_DOUBLE_EQ(combine_terms(Variant::cellback_v2, w, 2, L).total, (2.0 + 19.0 + 23.0 + 5.0) / 4.0);
  EXPECT_DOUBLE_EQ(combine_terms(Variant::dirl, w, 2, L).total,
                   0.5 * (3.0 + 5.0) + 0.025 * (7.0 + 11.0 + 13.0 + 17.0));
  EXPECT_EQ(variant_terms(Variant::cellback_v2, 5).size(), 7u);
  EXPECT_DOUBLE_EQ(term_weight(Variant::cellback_v2, "image", w, 5), 1.0 / 7.0);

  // view without cells: c, cc, cb are skipped and nothing is reweighted
  std::map<std::string, double> no_cells{{"back", 5.0}, {"bb", 11.0}, {"bc", 17.0}};
  const CompositeReport r = combine_terms(Variant::dirl, w, 2, no_cells);
  EXPECT_DOUBLE_EQ(r.total, 0.5 * 5.0 + 0.025 * (11.0 + 17.0));
  EXPECT_EQ(r.skipped, 3u);
  for (const auto& t : r.terms) EXPECT_EQ(t.loss.has_value(), no_cells.count(t.term) == 1) << t.term;

  EXPECT_THROW(combine_terms(Variant::dirl, w, 2, {}), NoSignalError);
  EXPECT_THROW(combine_terms(Variant::baseline, w, 2, {{"cell", 1.0}}), NoSignalError);
}

TEST(CompositeLoss, DirlWithoutDisentangledWeightEqualsCellback) {
  Config cfg = toy_config(Variant::dirl);
  Rng rng(5);
  const DirlModel m = init_model(cfg, rng);
  std::array<RepresentationSet, 2> s{random_reps(rng, Variant::dirl, 8, 2), random_reps(rng, Variant::dirl, 8, 2)};
  std::array<RepresentationSet, 2> t{random_reps(rng, Variant::dirl, 8, 2), random_reps(rng, Variant::dirl, 8, 2)};
  std::map<std::string, Tensor> centers;
  for (const auto& [name, h] : m.heads) centers[name] = random_tensor(rng, {h.out_dim()}, 0.1);
  const LossWeights w0{0.5, 0.0, 1.0};
  const Temperatures temps;
  const double dirl = composite_loss(s, t, m.heads, m.heads, centers, w0, temps, Variant::dirl, 2).total;
  const double cb = composite_loss(s, t, m.heads, m.heads, centers, w0, temps, Variant::cellback, 2).total;
  EXPECT_EQ(dirl, cb);
  EXPECT_GT(dirl, 0.0);
}

TEST(CompositeLoss, MissingRegionSkipsTerms) {
  Config cfg = toy_config(Variant::dirl);
  Rng rng(6);
  const DirlModel m = init_model(cfg, rng);
  const Tensor img = random_image(rng, 4, 4);
  const CentroidMap none{4, 4, {}};
  const CentroidMap some{4, 4, {{1, 1, 0}}};
  const RepresentationSet empty = representations(m, cfg.encoder, img, none, Variant::dirl, 2);
  const RepresentationSet full = representations(m, cfg.encoder, img, some, Variant::dirl, 2);
  EXPECT_FALSE(empty.has("cell"));
  EXPECT_FALSE(empty.has("cc"));
  EXPECT_FALSE(empty.has("cb"));
  EXPECT_TRUE(empty.has("back"));
  EXPECT_EQ(full.members.size(), 6u);
  std::map<std::string, Tensor> centers;
  const CompositeReport r =
      composite_loss({full, empty}, {full, full}, m.heads, m.heads, centers, LossWeights{}, Temperatures{}, Variant::dirl, 2);
  EXPECT_EQ(r.skipped, 3u);
}

TEST(AuxLoss, Examples) {
  AuxHead head{Tensor({2, 1}), Tensor({1})};
  const TokenMatrix t{Tensor({4, 2}), 3};
  EXPECT_DOUBLE_EQ(aux_cell_count_loss(t, CellCountTarget{{0, 0, 1, 1}}, head), 0.5);
  EXPECT_DOUBLE_EQ(aux_cell_count_loss(t, CellCountTarget{{0, 0, 0, 0}}, head), 0.0);
  head.b[0] = 2.0;
  EXPECT_DOUBLE_EQ(aux_cell_count_loss(t, CellCountTarget{{2, 2, 2, 2}}, head), 0.0);
  EXPECT_THROW(aux_cell_count_loss(t, CellCountTarget{{1, 2}}, head), DimensionError);
}

TEST(AuxLoss, MatchesScalarOracle) {
  Rng rng(7);
  const AuxHead head{random_tensor(rng, {5, 1}), random_tensor(rng, {1})};
  const Tensor x = random_tensor(rng, {6, 5});
  const CellCountTarget target{{0, 3, 1, 0, 2, 1}};
  double oracle = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    double pred = head.b[0];
    for (std::size_t j = 0; j < 5; ++j) pred += x(i, j) * head.w(j, 0);
    oracle += (pred - target.counts[i]) * (pred - target.counts[i]) / 6.0;
  }
  EXPECT_NEAR(aux_cell_count_loss({x, 3}, target, head), oracle, 1e-12);
}

TEST(Ema, Contracts) {
  AuxHead teacher{Tensor({2, 1}, 1.0), Tensor({1}, 1.0)};
  const AuxHead student{Tensor({2, 1}, 0.0), Tensor({1}, 0.0)};
  ema_update(teacher, student, 0.9);
  EXPECT_DOUBLE_EQ(teacher.w[0], 0.9);
  EXPECT_DOUBLE_EQ(teacher.b[0], 0.9);

  Rng rng(8);
  Config cfg = toy_config(Variant::dirl);
  DirlModel a = init_model(cfg, rng);
  const DirlModel b = init_model(cfg, rng);
  const DirlModel a0 = a;
  ema_update(a, b, 1.0);
  std::vector<const Tensor*> ta, ta0, tb;
  a.visit("", [&](const std::string&, const Tensor& t) { ta.push_back(&t); });
  a0.visit("", [&](const std::string&, const Tensor& t) { ta0.push_back(&t); });
  b.visit("", [&](const std::string&, const Tensor& t) { tb.push_back(&t); });
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i]->storage(), ta0[i]->storage());

  ema_update(a, b, 0.37);
  for (std::size_t i = 0; i < ta.size(); ++i)
    for (std::size_t k = 0; k < ta[i]->size(); ++k)
      ASSERT_NEAR((*ta[i])[k], 0.37 * (*ta0[i])[k] + 0.63 * (*tb[i])[k], 1e-14);

  ema_update(a, b, 0.0);
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i]->storage(), tb[i]->storage());

  EXPECT_THROW(ema_update(a, b, 1.5), ConfigError);
  EXPECT_THROW(ema_update(a, b, -0.1), ConfigError);
  DirlModel c = init_model(toy_config(Variant::baseline), rng);
  EXPECT_THROW(ema_update(c, b, 0.5), CheckpointError);
  DirlModel d = a;
  d.encoder.pos_embed = Tensor({5, 8});
  EXPECT_THROW(ema_update(d, b, 0.5), CheckpointError);
}

TEST(Center, Contracts) {
  Rng rng(9);
  const Tensor logits = random_tensor(rng, {6, 4});
  const Tensor c0 = random_tensor(rng, {4});
  const Tensor mean0 = center_update(c0, logits, 0.0);
  for (std::size_t k = 0; k < 4; ++k) {
    double m = 0.0;
    for (std::size_t i = 0; i < 6; ++i) m += logits(i, k);
    EXPECT_NEAR(mean0[k], m / 6.0, 1e-14);
  }
  const Tensor running = center_update(c0, logits, 0.9);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(running[k], 0.9 * c0[k] + 0.1 * mean0[k], 1e-14);

  Tensor constant({3, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) constant(i, k) = static_cast<double>(k) * 0.5;
  const Tensor fixed = Tensor({4}, std::vector<double>{0.0, 0.5, 1.0, 1.5});
  const Tensor stays = center_update(fixed, constant, 0.3);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(stays[k], fixed[k], 1e-15);
  EXPECT_THROW(center_update(Tensor({3}), logits, 0.5), DimensionError);
}

TEST(Views, IdentityAugmentationReproducesInput) {
  Rng rng(10);
  const Tensor img = random_image(rng, 32, 32);
  const CentroidMap cm{32, 32, {{3, 4, 0}, {20, 30, 1}}};
  const ViewPair vp = make_views(img, cm, AugConfig::identity(), 8, 2, rng);
  for (const auto& v : vp.views) {
    EXPECT_EQ(v.image.storage(), img.storage());
    EXPECT_EQ(v.prior, build_cell_prior(cm, 8));
    EXPECT_EQ(v.centroids, cm);
  }
}

TEST(Views, FlipOnlyReversesPriorColumns) {
  Rng rng(11);
  const Tensor img = random_image(rng, 32, 32);
  const CentroidMap cm{32, 32, {{3, 4, 0}, {20, 30, 1}, {9, 12, 0}}};
  AugConfig aug = AugConfig::identity();
  aug.flip_prob = 1.0;
  const ViewPair vp = make_views(img, cm, aug, 8, 2, rng);
  const CellPrior base = build_cell_prior(cm, 8);
  for (const auto& v : vp.views) {
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(v.prior[r * 4 + c], base[r * 4 + (3 - c)]);
    EXPECT_EQ(v.image(5, 31, 1), img(5, 0, 1));
  }
}

TEST(Views, RandomCropPriorFollowsCentroids) {
  Rng rng(12);
  const AugConfig aug;
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor img = random_image(rng, 32, 32);
    CentroidMap cm{32, 32, {}};
    for (int i = 0; i < 8; ++i) cm.centroids.push_back({static_cast<int>(rng.index(32)), static_cast<int>(rng.index(32)), 0});
    const ViewPair vp = make_views(img, cm, aug, 8, 2, rng);
    for (const auto& v : vp.views) {
      EXPECT_EQ(v.centroids, transform_centroids(cm, v.geometry));
      EXPECT_EQ(v.prior, build_cell_prior(v.centroids, 8));
      EXPECT_EQ(v.counts.counts, build_cell_counts(v.centroids, 8).counts);
      EXPECT_EQ(image_width(v.image), 32u);
      EXPECT_GE(v.brightness, 0.6);
      EXPECT_LE(v.brightness, 1.4);
    }
  }
}

TEST(Views, Errors) {
  Rng rng(13);
  const Tensor img = random_image(rng, 32, 32);
  EXPECT_THROW(make_views(img, CentroidMap{16, 16, {}}, AugConfig{}, 8, 2, rng), DimensionError);
  EXPECT_THROW(make_views(img, CentroidMap{32, 32, {}}, AugConfig{}, 5, 2, rng), ConfigError);
}

TEST(Views, StackLayout) {
  Rng rng(14);
  const Config cfg = toy_config(Variant::dirl);
  const auto pairs = toy_pairs(rng, 3, AugConfig{});
  const BranchInput in = stack_views(pairs, cfg.encoder);
  EXPECT_EQ(in.batch, 6u);
  EXPECT_EQ(in.patches.rows(), 24u);
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t b = 0; b < 3; ++b) {
      EXPECT_EQ(in.priors[v * 3 + b], pairs[b].views[v].prior);
      EXPECT_EQ(in.patches(v * 12 + b * 4, 0), pairs[b].views[v].image(0, 0, 0));
    }
}

TEST(TrainStep, ZeroLearningRateKeepsStudent) {
  Config cfg = toy_config(Variant::dirl);
  cfg.optim.base_lr = 0.0;
  cfg.optim.min_lr = 0.0;
  Rng rng(15);
  TrainState st = init_train_state(cfg, 3, 4);
  const DirlModel before = st.student;
  const auto pairs = toy_pairs(rng, 2, AugConfig{});
  st.step = 20;
  const StepMetrics m = train_step(st, pairs);
  EXPECT_FALSE(m.update_skipped);
  EXPECT_EQ(m.lr, 0.0);
  std::vector<std::vector<double>> a, b, t;
  st.student.visit("", [&](const std::string&, const Tensor& x) { a.push_back(x.storage()); });
  before.visit("", [&](const std::string&, const Tensor& x) { b.push_back(x.storage()); });
  st.teacher.visit("", [&](const std::string&, const Tensor& x) { t.push_back(x.storage()); });
  EXPECT_EQ(a, b);
  // teacher started equal to the student, so EMA leaves it unchanged
  EXPECT_EQ(t, b);
  EXPECT_EQ(st.step, 21u);
}

TEST(TrainStep, SmallStepDecreasesLoss) {
  for (Variant v : {Variant::baseline, Variant::cellback, Variant::cellback_v2, Variant::dirl}) {
    Config cfg = toy_config(v);
    cfg.optim.base_lr = 0.05;  // peak lr = 0.05 * 2 / 256
    cfg.optim.weight_decay = 0.0;
    cfg.optim.warmup_epochs = 0;
    Rng rng(16);
    TrainState st = init_train_state(cfg, 4, 4);
    const auto pairs = toy_pairs(rng, 2, AugConfig{});
    const BranchInput in = stack_views(pairs, cfg.encoder);
    const auto t_logits = teacher_forward(st.teacher, in, cfg);
    const auto centers = st.centers;
    auto loss_of = [&](const DirlModel& m) {
      Graph g(false);
      return build_student_loss(g, m, in, t_logits, centers, cfg).total->value()[0];
    };
    const double before = loss_of(st.student);
    train_step(st, pairs);
    EXPECT_LT(loss_of(st.student), before) << to_string(v);
  }
}

TEST(TrainStep, Deterministic) {
  Config cfg = toy_config(Variant::dirl);
  cfg.ssl.aux_cell_count = true;
  cfg.optim.warmup_epochs = 0;
  auto run = [&cfg]() {
    TrainState st = init_train_state(cfg, 7, 4);
    Rng rng(17);
    std::vector<StepMetrics> ms;
    for (int i = 0; i < 3; ++i) ms.push_back(train_step(st, toy_pairs(rng, 2, AugConfig{})));
    std::vector<std::vector<double>> params;
    st.teacher.visit("", [&](const std::string&, const Tensor& x) { params.push_back(x.storage()); });
    return std::make_pair(ms, params);
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.second, b.second);
  for (std::size_t i = 0; i < a.first.size(); ++i) {
    EXPECT_EQ(a.first[i].loss, b.first[i].loss);
    EXPECT_EQ(a.first[i].aux_loss, b.first[i].aux_loss);
    EXPECT_EQ(a.first[i].term_loss, b.first[i].term_loss);
  }
}

TEST(TrainStep, NoSignalSamplesCounted) {
  Config cfg = toy_config(Variant::cellback);
  cfg.ssl.cell_classes = 1;
  Rng rng(18);
  TrainState st = init_train_state(cfg, 5, 4);
  // all-cell crops: background is empty, cell present
  CentroidMap all{4, 4, {{0, 0, 0}, {2, 0, 0}, {0, 2, 0}, {2, 2, 0}}};
  std::vector<ViewPair> pairs{make_views(random_image(rng, 4, 4), all, AugConfig::identity(), 2, 1, rng)};
  StepMetrics m = train_step(st, pairs);
  EXPECT_EQ(m.term_skipped.at("back"), 1u);
  EXPECT_EQ(m.term_skipped.at("cell"), 0u);
  EXPECT_EQ(m.no_signal, 0u);
  // no centroids under the baseline-free cellback variant still has background signal
  std::vector<ViewPair> empty{make_views(random_image(rng, 4, 4), CentroidMap{4, 4, {}}, AugConfig::identity(), 2, 1, rng)};
  m = train_step(st, empty);
  EXPECT_EQ(m.term_skipped.at("cell"), 1u);
  EXPECT_FALSE(m.update_skipped);
}

TEST(TrainStep, AllTermsAbsentSkipsUpdate) {
  Config cfg = toy_config(Variant::cellback);
  cfg.ssl.cell_classes = 1;
  Rng rng(19);
  TrainState st = init_train_state(cfg, 6, 4);
  CentroidMap all{4, 4, {{0, 0, 0}, {2, 0, 0}, {0, 2, 0}, {2, 2, 0}}};
  // view 0 is all cells, view 1 has none: neither term is present in both views
  ViewPair vp;
  const Tensor img = random_image(rng, 4, 4);
  vp.views[0] = make_view(img, all, Geometry::identity(4, 4), 1.0, 1.0, 2, 1);
  vp.views[1] = make_view(img, CentroidMap{4, 4, {}}, Geometry::identity(4, 4), 1.0, 1.0, 2, 1);
  const DirlModel before = st.student;
  const StepMetrics m = train_step(st, std::vector<ViewPair>{vp});
  EXPECT_TRUE(m.update_skipped);
  EXPECT_EQ(m.no_signal, 1u);
  EXPECT_EQ(st.student.encoder.pos_embed.storage(), before.encoder.pos_embed.storage());
}

TEST(TrainStep, TeacherAffectsLossButReceivesNoGradient) {
  Config cfg = toy_config(Variant::dirl);
  Rng rng(20);
  TrainState st = init_train_state(cfg, 8, 4);
  const auto pairs = toy_pairs(rng, 2, AugConfig{});
  const BranchInput in = stack_views(pairs, cfg.encoder);
  Graph g;
  const auto t_logits = teacher_forward(st.teacher, in, cfg);
  StudentLoss sl = build_student_loss(g, st.student, in, t_logits, st.centers, cfg);
  g.backward(*sl.total);
  st.teacher.visit("", [&](const std::string& name, const Tensor& t) {
    const Tensor grad = g.grad_of(t);
    for (double v : grad.data()) ASSERT_EQ(v, 0.0) << name;
  });
  st.teacher.encoder.pos_embed[0] += 0.5;
  Graph g2(false);
  const double moved = build_student_loss(g2, st.student, in, teacher_forward(st.teacher, in, cfg), st.centers, cfg).total->value()[0];
  EXPECT_NE(moved, sl.total->value()[0]);
}

TEST(Gradients, FullDirlLossPassesFiniteDifferences) {
  for (bool shared : {true, false}) {
    Config cfg = toy_config(Variant::dirl);
    cfg.ssl.shared_disentangle = shared;
    cfg.ssl.aux_cell_count = true;
    Rng rng(21);
    TrainState st = init_train_state(cfg, 9, 4);
    randomize(st.student, rng, 0.4);
    const auto pairs = toy_pairs(rng, 2, AugConfig{});
    const BranchInput in = stack_views(pairs, cfg.encoder);
    const auto t_logits = teacher_forward(st.teacher, in, cfg);
    std::map<std::string, Tensor> centers;
    for (const auto& [name, c] : st.centers) centers[name] = random_tensor(rng, c.shape(), 0.1);
    auto f = [&](Graph& g) { return *build_student_loss(g, st.student, in, t_logits, centers, cfg).total; };
    const auto params = named_params(st.student);
    const GradCheckReport rep = grad_check(f, params, 1e-5, 1e-4);
    EXPECT_TRUE(rep.passed()) << rep.diagnostic;
    bool saw_disentangle = false, saw_head = false;
    for (const auto& e : rep.entries) {
      saw_disentangle = saw_disentangle || e.name.rfind("disentangle.", 0) == 0;
      saw_head = saw_head || e.name.rfind("heads.cb.", 0) == 0;
    }
    EXPECT_TRUE(saw_disentangle);
    EXPECT_TRUE(saw_head);
  }
}
