#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <limits>

#include "dirl/hash.hpp"
#include "dirl/ssl/pretrain.hpp"
#include "test_util.hpp"

using namespace dirl;
using namespace dirl::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "dirl_test_checkpoint";
  fs::create_directories(dir);
  return dir / name;
}

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
  cfg.optim.batch_size = 3;
  cfg.optim.epochs = 3;
  cfg.optim.warmup_epochs = 1;
  cfg.optim.checkpoint_every = 2;
  return cfg;
}

Dataset toy_dataset(std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.bags = {{"bag0000", 0}, {"bag0001", 1}};
  for (int i = 0; i < 7; ++i) {
    CentroidMap cm{4, 4, {{static_cast<int>(rng.index(4)), static_cast<int>(rng.index(4)), static_cast<int>(rng.index(2))}}};
    ds.crops.push_back({i < 4 ? "bag0000" : "bag0001", i, random_image(rng, 4, 4), cm});
  }
  return ds;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0;
}

template <class Params>
void expect_same_params(const Params& a, const Params& b) {
  std::vector<const Tensor*> ta, tb;
  a.visit("", [&](const std::string&, const Tensor& t) { ta.push_back(&t); });
  b.visit("", [&](const std::string&, const Tensor& t) { tb.push_back(&t); });
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_TRUE(same_bits(*ta[i], *tb[i]));
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(1);
  Checkpoint c;
  c.fields = {{"kind", "test"}, {"empty", ""}, {"utf8", "\xc3\xa9t\xc3\xa9"}};
  Tensor special({2, 3});
  special[0] = -0.0;
  special[1] = std::numeric_limits<double>::denorm_min();
  special[2] = std::numeric_limits<double>::max();
  special[3] = std::numeric_limits<double>::infinity();
  special[4] = 0.1;
  special[5] = std::nextafter(1.0, 2.0);
  c.tensors = {{"special", special}, {"random", random_tensor(rng, {2, 2, 2})}, {"vec", random_tensor(rng, {5})}};
  const auto path = scratch("rt.ckpt");
  write_checkpoint(path, c);
  const Checkpoint back = read_checkpoint(path);
  EXPECT_EQ(back.fields, c.fields);
  ASSERT_EQ(back.tensors.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.tensors[i].first, c.tensors[i].first);
    EXPECT_TRUE(same_bits(back.tensors[i].second, c.tensors[i].second));
  }
  const auto again = scratch("rt2.ckpt");
  write_checkpoint(again, back);
  EXPECT_EQ(read_file_bytes(path), read_file_bytes(again));
  EXPECT_EQ(back.field("kind") ? *back.field("kind") : "", "test");
  EXPECT_EQ(back.field("missing"), nullptr);
  EXPECT_EQ(back.tensor("missing"), nullptr);
}

TEST(Checkpoint, CorruptFilesRejected) {
  const auto path = scratch("bad.ckpt");
  write_text_file(path, "NOTACKPT\x01\x00\x00\x00");
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
  write_text_file(path, std::string("DIRLCKPT\x02\x00\x00\x00", 12));
  EXPECT_THROW(read_checkpoint(path), CheckpointError);
  Checkpoint c;
  c.tensors = {{"t", Tensor({4}, 1.0)}};
  write_checkpoint(path, c);
  fs::resize_file(path, fs::file_size(path) - 3);
  EXPECT_THROW(read_checkpoint(path), IoError);
  EXPECT_THROW(read_checkpoint(scratch("missing.ckpt")), IoError);
}

TEST(Checkpoint, LoadTensorsChecksNamesAndShapes) {
  Rng rng(2);
  EncoderConfig cfg;
  cfg.image_size = 16;
  cfg.dim = 8;
  cfg.heads = 2;
  const EncoderParams p = EncoderParams::init(cfg, rng);
  Checkpoint c;
  append_tensors(c, "enc.", p);
  EncoderParams q = EncoderParams::init(cfg, rng);
  load_tensors(q, c, "enc.", "mem");
  expect_same_params(p, q);
  EXPECT_THROW(load_tensors(q, c, "other.", "mem"), CheckpointError);
  c.tensors[0].second = Tensor({1, 1});
  EXPECT_THROW(load_tensors(q, c, "enc.", "mem"), CheckpointError);
}

TEST(Pretrain, RerunIsByteIdentical) {
  const Dataset ds = toy_dataset(3);
  const Config cfg = toy_config(Variant::dirl);
  const fs::path a = scratch("run_a");
  const fs::path b = scratch("run_b");
  fs::remove_all(a);
  fs::remove_all(b);
  pretrain(ds, cfg, {a, 7, {}});
  pretrain(ds, cfg, {b, 7, {}});
  for (const char* f : {"extractor.ckpt", "state.ckpt", "metrics.json", "checkpoints/epoch_0002.ckpt"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(read_file_bytes(a / f), read_file_bytes(b / f)) << f;
  }
  EXPECT_EQ(content_hash(a), content_hash(b));
  EXPECT_FALSE(fs::exists(a / "checkpoints/epoch_0001.ckpt"));
}

TEST(Pretrain, StateReloadResumesIdentically) {
  const Dataset ds = toy_dataset(4);
  for (Variant v : {Variant::baseline, Variant::dirl}) {
    Config cfg = toy_config(v);
    cfg.ssl.aux_cell_count = v == Variant::dirl;
    PretrainResult r = pretrain(ds, cfg, {{}, 5, {}});
    const auto path = scratch("state.ckpt");
    write_checkpoint(path, state_checkpoint(r.state, r.model_id, 5));
    TrainState loaded = load_train_state(path);
    EXPECT_EQ(loaded.step, r.state.step);
    EXPECT_EQ(loaded.total_steps, r.state.total_steps);
    EXPECT_EQ(loaded.cfg.to_text(), cfg.to_text());
    expect_same_params(loaded.student, r.state.student);
    expect_same_params(loaded.teacher, r.state.teacher);

    // saving the reloaded state reproduces the file
    const auto again = scratch("state2.ckpt");
    write_checkpoint(again, state_checkpoint(loaded, r.model_id, 5));
    EXPECT_EQ(read_file_bytes(path), read_file_bytes(again));

    // one more step on each copy lands in the same place
    Rng rng(9);
    std::vector<ViewPair> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(make_views(ds.crops[static_cast<std::size_t>(i)].image, ds.crops[static_cast<std::size_t>(i)].centroids, cfg.aug, 2, 2, rng));
    const StepMetrics m1 = train_step(r.state, batch);
    const StepMetrics m2 = train_step(loaded, batch);
    EXPECT_EQ(m1.loss, m2.loss);
    expect_same_params(loaded.student, r.state.student);
    expect_same_params(loaded.teacher, r.state.teacher);
  }
}

TEST(Pretrain, ExtractorLoadsTeacherEncoder) {
  const Dataset ds = toy_dataset(5);
  const Config cfg = toy_config(Variant::cellback);
  const fs::path out = scratch("run_ex");
  fs::remove_all(out);
  const PretrainResult r = pretrain(ds, cfg, {out, 2, {}});
  const Extractor a = load_extractor(out / "extractor.ckpt");
  const Extractor b = load_extractor(out / "state.ckpt");
  EXPECT_EQ(a.model_id, "cellback-seed2");
  expect_same_params(a.encoder, r.state.teacher.encoder);
  expect_same_params(b.encoder, r.state.teacher.encoder);
  EXPECT_EQ(a.cfg.to_text(), cfg.to_text());
  EXPECT_THROW(load_train_state(out / "extractor.ckpt"), CheckpointError);
}

TEST(Pretrain, RejectsEmptyDataset) {
  EXPECT_THROW(pretrain(Dataset{}, toy_config(Variant::baseline), {}), DataError);
}

TEST(ConfigText, RoundTrip) {
  Config cfg = toy_config(Variant::cellback_v2);
  cfg.ssl.lambda2 = 0.1 / 3.0;
  cfg.synth.type_weights = {{0.1, 0.9}, {0.5, 0.5}};
  Config back;
  back.apply_text(cfg.to_text());
  EXPECT_EQ(back.to_text(), cfg.to_text());
  EXPECT_EQ(back.ssl.lambda2, cfg.ssl.lambda2);
  EXPECT_EQ(back.ssl.variant, Variant::cellback_v2);
  EXPECT_THROW(back.apply_text("no.such.key = 1"), ConfigError);
  EXPECT_THROW(back.apply_text("encoder.d = eight"), ConfigError);
}

TEST(Manifest, RoundTripAndErrors) {
  const auto path = scratch("manifest.csv");
  const std::vector<BagEntry> bags{{"a", 0}, {"b", 3}, {"c-1", 1}};
  write_manifest(path, bags);
  EXPECT_EQ(read_manifest(path), bags);
  write_text_file(path, "bag,label\na,0\n");
  EXPECT_THROW(read_manifest(path), DataError);
  write_text_file(path, "bag_id,label\na,x\n");
  EXPECT_THROW(read_manifest(path), DataError);
  write_text_file(path, "bag_id,label\na,-1\n");
  EXPECT_THROW(read_manifest(path), DataError);
  write_text_file(path, "bag_id,label\n");
  EXPECT_THROW(read_manifest(path), DataError);
}

TEST(ContentHash, MatchesGitBlobIds) {
  EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  const fs::path a = scratch("hash_a");
  const fs::path b = scratch("hash_b");
  fs::remove_all(a);
  fs::remove_all(b);
  fs::create_directories(a / "sub");
  fs::create_directories(b / "sub");
  write_text_file(a / "x.txt", "1");
  write_text_file(a / "sub/y.txt", "2");
  write_text_file(b / "sub/y.txt", "2");
  write_text_file(b / "x.txt", "1");
  EXPECT_EQ(content_hash(a), content_hash(b));
  EXPECT_EQ(content_hash(a / "x.txt"), git_blob_hash("1"));
  write_text_file(b / "x.txt", "3");
  EXPECT_NE(content_hash(a), content_hash(b));
  EXPECT_THROW(content_hash(scratch("nope")), IoError);
}
