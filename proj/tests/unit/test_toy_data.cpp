#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "edm/error.hpp"
#include "edm/toy_data.hpp"
#include "oracles.hpp"

using namespace edm;

namespace {

BlobWorldConfig steady(int vx, int vy) {
  BlobWorldConfig c;
  c.velocity = VelocityKind::kFixed;
  c.velocity_x = vx;
  c.velocity_y = vy;
  c.min_rate = c.max_rate = 0.0;
  c.spawn_rate = 0.0;
  c.seed = 11;
  return c;
}

double max_abs_diff(const Field& a, const Field& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

std::vector<float> vec(const Field& f) { return {f.values().begin(), f.values().end()}; }

}  // namespace

TEST(ToyData, SameSeedSameSequence) {
  BlobWorldConfig c;
  c.seed = 3;
  const FieldBatch a = generate_sequence(c, 6), b = generate_sequence(c, 6);
  for (int t = 0; t < 6; ++t) EXPECT_EQ(vec(a[t]), vec(b[t]));
  c.seed = 4;
  EXPECT_NE(vec(generate_sequence(c, 1)[0]), vec(a[0]));
}

TEST(ToyData, IntegerAdvectionIsExact) {
  for (auto [vx, vy] : {std::pair{1, 0}, std::pair{2, -1}, std::pair{0, 3}}) {
    const FieldBatch seq = generate_sequence(steady(vx, vy), 8);
    for (int t = 1; t < 8; ++t) EXPECT_EQ(max_abs_diff(seq[t], oracle::shift(seq[t - 1], vy, vx)), 0.0) << vx << vy;
  }
}

TEST(ToyData, FramesAreKelvinAndClamped) {
  BlobWorldConfig c;
  c.seed = 5;
  c.min_amplitude = 100.0;
  c.max_amplitude = 110.0;
  c.min_blobs = c.max_blobs = 20;
  const FieldBatch seq = generate_sequence(c, 4);
  for (const Field& f : seq) {
    EXPECT_EQ(f.units(), Units::kKelvin);
    EXPECT_EQ(f.shape(), (Shape{1, 64, 64}));
    for (float v : f.values()) {
      EXPECT_GE(v, kMinKelvin);
      EXPECT_LE(v, kMaxKelvin);
    }
  }
  EXPECT_EQ(*std::min_element(seq[0].values().begin(), seq[0].values().end()), static_cast<float>(kMinKelvin));
}

TEST(ToyData, ConfigValidation) {
  BlobWorldConfig c;
  c.grid = 8;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.max_amplitude = 150.0;
  EXPECT_THROW(c.validate(), DomainError);
  EXPECT_THROW(generate_sequence(BlobWorldConfig{}, 0), DomainError);
  EXPECT_EQ(velocity_kind_from_string("rotational"), VelocityKind::kRotational);
  EXPECT_THROW(velocity_kind_from_string("sideways"), DomainError);
}

TEST(ToyData, FilterThresholdIsStrict) {
  Field f({1, 4, 4}, Units::kKelvin, 280.0f);
  for (int i = 0; i < 4; ++i) f[i] = 273.0f;
  PatchFilter pf;
  FilterResult r = apply_filter(f, pf);
  EXPECT_EQ(r.cloud_fraction, 0.0);
  EXPECT_FALSE(r.accepted);
  f[0] = 272.9f;
  f[1] = 272.9f;
  r = apply_filter(f, pf);
  EXPECT_DOUBLE_EQ(r.cloud_fraction, 2.0 / 16.0);
  EXPECT_TRUE(r.accepted);
  EXPECT_FALSE(apply_filter(f, pf, 70.0).accepted);
  EXPECT_FALSE(apply_filter(f, pf, 0.0, 90.0).accepted);
  EXPECT_THROW(apply_filter(normalize(f, NormStats(270, 10)), pf), ContractViolation);
}

TEST(ToyData, StricterFilterAcceptsSubset) {
  Rng rng(7);
  std::vector<Field> frames;
  for (int i = 0; i < 40; ++i) {
    BlobWorldConfig c;
    c.seed = rng();
    frames.push_back(generate_sequence(c, 1)[0]);
  }
  PatchFilter loose, tight;
  loose.min_cloud_fraction = 0.05;
  tight.min_cloud_fraction = 0.2;
  for (const Field& f : frames)
    if (apply_filter(f, tight).accepted) EXPECT_TRUE(apply_filter(f, loose).accepted);
}

TEST(ToyData, SplitAcceptsOnlyFilteredSequences) {
  BlobWorldConfig c;
  c.seed = 8;
  PatchFilter pf;
  pf.min_cloud_fraction = 0.15;
  const GeneratedSplit s = generate_split(c, pf, {Split::kTrain, 12, 3});
  ASSERT_EQ(s.sequences.size(), 12u);
  EXPECT_GE(s.attempts, 12u);
  for (const auto& seq : s.sequences) {
    EXPECT_EQ(seq.size(), 3u);
    EXPECT_TRUE(apply_filter(seq[1], pf).accepted);
  }
  EXPECT_NEAR(s.rejected_fraction, double(s.attempts - 12) / s.attempts, 1e-15);
  const GeneratedSplit again = generate_split(c, pf, {Split::kTrain, 12, 3});
  EXPECT_EQ(vec(again.sequences[5][2]), vec(s.sequences[5][2]));
  const GeneratedSplit other = generate_split(c, pf, {Split::kVal, 12, 3});
  EXPECT_NE(vec(other.sequences[0][0]), vec(s.sequences[0][0]));
}

TEST(ToyData, ImpossibleFilterThrows) {
  BlobWorldConfig c;
  c.min_blobs = c.max_blobs = 0;
  c.spawn_rate = 0.0;
  EXPECT_THROW(generate_split(c, PatchFilter{}, {Split::kTrain, 1, 3}), DomainError);
}

TEST(ToyData, BuildAndLoadDataset) {
  const auto dir = std::filesystem::temp_directory_path() / "edm_toy_build";
  std::filesystem::remove_all(dir);
  BlobWorldConfig c;
  c.grid = 32;
  c.seed = 9;
  const std::vector<SplitSpec> specs{{Split::kTrain, 10, 3}, {Split::kTest, 4, 5}};
  const BuiltDataset b = build_dataset(c, PatchFilter{}, specs, dir);
  ASSERT_EQ(b.paths.size(), 2u);
  const LoadedDataset train = load_dataset(b.paths[0].manifest);
  const LoadedDataset test = load_dataset(b.paths[1].manifest);
  EXPECT_EQ(train.sequences.size(), 10u);
  EXPECT_EQ(test.sequences.size(), 4u);
  EXPECT_EQ(test.sequences[0].size(), 5u);
  EXPECT_EQ(test.manifest.split, Split::kTest);
  EXPECT_EQ(test.manifest.field_shape, (Shape{1, 32, 32}));

  std::vector<Field> frames;
  for (const auto& s : train.sequences) frames.insert(frames.end(), s.begin(), s.end());
  const NormStats st = compute_stats(frames);
  EXPECT_NEAR(train.manifest.stats.mean_for(0), st.mean_for(0), 1e-9);
  EXPECT_NEAR(train.manifest.stats.std_for(0), st.std_for(0), 1e-9);
  EXPECT_EQ(test.manifest.stats.mean_for(0), train.manifest.stats.mean_for(0));

  const auto norm = normalize_sequences(train.sequences, train.manifest.stats);
  EXPECT_EQ(norm[0][0].units(), Units::kNormalized);

  std::filesystem::resize_file(b.paths[1].tensor, 40);
  EXPECT_THROW(load_dataset(b.paths[1].manifest), FormatError);
  const std::vector<SplitSpec> no_train{{Split::kVal, 2, 3}};
  EXPECT_THROW(build_dataset(c, PatchFilter{}, no_train, dir), ContractViolation);
}
