#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "edm/error.hpp"
#include "edm/evaluation.hpp"
#include "edm/toy_data.hpp"
#include "oracles.hpp"

using namespace edm;

namespace {

Field constant(float v, Shape s = {1, 4, 4}) { return Field(s, Units::kKelvin, v); }

std::vector<EnsembleSample> calibrated(int samples, int members, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<EnsembleSample> out;
  for (int s = 0; s < samples; ++s) {
    const Field base = oracle::normal_field({1, 8, 8}, rng, 0.0, 3.0);
    EnsembleSample e;
    const auto noisy = [&] {
      Field f = base;
      for (auto& v : f.values()) v += static_cast<float>(std::normal_distribution<double>(0.0, 1.0)(rng));
      return f;
    };
    e.truth = noisy();
    for (int m = 0; m < members; ++m) e.members.push_back(noisy());
    out.push_back(std::move(e));
  }
  return out;
}

int ring(int kx, int ky) { return static_cast<int>(std::lround(std::sqrt(double(kx * kx + ky * ky)))); }

}  // namespace

TEST(Evaluation, PixelMetricsExamples) {
  const std::vector<Field> truth{constant(250), constant(260)};
  const std::vector<Field> same = truth;
  const PixelMetrics z = pixel_metrics(truth, same);
  EXPECT_EQ(z.me, 0.0);
  EXPECT_EQ(z.mae, 0.0);
  EXPECT_EQ(z.rmse, 0.0);

  const std::vector<Field> warm{constant(252), constant(262)};
  const PixelMetrics w = pixel_metrics(truth, warm);
  EXPECT_DOUBLE_EQ(w.me, -2.0);
  EXPECT_DOUBLE_EQ(w.mae, 2.0);
  EXPECT_DOUBLE_EQ(w.rmse, 2.0);

  const std::vector<Field> mixed{constant(250), constant(262)};
  EXPECT_DOUBLE_EQ(pixel_metrics(truth, mixed).rmse, std::sqrt(2.0));
  EXPECT_EQ(pixel_metrics(truth, mixed).images, 2u);
  EXPECT_EQ(pixel_metrics(truth, mixed).pixels_per_image, 16u);
}

TEST(Evaluation, PixelMetricsInequalitiesAndPermutation) {
  Rng rng(1);
  std::vector<Field> t, f;
  for (int i = 0; i < 10; ++i) {
    t.push_back(oracle::normal_field({1, 6, 6}, rng, 270, 10, Units::kKelvin));
    f.push_back(oracle::normal_field({1, 6, 6}, rng, 268, 12, Units::kKelvin));
  }
  const PixelMetrics a = pixel_metrics(t, f);
  EXPECT_GE(a.mae, std::abs(a.me));
  EXPECT_GE(a.rmse, a.mae);
  EXPECT_NO_THROW(a.check());
  std::vector<std::size_t> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Field> tp, fp;
  for (auto i : perm) {
    tp.push_back(t[i]);
    fp.push_back(f[i]);
  }
  const PixelMetrics b = pixel_metrics(tp, fp);
  EXPECT_NEAR(a.me, b.me, 1e-12);
  EXPECT_NEAR(a.mae, b.mae, 1e-12);
  EXPECT_NEAR(a.rmse, b.rmse, 1e-12);
  PixelMetrics bad{3.0, 1.0, 2.0, 1, 1};
  EXPECT_THROW(bad.check(), NumericalError);
}

TEST(Evaluation, PixelMetricsRejectMisalignment) {
  const std::vector<Field> a{constant(1)}, b{constant(1), constant(2)};
  EXPECT_THROW(pixel_metrics(a, b), ContractViolation);
  const std::vector<Field> c{constant(1, {1, 2, 2})};
  EXPECT_THROW(pixel_metrics(a, c), ContractViolation);
}

TEST(Evaluation, SpreadSkillHandExample) {
  const Field t = constant(0.0f);
  EnsembleSample s{{constant(1.0f), constant(-1.0f)}, constant(0.5f)};
  (void)t;
  const std::vector<EnsembleSample> v{s};
  SpreadSkillOptions on;
  const SpreadSkillCurve c = spread_skill(v, on);
  // Unbiased member variance 2, times (M+1)/M = 3/2, gives spread sqrt(3); skill |0 - 0.5|.
  EXPECT_NEAR(c.spread[0], std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(c.skill[0], 0.5, 1e-12);
  EXPECT_NEAR(c.ratio, 2.0 * std::sqrt(3.0), 1e-12);
  SpreadSkillOptions off;
  off.small_ensemble_factor = false;
  EXPECT_NEAR(spread_skill(v, off).ratio, 2.0 * std::sqrt(2.0), 1e-12);
}

TEST(Evaluation, SpreadSkillIdenticalMembers) {
  EnsembleSample s{{constant(3.0f), constant(3.0f), constant(3.0f)}, constant(1.0f)};
  const std::vector<EnsembleSample> v{s};
  const SpreadSkillCurve c = spread_skill(v);
  EXPECT_EQ(c.mean_spread, 0.0);
  EXPECT_EQ(c.ratio, 0.0);
}

TEST(Evaluation, SpreadSkillCalibratedEnsemble) {
  const auto samples = calibrated(400, 10, 2);
  const SpreadSkillCurve c = spread_skill(samples);
  EXPECT_NEAR(c.ratio, 1.0, 0.05);
  std::size_t total = 0;
  for (const auto& b : c.bins) total += b.count;
  EXPECT_EQ(total, samples.size());
  ASSERT_EQ(c.bins.size(), 10u);
  for (std::size_t i = 1; i < c.bins.size(); ++i) EXPECT_GE(c.bins[i].mean_skill, c.bins[i - 1].mean_skill);
}

TEST(Evaluation, SpreadSkillNeedsTwoMembers) {
  EnsembleSample s{{constant(1.0f)}, constant(1.0f)};
  const std::vector<EnsembleSample> v{s};
  EXPECT_THROW(spread_skill(v), DomainError);
}

TEST(Evaluation, SpectrumMatchesDirectDft) {
  const int n = 8;
  Rng rng(3);
  const Field f = oracle::normal_field({1, n, n}, rng);
  const SpectrumReport r = radial_spectrum(f, 2.0);
  std::vector<double> vals(f.values().begin(), f.values().end());
  const auto p = oracle::dft_power(vals, n);
  std::vector<double> bins(n / 2 + 1, 0.0);
  double beyond = 0.0;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const int kx = x <= n / 2 - 1 ? x : x - n, ky = y <= n / 2 - 1 ? y : y - n;
      if (kx == 0 && ky == 0) continue;
      const int k = ring(kx, ky);
      const double pw = p[static_cast<std::size_t>(y) * n + x] / std::pow(n, 4);
      if (k <= n / 2) {
        bins[k] += pw;
      } else {
        beyond += pw;
      }
    }
  ASSERT_EQ(r.bins.size(), static_cast<std::size_t>(n / 2));
  for (int k = 1; k <= n / 2; ++k) {
    EXPECT_NEAR(r.bins[k - 1].power, bins[k], 1e-10) << k;
    EXPECT_DOUBLE_EQ(r.bins[k - 1].wavelength_km, n * 2.0 / k);
  }
  EXPECT_NEAR(r.unbinned_power, beyond, 1e-10);
  EXPECT_NEAR(r.binned_power() + r.unbinned_power, r.variance, 1e-10);
}

TEST(Evaluation, SpectrumOfSinusoid) {
  const int n = 64;
  Field f({1, n, n}, Units::kKelvin);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) f.at(0, y, x) = static_cast<float>(280 + 5 * std::sin(2 * std::numbers::pi * x / 8.0));
  for (bool hann : {false, true}) {
    const SpectrumReport r = radial_spectrum(f, 2.0, {hann});
    const auto peak = std::max_element(r.bins.begin(), r.bins.end(),
                                       [](const auto& a, const auto& b) { return a.power < b.power; });
    EXPECT_EQ(peak->k, n / 8);
    EXPECT_DOUBLE_EQ(peak->wavelength_km, 8 * 2.0);
  }
  const SpectrumReport r = radial_spectrum(f, 2.0);
  EXPECT_NEAR(r.bins[n / 8 - 1].power / r.variance, 1.0, 1e-9);
}

TEST(Evaluation, ParsevalOnBlobWorld) {
  BlobWorldConfig cfg;
  cfg.seed = 4;
  const FieldBatch seq = generate_sequence(cfg, 1);
  const SpectrumReport r = radial_spectrum(seq[0], 2.0);
  EXPECT_NEAR(r.binned_power() / r.variance, 1.0, 0.01);
}

TEST(Evaluation, FractionalChangeIdentityAndBoxBlur) {
  const int n = 64;
  Rng rng(5);
  std::vector<Field> noise, blurred;
  for (int i = 0; i < 20; ++i) {
    noise.push_back(oracle::normal_field({1, n, n}, rng, 0.0, 1.0, Units::kKelvin));
    blurred.push_back(oracle::box_blur3(noise.back()));
  }
  for (const auto& b : fractional_change(noise[0], noise[0], 2.0)) EXPECT_EQ(b.ratio, 1.0);

  const auto fc = fractional_change(mean_radial_spectrum(blurred, 2.0), mean_radial_spectrum(noise, 2.0));
  std::vector<double> expect(n / 2 + 1, 0.0);
  std::vector<int> modes(n / 2 + 1, 0);
  for (int ky = -n / 2; ky < n / 2; ++ky)
    for (int kx = -n / 2; kx < n / 2; ++kx) {
      const int k = ring(kx, ky);
      if (k == 0 || k > n / 2) continue;
      expect[k] += oracle::box3_transfer_power(kx, ky, n);
      ++modes[k];
    }
  for (const auto& b : fc) {
    const double e = expect[b.k] / modes[b.k];
    EXPECT_NEAR(b.ratio, e, 0.15 * e + 0.01) << b.k;
    if (b.wavelength_km / 2.0 < 6.0) EXPECT_LT(b.ratio, 1.0);
  }
  EXPECT_NEAR(fc.front().ratio, 1.0, 0.02);
}

TEST(Evaluation, SpectrumRejectsNonSquare) {
  EXPECT_THROW(radial_spectrum(Field({1, 8, 4}, Units::kKelvin), 1.0), DomainError);
  EXPECT_THROW(radial_spectrum(Field({2, 8, 8}, Units::kKelvin), 1.0), DomainError);
}

TEST(Evaluation, StandardGridHas108Cells) {
  const GridSpec g = GridSpec::standard();
  EXPECT_EQ(g.size(), 108u);
  const auto cells = g.enumerate(SampleConfig{});
  ASSERT_EQ(cells.size(), 108u);
  EXPECT_EQ(cells.front().num_steps, 9);
  EXPECT_EQ(cells.back().num_steps, 72);
  EXPECT_EQ(cells[1].rho, 7.0);
  for (const auto& c : cells) EXPECT_NO_THROW(c.validate());
}

TEST(Evaluation, SingleCellGridSelectsIt) {
  GridSpec g{{18}, {0.2}, {80}, {7}};
  const auto r = grid_search(g, SampleConfig{}, [](const SampleConfig&) { return CandidateScore{1.0, 0.5}; });
  EXPECT_EQ(r.selected.num_steps, 18);
  EXPECT_EQ(r.selected.s_churn, 0.2);
  GridSpec empty{{}, {0.0}, {80}, {7}};
  EXPECT_THROW(grid_search(empty, SampleConfig{}, [](const SampleConfig&) { return CandidateScore{}; }),
               DomainError);
}

TEST(Evaluation, RankingIsPermutationInvariantAndSkipsDominated) {
  Rng rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto cells = GridSpec::standard().enumerate(SampleConfig{});
  std::vector<CandidateResult> rows;
  for (const auto& c : cells) rows.push_back({c, 1.0 + u(rng), 0.5 + u(rng), 0, 0, 0});
  // A dominated cell: worst RMSE and worst ratio.
  rows[17].rmse = 10.0;
  rows[17].ratio = 5.0;
  const auto ranked = rank_candidates(rows);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto again = rank_candidates(rows);
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      EXPECT_EQ(again[i].cfg.num_steps, ranked[i].cfg.num_steps);
      EXPECT_EQ(again[i].cfg.s_churn, ranked[i].cfg.s_churn);
      EXPECT_EQ(again[i].cfg.sigma_max, ranked[i].cfg.sigma_max);
      EXPECT_EQ(again[i].cfg.rho, ranked[i].cfg.rho);
      EXPECT_EQ(again[i].score, ranked[i].score);
    }
  }
  EXPECT_EQ(ranked.back().rmse, 10.0);
  EXPECT_EQ(ranked.back().score, 2 * 108);
}

TEST(Evaluation, CompetitionRanksAndTieBreak) {
  SampleConfig a, b, c;
  a.num_steps = 36;
  b.num_steps = 18;
  c.num_steps = 9;
  // a and b tie on both metrics; c is worse on RMSE but perfectly calibrated.
  std::vector<CandidateResult> rows{{a, 1.0, 1.2}, {b, 1.0, 1.2}, {c, 2.0, 1.0}};
  const auto r = rank_candidates(rows);
  EXPECT_EQ(r[0].cfg.num_steps, 18);  // tie broken by fewer steps
  EXPECT_EQ(r[0].rmse_rank, 1);
  EXPECT_EQ(r[1].rmse_rank, 1);
  EXPECT_EQ(r[0].ratio_rank, 2);
  EXPECT_EQ(r[0].score, 3);
  EXPECT_EQ(r[2].cfg.num_steps, 9);
  EXPECT_EQ(r[2].rmse_rank, 3);
  EXPECT_EQ(r[2].ratio_rank, 1);
  EXPECT_EQ(r[2].score, 4);
}

TEST(Evaluation, CsvWriters) {
  const auto dir = std::filesystem::temp_directory_path() / "edm_eval_csv";
  std::filesystem::create_directories(dir);
  const std::vector<MetricsRow> rows{{"persistence", 10.0, PixelMetrics{-1.5, 2.0, 3.0, 4, 16}}};
  write_metrics_csv(dir / "m.csv", rows);
  std::ifstream m(dir / "m.csv");
  std::string line;
  std::getline(m, line);
  EXPECT_EQ(line, "model,lead_min,me,mae,rmse");
  std::getline(m, line);
  EXPECT_EQ(line, "persistence,10,-1.5,2,3");

  const Field f = constant(1.0f, {1, 8, 8});
  const auto fc = fractional_change(f, f, 1.0);
  write_spectrum_csv(dir / "s.csv", "a", fc);
  write_spectrum_csv(dir / "s.csv", "b", fc, true);
  std::ifstream s(dir / "s.csv");
  int lines = 0;
  while (std::getline(s, line)) ++lines;
  EXPECT_EQ(lines, 1 + 2 * 4);
}

TEST(Evaluation, PgmOutput) {
  const auto path = std::filesystem::temp_directory_path() / "edm_test.pgm";
  Field f({1, 2, 3}, std::vector<float>{200, 250, 300, 100, 400, 225}, Units::kKelvin);
  write_pgm(path, f, 200, 300, true);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w, h, maxv;
  in >> magic >> w >> h >> maxv;
  in.get();
  unsigned char px[6];
  in.read(reinterpret_cast<char*>(px), 6);
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 3);
  EXPECT_EQ(h, 2);
  EXPECT_EQ(px[0], 255);
  EXPECT_EQ(px[1], 128);
  EXPECT_EQ(px[2], 0);
  EXPECT_EQ(px[3], 255);
  EXPECT_EQ(px[4], 0);
}
