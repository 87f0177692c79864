#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "edm/error.hpp"
#include "edm/noise_schedule.hpp"
#include "edm/sampler.hpp"
#include "oracles.hpp"

using namespace edm;

namespace {

/// Denoiser that counts calls and optionally injects NaN after a number of calls.
class CountingDenoiser final : public Denoiser {
 public:
  explicit CountingDenoiser(const Denoiser& inner, int nan_after = -1) : inner_(inner), nan_after_(nan_after) {}
  Field denoise(const Field& x, std::span<const Field> c, double sigma) const override {
    Field out = inner_.denoise(x, c, sigma);
    if (nan_after_ >= 0 && calls_ >= nan_after_) out[0] = std::numeric_limits<float>::quiet_NaN();
    ++calls_;
    return out;
  }
  int calls() const { return calls_; }

 private:
  const Denoiser& inner_;
  int nan_after_;
  mutable int calls_ = 0;
};

double endpoint_error(const SampleConfig& cfg, double mu, double s2, const Field& x0) {
  AnalyticDenoiser d(GaussianMixturePrior::isotropic(x0.shape(), mu, s2));
  Rng unused(0);
  const Field out = sample_from(d, x0, {}, cfg, unused);
  double err = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i)
    err += std::abs(out[i] - oracle::gaussian_flow(x0[i], cfg.sigma_max, 0.0, mu, s2));
  return err / static_cast<double>(x0.size());
}

}  // namespace

TEST(Sampler, EulerStepFormula) {
  Field x({1, 1, 2}, std::vector<float>{3.0f, -1.0f}, Units::kNormalized);
  Field den({1, 1, 2}, std::vector<float>{1.0f, 0.5f}, Units::kNormalized);
  const Field n = euler_step(x, 2.0, 1.0, den);
  EXPECT_FLOAT_EQ(n[0], 3.0f + (3.0f - 1.0f) / 2.0f * (1.0f - 2.0f));
  EXPECT_FLOAT_EQ(n[1], -1.0f + (-1.0f - 0.5f) / 2.0f * (1.0f - 2.0f));
  const Field end = euler_step(x, 2.0, 0.0, den);
  EXPECT_EQ(end[0], den[0]);
  EXPECT_EQ(end[1], den[1]);
}

TEST(Sampler, DeterministicInSeed) {
  AnalyticDenoiser d(GaussianMixturePrior::isotropic({1, 8, 8}, 0.3, 0.8));
  SampleConfig cfg;
  cfg.num_steps = 12;
  cfg.seed = 77;
  const Field a = generate(d, {}, cfg, {1, 8, 8});
  const Field b = generate(d, {}, cfg, {1, 8, 8});
  EXPECT_EQ(std::vector<float>(a.values().begin(), a.values().end()),
            std::vector<float>(b.values().begin(), b.values().end()));
  cfg.seed = 78;
  const Field c = generate(d, {}, cfg, {1, 8, 8});
  EXPECT_NE(a[0], c[0]);
}

TEST(Sampler, TerminalStepLandsOnDenoiser) {
  AnalyticDenoiser d(GaussianMixturePrior::isotropic({1, 4, 4}, 1.0, 0.5));
  SampleConfig cfg;
  cfg.num_steps = 10;
  cfg.s_churn = 0.2;
  Trajectory t;
  const Field out = generate(d, {}, cfg, {1, 4, 4}, Units::kNormalized, &t);
  ASSERT_EQ(t.points.size(), 11u);
  EXPECT_EQ(t.points.back().sigma, 0.0);
  const SigmaSchedule s = build_schedule(10, cfg.sigma_max, cfg.sigma_min, cfg.rho);
  for (std::size_t i = 0; i < t.points.size(); ++i) EXPECT_EQ(t.points[i].sigma, s.sigmas[i]);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(t.points.back().snapshot[i], out[i]);

  // Without churn the last step output is exactly D(x_{N-1}; sigma_{N-1}).
  cfg.s_churn = 0.0;
  Trajectory t2;
  const Field out2 = generate(d, {}, cfg, {1, 4, 4}, Units::kNormalized, &t2);
  const Field expect = d.denoise(t2.points[9].snapshot, {}, s.sigmas[9]);
  for (std::size_t i = 0; i < out2.size(); ++i) EXPECT_EQ(out2[i], expect[i]);
}

TEST(Sampler, ChurnInjectVarianceAndBand) {
  Field x({1, 100, 100}, Units::kNormalized, 0.5f);
  Rng rng(3);
  const double sigma = 2.0, gamma = 0.3, s_noise = 1.007;
  oracle::Welford w;
  for (int rep = 0; rep < 10; ++rep) {
    const ChurnResult c = churn_inject(x, sigma, gamma, s_noise, rng);
    EXPECT_DOUBLE_EQ(c.sigma_hat, sigma * (1 + gamma));
    for (std::size_t i = 0; i < x.size(); ++i) w.add(c.x_hat[i] - x[i]);
  }
  const double expected = (std::pow(sigma * (1 + gamma), 2) - sigma * sigma) * s_noise * s_noise;
  EXPECT_NEAR(w.variance() / expected, 1.0, 0.02);

  Rng a(9), b(9);
  const ChurnResult off = churn_inject(x, sigma, gamma, s_noise, a, 3.0, 10.0);
  EXPECT_EQ(off.sigma_hat, sigma);
  EXPECT_EQ(off.x_hat[17], x[17]);
  EXPECT_EQ(a(), b());  // no draws outside the band
}

TEST(Sampler, ZeroGammaEqualsBandExcludedChurn) {
  AnalyticDenoiser d(GaussianMixturePrior::isotropic({1, 6, 6}, -0.4, 1.3));
  SampleConfig cfg;
  cfg.num_steps = 18;
  cfg.seed = 5;
  const Field plain = generate(d, {}, cfg, {1, 6, 6});
  cfg.s_churn = 0.3;
  cfg.s_tmin = 1e6;  // band never active
  const Field banded = generate(d, {}, cfg, {1, 6, 6});
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_EQ(plain[i], banded[i]);
}

TEST(Sampler, EulerIsFirstOrderHeunSecondOrder) {
  Rng rng(11);
  const double mu = 0.5, s2 = 1.0;
  Field x0 = oracle::normal_field({1, 8, 8}, rng, 0.0, 80.0);
  SampleConfig cfg;
  std::vector<double> euler, heun;
  for (int n : {36, 72, 144}) {
    cfg.num_steps = n;
    cfg.second_order = false;
    euler.push_back(endpoint_error(cfg, mu, s2, x0));
    cfg.second_order = true;
    heun.push_back(endpoint_error(cfg, mu, s2, x0));
  }
  for (std::size_t k = 0; k + 1 < euler.size(); ++k) {
    EXPECT_NEAR(euler[k] / euler[k + 1], 2.0, 0.4) << k;
  }
  EXPECT_NEAR(heun[0] / heun[1], 4.0, 1.2);
}

TEST(Sampler, HeunUsesTwoEvaluationsExceptLast) {
  AnalyticDenoiser base(GaussianMixturePrior::isotropic({1, 2, 2}, 0.0, 1.0));
  CountingDenoiser d(base);
  SampleConfig cfg;
  cfg.num_steps = 7;
  cfg.second_order = true;
  generate(d, {}, cfg, {1, 2, 2});
  EXPECT_EQ(d.calls(), 2 * 7 - 1);
}

TEST(Sampler, NonFiniteStateRaisesWithTrajectory) {
  AnalyticDenoiser base(GaussianMixturePrior::isotropic({1, 2, 2}, 0.0, 1.0));
  CountingDenoiser d(base, 4);
  SampleConfig cfg;
  cfg.num_steps = 10;
  try {
    generate(d, {}, cfg, {1, 2, 2});
    FAIL() << "expected SamplingError";
  } catch (const SamplingError& e) {
    EXPECT_GE(e.trajectory().points.size(), 1u);
    EXPECT_FALSE(e.trajectory().points.back().snapshot.all_finite());
  }
}

TEST(Sampler, ConfigValidation) {
  SampleConfig c;
  c.s_churn = 0.5;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.num_steps = 0;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.sigma_min = 100;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.s_noise = -1;
  EXPECT_THROW(c.validate(), DomainError);
}

TEST(Sampler, RawChurnConversion) {
  EXPECT_DOUBLE_EQ(churn_gamma_from_raw(3.6, 36), 0.1);
  EXPECT_DOUBLE_EQ(churn_gamma_from_raw(100.0, 36), kMaxChurnGamma);
  EXPECT_EQ(churn_gamma_from_raw(0.0, 9), 0.0);
  EXPECT_NEAR(kMaxChurnGamma, std::sqrt(2.0) - 1.0, 1e-15);
}

TEST(Sampler, TrajectoryCsv) {
  AnalyticDenoiser d(GaussianMixturePrior::isotropic({1, 2, 2}, 0.0, 1.0));
  SampleConfig cfg;
  cfg.num_steps = 4;
  Trajectory t;
  generate(d, {}, cfg, {1, 2, 2}, Units::kNormalized, &t);
  t.trace_pixels = {0, 3};
  const auto path = std::filesystem::temp_directory_path() / "edm_traj.csv";
  t.write_csv(path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,sigma,pixel,value");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 5 * 2);
}
