#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "edm/error.hpp"
#include "edm/parallel.hpp"
#include "edm/training.hpp"
#include "oracles.hpp"

using namespace edm;

namespace {

std::vector<TrainingPair> toy_pairs(std::size_t n, int size, std::uint64_t seed, bool conditional = true) {
  Rng rng(seed);
  std::vector<TrainingPair> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    TrainingPair p;
    const Field c = oracle::normal_field({1, size, size}, rng);
    if (conditional) p.condition = {c, oracle::shift(c, 0, 1)};
    p.target = oracle::shift(c, 0, 2);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

ConvNetSpec small_spec(int in_channels) {
  ConvNetSpec s;
  s.in_channels = in_channels;
  s.widths = {4, 6};
  s.depth = 1;
  s.seed = 3;
  s.zero_init_output = false;
  return s;
}

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  double scale = 0.0;
  for (double v : b) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  return worst;
}

}  // namespace

TEST(Training, LossWeights) {
  const PrecondParams p{0.5};
  EXPECT_DOUBLE_EQ(loss_weight(LossWeighting::kInverseSigma, 4.0, p), 0.25);
  EXPECT_NEAR(loss_weight(LossWeighting::kEdm, 2.0, p), 1.0 / std::pow(oracle::out(2.0, 0.5), 2), 1e-12);
  EXPECT_EQ(loss_weight(LossWeighting::kUniform, 9.0, p), 1.0);
  EXPECT_EQ(loss_weighting_from_string("inverse_sigma"), LossWeighting::kInverseSigma);
  EXPECT_THROW(loss_weighting_from_string("snr"), DomainError);
}

TEST(Training, PosteriorVarianceFloor) {
  const double mu = 0.5, s2 = 1.0;
  const Shape shape{1, 8, 8};
  AnalyticDenoiser ideal(GaussianMixturePrior::isotropic(shape, mu, s2));
  for (double sigma : {0.1, 1.0, 5.0}) {
    Rng rng(static_cast<std::uint64_t>(sigma * 100));
    oracle::Welford w;
    for (int i = 0; i < 2000; ++i) {
      const Field y = oracle::normal_field(shape, rng, mu, std::sqrt(s2));
      const Field n = oracle::normal_field(shape, rng, 0.0, sigma);
      w.add(denoising_loss(ideal, y, {}, sigma, n, LossWeighting::kUniform).loss);
    }
    EXPECT_NEAR(w.mean(), oracle::posterior_variance(s2, sigma), 3 * w.standard_error()) << sigma;
  }
}

TEST(Training, DenoisingLossGradient) {
  AnalyticDenoiser d(GaussianMixturePrior::isotropic({1, 2, 2}, 0.0, 1.0));
  Rng rng(1);
  const Field y = oracle::normal_field({1, 2, 2}, rng);
  const Field n = oracle::normal_field({1, 2, 2}, rng, 0.0, 0.5);
  const DenoisingLoss l = denoising_loss(d, y, {}, 0.5, n, LossWeighting::kInverseSigma);
  Field noisy = y;
  for (std::size_t i = 0; i < 4; ++i) noisy[i] += n[i];
  const Field den = d.denoise(noisy, {}, 0.5);
  double ss = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    ss += std::pow(den[i] - y[i], 2);
    EXPECT_NEAR(l.grad_denoised[i], 2.0 * 2.0 * (den[i] - y[i]) / 4.0, 1e-6);
  }
  EXPECT_NEAR(l.loss, 2.0 * ss / 4.0, 1e-9);
}

TEST(Training, MakePairsSlidesWindow) {
  std::vector<FieldBatch> seqs(1);
  for (int t = 0; t < 5; ++t) seqs[0].push_back(Field({1, 2, 2}, Units::kNormalized, static_cast<float>(t)));
  const auto pairs = make_pairs(seqs, 2);
  ASSERT_EQ(pairs.size(), 3u);
  EXPECT_EQ(pairs[1].condition[0][0], 1.0f);
  EXPECT_EQ(pairs[1].condition[1][0], 2.0f);
  EXPECT_EQ(pairs[1].target[0], 3.0f);
}

TEST(Training, EarlyStopperPatience) {
  EarlyStopper s(2);
  EXPECT_FALSE(s.update(1.0));
  EXPECT_FALSE(s.update(0.5));
  EXPECT_FALSE(s.update(0.6));
  EXPECT_TRUE(s.update(0.7));
  EXPECT_EQ(s.best_epoch(), 1);
  EXPECT_EQ(s.best_loss(), 0.5);
}

TEST(Training, BatchGradientIsPermutationInvariant) {
  const auto pairs = toy_pairs(6, 8, 1);
  ConvNet<float> net(small_spec(3));
  TrainConfig cfg;
  std::vector<std::uint64_t> seeds(6);
  for (std::size_t i = 0; i < 6; ++i) seeds[i] = derive_seed(9, i);
  std::vector<double> g1(net.num_params()), g2(net.num_params());
  const double l1 = diffusion_batch_gradient(net, pairs, seeds, cfg, g1);

  std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
  std::vector<TrainingPair> pp;
  std::vector<std::uint64_t> ps;
  for (std::size_t i : perm) {
    pp.push_back(pairs[i]);
    ps.push_back(seeds[i]);
  }
  const double l2 = diffusion_batch_gradient(net, pp, ps, cfg, g2);
  EXPECT_NEAR(l1, l2, 1e-12 * std::abs(l1));
  EXPECT_LE(max_rel_diff(g1, g2), 1e-12);
}

TEST(Training, AccumulationMatchesLargeBatch) {
  const auto pairs = toy_pairs(8, 8, 2);
  ConvNet<float> net(small_spec(3));
  TrainConfig cfg;
  std::vector<std::uint64_t> seeds(8);
  for (std::size_t i = 0; i < 8; ++i) seeds[i] = derive_seed(4, i);
  std::vector<double> full(net.num_params()), a(net.num_params()), b(net.num_params());
  diffusion_batch_gradient(net, pairs, seeds, cfg, full);
  diffusion_batch_gradient(net, std::span(pairs).first(4), std::span(seeds).first(4), cfg, a);
  diffusion_batch_gradient(net, std::span(pairs).last(4), std::span(seeds).last(4), cfg, b);
  std::vector<double> acc(full.size());
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = (a[i] + b[i]) / 2.0;
  EXPECT_LE(max_rel_diff(acc, full), 1e-5);

  // The same holds for whole optimizer updates.
  const auto many = toy_pairs(40, 8, 3);
  TrainConfig small = cfg;
  small.epochs = 2;
  small.val_fraction = 0.2;
  small.batch_size = 4;
  small.accumulation = 4;
  TrainConfig big = small;
  big.batch_size = 16;
  big.accumulation = 1;
  TrainTask task;
  const auto r1 = train_diffusion(many, task, small, small_spec(3));
  const auto r2 = train_diffusion(many, task, big, small_spec(3));
  EXPECT_LE(max_rel_diff(r1.train.params.values, r2.train.params.values), 1e-5);
}

TEST(Training, DeterministicAcrossThreadCounts) {
  const auto pairs = toy_pairs(24, 8, 4);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 5;
  TrainTask task;
  set_thread_count(1);
  const auto a = train_diffusion(pairs, task, cfg, small_spec(3));
  set_thread_count(4);
  const auto b = train_diffusion(pairs, task, cfg, small_spec(3));
  set_thread_count(0);
  EXPECT_EQ(a.train.params.values, b.train.params.values);
  ASSERT_EQ(a.train.curve.size(), b.train.curve.size());
  EXPECT_EQ(a.train.curve.back().val_loss, b.train.curve.back().val_loss);
}

TEST(Training, DiffusionLossDecreases) {
  const auto pairs = toy_pairs(64, 8, 5);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 8;
  cfg.adam.lr = 3e-3;
  TrainTask task;
  const auto r = train_diffusion(pairs, task, cfg, diffusion_net_spec(task, small_spec(3)));
  ASSERT_EQ(r.train.curve.size(), 8u);
  EXPECT_LT(r.train.curve.back().train_loss, r.train.curve.front().train_loss);
  EXPECT_GE(r.train.best_epoch, 0);
}

TEST(Training, BaselineLearnsShift) {
  // The target is a fixed shift of the latest condition frame: a linear conv net can fit it.
  const auto pairs = toy_pairs(64, 8, 6);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 8;
  cfg.adam.lr = 1e-2;
  ConvNetSpec spec = small_spec(2);
  spec.activation = Activation::kIdentity;
  spec.depth = 0;
  spec.noise_embedding = false;
  const auto r = train_baseline(pairs, cfg, spec);
  EXPECT_LT(r.curve.back().val_loss, 0.1 * r.curve.front().val_loss);
}

TEST(Training, MinimizeQuadraticAndEarlyStop) {
  // Per-sample loss (p - t_i)^2 with targets t_i; the optimum is their mean.
  std::vector<double> targets(50);
  std::iota(targets.begin(), targets.end(), 0.0);
  double p = 0.0;
  Objective obj;
  obj.num_samples = targets.size();
  obj.initial.values = {0.0};
  obj.set_params = [&](std::span<const double> v) { p = v[0]; };
  obj.sample = [&](std::size_t i, std::uint64_t, std::span<double> g, double s) {
    if (!g.empty()) g[0] += s * 2.0 * (p - targets[i]);
    return (p - targets[i]) * (p - targets[i]);
  };
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.adam.lr = 0.5;
  cfg.batch_size = 50;
  cfg.val_fraction = 0.0;
  cfg.patience = 5;
  const TrainResult r = minimize(obj, cfg);
  EXPECT_NEAR(p, 24.5, 0.3);  // mean of all targets (no hold-out)
  EXPECT_TRUE(r.stopped_early);
  EXPECT_EQ(p, r.params.values[0]);
}

TEST(Training, DivergenceKeepsLastGoodParams) {
  double p = 1.0;
  int calls = 0;
  Objective obj;
  obj.num_samples = 10;
  obj.initial.values = {1.0};
  obj.set_params = [&](std::span<const double> v) { p = v[0]; };
  obj.sample = [&](std::size_t, std::uint64_t, std::span<double> g, double s) {
    ++calls;
    if (!g.empty()) g[0] += s * (calls > 20 ? std::nan("") : 1.0);
    return p;
  };
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 2;
  cfg.val_fraction = 0.0;
  try {
    minimize(obj, cfg);
    FAIL() << "expected TrainingDiverged";
  } catch (const TrainingDiverged& e) {
    ASSERT_EQ(e.last_good().values.size(), 1u);
    EXPECT_TRUE(std::isfinite(e.last_good().values[0]));
    EXPECT_LT(e.last_good().values[0], 1.0);
  }
}

TEST(Training, CorrDiffTargetsAreResiduals) {
  const auto pairs = toy_pairs(6, 8, 7);
  ConvNetSpec spec = small_spec(2);
  spec.noise_embedding = false;
  auto net = std::make_shared<ConvNet<float>>(spec);
  net->set_params(net->initial_params().values);
  BaselineModel base(net);
  NormStats stats;
  const auto cd = make_corrdiff_pairs(pairs, base, &stats);
  ASSERT_EQ(cd.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Field pred = base.predict(pairs[i].condition);
    ASSERT_EQ(cd[i].condition.size(), 3u);
    for (std::size_t j = 0; j < pred.size(); ++j) {
      EXPECT_EQ(cd[i].condition[2][j], pred[j]);
      const double r = (static_cast<double>(pairs[i].target[j]) - pred[j] - stats.mean_for(0)) / stats.std_for(0);
      EXPECT_NEAR(cd[i].target[j], r, 1e-5);
    }
  }
  const Field r = corrdiff_target(pairs[0].target, base.predict(pairs[0].condition));
  EXPECT_NEAR(r[0], pairs[0].target[0] - base.predict(pairs[0].condition)[0], 1e-6);
}

TEST(Training, NetSpecChannelsPerTask) {
  TrainTask t;
  t.condition_channels = 2;
  EXPECT_EQ(diffusion_net_spec(t).in_channels, 3);
  t.kind = TaskKind::kUnconditional;
  EXPECT_EQ(diffusion_net_spec(t).in_channels, 1);
  t.kind = TaskKind::kCorrDiffResidual;
  t.baseline = std::make_shared<BaselineModel>(std::make_shared<ConvNet<float>>(ConvNetSpec{}));
  EXPECT_EQ(diffusion_net_spec(t).in_channels, 4);
}

TEST(Training, ConfigValidation) {
  TrainConfig c;
  c.accumulation = 0;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.val_fraction = 1.0;
  EXPECT_THROW(c.validate(), DomainError);
  TrainTask t;
  t.kind = TaskKind::kCorrDiffResidual;
  EXPECT_THROW(t.validate(), ContractViolation);
}
