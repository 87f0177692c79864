#include "edm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

#include "edm/error.hpp"
#include "edm/parallel.hpp"
#include "edm/random.hpp"

namespace edm {

std::string_view to_string(LossWeighting w) {
  switch (w) {
    case LossWeighting::kInverseSigma: return "inverse_sigma";
    case LossWeighting::kEdm: return "edm";
    case LossWeighting::kUniform: return "uniform";
  }
  return "edm";
}

LossWeighting loss_weighting_from_string(std::string_view s) {
  if (s == "inverse_sigma") return LossWeighting::kInverseSigma;
  if (s == "edm") return LossWeighting::kEdm;
  if (s == "uniform") return LossWeighting::kUniform;
  throw DomainError("unknown loss weighting '" + std::string(s) + "'");
}

double loss_weight(LossWeighting w, double sigma, const PrecondParams& p) {
  if (!(sigma > 0.0)) throw DomainError("loss weighting requires sigma > 0");
  switch (w) {
    case LossWeighting::kInverseSigma: return 1.0 / sigma;
    case LossWeighting::kEdm: {
      const double co = c_out(sigma, p);
      return 1.0 / (co * co);
    }
    case LossWeighting::kUniform: return 1.0;
  }
  return 1.0;
}

DenoisingLoss denoising_loss(const Denoiser& d, const Field& y, std::span<const Field> condition, double sigma,
                             const Field& noise, LossWeighting weighting, const PrecondParams& p) {
  if (!(sigma > 0.0)) throw DomainError("denoising_loss requires sigma > 0");
  require_same_shape(y, noise, "denoising_loss");
  Field noisy(y.shape(), y.units());
  for (std::size_t i = 0; i < y.size(); ++i) noisy[i] = y[i] + noise[i];
  const Field den = d.denoise(noisy, condition, sigma);
  require_same_shape(den, y, "denoising_loss");

  const double w = loss_weight(weighting, sigma, p);
  const double m = static_cast<double>(y.size());
  DenoisingLoss out{0.0, Field(y.shape(), y.units())};
  double ss = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = static_cast<double>(den[i]) - y[i];
    ss += r * r;
    out.grad_denoised[i] = static_cast<float>(2.0 * w * r / m);
  }
  out.loss = w * ss / m;
  return out;
}

std::vector<TrainingPair> make_pairs(std::span<const FieldBatch> sequences, int window) {
  if (window < 1) throw DomainError("make_pairs: window must be >= 1");
  std::vector<TrainingPair> pairs;
  for (const auto& seq : sequences) {
    for (std::size_t t = static_cast<std::size_t>(window); t < seq.size(); ++t) {
      TrainingPair p;
      p.condition.assign(seq.begin() + static_cast<std::ptrdiff_t>(t) - window, seq.begin() + static_cast<std::ptrdiff_t>(t));
      p.target = seq[t];
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw DomainError("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw DomainError("TrainConfig: batch size must be >= 1");
  if (accumulation < 1) throw DomainError("TrainConfig: accumulation must be >= 1");
  if (patience < 1) throw DomainError("TrainConfig: patience must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw DomainError("TrainConfig: val_fraction must be in [0, 1)");
  if (!(adam.lr > 0.0)) throw DomainError("TrainConfig: learning rate must be > 0");
  sigma_dist.validate();
}

EarlyStopper::EarlyStopper(int patience) : patience_(patience) {
  if (patience < 1) throw DomainError("EarlyStopper: patience must be >= 1");
}

bool EarlyStopper::update(double val_loss) {
  improved_last_ = best_epoch_ < 0 || val_loss < best_;
  if (improved_last_) {
    best_ = val_loss;
    best_epoch_ = epochs_;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  ++epochs_;
  return since_best_ >= patience_;
}

BaselineModel::BaselineModel(std::shared_ptr<const ConvNet<float>> net) : net_(std::move(net)) {
  if (!net_) throw ContractViolation("BaselineModel: null network");
}

Field BaselineModel::predict(std::span<const Field> condition) const {
  if (condition.empty()) throw ContractViolation("baseline prediction needs condition frames");
  Field out = net_->forward(concat_channels(condition, condition.front().units()), 0.0);
  out.set_units(condition.front().units());
  return out;
}

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kUnconditional: return "uncond";
    case TaskKind::kConditional: return "cond";
    case TaskKind::kCorrDiffResidual: return "corrdiff";
  }
  return "cond";
}

void TrainTask::validate() const {
  if (target_channels < 1) throw DomainError("TrainTask: target channels must be >= 1");
  if (kind != TaskKind::kUnconditional && condition_channels < 1)
    throw DomainError("TrainTask: conditional tasks need condition channels");
  if (kind == TaskKind::kCorrDiffResidual && !baseline)
    throw ContractViolation("TrainTask: corrdiff_residual requires a frozen baseline model");
}

Field corrdiff_target(const Field& y, const Field& baseline_pred) {
  require_same_shape(y, baseline_pred, "corrdiff_target");
  Field r(y.shape(), y.units());
  for (std::size_t i = 0; i < y.size(); ++i) r[i] = y[i] - baseline_pred[i];
  return r;
}

std::vector<TrainingPair> make_corrdiff_pairs(std::span<const TrainingPair> pairs, const BaselineModel& baseline,
                                              NormStats* residual_stats) {
  std::vector<TrainingPair> out(pairs.size());
  std::vector<Field> residuals(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    const Field pred = baseline.predict(pairs[i].condition);
    residuals[i] = corrdiff_target(pairs[i].target, pred);
    out[i].condition = pairs[i].condition;
    out[i].condition.push_back(pred);
  });
  const NormStats stats = compute_channel_stats(residuals);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    Field& r = residuals[i];
    for (int c = 0; c < r.channels(); ++c) {
      const double m = stats.mean_for(c), s = stats.std_for(c);
      for (float& v : r.channel(c)) v = static_cast<float>((v - m) / s);
    }
    out[i].target = std::move(r);
  }
  if (residual_stats) *residual_stats = stats;
  return out;
}

ConvNetSpec diffusion_net_spec(const TrainTask& task, ConvNetSpec base) {
  task.validate();
  int in = task.target_channels;
  if (task.kind != TaskKind::kUnconditional) in += task.condition_channels;
  if (task.kind == TaskKind::kCorrDiffResidual) in += task.target_channels;
  base.in_channels = in;
  base.out_channels = task.target_channels;
  base.noise_embedding = true;
  return base;
}

namespace {

constexpr std::uint64_t kValStream = 0x7661'6c00ULL;
constexpr std::uint64_t kShuffleStream = 0x5348'5546ULL;

/// Loss of one diffusion sample; when `grad` is non-null also backpropagates into it with
/// the given scale.
double diffusion_sample(const ConvNet<float>& net, const TrainingPair& pair, std::uint64_t seed,
                        const TrainConfig& cfg, bool conditional, std::span<double> grad, double grad_scale) {
  Rng rng(seed);
  const double sigma = sample_train_sigma(cfg.sigma_dist, rng);
  const Field& y = pair.target;
  Field noisy(y.shape(), y.units());
  {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < y.size(); ++i) noisy[i] = static_cast<float>(y[i] + sigma * normal(rng));
  }
  const double skip = c_skip(sigma, cfg.precond);
  const double out = c_out(sigma, cfg.precond);
  const double in = c_in(sigma, cfg.precond);
  const double embed = c_noise(sigma);

  Field scaled(y.shape(), y.units());
  for (std::size_t i = 0; i < y.size(); ++i) scaled[i] = static_cast<float>(in * noisy[i]);
  const Field input = conditional ? stack_input(scaled, pair.condition) : scaled;

  Tape<float> tape;
  const FeatureMap<float> f = net.forward(to_feature_map<float>(input), embed, grad.empty() ? nullptr : &tape);
  if (static_cast<std::size_t>(f.data.size()) != y.size())
    throw ContractViolation("network output does not match target shape");

  const double w = loss_weight(cfg.weighting, sigma, cfg.precond);
  const double m = static_cast<double>(y.size());
  double ss = 0.0;
  FeatureMap<float> gf(f.channels, f.height, f.width);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = skip * noisy[i] + out * f.data[i] - y[i];
    ss += r * r;
    gf.data[i] = static_cast<float>(grad_scale * 2.0 * w * r * out / m);
  }
  if (!grad.empty()) net.backward(gf, embed, tape, grad);
  return w * ss / m;
}

double regression_sample(const ConvNet<float>& net, const TrainingPair& pair, std::span<double> grad,
                         double grad_scale) {
  const Field input = concat_channels(pair.condition, pair.condition.front().units());
  Tape<float> tape;
  const FeatureMap<float> f = net.forward(to_feature_map<float>(input), 0.0, grad.empty() ? nullptr : &tape);
  const Field& y = pair.target;
  if (f.data.size() != y.size()) throw ContractViolation("network output does not match target shape");
  const double m = static_cast<double>(y.size());
  double ss = 0.0;
  FeatureMap<float> gf(f.channels, f.height, f.width);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = static_cast<double>(f.data[i]) - y[i];
    ss += r * r;
    gf.data[i] = static_cast<float>(grad_scale * 2.0 * r / m);
  }
  if (!grad.empty()) net.backward(gf, 0.0, tape, grad);
  return ss / m;
}

/// Mean loss over `indices`; adds scale * mean gradient into `grad` (if non-empty).
/// Per-sample gradients are reduced in index order so the result does not depend on the
/// worker count.
double batch_pass(std::span<const std::size_t> indices, std::span<const std::uint64_t> seeds,
                  const SampleObjective& fn, std::span<double> grad, double scale) {
  const std::size_t n = indices.size();
  if (n == 0) return 0.0;
  std::vector<double> losses(n, 0.0);
  const double per = scale / static_cast<double>(n);
  if (grad.empty() || thread_count() <= 1) {
    for (std::size_t k = 0; k < n; ++k) losses[k] = fn(indices[k], seeds[k], grad, per);
  } else {
    std::vector<std::vector<double>> local(n);
    parallel_for(n, [&](std::size_t k) {
      local[k].assign(grad.size(), 0.0);
      losses[k] = fn(indices[k], seeds[k], local[k], per);
    });
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += local[k][j];
  }
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(n);
}

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

SplitIndices time_block_split(std::size_t n, double val_fraction) {
  std::size_t n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_fraction));
  if (val_fraction > 0.0 && n_val == 0 && n >= 2) n_val = 1;
  if (n_val >= n) throw ContractViolation("validation block leaves no training samples");
  SplitIndices s;
  for (std::size_t i = 0; i < n - n_val; ++i) s.train.push_back(i);
  for (std::size_t i = n - n_val; i < n; ++i) s.val.push_back(i);
  return s;
}

}  // namespace

TrainResult minimize(const Objective& obj, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (obj.num_samples == 0) throw ContractViolation("training needs at least one sample");
  if (!obj.set_params || !obj.sample) throw ContractViolation("objective is missing callbacks");
  const SplitIndices split = time_block_split(obj.num_samples, cfg.val_fraction);
  const std::size_t num_params = obj.initial.values.size();

  ParamVector current = obj.initial;
  obj.set_params(current.values);
  TrainResult result;
  result.params = current;
  AdamState adam;
  EarlyStopper stopper(cfg.patience);
  const auto start = std::chrono::steady_clock::now();
  const auto out_of_time = [&] {
    if (cfg.time_budget_seconds <= 0.0) return false;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() > cfg.time_budget_seconds;
  };

  // Without a hold-out block the training block is re-scored after each epoch, so the
  // monitored loss always belongs to the parameters that would be kept.
  const std::vector<std::size_t>& monitor = split.val.empty() ? split.train : split.val;
  std::vector<std::uint64_t> val_seeds;
  for (std::size_t i : monitor) val_seeds.push_back(derive_seed(cfg.seed, kValStream, i));

  const std::size_t per_sub = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t per_step = per_sub * static_cast<std::size_t>(cfg.accumulation);
  std::vector<double> grad(num_params);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = split.train;
    Rng shuffle_rng(derive_seed(cfg.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::vector<std::uint64_t> seeds(order.size());
    for (std::size_t k = 0; k < order.size(); ++k)
      seeds[k] = derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch), order[k]);

    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += per_step) {
      const std::size_t end = std::min(order.size(), begin + per_step);
      std::fill(grad.begin(), grad.end(), 0.0);
      std::size_t subs = 0;
      double step_loss = 0.0;
      for (std::size_t sub = begin; sub < end; sub += per_sub) {
        const std::size_t len = std::min(end, sub + per_sub) - sub;
        step_loss += batch_pass(std::span(order).subspan(sub, len), std::span(seeds).subspan(sub, len), obj.sample,
                                grad, 1.0) *
                     static_cast<double>(len);
        ++subs;
      }
      for (double& g : grad) g /= static_cast<double>(subs);
      if (!std::isfinite(step_loss)) {
        throw TrainingDiverged("non-finite training loss in epoch " + std::to_string(epoch), current, result.curve);
      }
      try {
        adam_step(current.values, grad, adam, cfg.adam);
      } catch (const NumericalError& e) {
        throw TrainingDiverged(e.what(), current, result.curve);
      }
      obj.set_params(current.values);
      loss_sum += step_loss;
      loss_count += end - begin;
      if (out_of_time()) {
        result.hit_time_budget = true;
        break;
      }
    }

    EpochLoss el;
    el.epoch = epoch;
    el.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(loss_count, 1));
    el.val_loss = batch_pass(monitor, val_seeds, obj.sample, {}, 1.0);
    if (!std::isfinite(el.val_loss))
      throw TrainingDiverged("non-finite validation loss in epoch " + std::to_string(epoch), result.params,
                             result.curve);
    result.curve.push_back(el);
    if (on_epoch) on_epoch(el);

    const bool stop = stopper.update(el.val_loss);
    if (stopper.improved_last()) {
      result.params = current;
      result.best_epoch = epoch;
    }
    if (stop) {
      result.stopped_early = true;
      break;
    }
    if (result.hit_time_budget) break;
  }
  obj.set_params(result.params.values);
  return result;
}


double diffusion_batch_gradient(const ConvNet<float>& net, std::span<const TrainingPair> batch,
                                std::span<const std::uint64_t> sample_seeds, const TrainConfig& cfg,
                                std::span<double> grad) {
  if (batch.size() != sample_seeds.size()) throw ContractViolation("one seed per batch sample required");
  std::vector<std::size_t> idx(batch.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const bool conditional = !batch.empty() && !batch.front().condition.empty();
  const SampleObjective fn = [&](std::size_t i, std::uint64_t seed, std::span<double> g, double s) {
    return diffusion_sample(net, batch[i], seed, cfg, conditional, g, s);
  };
  return batch_pass(idx, sample_seeds, fn, grad, 1.0);
}

DiffusionTrainResult train_diffusion(std::span<const TrainingPair> pairs, const TrainTask& task,
                                     const TrainConfig& cfg, const ConvNetSpec& net_spec,
                                     const EpochCallback& on_epoch) {
  task.validate();
  DiffusionTrainResult out;
  std::vector<TrainingPair> prepared;
  std::span<const TrainingPair> use = pairs;
  if (task.kind == TaskKind::kCorrDiffResidual) {
    NormStats stats;
    prepared = make_corrdiff_pairs(pairs, *task.baseline, &stats);
    out.residual_stats = stats;
    use = prepared;
  } else if (task.kind == TaskKind::kUnconditional) {
    prepared.reserve(pairs.size());
    for (const auto& p : pairs) prepared.push_back(TrainingPair{{}, p.target});
    use = prepared;
  }
  ConvNetSpec spec = diffusion_net_spec(task, net_spec);
  if (!use.empty()) {
    int cond_channels = 0;
    for (const auto& c : use.front().condition) cond_channels += c.channels();
    if (spec.in_channels != use.front().target.channels() + cond_channels)
      throw ContractViolation("task declares " + std::to_string(spec.in_channels) +
                              " network input channels but samples provide " +
                              std::to_string(use.front().target.channels() + cond_channels));
  }
  ConvNet<float> net(spec);
  const bool conditional = task.kind != TaskKind::kUnconditional;
  Objective obj;
  obj.num_samples = use.size();
  obj.initial = net.initial_params();
  obj.set_params = [&](std::span<const double> v) { net.set_params(v); };
  obj.sample = [&](std::size_t i, std::uint64_t seed, std::span<double> g, double s) {
    return diffusion_sample(net, use[i], seed, cfg, conditional, g, s);
  };
  out.train = minimize(obj, cfg, on_epoch);
  return out;
}

TrainResult train_baseline(std::span<const TrainingPair> pairs, const TrainConfig& cfg, const ConvNetSpec& net_spec,
                           const EpochCallback& on_epoch) {
  if (pairs.empty()) throw ContractViolation("train_baseline: no samples");
  ConvNetSpec spec = net_spec;
  spec.in_channels = 0;
  for (const auto& c : pairs.front().condition) spec.in_channels += c.channels();
  spec.out_channels = pairs.front().target.channels();
  spec.noise_embedding = false;
  ConvNet<float> net(spec);
  Objective obj;
  obj.num_samples = pairs.size();
  obj.initial = net.initial_params();
  obj.set_params = [&](std::span<const double> v) { net.set_params(v); };
  obj.sample = [&](std::size_t i, std::uint64_t, std::span<double> g, double s) {
    return regression_sample(net, pairs[i], g, s);
  };
  return minimize(obj, cfg, on_epoch);
}

}  // namespace edm
