#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "edm/core_grid.hpp"
#include "edm/network.hpp"
#include "edm/noise_schedule.hpp"
#include "edm/preconditioning.hpp"

namespace edm {

enum class LossWeighting { kInverseSigma, kEdm, kUniform };

std::string_view to_string(LossWeighting w);
LossWeighting loss_weighting_from_string(std::string_view s);

/// inverse_sigma: 1/sigma; edm: 1/c_out(sigma)^2; uniform: 1.
double loss_weight(LossWeighting w, double sigma, const PrecondParams& p);

struct DenoisingLoss {
  double loss = 0.0;
  Field grad_denoised;  // d(loss)/d(D output)
};

/// weight(sigma) * mean over pixels of (D(y + n | c; sigma) - y)^2, plus its gradient with
/// respect to the denoiser output.
DenoisingLoss denoising_loss(const Denoiser& d, const Field& y, std::span<const Field> condition, double sigma,
                             const Field& noise, LossWeighting weighting, const PrecondParams& p = {});

/// One supervised example: condition frames (oldest first) and the target frame.
struct TrainingPair {
  std::vector<Field> condition;
  Field target;
};

/// Slides a window of `window` frames over each sequence; the frame after the window is
/// the target.
std::vector<TrainingPair> make_pairs(std::span<const FieldBatch> sequences, int window);

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  int accumulation = 1;
  LossWeighting weighting = LossWeighting::kEdm;
  int patience = 10;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
  AdamConfig adam{};
  TrainSigmaDist sigma_dist{};
  PrecondParams precond{};
  /// Wall-clock cap in seconds; 0 disables. Checked between optimizer steps.
  double time_budget_seconds = 0.0;

  void validate() const;
};

/// Stops once the monitored loss has failed to improve for `patience` consecutive epochs.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience);

  /// Records one epoch; returns true when training should stop.
  bool update(double val_loss);
  bool improved_last() const { return improved_last_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }
  int epochs_seen() const { return epochs_; }

 private:
  int patience_;
  int epochs_ = 0;
  int best_epoch_ = -1;
  int since_best_ = 0;
  bool improved_last_ = false;
  double best_ = 0.0;
};

struct EpochLoss {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  ParamVector params;  // best-validation parameters
  std::vector<EpochLoss> curve;
  int best_epoch = -1;
  bool stopped_early = false;
  bool hit_time_budget = false;
};

/// Thrown when a loss or gradient turns non-finite; carries the last finite parameters.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, ParamVector last_good, std::vector<EpochLoss> curve)
      : std::runtime_error(what), last_good_(std::move(last_good)), curve_(std::move(curve)) {}
  const ParamVector& last_good() const { return last_good_; }
  const std::vector<EpochLoss>& curve() const { return curve_; }

 private:
  ParamVector last_good_;
  std::vector<EpochLoss> curve_;
};

/// A deterministic single-frame regressor G(condition) -> next frame.
class BaselineModel {
 public:
  explicit BaselineModel(std::shared_ptr<const ConvNet<float>> net);
  Field predict(std::span<const Field> condition) const;
  const ConvNet<float>& net() const { return *net_; }

 private:
  std::shared_ptr<const ConvNet<float>> net_;
};

enum class TaskKind { kUnconditional, kConditional, kCorrDiffResidual };

std::string_view to_string(TaskKind k);

struct TrainTask {
  TaskKind kind = TaskKind::kConditional;
  int condition_channels = 2;
  int target_channels = 1;
  /// Required for kCorrDiffResidual: the frozen regressor whose errors are modelled.
  std::shared_ptr<const BaselineModel> baseline;

  void validate() const;
};

/// residual = y - baseline_pred.
Field corrdiff_target(const Field& y, const Field& baseline_pred);

/// Residual-learning pairs: the condition gains the baseline prediction as an extra
/// channel and the target becomes the residual, standardized with `residual_stats`.
std::vector<TrainingPair> make_corrdiff_pairs(std::span<const TrainingPair> pairs, const BaselineModel& baseline,
                                              NormStats* residual_stats);

struct DiffusionTrainResult {
  TrainResult train;
  std::optional<NormStats> residual_stats;  // set for kCorrDiffResidual
};

/// Default network shape for a task: input = target channels + condition channels.
ConvNetSpec diffusion_net_spec(const TrainTask& task, ConvNetSpec base = {});

/// Optional per-epoch progress hook.
using EpochCallback = std::function<void(const EpochLoss&)>;

/// Loss of sample `index` under the random stream `seed`. When `grad` is non-empty it also
/// adds scale * d(loss)/d(params) into it. Must be safe to call concurrently.
using SampleObjective =
    std::function<double(std::size_t index, std::uint64_t seed, std::span<double> grad, double scale)>;

/// A minibatch problem over a flat parameter vector.
struct Objective {
  std::size_t num_samples = 0;
  ParamVector initial;
  std::function<void(std::span<const double>)> set_params;
  SampleObjective sample;
};

/// Adam over shuffled minibatches with gradient accumulation, a trailing contiguous
/// validation block, early stopping and best-parameter tracking. Sample i of epoch e uses
/// seed derive_seed(cfg.seed, e, i); validation sample i uses a fixed per-index seed.
/// On return set_params has been called with the best parameters.
TrainResult minimize(const Objective& objective, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Trains F in D = c_skip x + c_out F(c_in x | c; c_noise) on `pairs` (normalized units).
/// The last val_fraction of pairs is held out as a contiguous validation block.
DiffusionTrainResult train_diffusion(std::span<const TrainingPair> pairs, const TrainTask& task,
                                     const TrainConfig& cfg, const ConvNetSpec& net_spec,
                                     const EpochCallback& on_epoch = {});

/// Plain MSE regression y ~ G(c) with early stopping on the held-out block.
TrainResult train_baseline(std::span<const TrainingPair> pairs, const TrainConfig& cfg, const ConvNetSpec& net_spec,
                           const EpochCallback& on_epoch = {});

/// Summed parameter gradient of the diffusion objective over `batch`, averaged over its
/// samples. sigma and noise for sample i come from `sample_seeds[i]`. Exposed so the
/// accumulation and permutation properties can be checked directly.
double diffusion_batch_gradient(const ConvNet<float>& net, std::span<const TrainingPair> batch,
                                std::span<const std::uint64_t> sample_seeds, const TrainConfig& cfg,
                                std::span<double> grad);

}  // namespace edm
