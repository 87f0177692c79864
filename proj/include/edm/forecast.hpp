#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "edm/autoencoder.hpp"
#include "edm/core_grid.hpp"
#include "edm/preconditioning.hpp"
#include "edm/sampler.hpp"
#include "edm/training.hpp"

namespace edm {

/// One autoregressive step: the next frame from the most recent frames (oldest first).
/// Implementations must be safe for concurrent const use.
class Forecaster {
 public:
  virtual ~Forecaster() = default;
  virtual Field step(std::span<const Field> window, std::uint64_t step_seed) const = 0;
  virtual std::string name() const = 0;
};

/// Repeats the latest frame.
class PersistenceForecaster final : public Forecaster {
 public:
  Field step(std::span<const Field> window, std::uint64_t step_seed) const override;
  std::string name() const override { return "persistence"; }
};

/// Deterministic regressor G(window).
class BaselineForecaster final : public Forecaster {
 public:
  explicit BaselineForecaster(std::shared_ptr<const BaselineModel> model);
  Field step(std::span<const Field> window, std::uint64_t step_seed) const override;
  std::string name() const override { return "baseline"; }

 private:
  std::shared_ptr<const BaselineModel> model_;
};

/// Conditional diffusion: generate(D, window) with the step seed.
class DiffusionForecaster final : public Forecaster {
 public:
  DiffusionForecaster(std::shared_ptr<const Denoiser> denoiser, SampleConfig cfg);
  Field step(std::span<const Field> window, std::uint64_t step_seed) const override;
  std::string name() const override { return "diffusion"; }

 private:
  std::shared_ptr<const Denoiser> denoiser_;
  SampleConfig cfg_;
};

/// Draws the (destandardized) residual given the window with the baseline prediction appended.
class ResidualGenerator {
 public:
  virtual ~ResidualGenerator() = default;
  virtual Field sample(std::span<const Field> condition, std::uint64_t seed) const = 0;
};

class ZeroResidual final : public ResidualGenerator {
 public:
  Field sample(std::span<const Field> condition, std::uint64_t seed) const override;
};

/// Diffusion over standardized residuals; the sample is mapped back with residual_stats.
class DiffusionResidual final : public ResidualGenerator {
 public:
  DiffusionResidual(std::shared_ptr<const Denoiser> denoiser, SampleConfig cfg, NormStats residual_stats);
  Field sample(std::span<const Field> condition, std::uint64_t seed) const override;

 private:
  std::shared_ptr<const Denoiser> denoiser_;
  SampleConfig cfg_;
  NormStats stats_;
};

/// baseline(window) + residual(window, baseline).
class CorrDiffForecaster final : public Forecaster {
 public:
  CorrDiffForecaster(std::shared_ptr<const BaselineModel> baseline, std::shared_ptr<const ResidualGenerator> residual);

  struct Components {
    Field baseline;
    Field residual;
    Field total;
  };
  Components components(std::span<const Field> window, std::uint64_t step_seed) const;

  Field step(std::span<const Field> window, std::uint64_t step_seed) const override;
  std::string name() const override { return "corrdiff"; }

 private:
  std::shared_ptr<const BaselineModel> baseline_;
  std::shared_ptr<const ResidualGenerator> residual_;
};

/// Diffusion in an autoencoder latent space.
class LatentForecaster final : public Forecaster {
 public:
  LatentForecaster(std::shared_ptr<const Denoiser> latent_denoiser, std::shared_ptr<const Autoencoder> ae,
                   SampleConfig cfg);
  Field step(std::span<const Field> window, std::uint64_t step_seed) const override;
  std::string name() const override { return "latent"; }

 private:
  std::shared_ptr<const Denoiser> denoiser_;
  std::shared_ptr<const Autoencoder> ae_;
  SampleConfig cfg_;
};

struct RolloutConfig {
  int leads = 18;
  int window = 2;
  int members = 10;
  /// Index of the first member; members are first_member .. first_member + members - 1.
  int first_member = 0;
  std::uint64_t base_seed = 0;
  /// Clamp generated frames to [clamp_min, clamp_max] before they re-enter the window.
  bool clamp = false;
  double clamp_min = 0.0;
  double clamp_max = 0.0;

  void validate() const;
  std::string describe() const;
};

/// Seed of ensemble member m.
std::uint64_t member_seed(std::uint64_t base_seed, int member);
/// Seed of lead k (0-based) within a member.
std::uint64_t lead_seed(std::uint64_t member_seed, int lead);

/// Frames for leads 1..cfg.leads. The window slides over generated frames only.
std::vector<Field> rollout(const Forecaster& model, std::span<const Field> init_window, const RolloutConfig& cfg,
                           std::uint64_t member_seed);

struct EnsembleForecast {
  std::vector<std::vector<Field>> members;  // [member][lead]
  std::vector<int> member_indices;
  std::vector<std::uint64_t> seeds;
  std::string model;
  std::string config_hash;
  std::string init_tag;

  int member_count() const { return static_cast<int>(members.size()); }
  int lead_count() const { return members.empty() ? 0 : static_cast<int>(members.front().size()); }
  /// Per-lead mean over members.
  std::vector<Field> mean() const;
  void validate() const;
};

EnsembleForecast ensemble(const Forecaster& model, std::span<const Field> init_window, const RolloutConfig& cfg,
                          std::string init_tag = {});

/// Rank-4 tensor [members * leads, C, H, W] (member-major) plus <path>.json with members,
/// leads, seeds and provenance.
void write_ensemble(const std::filesystem::path& path, const EnsembleForecast& e);
EnsembleForecast read_ensemble(const std::filesystem::path& path);

}  // namespace edm
