#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "edm/core_grid.hpp"
#include "edm/error.hpp"
#include "edm/preconditioning.hpp"
#include "edm/random.hpp"

namespace edm {

class Autoencoder;

struct SampleConfig {
  int num_steps = 36;
  double sigma_max = 80.0;
  double sigma_min = 0.002;
  double rho = 7.0;
  /// Effective per-step churn gamma, 0 <= gamma <= sqrt(2) - 1.
  double s_churn = 0.0;
  double s_noise = 1.0;
  /// Churn is applied only while s_tmin <= sigma_i <= s_tmax.
  double s_tmin = 0.0;
  double s_tmax = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  /// Heun correction on every step with sigma_next > 0.
  bool second_order = false;

  void validate() const;
};

/// Largest per-step gamma: one full sigma_i of fresh noise.
inline constexpr double kMaxChurnGamma = 0.41421356237309503;

/// Converts a total churn budget (the convention where S_churn is spread over all steps)
/// into the per-step gamma: min(raw / num_steps, sqrt(2) - 1).
double churn_gamma_from_raw(double raw, int num_steps);

/// x_next = x + (x - D) / sigma * (sigma_next - sigma), evaluated as D + (sigma_next / sigma)(x - D)
/// so that sigma_next = 0 lands exactly on D.
Field euler_step(const Field& x, double sigma, double sigma_next, const Field& denoised);
Field euler_step(const Denoiser& d, const Field& x, std::span<const Field> condition, double sigma,
                 double sigma_next);

struct ChurnResult {
  Field x_hat;
  double sigma_hat = 0.0;
};

/// sigma_hat = sigma (1 + gamma); x_hat = x + sqrt(sigma_hat^2 - sigma^2) s_noise eps. Outside
/// [s_tmin, s_tmax] gamma is treated as 0 and no random numbers are drawn.
ChurnResult churn_inject(const Field& x, double sigma, double gamma, double s_noise, Rng& rng, double s_tmin = 0.0,
                         double s_tmax = std::numeric_limits<double>::infinity());

struct TrajectoryPoint {
  double sigma = 0.0;
  Field snapshot;
};

/// States x_i at each schedule level (sigma strictly decreasing, ending at 0).
struct Trajectory {
  std::vector<TrajectoryPoint> points;
  /// Flat pixel indices written by write_csv; empty means the first pixel only.
  std::vector<std::size_t> trace_pixels;

  /// CSV with columns step,sigma,pixel,value.
  void write_csv(const std::filesystem::path& path) const;
};

/// Raised when an intermediate state turns non-finite; carries the trajectory so far.
class SamplingError : public NumericalError {
 public:
  SamplingError(const std::string& what, Trajectory t) : NumericalError(what), trajectory_(std::move(t)) {}
  const Trajectory& trajectory() const { return trajectory_; }

 private:
  Trajectory trajectory_;
};

/// Runs the schedule from a given initial state at sigma_max (already scaled).
Field sample_from(const Denoiser& d, Field x, std::span<const Field> condition, const SampleConfig& cfg,
                  Rng& churn_rng, Trajectory* trajectory = nullptr);

/// x_0 ~ N(0, sigma_max^2 I) from substream 0 of cfg.seed, churn noise from substream 1.
/// A pure function of (cfg, condition, d, shape).
Field generate(const Denoiser& d, std::span<const Field> condition, const SampleConfig& cfg, Shape shape,
               Units units = Units::kNormalized, Trajectory* trajectory = nullptr);

/// Encodes the condition, samples in latent space, decodes. `data_shape` is the
/// data-space shape of the result.
Field generate_latent(const Denoiser& d_latent, const Autoencoder& ae, std::span<const Field> condition,
                      const SampleConfig& cfg, Shape data_shape, Trajectory* trajectory = nullptr);

}  // namespace edm
