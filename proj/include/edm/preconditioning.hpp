#pragma once

#include <memory>
#include <span>
#include <vector>

#include "edm/core_grid.hpp"

namespace edm {

struct PrecondParams {
  double sigma_data = 1.0;  // standard deviation of the (normalized) training data
};

double c_skip(double sigma, const PrecondParams& p);
double c_out(double sigma, const PrecondParams& p);
double c_in(double sigma, const PrecondParams& p);
/// ln(sigma) / 4. Throws DomainError for sigma <= 0.
double c_noise(double sigma);

/// Any D(x | condition; sigma): returns the estimate of the clean field, same shape as x.
/// Implementations must be safe for concurrent const use.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Field denoise(const Field& x, std::span<const Field> condition, double sigma) const = 0;
};

/// The raw network F in D = c_skip x + c_out F(c_in x | c; c_noise).
class RawNetwork {
 public:
  virtual ~RawNetwork() = default;
  virtual Field apply(const Field& scaled_x, std::span<const Field> condition,
                      double noise_embedding) const = 0;
};

class PreconditionedDenoiser final : public Denoiser {
 public:
  PreconditionedDenoiser(std::shared_ptr<const RawNetwork> net, PrecondParams p);

  Field denoise(const Field& x, std::span<const Field> condition, double sigma) const override;

  const RawNetwork& network() const { return *net_; }
  const PrecondParams& params() const { return params_; }

 private:
  std::shared_ptr<const RawNetwork> net_;
  PrecondParams params_;
};

std::shared_ptr<const Denoiser> wrap_denoiser(std::shared_ptr<const RawNetwork> net, PrecondParams p);

/// One mixture component with independent pixels: mean and variance fields of the
/// target shape. A scalar component uses constant fields.
struct GaussianComponent {
  double weight = 1.0;
  Field mean;
  Field variance;
};

/// Mixture of diagonal Gaussians over fields; a single component is a plain Gaussian.
class GaussianMixturePrior {
 public:
  explicit GaussianMixturePrior(std::vector<GaussianComponent> components);

  static GaussianMixturePrior isotropic(Shape shape, double mean, double variance);

  const std::vector<GaussianComponent>& components() const { return components_; }
  Shape shape() const { return components_.front().mean.shape(); }

 private:
  std::vector<GaussianComponent> components_;
};

/// Exact posterior mean E[y | y + n = x] for y drawn from the prior and n ~ N(0, sigma^2 I).
class AnalyticDenoiser final : public Denoiser {
 public:
  explicit AnalyticDenoiser(GaussianMixturePrior prior);

  Field denoise(const Field& x, std::span<const Field> condition, double sigma) const override;

  const GaussianMixturePrior& prior() const { return prior_; }

 private:
  GaussianMixturePrior prior_;
};

/// (D(x | c; sigma) - x) / sigma^2, the score of the sigma-smoothed density.
Field score_from_denoiser(const Denoiser& d, const Field& x, std::span<const Field> condition, double sigma);

}  // namespace edm
