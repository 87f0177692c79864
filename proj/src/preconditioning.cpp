#include "edm/preconditioning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "edm/error.hpp"

namespace edm {

namespace {

void check_sigma(double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw DomainError("sigma must be finite and >= 0");
}

void check_params(const PrecondParams& p) {
  if (!(p.sigma_data > 0.0)) throw DomainError("sigma_data must be > 0");
}

}  // namespace

double c_skip(double sigma, const PrecondParams& p) {
  check_sigma(sigma);
  check_params(p);
  const double sd2 = p.sigma_data * p.sigma_data;
  return sd2 / (sigma * sigma + sd2);
}

double c_out(double sigma, const PrecondParams& p) {
  check_sigma(sigma);
  check_params(p);
  return sigma * p.sigma_data / std::sqrt(p.sigma_data * p.sigma_data + sigma * sigma);
}

double c_in(double sigma, const PrecondParams& p) {
  check_sigma(sigma);
  check_params(p);
  return 1.0 / std::sqrt(p.sigma_data * p.sigma_data + sigma * sigma);
}

double c_noise(double sigma) {
  if (!(sigma > 0.0)) throw DomainError("c_noise requires sigma > 0");
  return std::log(sigma) / 4.0;
}

PreconditionedDenoiser::PreconditionedDenoiser(std::shared_ptr<const RawNetwork> net, PrecondParams p)
    : net_(std::move(net)), params_(p) {
  if (!net_) throw ContractViolation("PreconditionedDenoiser: null network");
  check_params(params_);
}

Field PreconditionedDenoiser::denoise(const Field& x, std::span<const Field> condition, double sigma) const {
  check_sigma(sigma);
  if (sigma == 0.0) return x;  // c_skip = 1, c_out = 0; c_noise is undefined here
  const double skip = c_skip(sigma, params_);
  const double out = c_out(sigma, params_);
  const double in = c_in(sigma, params_);

  Field scaled(x.shape(), x.units());
  for (std::size_t i = 0; i < x.size(); ++i) scaled[i] = static_cast<float>(in * x[i]);
  const Field f = net_->apply(scaled, condition, c_noise(sigma));
  if (f.shape() != x.shape())
    throw ContractViolation("raw network returned shape " + to_string(f.shape()) + " for input " +
                            to_string(x.shape()));
  Field d(x.shape(), x.units());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = static_cast<float>(skip * x[i] + out * f[i]);
  return d;
}

std::shared_ptr<const Denoiser> wrap_denoiser(std::shared_ptr<const RawNetwork> net, PrecondParams p) {
  return std::make_shared<PreconditionedDenoiser>(std::move(net), p);
}

GaussianMixturePrior::GaussianMixturePrior(std::vector<GaussianComponent> components)
    : components_(std::move(components)) {
  if (components_.empty()) throw ContractViolation("mixture prior needs at least one component");
  double total = 0.0;
  const Shape s = components_.front().mean.shape();
  for (const auto& c : components_) {
    if (!(c.weight > 0.0)) throw DomainError("mixture weights must be positive");
    if (c.mean.shape() != s || c.variance.shape() != s)
      throw ContractViolation("mixture components must share one shape");
    for (float v : c.variance.values()) {
      if (!(v > 0.0f)) throw DomainError("mixture component variances must be positive");
    }
    total += c.weight;
  }
  for (auto& c : components_) c.weight /= total;
}

GaussianMixturePrior GaussianMixturePrior::isotropic(Shape shape, double mean, double variance) {
  return GaussianMixturePrior({GaussianComponent{1.0, Field(shape, Units::kNormalized, static_cast<float>(mean)),
                                                 Field(shape, Units::kNormalized, static_cast<float>(variance))}});
}

AnalyticDenoiser::AnalyticDenoiser(GaussianMixturePrior prior) : prior_(std::move(prior)) {}

Field AnalyticDenoiser::denoise(const Field& x, std::span<const Field>, double sigma) const {
  check_sigma(sigma);
  if (x.shape() != prior_.shape())
    throw ContractViolation("analytic denoiser: input shape " + to_string(x.shape()) + " vs prior " +
                            to_string(prior_.shape()));
  if (sigma == 0.0) return x;
  const double s2 = sigma * sigma;
  const auto& comps = prior_.components();
  const std::size_t n = x.size();

  // log responsibilities: log w_k + log N(x; mu_k, (v_k + sigma^2) I)
  std::vector<double> log_r(comps.size());
  for (std::size_t k = 0; k < comps.size(); ++k) {
    double acc = std::log(comps[k].weight);
    for (std::size_t i = 0; i < n; ++i) {
      const double var = comps[k].variance[i] + s2;
      const double d = x[i] - comps[k].mean[i];
      acc -= 0.5 * (d * d / var + std::log(var));
    }
    log_r[k] = acc;
  }
  const double peak = *std::max_element(log_r.begin(), log_r.end());
  double norm = 0.0;
  for (auto& l : log_r) {
    l = std::exp(l - peak);
    norm += l;
  }

  std::vector<double> acc(n, 0.0);
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const double r = log_r[k] / norm;
    if (r == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = comps[k].variance[i];
      acc[i] += r * (v * x[i] + s2 * comps[k].mean[i]) / (v + s2);
    }
  }
  Field out(x.shape(), x.units());
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

Field score_from_denoiser(const Denoiser& d, const Field& x, std::span<const Field> condition, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("score_from_denoiser requires sigma > 0");
  const Field den = d.denoise(x, condition, sigma);
  require_same_shape(den, x, "score_from_denoiser");
  Field out(x.shape(), x.units());
  const double inv = 1.0 / (sigma * sigma);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>((den[i] - static_cast<double>(x[i])) * inv);
  return out;
}

}  // namespace edm
