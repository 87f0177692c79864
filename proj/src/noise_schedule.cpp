#include "edm/noise_schedule.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "edm/error.hpp"

namespace edm {

SigmaSchedule build_schedule(int num_steps, double sigma_max, double sigma_min, double rho) {
  if (num_steps < 1) throw DomainError("build_schedule: num_steps must be >= 1");
  if (!(sigma_min > 0.0)) throw DomainError("build_schedule: sigma_min must be > 0");
  if (!(sigma_max > sigma_min)) throw DomainError("build_schedule: sigma_max must exceed sigma_min");
  if (!(rho >= 1.0)) throw DomainError("build_schedule: rho must be >= 1");

  SigmaSchedule s{{}, num_steps, sigma_max, sigma_min, rho};
  s.sigmas.reserve(static_cast<std::size_t>(num_steps) + 1);
  if (num_steps == 1) {
    s.sigmas = {sigma_max, 0.0};
    return s;
  }
  const double hi = std::pow(sigma_max, 1.0 / rho);
  const double lo = std::pow(sigma_min, 1.0 / rho);
  for (int i = 0; i < num_steps; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(num_steps - 1);
    s.sigmas.push_back(std::pow(hi + t * (lo - hi), rho));
  }
  // Endpoints are pinned so round-off in pow() never moves them.
  s.sigmas.front() = sigma_max;
  s.sigmas[static_cast<std::size_t>(num_steps) - 1] = sigma_min;
  s.sigmas.push_back(0.0);
  return s;
}

std::string_view to_string(SigmaDistKind k) {
  return k == SigmaDistKind::kLogNormal ? "lognormal" : "loguniform";
}

SigmaDistKind sigma_dist_from_string(std::string_view s) {
  if (s == "lognormal" || s == "log-normal") return SigmaDistKind::kLogNormal;
  if (s == "loguniform" || s == "log-uniform") return SigmaDistKind::kLogUniform;
  throw DomainError("unknown training sigma distribution '" + std::string(s) + "'");
}

void TrainSigmaDist::validate() const {
  if (!(scale > 0.0)) throw DomainError("TrainSigmaDist: scale must be > 0");
  if (!(lo > 0.0)) throw DomainError("TrainSigmaDist: clamp lower bound must be > 0");
  if (!(hi >= lo)) throw DomainError("TrainSigmaDist: clamp range is empty");
}

double sample_train_sigma(const TrainSigmaDist& dist, Rng& rng) {
  double log_sigma = 0.0;
  if (dist.kind == SigmaDistKind::kLogNormal) {
    std::normal_distribution<double> normal(dist.loc, dist.scale);
    log_sigma = normal(rng);
  } else {
    std::uniform_real_distribution<double> uniform(dist.loc - dist.scale, dist.loc + dist.scale);
    log_sigma = uniform(rng);
  }
  return std::clamp(std::exp(log_sigma), dist.lo, dist.hi);
}

}  // namespace edm
