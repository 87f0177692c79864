#pragma once

#include <string_view>
#include <vector>

#include "edm/random.hpp"

namespace edm {

/// Descending noise levels sigma_0 = sigma_max > ... > sigma_{N-1} = sigma_min > sigma_N = 0.
struct SigmaSchedule {
  std::vector<double> sigmas;  // num_steps + 1 entries, last is exactly 0
  int num_steps = 0;
  double sigma_max = 0.0;
  double sigma_min = 0.0;
  double rho = 0.0;
};

/// Power-rho interpolation between sigma_max^(1/rho) and sigma_min^(1/rho), then a trailing 0.
SigmaSchedule build_schedule(int num_steps, double sigma_max, double sigma_min, double rho);

enum class SigmaDistKind { kLogNormal, kLogUniform };

std::string_view to_string(SigmaDistKind k);
SigmaDistKind sigma_dist_from_string(std::string_view s);

/// Noise-level distribution used while training. For log-normal, ln(sigma) ~ N(loc, scale^2);
/// for log-uniform, ln(sigma) ~ U(loc - scale, loc + scale). Draws are clamped to [lo, hi].
struct TrainSigmaDist {
  SigmaDistKind kind = SigmaDistKind::kLogNormal;
  double loc = -1.2;
  double scale = 1.2;
  double lo = 0.002;
  double hi = 80.0;

  void validate() const;
};

double sample_train_sigma(const TrainSigmaDist& dist, Rng& rng);

}  // namespace edm
