#include "edm/sampler.hpp"

#include <cmath>
#include <fstream>

#include "edm/autoencoder.hpp"
#include "edm/noise_schedule.hpp"

namespace edm {

void SampleConfig::validate() const {
  if (num_steps < 1) throw DomainError("SampleConfig: num_steps must be >= 1");
  if (!(sigma_max > sigma_min) || !(sigma_min > 0.0)) throw DomainError("SampleConfig: need sigma_max > sigma_min > 0");
  if (!(rho >= 1.0)) throw DomainError("SampleConfig: rho must be >= 1");
  if (!(s_churn >= 0.0 && s_churn <= kMaxChurnGamma + 1e-12))
    throw DomainError("SampleConfig: per-step churn gamma must be in [0, sqrt(2)-1]");
  if (!(s_noise > 0.0)) throw DomainError("SampleConfig: s_noise must be > 0");
  if (!(s_tmin >= 0.0) || !(s_tmax >= s_tmin)) throw DomainError("SampleConfig: need 0 <= s_tmin <= s_tmax");
}

double churn_gamma_from_raw(double raw, int num_steps) {
  if (num_steps < 1) throw DomainError("churn_gamma_from_raw: num_steps must be >= 1");
  if (!(raw >= 0.0)) throw DomainError("churn_gamma_from_raw: raw churn must be >= 0");
  return std::min(raw / num_steps, kMaxChurnGamma);
}

Field euler_step(const Field& x, double sigma, double sigma_next, const Field& denoised) {
  if (!(sigma > 0.0)) throw DomainError("euler_step: sigma must be > 0");
  if (!(sigma_next >= 0.0 && sigma_next < sigma)) throw DomainError("euler_step: need 0 <= sigma_next < sigma");
  require_same_shape(x, denoised, "euler_step");
  Field out(x.shape(), x.units());
  const double ratio = sigma_next / sigma;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dv = denoised[i];
    out[i] = static_cast<float>(dv + ratio * (static_cast<double>(x[i]) - dv));
  }
  return out;
}

Field euler_step(const Denoiser& d, const Field& x, std::span<const Field> condition, double sigma,
                 double sigma_next) {
  return euler_step(x, sigma, sigma_next, d.denoise(x, condition, sigma));
}

ChurnResult churn_inject(const Field& x, double sigma, double gamma, double s_noise, Rng& rng, double s_tmin,
                         double s_tmax) {
  if (!(gamma >= 0.0)) throw DomainError("churn_inject: gamma must be >= 0");
  if (gamma == 0.0 || sigma < s_tmin || sigma > s_tmax) return {x, sigma};
  const double sigma_hat = sigma * (1.0 + gamma);
  const double scale = std::sqrt(sigma_hat * sigma_hat - sigma * sigma) * s_noise;
  ChurnResult r{Field(x.shape(), x.units()), sigma_hat};
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) r.x_hat[i] = static_cast<float>(x[i] + scale * normal(rng));
  return r;
}

void Trajectory::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write trajectory to " + path.string());
  out << "step,sigma,pixel,value\n";
  out.precision(9);
  const std::vector<std::size_t> pixels = trace_pixels.empty() ? std::vector<std::size_t>{0} : trace_pixels;
  for (std::size_t s = 0; s < points.size(); ++s) {
    for (std::size_t p : pixels) {
      if (p >= points[s].snapshot.size()) throw ContractViolation("trajectory trace pixel out of range");
      out << s << ',' << points[s].sigma << ',' << p << ',' << points[s].snapshot[p] << '\n';
    }
  }
}

Field sample_from(const Denoiser& d, Field x, std::span<const Field> condition, const SampleConfig& cfg,
                  Rng& churn_rng, Trajectory* trajectory) {
  cfg.validate();
  const SigmaSchedule sched = build_schedule(cfg.num_steps, cfg.sigma_max, cfg.sigma_min, cfg.rho);
  Trajectory local;
  Trajectory& traj = trajectory ? *trajectory : local;
  const auto record = [&](double sigma, const Field& f) {
    if (trajectory) traj.points.push_back({sigma, f});
  };
  const auto check = [&](const Field& f, double sigma, int step) {
    if (!f.all_finite()) {
      if (!trajectory) traj.points.push_back({sigma, f});
      throw SamplingError("non-finite sampler state at step " + std::to_string(step) + " (sigma " +
                              std::to_string(sigma) + ")",
                          traj);
    }
  };

  record(sched.sigmas[0], x);
  for (int i = 0; i < cfg.num_steps; ++i) {
    const double sigma = sched.sigmas[i];
    const double sigma_next = sched.sigmas[i + 1];
    ChurnResult c = churn_inject(x, sigma, cfg.s_churn, cfg.s_noise, churn_rng, cfg.s_tmin, cfg.s_tmax);
    const double sh = c.sigma_hat;
    const Field den = d.denoise(c.x_hat, condition, sh);
    check(den, sh, i);
    Field next = euler_step(c.x_hat, sh, sigma_next, den);
    if (cfg.second_order && sigma_next > 0.0) {
      const Field den2 = d.denoise(next, condition, sigma_next);
      check(den2, sigma_next, i);
      const double h = sigma_next - sh;
      for (std::size_t k = 0; k < next.size(); ++k) {
        const double xh = c.x_hat[k];
        const double d1 = (xh - den[k]) / sh;
        const double d2 = (static_cast<double>(next[k]) - den2[k]) / sigma_next;
        next[k] = static_cast<float>(xh + h * 0.5 * (d1 + d2));
      }
    }
    check(next, sigma_next, i);
    x = std::move(next);
    record(sigma_next, x);
  }
  return x;
}

Field generate(const Denoiser& d, std::span<const Field> condition, const SampleConfig& cfg, Shape shape, Units units,
               Trajectory* trajectory) {
  cfg.validate();
  Field x(shape, units);
  Rng init_rng(derive_seed(cfg.seed, 0));
  fill_normal(x.values(), init_rng, cfg.sigma_max);
  Rng churn_rng(derive_seed(cfg.seed, 1));
  return sample_from(d, std::move(x), condition, cfg, churn_rng, trajectory);
}

Field generate_latent(const Denoiser& d_latent, const Autoencoder& ae, std::span<const Field> condition,
                      const SampleConfig& cfg, Shape data_shape, Trajectory* trajectory) {
  std::vector<Field> latent_cond;
  latent_cond.reserve(condition.size());
  for (const Field& c : condition) latent_cond.push_back(ae.encode(c));
  const Shape ls = ae.latent_shape(data_shape);
  const Field z = generate(d_latent, latent_cond, cfg, ls, ae.latent_units(), trajectory);
  Field out = ae.decode(z);
  if (out.shape() != data_shape) throw ContractViolation("autoencoder decode returned " + to_string(out.shape()) +
                                                         ", expected " + to_string(data_shape));
  return out;
}

}  // namespace edm
