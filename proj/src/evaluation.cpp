#include "edm/evaluation.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>
#include <numeric>

#include "edm/error.hpp"

namespace edm {

void PixelMetrics::check() const {
  const double tol = 1e-9 * std::max(1.0, rmse);
  if (!(mae >= 0.0) || !(rmse >= 0.0)) throw NumericalError("metrics: negative or NaN error magnitude");
  if (mae + tol < std::abs(me)) throw NumericalError("metrics: MAE < |ME|");
  if (rmse + tol < mae) throw NumericalError("metrics: RMSE < MAE");
}

PixelMetrics pixel_metrics(std::span<const Field> truth, std::span<const Field> forecast) {
  if (truth.size() != forecast.size())
    throw ContractViolation("pixel_metrics: " + std::to_string(truth.size()) + " truths vs " +
                            std::to_string(forecast.size()) + " forecasts");
  if (truth.empty()) throw ContractViolation("pixel_metrics: empty set");
  PixelMetrics m;
  m.images = truth.size();
  m.pixels_per_image = truth.front().size();
  double me = 0.0, mae = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    require_same_shape(truth[i], forecast[i], "pixel_metrics");
    if (truth[i].size() != m.pixels_per_image) throw ContractViolation("pixel_metrics: images differ in size");
    if (truth[i].units() != forecast[i].units()) throw ContractViolation("pixel_metrics: unit mismatch");
    double s = 0.0, a = 0.0, q = 0.0;
    for (std::size_t j = 0; j < truth[i].size(); ++j) {
      const double e = static_cast<double>(truth[i][j]) - forecast[i][j];
      s += e;
      a += std::abs(e);
      q += e * e;
    }
    const double mpx = static_cast<double>(m.pixels_per_image);
    me += s / mpx;
    mae += a / mpx;
    sq += q / mpx;
  }
  const double n = static_cast<double>(m.images);
  m.me = me / n;
  m.mae = mae / n;
  m.rmse = std::sqrt(sq / n);
  m.check();
  return m;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(9);
  out << "model,lead_min,me,mae,rmse\n";
  for (const auto& r : rows)
    out << r.model << ',' << r.lead_minutes << ',' << r.metrics.me << ',' << r.metrics.mae << ',' << r.metrics.rmse
        << '\n';
}

SpreadSkillCurve spread_skill(std::span<const EnsembleSample> samples, const SpreadSkillOptions& opts) {
  if (samples.empty()) throw ContractViolation("spread_skill: no samples");
  if (opts.bins < 1) throw DomainError("spread_skill: bins must be >= 1");
  SpreadSkillCurve c;
  for (const auto& s : samples) {
    const std::size_t m = s.members.size();
    if (m < 2) throw DomainError("spread_skill needs at least 2 members");
    for (const Field& f : s.members) require_same_shape(f, s.truth, "spread_skill");
    const std::size_t px = s.truth.size();
    double var_sum = 0.0, err_sum = 0.0;
    for (std::size_t j = 0; j < px; ++j) {
      double mean = 0.0;
      for (const Field& f : s.members) mean += f[j];
      mean /= static_cast<double>(m);
      double v = 0.0;
      for (const Field& f : s.members) v += (f[j] - mean) * (f[j] - mean);
      var_sum += v / static_cast<double>(m - 1);
      const double e = mean - s.truth[j];
      err_sum += e * e;
    }
    double spread = std::sqrt(var_sum / static_cast<double>(px));
    if (opts.small_ensemble_factor) spread *= std::sqrt((static_cast<double>(m) + 1.0) / static_cast<double>(m));
    c.spread.push_back(spread);
    c.skill.push_back(std::sqrt(err_sum / static_cast<double>(px)));
  }
  const std::size_t n = samples.size();
  c.mean_spread = std::accumulate(c.spread.begin(), c.spread.end(), 0.0) / static_cast<double>(n);
  c.mean_skill = std::accumulate(c.skill.begin(), c.skill.end(), 0.0) / static_cast<double>(n);
  c.ratio = c.mean_skill > 0.0 ? c.mean_spread / c.mean_skill
                               : (c.mean_spread > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return c.skill[a] < c.skill[b]; });
  const std::size_t bins = std::min<std::size_t>(static_cast<std::size_t>(opts.bins), n);
  std::size_t pos = 0;
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t cnt = n / bins + (b < n % bins ? 1 : 0);
    SpreadSkillBin bin;
    bin.count = cnt;
    for (std::size_t k = 0; k < cnt; ++k, ++pos) {
      bin.mean_spread += c.spread[order[pos]];
      bin.mean_skill += c.skill[order[pos]];
    }
    bin.mean_spread /= static_cast<double>(cnt);
    bin.mean_skill /= static_cast<double>(cnt);
    c.bins.push_back(bin);
  }
  return c;
}

void write_spread_skill_csv(const std::filesystem::path& path, const SpreadSkillCurve& c) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(9);
  out << "bin,count,mean_spread,mean_skill\n";
  for (std::size_t b = 0; b < c.bins.size(); ++b)
    out << b << ',' << c.bins[b].count << ',' << c.bins[b].mean_spread << ',' << c.bins[b].mean_skill << '\n';
  out << "all," << c.spread.size() << ',' << c.mean_spread << ',' << c.mean_skill << '\n';
}

double SpectrumReport::binned_power() const {
  double s = 0.0;
  for (const auto& b : bins) s += b.power;
  return s;
}

namespace {

std::mutex& fftw_mutex() {
  static std::mutex m;
  return m;
}

/// |FFT|^2 / N^4 of an N x N real array (row-major).
std::vector<double> power_2d(const std::vector<double>& v, int n) {
  const std::size_t total = static_cast<std::size_t>(n) * n;
  std::vector<std::complex<double>> in(total), out(total);
  for (std::size_t i = 0; i < total; ++i) in[i] = v[i];
  {
    std::lock_guard lock(fftw_mutex());
    fftw_plan p = fftw_plan_dft_2d(n, n, reinterpret_cast<fftw_complex*>(in.data()),
                                   reinterpret_cast<fftw_complex*>(out.data()), FFTW_FORWARD, FFTW_ESTIMATE);
    fftw_execute(p);
    fftw_destroy_plan(p);
  }
  const double norm = 1.0 / (static_cast<double>(total) * static_cast<double>(total));
  std::vector<double> pw(total);
  for (std::size_t i = 0; i < total; ++i) pw[i] = std::norm(out[i]) * norm;
  return pw;
}

}  // namespace

SpectrumReport radial_spectrum(const Field& f, double pixel_km, const SpectrumOptions& opts) {
  if (f.channels() != 1) throw DomainError("radial_spectrum expects a single-channel field");
  if (f.height() != f.width()) throw DomainError("radial_spectrum expects a square field, got " + to_string(f.shape()));
  if (!(pixel_km > 0.0)) throw DomainError("radial_spectrum: pixel size must be > 0");
  const int n = f.width();
  const std::size_t total = f.size();
  double mean = 0.0;
  for (float v : f.values()) mean += v;
  mean /= static_cast<double>(total);
  std::vector<double> v(total);
  double var = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    v[i] = f[i] - mean;
    var += v[i] * v[i];
  }
  if (opts.hann) {
    for (int y = 0; y < n; ++y) {
      const double wy = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * y / n);
      for (int x = 0; x < n; ++x)
        v[static_cast<std::size_t>(y) * n + x] *= wy * (0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * x / n));
    }
  }
  const std::vector<double> pw = power_2d(v, n);

  SpectrumReport r;
  r.variance = var / static_cast<double>(total);
  const int kmax = n / 2;
  for (int k = 1; k <= kmax; ++k) r.bins.push_back({k, n * pixel_km / k, 0.0});
  for (int y = 0; y < n; ++y) {
    const int ky = y < n / 2 ? y : y - n;
    for (int x = 0; x < n; ++x) {
      const int kx = x < n / 2 ? x : x - n;
      if (kx == 0 && ky == 0) continue;
      const int k = static_cast<int>(std::lround(std::sqrt(static_cast<double>(kx * kx + ky * ky))));
      const double p = pw[static_cast<std::size_t>(y) * n + x];
      if (k >= 1 && k <= kmax) {
        r.bins[k - 1].power += p;
      } else {
        r.unbinned_power += p;
      }
    }
  }
  return r;
}

SpectrumReport mean_radial_spectrum(std::span<const Field> fields, double pixel_km, const SpectrumOptions& opts) {
  if (fields.empty()) throw ContractViolation("mean_radial_spectrum: no fields");
  SpectrumReport acc = radial_spectrum(fields.front(), pixel_km, opts);
  for (std::size_t i = 1; i < fields.size(); ++i) {
    const SpectrumReport r = radial_spectrum(fields[i], pixel_km, opts);
    if (r.bins.size() != acc.bins.size()) throw ContractViolation("mean_radial_spectrum: fields differ in size");
    for (std::size_t b = 0; b < r.bins.size(); ++b) acc.bins[b].power += r.bins[b].power;
    acc.unbinned_power += r.unbinned_power;
    acc.variance += r.variance;
  }
  const double inv = 1.0 / static_cast<double>(fields.size());
  for (auto& b : acc.bins) b.power *= inv;
  acc.unbinned_power *= inv;
  acc.variance *= inv;
  return acc;
}

std::vector<FractionalBin> fractional_change(const SpectrumReport& forecast, const SpectrumReport& truth) {
  if (forecast.bins.size() != truth.bins.size()) throw ContractViolation("fractional_change: spectra differ in size");
  std::vector<FractionalBin> out;
  for (std::size_t b = 0; b < truth.bins.size(); ++b) {
    FractionalBin f;
    f.k = truth.bins[b].k;
    f.wavelength_km = truth.bins[b].wavelength_km;
    f.forecast_power = forecast.bins[b].power;
    f.truth_power = truth.bins[b].power;
    if (f.truth_power > 0.0) {
      f.ratio = f.forecast_power / f.truth_power;
    } else {
      f.ratio = f.forecast_power == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    }
    out.push_back(f);
  }
  return out;
}

std::vector<FractionalBin> fractional_change(const Field& forecast, const Field& truth, double pixel_km,
                                             const SpectrumOptions& opts) {
  require_same_shape(forecast, truth, "fractional_change");
  return fractional_change(radial_spectrum(forecast, pixel_km, opts), radial_spectrum(truth, pixel_km, opts));
}

void write_spectrum_csv(const std::filesystem::path& path, const std::string& model,
                        std::span<const FractionalBin> bins, bool append) {
  const bool header = !append || !std::filesystem::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(9);
  if (header) out << "model,k,wavelength_km,forecast_power,truth_power,ratio\n";
  for (const auto& b : bins)
    out << model << ',' << b.k << ',' << b.wavelength_km << ',' << b.forecast_power << ',' << b.truth_power << ','
        << b.ratio << '\n';
}

GridSpec GridSpec::standard() {
  return GridSpec{{9, 18, 36, 72}, {0.0, 0.2, 0.41421356237}, {20.0, 80.0, 140.0}, {4.0, 7.0, 10.0}};
}

std::size_t GridSpec::size() const { return num_steps.size() * s_churn.size() * sigma_max.size() * rho.size(); }

std::vector<SampleConfig> GridSpec::enumerate(const SampleConfig& base) const {
  std::vector<SampleConfig> out;
  out.reserve(size());
  for (int n : num_steps)
    for (double g : s_churn)
      for (double sm : sigma_max)
        for (double r : rho) {
          SampleConfig c = base;
          c.num_steps = n;
          c.s_churn = g;
          c.sigma_max = sm;
          c.rho = r;
          out.push_back(c);
        }
  return out;
}

namespace {

std::vector<int> competition_ranks(const std::vector<double>& v) {
  std::vector<int> rank(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    int r = 1;
    for (double w : v) r += w < v[i] ? 1 : 0;
    rank[i] = r;
  }
  return rank;
}

bool tie_break_less(const CandidateResult& a, const CandidateResult& b) {
  if (a.score != b.score) return a.score < b.score;
  if (a.cfg.num_steps != b.cfg.num_steps) return a.cfg.num_steps < b.cfg.num_steps;
  if (a.cfg.s_churn != b.cfg.s_churn) return a.cfg.s_churn < b.cfg.s_churn;
  if (a.cfg.sigma_max != b.cfg.sigma_max) return a.cfg.sigma_max < b.cfg.sigma_max;
  if (a.cfg.rho != b.cfg.rho) return a.cfg.rho < b.cfg.rho;
  if (a.rmse != b.rmse) return a.rmse < b.rmse;
  return std::abs(a.ratio - 1.0) < std::abs(b.ratio - 1.0);
}

}  // namespace

std::vector<CandidateResult> rank_candidates(std::vector<CandidateResult> rows) {
  if (rows.empty()) throw DomainError("rank_candidates: empty candidate table");
  std::vector<double> rmse, dev;
  for (const auto& r : rows) {
    if (!std::isfinite(r.rmse)) throw NumericalError("rank_candidates: non-finite RMSE");
    rmse.push_back(r.rmse);
    dev.push_back(std::isnan(r.ratio) ? std::numeric_limits<double>::infinity() : std::abs(r.ratio - 1.0));
  }
  const std::vector<int> a = competition_ranks(rmse), b = competition_ranks(dev);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].rmse_rank = a[i];
    rows[i].ratio_rank = b[i];
    rows[i].score = a[i] + b[i];
  }
  std::sort(rows.begin(), rows.end(), tie_break_less);
  return rows;
}

GridSearchResult grid_search(const GridSpec& grid, const SampleConfig& base, const CandidateEvaluator& evaluate) {
  if (grid.size() == 0) throw DomainError("grid_search: empty grid");
  std::vector<CandidateResult> rows;
  for (const SampleConfig& c : grid.enumerate(base)) {
    const CandidateScore s = evaluate(c);
    rows.push_back({c, s.rmse, s.ratio, 0, 0, 0});
  }
  GridSearchResult r;
  r.ranked = rank_candidates(std::move(rows));
  r.selected = r.ranked.front().cfg;
  return r;
}

void write_grid_csv(const std::filesystem::path& path, std::span<const CandidateResult> ranked) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(9);
  out << "rank,num_steps,s_churn,sigma_max,rho,rmse,ratio,rmse_rank,ratio_rank,score\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const auto& r = ranked[i];
    out << i + 1 << ',' << r.cfg.num_steps << ',' << r.cfg.s_churn << ',' << r.cfg.sigma_max << ',' << r.cfg.rho << ','
        << r.rmse << ',' << r.ratio << ',' << r.rmse_rank << ',' << r.ratio_rank << ',' << r.score << '\n';
  }
}

void write_pgm(const std::filesystem::path& path, const Field& f, double lo, double hi, bool invert) {
  if (!(hi > lo)) throw DomainError("write_pgm: need hi > lo");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << f.width() << ' ' << f.height() << "\n255\n";
  const auto plane = f.channel(0);
  std::vector<unsigned char> px(plane.size());
  for (std::size_t i = 0; i < plane.size(); ++i) {
    double t = std::clamp((plane[i] - lo) / (hi - lo), 0.0, 1.0);
    if (invert) t = 1.0 - t;
    px[i] = static_cast<unsigned char>(std::lround(255.0 * t));
  }
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

}  // namespace edm
