#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "edm/core_grid.hpp"
#include "edm/sampler.hpp"

namespace edm {

/// ME and MAE average truth - forecast over pixels and images; RMSE is the square root of
/// the MSE pooled over the whole set.
struct PixelMetrics {
  double me = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  std::size_t images = 0;
  std::size_t pixels_per_image = 0;

  /// Asserts mae >= |me| and rmse >= mae (up to rounding); throws NumericalError otherwise.
  void check() const;
};

PixelMetrics pixel_metrics(std::span<const Field> truth, std::span<const Field> forecast);

struct MetricsRow {
  std::string model;
  double lead_minutes = 0.0;
  PixelMetrics metrics;
};

/// CSV with columns model,lead_min,me,mae,rmse.
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows);

/// One verification case: an ensemble of M fields and the verifying truth.
struct EnsembleSample {
  std::vector<Field> members;
  Field truth;
};

struct SpreadSkillOptions {
  /// Multiply the spread by sqrt((M + 1) / M).
  bool small_ensemble_factor = true;
  int bins = 10;
};

struct SpreadSkillBin {
  double mean_spread = 0.0;
  double mean_skill = 0.0;
  std::size_t count = 0;
};

struct SpreadSkillCurve {
  std::vector<SpreadSkillBin> bins;  // ordered by increasing skill (RMSE)
  std::vector<double> spread;        // per sample
  std::vector<double> skill;         // per sample
  double mean_spread = 0.0;
  double mean_skill = 0.0;
  double ratio = 0.0;  // mean_spread / mean_skill
};

/// Per-sample spread: sqrt of the pixel mean of the unbiased member variance (times the
/// small-ensemble factor); skill: RMSE of the ensemble mean. Bins hold equal sample counts
/// by skill quantile.
SpreadSkillCurve spread_skill(std::span<const EnsembleSample> samples, const SpreadSkillOptions& opts = {});

/// CSV with columns bin,count,mean_spread,mean_skill followed by a final overall row.
void write_spread_skill_csv(const std::filesystem::path& path, const SpreadSkillCurve& c);

struct SpectrumOptions {
  /// Multiply by a separable Hann window before the transform (aperiodic data).
  bool hann = false;
};

struct SpectrumBin {
  int k = 0;
  double wavelength_km = 0.0;
  double power = 0.0;
};

/// Radially binned power. Power is normalized so that all non-DC power sums to the field
/// variance; unbinned_power is what lies beyond the largest full ring (k > N/2).
struct SpectrumReport {
  std::vector<SpectrumBin> bins;  // k = 1 .. N/2, wavelength = N * pixel_km / k
  double unbinned_power = 0.0;
  double variance = 0.0;

  double binned_power() const;
};

/// Requires a square single-channel field.
SpectrumReport radial_spectrum(const Field& f, double pixel_km, const SpectrumOptions& opts = {});
/// Bin-wise mean over a set of fields.
SpectrumReport mean_radial_spectrum(std::span<const Field> fields, double pixel_km, const SpectrumOptions& opts = {});

struct FractionalBin {
  int k = 0;
  double wavelength_km = 0.0;
  double forecast_power = 0.0;
  double truth_power = 0.0;
  double ratio = 0.0;  // forecast / truth
};

std::vector<FractionalBin> fractional_change(const SpectrumReport& forecast, const SpectrumReport& truth);
std::vector<FractionalBin> fractional_change(const Field& forecast, const Field& truth, double pixel_km,
                                             const SpectrumOptions& opts = {});

/// CSV with columns model,k,wavelength_km,forecast_power,truth_power,ratio.
void write_spectrum_csv(const std::filesystem::path& path, const std::string& model,
                        std::span<const FractionalBin> bins, bool append = false);

/// Generation-hyperparameter grid.
struct GridSpec {
  std::vector<int> num_steps;
  std::vector<double> s_churn;  // effective per-step gamma
  std::vector<double> sigma_max;
  std::vector<double> rho;

  /// num_steps {9,18,36,72} x churn {0,0.2,sqrt(2)-1} x sigma_max {20,80,140} x rho {4,7,10}.
  static GridSpec standard();
  std::size_t size() const;
  /// Every combination applied on top of `base`, num_steps varying slowest.
  std::vector<SampleConfig> enumerate(const SampleConfig& base) const;
};

struct CandidateResult {
  SampleConfig cfg;
  double rmse = 0.0;
  double ratio = 0.0;
  int rmse_rank = 0;
  int ratio_rank = 0;
  int score = 0;
};

/// Competition ranks of RMSE and |ratio - 1| (ties share the best rank), score = sum.
/// Sorted by score, ties broken by lower num_steps, s_churn, sigma_max, rho.
std::vector<CandidateResult> rank_candidates(std::vector<CandidateResult> rows);

/// (RMSE, spread-skill ratio) of one configuration on the validation set.
struct CandidateScore {
  double rmse = 0.0;
  double ratio = 0.0;
};
using CandidateEvaluator = std::function<CandidateScore(const SampleConfig&)>;

struct GridSearchResult {
  std::vector<CandidateResult> ranked;
  SampleConfig selected;
};

GridSearchResult grid_search(const GridSpec& grid, const SampleConfig& base, const CandidateEvaluator& evaluate);

/// CSV with columns rank,num_steps,s_churn,sigma_max,rho,rmse,ratio,rmse_rank,ratio_rank,score.
void write_grid_csv(const std::filesystem::path& path, std::span<const CandidateResult> ranked);

/// 8-bit binary PGM of channel 0 mapped linearly from [lo, hi]; `invert` maps lo to white.
void write_pgm(const std::filesystem::path& path, const Field& f, double lo, double hi, bool invert = false);

}  // namespace edm
