#pragma once

#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "edm/core_grid.hpp"

namespace edm {

/// kFixed: every blob moves by (velocity_x, velocity_y) px/frame. kRandomUniform: one
/// velocity per sequence, uniform in the disk of radius max_speed. kRotational: solid-body
/// rotation about the grid centre at angular_speed rad/frame.
enum class VelocityKind { kFixed, kRandomUniform, kRotational };

std::string_view to_string(VelocityKind k);
VelocityKind velocity_kind_from_string(std::string_view s);

/// Periodic world of cold Gaussian anomalies on a warm background, in kelvin.
struct BlobWorldConfig {
  int grid = 64;
  int min_blobs = 3;
  int max_blobs = 8;
  VelocityKind velocity = VelocityKind::kRandomUniform;
  double velocity_x = 1.0;
  double velocity_y = 0.0;
  double max_speed = 1.5;
  double angular_speed = 0.02;
  /// Per-frame log-amplitude growth rate range (negative decays).
  double min_rate = -0.05;
  double max_rate = 0.05;
  /// Expected blob births per frame.
  double spawn_rate = 0.2;
  /// Blobs whose amplitude falls below this many kelvin are removed.
  double death_amplitude = 2.0;
  double frame_minutes = 10.0;
  double background = 290.0;
  double min_amplitude = 25.0;
  double max_amplitude = 60.0;
  double min_radius = 3.0;
  double max_radius = 7.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Physical brightness-temperature range; rendered values are clamped into it.
inline constexpr double kMinKelvin = 180.0;
inline constexpr double kMaxKelvin = 330.0;

/// `length` frames of the world started from cfg.seed. Positions and velocities are
/// multiples of 1/1024 px so integer displacements are exact.
FieldBatch generate_sequence(const BlobWorldConfig& cfg, int length);

struct PatchFilter {
  double min_cloud_fraction = 0.10;
  double cloud_threshold = 273.0;
  double max_view_zenith = 65.0;
  double max_solar_zenith = 85.0;

  void validate() const;
};

struct FilterResult {
  bool accepted = false;
  double cloud_fraction = 0.0;
  bool view_ok = true;
  bool solar_ok = true;
};

/// Cloud fraction = fraction of pixels strictly colder than the threshold. The zenith
/// predicates default to nadir geometry, which always passes.
FilterResult apply_filter(const Field& f, const PatchFilter& filter, double view_zenith = 0.0,
                          double solar_zenith = 0.0);

struct SplitSpec {
  Split split = Split::kTrain;
  std::size_t count = 0;
  int length = 3;
};

struct GeneratedSplit {
  std::vector<FieldBatch> sequences;
  std::size_t attempts = 0;
  double rejected_fraction = 0.0;
};

/// Draws sequences with seeds derive_seed(cfg.seed, split, attempt) until `count` pass the
/// filter on their second frame (the latest condition frame).
GeneratedSplit generate_split(const BlobWorldConfig& cfg, const PatchFilter& filter, const SplitSpec& spec);

struct DatasetPaths {
  std::filesystem::path manifest;
  std::filesystem::path tensor;
};

struct BuiltDataset {
  std::vector<DatasetManifest> manifests;
  std::vector<DatasetPaths> paths;
};

/// Writes <split>.edmt ([count, length, H, W] kelvin) and <split>.json for every split.
/// Normalization statistics come from the train split and are stored in every manifest.
BuiltDataset build_dataset(const BlobWorldConfig& cfg, const PatchFilter& filter, std::span<const SplitSpec> splits,
                           const std::filesystem::path& out_dir);

/// Loads a manifest and its sequences (kelvin), resolving the tensor path next to it.
struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<FieldBatch> sequences;
};
LoadedDataset load_dataset(const std::filesystem::path& manifest_path);

/// Normalizes every frame with the manifest statistics.
std::vector<FieldBatch> normalize_sequences(std::span<const FieldBatch> seqs, const NormStats& stats);

}  // namespace edm
