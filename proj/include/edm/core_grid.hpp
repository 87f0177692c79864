#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace edm {

enum class Units { kKelvin, kNormalized, kLatent, kDimensionless };

std::string_view to_string(Units u);
Units units_from_string(std::string_view s);

struct Shape {
  int channels = 1;
  int height = 0;
  int width = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  std::size_t plane() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// A channels x height x width grid of float32 values, channel-major then row-major.
class Field {
 public:
  Field() = default;
  Field(Shape shape, Units units = Units::kDimensionless, float fill = 0.0f);
  Field(Shape shape, std::vector<float> values, Units units);

  const Shape& shape() const { return shape_; }
  int channels() const { return shape_.channels; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  Units units() const { return units_; }
  void set_units(Units u) { units_ = u; }

  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }
  std::span<const float> channel(int c) const;
  std::span<float> channel(int c);

  float operator[](std::size_t i) const { return values_[i]; }
  float& operator[](std::size_t i) { return values_[i]; }
  float at(int c, int y, int x) const { return values_[index(c, y, x)]; }
  float& at(int c, int y, int x) { return values_[index(c, y, x)]; }

  bool all_finite() const;
  /// Throws NumericalError naming `what` if any value is NaN/Inf.
  void require_finite(std::string_view what) const;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * shape_.height + static_cast<std::size_t>(y)) *
               shape_.width +
           static_cast<std::size_t>(x);
  }

  Shape shape_{0, 0, 0};
  Units units_ = Units::kDimensionless;
  std::vector<float> values_;
};

using FieldBatch = std::vector<Field>;

/// Throws ContractViolation unless a and b have equal shapes.
void require_same_shape(const Field& a, const Field& b, std::string_view what);

/// Stacks fields along the channel axis. All inputs must share height/width.
Field concat_channels(std::span<const Field> parts, Units units);

/// Normalization statistics. A single entry applies to every channel; otherwise one
/// entry per channel (latent fields).
struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  NormStats() = default;
  NormStats(double m, double s);
  NormStats(std::vector<double> m, std::vector<double> s);

  std::size_t size() const { return mean.size(); }
  double mean_for(int channel) const;
  double std_for(int channel) const;
};

Field normalize(const Field& f, const NormStats& s);
Field denormalize(const Field& f, const NormStats& s);

/// Mean and population std pooled over every value of every field.
NormStats compute_stats(std::span<const Field> train);
/// Per-channel pooled mean and population std. Units are not restricted.
NormStats compute_channel_stats(std::span<const Field> fields);

/// Dense float32 array with up to four dimensions, the unit of on-disk storage.
struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t element_count() const;
};

Tensor to_tensor(const Field& f);
Tensor to_tensor(std::span<const Field> batch);
/// Packs an [outer][inner] nest of single-shape fields into [outer, inner*C, H, W].
Tensor to_tensor(const std::vector<std::vector<Field>>& nested);

/// Interprets a rank-2/3 tensor as one field ([H,W] or [C,H,W]).
Field field_from_tensor(const Tensor& t, Units units);
/// Interprets the leading axis of a rank-3/4 tensor as the batch axis.
FieldBatch batch_from_tensor(const Tensor& t, Units units);
/// Splits [N, F, H, W] into N sequences of F single-channel frames.
std::vector<FieldBatch> sequences_from_tensor(const Tensor& t, Units units);

void write_tensor_file(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor_file(const std::filesystem::path& path);

enum class Split { kTrain, kVal, kTest };
std::string_view to_string(Split s);
Split split_from_string(std::string_view s);

struct DatasetManifest {
  std::size_t count = 0;
  int frames_per_sample = 1;
  Shape field_shape;
  Units units = Units::kKelvin;
  NormStats stats;
  std::optional<NormStats> latent_stats;
  Split split = Split::kTrain;
  std::string source;
  std::string tensor_file;
  double rejected_fraction = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& path);

}  // namespace edm
