#include "edm/core_grid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "edm/error.hpp"
#include "edm/hash.hpp"

namespace edm {

std::string_view to_string(Units u) {
  switch (u) {
    case Units::kKelvin: return "kelvin";
    case Units::kNormalized: return "normalized";
    case Units::kLatent: return "latent";
    case Units::kDimensionless: return "dimensionless";
  }
  return "dimensionless";
}

Units units_from_string(std::string_view s) {
  if (s == "kelvin") return Units::kKelvin;
  if (s == "normalized") return Units::kNormalized;
  if (s == "latent") return Units::kLatent;
  if (s == "dimensionless") return Units::kDimensionless;
  throw FormatError("unknown units tag '" + std::string(s) + "'");
}

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[' << s.channels << ',' << s.height << ',' << s.width << ']';
  return os.str();
}

Field::Field(Shape shape, Units units, float fill)
    : shape_(shape), units_(units), values_(shape.size(), fill) {
  if (shape.channels < 1 || shape.height < 1 || shape.width < 1)
    throw ContractViolation("field shape must be positive, got " + to_string(shape));
}

Field::Field(Shape shape, std::vector<float> values, Units units)
    : shape_(shape), units_(units), values_(std::move(values)) {
  if (shape.channels < 1 || shape.height < 1 || shape.width < 1)
    throw ContractViolation("field shape must be positive, got " + to_string(shape));
  if (values_.size() != shape.size())
    throw ContractViolation("field value count " + std::to_string(values_.size()) +
                            " does not match shape " + to_string(shape));
}

std::span<const float> Field::channel(int c) const {
  return std::span<const float>(values_).subspan(static_cast<std::size_t>(c) * shape_.plane(),
                                                 shape_.plane());
}

std::span<float> Field::channel(int c) {
  return std::span<float>(values_).subspan(static_cast<std::size_t>(c) * shape_.plane(),
                                           shape_.plane());
}

bool Field::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v); });
}

void Field::require_finite(std::string_view what) const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i]))
      throw NumericalError(std::string(what) + ": non-finite value at index " + std::to_string(i));
  }
}

void require_same_shape(const Field& a, const Field& b, std::string_view what) {
  if (a.shape() != b.shape())
    throw ContractViolation(std::string(what) + ": shape mismatch " + to_string(a.shape()) +
                            " vs " + to_string(b.shape()));
}

Field concat_channels(std::span<const Field> parts, Units units) {
  if (parts.empty()) throw ContractViolation("concat_channels: no inputs");
  Shape out{0, parts.front().height(), parts.front().width()};
  for (const auto& p : parts) {
    if (p.height() != out.height || p.width() != out.width)
      throw ContractViolation("concat_channels: spatial mismatch");
    out.channels += p.channels();
  }
  std::vector<float> values;
  values.reserve(out.size());
  for (const auto& p : parts) values.insert(values.end(), p.values().begin(), p.values().end());
  return Field(out, std::move(values), units);
}

NormStats::NormStats(double m, double s) : NormStats(std::vector<double>{m}, std::vector<double>{s}) {}

NormStats::NormStats(std::vector<double> m, std::vector<double> s) : mean(std::move(m)), std(std::move(s)) {
  if (mean.empty() || mean.size() != std.size())
    throw ContractViolation("NormStats: mean/std arrays must be non-empty and equal length");
  for (double v : std) {
    if (!(v > 0.0) || !std::isfinite(v)) throw DomainError("NormStats: std must be positive and finite");
  }
}

double NormStats::mean_for(int channel) const {
  return mean.size() == 1 ? mean[0] : mean.at(static_cast<std::size_t>(channel));
}

double NormStats::std_for(int channel) const {
  return std.size() == 1 ? std[0] : std.at(static_cast<std::size_t>(channel));
}

namespace {

void check_stats_fit(const Field& f, const NormStats& s) {
  if (s.size() != 1 && s.size() != static_cast<std::size_t>(f.channels()))
    throw ContractViolation("NormStats has " + std::to_string(s.size()) + " entries for a " +
                            std::to_string(f.channels()) + "-channel field");
}

}  // namespace

Field normalize(const Field& f, const NormStats& s) {
  if (f.units() != Units::kKelvin)
    throw ContractViolation("normalize expects kelvin, got " + std::string(to_string(f.units())));
  check_stats_fit(f, s);
  Field out(f.shape(), Units::kNormalized);
  for (int c = 0; c < f.channels(); ++c) {
    const double m = s.mean_for(c), sd = s.std_for(c);
    auto in = f.channel(c);
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < in.size(); ++i) dst[i] = static_cast<float>((in[i] - m) / sd);
  }
  return out;
}

Field denormalize(const Field& f, const NormStats& s) {
  if (f.units() != Units::kNormalized)
    throw ContractViolation("denormalize expects normalized, got " + std::string(to_string(f.units())));
  check_stats_fit(f, s);
  Field out(f.shape(), Units::kKelvin);
  for (int c = 0; c < f.channels(); ++c) {
    const double m = s.mean_for(c), sd = s.std_for(c);
    auto in = f.channel(c);
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < in.size(); ++i) dst[i] = static_cast<float>(in[i] * sd + m);
  }
  return out;
}

NormStats compute_stats(std::span<const Field> train) {
  if (train.empty()) throw ContractViolation("compute_stats: empty training set");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& f : train) {
    if (f.units() != Units::kKelvin) throw ContractViolation("compute_stats expects kelvin fields");
    for (float v : f.values()) sum += v;
    n += f.size();
  }
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (const auto& f : train)
    for (float v : f.values()) ss += (v - mean) * (v - mean);
  const double var = ss / static_cast<double>(n);
  if (!(var > 0.0)) throw DomainError("compute_stats: zero variance (degenerate dataset)");
  return NormStats(mean, std::sqrt(var));
}

NormStats compute_channel_stats(std::span<const Field> fields) {
  if (fields.empty()) throw ContractViolation("compute_channel_stats: empty input");
  const int channels = fields.front().channels();
  std::vector<double> mean(channels, 0.0), sd(channels, 0.0);
  std::vector<std::size_t> n(channels, 0);
  for (const auto& f : fields) {
    if (f.channels() != channels) throw ContractViolation("compute_channel_stats: channel mismatch");
    for (int c = 0; c < channels; ++c) {
      for (float v : f.channel(c)) mean[c] += v;
      n[c] += f.shape().plane();
    }
  }
  for (int c = 0; c < channels; ++c) mean[c] /= static_cast<double>(n[c]);
  for (const auto& f : fields)
    for (int c = 0; c < channels; ++c)
      for (float v : f.channel(c)) sd[c] += (v - mean[c]) * (v - mean[c]);
  for (int c = 0; c < channels; ++c) {
    sd[c] = std::sqrt(sd[c] / static_cast<double>(n[c]));
    if (!(sd[c] > 0.0)) throw DomainError("compute_channel_stats: zero variance in channel " + std::to_string(c));
  }
  return NormStats(std::move(mean), std::move(sd));
}

std::size_t Tensor::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return dims.empty() ? 0 : n;
}

Tensor to_tensor(const Field& f) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(f.channels()), static_cast<std::uint32_t>(f.height()),
            static_cast<std::uint32_t>(f.width())};
  t.data.assign(f.values().begin(), f.values().end());
  return t;
}

Tensor to_tensor(std::span<const Field> batch) {
  if (batch.empty()) throw ContractViolation("to_tensor: empty batch");
  const Shape s = batch.front().shape();
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(batch.size()), static_cast<std::uint32_t>(s.channels),
            static_cast<std::uint32_t>(s.height), static_cast<std::uint32_t>(s.width)};
  t.data.reserve(batch.size() * s.size());
  for (const auto& f : batch) {
    if (f.shape() != s) throw ContractViolation("to_tensor: batch shapes differ");
    t.data.insert(t.data.end(), f.values().begin(), f.values().end());
  }
  return t;
}

Tensor to_tensor(const std::vector<std::vector<Field>>& nested) {
  if (nested.empty() || nested.front().empty()) throw ContractViolation("to_tensor: empty nest");
  const std::size_t inner = nested.front().size();
  const Shape s = nested.front().front().shape();
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(nested.size()), static_cast<std::uint32_t>(inner * s.channels),
            static_cast<std::uint32_t>(s.height), static_cast<std::uint32_t>(s.width)};
  t.data.reserve(nested.size() * inner * s.size());
  for (const auto& row : nested) {
    if (row.size() != inner) throw ContractViolation("to_tensor: ragged nest");
    for (const auto& f : row) {
      if (f.shape() != s) throw ContractViolation("to_tensor: nest shapes differ");
      t.data.insert(t.data.end(), f.values().begin(), f.values().end());
    }
  }
  return t;
}

Field field_from_tensor(const Tensor& t, Units units) {
  if (t.dims.size() == 2)
    return Field(Shape{1, static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1])}, t.data, units);
  if (t.dims.size() == 3)
    return Field(Shape{static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]), static_cast<int>(t.dims[2])},
                 t.data, units);
  if (t.dims.size() == 4 && t.dims[0] == 1)
    return Field(Shape{static_cast<int>(t.dims[1]), static_cast<int>(t.dims[2]), static_cast<int>(t.dims[3])},
                 t.data, units);
  throw ContractViolation("field_from_tensor: expected rank 2 or 3");
}

FieldBatch batch_from_tensor(const Tensor& t, Units units) {
  Shape s;
  if (t.dims.size() == 3) {
    s = Shape{1, static_cast<int>(t.dims[1]), static_cast<int>(t.dims[2])};
  } else if (t.dims.size() == 4) {
    s = Shape{static_cast<int>(t.dims[1]), static_cast<int>(t.dims[2]), static_cast<int>(t.dims[3])};
  } else {
    throw ContractViolation("batch_from_tensor: expected rank 3 or 4");
  }
  FieldBatch out;
  out.reserve(t.dims[0]);
  for (std::uint32_t i = 0; i < t.dims[0]; ++i) {
    auto first = t.data.begin() + static_cast<std::ptrdiff_t>(i * s.size());
    out.emplace_back(s, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(s.size())), units);
  }
  return out;
}

std::vector<FieldBatch> sequences_from_tensor(const Tensor& t, Units units) {
  if (t.dims.size() != 4) throw ContractViolation("sequences_from_tensor: expected [N, F, H, W]");
  const Shape frame{1, static_cast<int>(t.dims[2]), static_cast<int>(t.dims[3])};
  std::vector<FieldBatch> out(t.dims[0]);
  std::size_t offset = 0;
  for (auto& seq : out) {
    for (std::uint32_t f = 0; f < t.dims[1]; ++f) {
      auto first = t.data.begin() + static_cast<std::ptrdiff_t>(offset);
      seq.emplace_back(frame, std::vector<float>(first, first + static_cast<std::ptrdiff_t>(frame.size())), units);
      offset += frame.size();
    }
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'E', 'D', 'M', 'T'};
constexpr std::uint16_t kFormatVersion = 1;
constexpr std::uint8_t kDtypeFloat32 = 1;

void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  if (t.dims.empty() || t.dims.size() > 4)
    throw ContractViolation("tensor rank must be 1-4, got " + std::to_string(t.dims.size()));
  if (t.element_count() != t.data.size())
    throw ContractViolation("tensor dims do not match payload length");
  for (float v : t.data) {
    if (!std::isfinite(v)) throw NumericalError("refusing to write non-finite tensor payload");
  }
  std::string buf(kMagic, 4);
  put_u16(buf, kFormatVersion);
  buf.push_back(static_cast<char>(kDtypeFloat32));
  buf.push_back(static_cast<char>(t.dims.size()));
  for (auto d : t.dims) put_u32(buf, d);
  buf.reserve(buf.size() + 4 * t.data.size());
  for (float v : t.data) put_u32(buf, std::bit_cast<std::uint32_t>(v));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Tensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::string name = path.filename().string();

  if (bytes.size() < 8) throw FormatError(name + ": truncated header");
  if (std::memcmp(p, kMagic, 4) != 0) throw FormatError(name + ": bad magic bytes");
  const std::uint16_t version = static_cast<std::uint16_t>(p[4] | (p[5] << 8));
  if (version != kFormatVersion) throw FormatError(name + ": unsupported version " + std::to_string(version));
  if (p[6] != kDtypeFloat32) throw FormatError(name + ": unsupported dtype code " + std::to_string(p[6]));
  const std::size_t rank = p[7];
  if (rank < 1 || rank > 4) throw FormatError(name + ": rank " + std::to_string(rank) + " outside 1-4");
  if (bytes.size() < 8 + 4 * rank) throw FormatError(name + ": truncated dims");

  Tensor t;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    t.dims.push_back(get_u32(p + 8 + 4 * i));
    count *= t.dims.back();
  }
  const std::size_t offset = 8 + 4 * rank;
  if (bytes.size() < offset + 4 * count) throw FormatError(name + ": truncated payload");
  if (bytes.size() > offset + 4 * count) throw FormatError(name + ": trailing bytes after payload");
  t.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const float v = std::bit_cast<float>(get_u32(p + offset + 4 * i));
    if (!std::isfinite(v)) throw FormatError(name + ": non-finite payload value at " + std::to_string(i));
    t.data[i] = v;
  }
  return t;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split split_from_string(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw FormatError("unknown split tag '" + std::string(s) + "'");
}

void DatasetManifest::validate() const {
  if (count < 1) throw ContractViolation("manifest: count must be >= 1");
  if (frames_per_sample < 1) throw ContractViolation("manifest: frames_per_sample must be >= 1");
  if (field_shape.channels < 1 || field_shape.height < 1 || field_shape.width < 1)
    throw ContractViolation("manifest: invalid field shape");
  if (stats.size() == 0) throw ContractViolation("manifest: missing stats");
}

namespace {

nlohmann::json stats_json(const NormStats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

NormStats stats_from_json(const nlohmann::json& j) {
  return NormStats(j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>());
}

}  // namespace

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  m.validate();
  nlohmann::json j;
  j["count"] = m.count;
  j["frames_per_sample"] = m.frames_per_sample;
  j["field_shape"] = {m.field_shape.channels, m.field_shape.height, m.field_shape.width};
  j["units"] = to_string(m.units);
  j["stats"] = stats_json(m.stats);
  if (m.latent_stats) j["latent_stats"] = stats_json(*m.latent_stats);
  j["split"] = to_string(m.split);
  j["source"] = m.source;
  j["tensor_file"] = m.tensor_file;
  j["rejected_fraction"] = m.rejected_fraction;
  j["seed"] = m.seed;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    DatasetManifest m;
    m.count = j.at("count").get<std::size_t>();
    m.frames_per_sample = j.at("frames_per_sample").get<int>();
    const auto shape = j.at("field_shape").get<std::vector<int>>();
    if (shape.size() != 3) throw FormatError("field_shape must have 3 entries");
    m.field_shape = Shape{shape[0], shape[1], shape[2]};
    m.units = units_from_string(j.at("units").get<std::string>());
    m.stats = stats_from_json(j.at("stats"));
    if (j.contains("latent_stats")) m.latent_stats = stats_from_json(j.at("latent_stats"));
    m.split = split_from_string(j.at("split").get<std::string>());
    m.source = j.value("source", "");
    m.tensor_file = j.at("tensor_file").get<std::string>();
    m.rejected_fraction = j.value("rejected_fraction", 0.0);
    m.seed = j.value("seed", std::uint64_t{0});
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.filename().string() + ": " + e.what());
  }
}

}  // namespace edm

namespace edm {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace edm
