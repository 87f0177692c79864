#include "edm/toy_data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "edm/error.hpp"
#include "edm/parallel.hpp"
#include "edm/random.hpp"

namespace edm {

std::string_view to_string(VelocityKind k) {
  switch (k) {
    case VelocityKind::kFixed: return "fixed";
    case VelocityKind::kRandomUniform: return "random";
    case VelocityKind::kRotational: return "rotational";
  }
  return "random";
}

VelocityKind velocity_kind_from_string(std::string_view s) {
  if (s == "fixed" || s == "uniform") return VelocityKind::kFixed;
  if (s == "random") return VelocityKind::kRandomUniform;
  if (s == "rotational") return VelocityKind::kRotational;
  throw DomainError("unknown velocity kind '" + std::string(s) + "'");
}

void BlobWorldConfig::validate() const {
  if (grid < 16) throw DomainError("BlobWorldConfig: grid must be >= 16");
  if (min_blobs < 0 || max_blobs < min_blobs) throw DomainError("BlobWorldConfig: need 0 <= min_blobs <= max_blobs");
  if (!(min_rate <= max_rate)) throw DomainError("BlobWorldConfig: min_rate > max_rate");
  if (!(spawn_rate >= 0.0)) throw DomainError("BlobWorldConfig: spawn_rate must be >= 0");
  if (!(max_speed >= 0.0)) throw DomainError("BlobWorldConfig: max_speed must be >= 0");
  if (!(min_radius > 0.0 && max_radius >= min_radius)) throw DomainError("BlobWorldConfig: bad radius range");
  if (!(min_amplitude >= 0.0 && max_amplitude >= min_amplitude))
    throw DomainError("BlobWorldConfig: bad amplitude range");
  if (!(background >= kMinKelvin && background <= kMaxKelvin))
    throw DomainError("BlobWorldConfig: background outside [180, 330] K");
  if (background - max_amplitude < kMinKelvin)
    throw DomainError("BlobWorldConfig: background - max_amplitude falls below 180 K");
  if (!(frame_minutes > 0.0)) throw DomainError("BlobWorldConfig: frame_minutes must be > 0");
}

namespace {

constexpr double kQuantum = 1.0 / 1024.0;

double quantize(double v) { return std::round(v / kQuantum) * kQuantum; }

double wrap(double v, double n) {
  v = std::fmod(v, n);
  return v < 0.0 ? v + n : v;
}

struct Blob {
  double x = 0.0;
  double y = 0.0;
  double vx = 0.0;
  double vy = 0.0;
  double amplitude = 0.0;
  double radius = 1.0;
  double rate = 0.0;
};

/// Periodic 1-D Gaussian profile summed over the minimum image and its two neighbours.
/// The offset depends only on (i - centre) mod n, so shifted blobs give shifted profiles.
void profile(std::vector<double>& out, double centre, double radius, int n) {
  const double inv = 1.0 / (2.0 * radius * radius);
  const double half = 0.5 * n;
  for (int i = 0; i < n; ++i) {
    double d0 = static_cast<double>(i) - centre;
    if (d0 >= half) d0 -= n;
    if (d0 < -half) d0 += n;
    double acc = 0.0;
    for (int k = -1; k <= 1; ++k) {
      const double d = d0 + static_cast<double>(k * n);
      acc += std::exp(-d * d * inv);
    }
    out[i] = acc;
  }
}

Field render(const std::vector<Blob>& blobs, const BlobWorldConfig& cfg) {
  const int n = cfg.grid;
  std::vector<double> acc(static_cast<std::size_t>(n) * n, 0.0);
  std::vector<double> gx(n), gy(n);
  for (const Blob& b : blobs) {
    profile(gx, b.x, b.radius, n);
    profile(gy, b.y, b.radius, n);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) acc[static_cast<std::size_t>(y) * n + x] += b.amplitude * gy[y] * gx[x];
  }
  Field f(Shape{1, n, n}, Units::kKelvin);
  for (std::size_t i = 0; i < acc.size(); ++i)
    f[i] = static_cast<float>(std::clamp(cfg.background - acc[i], kMinKelvin, kMaxKelvin));
  return f;
}

class World {
 public:
  explicit World(const BlobWorldConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
    if (cfg.velocity == VelocityKind::kRandomUniform) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const double r = cfg.max_speed * std::sqrt(u(rng_));
      const double a = 2.0 * std::numbers::pi * u(rng_);
      vx_ = quantize(r * std::cos(a));
      vy_ = quantize(r * std::sin(a));
    } else if (cfg.velocity == VelocityKind::kFixed) {
      vx_ = quantize(cfg.velocity_x);
      vy_ = quantize(cfg.velocity_y);
    }
    std::uniform_int_distribution<int> count(cfg.min_blobs, cfg.max_blobs);
    const int k = count(rng_);
    for (int i = 0; i < k; ++i) spawn();
  }

  Field frame() const { return render(blobs_, cfg_); }

  void advance() {
    const double n = cfg_.grid;
    const double c = 0.5 * n;
    for (Blob& b : blobs_) {
      if (cfg_.velocity == VelocityKind::kRotational) {
        const double dx = b.x - c, dy = b.y - c;
        const double ca = std::cos(cfg_.angular_speed), sa = std::sin(cfg_.angular_speed);
        b.x = wrap(quantize(c + ca * dx - sa * dy), n);
        b.y = wrap(quantize(c + sa * dx + ca * dy), n);
      } else {
        b.x = wrap(b.x + b.vx, n);
        b.y = wrap(b.y + b.vy, n);
      }
      if (b.rate != 0.0) b.amplitude *= std::exp(b.rate);
    }
    std::erase_if(blobs_, [&](const Blob& b) { return b.amplitude < cfg_.death_amplitude; });
    if (cfg_.spawn_rate > 0.0) {
      std::poisson_distribution<int> births(cfg_.spawn_rate);
      const int k = births(rng_);
      for (int i = 0; i < k; ++i) spawn();
    }
  }

 private:
  void spawn() {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Blob b;
    b.x = quantize(u(rng_) * cfg_.grid);
    b.y = quantize(u(rng_) * cfg_.grid);
    if (b.x >= cfg_.grid) b.x -= cfg_.grid;
    if (b.y >= cfg_.grid) b.y -= cfg_.grid;
    b.vx = vx_;
    b.vy = vy_;
    b.amplitude = cfg_.min_amplitude + (cfg_.max_amplitude - cfg_.min_amplitude) * u(rng_);
    b.radius = cfg_.min_radius + (cfg_.max_radius - cfg_.min_radius) * u(rng_);
    b.rate = cfg_.min_rate + (cfg_.max_rate - cfg_.min_rate) * u(rng_);
    blobs_.push_back(b);
  }

  const BlobWorldConfig& cfg_;
  Rng rng_;
  double vx_ = 0.0;
  double vy_ = 0.0;
  std::vector<Blob> blobs_;
};

}  // namespace

FieldBatch generate_sequence(const BlobWorldConfig& cfg, int length) {
  cfg.validate();
  if (length < 1) throw DomainError("generate_sequence: length must be >= 1");
  World world(cfg);
  FieldBatch frames;
  frames.reserve(length);
  for (int t = 0; t < length; ++t) {
    if (t > 0) world.advance();
    frames.push_back(world.frame());
  }
  return frames;
}

void PatchFilter::validate() const {
  if (!(min_cloud_fraction >= 0.0 && min_cloud_fraction <= 1.0))
    throw DomainError("PatchFilter: min_cloud_fraction must be in [0, 1]");
}

FilterResult apply_filter(const Field& f, const PatchFilter& filter, double view_zenith, double solar_zenith) {
  filter.validate();
  if (f.units() != Units::kKelvin) throw ContractViolation("apply_filter expects kelvin fields");
  std::size_t cold = 0;
  for (float v : f.values()) cold += v < filter.cloud_threshold ? 1 : 0;
  FilterResult r;
  r.cloud_fraction = f.empty() ? 0.0 : static_cast<double>(cold) / static_cast<double>(f.size());
  r.view_ok = view_zenith < filter.max_view_zenith;
  r.solar_ok = solar_zenith < filter.max_solar_zenith;
  r.accepted = r.cloud_fraction >= filter.min_cloud_fraction && r.cloud_fraction > 0.0 && r.view_ok && r.solar_ok;
  return r;
}

GeneratedSplit generate_split(const BlobWorldConfig& cfg, const PatchFilter& filter, const SplitSpec& spec) {
  cfg.validate();
  filter.validate();
  if (spec.length < 2) throw DomainError("generate_split: sequences need at least 2 frames");
  GeneratedSplit out;
  const std::size_t max_attempts = std::max<std::size_t>(100, spec.count * 100);
  const std::uint64_t split_base = derive_seed(cfg.seed, 0x5350'0000ULL + static_cast<std::uint64_t>(spec.split));
  // Candidates are generated in parallel blocks but accepted strictly in attempt order.
  const std::size_t block = 64;
  while (out.sequences.size() < spec.count) {
    if (out.attempts >= max_attempts)
      throw DomainError("generate_split: filter rejected too many sequences (" + std::to_string(out.attempts) +
                        " attempts)");
    std::vector<FieldBatch> cand(block);
    std::vector<char> ok(block, 0);
    const std::size_t first = out.attempts;
    parallel_for(block, [&](std::size_t k) {
      BlobWorldConfig c = cfg;
      c.seed = derive_seed(split_base, first + k);
      cand[k] = generate_sequence(c, spec.length);
      ok[k] = apply_filter(cand[k][1], filter).accepted ? 1 : 0;
    });
    for (std::size_t k = 0; k < block && out.sequences.size() < spec.count; ++k) {
      ++out.attempts;
      if (ok[k]) out.sequences.push_back(std::move(cand[k]));
    }
  }
  out.rejected_fraction =
      out.attempts == 0 ? 0.0 : static_cast<double>(out.attempts - out.sequences.size()) / out.attempts;
  return out;
}

BuiltDataset build_dataset(const BlobWorldConfig& cfg, const PatchFilter& filter, std::span<const SplitSpec> splits,
                           const std::filesystem::path& out_dir) {
  std::vector<GeneratedSplit> generated;
  const GeneratedSplit* train = nullptr;
  for (const SplitSpec& s : splits) {
    generated.push_back(generate_split(cfg, filter, s));
  }
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i].split == Split::kTrain) train = &generated[i];
  }
  if (!train || train->sequences.empty()) throw ContractViolation("build_dataset requires a non-empty train split");
  std::vector<Field> train_frames;
  for (const auto& seq : train->sequences) train_frames.insert(train_frames.end(), seq.begin(), seq.end());
  const NormStats stats = compute_stats(train_frames);
  train_frames.clear();

  std::filesystem::create_directories(out_dir);
  BuiltDataset built;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    const std::string name(to_string(splits[i].split));
    DatasetPaths p{out_dir / (name + ".json"), out_dir / (name + ".edmt")};
    write_tensor_file(p.tensor, to_tensor(generated[i].sequences));
    DatasetManifest m;
    m.count = generated[i].sequences.size();
    m.frames_per_sample = splits[i].length;
    m.field_shape = Shape{1, cfg.grid, cfg.grid};
    m.units = Units::kKelvin;
    m.stats = stats;
    m.split = splits[i].split;
    m.source = "blob_world";
    m.tensor_file = p.tensor.filename().string();
    m.rejected_fraction = generated[i].rejected_fraction;
    m.seed = cfg.seed;
    write_manifest(p.manifest, m);
    built.manifests.push_back(m);
    built.paths.push_back(p);
  }
  return built;
}

LoadedDataset load_dataset(const std::filesystem::path& manifest_path) {
  LoadedDataset d;
  d.manifest = read_manifest(manifest_path);
  const std::filesystem::path tensor = manifest_path.parent_path() / d.manifest.tensor_file;
  const Tensor t = read_tensor_file(tensor);
  d.sequences = sequences_from_tensor(t, d.manifest.units);
  if (d.sequences.size() != d.manifest.count)
    throw FormatError(tensor.string() + " holds " + std::to_string(d.sequences.size()) + " sequences, manifest says " +
                      std::to_string(d.manifest.count));
  if (!d.sequences.empty() && d.sequences.front().front().shape() != d.manifest.field_shape)
    throw FormatError(tensor.string() + " frame shape does not match manifest");
  return d;
}

std::vector<FieldBatch> normalize_sequences(std::span<const FieldBatch> seqs, const NormStats& stats) {
  std::vector<FieldBatch> out(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    out[i].reserve(seqs[i].size());
    for (const Field& f : seqs[i]) out[i].push_back(normalize(f, stats));
  }
  return out;
}

}  // namespace edm
