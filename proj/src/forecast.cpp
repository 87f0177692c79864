#include "edm/forecast.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "edm/error.hpp"
#include "edm/hash.hpp"
#include "edm/parallel.hpp"
#include "edm/random.hpp"

namespace edm {

Field PersistenceForecaster::step(std::span<const Field> window, std::uint64_t) const {
  if (window.empty()) throw ContractViolation("persistence needs at least one frame");
  return window.back();
}

BaselineForecaster::BaselineForecaster(std::shared_ptr<const BaselineModel> model) : model_(std::move(model)) {
  if (!model_) throw ContractViolation("BaselineForecaster: null model");
}

Field BaselineForecaster::step(std::span<const Field> window, std::uint64_t) const { return model_->predict(window); }

DiffusionForecaster::DiffusionForecaster(std::shared_ptr<const Denoiser> denoiser, SampleConfig cfg)
    : denoiser_(std::move(denoiser)), cfg_(cfg) {
  if (!denoiser_) throw ContractViolation("DiffusionForecaster: null denoiser");
  cfg_.validate();
}

Field DiffusionForecaster::step(std::span<const Field> window, std::uint64_t step_seed) const {
  if (window.empty()) throw ContractViolation("diffusion step needs condition frames");
  SampleConfig c = cfg_;
  c.seed = step_seed;
  Shape s = window.back().shape();
  return generate(*denoiser_, window, c, s, window.back().units());
}

Field ZeroResidual::sample(std::span<const Field> condition, std::uint64_t) const {
  if (condition.empty()) throw ContractViolation("residual sampler needs a condition");
  return Field(condition.back().shape(), condition.back().units(), 0.0f);
}

DiffusionResidual::DiffusionResidual(std::shared_ptr<const Denoiser> denoiser, SampleConfig cfg,
                                     NormStats residual_stats)
    : denoiser_(std::move(denoiser)), cfg_(cfg), stats_(std::move(residual_stats)) {
  if (!denoiser_) throw ContractViolation("DiffusionResidual: null denoiser");
  cfg_.validate();
}

Field DiffusionResidual::sample(std::span<const Field> condition, std::uint64_t seed) const {
  if (condition.empty()) throw ContractViolation("residual sampler needs a condition");
  SampleConfig c = cfg_;
  c.seed = seed;
  Field r = generate(*denoiser_, condition, c, condition.back().shape(), condition.back().units());
  for (int ch = 0; ch < r.channels(); ++ch) {
    const double m = stats_.mean_for(ch), s = stats_.std_for(ch);
    for (float& v : r.channel(ch)) v = static_cast<float>(v * s + m);
  }
  return r;
}

CorrDiffForecaster::CorrDiffForecaster(std::shared_ptr<const BaselineModel> baseline,
                                       std::shared_ptr<const ResidualGenerator> residual)
    : baseline_(std::move(baseline)), residual_(std::move(residual)) {
  if (!baseline_ || !residual_) throw ContractViolation("CorrDiffForecaster: null component");
}

CorrDiffForecaster::Components CorrDiffForecaster::components(std::span<const Field> window,
                                                              std::uint64_t step_seed) const {
  Components c;
  c.baseline = baseline_->predict(window);
  std::vector<Field> cond(window.begin(), window.end());
  cond.push_back(c.baseline);
  c.residual = residual_->sample(cond, step_seed);
  require_same_shape(c.baseline, c.residual, "corrdiff step");
  c.total = Field(c.baseline.shape(), c.baseline.units());
  for (std::size_t i = 0; i < c.total.size(); ++i) c.total[i] = c.baseline[i] + c.residual[i];
  return c;
}

Field CorrDiffForecaster::step(std::span<const Field> window, std::uint64_t step_seed) const {
  return components(window, step_seed).total;
}

LatentForecaster::LatentForecaster(std::shared_ptr<const Denoiser> latent_denoiser,
                                   std::shared_ptr<const Autoencoder> ae, SampleConfig cfg)
    : denoiser_(std::move(latent_denoiser)), ae_(std::move(ae)), cfg_(cfg) {
  if (!denoiser_ || !ae_) throw ContractViolation("LatentForecaster: null component");
  cfg_.validate();
}

Field LatentForecaster::step(std::span<const Field> window, std::uint64_t step_seed) const {
  if (window.empty()) throw ContractViolation("latent step needs condition frames");
  SampleConfig c = cfg_;
  c.seed = step_seed;
  Field out = generate_latent(*denoiser_, *ae_, window, c, window.back().shape());
  out.set_units(window.back().units());
  return out;
}

void RolloutConfig::validate() const {
  if (leads < 1) throw DomainError("RolloutConfig: leads must be >= 1");
  if (window < 1) throw DomainError("RolloutConfig: window must be >= 1");
  if (members < 1) throw DomainError("RolloutConfig: members must be >= 1");
  if (first_member < 0) throw DomainError("RolloutConfig: first_member must be >= 0");
  if (clamp && !(clamp_max > clamp_min)) throw DomainError("RolloutConfig: clamp_max must exceed clamp_min");
}

std::string RolloutConfig::describe() const {
  std::ostringstream os;
  os.precision(17);
  os << "leads=" << leads << ";window=" << window << ";members=" << members << ";first_member=" << first_member
     << ";base_seed=" << base_seed << ";clamp=" << clamp;
  if (clamp) os << ";clamp_min=" << clamp_min << ";clamp_max=" << clamp_max;
  return os.str();
}

std::uint64_t member_seed(std::uint64_t base_seed, int member) {
  return derive_seed(base_seed, static_cast<std::uint64_t>(member));
}

std::uint64_t lead_seed(std::uint64_t member_seed, int lead) {
  return derive_seed(member_seed, static_cast<std::uint64_t>(lead));
}

std::vector<Field> rollout(const Forecaster& model, std::span<const Field> init_window, const RolloutConfig& cfg,
                           std::uint64_t seed) {
  cfg.validate();
  if (init_window.size() != static_cast<std::size_t>(cfg.window))
    throw ContractViolation("rollout expects " + std::to_string(cfg.window) + " initial frames, got " +
                            std::to_string(init_window.size()));
  for (const Field& f : init_window) {
    require_same_shape(f, init_window.front(), "rollout window");
    f.require_finite("rollout initial window");
  }
  std::vector<Field> window(init_window.begin(), init_window.end());
  std::vector<Field> out;
  out.reserve(cfg.leads);
  for (int k = 0; k < cfg.leads; ++k) {
    Field next = model.step(window, lead_seed(seed, k));
    if (!next.all_finite())
      throw NumericalError(model.name() + " produced a non-finite frame at lead " + std::to_string(k + 1) +
                           " (member seed " + hex64(seed) + ")");
    require_same_shape(next, window.back(), "rollout step");
    if (cfg.clamp) {
      for (float& v : next.values())
        v = static_cast<float>(std::clamp(static_cast<double>(v), cfg.clamp_min, cfg.clamp_max));
    }
    out.push_back(next);
    window.erase(window.begin());
    window.push_back(std::move(next));
  }
  return out;
}

std::vector<Field> EnsembleForecast::mean() const {
  validate();
  std::vector<Field> out;
  const double inv = 1.0 / static_cast<double>(members.size());
  for (int k = 0; k < lead_count(); ++k) {
    const Field& first = members.front()[k];
    std::vector<double> acc(first.size(), 0.0);
    for (const auto& m : members)
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += m[k][i];
    Field f(first.shape(), first.units());
    for (std::size_t i = 0; i < acc.size(); ++i) f[i] = static_cast<float>(acc[i] * inv);
    out.push_back(std::move(f));
  }
  return out;
}

void EnsembleForecast::validate() const {
  if (members.empty()) throw ContractViolation("ensemble has no members");
  if (seeds.size() != members.size() || member_indices.size() != members.size())
    throw ContractViolation("ensemble provenance does not match member count");
  const std::size_t leads = members.front().size();
  if (leads == 0) throw ContractViolation("ensemble has no leads");
  const Shape s = members.front().front().shape();
  for (const auto& m : members) {
    if (m.size() != leads) throw ContractViolation("ensemble members have different lead counts");
    for (const Field& f : m) {
      if (f.shape() != s) throw ContractViolation("ensemble fields have different shapes");
    }
  }
}

EnsembleForecast ensemble(const Forecaster& model, std::span<const Field> init_window, const RolloutConfig& cfg,
                          std::string init_tag) {
  cfg.validate();
  EnsembleForecast e;
  e.members.resize(cfg.members);
  for (int j = 0; j < cfg.members; ++j) {
    e.member_indices.push_back(cfg.first_member + j);
    e.seeds.push_back(member_seed(cfg.base_seed, cfg.first_member + j));
  }
  parallel_for(static_cast<std::size_t>(cfg.members),
               [&](std::size_t j) { e.members[j] = rollout(model, init_window, cfg, e.seeds[j]); });
  e.model = model.name();
  e.config_hash = hex64(fnv1a64(model.name() + ";" + cfg.describe()));
  e.init_tag = std::move(init_tag);
  return e;
}

void write_ensemble(const std::filesystem::path& path, const EnsembleForecast& e) {
  e.validate();
  std::vector<Field> flat;
  for (const auto& m : e.members) flat.insert(flat.end(), m.begin(), m.end());
  write_tensor_file(path, to_tensor(flat));
  nlohmann::json j;
  j["members"] = e.member_count();
  j["leads"] = e.lead_count();
  j["layout"] = "[members*leads, C, H, W], member-major";
  j["member_indices"] = e.member_indices;
  std::vector<std::string> seeds;
  for (auto s : e.seeds) seeds.push_back(hex64(s));
  j["seeds"] = seeds;
  j["model"] = e.model;
  j["config_hash"] = e.config_hash;
  j["init_tag"] = e.init_tag;
  j["units"] = std::string(to_string(e.members.front().front().units()));
  std::ofstream out(path.string() + ".json");
  if (!out) throw FormatError("cannot write " + path.string() + ".json");
  out << j.dump(2) << '\n';
}

EnsembleForecast read_ensemble(const std::filesystem::path& path) {
  std::ifstream in(path.string() + ".json");
  if (!in) throw FormatError("missing ensemble sidecar " + path.string() + ".json");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("bad ensemble sidecar: " + std::string(ex.what()));
  }
  EnsembleForecast e;
  try {
    const int members = j.at("members").get<int>();
    const int leads = j.at("leads").get<int>();
    const Units units = units_from_string(j.at("units").get<std::string>());
    const FieldBatch flat = batch_from_tensor(read_tensor_file(path), units);
    if (flat.size() != static_cast<std::size_t>(members) * leads)
      throw FormatError("ensemble tensor holds " + std::to_string(flat.size()) + " fields, sidecar says " +
                        std::to_string(members) + "x" + std::to_string(leads));
    e.members.resize(members);
    for (int m = 0; m < members; ++m)
      e.members[m].assign(flat.begin() + static_cast<std::ptrdiff_t>(m) * leads,
                          flat.begin() + static_cast<std::ptrdiff_t>(m + 1) * leads);
    e.member_indices = j.at("member_indices").get<std::vector<int>>();
    for (const auto& s : j.at("seeds")) e.seeds.push_back(std::stoull(s.get<std::string>(), nullptr, 16));
    e.model = j.at("model").get<std::string>();
    e.config_hash = j.at("config_hash").get<std::string>();
    e.init_tag = j.at("init_tag").get<std::string>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("bad ensemble sidecar: " + std::string(ex.what()));
  }
  e.validate();
  return e;
}

}  // namespace edm
