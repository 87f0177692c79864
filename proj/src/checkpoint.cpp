#include "edm/checkpoint.hpp"

#include <fstream>

#include <json.hpp>

#include "edm/error.hpp"

namespace edm {

std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kDiffusion: return "diffusion";
    case ModelKind::kBaseline: return "baseline";
    case ModelKind::kAutoencoder: return "autoencoder";
  }
  return "diffusion";
}

ModelKind model_kind_from_string(std::string_view s) {
  if (s == "diffusion") return ModelKind::kDiffusion;
  if (s == "baseline") return ModelKind::kBaseline;
  if (s == "autoencoder") return ModelKind::kAutoencoder;
  throw FormatError("unknown model kind '" + std::string(s) + "'");
}

namespace {

using nlohmann::json;

TaskKind task_from_string(std::string_view s) {
  if (s == "uncond") return TaskKind::kUnconditional;
  if (s == "cond") return TaskKind::kConditional;
  if (s == "corrdiff") return TaskKind::kCorrDiffResidual;
  throw FormatError("unknown task '" + std::string(s) + "'");
}

json stats_json(const NormStats& s) { return json{{"mean", s.mean}, {"std", s.std}}; }

NormStats stats_from(const json& j) {
  return NormStats(j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>());
}

json spec_json(const ConvNetSpec& s) {
  return json{{"in_channels", s.in_channels},
              {"out_channels", s.out_channels},
              {"widths", s.widths},
              {"depth", s.depth},
              {"activation", std::string(to_string(s.activation))},
              {"seed", s.seed},
              {"noise_embedding", s.noise_embedding},
              {"zero_init_output", s.zero_init_output},
              {"topology", std::string(to_string(s.topology))}};
}

ConvNetSpec spec_from(const json& j) {
  ConvNetSpec s;
  s.in_channels = j.at("in_channels").get<int>();
  s.out_channels = j.at("out_channels").get<int>();
  s.widths = j.at("widths").get<std::vector<int>>();
  s.depth = j.at("depth").get<int>();
  s.activation = activation_from_string(j.at("activation").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  s.noise_embedding = j.at("noise_embedding").get<bool>();
  s.zero_init_output = j.at("zero_init_output").get<bool>();
  s.topology = topology_from_string(j.value("topology", std::string("unet")));
  return s;
}

json ae_json(const AutoencoderSpec& a) {
  return json{{"data_channels", a.data_channels}, {"compression", a.compression},
              {"latent_channels", a.latent_channels}, {"width", a.width},
              {"linear", a.linear}, {"variational", a.variational},
              {"kl_weight", a.kl_weight}, {"seed", a.seed}};
}

AutoencoderSpec ae_from(const json& j) {
  AutoencoderSpec a;
  a.data_channels = j.at("data_channels").get<int>();
  a.compression = j.at("compression").get<int>();
  a.latent_channels = j.at("latent_channels").get<int>();
  a.width = j.at("width").get<int>();
  a.linear = j.at("linear").get<bool>();
  a.variational = j.at("variational").get<bool>();
  a.kl_weight = j.at("kl_weight").get<double>();
  a.seed = j.at("seed").get<std::uint64_t>();
  return a;
}

std::filesystem::path params_path(const std::filesystem::path& json_path) {
  return json_path.parent_path() / (json_path.stem().string() + ".params.edmt");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& json_path, const Checkpoint& c) {
  json j;
  j["format"] = "edm-checkpoint";
  j["version"] = 1;
  j["kind"] = std::string(to_string(c.kind));
  j["task"] = std::string(to_string(c.task));
  j["window"] = c.window;
  j["latent"] = c.latent;
  j["precond"] = {{"sigma_data", c.precond.sigma_data}};
  if (c.kind == ModelKind::kAutoencoder) {
    if (!c.autoencoder) throw ContractViolation("autoencoder checkpoint without a spec");
    j["autoencoder"] = ae_json(*c.autoencoder);
  } else {
    j["net"] = spec_json(c.net);
  }
  if (c.latent_stats) j["latent_stats"] = stats_json(*c.latent_stats);
  if (c.data_stats) j["data_stats"] = stats_json(*c.data_stats);
  if (c.residual_stats) j["residual_stats"] = stats_json(*c.residual_stats);
  if (!c.baseline_path.empty()) j["baseline"] = c.baseline_path;
  if (!c.autoencoder_path.empty()) j["autoencoder_checkpoint"] = c.autoencoder_path;
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
  const std::filesystem::path pp = params_path(json_path);
  j["params_file"] = pp.filename().string();
  j["param_count"] = c.params.size();

  Tensor t;
  t.dims = {static_cast<std::uint32_t>(c.params.size())};
  t.data.assign(c.params.begin(), c.params.end());
  write_tensor_file(pp, t);
  std::ofstream out(json_path);
  if (!out) throw FormatError("cannot write " + json_path.string());
  out << j.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw FormatError("cannot open checkpoint " + json_path.string());
  Checkpoint c;
  try {
    json j;
    in >> j;
    if (j.value("format", std::string()) != "edm-checkpoint") throw FormatError(json_path.string() + " is not a checkpoint");
    c.kind = model_kind_from_string(j.at("kind").get<std::string>());
    c.task = task_from_string(j.at("task").get<std::string>());
    c.window = j.at("window").get<int>();
    c.latent = j.at("latent").get<bool>();
    c.precond.sigma_data = j.at("precond").at("sigma_data").get<double>();
    if (c.kind == ModelKind::kAutoencoder) {
      c.autoencoder = ae_from(j.at("autoencoder"));
    } else {
      c.net = spec_from(j.at("net"));
    }
    if (j.contains("latent_stats")) c.latent_stats = stats_from(j["latent_stats"]);
    if (j.contains("data_stats")) c.data_stats = stats_from(j["data_stats"]);
    if (j.contains("residual_stats")) c.residual_stats = stats_from(j["residual_stats"]);
    c.baseline_path = j.value("baseline", std::string());
    c.autoencoder_path = j.value("autoencoder_checkpoint", std::string());
    const Tensor t = read_tensor_file(json_path.parent_path() / j.at("params_file").get<std::string>());
    if (t.dims.size() != 1 || t.data.size() != j.at("param_count").get<std::size_t>())
      throw FormatError("parameter tensor does not match param_count in " + json_path.string());
    c.params.assign(t.data.begin(), t.data.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint " + json_path.string() + ": " + e.what());
  }
  return c;
}

std::shared_ptr<const ConvNet<float>> build_network(const Checkpoint& c) {
  if (c.kind == ModelKind::kAutoencoder) throw ContractViolation("autoencoder checkpoints have no single network");
  auto net = std::make_shared<ConvNet<float>>(c.net);
  net->set_params(c.params);
  return net;
}

std::shared_ptr<const Denoiser> build_denoiser(const Checkpoint& c) {
  if (c.kind != ModelKind::kDiffusion) throw ContractViolation("checkpoint is not a diffusion model");
  return wrap_denoiser(std::make_shared<ConvRawNetwork>(build_network(c)), c.precond);
}

std::shared_ptr<const BaselineModel> build_baseline(const Checkpoint& c) {
  if (c.kind != ModelKind::kBaseline) throw ContractViolation("checkpoint is not a baseline model");
  return std::make_shared<BaselineModel>(build_network(c));
}

std::shared_ptr<ConvAutoencoder> build_autoencoder(const Checkpoint& c) {
  if (c.kind != ModelKind::kAutoencoder || !c.autoencoder)
    throw ContractViolation("checkpoint is not an autoencoder");
  auto ae = std::make_shared<ConvAutoencoder>(*c.autoencoder);
  ae->set_params(c.params);
  if (c.latent_stats) ae->set_latent_stats(*c.latent_stats);
  return ae;
}

}  // namespace edm
