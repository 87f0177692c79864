#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "edm/autoencoder.hpp"
#include "edm/core_grid.hpp"
#include "edm/network.hpp"
#include "edm/preconditioning.hpp"
#include "edm/training.hpp"

namespace edm {

enum class ModelKind { kDiffusion, kBaseline, kAutoencoder };

std::string_view to_string(ModelKind k);
ModelKind model_kind_from_string(std::string_view s);

/// A trained model: a JSON description plus a rank-1 float32 parameter tensor stored
/// next to it. Dependency paths are relative to the checkpoint's directory.
struct Checkpoint {
  ModelKind kind = ModelKind::kDiffusion;
  TaskKind task = TaskKind::kConditional;
  ConvNetSpec net;
  std::optional<AutoencoderSpec> autoencoder;
  std::optional<NormStats> latent_stats;
  PrecondParams precond;
  std::optional<NormStats> data_stats;
  std::optional<NormStats> residual_stats;
  int window = 2;
  /// Diffusion runs in the latent space of `autoencoder_path`.
  bool latent = false;
  std::string baseline_path;
  std::string autoencoder_path;
  std::vector<double> params;
};

/// Writes `json_path` and <stem>.params.edmt beside it.
void save_checkpoint(const std::filesystem::path& json_path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& json_path);

std::shared_ptr<const ConvNet<float>> build_network(const Checkpoint& c);
std::shared_ptr<const Denoiser> build_denoiser(const Checkpoint& c);
std::shared_ptr<const BaselineModel> build_baseline(const Checkpoint& c);
std::shared_ptr<ConvAutoencoder> build_autoencoder(const Checkpoint& c);

}  // namespace edm
