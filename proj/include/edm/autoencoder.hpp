#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "edm/core_grid.hpp"
#include "edm/network.hpp"
#include "edm/training.hpp"

namespace edm {

/// Codec between data space and a (possibly) compressed latent space. Implementations
/// must be safe for concurrent const use.
class Autoencoder {
 public:
  virtual ~Autoencoder() = default;

  virtual Field encode(const Field& x) const = 0;
  virtual Field decode(const Field& z) const = 0;
  /// Spatial downsampling factor per axis.
  virtual int compression() const = 0;
  virtual int data_channels() const = 0;
  virtual int latent_channels() const = 0;
  virtual Units latent_units() const { return Units::kLatent; }

  /// Throws ContractViolation unless `data` is divisible by the compression and has the
  /// declared channel count.
  Shape latent_shape(Shape data) const;
  Shape data_shape(Shape latent) const;
};

/// encode and decode return copies of their input.
class IdentityAutoencoder final : public Autoencoder {
 public:
  explicit IdentityAutoencoder(int channels = 1);

  Field encode(const Field& x) const override;
  Field decode(const Field& z) const override;
  int compression() const override { return 1; }
  int data_channels() const override { return channels_; }
  int latent_channels() const override { return channels_; }
  Units latent_units() const override { return Units::kNormalized; }

 private:
  int channels_;
};

struct AutoencoderSpec {
  int data_channels = 1;
  int compression = 2;  // 1, 2 or 4
  int latent_channels = 4;
  int width = 16;
  bool linear = false;
  /// KL-regularized variational encoder (mean and log-variance heads).
  bool variational = false;
  double kl_weight = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
  ConvNetSpec encoder_spec() const;
  ConvNetSpec decoder_spec() const;
};

/// Convolutional encoder/decoder pair. encode() returns the latent standardized with
/// latent_stats() (the posterior mean for the variational variant); decode() undoes it.
class ConvAutoencoder final : public Autoencoder {
 public:
  explicit ConvAutoencoder(AutoencoderSpec spec);

  Field encode(const Field& x) const override;
  Field decode(const Field& z) const override;
  int compression() const override { return spec_.compression; }
  int data_channels() const override { return spec_.data_channels; }
  int latent_channels() const override { return spec_.latent_channels; }

  /// Raw encoder output (mean channels only) and raw decoder, without standardization.
  Field encode_raw(const Field& x) const;
  Field decode_raw(const Field& z) const;

  const AutoencoderSpec& spec() const { return spec_; }
  ConvNet<float>& encoder() { return encoder_; }
  ConvNet<float>& decoder() { return decoder_; }
  const ConvNet<float>& encoder() const { return encoder_; }
  const ConvNet<float>& decoder() const { return decoder_; }

  std::size_t num_params() const { return encoder_.num_params() + decoder_.num_params(); }
  ParamVector initial_params() const;
  /// Encoder parameters followed by decoder parameters.
  void set_params(std::span<const double> values);
  std::vector<double> params() const;

  const NormStats& latent_stats() const { return latent_stats_; }
  void set_latent_stats(NormStats s);

 private:
  AutoencoderSpec spec_;
  ConvNet<float> encoder_;
  ConvNet<float> decoder_;
  NormStats latent_stats_;
};

/// Wraps a normalized-space codec so it consumes and produces kelvin fields.
class KelvinAutoencoder final : public Autoencoder {
 public:
  KelvinAutoencoder(std::shared_ptr<const Autoencoder> inner, NormStats data_stats);

  Field encode(const Field& x) const override;
  Field decode(const Field& z) const override;
  int compression() const override { return inner_->compression(); }
  int data_channels() const override { return inner_->data_channels(); }
  int latent_channels() const override { return inner_->latent_channels(); }
  Units latent_units() const override { return inner_->latent_units(); }

 private:
  std::shared_ptr<const Autoencoder> inner_;
  NormStats stats_;
};

struct AutoencoderTrainResult {
  std::shared_ptr<ConvAutoencoder> model;
  TrainResult train;
};

/// MSE (plus KL for the variational variant) training on normalized fields. Latent
/// statistics are computed on the training block after training.
AutoencoderTrainResult train_autoencoder(std::span<const Field> data, const AutoencoderSpec& spec,
                                         const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Reconstruction errors pooled over every pixel. bias = mean(original - reconstruction).
struct ReconReport {
  double bias = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  /// Largest absolute pixel error of each image.
  std::vector<double> worst_pixel;
  std::size_t images = 0;
};

ReconReport evaluate_reconstruction(const Autoencoder& ae, std::span<const Field> dataset);

struct ReconRow {
  std::string model;
  ReconReport report;
};

/// CSV with columns model,bias_k,mae_k,rmse_k.
void write_recon_table(const std::filesystem::path& path, std::span<const ReconRow> rows);

}  // namespace edm
