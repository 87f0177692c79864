#include "edm/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "edm/error.hpp"
#include "edm/random.hpp"

namespace edm {

namespace {

int log2_compression(int c) {
  switch (c) {
    case 1: return 0;
    case 2: return 1;
    case 4: return 2;
  }
  throw DomainError("autoencoder compression must be 1, 2 or 4");
}

constexpr double kLogVarClamp = 20.0;

}  // namespace

Shape Autoencoder::latent_shape(Shape data) const {
  const int c = compression();
  if (data.channels != data_channels())
    throw ContractViolation("autoencoder expects " + std::to_string(data_channels()) + " data channels, got " +
                            std::to_string(data.channels));
  if (data.height % c != 0 || data.width % c != 0)
    throw ContractViolation("field " + to_string(data) + " is not divisible by compression " + std::to_string(c));
  return {latent_channels(), data.height / c, data.width / c};
}

Shape Autoencoder::data_shape(Shape latent) const {
  if (latent.channels != latent_channels())
    throw ContractViolation("autoencoder expects " + std::to_string(latent_channels()) + " latent channels, got " +
                            std::to_string(latent.channels));
  return {data_channels(), latent.height * compression(), latent.width * compression()};
}

IdentityAutoencoder::IdentityAutoencoder(int channels) : channels_(channels) {
  if (channels < 1) throw DomainError("IdentityAutoencoder: channels must be >= 1");
}

Field IdentityAutoencoder::encode(const Field& x) const {
  latent_shape(x.shape());
  return x;
}

Field IdentityAutoencoder::decode(const Field& z) const {
  data_shape(z.shape());
  return z;
}

void AutoencoderSpec::validate() const {
  if (data_channels < 1 || latent_channels < 1) throw DomainError("AutoencoderSpec: channel counts must be >= 1");
  if (width < 1) throw DomainError("AutoencoderSpec: width must be >= 1");
  log2_compression(compression);
  if (variational && !(kl_weight >= 0.0)) throw DomainError("AutoencoderSpec: kl_weight must be >= 0");
}

ConvNetSpec AutoencoderSpec::encoder_spec() const {
  validate();
  ConvNetSpec s;
  s.topology = Topology::kEncoder;
  s.in_channels = data_channels;
  s.out_channels = variational ? 2 * latent_channels : latent_channels;
  s.widths = {width};
  s.depth = log2_compression(compression);
  s.activation = linear ? Activation::kIdentity : Activation::kSiLU;
  s.noise_embedding = false;
  s.zero_init_output = false;
  s.seed = derive_seed(seed, 1);
  return s;
}

ConvNetSpec AutoencoderSpec::decoder_spec() const {
  ConvNetSpec s = encoder_spec();
  s.topology = Topology::kDecoder;
  s.in_channels = latent_channels;
  s.out_channels = data_channels;
  s.seed = derive_seed(seed, 2);
  return s;
}

ConvAutoencoder::ConvAutoencoder(AutoencoderSpec spec)
    : spec_(std::move(spec)),
      encoder_(spec_.encoder_spec()),
      decoder_(spec_.decoder_spec()),
      latent_stats_(std::vector<double>(spec_.latent_channels, 0.0), std::vector<double>(spec_.latent_channels, 1.0)) {}

Field ConvAutoencoder::encode_raw(const Field& x) const {
  const Shape ls = latent_shape(x.shape());
  Field h = encoder_.forward(x, 0.0);
  Field z(ls, Units::kLatent);
  std::copy_n(h.values().begin(), z.size(), z.values().begin());
  return z;
}

Field ConvAutoencoder::decode_raw(const Field& z) const {
  data_shape(z.shape());
  Field out = decoder_.forward(z, 0.0);
  out.set_units(Units::kNormalized);
  return out;
}

Field ConvAutoencoder::encode(const Field& x) const {
  Field z = encode_raw(x);
  for (int c = 0; c < z.channels(); ++c) {
    const double m = latent_stats_.mean_for(c), s = latent_stats_.std_for(c);
    for (float& v : z.channel(c)) v = static_cast<float>((v - m) / s);
  }
  return z;
}

Field ConvAutoencoder::decode(const Field& z) const {
  Field raw = z;
  for (int c = 0; c < raw.channels(); ++c) {
    const double m = latent_stats_.mean_for(c), s = latent_stats_.std_for(c);
    for (float& v : raw.channel(c)) v = static_cast<float>(v * s + m);
  }
  return decode_raw(raw);
}

ParamVector ConvAutoencoder::initial_params() const {
  ParamVector e = encoder_.initial_params();
  const ParamVector d = decoder_.initial_params();
  ParamVector out;
  out.values = e.values;
  out.values.insert(out.values.end(), d.values.begin(), d.values.end());
  out.layout = e.layout;
  for (ParamBlock b : d.layout.blocks) {
    b.name = "decoder." + b.name;
    b.offset += e.layout.total;
    out.layout.blocks.push_back(b);
  }
  for (std::size_t i = 0; i < e.layout.blocks.size(); ++i)
    out.layout.blocks[i].name = "encoder." + out.layout.blocks[i].name;
  out.layout.total = e.layout.total + d.layout.total;
  return out;
}

void ConvAutoencoder::set_params(std::span<const double> values) {
  if (values.size() != num_params())
    throw ContractViolation("autoencoder expects " + std::to_string(num_params()) + " parameters, got " +
                            std::to_string(values.size()));
  encoder_.set_params(values.first(encoder_.num_params()));
  decoder_.set_params(values.subspan(encoder_.num_params()));
}

std::vector<double> ConvAutoencoder::params() const {
  std::vector<double> p = encoder_.params();
  const std::vector<double> d = decoder_.params();
  p.insert(p.end(), d.begin(), d.end());
  return p;
}

void ConvAutoencoder::set_latent_stats(NormStats s) {
  if (s.size() != 1 && s.size() != static_cast<std::size_t>(spec_.latent_channels))
    throw ContractViolation("latent stats must have one entry or one per latent channel");
  latent_stats_ = std::move(s);
}

KelvinAutoencoder::KelvinAutoencoder(std::shared_ptr<const Autoencoder> inner, NormStats data_stats)
    : inner_(std::move(inner)), stats_(std::move(data_stats)) {
  if (!inner_) throw ContractViolation("KelvinAutoencoder: null codec");
}

Field KelvinAutoencoder::encode(const Field& x) const { return inner_->encode(normalize(x, stats_)); }

Field KelvinAutoencoder::decode(const Field& z) const {
  Field n = inner_->decode(z);
  n.set_units(Units::kNormalized);
  return denormalize(n, stats_);
}

namespace {

/// Reconstruction loss of one field; adds scale * gradient into grad when non-empty.
double autoencoder_sample(const ConvAutoencoder& ae, const Field& x, std::uint64_t seed, std::span<double> grad,
                          double scale) {
  const AutoencoderSpec& spec = ae.spec();
  const ConvNet<float>& enc = ae.encoder();
  const ConvNet<float>& dec = ae.decoder();
  const Shape ls = ae.latent_shape(x.shape());
  const bool want_grad = !grad.empty();

  Tape<float> tape_e, tape_d;
  const FeatureMap<float> h = enc.forward(to_feature_map<float>(x), 0.0, want_grad ? &tape_e : nullptr);
  const std::size_t nl = ls.size();
  FeatureMap<float> z(ls.channels, ls.height, ls.width);
  std::vector<double> eps;
  double kl = 0.0;
  if (spec.variational) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    eps.resize(nl);
    for (std::size_t i = 0; i < nl; ++i) {
      const double mu = h.data[i];
      const double lv = std::clamp<double>(h.data[nl + i], -kLogVarClamp, kLogVarClamp);
      eps[i] = normal(rng);
      z.data[i] = static_cast<float>(mu + std::exp(0.5 * lv) * eps[i]);
      kl += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
    }
    kl /= static_cast<double>(nl);
  } else {
    std::copy_n(h.data.begin(), nl, z.data.begin());
  }

  const FeatureMap<float> r = dec.forward(z, 0.0, want_grad ? &tape_d : nullptr);
  const double m = static_cast<double>(x.size());
  double ss = 0.0;
  FeatureMap<float> gr(r.channels, r.height, r.width);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(r.data[i]) - x[i];
    ss += d * d;
    gr.data[i] = static_cast<float>(scale * 2.0 * d / m);
  }
  const double loss = ss / m + (spec.variational ? spec.kl_weight * kl : 0.0);
  if (!want_grad) return loss;

  const std::size_t ne = enc.num_params();
  const FeatureMap<float> gz = dec.backward(gr, 0.0, tape_d, grad.subspan(ne));
  FeatureMap<float> gh(h.channels, h.height, h.width);
  if (spec.variational) {
    const double kw = scale * spec.kl_weight / static_cast<double>(nl);
    for (std::size_t i = 0; i < nl; ++i) {
      const double mu = h.data[i];
      const double raw_lv = h.data[nl + i];
      const double lv = std::clamp(raw_lv, -kLogVarClamp, kLogVarClamp);
      const double sd = std::exp(0.5 * lv);
      gh.data[i] = static_cast<float>(gz.data[i] + kw * mu);
      const double glv = gz.data[i] * eps[i] * 0.5 * sd + kw * 0.5 * (std::exp(lv) - 1.0);
      gh.data[nl + i] = std::abs(raw_lv) > kLogVarClamp ? 0.0f : static_cast<float>(glv);
    }
  } else {
    gh.data = gz.data;
  }
  enc.backward(gh, 0.0, tape_e, grad.first(ne));
  return loss;
}

NormStats floored_channel_stats(std::span<const Field> fields) {
  const int channels = fields.front().channels();
  std::vector<double> mean(channels, 0.0), sd(channels, 0.0);
  double n = 0.0;
  for (const auto& f : fields) {
    for (int c = 0; c < channels; ++c)
      for (float v : f.channel(c)) mean[c] += v;
    n += static_cast<double>(f.shape().plane());
  }
  for (double& v : mean) v /= n;
  for (const auto& f : fields)
    for (int c = 0; c < channels; ++c)
      for (float v : f.channel(c)) sd[c] += (v - mean[c]) * (v - mean[c]);
  for (double& v : sd) v = std::max(std::sqrt(v / n), 1e-6);
  return NormStats(std::move(mean), std::move(sd));
}

}  // namespace

AutoencoderTrainResult train_autoencoder(std::span<const Field> data, const AutoencoderSpec& spec,
                                         const TrainConfig& cfg, const EpochCallback& on_epoch) {
  spec.validate();
  if (data.empty()) throw ContractViolation("train_autoencoder: no data");
  for (const Field& f : data) {
    if (f.units() == Units::kKelvin) throw ContractViolation("train_autoencoder expects normalized fields");
  }
  auto ae = std::make_shared<ConvAutoencoder>(spec);
  ae->latent_shape(data.front().shape());

  Objective obj;
  obj.num_samples = data.size();
  obj.initial = ae->initial_params();
  obj.set_params = [&](std::span<const double> v) { ae->set_params(v); };
  obj.sample = [&](std::size_t i, std::uint64_t seed, std::span<double> g, double s) {
    return autoencoder_sample(*ae, data[i], seed, g, s);
  };
  AutoencoderTrainResult out;
  out.train = minimize(obj, cfg, on_epoch);

  const std::size_t n_val = std::min(data.size() - 1, static_cast<std::size_t>(std::floor(data.size() * cfg.val_fraction)));
  std::vector<Field> latents;
  for (std::size_t i = 0; i + n_val < data.size(); ++i) latents.push_back(ae->encode_raw(data[i]));
  ae->set_latent_stats(floored_channel_stats(latents));
  out.model = std::move(ae);
  return out;
}

ReconReport evaluate_reconstruction(const Autoencoder& ae, std::span<const Field> dataset) {
  if (dataset.empty()) throw ContractViolation("evaluate_reconstruction: empty dataset");
  ReconReport r;
  double sum = 0.0, abs_sum = 0.0, sq_sum = 0.0;
  std::size_t n = 0;
  for (const Field& x : dataset) {
    const Field rec = ae.decode(ae.encode(x));
    require_same_shape(x, rec, "evaluate_reconstruction");
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = static_cast<double>(x[i]) - rec[i];
      sum += e;
      abs_sum += std::abs(e);
      sq_sum += e * e;
      worst = std::max(worst, std::abs(e));
    }
    n += x.size();
    r.worst_pixel.push_back(worst);
  }
  r.images = dataset.size();
  r.bias = sum / static_cast<double>(n);
  r.mae = abs_sum / static_cast<double>(n);
  r.rmse = std::sqrt(sq_sum / static_cast<double>(n));
  return r;
}

void write_recon_table(const std::filesystem::path& path, std::span<const ReconRow> rows) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "model,bias_k,mae_k,rmse_k\n";
  out.precision(9);
  for (const auto& row : rows)
    out << row.model << ',' << row.report.bias << ',' << row.report.mae << ',' << row.report.rmse << '\n';
}

}  // namespace edm
