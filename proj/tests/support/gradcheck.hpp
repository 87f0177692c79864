#pragma once

// Finite-difference gradient check of ConvNet<double> against its backward pass, using the
// scalar loss L = sum(g * forward(x)) for a fixed random g.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "edm/network.hpp"

namespace oracle {

struct GradCheckReport {
  double worst_param_error = 0.0;
  double worst_input_error = 0.0;
  std::string worst_block;
  std::size_t checked = 0;
};

inline double grad_mismatch(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

inline GradCheckReport gradient_check(const edm::ConvNetSpec& spec, int height, int width, std::uint64_t seed,
                                      std::size_t per_block = 6, double h = 1e-6) {
  edm::ConvNet<double> net(spec);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  // Perturb the seeded init so zero-initialized blocks also carry signal.
  std::vector<double> params = net.initial_params().values;
  for (auto& p : params) p += 0.1 * normal(rng);
  net.set_params(params);

  edm::FeatureMap<double> x(spec.in_channels, height, width);
  for (auto& v : x.data) v = normal(rng);
  const double emb = 0.37;
  edm::Tape<double> tape;
  const edm::FeatureMap<double> y = net.forward(x, emb, &tape);
  edm::FeatureMap<double> g(y.channels, y.height, y.width);
  for (auto& v : g.data) v = normal(rng);

  const auto loss = [&](const edm::FeatureMap<double>& in) {
    const edm::FeatureMap<double> out = net.forward(in, emb);
    double s = 0.0;
    for (std::size_t i = 0; i < out.data.size(); ++i) s += out.data[i] * g.data[i];
    return s;
  };

  std::vector<double> grad(params.size(), 0.0);
  const edm::FeatureMap<double> gx = net.backward(g, emb, tape, grad);

  GradCheckReport r;
  for (const auto& block : net.layout().blocks) {
    std::uniform_int_distribution<std::size_t> pick(0, block.count - 1);
    const std::size_t n = std::min(per_block, block.count);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t idx = block.offset + (n == block.count ? k : pick(rng));
      const double p0 = params[idx];
      params[idx] = p0 + h;
      net.set_params(params);
      const double up = loss(x);
      params[idx] = p0 - h;
      net.set_params(params);
      const double dn = loss(x);
      params[idx] = p0;
      net.set_params(params);
      const double err = grad_mismatch(grad[idx], (up - dn) / (2 * h));
      if (err > r.worst_param_error) {
        r.worst_param_error = err;
        r.worst_block = block.name;
      }
      ++r.checked;
    }
  }
  std::uniform_int_distribution<std::size_t> pick(0, x.data.size() - 1);
  for (int k = 0; k < 8; ++k) {
    const std::size_t idx = pick(rng);
    edm::FeatureMap<double> xp = x, xm = x;
    xp.data[idx] += h;
    xm.data[idx] -= h;
    r.worst_input_error = std::max(r.worst_input_error, grad_mismatch(gx.data[idx], (loss(xp) - loss(xm)) / (2 * h)));
    ++r.checked;
  }
  return r;
}

/// Specs that together exercise every layer type: convolution, noise-embedding bias, each
/// activation, average pooling, upsampling, skip connections and the encoder/decoder stacks.
inline std::vector<std::pair<std::string, edm::ConvNetSpec>> gradient_check_specs() {
  std::vector<std::pair<std::string, edm::ConvNetSpec>> out;
  const auto base = [] {
    edm::ConvNetSpec s;
    s.in_channels = 3;
    s.out_channels = 2;
    s.widths = {4, 5, 6};
    s.depth = 2;
    s.zero_init_output = false;
    s.seed = 17;
    return s;
  };
  for (auto a : {edm::Activation::kSiLU, edm::Activation::kReLU, edm::Activation::kTanh, edm::Activation::kIdentity}) {
    auto s = base();
    s.activation = a;
    out.emplace_back("unet/" + std::string(edm::to_string(a)), s);
  }
  auto flat = base();
  flat.depth = 0;
  out.emplace_back("flat", flat);
  auto no_emb = base();
  no_emb.noise_embedding = false;
  no_emb.depth = 1;
  out.emplace_back("no-embedding", no_emb);
  auto enc = base();
  enc.topology = edm::Topology::kEncoder;
  enc.noise_embedding = false;
  out.emplace_back("encoder", enc);
  auto dec = base();
  dec.topology = edm::Topology::kDecoder;
  dec.noise_embedding = false;
  out.emplace_back("decoder", dec);
  return out;
}

}  // namespace oracle
