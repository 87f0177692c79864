#include "edm/network.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "edm/error.hpp"
#include "edm/random.hpp"

namespace edm {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kSiLU: return "silu";
    case Activation::kReLU: return "relu";
    case Activation::kTanh: return "tanh";
    case Activation::kIdentity: return "identity";
  }
  return "silu";
}

Activation activation_from_string(std::string_view s) {
  if (s == "silu") return Activation::kSiLU;
  if (s == "relu") return Activation::kReLU;
  if (s == "tanh") return Activation::kTanh;
  if (s == "identity" || s == "linear") return Activation::kIdentity;
  throw DomainError("unknown activation '" + std::string(s) + "'");
}

std::string_view to_string(Topology t) {
  switch (t) {
    case Topology::kUNet: return "unet";
    case Topology::kEncoder: return "encoder";
    case Topology::kDecoder: return "decoder";
  }
  return "unet";
}

Topology topology_from_string(std::string_view s) {
  if (s == "unet") return Topology::kUNet;
  if (s == "encoder") return Topology::kEncoder;
  if (s == "decoder") return Topology::kDecoder;
  throw DomainError("unknown topology '" + std::string(s) + "'");
}

void ConvNetSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) throw DomainError("ConvNetSpec: channel counts must be >= 1");
  if (depth < 0 || depth > 2) throw DomainError("ConvNetSpec: depth must be 0-2");
  if (topology != Topology::kUNet) {
    if (widths.empty() || widths[0] < 1) throw DomainError("ConvNetSpec: widths[0] must be >= 1");
    return;
  }
  if (widths.size() < static_cast<std::size_t>(depth) + 1)
    throw DomainError("ConvNetSpec: need one width per level (depth + 1)");
  for (int w : widths) {
    if (w < 1) throw DomainError("ConvNetSpec: widths must be >= 1");
  }
}

int ConvNetSpec::receptive_field() const {
  if (topology != Topology::kUNet) {
    // Two convs at full resolution plus one per resampling stage at stride 2^l.
    int rf = 1 + 2 * 2;
    for (int l = 1; l <= depth; ++l) rf += 2 * (1 << l) + (1 << l) - 1;
    return rf;
  }
  // Full-resolution path: three 3x3 convs. Level l adds two 3x3 convs at stride 2^l
  // plus the pooling footprint.
  int rf = 1 + 3 * 2;
  for (int l = 1; l <= depth; ++l) rf += 2 * 2 * (1 << l) + (1 << l) - 1;
  return rf;
}

bool operator==(const ParamLayout& a, const ParamLayout& b) {
  if (a.total != b.total || a.blocks.size() != b.blocks.size()) return false;
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    const auto& x = a.blocks[i];
    const auto& y = b.blocks[i];
    if (x.name != y.name || x.offset != y.offset || x.count != y.count || x.shape != y.shape) return false;
  }
  return true;
}

template <typename T>
FeatureMap<T> to_feature_map(const Field& f) {
  FeatureMap<T> m(f.channels(), f.height(), f.width());
  std::copy(f.values().begin(), f.values().end(), m.data.begin());
  return m;
}

template <typename T>
Field to_field(const FeatureMap<T>& m, Units units) {
  std::vector<float> v(m.data.size());
  std::transform(m.data.begin(), m.data.end(), v.begin(), [](T x) { return static_cast<float>(x); });
  return Field(Shape{m.channels, m.height, m.width}, std::move(v), units);
}

template FeatureMap<float> to_feature_map<float>(const Field&);
template FeatureMap<double> to_feature_map<double>(const Field&);
template Field to_field<float>(const FeatureMap<float>&, Units);
template Field to_field<double>(const FeatureMap<double>&, Units);

template <typename T>
AlignedVector<T> Tape<T>::pop() {
  if (stack_.empty()) throw ContractViolation("backward: tape exhausted (no matching forward pass)");
  AlignedVector<T> v = std::move(stack_.back());
  stack_.pop_back();
  return v;
}

template class Tape<float>;
template class Tape<double>;

template <typename T>
struct LayerContext {
  std::span<const T> params;
  double embedding = 0.0;
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual FeatureMap<T> forward(const FeatureMap<T>& in, const LayerContext<T>& ctx, Tape<T>* tape) const = 0;
  virtual FeatureMap<T> backward(const FeatureMap<T>& grad_out, const LayerContext<T>& ctx, Tape<T>& tape,
                                 std::span<T> grad) const = 0;
};

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using ArrT = Eigen::Array<T, Eigen::Dynamic, 1>;

constexpr int kKernel = 3;
constexpr int kTaps = kKernel * kKernel;

/// 3x3 convolution with periodic padding, computed as an im2col GEMM.
template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(int cin, int cout, std::size_t weight_offset, std::size_t bias_offset)
      : cin_(cin), cout_(cout), w_off_(weight_offset), b_off_(bias_offset) {}

  FeatureMap<T> forward(const FeatureMap<T>& in, const LayerContext<T>& ctx, Tape<T>* tape) const override {
    if (in.channels != cin_)
      throw ContractViolation("conv: expected " + std::to_string(cin_) + " input channels, got " +
                              std::to_string(in.channels));
    const int h = in.height, w = in.width;
    const std::size_t hw = in.plane();
    AlignedVector<T> col(static_cast<std::size_t>(cin_) * kTaps * hw);
    im2col(in, col);

    Eigen::Map<const MatR<T>> weights(ctx.params.data() + w_off_, cout_, cin_ * kTaps);
    Eigen::Map<const VecT<T>> bias(ctx.params.data() + b_off_, cout_);
    Eigen::Map<const MatR<T>> cols(col.data(), cin_ * kTaps, static_cast<Eigen::Index>(hw));
    FeatureMap<T> out(cout_, h, w);
    Eigen::Map<MatR<T>> result(out.data.data(), cout_, static_cast<Eigen::Index>(hw));
    result.noalias() = weights * cols;
    result.colwise() += bias;
    if (tape) tape->push(std::move(col));
    return out;
  }

  FeatureMap<T> backward(const FeatureMap<T>& grad_out, const LayerContext<T>& ctx, Tape<T>& tape,
                         std::span<T> grad) const override {
    const AlignedVector<T> col = tape.pop();
    const std::size_t hw = grad_out.plane();
    if (col.size() != static_cast<std::size_t>(cin_) * kTaps * hw)
      throw ContractViolation("conv backward: tape record does not match this layer");
    Eigen::Map<const MatR<T>> weights(ctx.params.data() + w_off_, cout_, cin_ * kTaps);
    Eigen::Map<const MatR<T>> cols(col.data(), cin_ * kTaps, static_cast<Eigen::Index>(hw));
    Eigen::Map<const MatR<T>> gout(grad_out.data.data(), cout_, static_cast<Eigen::Index>(hw));
    Eigen::Map<MatR<T>> gw(grad.data() + w_off_, cout_, cin_ * kTaps);
    Eigen::Map<VecT<T>> gb(grad.data() + b_off_, cout_);
    gw.noalias() += gout * cols.transpose();
    gb += gout.rowwise().sum();

    MatR<T> dcol = weights.transpose() * gout;
    FeatureMap<T> din(cin_, grad_out.height, grad_out.width);
    col2im(dcol.data(), din);
    return din;
  }

 private:
  // Copies row `src` shifted by dx in {-1, 0, 1} with periodic wrap: dst[x] = src[(x + dx) mod w].
  static void shifted_copy(const T* src, T* dst, int w, int dx) {
    if (dx == 0) {
      std::copy(src, src + w, dst);
    } else if (dx < 0) {
      dst[0] = src[w - 1];
      std::copy(src, src + w - 1, dst + 1);
    } else {
      std::copy(src + 1, src + w, dst);
      dst[w - 1] = src[0];
    }
  }

  // Adds src into row `dst` at the shifted positions: dst[(x + dx) mod w] += src[x].
  static void shifted_add(const T* src, T* dst, int w, int dx) {
    if (dx == 0) {
      for (int x = 0; x < w; ++x) dst[x] += src[x];
    } else if (dx < 0) {
      dst[w - 1] += src[0];
      for (int x = 1; x < w; ++x) dst[x - 1] += src[x];
    } else {
      for (int x = 0; x < w - 1; ++x) dst[x + 1] += src[x];
      dst[0] += src[w - 1];
    }
  }

  void im2col(const FeatureMap<T>& in, AlignedVector<T>& col) const {
    const int h = in.height, w = in.width;
    const std::size_t hw = in.plane();
    for (int ci = 0; ci < cin_; ++ci) {
      const T* src = in.data.data() + ci * hw;
      for (int ky = 0; ky < kKernel; ++ky) {
        for (int kx = 0; kx < kKernel; ++kx) {
          T* dst = col.data() + (static_cast<std::size_t>(ci) * kTaps + ky * kKernel + kx) * hw;
          for (int y = 0; y < h; ++y) {
            const int sy = (y + ky - 1 + h) % h;
            shifted_copy(src + static_cast<std::size_t>(sy) * w, dst + static_cast<std::size_t>(y) * w, w, kx - 1);
          }
        }
      }
    }
  }

  void col2im(const T* dcol, FeatureMap<T>& din) const {
    const int h = din.height, w = din.width;
    const std::size_t hw = din.plane();
    for (int ci = 0; ci < cin_; ++ci) {
      T* dst = din.data.data() + ci * hw;
      for (int ky = 0; ky < kKernel; ++ky) {
        for (int kx = 0; kx < kKernel; ++kx) {
          const T* src = dcol + (static_cast<std::size_t>(ci) * kTaps + ky * kKernel + kx) * hw;
          for (int y = 0; y < h; ++y) {
            const int sy = (y + ky - 1 + h) % h;
            shifted_add(src + static_cast<std::size_t>(y) * w, dst + static_cast<std::size_t>(sy) * w, w, kx - 1);
          }
        }
      }
    }
  }

  int cin_;
  int cout_;
  std::size_t w_off_;
  std::size_t b_off_;
};

constexpr int kEmbedFeatures = 4;

template <typename T>
std::array<T, kEmbedFeatures> embedding_features(double e) {
  const double pi = std::numbers::pi;
  return {static_cast<T>(e), static_cast<T>(std::cos(pi * e)), static_cast<T>(std::sin(pi * e)),
          static_cast<T>(std::cos(2.0 * pi * e))};
}

/// Adds a per-channel bias that is a learned linear map of fixed features of the noise embedding.
template <typename T>
class NoiseBias final : public Layer<T> {
 public:
  NoiseBias(int channels, std::size_t offset) : channels_(channels), off_(offset) {}

  FeatureMap<T> forward(const FeatureMap<T>& in, const LayerContext<T>& ctx, Tape<T>*) const override {
    const auto phi = embedding_features<T>(ctx.embedding);
    FeatureMap<T> out = in;
    const std::size_t hw = in.plane();
    for (int c = 0; c < channels_; ++c) {
      T b = 0;
      for (int f = 0; f < kEmbedFeatures; ++f) b += ctx.params[off_ + c * kEmbedFeatures + f] * phi[f];
      T* p = out.data.data() + c * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += b;
    }
    return out;
  }

  FeatureMap<T> backward(const FeatureMap<T>& grad_out, const LayerContext<T>& ctx, Tape<T>&,
                         std::span<T> grad) const override {
    const auto phi = embedding_features<T>(ctx.embedding);
    const std::size_t hw = grad_out.plane();
    for (int c = 0; c < channels_; ++c) {
      T s = 0;
      const T* p = grad_out.data.data() + c * hw;
      for (std::size_t i = 0; i < hw; ++i) s += p[i];
      for (int f = 0; f < kEmbedFeatures; ++f) grad[off_ + c * kEmbedFeatures + f] += s * phi[f];
    }
    return grad_out;
  }

 private:
  int channels_;
  std::size_t off_;
};

template <typename T>
class Act final : public Layer<T> {
 public:
  explicit Act(Activation kind) : kind_(kind) {}

  FeatureMap<T> forward(const FeatureMap<T>& in, const LayerContext<T>&, Tape<T>* tape) const override {
    FeatureMap<T> out = in;
    auto x = Eigen::Map<const ArrT<T>>(in.data.data(), static_cast<Eigen::Index>(in.data.size()));
    auto y = Eigen::Map<ArrT<T>>(out.data.data(), static_cast<Eigen::Index>(out.data.size()));
    switch (kind_) {
      case Activation::kSiLU: y = x / (T(1) + (-x).exp()); break;
      case Activation::kReLU: y = x.max(T(0)); break;
      case Activation::kTanh: y = x.tanh(); break;
      case Activation::kIdentity: break;
    }
    if (tape) tape->push(in.data);
    return out;
  }

  FeatureMap<T> backward(const FeatureMap<T>& grad_out, const LayerContext<T>&, Tape<T>& tape,
                         std::span<T>) const override {
    const AlignedVector<T> xs = tape.pop();
    if (xs.size() != grad_out.data.size()) throw ContractViolation("activation backward: tape mismatch");
    FeatureMap<T> din = grad_out;
    auto x = Eigen::Map<const ArrT<T>>(xs.data(), static_cast<Eigen::Index>(xs.size()));
    auto g = Eigen::Map<ArrT<T>>(din.data.data(), static_cast<Eigen::Index>(din.data.size()));
    switch (kind_) {
      case Activation::kSiLU: {
        const ArrT<T> sig = T(1) / (T(1) + (-x).exp());
        g *= sig * (T(1) + x * (T(1) - sig));
        break;
      }
      case Activation::kReLU: g *= (x > T(0)).template cast<T>(); break;
      case Activation::kTanh: g *= T(1) - x.tanh().square(); break;
      case Activation::kIdentity: break;
    }
    return din;
  }

 private:
  Activation kind_;
};

template <typename T>
class AvgPool2 final : public Layer<T> {
 public:
  FeatureMap<T> forward(const FeatureMap<T>& in, const LayerContext<T>&, Tape<T>*) const override {
    if (in.height % 2 != 0 || in.width % 2 != 0)
      throw ContractViolation("average pooling needs even height and width");
    FeatureMap<T> out(in.channels, in.height / 2, in.width / 2);
    for (int c = 0; c < in.channels; ++c)
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
          const T* r0 = in.data.data() + (static_cast<std::size_t>(c) * in.height + 2 * y) * in.width + 2 * x;
          const T* r1 = r0 + in.width;
          out.data[(static_cast<std::size_t>(c) * out.height + y) * out.width + x] =
              T(0.25) * (r0[0] + r0[1] + r1[0] + r1[1]);
        }
    return out;
  }

  FeatureMap<T> backward(const FeatureMap<T>& grad_out, const LayerContext<T>&, Tape<T>&,
                         std::span<T>) const override {
    FeatureMap<T> din(grad_out.channels, grad_out.height * 2, grad_out.width * 2);
    for (int c = 0; c < din.channels; ++c)
      for (int y = 0; y < din.height; ++y)
        for (int x = 0; x < din.width; ++x)
          din.data[(static_cast<std::size_t>(c) * din.height + y) * din.width + x] =
              T(0.25) * grad_out.data[(static_cast<std::size_t>(c) * grad_out.height + y / 2) * grad_out.width + x / 2];
    return din;
  }
};

template <typename T>
class Upsample2 final : public Layer<T> {
 public:
  FeatureMap<T> forward(const FeatureMap<T>& in, const LayerContext<T>&, Tape<T>*) const override {
    FeatureMap<T> out(in.channels, in.height * 2, in.width * 2);
    for (int c = 0; c < out.channels; ++c)
      for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
          out.data[(static_cast<std::size_t>(c) * out.height + y) * out.width + x] =
              in.data[(static_cast<std::size_t>(c) * in.height + y / 2) * in.width + x / 2];
    return out;
  }

  FeatureMap<T> backward(const FeatureMap<T>& grad_out, const LayerContext<T>&, Tape<T>&,
                         std::span<T>) const override {
    FeatureMap<T> din(grad_out.channels, grad_out.height / 2, grad_out.width / 2);
    for (int c = 0; c < grad_out.channels; ++c)
      for (int y = 0; y < grad_out.height; ++y)
        for (int x = 0; x < grad_out.width; ++x)
          din.data[(static_cast<std::size_t>(c) * din.height + y / 2) * din.width + x / 2] +=
              grad_out.data[(static_cast<std::size_t>(c) * grad_out.height + y) * grad_out.width + x];
    return din;
  }
};

/// out = in + inner(in)
template <typename T>
class Residual final : public Layer<T> {
 public:
  explicit Residual(std::vector<std::unique_ptr<Layer<T>>> inner) : inner_(std::move(inner)) {}

  FeatureMap<T> forward(const FeatureMap<T>& in, const LayerContext<T>& ctx, Tape<T>* tape) const override {
    FeatureMap<T> t = in;
    for (const auto& l : inner_) t = l->forward(t, ctx, tape);
    if (t.channels != in.channels || t.height != in.height || t.width != in.width)
      throw ContractViolation("residual branch changed the feature-map shape");
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += in.data[i];
    return t;
  }

  FeatureMap<T> backward(const FeatureMap<T>& grad_out, const LayerContext<T>& ctx, Tape<T>& tape,
                         std::span<T> grad) const override {
    FeatureMap<T> g = grad_out;
    for (auto it = inner_.rbegin(); it != inner_.rend(); ++it) g = (*it)->backward(g, ctx, tape, grad);
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += grad_out.data[i];
    return g;
  }

 private:
  std::vector<std::unique_ptr<Layer<T>>> inner_;
};

template <typename T>
class Builder {
 public:
  Builder(ParamLayout& layout, std::vector<ParamInitRule>& init) : layout_(layout), init_(init) {}

  std::unique_ptr<Layer<T>> conv(const std::string& name, int cin, int cout, bool zero) {
    const std::size_t w = add(name + ".weight", {cout, cin, kKernel, kKernel});
    const std::size_t b = add(name + ".bias", {cout});
    const double fan_in = static_cast<double>(cin) * kTaps;
    init_.push_back({w, static_cast<std::size_t>(cout) * cin * kTaps, zero ? 0.0 : std::sqrt(3.0 / fan_in)});
    init_.push_back({b, static_cast<std::size_t>(cout), 0.0});
    return std::make_unique<Conv2d<T>>(cin, cout, w, b);
  }

  std::unique_ptr<Layer<T>> noise_bias(const std::string& name, int channels) {
    const std::size_t off = add(name + ".weight", {channels, kEmbedFeatures});
    init_.push_back({off, static_cast<std::size_t>(channels) * kEmbedFeatures, 0.5});
    return std::make_unique<NoiseBias<T>>(channels, off);
  }

 private:
  std::size_t add(const std::string& name, std::vector<int> shape) {
    std::size_t count = 1;
    for (int s : shape) count *= static_cast<std::size_t>(s);
    const std::size_t off = layout_.total;
    layout_.blocks.push_back({name, off, count, std::move(shape)});
    layout_.total += count;
    return off;
  }

  ParamLayout& layout_;
  std::vector<ParamInitRule>& init_;
};

template <typename T>
std::vector<std::unique_ptr<Layer<T>>> build_level(Builder<T>& b, const ConvNetSpec& spec, int level) {
  std::vector<std::unique_ptr<Layer<T>>> layers;
  const int outer = spec.widths[level - 1], width = spec.widths[level];
  const std::string prefix = "level" + std::to_string(level);
  layers.push_back(std::make_unique<AvgPool2<T>>());
  layers.push_back(b.conv(prefix + ".down", outer, width, false));
  layers.push_back(std::make_unique<Act<T>>(spec.activation));
  if (level < spec.depth) {
    layers.push_back(std::make_unique<Residual<T>>(build_level(b, spec, level + 1)));
    layers.push_back(std::make_unique<Act<T>>(spec.activation));
  }
  layers.push_back(b.conv(prefix + ".up", width, outer, false));
  layers.push_back(std::make_unique<Upsample2<T>>());
  return layers;
}

}  // namespace

template <typename T>
ConvNet<T>::ConvNet(ConvNetSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  Builder<T> b(layout_, init_rules_);
  const int w0 = spec_.widths[0];
  if (spec_.topology != Topology::kUNet) {
    const bool enc = spec_.topology == Topology::kEncoder;
    layers_.push_back(b.conv("conv_in", spec_.in_channels, w0, false));
    if (spec_.noise_embedding) layers_.push_back(b.noise_bias("noise_bias", w0));
    layers_.push_back(std::make_unique<Act<T>>(spec_.activation));
    for (int l = 1; l <= spec_.depth; ++l) {
      if (enc) {
        layers_.push_back(std::make_unique<AvgPool2<T>>());
      } else {
        layers_.push_back(std::make_unique<Upsample2<T>>());
      }
      layers_.push_back(b.conv("stage" + std::to_string(l), w0, w0, false));
      layers_.push_back(std::make_unique<Act<T>>(spec_.activation));
    }
    layers_.push_back(b.conv("conv_out", w0, spec_.out_channels, spec_.zero_init_output));
    params_.assign(layout_.total, T(0));
    set_params(initial_params().values);
    return;
  }
  layers_.push_back(b.conv("conv_in", spec_.in_channels, w0, false));
  if (spec_.noise_embedding) layers_.push_back(b.noise_bias("noise_bias", w0));
  layers_.push_back(std::make_unique<Act<T>>(spec_.activation));
  if (spec_.depth >= 1) {
    layers_.push_back(std::make_unique<Residual<T>>(build_level(b, spec_, 1)));
    layers_.push_back(std::make_unique<Act<T>>(spec_.activation));
  }
  layers_.push_back(b.conv("conv_mid", w0, w0, false));
  layers_.push_back(std::make_unique<Act<T>>(spec_.activation));
  layers_.push_back(b.conv("conv_out", w0, spec_.out_channels, spec_.zero_init_output));

  params_.assign(layout_.total, T(0));
  const ParamVector p = initial_params();
  set_params(p.values);
}

template <typename T>
ConvNet<T>::~ConvNet() = default;
template <typename T>
ConvNet<T>::ConvNet(ConvNet&&) noexcept = default;
template <typename T>
ConvNet<T>& ConvNet<T>::operator=(ConvNet&&) noexcept = default;

template <typename T>
ParamVector ConvNet<T>::initial_params() const {
  ParamVector pv{std::vector<double>(layout_.total, 0.0), layout_};
  Rng rng(derive_seed(spec_.seed, 0x1417));
  for (const auto& rule : init_rules_) {
    if (rule.bound == 0.0) continue;
    std::uniform_real_distribution<double> u(-rule.bound, rule.bound);
    for (std::size_t i = 0; i < rule.count; ++i) pv.values[rule.offset + i] = u(rng);
  }
  return pv;
}

template <typename T>
void ConvNet<T>::set_params(std::span<const double> values) {
  if (values.size() != layout_.total)
    throw ContractViolation("set_params: expected " + std::to_string(layout_.total) + " values, got " +
                            std::to_string(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw NumericalError("set_params: non-finite parameter at " + std::to_string(i));
    params_[i] = static_cast<T>(values[i]);
  }
}

template <typename T>
std::vector<double> ConvNet<T>::params() const {
  return std::vector<double>(params_.begin(), params_.end());
}

template <typename T>
FeatureMap<T> ConvNet<T>::forward(const FeatureMap<T>& input, double noise_embedding, Tape<T>* tape) const {
  if (input.channels != spec_.in_channels)
    throw ContractViolation("network expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                            std::to_string(input.channels));
  const LayerContext<T> ctx{params_, noise_embedding};
  if (tape) {
    tape->push({static_cast<T>(input.channels), static_cast<T>(input.height), static_cast<T>(input.width)});
  }
  FeatureMap<T> x = input;
  for (const auto& l : layers_) x = l->forward(x, ctx, tape);
  return x;
}

template <typename T>
FeatureMap<T> ConvNet<T>::backward(const FeatureMap<T>& grad_output, double noise_embedding, Tape<T>& tape,
                                   std::span<double> grad_accum) const {
  if (tape.empty()) throw ContractViolation("backward called without a recorded forward pass");
  if (grad_accum.size() != layout_.total) throw ContractViolation("backward: gradient buffer has wrong size");
  if (grad_output.channels != spec_.out_channels)
    throw ContractViolation("backward: gradient has wrong channel count");
  const LayerContext<T> ctx{params_, noise_embedding};
  AlignedVector<T> grad(layout_.total, T(0));
  FeatureMap<T> g = grad_output;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g, ctx, tape, grad);
  const AlignedVector<T> marker = tape.pop();
  if (marker.size() != 3 || static_cast<int>(marker[0]) != g.channels || static_cast<int>(marker[1]) != g.height ||
      static_cast<int>(marker[2]) != g.width)
    throw ContractViolation("backward: tape does not belong to this forward pass");
  for (std::size_t i = 0; i < grad.size(); ++i) grad_accum[i] += static_cast<double>(grad[i]);
  return g;
}

template <typename T>
Field ConvNet<T>::forward(const Field& input, double noise_embedding) const {
  const FeatureMap<T> out = forward(to_feature_map<T>(input), noise_embedding, nullptr);
  return to_field(out, input.units());
}

template class ConvNet<float>;
template class ConvNet<double>;

Field stack_input(const Field& x, std::span<const Field> condition) {
  if (condition.empty()) return x;
  std::vector<Field> parts;
  parts.reserve(condition.size() + 1);
  parts.push_back(x);
  parts.insert(parts.end(), condition.begin(), condition.end());
  return concat_channels(parts, x.units());
}

ConvRawNetwork::ConvRawNetwork(std::shared_ptr<const ConvNet<float>> net) : net_(std::move(net)) {
  if (!net_) throw ContractViolation("ConvRawNetwork: null network");
}

Field ConvRawNetwork::apply(const Field& scaled_x, std::span<const Field> condition, double noise_embedding) const {
  Field out = net_->forward(stack_input(scaled_x, condition), noise_embedding);
  out.set_units(scaled_x.units());
  return out;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw ContractViolation("adam_step: parameter/gradient size mismatch");
  std::size_t bad = 0, first_bad = grads.size();
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      if (bad++ == 0) first_bad = i;
    }
  }
  if (bad > 0) {
    std::ostringstream os;
    os << "adam_step: " << bad << " non-finite gradient entries (first at index " << first_bad
       << ", value " << grads[first_bad] << ")";
    throw NumericalError(os.str());
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw ContractViolation("adam_step: optimizer state has wrong size");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

}  // namespace edm
