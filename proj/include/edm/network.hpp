#pragma once

#include <cstdint>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "edm/core_grid.hpp"
#include "edm/preconditioning.hpp"

namespace edm {

enum class Activation { kSiLU, kReLU, kTanh, kIdentity };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view s);

/// kUNet: the denoiser/regressor layout below. kEncoder / kDecoder: a plain stack that
/// halves (doubles) the resolution `depth` times at width widths[0], used by autoencoders.
enum class Topology { kUNet, kEncoder, kDecoder };

std::string_view to_string(Topology t);
Topology topology_from_string(std::string_view s);

/// Small periodic-padding convolutional denoiser / regressor.
///
/// Layout for depth d: a full-resolution 3x3 input conv (followed by the noise-embedding
/// bias when enabled), then d nested residual levels, each of which average-pools by 2,
/// convolves, recurses, convolves back and upsamples, and finally two 3x3 convs at full
/// resolution. widths[l] is the channel count at level l.
struct ConvNetSpec {
  int in_channels = 1;
  int out_channels = 1;
  std::vector<int> widths{16, 32, 64};
  int depth = 2;
  Activation activation = Activation::kSiLU;
  std::uint64_t seed = 0;
  bool noise_embedding = true;
  bool zero_init_output = true;
  Topology topology = Topology::kUNet;

  void validate() const;
  /// Receptive field in full-resolution pixels.
  int receptive_field() const;
};

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t count = 0;
  std::vector<int> shape;
};

struct ParamLayout {
  std::vector<ParamBlock> blocks;
  std::size_t total = 0;

  friend bool operator==(const ParamLayout& a, const ParamLayout& b);
};

/// Initialization of one parameter block: uniform(-bound, bound), zeros when bound is 0.
struct ParamInitRule {
  std::size_t offset = 0;
  std::size_t count = 0;
  double bound = 0.0;
};

/// All learnable parameters, flat, plus the layout that explains them.
struct ParamVector {
  std::vector<double> values;
  ParamLayout layout;
};

/// Allocator with a fixed 64-byte alignment. Vectorized kernels peel loops according to the
/// address alignment, so a fixed alignment keeps results independent of where buffers land.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Channel-major activation map used inside the network.
template <typename T>
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  AlignedVector<T> data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, T(0)) {}
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
};

template <typename T>
FeatureMap<T> to_feature_map(const Field& f);
template <typename T>
Field to_field(const FeatureMap<T>& m, Units units);

/// Activation caches recorded by forward() and consumed in reverse by backward().
template <typename T>
class Tape {
 public:
  void push(AlignedVector<T> v) { stack_.push_back(std::move(v)); }
  AlignedVector<T> pop();
  bool empty() const { return stack_.empty(); }
  void clear() { stack_.clear(); }

 private:
  std::vector<AlignedVector<T>> stack_;
};

template <typename T>
class Layer;

template <typename T>
class ConvNet {
 public:
  explicit ConvNet(ConvNetSpec spec);
  ~ConvNet();
  ConvNet(ConvNet&&) noexcept;
  ConvNet& operator=(ConvNet&&) noexcept;
  ConvNet(const ConvNet&) = delete;
  ConvNet& operator=(const ConvNet&) = delete;

  const ConvNetSpec& spec() const { return spec_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t num_params() const { return layout_.total; }

  /// Seeded initialization (deterministic in spec.seed).
  ParamVector initial_params() const;
  void set_params(std::span<const double> values);
  std::vector<double> params() const;

  /// When `tape` is non-null, caches for backward() are pushed onto it.
  FeatureMap<T> forward(const FeatureMap<T>& input, double noise_embedding, Tape<T>* tape = nullptr) const;

  /// Reverse pass for the forward() that filled `tape`. Adds d(loss)/d(params) into
  /// `grad_accum` and returns d(loss)/d(input). Throws ContractViolation if the tape does
  /// not hold a matching forward record.
  FeatureMap<T> backward(const FeatureMap<T>& grad_output, double noise_embedding, Tape<T>& tape,
                         std::span<double> grad_accum) const;

  Field forward(const Field& input, double noise_embedding) const;

 private:
  ConvNetSpec spec_;
  ParamLayout layout_;
  std::vector<ParamInitRule> init_rules_;
  AlignedVector<T> params_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

extern template class ConvNet<float>;
extern template class ConvNet<double>;

/// F(c_in x | c; c_noise) backed by a ConvNet: the condition frames are stacked as
/// extra input channels after the scaled noisy field.
class ConvRawNetwork final : public RawNetwork {
 public:
  explicit ConvRawNetwork(std::shared_ptr<const ConvNet<float>> net);

  Field apply(const Field& scaled_x, std::span<const Field> condition, double noise_embedding) const override;

  const ConvNet<float>& net() const { return *net_; }

 private:
  std::shared_ptr<const ConvNet<float>> net_;
};

/// Stacks [x, condition...] into one multi-channel field.
Field stack_input(const Field& x, std::span<const Field> condition);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

/// In-place Adam update. Throws NumericalError naming the first bad index if any
/// gradient is NaN/Inf; parameters and moments are left untouched in that case.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg);

}  // namespace edm
