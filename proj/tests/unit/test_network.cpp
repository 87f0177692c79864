#include <gtest/gtest.h>

#include <cmath>

#include "edm/error.hpp"
#include "edm/network.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace edm;

TEST(Network, GradientCheckEveryLayerType) {
  for (const auto& [name, spec] : oracle::gradient_check_specs()) {
    const auto r = oracle::gradient_check(spec, 8, 8, 99);
    EXPECT_LE(r.worst_param_error, 1e-4) << name << " worst block " << r.worst_block;
    EXPECT_LE(r.worst_input_error, 1e-4) << name;
  }
}

TEST(Network, InitIsDeterministicInSeed) {
  ConvNetSpec s;
  s.seed = 5;
  ConvNet<float> a(s), b(s);
  EXPECT_EQ(a.initial_params().values, b.initial_params().values);
  s.seed = 6;
  ConvNet<float> c(s);
  EXPECT_NE(a.initial_params().values, c.initial_params().values);
  EXPECT_EQ(a.layout(), c.layout());
}

TEST(Network, ZeroInitOutputGivesZeroField) {
  ConvNetSpec s;
  s.in_channels = 2;
  ConvNet<float> net(s);
  Rng rng(1);
  const Field x = oracle::normal_field({2, 16, 16}, rng);
  const Field y = net.forward(x, 0.3);
  EXPECT_EQ(y.channels(), 1);
  for (float v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Network, LayoutCoversEveryParameter) {
  ConvNetSpec s;
  s.in_channels = 3;
  ConvNet<float> net(s);
  std::size_t next = 0;
  for (const auto& b : net.layout().blocks) {
    EXPECT_EQ(b.offset, next) << b.name;
    std::size_t prod = 1;
    for (int d : b.shape) prod *= static_cast<std::size_t>(d);
    EXPECT_EQ(prod, b.count) << b.name;
    next += b.count;
  }
  EXPECT_EQ(next, net.num_params());
  EXPECT_GT(net.num_params(), 10000u);
}

TEST(Network, PeriodicTranslationCovariance) {
  Rng rng(2);
  for (int depth : {0, 2}) {
    ConvNetSpec s;
    s.in_channels = 2;
    s.depth = depth;
    s.zero_init_output = false;
    s.widths = {6, 8, 10};
    ConvNet<double> net(s);
    net.set_params(net.initial_params().values);
    const Field x = oracle::normal_field({2, 16, 16}, rng);
    const Field y = net.forward(x, 0.1);
    const int step = 1 << depth;  // pooling commutes only with shifts by its stride
    for (auto [dy, dx] : {std::pair{step, 0}, std::pair{0, 3 * step}, std::pair{-2 * step, step}}) {
      const Field ys = net.forward(oracle::shift(x, dy, dx), 0.1);
      const Field expect = oracle::shift(y, dy, dx);
      for (std::size_t i = 0; i < ys.size(); ++i) EXPECT_NEAR(ys[i], expect[i], 1e-5) << depth;
    }
  }
}

TEST(Network, FloatMatchesDouble) {
  ConvNetSpec s;
  s.in_channels = 3;
  s.zero_init_output = false;
  ConvNet<float> f(s);
  ConvNet<double> d(s);
  Rng rng(3);
  const Field x = oracle::normal_field({3, 16, 16}, rng);
  const Field yf = f.forward(x, -0.4), yd = d.forward(x, -0.4);
  for (std::size_t i = 0; i < yf.size(); ++i) EXPECT_NEAR(yf[i], yd[i], 1e-4 * std::max(1.0f, std::abs(yd[i])));
}

TEST(Network, ReceptiveFieldMatchesImpulseResponse) {
  for (int depth : {0, 1, 2}) {
    ConvNetSpec s;
    s.depth = depth;
    s.zero_init_output = false;
    s.activation = Activation::kIdentity;
    s.noise_embedding = false;
    ConvNet<double> net(s);
    const int n = 64;
    Field x({1, n, n}, Units::kNormalized);
    Field x2 = x;
    x2.at(0, n / 2, n / 2) = 1.0f;
    const Field a = net.forward(x, 0.0), b = net.forward(x2, 0.0);
    int lo = n, hi = -1;
    for (int col = 0; col < n; ++col) {
      bool touched = false;
      for (int row = 0; row < n; ++row) touched |= a.at(0, row, col) != b.at(0, row, col);
      if (touched) {
        lo = std::min(lo, col);
        hi = std::max(hi, col);
      }
    }
    EXPECT_LE(hi - lo + 1, s.receptive_field()) << depth;
  }
}

TEST(Network, ValidationErrors) {
  ConvNetSpec s;
  s.depth = 3;
  EXPECT_THROW(s.validate(), DomainError);
  s.depth = 2;
  s.widths = {8, 8};
  EXPECT_THROW(s.validate(), DomainError);
  s.widths = {8, 8, 8};
  s.in_channels = 0;
  EXPECT_THROW(s.validate(), DomainError);
}

TEST(Network, WrongInputChannelsRejected) {
  ConvNetSpec s;
  s.in_channels = 2;
  ConvNet<float> net(s);
  EXPECT_THROW(net.forward(Field({1, 8, 8}, Units::kNormalized), 0.0), ContractViolation);
  EXPECT_THROW(net.set_params(std::vector<double>(3)), ContractViolation);
}

TEST(Network, BackwardRequiresTape) {
  ConvNetSpec s;
  ConvNet<double> net(s);
  FeatureMap<double> g(1, 8, 8);
  Tape<double> empty;
  std::vector<double> grad(net.num_params());
  EXPECT_THROW(net.backward(g, 0.0, empty, grad), ContractViolation);
}

TEST(Network, StackInputOrder) {
  Field x({1, 2, 2}, std::vector<float>{1, 2, 3, 4}, Units::kNormalized);
  Field c({1, 2, 2}, std::vector<float>{5, 6, 7, 8}, Units::kNormalized);
  const std::vector<Field> cond{c};
  const Field s = stack_input(x, cond);
  EXPECT_EQ(s.channels(), 2);
  EXPECT_EQ(s[0], 1.0f);
  EXPECT_EQ(s[4], 5.0f);
}

TEST(Network, AdamMatchesScalarReference) {
  AdamConfig cfg;
  cfg.lr = 0.05;
  AdamState st;
  std::vector<double> p{1.0, -2.0, 0.5};
  std::vector<oracle::ScalarAdam> ref(3);
  std::vector<double> rp = p;
  for (int step = 0; step < 50; ++step) {
    std::vector<double> g(3);
    for (int i = 0; i < 3; ++i) g[i] = 2.0 * p[i] + std::sin(step + i);
    for (int i = 0; i < 3; ++i) rp[i] = ref[i].step(rp[i], 2.0 * rp[i] + std::sin(step + i), cfg.lr);
    adam_step(p, g, st, cfg);
  }
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], rp[i], 1e-12);
}

TEST(Network, AdamRejectsNonFinite) {
  AdamState st;
  std::vector<double> p{1.0, 2.0};
  const std::vector<double> g{0.1, std::nan("")};
  EXPECT_THROW(adam_step(p, g, st, {}), NumericalError);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(st.step, 0);
}

TEST(Network, ActivationNames) {
  for (auto a : {Activation::kSiLU, Activation::kReLU, Activation::kTanh, Activation::kIdentity})
    EXPECT_EQ(activation_from_string(to_string(a)), a);
  EXPECT_THROW(activation_from_string("gelu"), DomainError);
  EXPECT_EQ(topology_from_string("decoder"), Topology::kDecoder);
}
