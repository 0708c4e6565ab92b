#include <gtest/gtest.h>

#include <limits>

#include <cmath>
#include <numeric>

#include "rrnet/ops.hpp"
#include "test_util.hpp"

using namespace rrnet;
using rrnet::testing::fd_check;
using rrnet::testing::random_tensor;

namespace {

// Direct nested-loop cross-correlation.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad) {
  const auto& s = x.shape();
  const auto& k = w.shape();
  const int oh = (s.h + 2 * pad - k.h) / stride + 1, ow = (s.w + 2 * pad - k.w) / stride + 1;
  Tensor<double> out(Shape{s.n, k.n, oh, ow});
  for (int n = 0; n < s.n; ++n)
    for (int o = 0; o < k.n; ++o)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = 0;
          for (int c = 0; c < s.c; ++c)
            for (int ky = 0; ky < k.h; ++ky)
              for (int kx = 0; kx < k.w; ++kx) {
                const int iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
                if (iy >= 0 && iy < s.h && ix >= 0 && ix < s.w)
                  acc += x.at(n, c, iy, ix) * w.at(o, c, ky, kx);
              }
          out.at(n, o, y, xx) = acc;
        }
  return out;
}

double sum_sq_weighted(const Tensor<double>& y, const Tensor<double>& r) { return dot(y, r); }

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor<float>(Shape{0, 1, 1, 1}), ConfigError);
  EXPECT_THROW(Tensor<float>(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3}), ConfigError);
  Tensor<float> t(Shape{2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
}

TEST(Conv2d, ScalarProduct) {
  Tensor<double> x(Shape{1, 1, 1, 1}, {3.0});
  ConvParams<double> p{Tensor<double>(Shape{1, 1, 1, 1}, {2.0}), std::nullopt, 1, 0};
  EXPECT_DOUBLE_EQ(conv2d(x, p)[0], 6.0);
}

TEST(Conv2d, AllOnesKernelCenterIsTotalSum) {
  std::vector<double> v(9);
  std::iota(v.begin(), v.end(), 1.0);
  Tensor<double> x(Shape{1, 1, 3, 3}, v);
  ConvParams<double> p{Tensor<double>(Shape{1, 1, 3, 3}, 1.0), std::nullopt, 1, 1};
  const auto y = conv2d(x, p);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_DOUBLE_EQ(y.at(0, 0, 1, 1), 45.0);
  EXPECT_EQ(max_abs_diff(y, naive_conv(x, p.weights, 1, 1)), 0.0);
}

TEST(Conv2d, StrideTwoHalvesSpatialSize) {
  Tensor<float> x(Shape{1, 64, 32, 32}, 0.5f);
  ConvParams<float> p{Tensor<float>(Shape{64, 64, 3, 3}, 0.01f), std::nullopt, 2, 1};
  EXPECT_EQ(conv2d(x, p).shape(), (Shape{1, 64, 16, 16}));
}

TEST(Conv2d, MatchesNaiveOracle) {
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      auto x = random_tensor(Shape{2, 3, 7, 6}, 11);
      auto w = random_tensor(Shape{4, 3, 3, 3}, 12);
      ConvParams<double> p{w, std::nullopt, stride, pad};
      EXPECT_LT(max_abs_diff(conv2d(x, p), naive_conv(x, w, stride, pad)), 1e-12)
          << "stride " << stride << " pad " << pad;
    }
}

TEST(Conv2d, BiasIsAddedPerChannel) {
  auto x = random_tensor(Shape{1, 2, 4, 4}, 3);
  auto w = random_tensor(Shape{3, 2, 3, 3}, 4);
  ConvParams<double> p{w, std::vector<double>{1.0, -2.0, 0.5}, 1, 1};
  const auto with = conv2d(x, p);
  p.bias.reset();
  const auto without = conv2d(x, p);
  for (int c = 0; c < 3; ++c)
    EXPECT_NEAR(with.at(0, c, 2, 1) - without.at(0, c, 2, 1), (std::vector<double>{1, -2, 0.5})[c], 1e-12);
}

TEST(Conv2d, ChannelMismatchNamesDimensions) {
  Tensor<float> x(Shape{1, 3, 8, 8});
  ConvParams<float> p{Tensor<float>(Shape{4, 5, 3, 3}), std::nullopt, 1, 1};
  try {
    (void)conv2d(x, p);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("3 channels"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("5"), std::string::npos);
  }
  ConvParams<float> big{Tensor<float>(Shape{1, 3, 5, 5}), std::nullopt, 1, 0};
  EXPECT_THROW((void)conv2d(Tensor<float>(Shape{1, 3, 2, 2}), big), ConfigError);
  ConvParams<float> zero_stride{Tensor<float>(Shape{1, 3, 1, 1}), std::nullopt, 0, 0};
  EXPECT_THROW((void)conv2d(x, zero_stride), ConfigError);
}

TEST(Deconv2d, ScalarAdjoint) {
  Tensor<double> x(Shape{1, 1, 1, 1}, {5.0});
  ConvParams<double> p{Tensor<double>(Shape{1, 1, 1, 1}, {3.0}), std::nullopt, 1, 0};
  EXPECT_DOUBLE_EQ(deconv2d(x, p)[0], 15.0);
}

TEST(Deconv2d, StrideTwoDoublesSpatialSize) {
  Tensor<float> y(Shape{1, 64, 16, 16}, 1.0f);
  ConvParams<float> p{Tensor<float>(Shape{64, 64, 3, 3}, 0.01f), std::nullopt, 2, 1};
  EXPECT_EQ(deconv2d(y, p).shape(), (Shape{1, 64, 32, 32}));
}

TEST(Deconv2d, AdjointOfConv) {
  for (int stride : {1, 2}) {
    auto x = random_tensor(Shape{1, 2, 4, 4}, 21);
    auto w = random_tensor(Shape{3, 2, 3, 3}, 22);
    ConvParams<double> p{w, std::nullopt, stride, 1};
    const auto cx = conv2d(x, p);
    auto y = random_tensor(cx.shape(), 23);
    const auto dy = deconv2d(y, p);
    ASSERT_EQ(dy.shape(), x.shape());
    EXPECT_NEAR(dot(cx, y), dot(x, dy), 1e-10) << "stride " << stride;
  }
}

TEST(Deconv2d, ChannelMismatch) {
  ConvParams<float> p{Tensor<float>(Shape{4, 2, 3, 3}), std::nullopt, 2, 1};
  EXPECT_THROW((void)deconv2d(Tensor<float>(Shape{1, 3, 4, 4}), p), ConfigError);
}

TEST(Relu, Definition) {
  Tensor<float> x(Shape{1, 3, 1, 1}, {-1.f, 0.f, 2.f});
  EXPECT_EQ(relu(x).vec(), (std::vector<float>{0.f, 0.f, 2.f}));
  Tensor<float> neg(Shape{2, 2, 2, 2}, -3.f);
  EXPECT_EQ(max_abs(relu(neg)), 0.f);
  auto pos = random_tensor<float>(Shape{2, 2, 2, 2}, 5, 0.0, 1.0);
  EXPECT_EQ(relu(pos), pos);
  Tensor<float> nan(Shape{1, 1, 1, 1}, std::numeric_limits<float>::quiet_NaN());
  EXPECT_TRUE(std::isnan(relu(nan)[0]));
}

TEST(BatchNorm, TwoPointSymmetry) {
  Tensor<double> x(Shape{2, 1, 1, 1}, {1.0, 3.0});
  const auto st = compute_bn_stats(x, 1e-12);
  EXPECT_DOUBLE_EQ(st.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(st.variance[0], 1.0);
  const auto y = batchnorm(x, st);
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);
}

TEST(BatchNorm, IdentityStats) {
  auto x = random_tensor(Shape{2, 2, 3, 3}, 8);
  BnStats<double> st{{0.0, 0.0}, {1.0, 1.0}, 1e-300, std::nullopt, std::nullopt};
  EXPECT_EQ(batchnorm(x, st), x);
}

TEST(BatchNorm, ConstantBatchGivesZeros) {
  Tensor<double> x(Shape{3, 1, 1, 1}, 5.0);
  const auto st = compute_bn_stats(x);
  EXPECT_DOUBLE_EQ(st.mean[0], 5.0);
  EXPECT_DOUBLE_EQ(st.variance[0], 0.0);
  EXPECT_EQ(max_abs(batchnorm(x, st)), 0.0);
}

TEST(BatchNorm, StatsMatchTwoPassOracle) {
  auto x = random_tensor(Shape{4, 3, 2, 2}, 9);
  const auto st = compute_bn_stats(x);
  for (int c = 0; c < 3; ++c) {
    double m = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 4; ++i) m += x.at(n, c, i / 2, i % 2);
    m /= 16;
    double v = 0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 4; ++i) v += (x.at(n, c, i / 2, i % 2) - m) * (x.at(n, c, i / 2, i % 2) - m);
    v /= 16;
    EXPECT_NEAR(st.mean[c], m, 1e-12);
    EXPECT_NEAR(st.variance[c], v, 1e-12);
  }
}

TEST(BatchNorm, NormalizesEachChannel) {
  auto x = random_tensor(Shape{8, 3, 4, 4}, 10, -2.0, 5.0);
  const auto y = batchnorm(x, compute_bn_stats(x));
  const auto st = compute_bn_stats(y);
  for (int c = 0; c < 3; ++c) {
    EXPECT_LT(std::abs(st.mean[c]), 1e-6);
    EXPECT_NEAR(st.variance[c], 1.0, 1e-3);
  }
}

TEST(BatchNorm, ScaleShiftAndErrors) {
  auto x = random_tensor(Shape{2, 2, 2, 2}, 12);
  auto st = compute_bn_stats(x);
  const auto plain = batchnorm(x, st);
  st.scale = std::vector<double>{2.0, 3.0};
  st.shift = std::vector<double>{1.0, -1.0};
  const auto affine = batchnorm(x, st);
  EXPECT_NEAR(affine.at(1, 1, 0, 1), 3.0 * plain.at(1, 1, 0, 1) - 1.0, 1e-12);
  BnStats<double> wrong{{0.0}, {1.0}, 1e-5, std::nullopt, std::nullopt};
  EXPECT_THROW((void)batchnorm(x, wrong), ConfigError);
  BnStats<double> zero_eps{{0.0, 0.0}, {1.0, 1.0}, 0.0, std::nullopt, std::nullopt};
  EXPECT_THROW((void)batchnorm(x, zero_eps), ConfigError);
}

TEST(MaxPool, Examples) {
  Tensor<float> x(Shape{1, 1, 2, 2}, {1.f, 2.f, 3.f, 4.f});
  EXPECT_EQ(maxpool2x2(x)[0], 4.f);
  Tensor<float> c(Shape{1, 2, 4, 6}, 7.f);
  const auto pc = maxpool2x2(c);
  EXPECT_EQ(pc.shape(), (Shape{1, 2, 2, 3}));
  EXPECT_EQ(pc, Tensor<float>(Shape{1, 2, 2, 3}, 7.f));
  EXPECT_THROW((void)maxpool2x2(Tensor<float>(Shape{1, 1, 3, 2})), ConfigError);
}

TEST(MaxPool, MatchesWindowScan) {
  auto x = random_tensor(Shape{1, 2, 4, 4}, 13);
  const auto y = maxpool2x2(x);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        double m = -1e300;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) m = std::max(m, x.at(0, c, 2 * i + dy, 2 * j + dx));
        EXPECT_EQ(y.at(0, c, i, j), m);
      }
}

TEST(GlobalAvgPool, Examples) {
  Tensor<double> x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(global_avg_pool(x)[0], 2.5);
  EXPECT_DOUBLE_EQ(global_avg_pool(Tensor<double>(Shape{1, 1, 3, 3}, 4.25))[0], 4.25);
  auto r = random_tensor(Shape{2, 3, 5, 4}, 14);
  const auto g = global_avg_pool(r);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double s = 0;
      for (int y = 0; y < 5; ++y)
        for (int xx = 0; xx < 4; ++xx) s += r.at(n, c, y, xx);
      EXPECT_NEAR(g.at(n, c, 0, 0), s / 20, 1e-12);
    }
}

TEST(FullyConnected, Examples) {
  Tensor<double> x(Shape{1, 2, 1, 1}, {1, 2});
  Tensor<double> eye(Shape{2, 2, 1, 1}, {1, 0, 0, 1});
  EXPECT_EQ(fully_connected(x, eye, {0.0, 0.0}), x);
  Tensor<double> w(Shape{2, 2, 1, 1}, {1, 1, 1, -1});
  EXPECT_EQ(fully_connected(x, w, {0.0, 0.0}).vec(), (std::vector<double>{3, -1}));
  EXPECT_THROW((void)fully_connected(Tensor<double>(Shape{1, 3, 1, 1}), w, {0.0, 0.0}), ConfigError);
}

TEST(FullyConnected, EqualsOneByOneConv) {
  auto x = random_tensor(Shape{3, 5, 1, 1}, 15);
  auto w = random_tensor(Shape{4, 5, 1, 1}, 16);
  std::vector<double> b{0.1, -0.2, 0.3, 0.0};
  ConvParams<double> p{w, b, 1, 0};
  EXPECT_LT(max_abs_diff(fully_connected(x, w, b), conv2d(x, p)), 1e-12);
}

TEST(SoftmaxCrossEntropy, Examples) {
  Tensor<double> uniform(Shape{2, 10, 1, 1}, 0.3);
  EXPECT_NEAR(softmax_cross_entropy(uniform, {3, 9}).loss, std::log(10.0), 1e-12);
  Tensor<double> big(Shape{1, 2, 1, 1}, {1000.0, 0.0});
  const auto r = softmax_cross_entropy(big, {0});
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_NEAR(r.loss, 0.0, 1e-12);
  EXPECT_THROW((void)softmax_cross_entropy(big, {2}), ConfigError);
}

TEST(SoftmaxCrossEntropy, GradientMatchesFiniteDifferences) {
  auto z = random_tensor(Shape{3, 5, 1, 1}, 17, -3, 3);
  const std::vector<int> labels{0, 4, 2};
  const auto g = softmax_cross_entropy(z, labels).grad;
  double worst = 0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double keep = z[i];
    z[i] = keep + h;
    const double up = softmax_cross_entropy(z, labels).loss;
    z[i] = keep - h;
    const double down = softmax_cross_entropy(z, labels).loss;
    z[i] = keep;
    worst = std::max(worst, std::abs((up - down) / (2 * h) - g[i]) / std::max(1e-3, std::abs(g[i])));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(HeInit, StatisticsAndDeterminism) {
  const auto t = he_init<double>(Shape{100000, 1, 1, 1}, 8, 42);
  double m = 0, v = 0;
  for (std::size_t i = 0; i < t.size(); ++i) m += t[i];
  m /= t.size();
  for (std::size_t i = 0; i < t.size(); ++i) v += (t[i] - m) * (t[i] - m);
  EXPECT_NEAR(std::sqrt(v / t.size()), 0.5, 0.5 * 0.02);
  EXPECT_EQ(t, he_init<double>(Shape{100000, 1, 1, 1}, 8, 42));
  const auto u = he_init<double>(Shape{100000, 1, 1, 1}, 2, 7);
  double s = 0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * u[i];
  EXPECT_NEAR(std::sqrt(s / u.size()), 1.0, 0.02);
  EXPECT_THROW((void)he_init<double>(Shape{1, 1, 1, 1}, 0, 1), ConfigError);
}

TEST(Add, Examples) {
  auto a = random_tensor(Shape{2, 2, 2, 2}, 18);
  auto b = random_tensor(Shape{2, 2, 2, 2}, 19);
  EXPECT_EQ(add(a, Tensor<double>(a.shape())), a);
  Tensor<double> p(Shape{1, 2, 1, 1}, {1, 2}), q(Shape{1, 2, 1, 1}, {3, 4});
  EXPECT_EQ(add(p, q).vec(), (std::vector<double>{4, 6}));
  EXPECT_EQ(add(a, b), add(b, a));
  EXPECT_THROW((void)add(p, a), ConfigError);
}

// ---- adjoint (backward) forms against central differences --------------

class GradCheck : public ::testing::Test {
 protected:
  static constexpr double kTol = 1e-4;
};

TEST_F(GradCheck, Conv2d) {
  for (int stride : {1, 2}) {
    auto x = random_tensor(Shape{2, 2, 5, 5}, 31);
    ConvParams<double> p{random_tensor(Shape{3, 2, 3, 3}, 32), std::vector<double>{0.1, 0.2, -0.3},
                         stride, 1};
    const auto r = random_tensor(conv2d(x, p).shape(), 33);
    const auto g = conv2d_backward(x, p, r);
    auto f = [&] { return sum_sq_weighted(conv2d(x, p), r); };
    EXPECT_LT(fd_check(x, g.input, f), kTol);
    EXPECT_LT(fd_check(p.weights, g.weights, f), kTol);
    Tensor<double> b(Shape{1, 3, 1, 1}, *p.bias);
    auto fb = [&] {
      p.bias = b.vec();
      return f();
    };
    EXPECT_LT(fd_check(b, channel_vector(g.bias), fb), kTol);
  }
}

TEST_F(GradCheck, Deconv2d) {
  auto x = random_tensor(Shape{2, 3, 3, 3}, 34);
  ConvParams<double> p{random_tensor(Shape{3, 2, 3, 3}, 35), std::nullopt, 2, 1};
  const auto r = random_tensor(deconv2d(x, p).shape(), 36);
  const auto g = deconv2d_backward(x, p, r);
  auto f = [&] { return dot(deconv2d(x, p), r); };
  EXPECT_LT(fd_check(x, g.input, f), kTol);
  EXPECT_LT(fd_check(p.weights, g.weights, f), kTol);
}

TEST_F(GradCheck, Relu) {
  auto x = random_tensor(Shape{2, 2, 3, 3}, 37);
  const auto r = random_tensor(x.shape(), 38);
  EXPECT_LT(fd_check(x, relu_backward(x, r), [&] { return dot(relu(x), r); }), kTol);
}

TEST_F(GradCheck, BatchNormTrainMode) {
  auto x = random_tensor(Shape{3, 2, 2, 2}, 39);
  const auto r = random_tensor(x.shape(), 40);
  auto scale = random_tensor(Shape{1, 2, 1, 1}, 41, 0.5, 1.5);
  auto shift = random_tensor(Shape{1, 2, 1, 1}, 42);
  auto stats_of = [&] {
    auto st = compute_bn_stats(x);
    st.scale = scale.vec();
    st.shift = shift.vec();
    return st;
  };
  auto f = [&] { return dot(batchnorm(x, stats_of()), r); };
  const auto g = batchnorm_train_backward(x, stats_of(), r);
  EXPECT_LT(fd_check(x, g.input, f), kTol);
  EXPECT_LT(fd_check(scale, channel_vector(g.scale), f), kTol);
  EXPECT_LT(fd_check(shift, channel_vector(g.shift), f), kTol);
}

TEST_F(GradCheck, BatchNormFixedStats) {
  auto x = random_tensor(Shape{3, 2, 2, 2}, 43);
  const auto r = random_tensor(x.shape(), 44);
  const auto st = compute_bn_stats(random_tensor(x.shape(), 45));
  EXPECT_LT(fd_check(x, batchnorm_backward(x, st, r).input, [&] { return dot(batchnorm(x, st), r); }),
            kTol);
}

TEST_F(GradCheck, MaxPool) {
  auto x = random_tensor(Shape{2, 2, 4, 4}, 46);
  const auto r = random_tensor(Shape{2, 2, 2, 2}, 47);
  EXPECT_LT(fd_check(x, maxpool2x2_backward(x, r), [&] { return dot(maxpool2x2(x), r); }), kTol);
}

TEST_F(GradCheck, GlobalAvgPool) {
  auto x = random_tensor(Shape{2, 3, 3, 2}, 48);
  const auto r = random_tensor(Shape{2, 3, 1, 1}, 49);
  EXPECT_LT(fd_check(x, global_avg_pool_backward(x.shape(), r),
                     [&] { return dot(global_avg_pool(x), r); }),
            kTol);
}

TEST_F(GradCheck, FullyConnected) {
  auto x = random_tensor(Shape{3, 4, 1, 1}, 50);
  auto w = random_tensor(Shape{2, 4, 1, 1}, 51);
  auto b = random_tensor(Shape{1, 2, 1, 1}, 52);
  const auto r = random_tensor(Shape{3, 2, 1, 1}, 53);
  auto f = [&] { return dot(fully_connected(x, w, b.vec()), r); };
  const auto g = fully_connected_backward(x, w, r);
  EXPECT_LT(fd_check(x, g.input, f), kTol);
  EXPECT_LT(fd_check(w, g.weights, f), kTol);
  EXPECT_LT(fd_check(b, channel_vector(g.bias), f), kTol);
}

TEST_F(GradCheck, Add) {
  auto a = random_tensor(Shape{1, 2, 2, 2}, 54);
  const auto b = random_tensor(a.shape(), 55);
  const auto r = random_tensor(a.shape(), 56);
  EXPECT_LT(fd_check(a, r, [&] { return dot(add(a, b), r); }), kTol);
}

TEST(Purity, OpsDoNotMutateInputs) {
  const auto x = random_tensor(Shape{2, 2, 4, 4}, 60);
  const auto copy = x;
  ConvParams<double> p{random_tensor(Shape{2, 2, 3, 3}, 61), std::nullopt, 1, 1};
  (void)conv2d(x, p);
  (void)deconv2d(x, p);
  (void)relu(x);
  (void)batchnorm(x, compute_bn_stats(x));
  (void)maxpool2x2(x);
  (void)global_avg_pool(x);
  (void)conv2d_backward(x, p, x);
  EXPECT_EQ(x, copy);
}
