#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nowcast/error.hpp"
#include "nowcast/optimizer.hpp"
#include "nowcast/tensor.hpp"
#include "support/oracles.hpp"

using namespace nowcast;

namespace {

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool grad = true, double lo = -1, double hi = 1) {
  const auto n = shape_size(shape);
  return Tensor::from(std::move(shape), oracle::random_values(n, rng, lo, hi), grad);
}

// Weighted sum so every output element gets a distinct upstream gradient.
Tensor probe_loss(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

}  // namespace

TEST(Conv2d, IdentityKernelReturnsInput) {
  auto in = Tensor::full({1, 3, 3}, 1.0);
  auto w = Tensor::from({1, 1, 1, 1}, {1.0});
  auto b = Tensor::from({1}, {0.0});
  auto out = conv2d(in, w, b);
  EXPECT_EQ(out.shape(), (Shape{1, 3, 3}));
  for (double v : out.values()) EXPECT_EQ(v, 1.0);
}

TEST(Conv2d, TwoByTwoAllOnesKernelSums) {
  auto in = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  auto w = Tensor::full({1, 1, 2, 2}, 1.0);
  auto out = conv2d(in, w, Tensor::from({1}, {0.0}));
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(out.item(), 10.0);
}

TEST(Conv2d, MatchesLoopOracleOnSampleSizedInput) {
  std::mt19937_64 rng(3);
  auto in = random_tensor({6, 18, 18}, rng, false);
  auto w = random_tensor({80, 6, 5, 5}, rng, false);
  auto b = random_tensor({80}, rng, false);
  auto out = conv2d(in, w, b);
  const auto ref = oracle::conv2d({in.values().begin(), in.values().end()}, 6, 18, 18,
                                  {w.values().begin(), w.values().end()}, 80, 5, {b.values().begin(), b.values().end()});
  EXPECT_EQ(out.shape(), (Shape{80, 14, 14}));
  EXPECT_LT(max_abs_diff(out.values(), ref), 1e-12);
}

TEST(Conv2d, BatchedMatchesPerItem) {
  std::mt19937_64 rng(4);
  auto in = random_tensor({3, 4, 7, 6}, rng, false);
  auto w = random_tensor({5, 4, 3, 3}, rng, false);
  auto out = conv2d(in, w, Tensor());
  ASSERT_EQ(out.shape(), (Shape{3, 5, 5, 4}));
  const std::size_t per_in = 4 * 7 * 6, per_out = 5 * 5 * 4;
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<double> item(in.values().begin() + b * per_in, in.values().begin() + (b + 1) * per_in);
    const auto ref = oracle::conv2d(item, 4, 7, 6, {w.values().begin(), w.values().end()}, 5, 3, {});
    EXPECT_LT(max_abs_diff(out.values().subspan(b * per_out, per_out), ref), 1e-12);
  }
}

TEST(Conv2d, RejectsMismatchedShapes) {
  auto in = Tensor::zeros({3, 5, 5});
  EXPECT_THROW(conv2d(in, Tensor::zeros({2, 4, 3, 3}), Tensor()), DimensionError);
  EXPECT_THROW(conv2d(in, Tensor::zeros({2, 3, 6, 6}), Tensor()), DimensionError);
  EXPECT_THROW(conv2d(in, Tensor::zeros({2, 3, 3, 3}), Tensor::zeros({3})), DimensionError);
  try {
    conv2d(in, Tensor::zeros({2, 4, 3, 3}), Tensor());
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto in = random_tensor({2, 3, 6, 5}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto b = random_tensor({4}, rng);
  auto weights = random_tensor({2, 4, 4, 3}, rng, false);
  auto f = [&]() { return probe_loss(conv2d(in, w, b), weights); };
  EXPECT_LT(oracle::fd_check(in, f, oracle::all_entries(in.size())), 1e-4);
  EXPECT_LT(oracle::fd_check(w, f, oracle::all_entries(w.size())), 1e-4);
  EXPECT_LT(oracle::fd_check(b, f, oracle::all_entries(b.size())), 1e-4);
}

TEST(Linear, IdentityWeight) {
  std::vector<double> eye{1, 0, 0, 0, 1, 0, 0, 0, 1};
  auto out = linear(Tensor::from({3}, {1, 2, 3}), Tensor::from({3, 3}, eye), Tensor::zeros({3}));
  EXPECT_EQ(std::vector<double>(out.values().begin(), out.values().end()), (std::vector<double>{1, 2, 3}));
}

TEST(Linear, RowVectorWithBias) {
  auto out = linear(Tensor::from({2}, {2, 3}), Tensor::from({1, 2}, {1, 1}), Tensor::from({1}, {5}));
  EXPECT_EQ(out.item(), 10.0);
}

TEST(Linear, MatchesLoopOracle) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({50}, rng, false);
  auto w = random_tensor({64, 50}, rng, false);
  auto b = random_tensor({64}, rng, false);
  const auto ref = oracle::linear({x.values().begin(), x.values().end()}, {w.values().begin(), w.values().end()}, 64,
                                  {b.values().begin(), b.values().end()});
  EXPECT_LT(max_abs_diff(linear(x, w, b).values(), ref), 1e-12);
}

TEST(Linear, RejectsInnerMismatch) {
  EXPECT_THROW(linear(Tensor::zeros({3}), Tensor::zeros({2, 4}), Tensor()), DimensionError);
  EXPECT_THROW(linear(Tensor::zeros({3}), Tensor::zeros({2, 3}), Tensor::zeros({3})), DimensionError);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({3, 5}, rng);
  auto w = random_tensor({4, 5}, rng);
  auto b = random_tensor({4}, rng);
  auto weights = random_tensor({3, 4}, rng, false);
  auto f = [&]() { return probe_loss(linear(x, w, b), weights); };
  EXPECT_LT(oracle::fd_check(x, f, oracle::all_entries(x.size())), 1e-4);
  EXPECT_LT(oracle::fd_check(w, f, oracle::all_entries(w.size())), 1e-4);
  EXPECT_LT(oracle::fd_check(b, f, oracle::all_entries(b.size())), 1e-4);
}

TEST(Activation, ReluClipsNegatives) {
  auto out = relu(Tensor::from({3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(out.values().begin(), out.values().end()), (std::vector<double>{0, 0, 2}));
}

TEST(Activation, SoftmaxOfEqualLogitsIsUniform) {
  auto out = softmax(Tensor::from({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(out.values()[0], 0.5);
  EXPECT_DOUBLE_EQ(out.values()[1], 0.5);
}

TEST(Activation, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(8);
  auto x = random_tensor({50, 7}, rng, false, -30, 30);
  auto out = softmax(x);
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_GE(out.values()[r * 7 + c], 0.0);
      s += out.values()[r * 7 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  auto big = softmax(Tensor::from({2}, {1000, -1000}));
  EXPECT_TRUE(std::isfinite(big.values()[0]));
  EXPECT_EQ(big.values()[0], 1.0);
}

TEST(Activation, SigmoidAndTanhValues) {
  auto s = sigmoid(Tensor::from({3}, {0, 2, -2}));
  EXPECT_DOUBLE_EQ(s.values()[0], 0.5);
  EXPECT_NEAR(s.values()[1], 1 / (1 + std::exp(-2.0)), 1e-15);
  EXPECT_NEAR(s.values()[1] + s.values()[2], 1.0, 1e-15);
  auto t = tanh(Tensor::from({2}, {0.3, -0.7}));
  EXPECT_NEAR(t.values()[0], std::tanh(0.3), 1e-15);
  EXPECT_NEAR(t.values()[1], std::tanh(-0.7), 1e-15);
}

TEST(Activation, SigmoidGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto x = random_tensor({40}, rng, true, -4, 4);
  auto weights = random_tensor({40}, rng, false);
  auto f = [&]() { return probe_loss(sigmoid(x), weights); };
  EXPECT_LT(oracle::fd_check(x, f, oracle::all_entries(x.size())), 1e-6);
}

TEST(Activation, TanhReluSoftmaxGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  auto x = random_tensor({4, 6}, rng, true, -3, 3);
  auto weights = random_tensor({4, 6}, rng, false);
  for (auto mode : {Activation::tanh, Activation::relu, Activation::softmax}) {
    auto f = [&]() { return probe_loss(activation(x, mode), weights); };
    EXPECT_LT(oracle::fd_check(x, f, oracle::all_entries(x.size())), 1e-4) << static_cast<int>(mode);
  }
}

TEST(BatchNorm, ConstantChannelsYieldBeta) {
  Tensor x = Tensor::zeros({3, 2, 2, 2});
  auto v = x.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i / 4) % 2 == 0 ? 7.0 : -3.0;
  BatchNormState st(2);
  auto out = batch_norm(x, Tensor::full({2}, 1.5), Tensor::from({2}, {0.25, -0.5}), st, BatchNormMode::train);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_DOUBLE_EQ(out.values()[i], (i / 4) % 2 == 0 ? 0.25 : -0.5);
}

TEST(BatchNorm, TrainModeStandardizesEachChannel) {
  std::mt19937_64 rng(11);
  // Large spread so that eps = 1e-5 perturbs the variance by less than 1e-9.
  auto x = random_tensor({8, 3, 5, 5}, rng, false, -2000, 2000);
  BatchNormState st(3);
  auto out = batch_norm(x, Tensor::full({3}, 1.0), Tensor::zeros({3}), st, BatchNormMode::train);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    std::size_t n = 0;
    for (std::size_t b = 0; b < 8; ++b) {
      for (std::size_t i = 0; i < 25; ++i) {
        const double v = out.values()[(b * 3 + c) * 25 + i];
        mean += v;
        sq += v * v;
        ++n;
      }
    }
    mean /= static_cast<double>(n);
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(sq / static_cast<double>(n) - mean * mean, 1.0, 1e-9);
  }
}

TEST(BatchNorm, RunningStatisticsFollowMomentum) {
  std::mt19937_64 rng(12);
  auto x = random_tensor({4, 2, 3}, rng, false);
  BatchNormState st(2);
  batch_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), st, BatchNormMode::train);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0;
    for (std::size_t b = 0; b < 4; ++b) {
      for (std::size_t i = 0; i < 3; ++i) mean += x.values()[(b * 2 + c) * 3 + i];
    }
    mean /= 12;
    double var = 0;
    for (std::size_t b = 0; b < 4; ++b) {
      for (std::size_t i = 0; i < 3; ++i) var += std::pow(x.values()[(b * 2 + c) * 3 + i] - mean, 2);
    }
    var /= 11;  // unbiased
    EXPECT_NEAR(st.running_mean[c], 0.1 * mean, 1e-15);
    EXPECT_NEAR(st.running_var[c], 0.9 + 0.1 * var, 1e-15);
  }
}

TEST(BatchNorm, InferModeUsesStoredStatistics) {
  BatchNormState st(2);
  st.running_mean = {1.0, -2.0};
  st.running_var = {4.0, 0.25};
  auto x = Tensor::from({1, 2, 2}, {3.0, 1.0, -2.0, 0.0});
  auto gamma = Tensor::from({2}, {2.0, 0.5});
  auto beta = Tensor::from({2}, {0.1, -0.1});
  auto out = batch_norm(x, gamma, beta, st, BatchNormMode::infer);
  const double e = st.eps;
  EXPECT_DOUBLE_EQ(out.values()[0], 2.0 * (3.0 - 1.0) / std::sqrt(4.0 + e) + 0.1);
  EXPECT_DOUBLE_EQ(out.values()[1], 2.0 * (1.0 - 1.0) / std::sqrt(4.0 + e) + 0.1);
  EXPECT_DOUBLE_EQ(out.values()[2], 0.5 * (-2.0 + 2.0) / std::sqrt(0.25 + e) - 0.1);
  EXPECT_DOUBLE_EQ(out.values()[3], 0.5 * (0.0 + 2.0) / std::sqrt(0.25 + e) - 0.1);
  EXPECT_EQ(st.running_mean, (std::vector<double>{1.0, -2.0}));
}

TEST(BatchNorm, TrainModeNeedsTwoItems) {
  BatchNormState st(2);
  EXPECT_THROW(batch_norm(Tensor::zeros({1, 2, 3}), Tensor::full({2}, 1.0), Tensor::zeros({2}), st, BatchNormMode::train),
               ConfigError);
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto x = random_tensor({3, 2, 2, 2}, rng);
  auto gamma = random_tensor({2}, rng, true, 0.5, 1.5);
  auto beta = random_tensor({2}, rng);
  auto weights = random_tensor({3, 2, 2, 2}, rng, false);
  BatchNormState st(2);
  auto f = [&]() { return probe_loss(batch_norm(x, gamma, beta, st, BatchNormMode::train), weights); };
  EXPECT_LT(oracle::fd_check(x, f, oracle::all_entries(x.size())), 1e-4);
  EXPECT_LT(oracle::fd_check(gamma, f, oracle::all_entries(2)), 1e-4);
  EXPECT_LT(oracle::fd_check(beta, f, oracle::all_entries(2)), 1e-4);
}

TEST(MaxPool, PicksWindowMaximum) {
  auto out = max_pool2d(Tensor::from({1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(out.item(), 4.0);
}

TEST(MaxPool, TiesRouteGradientToFirstElement) {
  auto x = Tensor::full({1, 2, 2}, 5.0, true);
  backward(sum(max_pool2d(x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
}

TEST(MaxPool, MatchesLoopOracle) {
  std::mt19937_64 rng(14);
  auto x = random_tensor({48, 8, 8}, rng, false);
  const auto ref = oracle::max_pool({x.values().begin(), x.values().end()}, 48, 8, 8);
  EXPECT_EQ(max_abs_diff(max_pool2d(x).values(), ref), 0.0);
}

TEST(MaxPool, RejectsOddExtent) { EXPECT_THROW(max_pool2d(Tensor::zeros({2, 3, 4})), DimensionError); }

TEST(MaxPool, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  auto x = random_tensor({2, 3, 4, 4}, rng);
  auto weights = random_tensor({2, 3, 2, 2}, rng, false);
  auto f = [&]() { return probe_loss(max_pool2d(x), weights); };
  EXPECT_LT(oracle::fd_check(x, f, oracle::all_entries(x.size())), 1e-4);
}

TEST(CrossEntropy, EqualLogitsGiveLn2) {
  const int label = 0;
  EXPECT_NEAR(cross_entropy_loss(Tensor::from({1, 2}, {0, 0}), {&label, 1}).item(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, LargeLogitsStayFinite) {
  const int label = 0;
  const double l = cross_entropy_loss(Tensor::from({1, 2}, {1000, 0}), {&label, 1}).item();
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, 0.0, 1e-12);
  const int other = 1;
  EXPECT_NEAR(cross_entropy_loss(Tensor::from({1, 2}, {1000, 0}), {&other, 1}).item(), 1000.0, 1e-9);
}

TEST(CrossEntropy, RejectsLabelsOutsideBinary) {
  const std::vector<int> labels{0, 2};
  EXPECT_THROW(cross_entropy_loss(Tensor::zeros({2, 2}), labels), DataError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(16);
  auto logits = random_tensor({6, 2}, rng, true, -3, 3);
  const std::vector<int> labels{0, 1, 1, 0, 1, 0};
  auto f = [&]() { return cross_entropy_loss(logits, labels); };
  EXPECT_LT(oracle::fd_check(logits, f, oracle::all_entries(logits.size())), 1e-5);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::zeros({2, 3, 4}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
  auto x = Tensor::from({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4}));
}

TEST(Backward, TwoConsumersAccumulate) {
  // y = sum(relu(x) * a) + sum(tanh(x)); x feeds both branches.
  auto x = Tensor::from({3}, {0.5, -0.2, 1.5}, true);
  auto a = Tensor::from({3}, {2.0, 3.0, -1.0});
  backward(add(sum(mul(relu(x), a)), sum(tanh(x))));
  const double xs[] = {0.5, -0.2, 1.5}, as[] = {2.0, 3.0, -1.0};
  for (int i = 0; i < 3; ++i) {
    const double expect = (xs[i] > 0 ? as[i] : 0.0) + (1 - std::tanh(xs[i]) * std::tanh(xs[i]));
    EXPECT_NEAR(x.grad()[i], expect, 1e-15);
  }
}

TEST(Backward, LeavesUnreachableGradientsAlone) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = Tensor::from({2}, {3, 4}, true);
  y.mutable_grad()[0] = 7.0;
  backward(sum(x));
  EXPECT_EQ(y.grad()[0], 7.0);
  EXPECT_EQ(y.grad()[1], 0.0);
}

TEST(Backward, RejectsNonScalar) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), UsageError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = sum(mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(backward(y), UsageError);
}

TEST(Backward, ReshapeSliceGatherGradients) {
  std::mt19937_64 rng(17);
  auto x = random_tensor({3, 4}, rng);
  auto w1 = random_tensor({2, 2}, rng, false);
  auto w2 = random_tensor({4, 4}, rng, false);
  const std::vector<std::size_t> rows{2, 0, 2, 1};
  auto f = [&]() {
    return add(probe_loss(reshape(slice_cols(x, 1, 3), {2, 3}), Tensor::full({2, 3}, 0.5)),
               add(probe_loss(gather_rows(x, rows), w2), sum(mul(slice_cols(reshape(x, {2, 6}), 0, 2), w1))));
  };
  EXPECT_LT(oracle::fd_check(x, f, oracle::all_entries(x.size())), 1e-6);
}

TEST(Optimizer, SgdStep) {
  auto p = Tensor::from({1}, {1.0}, true);
  p.mutable_grad()[0] = 2.0;
  std::vector<Tensor> params{p};
  Optimizer opt(OptimizerKind::sgd, 0.1);
  opt.step(params);
  EXPECT_NEAR(p.item(), 0.8, 1e-15);
  EXPECT_EQ(p.grad()[0], 0.0);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Optimizer, AdamFirstStepHasMagnitudeLr) {
  for (double g : {1e-3, 1.0, 1e4}) {
    auto p = Tensor::from({2}, {0.0, 0.0}, true);
    p.mutable_grad()[0] = g;
    p.mutable_grad()[1] = -g;
    std::vector<Tensor> params{p};
    Optimizer opt(OptimizerKind::adam, 0.01);
    opt.step(params);
    EXPECT_NEAR(p.values()[0], -0.01, 1e-7) << g;
    EXPECT_NEAR(p.values()[1], 0.01, 1e-7) << g;
  }
}

TEST(Optimizer, SgdConvergesOnQuadratic) {
  // f(p) = sum((p - c)^2 * s) with minimizer p = c.
  auto p = Tensor::from({3}, {5.0, -4.0, 0.0}, true);
  const auto c = Tensor::from({3}, {1.0, 2.0, -3.0});
  const auto s = Tensor::from({3}, {1.0, 2.0, 0.5});
  std::vector<Tensor> params{p};
  Optimizer opt(OptimizerKind::sgd, 0.1);
  for (int i = 0; i < 200; ++i) {
    auto d = add(p, mul(c, Tensor::full({3}, -1.0)));
    backward(sum(mul(mul(d, d), s)));
    opt.step(params);
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.values()[i], c.values()[i], 1e-6);
  EXPECT_EQ(opt.steps(), 200u);
}

TEST(Optimizer, MissingGradientIsUsageError) {
  std::vector<Tensor> params{Tensor::from({1}, {1.0}, true)};
  Optimizer opt(OptimizerKind::adam, 0.01);
  EXPECT_THROW(opt.step(params), UsageError);
}
