#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "capsf/ops.hpp"
#include "capsf/rng.hpp"
#include "support/finite_difference.hpp"

using namespace capsf;
using T = double;
using fd::Op;

namespace {

Tensor<T> random_tensor(Shape shape, Rng& rng, bool grad = true, double scale = 1.0) {
  return fd::random_tensor(std::move(shape), rng, grad, scale);
}

void expect_gradients(const std::vector<Shape>& shapes, const Op& op, double scale = 1.0) {
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) worst = std::max(worst, fd::op_gradient_error(seed, shapes, op, scale));
  EXPECT_LE(worst, 1e-6);
}

}  // namespace

TEST(Conv2d, ZeroInputGivesBias) {
  Rng rng(3);
  auto k = random_tensor({2, 1, 3, 3}, rng, false);
  Tensor<T> b({2}, {0.25, -1.5});
  auto out = ops::conv2d(Tensor<T>::zeros({1, 3, 3}), k, b, 1, 1);
  ASSERT_EQ(out.shape(), (Shape{2, 3, 3}));
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_EQ(out[i], 0.25);
    EXPECT_EQ(out[9 + i], -1.5);
  }
}

TEST(Conv2d, IdentityKernelIsExact) {
  Rng rng(5);
  auto x = random_tensor({1, 7, 5}, rng, false);
  Tensor<T> k({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
  auto out = ops::conv2d(x, k, Tensor<T>::zeros({1}), 1, 1);
  ASSERT_EQ(out.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out[i], x[i]);
}

TEST(Conv2d, HandCrossCorrelation) {
  Tensor<T> x({1, 2, 2}, {1, 2, 3, 4});
  Tensor<T> k({1, 1, 2, 2}, {1, 1, 1, 1});
  auto out = ops::conv2d(x, k, Tensor<T>::zeros({1}), 1, 0);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(out.item(), 10.0);
}

TEST(Conv2d, NoKernelFlip) {
  Tensor<T> x({1, 1, 2}, {1, 2});
  Tensor<T> k({1, 1, 1, 2}, {1, 0});
  EXPECT_EQ(ops::conv2d(x, k, Tensor<T>::zeros({1})).item(), 1.0);
}

TEST(Conv2d, OutputSizeAndErrors) {
  Rng rng(1);
  auto x = random_tensor({2, 3, 9, 8}, rng, false);
  auto out = ops::conv2d(x, random_tensor({4, 3, 3, 3}, rng, false), Tensor<T>::zeros({4}), 2, 1);
  EXPECT_EQ(out.shape(), (Shape{2, 4, 5, 4}));
  try {
    ops::conv2d(x, random_tensor({4, 2, 3, 3}, rng, false), Tensor<T>::zeros({4}));
    FAIL() << "expected channel mismatch";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("input channels"), std::string::npos);
  }
  EXPECT_THROW(ops::conv2d(Tensor<T>::zeros({1, 2, 2}), Tensor<T>::zeros({1, 1, 3, 3}), Tensor<T>::zeros({1})),
               UsageError);
}

TEST(Conv1d, Examples) {
  Tensor<T> b({1}, {0.5});
  auto zero = ops::conv1d(Tensor<T>::zeros({1, 4}), Tensor<T>({1, 1, 2}, {3, 4}), b);
  for (T v : zero.data()) EXPECT_EQ(v, 0.5);

  Tensor<T> x({1, 4}, {1, 2, 3, 4});
  auto id = ops::conv1d(x, Tensor<T>({1, 1, 1}, {1}), Tensor<T>::zeros({1}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(id[i], x[i]);

  auto strided = ops::conv1d(x, Tensor<T>({1, 1, 2}, {1, 1}), Tensor<T>::zeros({1}), 2);
  ASSERT_EQ(strided.shape(), (Shape{1, 2}));
  EXPECT_EQ(strided[0], 3.0);
  EXPECT_EQ(strided[1], 7.0);

  EXPECT_THROW(ops::conv1d(Tensor<T>::zeros({1, 2}), Tensor<T>::zeros({1, 1, 3}), Tensor<T>::zeros({1})), UsageError);
}

TEST(BatchNorm, EvalIdentity) {
  Rng rng(2);
  auto x = random_tensor({3, 2, 4}, rng, false);
  ops::BatchNormStats<T> stats(2);
  auto out = ops::batchnorm(x, Tensor<T>::full({2}, 1.0), Tensor<T>::zeros({2}), stats, ops::Mode::eval);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(out[i], x[i], 1e-5 * std::abs(x[i]) + 1e-12);
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  ops::BatchNormStats<T> stats(1);
  auto out = ops::batchnorm(Tensor<T>::full({4, 1, 3}, 2.5), Tensor<T>::full({1}, 3.0), Tensor<T>::full({1}, 0.75),
                            stats, ops::Mode::train);
  for (T v : out.data()) EXPECT_NEAR(v, 0.75, 1e-12);
}

TEST(BatchNorm, HandNormalization) {
  ops::BatchNormStats<T> stats(1);
  auto out = ops::batchnorm(Tensor<T>({2, 1}, {-1, 1}), Tensor<T>::full({1}, 2.0), Tensor<T>::full({1}, 1.0), stats,
                            ops::Mode::train);
  const double d = 2.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(out[0], 1.0 - d, 1e-12);
  EXPECT_NEAR(out[1], 1.0 + d, 1e-12);
  EXPECT_NEAR(out[0], -0.99999, 1e-5);
  // momentum 0.1 towards batch mean 0 and unbiased variance 2
  EXPECT_NEAR(stats.running_mean[0], 0.0, 1e-15);
  EXPECT_NEAR(stats.running_var[0], 0.9 * 1.0 + 0.1 * 2.0, 1e-15);
}

TEST(BatchNorm, ChannelMismatchThrows) {
  ops::BatchNormStats<T> stats(2);
  EXPECT_THROW(ops::batchnorm(Tensor<T>::zeros({2, 3}), Tensor<T>::zeros({2}), Tensor<T>::zeros({2}), stats,
                              ops::Mode::train),
               UsageError);
}

TEST(Squash, Examples) {
  auto zero = ops::squash(Tensor<T>::zeros({4}));
  for (T v : zero.data()) EXPECT_EQ(v, 0.0);
  auto unit = ops::squash(Tensor<T>({2}, {1, 0}));
  EXPECT_NEAR(unit[0], 0.5, 1e-12);
  EXPECT_EQ(unit[1], 0.0);
  auto v = ops::squash(Tensor<T>({2}, {3, 4}));
  EXPECT_NEAR(v[0], 3.0 * 5.0 / 26.0, 1e-12);
  EXPECT_NEAR(v[1], 4.0 * 5.0 / 26.0, 1e-12);
}

TEST(Squash, NormBoundMonotoneAndParallel) {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    auto s = random_tensor({5}, rng, false, std::exp(rng.uniform(-6, 6)));
    auto v = ops::squash(s);
    double ns = 0, nv = 0, dot = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      ns += s[k] * s[k];
      nv += v[k] * v[k];
      dot += s[k] * v[k];
    }
    EXPECT_GT(nv, 0.0);
    EXPECT_LT(std::sqrt(nv), 1.0);
    EXPECT_NEAR(dot, std::sqrt(ns * nv), 1e-9 * std::sqrt(ns * nv));

    const double alpha = 1.0 + rng.uniform();
    auto v2 = ops::squash(ops::scale(s, alpha));
    double nv2 = 0;
    for (T x : v2.data()) nv2 += x * x;
    EXPECT_GE(nv2, nv);
  }
}

TEST(Softmax, Examples) {
  auto a = ops::softmax(Tensor<T>({2}, {0, 0}), 0);
  EXPECT_EQ(a[0], 0.5);
  EXPECT_EQ(a[1], 0.5);
  for (double t : {-1e3, 0.0, 7.5, 1e3}) {
    auto b = ops::softmax(Tensor<T>({3}, {t, t, t}), 0);
    for (T v : b.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  }
  auto c = ops::softmax(Tensor<T>({2}, {1, 0}), 0);
  EXPECT_NEAR(c[0], 0.731059, 1e-6);
  EXPECT_NEAR(c[1], 0.268941, 1e-6);
}

TEST(Softmax, SumsToOneAndShiftInvariant) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_tensor({3, 4, 2}, rng, false, 5.0);
    const std::size_t axis = trial % 3;
    auto y = ops::softmax(x, axis);
    auto shifted = ops::softmax(ops::add(x, Tensor<T>::full(x.shape(), 3.25)), axis);
    auto totals = ops::mean_axis(y, axis);
    for (T t : totals.data()) EXPECT_NEAR(t * static_cast<double>(x.dim(axis)), 1.0, 1e-12);
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], shifted[i], 1e-12);
  }
}

TEST(StatsPool, Examples) {
  auto c = ops::stats_pool(Tensor<T>::full({1, 3, 3}, 4.0));
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_NEAR(c[0], 4.0, 1e-15);
  EXPECT_NEAR(c[1], 0.0, 1e-15);
  auto h = ops::stats_pool(Tensor<T>({1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_DOUBLE_EQ(h[0], 2.5);
  EXPECT_DOUBLE_EQ(h[1], 1.25);
}

TEST(StatsPool, PermutationInvariant) {
  Rng rng(8);
  auto x = random_tensor({2, 3, 4}, rng, false);
  std::vector<T> vals(x.data().begin(), x.data().end());
  std::vector<std::size_t> perm(12);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<T> permuted(vals.size());
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t i = 0; i < 12; ++i) permuted[ch * 12 + i] = vals[ch * 12 + perm[i]];
  auto a = ops::stats_pool(x);
  auto b = ops::stats_pool(Tensor<T>(x.shape(), permuted));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Backward, IdentityLeaf) {
  auto x = Tensor<T>::scalar(3.0, true);
  backward(x);
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, RejectsNonScalar) {
  auto x = Tensor<T>::zeros({2}, true);
  EXPECT_THROW(backward(ops::scale(x, 2.0)), UsageError);
}

TEST(Backward, AccumulatesUntilZeroed) {
  auto x = Tensor<T>({2}, {1, 2}, true);
  auto f = ops::sum(ops::mul(x, x));
  backward(f);
  backward(f);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 8.0);
  x.zero_grad();
  backward(f);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  auto x = Tensor<T>::scalar(1.5, true);
  auto y = ops::scale(x, 2.0);
  auto f = ops::sum(ops::mul(y, y));  // 4 x^2
  Graph<T> graph(f);
  EXPECT_EQ(graph.ops().size(), 3u);
  backward(f);
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, SquashNormSquaredAtUnitVector) {
  auto x = Tensor<T>({2}, {1, 0}, true);
  auto f = [&] {
    auto v = ops::squash(x);
    return ops::sum(ops::mul(v, v));
  };
  backward(f());
  std::vector<Tensor<T>> leaves{x};
  EXPECT_LE(fd::max_gradient_error(leaves, [&] { return f().item(); }, 1e-6, 1e-12), 1e-6);
  // |squash(x)|^2 = r^4 / (1 + r^2)^2, derivative 4 r^3/(1+r^2)^3 = 0.5 at r = 1
  EXPECT_NEAR(x.grad()[0], 0.5, 1e-10);
}

TEST(Ops, NonFiniteIsAnError) {
  Tensor<T> x({1}, {1e308});
  EXPECT_THROW(ops::scale(x, 10.0), NumericalError);
}

TEST(GradientCheck, Conv2d) {
  expect_gradients({{2, 3, 5, 4}, {4, 3, 3, 3}, {4}},
                   [](auto& in) { return ops::conv2d(in[0], in[1], in[2], 1, 1); });
  expect_gradients({{3, 6, 5}, {2, 3, 3, 2}, {2}}, [](auto& in) { return ops::conv2d(in[0], in[1], in[2], 2, 0); });
}

TEST(GradientCheck, Conv1d) {
  expect_gradients({{2, 2, 9}, {3, 2, 5}, {3}}, [](auto& in) { return ops::conv1d(in[0], in[1], in[2], 2); });
  expect_gradients({{3, 6}, {1, 3, 3}, {1}}, [](auto& in) { return ops::conv1d(in[0], in[1], in[2], 1, 1); });
}

TEST(GradientCheck, BatchNorm) {
  for (auto mode : {ops::Mode::train, ops::Mode::eval}) {
    expect_gradients({{3, 2, 4}, {2}, {2}}, [mode](auto& in) {
      ops::BatchNormStats<T> stats(2);
      stats.running_mean.mutable_data()[0] = 0.3;
      stats.running_var.mutable_data()[1] = 2.0;
      return ops::batchnorm(in[0], in[1], in[2], stats, mode);
    });
  }
}

TEST(GradientCheck, Pointwise) {
  expect_gradients({{3, 4}}, [](auto& in) { return ops::relu(in[0]); });
  expect_gradients({{2, 3, 4, 6}}, [](auto& in) { return ops::maxpool2d(in[0]); });
  expect_gradients({{3, 4}, {3, 4}}, [](auto& in) { return ops::add(in[0], in[1]); });
  expect_gradients({{3, 4}, {3, 4}}, [](auto& in) { return ops::sub(in[0], in[1]); });
  expect_gradients({{3, 4}, {3, 4}}, [](auto& in) { return ops::mul(in[0], in[1]); });
  expect_gradients({{5}}, [](auto& in) { return ops::scale(in[0], -1.7); });
}

TEST(GradientCheck, Reductions) {
  expect_gradients({{3, 4, 2}}, [](auto& in) { return ops::mean(in[0]); });
  expect_gradients({{3, 4, 2}}, [](auto& in) { return ops::mean_axis(in[0], 1); });
  expect_gradients({{3, 4, 2}}, [](auto& in) { return ops::select(in[0], 2, 1); });
  expect_gradients({{3, 4}}, [](auto& in) { return ops::reshape(in[0], {2, 6}); });
  expect_gradients({{3, 4}, {3, 4}, {3, 4}}, [](auto& in) { return ops::stack(in, 1); });
  expect_gradients({{2, 3, 5, 4}}, [](auto& in) { return ops::stats_pool(in[0]); });
  expect_gradients({{4, 3}, {3}}, [](auto& in) { return ops::matvec(in[0], in[1]); });
}

TEST(GradientCheck, SoftmaxAndSquash) {
  expect_gradients({{3, 4}}, [](auto& in) { return ops::softmax(in[0], 0); });
  expect_gradients({{3, 4}}, [](auto& in) { return ops::softmax(in[0], 1); });
  expect_gradients({{3, 4}}, [](auto& in) { return ops::squash(in[0]); });
  expect_gradients({{3, 4}}, [](auto& in) { return ops::squash(in[0]); }, 0.05);
  expect_gradients({{3, 4}}, [](auto& in) { return ops::squash(in[0]); }, 20.0);
}

TEST(GradientCheck, RoutingOps) {
  expect_gradients({{2, 3, 4}, {3, 2, 5, 4}}, [](auto& in) { return ops::capsule_transform(in[0], in[1], 2); });
  expect_gradients({{2, 3, 4}, {3, 1, 5, 4}}, [](auto& in) { return ops::capsule_transform(in[0], in[1], 2); });
  expect_gradients({{2, 3, 2}, {2, 3, 2, 4}}, [](auto& in) { return ops::couple(in[0], in[1]); });
  expect_gradients({{2, 3, 2, 4}, {2, 2, 4}}, [](auto& in) { return ops::agree(in[0], in[1]); });
}

TEST(GradientCheck, BinaryCrossEntropy) {
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    std::vector<T> p(6);
    std::vector<int> y(6);
    for (std::size_t i = 0; i < 6; ++i) {
      p[i] = rng.uniform(0.05, 0.95);
      y[i] = static_cast<int>(rng.below(2));
    }
    std::vector<Tensor<T>> leaves{Tensor<T>({6}, p, true)};
    backward(ops::binary_cross_entropy(leaves[0], y));
    worst = std::max(worst, fd::max_gradient_error(
                                leaves, [&] { return ops::binary_cross_entropy(leaves[0], y).item(); }, 1e-6, 1e-3));
  }
  EXPECT_LE(worst, 1e-6);
}
