#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "grn/autograd.hpp"

using namespace grn;
using namespace grn::ag;
using grn::testing::check_gradients;

namespace {

constexpr double kTol = 1e-4;

Tensor rand_tensor(Shape s, std::mt19937_64& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = u(rng);
  return Tensor::from_data(std::move(s), std::move(v), grad);
}

// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
Tensor rand_away_from_zero(Shape s, std::mt19937_64& rng) {
  auto t = rand_tensor(std::move(s), rng);
  for (auto& x : t.mutable_data()) x = (x < 0 ? -0.1 : 0.1) + x;
  return t;
}

// sum(t * W) for a fixed random W: a scalar whose upstream gradient is W.
Tensor probe(const Tensor& t, std::uint64_t seed = 77) {
  std::mt19937_64 rng(seed);
  return sum(mul(t, rand_tensor(t.shape(), rng, false)));
}

}  // namespace

class OpGradient : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};
};

TEST_F(OpGradient, Elementwise) {
  auto a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
  EXPECT_LT(check_gradients([&] { return probe(add(a, b)); }, {a, b}).max_rel_error, kTol);
  EXPECT_LT(check_gradients([&] { return probe(sub(a, b)); }, {a, b}).max_rel_error, kTol);
  EXPECT_LT(check_gradients([&] { return probe(mul(a, b)); }, {a, b}).max_rel_error, kTol);
  EXPECT_LT(check_gradients([&] { return probe(scale(a, -2.5)); }, {a}).max_rel_error, kTol);
  EXPECT_LT(check_gradients([&] { return probe(square(a)); }, {a}).max_rel_error, kTol);
  auto r = rand_away_from_zero({3, 4}, rng);
  EXPECT_LT(check_gradients([&] { return probe(relu(r)); }, {r}).max_rel_error, kTol);
}

TEST_F(OpGradient, ShapeOps) {
  auto a = rand_tensor({2, 3, 4}, rng);
  EXPECT_LT(check_gradients([&] { return probe(reshape(a, {6, 4})); }, {a}).max_rel_error, kTol);
  auto m = rand_tensor({3, 5}, rng);
  EXPECT_LT(check_gradients([&] { return probe(transpose(m)); }, {m}).max_rel_error, kTol);
  EXPECT_LT(check_gradients([&] { return probe(row(m, 1)); }, {m}).max_rel_error, kTol);
  auto p = rand_tensor({3, 2}, rng), q = rand_tensor({3, 4}, rng);
  EXPECT_LT(check_gradients([&] { return probe(concat({p, q, p})); }, {p, q}).max_rel_error, kTol);
}

TEST_F(OpGradient, LinearAlgebra) {
  auto a = rand_tensor({4, 3}, rng), b = rand_tensor({3, 5}, rng), bias = rand_tensor({5}, rng);
  EXPECT_LT(check_gradients([&] { return probe(matmul(a, b)); }, {a, b}).max_rel_error, kTol);
  auto y = rand_tensor({4, 5}, rng);
  EXPECT_LT(check_gradients([&] { return probe(add_bias(y, bias)); }, {y, bias}).max_rel_error, kTol);
}

TEST_F(OpGradient, Reductions) {
  auto a = rand_tensor({2, 3, 4}, rng);
  EXPECT_LT(check_gradients([&] { return sum(square(a)); }, {a}).max_rel_error, kTol);
  for (std::size_t axis = 0; axis < 3; ++axis)
    EXPECT_LT(check_gradients([&] { return probe(mean_axis(a, axis)); }, {a}).max_rel_error, kTol) << axis;
  auto img = rand_tensor({2, 3, 4, 5}, rng);
  EXPECT_LT(check_gradients([&] { return probe(mean_pool_spatial(img)); }, {img}).max_rel_error, kTol);
}

TEST_F(OpGradient, SoftmaxFamily) {
  auto z = rand_tensor({4, 5}, rng, true, -2, 2);
  EXPECT_LT(check_gradients([&] { return probe(softmax(z)); }, {z}).max_rel_error, kTol);
  EXPECT_LT(check_gradients([&] { return probe(log_softmax(z)); }, {z}).max_rel_error, kTol);
  const std::vector<std::uint32_t> labels{0, 4, 2, 2};
  EXPECT_LT(check_gradients([&] { return cross_entropy_with_logits(z, labels); }, {z}).max_rel_error, kTol);
}

TEST_F(OpGradient, Conv2d) {
  auto x = rand_tensor({2, 2, 5, 6}, rng), w = rand_tensor({3, 2, 3, 3}, rng), b = rand_tensor({3}, rng);
  const auto rep = check_gradients([&] { return probe(conv2d(x, w, b)); }, {x, w, b});
  EXPECT_LT(rep.max_rel_error, kTol) << rep.worst;
  EXPECT_LT(check_gradients([&] { return probe(conv2d(x, w)); }, {x, w}).max_rel_error, kTol);
}

TEST(Ops, SoftmaxOfEqualEntriesIsUniform) {
  const auto s = softmax(Tensor::filled({2, 7}, 3.3));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 7.0, 1e-15);
}

TEST(Ops, SoftmaxRowsSumToOneAndArePositive) {
  std::mt19937_64 rng(8);
  const auto s = softmax(rand_tensor({50, 9}, rng, false, -30, 30));
  for (std::size_t r = 0; r < 50; ++r) {
    double acc = 0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_GT(s.data()[r * 9 + j], 0.0);
      acc += s.data()[r * 9 + j];
    }
    EXPECT_NEAR(acc, 1.0, 1e-12);
  }
}

TEST(Ops, UnitKernelConvIsIdentity) {
  std::mt19937_64 rng(9);
  const auto x = rand_tensor({2, 1, 4, 5}, rng, false);
  const auto y = conv2d(x, Tensor::filled({1, 1, 1, 1}, 1.0));
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(y.data(), x.data());
}

TEST(Ops, CrossEntropyOfUniformLogitsIsLog3) {
  const std::vector<std::uint32_t> label{1};
  EXPECT_NEAR(cross_entropy_with_logits(Tensor::zeros({1, 3}), label).item(), std::log(3.0), 1e-15);
}

TEST(Ops, CrossEntropyGradientIsSoftmaxMinusOneHot) {
  std::mt19937_64 rng(10);
  auto z = rand_tensor({3, 4}, rng);
  const std::vector<std::uint32_t> labels{2, 0, 3};
  backward(cross_entropy_with_logits(z, labels));
  // oracle: softmax computed by hand
  for (std::size_t r = 0; r < 3; ++r) {
    double mx = -1e300, den = 0;
    for (std::size_t j = 0; j < 4; ++j) mx = std::max(mx, z.data()[r * 4 + j]);
    for (std::size_t j = 0; j < 4; ++j) den += std::exp(z.data()[r * 4 + j] - mx);
    for (std::size_t j = 0; j < 4; ++j) {
      const double p = std::exp(z.data()[r * 4 + j] - mx) / den;
      EXPECT_NEAR(z.grad()[r * 4 + j], (p - (j == labels[r] ? 1.0 : 0.0)) / 3.0, 1e-14);
    }
  }
}

TEST(Backward, SumOfSquaresClosedForm) {
  auto x = Tensor::from_data({3}, {1, 2, 3}, true);
  backward(sum(square(x)));
  EXPECT_EQ(x.grad(), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, FanOutAccumulates) {
  auto x = Tensor::from_data({2}, {1.5, -2.0}, true);
  backward(sum(add(x, x)));
  EXPECT_EQ(x.grad(), (std::vector<double>{2, 2}));
  x.zero_grad();
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad(), (std::vector<double>{3.0, -4.0}));
}

TEST(Backward, LeafGradsAccumulateAcrossCallsUntilZeroed) {
  auto x = Tensor::from_data({1}, {2.0}, true);
  backward(sum(square(x)));
  backward(sum(square(x)));
  EXPECT_EQ(x.grad()[0], 8.0);
  x.zero_grad();
  backward(sum(square(x)));
  EXPECT_EQ(x.grad()[0], 4.0);
}

TEST(Backward, DiamondGraphVisitsEachNodeOnce) {
  auto x = Tensor::from_data({2}, {1, 2}, true);
  auto a = square(x), b = scale(x, 3.0);
  auto c = add(a, b);
  auto d = mul(c, a);
  const auto loss = sum(d);  // the graph holds raw pointers; keep the root alive
  const auto g = Graph::build(loss);
  std::set<Node*> uniq(g.nodes.begin(), g.nodes.end());
  EXPECT_EQ(uniq.size(), g.nodes.size());
  EXPECT_EQ(g.nodes.size(), 6u);  // x, a, b, c, d, sum
  // topological: every node appears after all its parents
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    for (const auto& p : g.nodes[i]->parents) {
      const auto pos = std::find(g.nodes.begin(), g.nodes.end(), p.get()) - g.nodes.begin();
      EXPECT_LT(static_cast<std::size_t>(pos), i);
    }
}

TEST(Backward, NonScalarLossThrows) {
  auto x = Tensor::from_data({2}, {1, 2}, true);
  EXPECT_THROW(backward(square(x)), ShapeError);
}

TEST(Backward, DeepChainDoesNotOverflowStack) {
  auto x = Tensor::from_data({1}, {1.0}, true);
  Tensor y = x;
  for (int i = 0; i < 20000; ++i) y = scale(y, 1.0);
  backward(sum(y));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Errors, ShapeMismatchNamesOpAndShapes) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3x2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1, 2, 3, 3})), ShapeError);
}

TEST(Errors, NonFiniteValuesAreHardFailures) {
  auto big = Tensor::from_data({1}, {1e200}, true);
  EXPECT_THROW(mul(big, big), NumericalError);
}

TEST(NoGrad, GuardSuppressesGraphRecording) {
  auto x = Tensor::from_data({2}, {1, 2}, true);
  {
    NoGradGuard g;
    const auto y = square(x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node()->parents.empty());
  }
  EXPECT_TRUE(square(x).requires_grad());
}

TEST(Determinism, RepeatedPassesAreBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(42);
    auto x = rand_tensor({2, 2, 5, 5}, rng), w = rand_tensor({3, 2, 3, 3}, rng);
    const auto loss = sum(square(mean_pool_spatial(relu(conv2d(x, w)))));
    backward(loss);
    auto g = w.grad();
    g.push_back(loss.item());
    return g;
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, FirstStepClosedForm) {
  auto p = Tensor::from_data({1}, {1.0}, true);
  p.node()->ensure_grad()[0] = 1.0;
  AdamState st;
  std::vector<Tensor> params{p};
  adam_step(params, st, {0.1, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_NEAR(p.data()[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, DecoupledDecayOnFirstStep) {
  auto p = Tensor::from_data({1}, {2.0}, true);
  p.node()->ensure_grad()[0] = 1.0;
  AdamState st;
  std::vector<Tensor> params{p};
  adam_step(params, st, {0.1, 0.9, 0.999, 1e-8, 0.5});
  EXPECT_NEAR(p.data()[0], 2.0 - 0.1 / (1.0 + 1e-8) - 0.1 * 0.5 * 2.0, 1e-15);
}

TEST(Adam, ZeroGradientZeroDecayIsFixedPoint) {
  auto p = Tensor::from_data({3}, {1, -2, 3}, true);
  p.node()->ensure_grad();
  AdamState st;
  std::vector<Tensor> params{p};
  for (int i = 0; i < 10; ++i) adam_step(params, st, {0.1, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(p.data(), (std::vector<double>{1, -2, 3}));
}

TEST(Adam, ConvergesOnQuadratic) {
  auto w = Tensor::from_data({1}, {0.0}, true);
  AdamState st;
  std::vector<Tensor> params{w};
  for (int i = 0; i < 200; ++i) {
    w.zero_grad();
    backward(sum(square(sub(w, Tensor::from_data({1}, {3.0})))));
    adam_step(params, st, {0.1, 0.9, 0.999, 1e-8, 0.0});
  }
  EXPECT_LT(std::abs(w.data()[0] - 3.0), 0.05);
}

TEST(Init, XavierBoundsAndNormalScale) {
  std::mt19937_64 rng(1);
  const auto w = init::xavier_uniform({64, 32}, 32, 64, rng);
  const double a = std::sqrt(6.0 / 96.0);
  for (double v : w.data()) EXPECT_LE(std::abs(v), a);
  const auto p = init::normal({4000}, 0.25, rng);
  double ss = 0;
  for (double v : p.data()) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / 4000.0), 0.25, 0.02);
}

TEST(Checkpoint, RoundTrip) {
  std::mt19937_64 rng(3);
  NamedTensors ts{{"enc.w1", rand_tensor({3, 4}, rng)}, {"protos", rand_tensor({2, 2, 2}, rng)},
                  {"scalar", Tensor::scalar(1.25, true)}};
  std::stringstream ss;
  save_checkpoint(ss, ts);
  EXPECT_EQ(ss.str().substr(0, 4), "GRNW");
  const auto back = load_checkpoint(ss);
  ASSERT_EQ(back.size(), ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_EQ(back[i].first, ts[i].first);
    EXPECT_EQ(back[i].second.shape(), ts[i].second.shape());
    EXPECT_EQ(back[i].second.data(), ts[i].second.data());
  }
}

TEST(Checkpoint, BadMagicAndTruncationRejected) {
  std::stringstream bad("GRNX\x01\0\0\0");
  EXPECT_THROW(load_checkpoint(bad), FormatError);
  NamedTensors ts{{"w", Tensor::zeros({4}, true)}};
  std::stringstream ss;
  save_checkpoint(ss, ts);
  std::stringstream cut(ss.str().substr(0, ss.str().size() - 3));
  EXPECT_THROW(load_checkpoint(cut), FormatError);
}
