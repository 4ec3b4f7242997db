#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "noop/nd.hpp"
#include "support/op_cases.hpp"

namespace nd = noop::nd;
using nd::Graph;
using nd::Tensor;

TEST(Ops, AddElementwise) {
  Graph<double> g;
  auto y = nd::add(g, Tensor<double>({2}, {1, 2}), Tensor<double>({2}, {3, 4}));
  EXPECT_EQ(y.values(), (std::vector<double>{4, 6}));
  EXPECT_EQ(g.size(), 0u);  // nothing requires grad, nothing recorded
}

TEST(Ops, ConvOnesCenterIsNine) {
  Graph<double> g;
  auto x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = nd::conv2d(g, x, w, 1, 1);
  ASSERT_EQ(y.shape(), (nd::Shape{1, 1, 3, 3}));
  EXPECT_EQ(y[4], 9.0);
  EXPECT_EQ(y[0], 4.0);
}

TEST(Ops, ReluClampsNegatives) {
  Graph<double> g;
  auto y = nd::relu(g, Tensor<double>({3}, {-1, 0, 2}));
  EXPECT_EQ(y.values(), (std::vector<double>{0, 0, 2}));
}

TEST(Ops, StrideTwoConvHalvesExtent) {
  Graph<float> g;
  auto y = nd::conv2d(g, Tensor<float>::zeros({2, 3, 16, 16}), Tensor<float>::zeros({5, 3, 3, 3}), 2, 1);
  EXPECT_EQ(y.shape(), (nd::Shape{2, 5, 8, 8}));
}

TEST(Ops, ShapeMismatchThrows) {
  Graph<double> g;
  EXPECT_THROW(nd::add(g, Tensor<double>::zeros({2}), Tensor<double>::zeros({3})), nd::ShapeError);
  EXPECT_THROW(nd::matmul(g, Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2, 3})), nd::ShapeError);
  EXPECT_THROW(nd::conv2d(g, Tensor<double>::zeros({1, 2, 4, 4}), Tensor<double>::zeros({1, 3, 3, 3}), 1, 1),
               nd::ShapeError);
}

TEST(Ops, UnknownOpKindThrows) {
  Graph<double> g;
  std::vector<Tensor<double>> in{Tensor<double>::zeros({2})};
  EXPECT_THROW(nd::apply<double>(g, static_cast<nd::OpKind>(99), in), std::invalid_argument);
}

TEST(Ops, NonFiniteResultIsAnError) {
  Graph<float> g;
  auto big = Tensor<float>::full({2}, 3e38f);
  EXPECT_THROW(nd::scale(g, big, 10.0f), nd::NonFiniteError);
  EXPECT_THROW(Tensor<double>({1}, {std::nan("")}), nd::NonFiniteError);
}

TEST(Ops, ZScoreOfConstantRowIsZero) {
  Graph<double> g;
  auto p = Tensor<double>({1, 3}, {-517.3, -517.3, -517.3}, true);
  auto z = nd::zscore_rows(g, p);
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Ops, BatchNormTrainingMovesRunningStats) {
  Graph<double> g;
  nd::BatchNorm2d<double> bn(1);
  auto x = Tensor<double>({4, 1}, {1, 2, 3, 4});
  auto y = bn(g, x, true);
  EXPECT_NEAR(bn.running_mean[0], 0.25, 1e-12);              // 0.9*0 + 0.1*2.5
  EXPECT_NEAR(bn.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);  // unbiased batch variance
  double s = 0;
  for (double v : y.data()) s += v;
  EXPECT_NEAR(s, 0.0, 1e-12);
}

TEST(Backward, SumOfSquares) {
  Graph<double> g;
  auto x = Tensor<double>({3}, {1, 2, 3}, true);
  g.backward(nd::sum(g, nd::mul(g, x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, MeanIsUniform) {
  Graph<double> g;
  auto x = Tensor<double>({4}, {5, -1, 2, 7}, true);
  g.backward(nd::mean(g, x));
  for (double v : x.grad()) EXPECT_EQ(v, 0.25);
}

TEST(Backward, ConvReluChainMatchesFiniteDifferences) {
  nd::Rng rng(3);
  auto w1 = rng.normal_tensor<double>({3, 2, 3, 3});
  auto w2 = rng.normal_tensor<double>({2, 3, 3, 3});
  auto x = rng.normal_tensor<double>({2, 2, 6, 6});
  auto f = [&](Graph<double>& g, const Tensor<double>& in) {
    auto h = nd::relu(g, nd::conv2d(g, in, w1, 1, 1));
    auto y = nd::conv2d(g, h, w2, 2, 1);
    return nd::sum(g, nd::mul(g, y, y));
  };
  EXPECT_LT(nd::grad_check(f, x), 1e-4);
}

TEST(Backward, NonScalarLossRejected) {
  Graph<double> g;
  auto x = Tensor<double>({2}, {1, 2}, true);
  auto y = nd::scale(g, x, 2.0);
  EXPECT_THROW(g.backward(y), nd::ShapeError);
}

TEST(Backward, ConsumedGraphRejected) {
  Graph<double> g;
  auto x = Tensor<double>({2}, {1, 2}, true);
  auto loss = nd::sum(g, x);
  g.backward(loss);
  EXPECT_TRUE(g.consumed());
  EXPECT_THROW(g.backward(loss), nd::GraphError);
  EXPECT_THROW(nd::sum(g, x), nd::GraphError);
  g.reset();
  EXPECT_NO_THROW(nd::sum(g, x));
}

TEST(Backward, FanOutAccumulatesExactly) {
  nd::Rng rng(11);
  const auto x0 = rng.normal_tensor<double>({3, 4});
  const auto w = rng.normal_tensor<double>({3, 4});
  auto branch_f = [&](Graph<double>& g, const Tensor<double>& x) { return nd::sum(g, nd::mul(g, nd::silu(g, x), w)); };
  auto branch_g = [&](Graph<double>& g, const Tensor<double>& x) { return nd::mean(g, nd::silu(g, nd::scale(g, x, -0.7))); };

  auto grad_of = [&](auto fn) {
    Graph<double> g;
    auto x = x0.clone(true);
    g.backward(fn(g, x));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  const auto gf = grad_of(branch_f);
  const auto gg = grad_of(branch_g);
  const auto both = grad_of([&](Graph<double>& g, const Tensor<double>& x) {
    auto yf = branch_f(g, x);
    auto yg = branch_g(g, x);  // recorded later, so its contribution lands first
    return nd::add(g, yf, yg);
  });
  for (std::size_t i = 0; i < both.size(); ++i) EXPECT_EQ(both[i], gg[i] + gf[i]) << i;
}

TEST(Backward, DeterministicForwardAndBackward) {
  auto run = [] {
    nd::Rng rng(42);
    auto x = rng.normal_tensor<float>({2, 3, 8, 8}, true);
    auto w = rng.normal_tensor<float>({4, 3, 3, 3}, true);
    Graph<float> g;
    auto y = nd::silu(g, nd::conv2d(g, x, w, 2, 1));
    auto loss = nd::mean(g, nd::mul(g, y, y));
    g.backward(loss);
    return std::make_tuple(y.clone(), Tensor<float>(x.shape(), {x.grad().begin(), x.grad().end()}),
                           Tensor<float>(w.shape(), {w.grad().begin(), w.grad().end()}));
  };
  auto [y1, gx1, gw1] = run();
  auto [y2, gx2, gw2] = run();
  EXPECT_TRUE(nd::bitwise_equal(y1, y2));
  EXPECT_TRUE(nd::bitwise_equal(gx1, gx2));
  EXPECT_TRUE(nd::bitwise_equal(gw1, gw2));
}

TEST(Backward, ConvIsBatchIndependentBitwise) {
  nd::Rng rng(5);
  auto x = rng.normal_tensor<float>({3, 4, 8, 8});
  auto w = rng.normal_tensor<float>({6, 4, 3, 3});
  Graph<float> g;
  auto batched = nd::conv2d(g, x, w, 1, 1);
  const std::size_t per = 4 * 8 * 8, out_per = 6 * 8 * 8;
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor<float> single({1, 4, 8, 8}, {x.data().begin() + n * per, x.data().begin() + (n + 1) * per});
    auto y = nd::conv2d(g, single, w, 1, 1);
    for (std::size_t i = 0; i < out_per; ++i) ASSERT_EQ(y[i], batched[n * out_per + i]);
  }
}

TEST(GradCheck, SumOfSquaresIsTight) {
  auto f = [](Graph<double>& g, const Tensor<double>& x) { return nd::sum(g, nd::mul(g, x, x)); };
  EXPECT_LT(nd::grad_check(f, Tensor<double>({2}, {1, 2})), 1e-8);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  auto f = [](Graph<double>&, const Tensor<double>&) { return Tensor<double>::scalar(3.0); };
  EXPECT_EQ(nd::grad_check(f, Tensor<double>({3}, {1, 2, 3})), 0.0);
}

TEST(GradCheck, NonScalarOutputRejected) {
  auto f = [](Graph<double>& g, const Tensor<double>& x) { return nd::scale(g, x, 2.0); };
  EXPECT_THROW(nd::grad_check(f, Tensor<double>({3}, {1, 2, 3})), nd::ShapeError);
}

TEST(GradCheck, EveryPrimitiveOnThreeInstances) {
  for (auto kind : noop::testing::all_op_kinds()) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto c = noop::testing::make_op_case(kind, seed);
      EXPECT_LT(noop::testing::check_op_case(c), 1e-4) << c.label;
    }
  }
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
  for (double g0 : {1e-6, 0.3, -25.0}) {
    auto p = Tensor<double>({1}, {1.0}, true);
    p.mutable_grad()[0] = g0;
    nd::AdamState<double> st(nd::AdamConfig{.lr = 1e-2});
    std::vector<Tensor<double>> ps{p};
    nd::adam_step<double>(ps, st);
    const double delta = std::abs(p[0] - 1.0);
    EXPECT_LE(delta, 1e-2 * (1 + 1e-6));
    EXPECT_GT(delta, 1e-2 * 0.99 * (std::abs(g0) > 1e-4 ? 1.0 : 0.0));
    EXPECT_EQ(st.step, 1u);
  }
}

TEST(Adam, ZeroGradientIsIdentity) {
  auto p = Tensor<double>({3}, {1, -2, 3}, true);
  std::vector<Tensor<double>> ps{p};
  nd::AdamState<double> st(nd::AdamConfig{.lr = 0.1});
  nd::adam_step<double>(ps, st);
  EXPECT_EQ(p.values(), (std::vector<double>{1, -2, 3}));
}

TEST(Adam, QuadraticBowlConverges) {
  auto x = Tensor<double>({1}, {0.0}, true);
  std::vector<Tensor<double>> ps{x};
  nd::AdamState<double> st(nd::AdamConfig{.lr = 1e-1});
  for (int i = 0; i < 500; ++i) {
    x.zero_grad();
    Graph<double> g;
    auto d = nd::shift(g, x, -3.0);
    g.backward(nd::sum(g, nd::mul(g, d, d)));
    nd::adam_step<double>(ps, st);
  }
  EXPECT_LT(std::abs(x[0] - 3.0), 1e-2);
  EXPECT_EQ(st.step, 500u);
}

TEST(Adam, RejectsBadInput) {
  auto p = Tensor<double>({2}, {1, 2}, true);
  std::vector<Tensor<double>> ps{p};
  nd::AdamState<double> bad_lr(nd::AdamConfig{.lr = 0.0});
  EXPECT_THROW(nd::adam_step<double>(ps, bad_lr), std::invalid_argument);

  nd::AdamState<double> st(nd::AdamConfig{.lr = 0.1});
  std::vector<double> short_grad{1.0};
  std::vector<std::span<const double>> grads{short_grad};
  EXPECT_THROW(nd::adam_step<double>(ps, grads, st), nd::ShapeError);
}

TEST(Checkpoint, ByteLayoutOfSmallTensor) {
  std::vector<nd::NamedTensor<float>> ts{{"ab", Tensor<float>({2}, {1.0f, -2.0f})}};
  std::ostringstream os;
  nd::write_checkpoint(os, ts);
  const std::string bytes = os.str();
  // magic 5 + count 4 + namelen 2 + name 2 + dtype 1 + ndim 1 + dims 4 + data 8
  ASSERT_EQ(bytes.size(), 27u);
  EXPECT_EQ(bytes.substr(0, 5), "NOCK1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 1u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 2u);
  EXPECT_EQ(bytes.substr(11, 2), "ab");
  EXPECT_EQ(static_cast<unsigned char>(bytes[13]), 0u);  // f32
  EXPECT_EQ(static_cast<unsigned char>(bytes[14]), 1u);  // ndim
  EXPECT_EQ(static_cast<unsigned char>(bytes[15]), 2u);
  const unsigned char one_le[4] = {0x00, 0x00, 0x80, 0x3f};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(static_cast<unsigned char>(bytes[19 + i]), one_le[i]);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  nd::Rng rng(9);
  std::vector<nd::NamedTensor<double>> ts{{"noop.eps", rng.normal_tensor<double>({1, 1, 4, 4})},
                                          {"meta.w", rng.normal_tensor<double>({2, 3})}};
  std::stringstream ss;
  nd::write_checkpoint(ss, ts);
  const auto back = nd::read_checkpoint(ss);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].name, ts[i].name);
    EXPECT_EQ(back[i].dtype, nd::DType::F64);
    EXPECT_TRUE(nd::bitwise_equal(back[i].as<double>(), ts[i].tensor));
  }
}

TEST(Checkpoint, CorruptInputsAreFormatErrors) {
  std::istringstream bad_magic(std::string("NOCK2\0\0\0\0", 9));
  EXPECT_THROW(nd::read_checkpoint(bad_magic), nd::FormatError);

  std::vector<nd::NamedTensor<float>> ts{{"x", Tensor<float>({3}, {1, 2, 3})}};
  std::ostringstream os;
  nd::write_checkpoint(os, ts);
  std::string bytes = os.str();
  std::istringstream truncated(bytes.substr(0, bytes.size() - 2));
  EXPECT_THROW(nd::read_checkpoint(truncated), nd::FormatError);
}
