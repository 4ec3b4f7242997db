#include <gtest/gtest.h>

#include <cmath>

#include "noop/data/generators.hpp"
#include "noop/diffusion/denoiser.hpp"
#include "noop/diffusion/schedule.hpp"
#include "noop/diffusion/train.hpp"
#include "noop/nd/gradcheck.hpp"

namespace nd = noop::nd;
namespace diff = noop::diffusion;

namespace {

const diff::DenoiserConfig kSmall{.classes = 4, .channels = 1, .image_size = 8, .base = 8, .emb = 16};

double pooled_variance(std::span<const double> v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST(Schedule, SmallClosedForms) {
  const auto one = diff::make_schedule(1, 0.5, 0.5);
  EXPECT_EQ(one.alpha_bar, std::vector<double>{0.5});
  const auto two = diff::make_schedule(2, 0.1, 0.2);
  EXPECT_DOUBLE_EQ(two.alpha_bar[0], 0.9);
  EXPECT_NEAR(two.alpha_bar[1], 0.72, 1e-15);
}

TEST(Schedule, StandardLinearEndpoint) {
  const auto s = diff::make_schedule();
  // product of (1 - beta) over the canonical linear DDPM betas, computed in log space
  double log_ab = 0;
  for (std::size_t i = 0; i < 1000; ++i) log_ab += std::log1p(-(1e-4 + (2e-2 - 1e-4) * static_cast<double>(i) / 999.0));
  EXPECT_NEAR(s.alpha_bar_at(1000), std::exp(log_ab), 1e-12);
  EXPECT_NEAR(s.alpha_bar_at(1000), 4.0e-5, 0.1e-5);
  for (std::size_t t = 2; t <= 1000; ++t) {
    EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
    EXPECT_LE(s.betas[t - 2], s.betas[t - 1]);
  }
  EXPECT_GT(s.alpha_bar_at(1000), 0.0);
  EXPECT_LT(s.alpha_bar_at(1), 1.0);
}

TEST(Schedule, InvalidRangesRejected) {
  EXPECT_THROW(diff::make_schedule(0), std::invalid_argument);
  EXPECT_THROW(diff::make_schedule(10, 0.0, 0.1), std::invalid_argument);
  EXPECT_THROW(diff::make_schedule(10, 0.2, 0.1), std::invalid_argument);
  EXPECT_THROW(diff::make_schedule(10, 0.1, 1.0), std::invalid_argument);
  EXPECT_THROW(diff::make_schedule().alpha_bar_at(0), std::out_of_range);
  EXPECT_THROW(diff::make_schedule().alpha_bar_at(1001), std::out_of_range);
}

TEST(ForwardDiffuse, ZeroNoiseScalesImage) {
  const auto s = diff::make_schedule();
  nd::Rng rng(1);
  const auto x0 = rng.normal_tensor<double>({2, 1, 4, 4});
  nd::Graph<double> g;
  const auto xt = diff::forward_diffuse(g, x0, 300, nd::Tensor<double>::zeros(x0.shape()), s);
  const double a = std::sqrt(s.alpha_bar_at(300));
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_DOUBLE_EQ(xt[i], a * x0[i]);
}

TEST(ForwardDiffuse, TinyBetaIsNearIdentity) {
  const auto s = diff::make_schedule(10, 1e-9, 1e-9);
  nd::Rng rng(2);
  const auto x0 = rng.normal_tensor<double>({1, 1, 4, 4});
  const auto e = rng.normal_tensor<double>({1, 1, 4, 4});
  nd::Graph<double> g;
  const auto xt = diff::forward_diffuse(g, x0, 1, e, s);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(xt[i], x0[i], 1e-4);
}

TEST(ForwardDiffuse, VarianceLawAtThreeTimesteps) {
  const auto s = diff::make_schedule();
  nd::Rng rng(3);
  // unit-variance, non-Gaussian data; 10^4 draws of a 16x16 image
  const auto x0 = rng.uniform_tensor<double>({10000, 1, 16, 16}, -std::sqrt(3.0), std::sqrt(3.0));
  const auto eps = rng.normal_tensor<double>(x0.shape());
  const double var_x0 = pooled_variance(x0.data());
  for (std::size_t t : {100, 500, 900}) {
    nd::Graph<double> g;
    const auto xt = diff::forward_diffuse(g, x0, t, eps, s);
    const double ab = s.alpha_bar_at(t);
    const double expected = ab * var_x0 + (1 - ab);
    EXPECT_NEAR(pooled_variance(xt.data()) / expected, 1.0, 0.02) << "t=" << t;
  }
}

TEST(ForwardDiffuse, AffineInNoise) {
  const auto s = diff::make_schedule();
  nd::Rng rng(4);
  const auto x0 = rng.normal_tensor<double>({1, 1, 4, 4});
  const auto e1 = rng.normal_tensor<double>({1, 1, 4, 4});
  const auto e2 = rng.normal_tensor<double>({1, 1, 4, 4});
  const double a = 0.3;
  std::vector<double> mix(e1.size());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * e1[i] + (1 - a) * e2[i];
  nd::Graph<double> g;
  const auto lhs = diff::forward_diffuse(g, x0, 250, nd::Tensor<double>(x0.shape(), mix), s);
  const auto f1 = diff::forward_diffuse(g, x0, 250, e1, s);
  const auto f2 = diff::forward_diffuse(g, x0, 250, e2, s);
  for (std::size_t i = 0; i < mix.size(); ++i) EXPECT_NEAR(lhs[i], a * f1[i] + (1 - a) * f2[i], 1e-12);
}

TEST(ForwardDiffuse, GradientWrtNoiseIsScaledIdentity) {
  const auto s = diff::make_schedule();
  nd::Rng rng(5);
  const auto x0 = rng.normal_tensor<double>({1, 1, 4, 4});
  const auto w = rng.normal_tensor<double>({1, 1, 4, 4});
  auto probe = [&](nd::Graph<double>& g, const nd::Tensor<double>& e) {
    return nd::sum(g, nd::mul(g, diff::forward_diffuse(g, x0, 700, e, s), w));
  };
  const auto e = rng.normal_tensor<double>({1, 1, 4, 4});
  EXPECT_LT(nd::grad_check(probe, e), 1e-8);

  auto leaf = e.clone(true);
  nd::Graph<double> g;
  g.backward(probe(g, leaf));
  const double k = std::sqrt(1 - s.alpha_bar_at(700));
  for (std::size_t i = 0; i < leaf.size(); ++i) EXPECT_NEAR(leaf.grad()[i], k * w[i], 1e-14);
}

TEST(ForwardDiffuse, ErrorsOnShapeAndTimestep) {
  const auto s = diff::make_schedule();
  const auto x = nd::Tensor<double>::zeros({1, 1, 4, 4});
  nd::Graph<double> g;
  EXPECT_THROW(diff::forward_diffuse(g, x, 1001, x, s), std::out_of_range);
  EXPECT_THROW(diff::forward_diffuse(g, x, 10, nd::Tensor<double>::zeros({1, 1, 2, 2}), s), nd::ShapeError);
}

TEST(ForwardDiffuse, RowwiseMatchesTracked) {
  const auto s = diff::make_schedule();
  nd::Rng rng(6);
  const auto x0 = rng.normal_tensor<float>({3, 1, 4, 4});
  const auto e = rng.normal_tensor<float>({3, 1, 4, 4});
  const std::vector<std::size_t> ts{500, 500, 500};
  nd::Graph<float> g;
  EXPECT_TRUE(nd::bitwise_equal(diff::diffuse_rows(x0, ts, e, s), diff::forward_diffuse(g, x0, 500, e, s)));
}

TEST(Denoiser, ZeroInitHeadPredictsZero) {
  diff::Denoiser<double> m(kSmall, 1);
  nd::Rng rng(1);
  const auto x = rng.normal_tensor<double>({3, 1, 8, 8});
  nd::Graph<double> g;
  const auto y = m.predict(g, x, std::vector<std::size_t>{0, 1, 3}, std::vector<std::size_t>{1, 500, 1000});
  EXPECT_EQ(y.shape(), x.shape());
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Denoiser, DeterministicAndChecked) {
  diff::Denoiser<float> m(kSmall, 2);
  auto w = *m.params().find("denoiser.out.w");
  nd::Rng rng(2);
  for (auto& v : w.mutable_data()) v = rng.normal<float>();
  const auto x = rng.normal_tensor<float>({2, 1, 8, 8});
  nd::Graph<float> g;
  EXPECT_TRUE(nd::bitwise_equal(m.predict(g, x, 1, 400), m.predict(g, x, 1, 400)));
  EXPECT_FALSE(nd::bitwise_equal(m.predict(g, x, 1, 400), m.predict(g, x, 2, 400)));
  EXPECT_THROW(m.predict(g, x, 4, 400), std::out_of_range);
  EXPECT_THROW(m.predict(g, nd::Tensor<float>::zeros({1, 1, 4, 4}), 0, 400), nd::ShapeError);
  EXPECT_THROW(m.predict(g, x, std::vector<std::size_t>{0}, std::vector<std::size_t>{1, 1}), nd::ShapeError);
}

TEST(Denoiser, FrozenWeightsCarryNoGradient) {
  diff::Denoiser<double> m(kSmall, 3);
  m.set_frozen(true);
  EXPECT_TRUE(m.frozen());
  const auto params = m.params();
  for (const auto& p : params.items()) EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
  nd::Rng rng(3);
  auto x = rng.normal_tensor<double>({1, 1, 8, 8}, true);
  nd::Graph<double> g;
  g.backward(nd::sum(g, m.predict(g, x, 0, 100)));
  m.set_frozen(false);
  EXPECT_FALSE(m.frozen());
}

TEST(Denoiser, PromptOffsetsShapeChecked) {
  diff::Denoiser<double> m(kSmall, 3);
  EXPECT_THROW(m.set_prompt(nd::Tensor<double>::zeros({4, 8})), nd::ShapeError);
  m.set_prompt(nd::Tensor<double>::zeros({4, 16}));
  EXPECT_TRUE(m.prompt().defined());
  m.set_prompt({});
  EXPECT_FALSE(m.prompt().defined());
}

TEST(TrainDenoiser, ZeroEpochsLeavesModelUntouched) {
  const auto ds = noop::data::gen_shapes(2, 8, 0);
  diff::Denoiser<float> m(kSmall, 4), ref(kSmall, 4);
  const auto idx = noop::data::all_indices(ds);
  const auto curve = diff::train_denoiser(m, ds, idx, diff::make_schedule(), {.epochs = 0});
  EXPECT_TRUE(curve.empty());
  const auto a = m.params().items(), b = ref.params().items();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(nd::bitwise_equal(a[i].tensor, b[i].tensor)) << a[i].name;
  EXPECT_TRUE(m.frozen());
}

TEST(TrainDenoiser, OverfitsOneSample) {
  const auto ds = noop::data::gen_shapes(1, 8, 0);
  diff::Denoiser<float> m(kSmall, 5);
  // one image repeated so each step averages over 32 timestep/noise draws
  const std::vector<std::size_t> idx(32, 0);
  const auto curve = diff::train_denoiser(m, ds, idx, diff::make_schedule(), {.epochs = 400, .batch = 32, .lr = 3e-3});
  ASSERT_EQ(curve.size(), 400u);
  double tail = 0;
  for (std::size_t i = 390; i < 400; ++i) tail += curve[i] / 10;
  EXPECT_LT(tail, 0.1 * curve.front());
}

TEST(TrainDenoiser, Errors) {
  const auto ds = noop::data::gen_shapes(1, 8, 0);
  diff::Denoiser<float> m(kSmall, 5);
  EXPECT_THROW(diff::train_denoiser(m, ds, std::vector<std::size_t>{}, diff::make_schedule(), {}),
               std::invalid_argument);
  diff::Denoiser<float> three({.classes = 3, .channels = 1, .image_size = 8, .base = 8, .emb = 16}, 5);
  EXPECT_THROW(diff::train_denoiser(three, ds, std::vector<std::size_t>{0}, diff::make_schedule(), {}),
               std::invalid_argument);
}

TEST(TrainDenoiser, TrueClassDenoisesBetterThanPermutedClass) {
  const auto train = noop::data::gen_shapes(60, 16, 1);
  const auto test = noop::data::gen_shapes(20, 16, 2);
  diff::Denoiser<float> m({}, 6);
  const auto sched = diff::make_schedule();
  const auto idx = noop::data::all_indices(train);
  const auto curve = diff::train_denoiser(m, train, idx, sched, {.epochs = 8, .seed = 6});
  EXPECT_LT(curve.back(), curve.front());

  const auto all = noop::data::all_indices(test);
  const auto x0 = noop::data::to_tensor<float>(test, all);
  const auto labels = noop::data::labels_of(test, all);
  std::vector<std::size_t> permuted(labels.size()), ts(labels.size(), 500);
  for (std::size_t i = 0; i < labels.size(); ++i) permuted[i] = (labels[i] + 1) % 4;
  nd::Rng rng(7);
  const auto eps = rng.normal_tensor<float>(x0.shape());
  const auto xt = diff::diffuse_rows(x0, ts, eps, sched);
  nd::Graph<float> g;
  const double true_mse = nd::mse(g, m.predict(g, xt, labels, ts), eps).item();
  const double perm_mse = nd::mse(g, m.predict(g, xt, permuted, ts), eps).item();
  EXPECT_LT(true_mse, perm_mse);
}
