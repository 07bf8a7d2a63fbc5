#include <cmath>
#include <functional>

#include <gtest/gtest.h>

#include "adabldm/autograd.hpp"
#include "adabldm/errors.hpp"
#include "adabldm/optim.hpp"

namespace adabldm::nn {
namespace {

using LossFn = std::function<Var(ParamSet&)>;

// Largest relative discrepancy between backprop and central differences.
double max_gradient_error(ParamSet& ps, const LossFn& loss) {
  ps.zero_grad();
  backward(loss(ps));
  double worst = 0.0;
  const double h = 1e-6;
  for (auto& p : ps.all()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      double up, down;
      {
        NoGradGuard guard;
        p.value[i] = saved + h;
        up = loss(ps)->value[0];
        p.value[i] = saved - h;
        down = loss(ps)->value[0];
      }
      p.value[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p.grad[i];
      const double err = std::abs(numeric - analytic) / std::max(1e-4, std::abs(numeric) + std::abs(analytic));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

Tensor random_target(const std::vector<int>& shape, std::uint64_t seed) {
  Rng rng(seed);
  return randn(shape, rng);
}

class GradCheck : public ::testing::Test {
 protected:
  Rng rng_{7};
  ParamSet ps_;
};

TEST_F(GradCheck, Elementwise) {
  auto a = ps_.add_uniform("a", {2, 3}, 1.0, rng_);
  auto b = ps_.add_uniform("b", {2, 3}, 1.0, rng_);
  const Tensor target = random_target({2, 3}, 1);
  EXPECT_LT(max_gradient_error(ps_,
                               [&](ParamSet& s) {
                                 Var x = leaf(s[a]), y = leaf(s[b]);
                                 Var z = add(mul(silu(x), sigmoid(y)), scale(sub(x, y), 0.3));
                                 return mean_squared_error(z, target);
                               }),
            1e-6);
}

TEST_F(GradCheck, Conv2dStridedAndPointwise) {
  auto x = ps_.add_uniform("x", {2, 3, 6, 6}, 1.0, rng_);
  auto w = ps_.add_uniform("w", {4, 3, 3, 3}, 0.5, rng_);
  auto b = ps_.add_uniform("b", {4}, 0.5, rng_);
  auto w1 = ps_.add_uniform("w1", {2, 4, 1, 1}, 0.5, rng_);
  auto b1 = ps_.add_uniform("b1", {2}, 0.5, rng_);
  const Tensor target = random_target({2, 2, 3, 3}, 2);
  EXPECT_LT(max_gradient_error(ps_,
                               [&](ParamSet& s) {
                                 Var h = conv2d(leaf(s[x]), leaf(s[w]), leaf(s[b]), 2, 1);
                                 return mean_squared_error(conv2d(h, leaf(s[w1]), leaf(s[b1]), 1, 0), target);
                               }),
            1e-6);
}

TEST_F(GradCheck, UpsampleNormAndChannelOffset) {
  auto x = ps_.add_uniform("x", {2, 4, 2, 2}, 1.0, rng_);
  auto g = ps_.add_uniform("g", {4}, 1.0, rng_);
  auto be = ps_.add_uniform("be", {4}, 1.0, rng_);
  auto v = ps_.add_uniform("v", {2, 4}, 1.0, rng_);
  const Tensor target = random_target({2, 4, 4, 4}, 3);
  EXPECT_LT(max_gradient_error(ps_,
                               [&](ParamSet& s) {
                                 Var h = group_norm(upsample_nearest2x(leaf(s[x])), leaf(s[g]), leaf(s[be]), 2);
                                 return mean_squared_error(add_channel(h, leaf(s[v])), target);
                               }),
            1e-5);
}

TEST_F(GradCheck, LinearAttentionAndSequences) {
  auto x = ps_.add_uniform("x", {2, 3, 2, 2}, 1.0, rng_);
  auto wq = ps_.add_uniform("wq", {3, 3}, 1.0, rng_);
  auto wk = ps_.add_uniform("wk", {3, 5}, 1.0, rng_);
  auto bk = ps_.add_uniform("bk", {3}, 1.0, rng_);
  auto ctx = ps_.add_uniform("ctx", {2, 2, 5}, 1.0, rng_);
  const Tensor target = random_target({2, 3, 2, 2}, 4);
  EXPECT_LT(max_gradient_error(ps_,
                               [&](ParamSet& s) {
                                 Var seq = to_sequence(leaf(s[x]));
                                 Var q = linear(seq, leaf(s[wq]), nullptr);
                                 Var k = linear(leaf(s[ctx]), leaf(s[wk]), leaf(s[bk]));
                                 Var o = attention(q, k, k);
                                 return mean_squared_error(from_sequence(o, 2, 2), target);
                               }),
            1e-6);
}

TEST_F(GradCheck, GatherStackReshapeWeightedSum) {
  auto table = ps_.add_uniform("table", {4, 3}, 1.0, rng_);
  auto other = ps_.add_uniform("other", {3}, 1.0, rng_);
  const Tensor target = random_target({3, 3}, 5);
  Tensor weight({3, 3});
  for (std::size_t i = 0; i < weight.size(); ++i) weight[i] = (i % 3) * 0.5;
  EXPECT_LT(max_gradient_error(ps_,
                               [&](ParamSet& s) {
                                 Var rows = gather_rows(leaf(s[table]), {2, 0, 2});
                                 Var st = stack({leaf(s[other]), reshape(gather_rows(leaf(s[table]), {1}), {3}),
                                                 leaf(s[other])});
                                 return weighted_squared_sum(add(rows, st), target, weight);
                               }),
            1e-6);
}

TEST(Autograd, NoGradBuildsNoGraph) {
  Parameter p{"p", Tensor({2}, 1.0), Tensor({2}), true};
  NoGradGuard guard;
  Var y = silu(leaf(p));
  EXPECT_FALSE(y->requires_grad);
  EXPECT_TRUE(y->parents.empty());
}

TEST(Autograd, FrozenParametersReceiveNoGradient) {
  Parameter p{"p", Tensor({2}, 1.0), Tensor({2}), false};
  Parameter q{"q", Tensor({2}, 2.0), Tensor({2}), true};
  backward(mean_squared_error(mul(leaf(p), leaf(q)), Tensor({2}, 0.0)));
  EXPECT_EQ(p.grad, Tensor({2}));
  EXPECT_NE(q.grad, Tensor({2}));
}

TEST(Autograd, ShapeMismatchThrows) {
  EXPECT_THROW(add(constant(Tensor({2})), constant(Tensor({3}))), ParameterError);
}

TEST(ParamSetTest, CopyIsDeepAndHashTracksValues) {
  Rng rng(3);
  ParamSet a;
  a.add_uniform("w", {3}, 1.0, rng);
  ParamSet b = a;
  EXPECT_EQ(a.hash(), b.hash());
  b[0].value[0] += 1.0;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(AdamWTest, MinimizesQuadratic) {
  ParamSet ps;
  ps.add("x", {3});
  ps[0].value = Tensor({3}, std::vector<double>{3.0, -2.0, 1.0});
  AdamW opt(trainable_params({&ps}), {.learning_rate = 0.05, .weight_decay = 0.0});
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    backward(mean_squared_error(leaf(ps[0]), Tensor({3}, 0.5)));
    opt.step();
  }
  for (double v : ps[0].value.values()) EXPECT_NEAR(v, 0.5, 1e-3);
}

TEST(AdamWTest, CosineScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(1.0, 0, 100), 1.0);
  EXPECT_NEAR(cosine_lr(1.0, 100, 100), 0.1, 1e-12);
}

}  // namespace
}  // namespace adabldm::nn
