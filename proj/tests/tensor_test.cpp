#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mdn/kernels.hpp"
#include "mdn/ops.hpp"
#include "mdn/optim.hpp"
#include "test_util.hpp"

using mdn::Tensor;
using mdn::testing::grad_check;
using mdn::testing::random_tensor;
using mdn::testing::weighted_sum;

namespace {

constexpr double kTol = 1e-4;

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor<float>({2, 0}, {}), mdn::ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, {1, 2, 3}), mdn::ShapeError);
  EXPECT_EQ(Tensor<float>::scalar(3.f).item(), 3.f);
}

TEST(Matmul, IdentityAndHandValues) {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> m({2, 2}, {1, 2, 3, 4});
  auto r = mdn::matmul(eye, m);
  EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{1, 2, 3, 4}));
  auto s = mdn::matmul(Tensor<double>({1, 2}, {1, 2}), Tensor<double>({2, 1}, {3, 4}));
  EXPECT_EQ(s.item(), 11.0);
  EXPECT_THROW(mdn::matmul(m, Tensor<double>({3, 1}, {1, 2, 3})), mdn::ShapeError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
  auto r = grad_check([&] { return weighted_sum(mdn::matmul(a, b)); }, {a, b});
  EXPECT_LT(r.max_rel_err, kTol);
  EXPECT_EQ(r.checked, 35u + 21u);
}

TEST(Matmul, TransposedGradient) {
  std::mt19937_64 rng(2);
  auto a = random_tensor({4, 6}, rng), b = random_tensor({5, 6}, rng);
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::matmul_nt(a, b)); }, {a, b}).max_rel_err, kTol);
}

TEST(Kernels, RowsIndependentOfBatchComposition) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-1, 1);
  const std::size_t m = 13, k = 77, n = 301;
  std::vector<float> a(m * k), b(k * n), full(m * n), one(n);
  for (auto& x : a) x = u(rng);
  for (auto& x : b) x = u(rng);
  mdn::kernels::gemm_nn(m, n, k, a.data(), b.data(), full.data(), false);
  for (std::size_t r = 0; r < m; ++r) {
    mdn::kernels::gemm_nn(1, n, k, a.data() + r * k, b.data(), one.data(), false);
    for (std::size_t c = 0; c < n; ++c) ASSERT_EQ(one[c], full[r * n + c]);
  }
  std::vector<float> bt(n * k), full_nt(m * n);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + i] = b[i * n + j];
  mdn::kernels::gemm_nt(m, n, k, a.data(), bt.data(), full_nt.data(), false);
  for (std::size_t r = 0; r < m; ++r) {
    mdn::kernels::gemm_nt(1, n, k, a.data() + r * k, bt.data(), one.data(), false);
    for (std::size_t c = 0; c < n; ++c) {
      ASSERT_EQ(one[c], full_nt[r * n + c]);
      ASSERT_NEAR(one[c], full[r * n + c], 1e-4);
    }
  }
}

TEST(Softmax, Examples) {
  auto s = mdn::softmax(Tensor<double>({3}, {0, 0, 0}), 0);
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
  auto big = mdn::softmax(Tensor<float>({2}, {1000.f, 1000.f}), 0);
  EXPECT_FLOAT_EQ(big.at(0), 0.5f);
  EXPECT_FLOAT_EQ(big.at(1), 0.5f);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({6, 9}, rng, false, -30, 30);
  for (std::size_t axis : {0u, 1u}) {
    auto s = mdn::softmax(x, axis);
    const std::size_t outer = axis == 1 ? 6 : 9, inner = axis == 1 ? 9 : 6;
    for (std::size_t o = 0; o < outer; ++o) {
      double t = 0;
      for (std::size_t i = 0; i < inner; ++i) {
        const double v = axis == 1 ? s.at(o, i) : s.at(i, o);
        EXPECT_GE(v, 0.0);
        t += v;
      }
      EXPECT_NEAR(t, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, Gradient) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 5}, rng);
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::softmax(x, 1)); }, {x}).max_rel_err, kTol);
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::softmax(x, 0)); }, {x}).max_rel_err, kTol);
  auto v = random_tensor({7}, rng);
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::softmax(v, 0)); }, {v}).max_rel_err, kTol);
}

TEST(LayerNorm, Examples) {
  auto one = Tensor<double>::full({3}, 1.0), zero = Tensor<double>::zeros({3});
  auto c = mdn::layer_norm(Tensor<double>({1, 3}, {5, 5, 5}), one, zero);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
  auto g2 = Tensor<double>::full({2}, 1.0), b2 = Tensor<double>::zeros({2});
  auto n = mdn::layer_norm(Tensor<double>({1, 2}, {1, -1}), g2, b2, 0.0);
  EXPECT_NEAR(n.at(0), 1.0, 1e-12);
  EXPECT_NEAR(n.at(1), -1.0, 1e-12);
}

TEST(LayerNorm, NormalizesAndHasCorrectGradient) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({4, 6}, rng, true, -3, 3);
  auto g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  auto y = mdn::layer_norm(x, Tensor<double>::full({6}, 1.0), Tensor<double>::zeros({6}));
  for (std::size_t r = 0; r < 4; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < 6; ++c) mu += y.at(r, c) / 6;
    for (std::size_t c = 0; c < 6; ++c) var += (y.at(r, c) - mu) * (y.at(r, c) - mu) / 6;
    EXPECT_NEAR(mu, 0.0, 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::layer_norm(x, g, b)); }, {x, g, b}).max_rel_err, kTol);
}

TEST(Ops, ElementwiseGradients) {
  std::mt19937_64 rng(7);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), bias = random_tensor({4}, rng);
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::add(a, b)); }, {a, b}).max_rel_err, kTol);
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::mul(a, b)); }, {a, b}).max_rel_err, kTol);
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::scale(a, 2.5)); }, {a}).max_rel_err, kTol);
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::add_bias(a, bias)); }, {a, bias}).max_rel_err, kTol);
  EXPECT_LT(grad_check([&] { return mdn::mean(mdn::mul(a, a)); }, {a}).max_rel_err, kTol);
  EXPECT_LT(grad_check([&] { return weighted_sum(a.reshape({4, 3})); }, {a}).max_rel_err, kTol);
}

TEST(Ops, ReluGradientAwayFromKink) {
  std::mt19937_64 rng(8);
  auto a = random_tensor({5, 5}, rng);
  for (auto& v : a.mutable_data()) v = v >= 0 ? v + 0.1 : v - 0.1;
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::relu(a)); }, {a}).max_rel_err, kTol);
}

TEST(Ops, EmbeddingGradientAndRangeCheck) {
  std::mt19937_64 rng(9);
  auto table = random_tensor({6, 3}, rng);
  std::vector<int> ids{1, 4, 1, 0};
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::embedding(table, std::span<const int>(ids))); }, {table})
                .max_rel_err,
            kTol);
  std::vector<int> bad{6};
  EXPECT_THROW(mdn::embedding(table, std::span<const int>(bad)), mdn::DataError);
}

TEST(Ops, DropoutGradientWithFixedMask) {
  std::mt19937_64 rng(10);
  auto a = random_tensor({4, 4}, rng);
  EXPECT_LT(grad_check(
                [&] {
                  std::mt19937_64 r(123);
                  return weighted_sum(mdn::dropout(a, 0.3, r));
                },
                {a})
                .max_rel_err,
            kTol);
  std::size_t masks = 0;
  auto same = mdn::dropout(a, 0.0, rng, &masks);
  EXPECT_EQ(masks, 0u);
  EXPECT_EQ(same.node(), a.node());
}

TEST(Attention, SinglePositionReturnsValueRow) {
  Tensor<double> q({1, 2}, {0.3, -0.7}), k({1, 2}, {2, 1}), v({1, 2}, {5, -4});
  std::vector<mdn::AttentionSegment> seg{{0, 1, 0, 1}};
  auto o = mdn::scaled_dot_attention(q, k, v, seg, 1, 2, false);
  EXPECT_DOUBLE_EQ(o.at(0), 5.0);
  EXPECT_DOUBLE_EQ(o.at(1), -4.0);
}

TEST(Attention, TwoPositionHandComputation) {
  Tensor<double> q({1, 2}, {1, 0}), k({2, 2}, {2, 0, 0, 0}), v({2, 2}, {1, 0, 0, 1});
  std::vector<mdn::AttentionSegment> seg{{0, 1, 0, 2}};
  auto o = mdn::scaled_dot_attention(q, k, v, seg, 1, 2, false);
  const double s0 = 2 / std::sqrt(2.0);
  const double p0 = std::exp(s0) / (std::exp(s0) + 1.0);
  EXPECT_NEAR(o.at(0), p0, 1e-12);
  EXPECT_NEAR(o.at(1), 1 - p0, 1e-12);
}

TEST(Attention, CausalMaskIgnoresFuture) {
  std::mt19937_64 rng(11);
  auto q = random_tensor({5, 4}, rng, false), k = random_tensor({5, 4}, rng, false), v = random_tensor({5, 4}, rng, false);
  std::vector<mdn::AttentionSegment> seg{{0, 5, 0, 5}};
  auto before = mdn::scaled_dot_attention(q, k, v, seg, 2, 2, true);
  for (std::size_t c = 0; c < 4; ++c) {
    k.mutable_data()[4 * 4 + c] += 3.0;
    v.mutable_data()[4 * 4 + c] -= 2.0;
    k.mutable_data()[3 * 4 + c] += 1.0;
  }
  auto after = mdn::scaled_dot_attention(q, k, v, seg, 2, 2, true);
  for (std::size_t i = 0; i < 3 * 4; ++i) EXPECT_EQ(before.at(i), after.at(i));
  bool changed = false;
  for (std::size_t i = 3 * 4; i < 5 * 4; ++i) changed = changed || before.at(i) != after.at(i);
  EXPECT_TRUE(changed);
}

TEST(Attention, Gradient) {
  std::mt19937_64 rng(12);
  auto q = random_tensor({5, 6}, rng), k = random_tensor({7, 6}, rng), v = random_tensor({7, 6}, rng);
  std::vector<mdn::AttentionSegment> cross{{0, 2, 0, 4}, {2, 3, 4, 3}};
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::scaled_dot_attention(q, k, v, cross, 3, 2, false)); },
                       {q, k, v})
                .max_rel_err,
            kTol);
  auto ks = random_tensor({5, 6}, rng), vs = random_tensor({5, 6}, rng);
  std::vector<mdn::AttentionSegment> self{{0, 2, 0, 2}, {2, 3, 2, 3}};
  EXPECT_LT(grad_check([&] { return weighted_sum(mdn::scaled_dot_attention(q, ks, vs, self, 2, 3, true)); },
                       {q, ks, vs})
                .max_rel_err,
            kTol);
  std::vector<mdn::AttentionSegment> bad{{0, 5, 0, 9}};
  EXPECT_THROW(mdn::scaled_dot_attention(q, k, v, bad, 3, 2, false), mdn::ShapeError);
}

TEST(Graph, FanOutAccumulatesAndNodesVisitedOnce) {
  Tensor<double> x({1}, {3.0}, true);
  auto y = mdn::mul(x, x);          // x^2
  auto z = mdn::add(y, mdn::mul(y, x));  // x^2 + x^3
  const auto visited = z.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 3.0 + 3 * 9.0);
  EXPECT_EQ(visited, 3u);
}

TEST(Graph, NoGradGuardRecordsNothing) {
  Tensor<double> x({1}, {2.0}, true);
  mdn::NoGradGuard g;
  auto y = mdn::mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Ops, Deterministic) {
  std::mt19937_64 r1(13), r2(13);
  auto a = random_tensor({8, 8}, r1, false), b = random_tensor({8, 8}, r2, false);
  auto x = mdn::layer_norm(mdn::matmul(a, a), Tensor<double>::full({8}, 1.0), Tensor<double>::zeros({8}));
  auto y = mdn::layer_norm(mdn::matmul(b, b), Tensor<double>::full({8}, 1.0), Tensor<double>::zeros({8}));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.at(i), y.at(i));
}

TEST(Adam, ZeroGradientLeavesParamsAndDecaysMoments) {
  mdn::AdamHyper hp;
  std::vector<double> p{1.0, -2.0}, g{0.0, 0.0}, m{0.0, 0.0}, v{0.0, 0.0};
  mdn::adam_step<double>(p, g, m, v, 1, hp);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
  std::vector<double> m2{0.5, 0.5}, v2{0.25, 0.25};
  mdn::adam_step<double>(p, g, m2, v2, 2, hp);
  EXPECT_NEAR(m2[0], 0.45, 1e-15);
  EXPECT_NEAR(v2[0], 0.245, 1e-15);
}

TEST(Adam, OneStepMatchesHandFormula) {
  std::vector<double> p{0.5}, g{0.2}, m{0.1}, v{0.01};
  mdn::AdamHyper hp{0.01, 0.9, 0.98, 1e-8};
  mdn::adam_step<double>(p, g, m, v, 3, hp);
  const double m1 = 0.9 * 0.1 + 0.1 * 0.2, v1 = 0.98 * 0.01 + 0.02 * 0.04;
  const double mh = m1 / (1 - std::pow(0.9, 3)), vh = v1 / (1 - std::pow(0.98, 3));
  EXPECT_NEAR(p[0], 0.5 - 0.01 * mh / (std::sqrt(vh) + 1e-8), 1e-12);
}

TEST(Adam, StepCountOnlyAffectsBiasCorrection) {
  std::vector<double> p1{0.0}, p2{0.0}, g{1.0}, m1{0}, v1{0}, m2{0}, v2{0};
  mdn::AdamHyper hp{0.1, 0.9, 0.98, 0.0};
  mdn::adam_step<double>(p1, g, m1, v1, 1, hp);
  mdn::adam_step<double>(p2, g, m2, v2, 10, hp);
  EXPECT_EQ(m1[0], m2[0]);
  EXPECT_EQ(v1[0], v2[0]);
  const double c1 = (1 - 0.9), c10 = (1 - std::pow(0.9, 10));
  const double s1 = std::sqrt(1 - 0.98), s10 = std::sqrt(1 - std::pow(0.98, 10));
  EXPECT_NEAR(p1[0], -0.1 * (0.1 / c1) / (std::sqrt(0.02) / s1), 1e-12);
  EXPECT_NEAR(p2[0], -0.1 * (0.1 / c10) / (std::sqrt(0.02) / s10), 1e-12);
}

}  // namespace
