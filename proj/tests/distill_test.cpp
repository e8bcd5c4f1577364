#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <random>

#include "mdn/distill.hpp"
#include "test_util.hpp"

using mdn::Tensor;

namespace {

double frob_error(const Tensor<double>& w, const Tensor<double>& a, const Tensor<double>& b) {
  auto r = mdn::matmul_nt(a, b);
  double e = 0;
  for (std::size_t i = 0; i < w.numel(); ++i) e += (w.at(i) - r.at(i)) * (w.at(i) - r.at(i));
  return e;
}

// Sum of the squared singular values beyond the first `rank`, from the
// eigenvalues of W^T W.
double eigen_tail(const Tensor<double>& w, std::size_t rank) {
  Eigen::MatrixXd m(w.dim(0), w.dim(1));
  for (std::size_t r = 0; r < w.dim(0); ++r)
    for (std::size_t c = 0; c < w.dim(1); ++c) m(r, c) = w.at(r, c);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.transpose() * m);
  auto ev = es.eigenvalues();  // ascending
  double tail = 0;
  for (Eigen::Index i = 0; i < ev.size() - static_cast<Eigen::Index>(rank); ++i) tail += std::max(0.0, ev(i));
  return tail;
}

TEST(RoundRobin, Mappings) {
  EXPECT_EQ(mdn::round_robin_mapping(4, 4), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(mdn::round_robin_mapping(6, 12), (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5}));
  auto m48 = mdn::round_robin_mapping(6, 48);
  for (std::size_t t = 0; t < 6; ++t) EXPECT_EQ(std::count(m48.begin(), m48.end(), t), 8);
  EXPECT_THROW(mdn::round_robin_mapping(0, 3), mdn::ShapeError);
}

TEST(RoundRobin, CopiesLayersAndRejectsShapeMismatch) {
  mdn::ModelConfig t;
  t.hidden = 8;
  t.ffn_dim = 16;
  t.enc_layers = 2;
  t.dec_layers = 1;
  t.enc_heads = 2;
  t.dec_heads = 2;
  t.dec_head_dim = 4;
  t.src_vocab = t.tgt_vocab = 12;
  auto s = t;
  s.enc_layers = 5;
  mdn::Transformer<float> teacher(t, 1), student(s, 2);
  mdn::round_robin_encoder_init(teacher, student);
  EXPECT_EQ(student.parameter("encoder.layers.4.ffn.in.weight").at(3),
            teacher.parameter("encoder.layers.0.ffn.in.weight").at(3));
  EXPECT_EQ(student.parameter("encoder.layers.3.self_attn.q.weight").at(5),
            teacher.parameter("encoder.layers.1.self_attn.q.weight").at(5));
  s.ffn_dim = 10;
  mdn::Transformer<float> wrong(s, 3);
  EXPECT_THROW(mdn::round_robin_encoder_init(teacher, wrong), mdn::ShapeError);
}

TEST(SelectHead, SlicesAndReproducesMaskedTeacher) {
  std::mt19937_64 rng(3);
  const std::size_t h = 16, heads = 4, d = 4;
  auto lin = [&](std::size_t in, std::size_t out) {
    return mdn::Linear<double>{mdn::testing::random_tensor({in, out}, rng, false),
                               mdn::testing::random_tensor({out}, rng, false)};
  };
  mdn::AttentionParams<double> t{lin(h, h), lin(h, h), lin(h, h), lin(h, h), heads, d};
  EXPECT_THROW(mdn::select_head(t, heads), mdn::ShapeError);
  for (std::size_t head : {0u, 2u}) {
    auto s = mdn::select_head(t, head);
    EXPECT_EQ(s.q.weight.dims(), (mdn::Shape{h, d}));
    EXPECT_EQ(s.o.weight.dims(), (mdn::Shape{d, h}));
    EXPECT_EQ(s.k.weight.at(1, 2), t.k.weight.at(1, head * d + 2));
    EXPECT_EQ(s.v.bias.at(3), t.v.bias.at(head * d + 3));

    // Teacher with every other head's output rows zeroed.
    auto masked = t;
    std::vector<double> wo(t.o.weight.data().begin(), t.o.weight.data().end());
    for (std::size_t r = 0; r < h; ++r)
      if (r / d != head) std::fill_n(wo.begin() + static_cast<std::ptrdiff_t>(r * h), h, 0.0);
    masked.o.weight = Tensor<double>({h, h}, wo);

    mdn::ModelConfig cfg;
    cfg.hidden = h;
    cfg.enc_heads = 4;
    cfg.src_vocab = cfg.tgt_vocab = 8;
    cfg.enc_layers = cfg.dec_layers = 0;
    cfg.dec_heads = 1;
    cfg.dec_head_dim = 4;
    mdn::Transformer<double> host(cfg, 0);
    auto x = mdn::testing::random_tensor({5, h}, rng, false), kv = mdn::testing::random_tensor({3, h}, rng, false);
    std::vector<mdn::AttentionSegment> seg{{0, 5, 0, 3}};
    auto want = host.attention(masked, x, kv, seg, false);
    auto got = host.attention(s, x, kv, seg, false);
    for (std::size_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(got.at(i), want.at(i), 1e-5);
  }
}

TEST(Svd, RankOneAndFullRankAreExact) {
  std::mt19937_64 rng(4);
  auto u = mdn::testing::random_tensor({7, 1}, rng, false), v = mdn::testing::random_tensor({5, 1}, rng, false);
  auto w = mdn::matmul_nt(u, v);
  auto [a, b] = mdn::svd_factorize_output(w, 1);
  EXPECT_LT(std::sqrt(frob_error(w, a, b)), 1e-6);
  auto full = mdn::testing::random_tensor({6, 9}, rng, false);
  auto [a2, b2] = mdn::svd_factorize_output(full, 6);
  EXPECT_LT(std::sqrt(frob_error(full, a2, b2)), 1e-9);
  EXPECT_THROW(mdn::svd_factorize_output(full, 7), mdn::ShapeError);
}

TEST(Svd, MatchesEigenOracleAndFactorShapes) {
  std::mt19937_64 rng(5);
  auto w = mdn::testing::random_tensor({8, 6}, rng, false);
  auto [a, b] = mdn::svd_factorize_output(w, 2);
  EXPECT_EQ(a.dims(), (mdn::Shape{8, 2}));
  EXPECT_EQ(b.dims(), (mdn::Shape{6, 2}));
  const double oracle = eigen_tail(w, 2);
  EXPECT_NEAR(frob_error(w, a, b) / oracle, 1.0, 1e-6);
  // B has orthonormal columns.
  auto btb = mdn::matmul(Tensor<double>({2, 6}, [&] {
                           std::vector<double> t(12);
                           for (std::size_t r = 0; r < 6; ++r)
                             for (std::size_t c = 0; c < 2; ++c) t[c * 6 + r] = b.at(r, c);
                           return t;
                         }()),
                         b);
  EXPECT_NEAR(btb.at(0, 0), 1.0, 1e-9);
  EXPECT_NEAR(btb.at(0, 1), 0.0, 1e-9);
}

TEST(Svd, BeatsRandomCompetitors) {
  std::mt19937_64 rng(6);
  auto w = mdn::testing::random_tensor({20, 10}, rng, false);
  auto [a, b] = mdn::svd_factorize_output(w, 3);
  const double best = frob_error(w, a, b);
  for (int i = 0; i < 100; ++i) {
    auto ra = mdn::testing::random_tensor({20, 3}, rng, false), rb = mdn::testing::random_tensor({10, 3}, rng, false);
    EXPECT_GT(frob_error(w, ra, rb), best);
  }
}

TEST(KdLoss, Examples) {
  Tensor<double> s({1, 3}, {1.0, 2.0, 0.5});
  std::vector<int> gold{1};
  mdn::DistillConfig c0{0.0, 1.0, std::nullopt, 0};
  EXPECT_NEAR(mdn::kd_loss(s, s, gold, c0).item(), 0.0, 1e-12);
  mdn::DistillConfig c1{1.0, 2.0, std::nullopt, 0};
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5));
  EXPECT_NEAR(mdn::kd_loss(s, s, gold, c1).item(), lse - 2.0, 1e-12);

  // Hand case: alpha 0.5, T 1, teacher logits (0, 0, log 2) -> p_t = (1/4, 1/4, 1/2).
  Tensor<double> t({1, 3}, {0.0, 0.0, std::log(2.0)});
  mdn::DistillConfig half{0.5, 1.0, std::nullopt, 0};
  const double ps[3] = {std::exp(1.0 - lse), std::exp(2.0 - lse), std::exp(0.5 - lse)};
  const double pt[3] = {0.25, 0.25, 0.5};
  double kl = 0;
  for (int i = 0; i < 3; ++i) kl += pt[i] * std::log(pt[i] / ps[i]);
  EXPECT_NEAR(mdn::kd_loss(s, t, gold, half).item(), 0.5 * (lse - 2.0) + 0.5 * kl, 1e-12);
}

TEST(KdLoss, GradientWithTemperature) {
  std::mt19937_64 rng(7);
  auto s = mdn::testing::random_tensor({4, 6}, rng, true, -3, 3);
  auto t = mdn::testing::random_tensor({4, 6}, rng, false, -3, 3);
  std::vector<int> gold{0, 5, 2, 2};
  mdn::DistillConfig c{0.3, 2.5, std::nullopt, 0};
  EXPECT_LT(mdn::testing::grad_check([&] { return mdn::kd_loss(s, t, gold, c); }, {s}).max_rel_err, 1e-4);
  EXPECT_FALSE(t.has_grad());
}

mdn::ModelConfig teacher_cfg() {
  mdn::ModelConfig c;
  c.hidden = 16;
  c.ffn_dim = 24;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.enc_heads = 4;
  c.dec_heads = 8;
  c.dec_head_dim = 2;
  c.src_vocab = 30;
  c.tgt_vocab = 30;
  return c;
}

TEST(WeightDistill, IdenticalGeometryReproducesTeacher) {
  mdn::Transformer<float> teacher(teacher_cfg(), 1);
  auto student = mdn::weight_distill(teacher, teacher_cfg(), {}, 99);
  std::vector<std::vector<int>> src{{4, 5, 6, 7}}, tgt{{1, 8, 9}};
  auto a = teacher.forward(src, tgt), b = student.forward(src, tgt);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
}

TEST(WeightDistill, MiniDecoderStudent) {
  mdn::Transformer<float> teacher(teacher_cfg(), 1);
  std::vector<float> before(teacher.parameter("output.weight").data().begin(),
                            teacher.parameter("output.weight").data().end());
  auto scfg = mdn::mini_decoder_training_setup(mdn::mini_decoder_structure(teacher_cfg(), 4));
  scfg.enc_layers = 5;
  mdn::WeightDistillReport rep;
  mdn::DistillConfig dc;
  dc.head_seed = 17;
  auto s1 = mdn::weight_distill(teacher, scfg, dc, 3, &rep);
  mdn::WeightDistillReport rep2;
  auto s2 = mdn::weight_distill(teacher, scfg, dc, 3, &rep2);
  EXPECT_EQ(rep.self_attn_heads, rep2.self_attn_heads);
  EXPECT_EQ(rep.cross_attn_heads, rep2.cross_attn_heads);
  ASSERT_EQ(rep.self_attn_heads.size(), 1u);
  EXPECT_TRUE(rep.output_svd);
  EXPECT_EQ(rep.encoder_mapping, (std::vector<std::size_t>{0, 1, 0, 1, 0}));
  const std::size_t head = rep.self_attn_heads[0];
  EXPECT_EQ(s1.parameter("decoder.layers.0.self_attn.q.weight").at(2, 1),
            teacher.parameter("decoder.layers.0.self_attn.q.weight").at(2, head * 2 + 1));
  std::vector<float> after(teacher.parameter("output.weight").data().begin(),
                           teacher.parameter("output.weight").data().end());
  EXPECT_EQ(before, after);
  dc.head_index = 9;
  EXPECT_THROW(mdn::weight_distill(teacher, scfg, dc, 3), mdn::ShapeError);
}

TEST(DistillConfig, Json) {
  mdn::DistillConfig c{0.25, 2.0, 1, 5};
  nlohmann::json j = c;
  EXPECT_EQ(j.get<mdn::DistillConfig>(), c);
  j["alpha"] = 1.5;
  EXPECT_THROW(j.get<mdn::DistillConfig>(), mdn::DataError);
}

}  // namespace
