#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include "hmf/sgd.hpp"
#include "hmf/synthetic.hpp"
#include "test_util.hpp"

using namespace hmf;
using hmf::testing::TempDir;

namespace {

// Reference step written from the update rule directly, on copies.
std::pair<std::vector<Real>, std::vector<Real>> reference_step(std::vector<Real> p, std::vector<Real> q, Real r,
                                                               Real gamma, Real lp, Real lq) {
  Real dot = 0;
  for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * q[i];
  const Real e = r - dot;
  std::vector<Real> p2(p.size());
  std::vector<Real> q2(q.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p2[i] = p[i] + gamma * (e * q[i] - lp * p[i]);
    q2[i] = q[i] + gamma * (e * p[i] - lq * q[i]);
  }
  return {p2, q2};
}

// Loss of one entry: (r - p.q)^2 + lp |p|^2 + lq |q|^2.
Real entry_loss(const std::vector<Real>& p, const std::vector<Real>& q, Real r, Real lp, Real lq) {
  Real dot = 0;
  Real pp = 0;
  Real qq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    dot += p[i] * q[i];
    pp += p[i] * p[i];
    qq += q[i] * q[i];
  }
  return (r - dot) * (r - dot) + lp * pp + lq * qq;
}

}  // namespace

TEST(Predict, KnownVectorsGiveExactDot) {
  std::vector<Real> p{0.23, 2.32};
  std::vector<Real> q{1.33, 2.00};
  EXPECT_NEAR(predict(p, q), 4.9459, 1e-12);
}

TEST(Predict, LengthMismatchThrows) {
  std::vector<Real> p{1, 2, 3};
  std::vector<Real> q{1, 2};
  EXPECT_THROW(predict(p, q), Error);
}

TEST(InitModel, RangeShapeAndDeterminism) {
  Hyperparams hp;
  hp.k = 16;
  auto a = init_model(30, 20, hp, 4);
  auto b = init_model(30, 20, hp, 4);
  auto c = init_model(30, 20, hp, 5);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_EQ(a.p_data().size(), 30u * 16);
  EXPECT_EQ(a.q_data().size(), 20u * 16);
  for (auto x : a.p_data()) {
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 0.25);
  }
}

TEST(SgdUpdate, MatchesReferenceImplementation) {
  Hyperparams hp;
  hp.k = 5;
  hp.gamma = 0.03;
  hp.lambda_p = 0.07;
  hp.lambda_q = 0.02;
  auto f = init_model(3, 4, hp, 1);
  std::vector<Real> p(f.p(2).begin(), f.p(2).end());
  std::vector<Real> q(f.q(1).begin(), f.q(1).end());
  auto [p2, q2] = reference_step(p, q, 3.5, hp.gamma, hp.lambda_p, hp.lambda_q);
  auto trace = sgd_update(f, {2, 1, 3.5f}, hp);
  for (int i = 0; i < hp.k; ++i) {
    EXPECT_NEAR(f.p(2)[i], p2[i], 1e-15);
    EXPECT_NEAR(f.q(1)[i], q2[i], 1e-15);
  }
  EXPECT_NEAR(trace.e, 3.5 - std::inner_product(p.begin(), p.end(), q.begin(), 0.0), 1e-15);
  // Other rows and columns untouched.
  auto g = init_model(3, 4, hp, 1);
  EXPECT_TRUE(std::equal(f.p(0).begin(), f.p(0).end(), g.p(0).begin()));
  EXPECT_TRUE(std::equal(f.q(3).begin(), f.q(3).end(), g.q(3).begin()));
}

TEST(SgdUpdate, StepFollowsNegativeFiniteDifferenceGradient) {
  Hyperparams hp;
  hp.k = 4;
  hp.gamma = 0.01;
  hp.lambda_p = 0.05;
  hp.lambda_q = 0.05;
  auto f = init_model(1, 1, hp, 7);
  std::vector<Real> p(f.p(0).begin(), f.p(0).end());
  std::vector<Real> q(f.q(0).begin(), f.q(0).end());
  const Real r = 2.0;
  sgd_update(f, {0, 0, static_cast<float>(r)}, hp);
  const Real h = 1e-6;
  for (int i = 0; i < hp.k; ++i) {
    auto pp = p;
    auto pm = p;
    pp[i] += h;
    pm[i] -= h;
    // The update uses half the loss gradient: d/dp of (e^2 + lp p^2) is -2(e q - lp p).
    const Real grad = (entry_loss(pp, q, r, hp.lambda_p, hp.lambda_q) - entry_loss(pm, q, r, hp.lambda_p, hp.lambda_q)) /
                      (2 * h);
    EXPECT_NEAR(f.p(0)[i] - p[i], -hp.gamma * grad / 2, 1e-9);
  }
}

TEST(SgdUpdate, FixedPointWhenResidualAndRegularizationVanish) {
  Hyperparams hp;
  hp.k = 2;
  hp.lambda_p = 0;
  hp.lambda_q = 0;
  FactorMatrices f(1, 1, 2);
  f.p(0)[0] = 1;
  f.p(0)[1] = 2;
  f.q(0)[0] = 3;
  f.q(0)[1] = 0.5;
  auto before = f;
  auto trace = sgd_update(f, {0, 0, 4.0f}, hp);
  EXPECT_EQ(trace.e, 0.0);
  EXPECT_EQ(f, before);
}

TEST(SgdUpdate, OutOfRangeThrows) {
  Hyperparams hp;
  auto f = init_model(2, 2, hp, 1);
  EXPECT_THROW(sgd_update(f, {2, 0, 1.0f}, hp), Error);
}

TEST(VisitOrder, IsAPermutationAndSeeded) {
  for (std::size_t count : {0u, 1u, 63u, 64u, 65u, 1000u}) {
    std::vector<std::size_t> seen;
    for_each_in_visit_order(count, 3, [&](std::size_t i) { seen.push_back(i); });
    std::vector<std::size_t> sorted = seen;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> expected(count);
    std::iota(expected.begin(), expected.end(), 0);
    EXPECT_EQ(sorted, expected) << count;
  }
  EXPECT_EQ(visit_order(1000, 3), visit_order(1000, 3));
  EXPECT_NE(visit_order(1000, 3), visit_order(1000, 4));
}

TEST(BlockEpoch, ProcessesEveryTripleOnceAndMatchesSerialReplay) {
  auto data = make_synthetic({.m = 40, .n = 40, .rank = 3, .density = 0.2, .seed = 2});
  auto grid = build_grid(data.train, {0, 20, 40}, {0, 13, 40});
  Hyperparams hp;
  hp.k = 3;
  auto a = init_model(40, 40, hp, 1);
  auto b = a;
  BlockId block{1, 1, 0};
  EXPECT_EQ(block_epoch(a, grid, block, hp, 99), grid.block_nnz(1, 0));
  auto triples = grid.block_triples(block);
  for_each_in_visit_order(triples.size(), 99, [&](std::size_t i) { sgd_update(b, triples[i], hp); });
  EXPECT_EQ(a, b);
}

TEST(RegularizedLoss, MatchesEntrywiseSum) {
  auto data = make_synthetic({.m = 20, .n = 20, .rank = 2, .density = 0.3, .seed = 4});
  Hyperparams hp;
  hp.k = 2;
  auto f = init_model(20, 20, hp, 3);
  Real expected = 0;
  for (const auto& t : data.train.triples) {
    std::vector<Real> p(f.p(t.u).begin(), f.p(t.u).end());
    std::vector<Real> q(f.q(t.v).begin(), f.q(t.v).end());
    expected += entry_loss(p, q, t.r, 0.1, 0.2);
  }
  EXPECT_NEAR(regularized_loss(data.train, f, 0.1, 0.2), expected, 1e-9 * expected);
}

TEST(Rmse, TwoPassOracleAndSkipping) {
  auto data = make_synthetic({.m = 30, .n = 30, .rank = 2, .density = 0.3, .seed = 6});
  Hyperparams hp;
  hp.k = 2;
  auto f = init_model(30, 30, hp, 3);
  std::vector<Real> sq;
  for (const auto& t : data.train.triples) {
    const Real e = t.r - predict(f.p(t.u), f.q(t.v));
    sq.push_back(e * e);
  }
  const Real mean = std::accumulate(sq.begin(), sq.end(), 0.0) / static_cast<Real>(sq.size());
  auto got = rmse(data.train, f);
  EXPECT_NEAR(got.value, std::sqrt(mean), 1e-12);
  EXPECT_EQ(got.evaluated, data.train.nnz());

  auto with_unknown = data.train.triples;
  with_unknown.push_back({30, 0, 1.0f});
  auto skipped = rmse(with_unknown, f, 2);
  EXPECT_EQ(skipped.skipped, 3u);
  EXPECT_NEAR(skipped.value, got.value, 1e-12);

  std::vector<RatingTriple> none{{31, 31, 1.0f}};
  EXPECT_THROW(rmse(none, f), Error);
}

TEST(Rmse, PerfectFactorsGiveZero) {
  FactorMatrices f(1, 2, 1);
  f.p(0)[0] = 2;
  f.q(0)[0] = 1.5;
  f.q(1)[0] = -1;
  std::vector<RatingTriple> ts{{0, 0, 3.0f}, {0, 1, -2.0f}};
  EXPECT_EQ(rmse(ts, f).value, 0.0);
}

TEST(Factors, FileRoundTripIsLossless) {
  TempDir dir;
  Hyperparams hp;
  hp.k = 7;
  auto f = init_model(13, 9, hp, 5);
  f.p(3)[2] = -1e-300;
  f.q(8)[6] = 12345.678901234567;
  save_factors(dir.file("f.hmfp"), f);
  EXPECT_EQ(load_factors(dir.file("f.hmfp")), f);
  EXPECT_EQ(hmf::testing::slurp(dir.file("f.hmfp")).size(), 5 + 24 + (13 + 9) * 7 * 8u);
}

TEST(Factors, QIsWrittenRowMajorKByN) {
  TempDir dir;
  FactorMatrices f(1, 2, 2);
  f.q(0)[0] = 1;
  f.q(0)[1] = 2;
  f.q(1)[0] = 3;
  f.q(1)[1] = 4;
  save_factors(dir.file("f.hmfp"), f);
  auto bytes = hmf::testing::slurp(dir.file("f.hmfp"));
  std::vector<double> q(4);
  std::memcpy(q.data(), bytes.data() + 5 + 24 + 2 * 8, 32);
  EXPECT_EQ(q, (std::vector<double>{1, 3, 2, 4}));
}

TEST(Factors, RejectsForeignFile) {
  TempDir dir;
  dir.write("x", "HMF1xxxxxxxxxxxxxxxxxxxxxxxxxxxxx");
  EXPECT_THROW(load_factors(dir.file("x")), Error);
}

TEST(Hyperparams, Validation) {
  Hyperparams hp;
  hp.validate();
  hp.k = 0;
  EXPECT_THROW(hp.validate(), Error);
  hp = {};
  hp.gamma = 0;
  EXPECT_THROW(hp.validate(), Error);
  hp = {};
  hp.lambda_q = -1;
  EXPECT_THROW(hp.validate(), Error);
}
