#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "svil/sjm.hpp"

using namespace svil;
using namespace svil::sjm;

namespace {

Tensor rand_tensor(std::mt19937_64& gen, std::size_t rows, std::size_t cols, double scale = 1.0,
                   double shift = 0.0) {
  auto m = oracle::random_mat(gen, rows, cols, scale);
  for (auto& r : m)
    for (auto& v : r) v += shift;
  return oracle::to_tensor(m);
}

IdentityFactor factor_of(std::vector<double> beta, std::vector<bool> masked) {
  return {std::move(beta), std::move(masked)};
}

StyleMemory memory_of(const std::vector<StyleStats>& rows) {
  StyleMemory m(rows.size(), rows.front().mu.size(), 0.9);
  std::vector<std::vector<StyleStats>> per;
  for (const auto& r : rows) per.push_back({r});
  m.initialize(per);
  return m;
}

}  // namespace

TEST(StyleStats, ConstantMap) {
  const auto s = style_stats(Tensor(Shape{1, 4}, 3.0), 1e-5);
  EXPECT_DOUBLE_EQ(s.mu[0], 3.0);
  EXPECT_NEAR(s.sigma[0], std::sqrt(1e-5), 1e-15);
}

TEST(StyleStats, TwoPixels) {
  const auto s = style_stats(Tensor({1, 2}, {1, 3}), 1e-5);
  EXPECT_DOUBLE_EQ(s.mu[0], 2.0);
  EXPECT_NEAR(s.sigma[0], std::sqrt(1 + 1e-5), 1e-15);
}

TEST(StyleStats, ShapeAndOracle) {
  std::mt19937_64 gen(1);
  const auto t = rand_tensor(gen, 5, 9, 2.0, 1.0);
  const auto s = style_stats(t, 1e-5);
  const auto o = oracle::style_stats(oracle::to_mat(t), 1e-5);
  ASSERT_EQ(s.mu.size(), 5u);
  ASSERT_EQ(s.sigma.size(), 5u);
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_NEAR(s.mu[c], o.mu[c], 1e-12);
    EXPECT_NEAR(s.sigma[c], o.sigma[c], 1e-12);
  }
}

TEST(StyleMemory, InitMeans) {
  StyleMemory m(2, 1, 0.9);
  m.initialize({{{{1.0}, {2.0}}, {{3.0}, {4.0}}}, {{{5.0}, {0.5}}}});
  EXPECT_DOUBLE_EQ(m.mu(0)[0], 2.0);
  EXPECT_DOUBLE_EQ(m.sigma(0)[0], 3.0);
  EXPECT_DOUBLE_EQ(m.mu(1)[0], 5.0);
  EXPECT_DOUBLE_EQ(m.sigma(1)[0], 0.5);
  EXPECT_TRUE(m.initialized());
}

TEST(StyleMemory, InitRejectsEmptyIdentity) {
  StyleMemory m(2, 1, 0.9);
  EXPECT_THROW(m.initialize({{{{1.0}, {2.0}}}, {}}), std::invalid_argument);
}

TEST(StyleMemory, UpdateExamples) {
  for (double m : {1.0, 0.0, 0.5}) {
    StyleMemory mem(2, 1, m);
    mem.initialize({{{{2.0}, {1.0}}}, {{{7.0}, {1.0}}}});
    mem.update({{0, {{{3.0}, {2.0}}, {{5.0}, {4.0}}}}});
    const double expect = m == 1.0 ? 2.0 : m == 0.0 ? 4.0 : 3.0;
    EXPECT_DOUBLE_EQ(mem.mu(0)[0], expect) << "m=" << m;
    EXPECT_DOUBLE_EQ(mem.mu(1)[0], 7.0);
  }
}

TEST(StyleMemory, Convexity) {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const double m = u(gen);
    StyleMemory mem(3, 4, m);
    std::vector<std::vector<StyleStats>> init(3);
    for (auto& v : init) v.push_back(style_stats(rand_tensor(gen, 4, 6), 1e-5));
    mem.initialize(init);
    const Tensor mu0 = mem.mu_bank(), s0 = mem.sigma_bank();
    const StyleStats fresh = style_stats(rand_tensor(gen, 4, 6, 3.0), 1e-5);
    mem.update({{1, {fresh}}});
    for (std::size_t c = 0; c < 4; ++c) {
      const double lo = std::min(mu0[4 + c], fresh.mu[c]), hi = std::max(mu0[4 + c], fresh.mu[c]);
      EXPECT_GE(mem.mu(1)[c], lo - 1e-15);
      EXPECT_LE(mem.mu(1)[c], hi + 1e-15);
      EXPECT_GT(mem.sigma(1)[c], 0.0);
      EXPECT_EQ(mem.mu(0)[c], mu0[c]);
      EXPECT_EQ(mem.sigma(2)[c], s0[8 + c]);
    }
  }
}

TEST(Similarity, Examples) {
  const auto s0 = similarity_from_weights(Tensor({2, 2}, {1, 0, 0, 1}));
  for (double v : s0.values()) EXPECT_EQ(v, 0.0);
  const auto s1 = similarity_from_weights(Tensor({2, 2}, {0.3, 0.4, 0.3, 0.4}));
  EXPECT_DOUBLE_EQ(s1[1], 1.0);
  EXPECT_EQ(s1[0], 0.0);
  const auto s2 = similarity_from_weights(Tensor({2, 2}, {1, 0, 1, 1}));
  EXPECT_NEAR(s2[1], 1 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(similarity_from_weights(Tensor({2, 2}, {1, 0, 0, 0})), std::invalid_argument);
}

TEST(Similarity, RandomMatchesOracleAndSymmetric) {
  std::mt19937_64 gen(2);
  const auto w = rand_tensor(gen, 6, 5);
  const auto s = similarity_from_weights(w);
  const auto wm = oracle::to_mat(w);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_EQ(s[i * 6 + j], s[j * 6 + i]);
      if (i == j)
        EXPECT_EQ(s[i * 6 + j], 0.0);
      else
        EXPECT_NEAR(s[i * 6 + j], oracle::cosine(wm[i], wm[j]), 1e-12);
    }
}

TEST(SimilarityMemory, InitAndUpdate) {
  SimilarityMemory mem(4);
  EXPECT_EQ(mem.at(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(mem.at(0, 1), 0.25);
  Tensor s(Shape{4, 4}, 0.5);
  mem.update(s, 0.9);
  EXPECT_NEAR(mem.at(2, 1), 0.275, 1e-15);
  EXPECT_EQ(mem.at(2, 2), 0.0);
  const Tensor before = mem.matrix();
  mem.update(s, 1.0);
  EXPECT_EQ(mem.matrix(), before);
  mem.update(s, 0.0);
  EXPECT_EQ(mem.at(1, 3), 0.5);
  EXPECT_EQ(mem.at(3, 3), 0.0);
}

TEST(Mmd, Examples) {
  std::mt19937_64 gen(3);
  const auto a = rand_tensor(gen, 5, 3);
  EXPECT_EQ(mmd2(a, a), 0.0);
  const Tensor x({1, 2}, {0, 1}), y({1, 2}, {2, -1});
  const RbfKernel k{0.3};
  EXPECT_NEAR(mmd2(x, y, k), 2 - 2 * std::exp(-0.3 * 8), 1e-14);
}

TEST(Mmd, MatchesOracleAndPseudoMetric) {
  std::mt19937_64 gen(5);
  std::uniform_int_distribution<int> n(1, 6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = rand_tensor(gen, n(gen), 4);
    const auto b = rand_tensor(gen, n(gen), 4, 1.5, 0.5);
    const double ab = mmd2(a, b), ba = mmd2(b, a);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-12);
    EXPECT_EQ(mmd2(a, a), 0.0);
    const double gamma = oracle::median_gamma(oracle::to_mat(a), oracle::to_mat(b));
    EXPECT_NEAR(median_heuristic(a, b).gamma, gamma, 1e-12 * gamma);
    EXPECT_NEAR(ab, oracle::mmd2(oracle::to_mat(a), oracle::to_mat(b), gamma), 1e-12);
  }
}

TEST(DomainDistance, DirectWriteAndDecay) {
  std::mt19937_64 gen(6);
  const auto a = rand_tensor(gen, 4, 3), b = rand_tensor(gen, 4, 3, 1.0, 1.0);
  DomainDistanceMemory d(2);
  d.update({{0, a}, {1, b}}, 0.0);
  EXPECT_NEAR(d.at(0, 1), mmd2(a, b), 1e-14);
  EXPECT_EQ(d.at(0, 0), 0.0);

  const double before = d.at(0, 1);
  d.update({{0, a}, {1, a}}, 0.9);
  EXPECT_NEAR(d.at(0, 1), 0.9 * before, 1e-14);
}

TEST(DomainDistance, ThreeDomainsMatchPairwiseOracle) {
  std::mt19937_64 gen(7);
  std::map<int, Tensor> sets;
  std::vector<oracle::Mat> mats;
  for (int k = 0; k < 3; ++k) {
    sets[k] = rand_tensor(gen, 5, 3, 1.0, k * 0.7);
    mats.push_back(oracle::to_mat(sets[k]));
  }
  DomainDistanceMemory d(3);
  d.update(sets, 0.0);
  for (int s = 0; s < 3; ++s)
    for (int t = 0; t < 3; ++t) {
      const double want = s == t ? 0.0 : oracle::mmd2(mats[s], mats[t], oracle::median_gamma(mats[s], mats[t]));
      EXPECT_NEAR(d.at(s, t), want, 1e-12) << s << "," << t;
    }
}

TEST(DomainDistance, AbsentDomainUntouched) {
  std::mt19937_64 gen(8);
  DomainDistanceMemory d(3);
  std::map<int, Tensor> all = {{0, rand_tensor(gen, 3, 2)}, {1, rand_tensor(gen, 3, 2, 1, 1)}, {2, rand_tensor(gen, 3, 2, 1, 2)}};
  d.update(all, 0.5);
  const Tensor before = d.matrix();
  d.update({{0, all[0]}, {1, all[2]}}, 0.5);
  EXPECT_EQ(d.at(0, 2), before[2]);
  EXPECT_EQ(d.at(2, 1), before[7]);
  EXPECT_NE(d.at(0, 1), before[1]);
  for (double v : d.matrix().values()) EXPECT_GE(v, 0.0);
}

TEST(Beta, Examples) {
  SimilarityMemory s(3);
  s.matrix() = Tensor({3, 3}, {0, 0.2, 0.4, 0.2, 0, 0.1, 0.4, 0.1, 0});
  DomainDistanceMemory d(2);
  const std::vector<int> dom = {0, 1, 1};

  auto f = compute_beta(0, s, d, dom);
  EXPECT_TRUE(f.masked[0]);
  EXPECT_DOUBLE_EQ(f.beta[1], 0.2);
  EXPECT_DOUBLE_EQ(f.beta[2], 0.4);

  d.matrix() = Tensor({2, 2}, {0, 0.1, 0.1, 0});
  f = compute_beta(0, s, d, dom);
  EXPECT_DOUBLE_EQ(f.beta[1], 0.3);
  EXPECT_DOUBLE_EQ(f.beta[2], 0.5);
  EXPECT_THROW(compute_beta(3, s, d, dom), std::out_of_range);
}

TEST(Beta, CrossDomainGetsMoreWeight) {
  SimilarityMemory s(4);
  DomainDistanceMemory d(2);
  d.matrix() = Tensor({2, 2}, {0, 0.3, 0.3, 0});
  const std::vector<int> dom = {0, 0, 0, 1};
  const auto f = compute_beta(0, s, d, dom);
  EXPECT_EQ(f.beta[1], f.beta[2]);
  EXPECT_GT(f.beta[3], f.beta[1]);
  const auto off = compute_beta(0, s, d, dom, false);
  EXPECT_EQ(off.beta[3], off.beta[1]);
}

TEST(Weight, Examples) {
  const auto u = id_weight(factor_of({0.3, 0.3, 0.3, 0.3, 9}, {false, false, false, false, true}), WeightMode::kSoft);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(u[i], 0.25, 1e-15);
  EXPECT_EQ(u[4], 0.0);
  const auto s = id_weight(factor_of({1, 0}, {false, false}), WeightMode::kSoft);
  EXPECT_NEAR(s[0], 0.7310585786300049, 1e-12);
  EXPECT_NEAR(s[1], 0.2689414213699951, 1e-12);
  const auto h = id_weight(factor_of({0.2, 0.9, 0.5}, {false, false, false}), WeightMode::kHard);
  EXPECT_EQ(h, (std::vector<double>{0, 1, 0}));
  const auto tie = id_weight(factor_of({0.5, 0.9, 0.9}, {false, false, false}), WeightMode::kHard);
  EXPECT_EQ(tie, (std::vector<double>{0, 1, 0}));
  EXPECT_THROW(id_weight(factor_of({1, 2}, {true, true}), WeightMode::kSoft), std::invalid_argument);
}

TEST(Weight, SelfMaskedEvenWhenLargest) {
  const auto w = id_weight(factor_of({5, 0.1, 0.2}, {true, false, false}), WeightMode::kHard);
  EXPECT_EQ(w, (std::vector<double>{0, 0, 1}));
}

TEST(Weight, SimplexAndShiftInvariance) {
  std::mt19937_64 gen(9);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> beta(7);
    for (auto& b : beta) b = n(gen);
    std::vector<bool> masked(7, false);
    masked[trial % 7] = true;
    for (auto mode : {WeightMode::kSoft, WeightMode::kHard}) {
      const auto a = id_weight(factor_of(beta, masked), mode);
      EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 1.0, 1e-12);
      for (double v : a) EXPECT_GE(v, 0.0);
      EXPECT_EQ(a[trial % 7], 0.0);
      auto shifted = beta;
      for (auto& b : shifted) b += 2.5;
      const auto b = id_weight(factor_of(shifted, masked), mode);
      for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    }
    const auto soft = id_weight(factor_of(beta, masked), WeightMode::kSoft);
    std::vector<double> z;
    for (std::size_t i = 0; i < 7; ++i)
      if (!masked[i]) z.push_back(beta[i]);
    const auto ref = oracle::softmax(z);
    for (std::size_t i = 0, k = 0; i < 7; ++i)
      if (!masked[i]) {
        EXPECT_NEAR(soft[i], ref[k++], 1e-12);
      }
  }
}

TEST(Jitter, OwnStatsIsIdentity) {
  std::mt19937_64 gen(10);
  const auto f = rand_tensor(gen, 3, 8, 2.0, 1.0);
  const auto own = style_stats(f, 1e-5);
  const auto mem = memory_of({own, style_stats(rand_tensor(gen, 3, 8), 1e-5)});
  const double alpha[] = {1.0, 0.0};
  const auto out = jitter(f, alpha, mem, 1e-5);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(out[i], f[i], 1e-9);
}

TEST(Jitter, HalfHalfMix) {
  std::mt19937_64 gen(11);
  const auto f = rand_tensor(gen, 2, 50);
  const auto mem = memory_of({{{0, 0}, {1, 1}}, {{2, 2}, {3, 3}}});
  const double alpha[] = {0.5, 0.5};
  const auto target = synthesize_style(alpha, mem);
  EXPECT_DOUBLE_EQ(target.mu[0], 1.0);
  EXPECT_DOUBLE_EQ(target.sigma[1], 2.0);
  const auto s = style_stats(jitter(f, alpha, mem, 1e-5), 1e-5);
  const auto raw = oracle::style_stats(oracle::to_mat(f), 0.0);
  for (int c = 0; c < 2; ++c) {
    EXPECT_NEAR(s.mu[c], 1.0, 1e-9);
    // The eps inside sigma(F) shrinks the output spread slightly.
    const double v = raw.sigma[c] * raw.sigma[c];
    EXPECT_NEAR(s.sigma[c], std::sqrt(4.0 * v / (v + 1e-5) + 1e-5), 1e-12);
    EXPECT_NEAR(s.sigma[c], 2.0, 1e-4);
  }
}

TEST(Jitter, ConstantChannel) {
  const auto mem = memory_of({{{4}, {2}}});
  const double alpha[] = {1.0};
  const auto out = jitter(Tensor(Shape{1, 5}, 7.0), alpha, mem, 1e-5);
  for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 4.0);
}

TEST(Jitter, ContentPreservationAndStats) {
  std::mt19937_64 gen(12);
  std::uniform_real_distribution<double> u(0.05, 1);
  for (int trial = 0; trial < 30; ++trial) {
    const auto f = rand_tensor(gen, 4, 12, 1.5, -0.5);
    std::vector<StyleStats> rows;
    for (int j = 0; j < 3; ++j) rows.push_back(style_stats(rand_tensor(gen, 4, 12, 2.0, j), 1e-5));
    const auto mem = memory_of(rows);
    std::vector<double> alpha = {u(gen), u(gen), u(gen)};
    const double tot = alpha[0] + alpha[1] + alpha[2];
    for (auto& a : alpha) a /= tot;
    const auto out = jitter(f, alpha, mem, 1e-5);
    const auto target = synthesize_style(alpha, mem);
    const auto so = oracle::style_stats(oracle::to_mat(out), 0.0);
    const auto fm = oracle::to_mat(f), om = oracle::to_mat(out);
    const auto sf = oracle::style_stats(fm, 0.0);
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_NEAR(so.mu[c], target.mu[c], 1e-9);
      EXPECT_NEAR(so.sigma[c], target.sigma[c], 1e-4);
      std::vector<std::size_t> ia(12), ib(12);
      std::iota(ia.begin(), ia.end(), 0);
      std::iota(ib.begin(), ib.end(), 0);
      std::sort(ia.begin(), ia.end(), [&](auto x, auto y) { return fm[c][x] < fm[c][y]; });
      std::sort(ib.begin(), ib.end(), [&](auto x, auto y) { return om[c][x] < om[c][y]; });
      EXPECT_EQ(ia, ib);
      for (std::size_t p = 0; p < 12; ++p)
        EXPECT_NEAR((om[c][p] - so.mu[c]) / so.sigma[c], (fm[c][p] - sf.mu[c]) / sf.sigma[c], 1e-4);
    }
  }
}

TEST(Jitter, RoundTripWithPlantedStats) {
  std::mt19937_64 gen(13);
  const auto f = rand_tensor(gen, 3, 16, 1.3, 0.4);
  const auto own = style_stats(f, 1e-5);
  const auto mem = memory_of({own, style_stats(rand_tensor(gen, 3, 16, 3.0, -1.0), 1e-5)});
  const double to_other[] = {0.0, 1.0}, back[] = {1.0, 0.0};
  const auto there = jitter(f, to_other, mem, 1e-5);
  const auto again = jitter(there, back, mem, 1e-5);
  // Exact only up to the eps floor: the spread comes back scaled by
  // s_o / sqrt(s_o^2 v / (v + eps) + eps), off by about eps/2 (1/v - 1/s_o^2).
  const auto raw = oracle::style_stats(oracle::to_mat(f), 0.0);
  const double eps = 1e-5;
  for (std::size_t c = 0; c < 3; ++c) {
    const double v = raw.sigma[c] * raw.sigma[c], so = mem.sigma(1)[c];
    const double k = so / std::sqrt(so * so * v / (v + eps) + eps);
    const double bound = 0.5 * eps * std::abs(1.0 / v - 1.0 / (so * so)) * 1.01;
    for (std::size_t p = 0; p < 16; ++p) {
      const double x = f[c * 16 + p], d = x - raw.mu[c];
      EXPECT_NEAR(again[c * 16 + p], raw.mu[c] + d * k, 1e-12);
      EXPECT_LE(std::abs(again[c * 16 + p] - x), bound * std::abs(d) + 1e-12);
    }
  }
}

TEST(Snapshot, MemoriesRoundTrip) {
  std::mt19937_64 gen(14);
  std::vector<StyleStats> rows;
  for (int j = 0; j < 3; ++j) rows.push_back(style_stats(rand_tensor(gen, 2, 5), 1e-5));
  const auto style = memory_of(rows);
  SimilarityMemory sim(3);
  sim.update(similarity_from_weights(rand_tensor(gen, 3, 4)), 0.5);
  DomainDistanceMemory dist(2);
  dist.update({{0, rand_tensor(gen, 3, 2)}, {1, rand_tensor(gen, 3, 2, 1, 1)}}, 0.2);
  const auto stem = std::filesystem::temp_directory_path() / "svil_test_mem";
  save_memories(stem, style, sim, dist);
  StyleMemory s2;
  SimilarityMemory m2;
  DomainDistanceMemory d2;
  load_memories(stem, s2, m2, d2);
  EXPECT_EQ(s2.mu_bank(), style.mu_bank());
  EXPECT_EQ(s2.sigma_bank(), style.sigma_bank());
  EXPECT_EQ(s2.momentum(), style.momentum());
  EXPECT_EQ(m2.matrix(), sim.matrix());
  EXPECT_EQ(d2.matrix(), dist.matrix());
}
