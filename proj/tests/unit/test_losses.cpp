#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "svil/grad_check.hpp"
#include "svil/losses.hpp"

using namespace svil;
using namespace svil::losses;

namespace {

Tensor rand_tensor(std::mt19937_64& gen, std::size_t rows, std::size_t cols, double scale = 1.0) {
  return oracle::to_tensor(oracle::random_mat(gen, rows, cols, scale));
}

double ce_value(const Tensor& f, const std::vector<int>& labels, const Tensor& w, double tau) {
  ad::Graph g;
  return cosine_ce(g.constant(f), labels, g.constant(w), g.constant(Tensor::scalar(tau))).value()[0];
}

double triplet_value(const Tensor& f, const std::vector<int>& labels, double margin = kDefaultMargin) {
  ad::Graph g;
  return triplet_batch_hard(g.constant(f), labels, margin).value()[0];
}

Tensor slice(const Tensor& t, std::size_t begin, std::size_t end) {
  std::vector<double> v(t.values().begin() + begin * t.dim(1), t.values().begin() + end * t.dim(1));
  return Tensor({end - begin, t.dim(1)}, std::move(v));
}

}  // namespace

TEST(CosineCe, AlignedTwoClasses) {
  EXPECT_NEAR(ce_value(Tensor({1, 2}, {2, 0}), {0}, Tensor({2, 2}, {1, 0, 0, 1}), 1.0),
              -std::log(std::exp(1.0) / (std::exp(1.0) + 1)), 1e-12);
}

TEST(CosineCe, EquidistantIsLogN) {
  // Feature orthogonal to every class row.
  EXPECT_NEAR(ce_value(Tensor({1, 4}, {0, 0, 0, 1}), {1}, Tensor({3, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0}), 0.3),
              std::log(3.0), 1e-12);
}

TEST(CosineCe, ScaleInvariantAndMatchesOracle) {
  std::mt19937_64 gen(1);
  const auto f = rand_tensor(gen, 5, 4), w = rand_tensor(gen, 3, 4);
  const std::vector<int> labels = {0, 2, 1, 1, 0};
  Tensor f10 = f;
  for (auto& v : f10.values()) v *= 10;
  const double a = ce_value(f, labels, w, 1.0 / 16);
  EXPECT_NEAR(a, ce_value(f10, labels, w, 1.0 / 16), 1e-12);
  EXPECT_NEAR(a, oracle::cosine_ce(oracle::to_mat(f), labels, oracle::to_mat(w), 1.0 / 16), 1e-10);
}

TEST(CosineCe, ZeroNormRejected) {
  EXPECT_THROW(ce_value(Tensor({1, 2}, {0, 0}), {0}, Tensor({2, 2}, {1, 0, 0, 1}), 1.0), std::invalid_argument);
  EXPECT_THROW(ce_value(Tensor({1, 2}, {1, 0}), {0}, Tensor({2, 2}, {0, 0, 0, 1}), 1.0), std::invalid_argument);
}

TEST(CosineCe, DecreasesAsTrueCosineRises) {
  const Tensor w({2, 2}, {1, 0, 0, 1});
  double prev = 1e9;
  for (double angle = 1.5; angle >= 0.0; angle -= 0.1) {
    const double v = ce_value(Tensor({1, 2}, {std::cos(angle), std::sin(angle)}), {0}, w, 0.5);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(Triplet, IdenticalFeaturesGiveMargin) {
  EXPECT_NEAR(triplet_value(Tensor(Shape{4, 3}, 1.0), {0, 0, 1, 1}), 0.3, 1e-5);
}

TEST(Triplet, SeparatedClustersGiveZero) {
  EXPECT_EQ(triplet_value(Tensor({4, 2}, {0, 0, 0.01, 0, 10, 10, 10, 10.01}), {0, 0, 1, 1}), 0.0);
}

TEST(Triplet, SingleIdentityRejected) {
  EXPECT_THROW(triplet_value(Tensor(Shape{3, 2}, 1.0), {0, 0, 0}), std::invalid_argument);
}

TEST(Triplet, MatchesExhaustiveOracle) {
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 30; ++trial) {
    const auto f = rand_tensor(gen, 4, 3, 0.2);
    const std::vector<int> labels = {0, 1, 0, 1};
    EXPECT_NEAR(triplet_value(f, labels), oracle::triplet(oracle::to_mat(f), labels, 0.3), 1e-10);
  }
  const auto f = rand_tensor(gen, 7, 5);
  const std::vector<int> labels = {3, 1, 3, 2, 2, 1, 9};
  EXPECT_NEAR(triplet_value(f, labels, 2.0), oracle::triplet(oracle::to_mat(f), labels, 2.0), 1e-10);
}

TEST(Agnostic, RecompositionAndSingleDomain) {
  std::mt19937_64 gen(3);
  const auto f = rand_tensor(gen, 6, 4), w = rand_tensor(gen, 3, 4);
  const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  ad::Graph g;
  const auto tau = g.constant(Tensor::scalar(0.2));
  const double agno = agnostic_loss(g.constant(f), labels, g.constant(w), tau).value()[0];
  const auto fm = oracle::to_mat(f);
  EXPECT_NEAR(agno, oracle::cosine_ce(fm, labels, oracle::to_mat(w), 0.2) + oracle::triplet(fm, labels, 0.3), 1e-10);
  EXPECT_GE(agno, 0.0);
  const DomainTerm term{g.constant(f), labels, g.constant(w)};
  EXPECT_NEAR(domain_loss(term, tau).value()[0], agno, 1e-12);
}

TEST(Specific, AveragesDomainTerms) {
  std::mt19937_64 gen(4);
  const auto f = rand_tensor(gen, 8, 4);
  const auto w0 = rand_tensor(gen, 2, 4), w1 = rand_tensor(gen, 2, 4);
  const std::vector<int> l = {0, 0, 1, 1};
  ad::Graph g;
  const auto tau = g.constant(Tensor::scalar(0.1));
  const auto f0 = slice(f, 0, 4), f1 = slice(f, 4, 8);
  const std::vector<DomainTerm> terms = {{g.constant(f0), l, g.constant(w0)}, {g.constant(f1), l, g.constant(w1)}};
  const double spec = specific_loss(terms, tau).value()[0];
  auto eq17 = [&](const Tensor& x, const Tensor& w) {
    const auto m = oracle::to_mat(x);
    return oracle::cosine_ce(m, l, oracle::to_mat(w), 0.1) + oracle::triplet(m, l, 0.3);
  };
  EXPECT_NEAR(spec, (eq17(f0, w0) + eq17(f1, w1)) / 2, 1e-10);
  EXPECT_NEAR(specific_loss(std::span(terms.data(), 1), tau).value()[0], eq17(f0, w0), 1e-10);

  const std::vector<DomainTerm> same = {terms[0], terms[0], terms[0]};
  EXPECT_NEAR(specific_loss(same, tau).value()[0], eq17(f0, w0), 1e-12);
  EXPECT_THROW(specific_loss(std::span<const DomainTerm>(), tau), std::invalid_argument);
}

TEST(Specific, InvariantToOtherDomainsPerturbation) {
  std::mt19937_64 gen(5);
  const auto f0 = rand_tensor(gen, 4, 3), f1 = rand_tensor(gen, 4, 3), w = rand_tensor(gen, 2, 3);
  const std::vector<int> l = {0, 1, 0, 1};
  ad::Graph g;
  const auto tau = g.constant(Tensor::scalar(0.5));
  const std::vector<DomainTerm> a = {{g.constant(f0), l, g.constant(w)}, {g.constant(f1), l, g.constant(w)}};
  Tensor moved = f1;
  for (auto& v : moved.values()) v += 5.0;
  const double base = domain_loss(a[0], tau).value()[0];
  const std::vector<DomainTerm> b = {{g.constant(f0), l, g.constant(w)}, {g.constant(moved), l, g.constant(w)}};
  EXPECT_EQ(domain_loss(b[0], tau).value()[0], base);
}

TEST(Total, Examples) {
  EXPECT_EQ(total_loss(2.0, 1.0, 1.0), 2.0);
  EXPECT_EQ(total_loss(2.0, 1.0, 0.0), 1.0);
  EXPECT_NEAR(total_loss(2.0, 1.0, 0.1), 1.1, 1e-15);
  EXPECT_THROW(total_loss(2.0, 1.0, 1.5), std::invalid_argument);
}

TEST(Breakdown, ComponentsRecompose) {
  std::mt19937_64 gen(6);
  const auto f = rand_tensor(gen, 8, 4), wg = rand_tensor(gen, 4, 4);
  const auto w0 = rand_tensor(gen, 2, 4), w1 = rand_tensor(gen, 2, 4);
  const std::vector<int> global = {0, 0, 1, 1, 2, 2, 3, 3}, local = {0, 0, 1, 1};
  ad::Graph g;
  const auto tau = g.constant(Tensor::scalar(1.0 / 16));
  const auto fv = g.constant(f);
  const std::size_t r0[] = {0, 1, 2, 3}, r1[] = {4, 5, 6, 7};
  const std::vector<DomainTerm> terms = {{ad::select_rows(fv, r0), local, g.constant(w0)},
                                         {ad::select_rows(fv, r1), local, g.constant(w1)}};
  ad::Var total;
  const auto b = compute_all(fv, global, g.constant(wg), terms, tau, 0.1, 0.3, &total);
  EXPECT_NEAR(b.total, 0.1 * b.agnostic + 0.9 * b.specific, 1e-12);
  EXPECT_NEAR(total.value()[0], b.total, 1e-12);
  EXPECT_NEAR(b.agnostic, b.agnostic_ce + b.agnostic_triplet, 1e-12);
  EXPECT_NEAR(b.specific, (b.specific_ce[0] + b.specific_triplet[0] + b.specific_ce[1] + b.specific_triplet[1]) / 2, 1e-12);
  for (double v : {b.agnostic_ce, b.agnostic_triplet, b.specific_ce[0], b.specific_triplet[1]}) EXPECT_GE(v, 0.0);
}

TEST(Gradients, AllLossesMatchFiniteDifferences) {
  std::mt19937_64 gen(7);
  const auto wg = rand_tensor(gen, 4, 5), w0 = rand_tensor(gen, 2, 5), w1 = rand_tensor(gen, 2, 5);
  const std::vector<int> global = {0, 0, 1, 1, 2, 2, 3, 3}, local = {0, 0, 1, 1};
  // Jitter is applied to rows 0 and 4 of a [N, C, P] map before pooling.
  const auto maps = oracle::random_mat(gen, 8, 5 * 3);
  Tensor x(Shape{8, 5, 3});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t k = 0; k < 15; ++k) x[i * 15 + k] = maps[i][k];
  const std::vector<ad::RestyleTarget> plan = {{0, {0.1, 0.2, -0.3, 1, 0}, {1, 0.5, 2, 0.7, 1.2}},
                                               {4, {0.4, 0, 0, -1, 0.5}, {0.3, 1, 1, 2, 0.9}}};
  for (bool with_jitter : {false, true}) {
    for (int which = 0; which < 3; ++which) {
      ad::ScalarFn fn = [&](ad::Graph& g, ad::Var head) {
        ad::Var m = g.constant(x);
        if (with_jitter) m = ad::restyle(m, plan, 1e-5);
        const auto f = ad::spatial_mean(m);
        const auto tau = g.constant(Tensor::scalar(0.25));
        const std::size_t r0[] = {0, 1, 2, 3}, r1[] = {4, 5, 6, 7};
        const std::vector<DomainTerm> terms = {{ad::select_rows(f, r0), local, head},
                                               {ad::select_rows(f, r1), local, g.constant(w1)}};
        if (which == 0) return agnostic_loss(f, global, g.constant(wg), tau);
        if (which == 1) return specific_loss(terms, tau);
        return total_loss(agnostic_loss(f, global, g.constant(wg), tau), specific_loss(terms, tau), 0.1);
      };
      if (which == 0) {
        // Differentiate with respect to the features for the agnostic term.
        fn = [&](ad::Graph& g, ad::Var feats) {
          ad::Var m = feats;
          if (with_jitter) m = ad::restyle(m, plan, 1e-5);
          return agnostic_loss(ad::spatial_mean(m), global, g.constant(wg), g.constant(Tensor::scalar(0.25)));
        };
        const auto r = ad::grad_check(fn, x, 1e-4);
        EXPECT_TRUE(r.passed) << "agnostic jitter=" << with_jitter << " " << r.summary();
      } else {
        const auto r = ad::grad_check(fn, w0, 1e-4);
        EXPECT_TRUE(r.passed) << "which=" << which << " jitter=" << with_jitter << " " << r.summary();
      }
    }
  }
}

TEST(Gradients, TemperatureAndFeatures) {
  std::mt19937_64 gen(8);
  const auto f = rand_tensor(gen, 6, 3), w = rand_tensor(gen, 3, 3);
  const std::vector<int> labels = {0, 1, 2, 0, 1, 2};
  ad::ScalarFn by_tau = [&](ad::Graph& g, ad::Var tau) { return cosine_ce(g.constant(f), labels, g.constant(w), tau); };
  auto r = ad::grad_check(by_tau, Tensor::scalar(0.3), 1e-4);
  EXPECT_TRUE(r.passed) << r.summary();
  ad::ScalarFn by_f = [&](ad::Graph& g, ad::Var x) {
    return add(cosine_ce(x, labels, g.constant(w), g.constant(Tensor::scalar(0.3))), triplet_batch_hard(x, labels));
  };
  r = ad::grad_check(by_f, f, 1e-4);
  EXPECT_TRUE(r.passed) << r.summary();
}
