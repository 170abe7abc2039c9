#include <gtest/gtest.h>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <numeric>

#include "epep/error.hpp"
#include "epep/evidential.hpp"
#include "epep/numerics.hpp"

using namespace epep;
namespace bm = boost::math;

namespace {

std::vector<double> random_logits(std::size_t k, Rng& rng) {
  std::vector<double> z(k);
  for (double& x : z) x = rng.normal(0.5, 3.0);
  return z;
}

LabelVector random_labels(std::size_t k, Rng& rng) {
  std::vector<double> y(k, 0.0);
  y[rng.below(k)] = 1.0;
  for (auto& v : y)
    if (rng.uniform() < 0.2) v = 1.0;
  return LabelVector(y);
}

double oracle_loss_eb(const std::vector<double>& alpha, const LabelVector& y) {
  const double s = std::accumulate(alpha.begin(), alpha.end(), 0.0);
  double out = 0;
  for (std::size_t j = 0; j < alpha.size(); ++j)
    out += y[j] * (bm::digamma(s) - bm::digamma(alpha[j]));
  return out;
}

double oracle_kl_uniform(const std::vector<double>& a) {
  const double s = std::accumulate(a.begin(), a.end(), 0.0);
  double out = bm::lgamma(s) - bm::lgamma(static_cast<double>(a.size()));
  for (double x : a) out += -bm::lgamma(x) + (x - 1) * (bm::digamma(x) - bm::digamma(s));
  return out;
}

}  // namespace

TEST(Evidential, ExactValues) {
  const auto y = LabelVector::one_hot(0, 2);
  const std::vector<double> zero{0.0, 0.0}, nine{9.0, 0.0};
  EXPECT_NEAR(loss_eb(evidence_from_logits(zero), y), 1.0, 1e-10);
  EXPECT_NEAR(loss_eb(evidence_from_logits(nine), y), 0.1, 1e-10);
  const std::vector<double> a21{2.0, 1.0}, ones{1.0, 1.0, 1.0, 1.0};
  EXPECT_NEAR(kl_to_uniform(a21), std::log(2.0) - 0.5, 1e-10);
  EXPECT_NEAR(kl_to_uniform(ones), 0.0, 1e-12);
}

TEST(Evidential, HeadQuantities) {
  const std::vector<double> logits{-3.0, 0.0, 4.0};
  const auto d = evidence_from_logits(logits);
  EXPECT_EQ(d.evidence, (std::vector<double>{0.0, 0.0, 4.0}));
  EXPECT_EQ(d.alpha, (std::vector<double>{1.0, 1.0, 5.0}));
  EXPECT_EQ(d.strength, 7.0);
  EXPECT_DOUBLE_EQ(d.uncertainty, 3.0 / 7.0);
  EXPECT_DOUBLE_EQ(d.probs[2], 5.0 / 7.0);
}

TEST(Evidential, UncertaintyAndProbabilityInvariants) {
  Rng rng(21);
  for (int t = 0; t < 500; ++t) {
    const auto k = 2 + rng.below(6);
    const auto d = evidence_from_logits(random_logits(k, rng));
    EXPECT_GT(d.uncertainty, 0.0);
    EXPECT_LE(d.uncertainty, 1.0);
    EXPECT_NEAR(std::accumulate(d.probs.begin(), d.probs.end(), 0.0), 1.0, 1e-12);
    // u = 1 exactly when there is no evidence at all.
    const bool no_evidence =
        std::all_of(d.evidence.begin(), d.evidence.end(), [](double e) { return e == 0; });
    EXPECT_EQ(d.uncertainty == 1.0, no_evidence);
  }
}

TEST(Evidential, LossesMatchBoostClosedForms) {
  Rng rng(22);
  for (int t = 0; t < 300; ++t) {
    const auto k = 2 + rng.below(6);
    const auto d = evidence_from_logits(random_logits(k, rng));
    const auto y = random_labels(k, rng);
    EXPECT_NEAR(loss_eb(d, y), oracle_loss_eb(d.alpha, y), 1e-11);
    const auto at = alpha_tilde(d, y);
    for (std::size_t j = 0; j < k; ++j) EXPECT_EQ(at[j], y[j] == 1.0 ? 1.0 : d.alpha[j]);
    const double kl = kl_to_uniform(at);
    EXPECT_NEAR(kl, oracle_kl_uniform(at), 1e-10 * std::max(1.0, kl));
    EXPECT_GE(kl, -1e-12);
    EXPECT_NEAR(loss_combined(d, y, 0.3), 0.7 * loss_eb(d, y) + 0.3 * kl, 1e-12);
  }
}

TEST(Evidential, LossEbDecreasesWithCorrectEvidence) {
  const auto y = LabelVector::one_hot(1, 3);
  double prev = 1e9;
  for (double e : {0.0, 0.5, 2.0, 10.0, 100.0}) {
    const std::vector<double> z{0.0, e, 0.0};
    const double l = loss_eb(evidence_from_logits(z), y);
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(Evidential, GradientsMatchCentralDifferences) {
  Rng rng(23);
  for (int t = 0; t < 200; ++t) {
    const auto k = 2 + rng.below(5);
    auto z = random_logits(k, rng);
    // Stay clear of the ReLU kink.
    for (double& x : z)
      if (std::abs(x) < 1e-3) x = 0.5;
    const auto y = random_labels(k, rng);
    const double lambda = rng.uniform(0.0, 1.0);
    const auto g = evidential_gradients(z, y, lambda);
    const ScalarFunction f = [&](std::span<const double> x) {
      return loss_combined(evidence_from_logits(x), y, lambda);
    };
    EXPECT_LT(relative_error(g, finite_diff_grad(f, z)), 1e-6) << "instance " << t;
  }
}

TEST(Evidential, ReluSubgradientIsZeroAtKink) {
  const std::vector<double> z{0.0, -1.0, 2.0};
  const auto g = evidential_gradients(z, LabelVector::one_hot(0, 3));
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_NE(g[2], 0.0);
}

TEST(CrossEntropy, ValuesAndGradients) {
  Rng rng(24);
  for (int t = 0; t < 200; ++t) {
    const auto k = 2 + rng.below(5);
    const auto z = random_logits(k, rng);
    const auto y = random_labels(k, rng);
    const auto p = softmax(z);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    const ScalarFunction f = [&](std::span<const double> x) { return cross_entropy(x, y); };
    EXPECT_LT(relative_error(cross_entropy_gradients(z, y), finite_diff_grad(f, z)), 1e-6);
  }
  const std::vector<double> huge{1000.0, -1000.0};
  EXPECT_NEAR(cross_entropy(huge, LabelVector::one_hot(0, 2)), 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(cross_entropy(huge, LabelVector::one_hot(1, 2))));
}

TEST(CrossEntropy, NormalizedEntropyBounds) {
  const std::vector<double> uniform{0.25, 0.25, 0.25, 0.25}, point{1.0, 0.0, 0.0, 0.0};
  EXPECT_NEAR(normalized_entropy(uniform), 1.0, 1e-15);
  EXPECT_EQ(normalized_entropy(point), 0.0);
}

TEST(LabelVector, Validation) {
  EXPECT_THROW(LabelVector({0.0, 0.0}), ConfigError);
  EXPECT_THROW(LabelVector({0.5, 1.0}), ConfigError);
  EXPECT_THROW(LabelVector::one_hot(3, 3), ConfigError);
  const std::vector<int> idx{0, 2};
  const auto y = LabelVector::from_indices(idx, 3);
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()),
            (std::vector<double>{1, 0, 1}));
}

TEST(Evidential, ShapeMismatchThrows) {
  const std::vector<double> z{1.0, 2.0};
  EXPECT_THROW(loss_eb(evidence_from_logits(z), LabelVector::one_hot(0, 3)), ShapeError);
}
