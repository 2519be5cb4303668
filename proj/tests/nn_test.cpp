#include <gtest/gtest.h>

#include <cmath>

#include "fedgela/etf.hpp"
#include "fedgela/nn.hpp"

using namespace fedgela;

namespace {

Eigen::MatrixXd gaussian(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Naive per-row loss used as an independent reference.
double reference_ce(const Eigen::MatrixXd& z, const std::vector<int>& y, const std::vector<int>& allowed) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double denom = 0.0;
    for (int c : allowed) denom += std::exp(z(i, c));
    total += -z(i, y[static_cast<std::size_t>(i)]) + std::log(denom);
  }
  return total / static_cast<double>(z.rows());
}

}  // namespace

TEST(Forward, FeaturesLieOnSphere) {
  const auto p = init_backbone({5, 7, 4}, 1);
  const auto x = gaussian(9, 5, 2);
  for (double eh : {1.0, 4.0}) {
    const auto h = features(p, x, eh);
    for (Eigen::Index i = 0; i < h.rows(); ++i) EXPECT_NEAR(h.row(i).norm(), std::sqrt(eh), 1e-12);
  }
}

TEST(Forward, Errors) {
  auto p = init_backbone({3, 4}, 1);
  EXPECT_THROW(forward(p, gaussian(2, 5, 1), 1.0), Error);
  Eigen::MatrixXd x = gaussian(2, 3, 1);
  x(0, 0) = std::nan("");
  EXPECT_THROW(forward(p, x, 1.0), Error);
  p.weights[0].setZero();
  try {
    forward(p, gaussian(2, 3, 1), 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "numeric");
  }
}

TEST(Loss, ClosedForms) {
  const std::vector<int> zero{0};
  for (double t : {0.0, 0.7, 3.0}) {
    Eigen::MatrixXd z(1, 2);
    z << t, -t;
    EXPECT_NEAR(ce_loss(z, zero, ClassMask::full(2)), std::log1p(std::exp(-2.0 * t)), 1e-14);
  }
  const Eigen::MatrixXd flat = Eigen::MatrixXd::Constant(1, 6, 0.3);
  const std::vector<int> four{0, 2, 3, 5};
  EXPECT_NEAR(ce_loss(flat, zero, ClassMask::of(6, four)), std::log(4.0), 1e-14);
  EXPECT_NEAR(ce_loss(flat, zero, ClassMask::of(6, zero)), 0.0, 1e-15);
}

TEST(Loss, StableForHugeLogits) {
  Eigen::MatrixXd z(1, 3);
  z << 1000.0, 0.0, -1000.0;
  const std::vector<int> y{1};
  EXPECT_NEAR(ce_loss(z, y, ClassMask::full(3)), 1000.0, 1e-9);
}

TEST(Loss, MatchesNaiveReferenceWithMask) {
  const auto z = gaussian(6, 5, 3);
  const std::vector<int> y{0, 1, 3, 3, 1, 0};
  const std::vector<int> allowed{0, 1, 3};
  EXPECT_NEAR(ce_loss(z, y, ClassMask::of(5, allowed)), reference_ce(z, y, allowed), 1e-12);
}

TEST(Loss, MaskedEqualsMinusInfinityLogits) {
  auto z = gaussian(4, 5, 4);
  const std::vector<int> y{0, 2, 2, 0};
  const std::vector<int> allowed{0, 2};
  const double masked = ce_loss(z, y, ClassMask::of(5, allowed));
  for (int c : {1, 3, 4}) z.col(c).setConstant(-std::numeric_limits<double>::infinity());
  EXPECT_NEAR(ce_loss(z, y, ClassMask::full(5)), masked, 1e-14);
}

TEST(Loss, InvalidLabel) {
  const Eigen::MatrixXd z = Eigen::MatrixXd::Zero(1, 3);
  const std::vector<int> y{2};
  const std::vector<int> allowed{0, 1};
  try {
    ce_loss(z, y, ClassMask::of(3, allowed));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "invalid-label");
  }
}

TEST(Logits, EtfFeatureAlignedWithItsClass) {
  const auto etf = make_etf(6, 6, 1, 1.0);
  Eigen::MatrixXd h = etf.m.col(0).transpose();
  const auto z = logits(h, etf.weights(), nullptr);
  EXPECT_NEAR(z(0, 0), 1.0, 1e-12);
  for (int c = 1; c < 6; ++c) EXPECT_NEAR(z(0, c), -1.0 / 5.0, 1e-12);
  PhiVector phi{Eigen::VectorXd::LinSpaced(6, 0.0, 5.0)};
  const auto zs = logits(h, etf.weights(), &phi);
  for (int c = 0; c < 6; ++c) EXPECT_NEAR(zs(0, c), phi.phi(c) * z(0, c), 1e-12);
}

TEST(Backward, MatchesIndependentCentralDifferences) {
  ModelParams p;
  p.backbone = init_backbone({4, 6, 5, 3}, 8);
  p.head = init_head(3, 4, 9);
  const auto x = gaussian(7, 4, 10);
  const std::vector<int> y{0, 1, 2, 3, 1, 2, 0};
  Objective obj;
  obj.phi = PhiVector{Eigen::VectorXd{{0.5, 1.0, 2.0, 1.5}}};
  obj.mask = ClassMask::full(4);
  obj.feature_norm_sq = 2.0;
  ModelParams grad;
  objective_grad(p, x, y, obj, grad);
  auto ps = param_spans(p);
  const auto gs = param_spans(grad);
  for (std::size_t t = 0; t < ps.size(); ++t) {
    for (std::size_t i = 0; i < ps[t].size(); i += 3) {
      const double keep = ps[t][i];
      ps[t][i] = keep + 1e-6;
      const double up = objective_loss(p, x, y, obj);
      ps[t][i] = keep - 1e-6;
      const double down = objective_loss(p, x, y, obj);
      ps[t][i] = keep;
      const double numeric = (up - down) / 2e-6;
      EXPECT_NEAR(gs[t][i], numeric, 1e-6 + 1e-5 * std::abs(numeric)) << "tensor " << t << " index " << i;
    }
  }
}

TEST(Backward, StaleCacheIsRejected) {
  auto p = init_backbone({3, 3}, 1);
  const auto cache = forward(p, gaussian(2, 3, 1), 1.0);
  p.weights[0](0, 0) += 1.0;
  const std::vector<int> y{0, 1};
  const auto w = make_etf(3, 3, 1, 1.0).weights();
  try {
    backward(cache, p, y, w, false, nullptr, ClassMask::full(3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "cache-mismatch");
  }
}

TEST(GradCheck, DetectsBrokenGradient) {
  ModelParams p;
  p.backbone = init_backbone({4, 16, 3}, 1);
  const auto w = make_etf(3, 3, 2, 1.0).weights();
  Objective obj;
  obj.fixed_classifier = &w;
  obj.phi = PhiVector::ones(3);
  obj.mask = ClassMask::full(3);
  const auto x = gaussian(6, 4, 3);
  const std::vector<int> y{0, 1, 2, 0, 1, 2};
  EXPECT_LT(finite_diff_check(p, x, y, obj, 1e-5, 32, 4).max_rel_error, 1e-4);
  const auto broken = finite_diff_check(p, x, y, obj, 1e-5, 32, 4, [](ModelParams& g) {
    for (auto s : param_spans(g)) {
      for (double& v : s) v *= 1.01;
    }
  });
  EXPECT_GT(broken.max_rel_error, 1e-4);
}

TEST(Prox, PenaltyAndGradient) {
  ModelParams p;
  p.backbone = init_backbone({2, 2}, 1);
  ModelParams anchor = p;
  anchor.backbone.weights[0](0, 0) += 0.5;
  Objective obj;
  obj.prox_mu = 0.2;
  obj.prox_anchor = &anchor;
  EXPECT_NEAR(prox_penalty(p, obj), 0.5 * 0.2 * 0.25, 1e-15);
}

TEST(Sgd, TwoStepsWithMomentum) {
  ModelParams p;
  p.backbone = init_backbone({1, 1}, 1);
  p.backbone.weights[0](0, 0) = 1.0;
  ModelParams g = zeros_like(p);
  g.backbone.weights[0](0, 0) = 0.5;
  OptimizerState opt{0.1, 0.9, 0.0, std::nullopt};
  sgd_step(p, g, opt);
  sgd_step(p, g, opt);
  // Total displacement lr * g * (1 + (1 + 0.9)).
  EXPECT_NEAR(p.backbone.weights[0](0, 0), 1.0 - 0.1 * 0.5 * (1.0 + 1.9), 1e-15);
}

TEST(Sgd, WeightDecayOnly) {
  ModelParams p;
  p.backbone = init_backbone({1, 1}, 1);
  p.backbone.weights[0](0, 0) = 2.0;
  OptimizerState opt{0.5, 0.0, 0.1, std::nullopt};
  sgd_step(p, zeros_like(p), opt);
  EXPECT_NEAR(p.backbone.weights[0](0, 0), 2.0 - 0.5 * 0.1 * 2.0, 1e-15);
}

TEST(Params, SpansAndBitEquality) {
  ModelParams p;
  p.backbone = init_backbone({3, 4, 2}, 1);
  p.head = init_head(2, 5, 2);
  EXPECT_EQ(param_count(p), 3u * 4 + 4 + 4 * 2 + 2 + 2 * 5);
  ModelParams q = p;
  EXPECT_TRUE(bit_equal(p, q));
  param_spans(q)[1][0] = 1e-300;
  EXPECT_FALSE(bit_equal(p, q));
}

TEST(Lpm, ConvergesToEtfColumns) {
  const auto etf = make_etf(8, 4, 1, 1.0);
  std::vector<int> y;
  for (int c = 0; c < 4; ++c) y.insert(y.end(), 5, c);
  const auto h = lpm_feature_fit(etf, y, 1.0, 2000, 0.5, 2);
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    EXPECT_GT(h.row(i).dot(etf.m.col(y[i])) / h.row(i).norm(), 0.99);
  }
}
