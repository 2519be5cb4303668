#include <gtest/gtest.h>

#include <cmath>

#include "fedgela/etf.hpp"
#include "fedgela/metrics.hpp"

using namespace fedgela;

TEST(Predict, TiesGoToLowestIndex) {
  Eigen::MatrixXd z(2, 4);
  z << 1, 3, 3, 0,
       2, 2, 2, 2;
  EXPECT_EQ(argmax_masked(z, ClassMask::full(4)), (std::vector<int>{1, 0}));
  const std::vector<int> only{3};
  EXPECT_EQ(argmax_masked(z, ClassMask::of(4, only)), (std::vector<int>{3, 3}));
}

TEST(Predict, ScaleInvariant) {
  Rng rng(1);
  std::normal_distribution<double> n;
  Eigen::MatrixXd z(20, 6);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = n(rng);
  const std::vector<int> allowed{1, 2, 5};
  const auto mask = ClassMask::of(6, allowed);
  EXPECT_EQ(argmax_masked(z, mask), argmax_masked(z * 3.7, mask));
}

TEST(Predict, EtfAlignedFeatureIsItsClass) {
  const auto etf = make_etf(5, 5, 3, 2.0);
  const Eigen::MatrixXd w = etf.weights();
  Eigen::MatrixXd h = etf.m.transpose();  // row c is m_c
  std::vector<int> expect{0, 1, 2, 3, 4};
  EXPECT_EQ(argmax_masked(logits(h, w, nullptr), ClassMask::full(5)), expect);
}

TEST(Accuracy, Basics) {
  const std::vector<int> p{0, 1, 2, 2};
  const std::vector<int> y{0, 1, 1, 2};
  EXPECT_DOUBLE_EQ(accuracy(p, y), 0.75);
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), Error);
}

TEST(ClassMeans, AnglesOfKnownMeans) {
  Eigen::MatrixXd h(4, 2);
  h << 1, 0,
       1, 0,
       0, 1,
       0, 1;
  const std::vector<int> y{0, 0, 1, 1};
  EXPECT_NEAR(global_class_mean_angle(h, y, 2), 90.0, 1e-12);
  EXPECT_THROW(global_class_mean_angle(h, y, 3), Error);
  const std::vector<int> existing{0, 1};
  EXPECT_NEAR(*existing_class_mean_angle(h, y, 3, existing), 90.0, 1e-12);
  const std::vector<int> lonely{0, 2};
  EXPECT_FALSE(existing_class_mean_angle(h, y, 3, lonely).has_value());
}

TEST(ClassifierAngles, SplitsExistingAndMissing) {
  const auto etf = make_etf(6, 6, 1, 1.0);
  const std::vector<int> existing{1, 4};
  const auto a = classifier_angles(etf.m, existing);
  ASSERT_TRUE(a.existing && a.missing);
  EXPECT_NEAR(*a.existing, simplex_angle(6), 1e-9);
  EXPECT_NEAR(*a.missing, simplex_angle(6), 1e-9);
  const std::vector<int> all{0, 1, 2, 3, 4, 5};
  EXPECT_FALSE(classifier_angles(etf.m, all).missing.has_value());
}

TEST(Nc1, ZeroForCollapsedAndKnownOtherwise) {
  Eigen::MatrixXd h(4, 2);
  h << 1, 0,
       1, 0,
       0, 1,
       0, 3;
  const std::vector<int> y{0, 0, 1, 1};
  // Class 1 mean (0,2): deviations 1 and 1 -> total 2 over 4 samples.
  EXPECT_NEAR(nc1_variability(h, y), 0.5, 1e-15);
  h(3, 1) = 1;
  EXPECT_NEAR(nc1_variability(h, y), 0.0, 1e-15);
}

TEST(PersonalAccuracy, SkipsClientsWithoutTestData) {
  Dataset ds;
  ds.classes = 2;
  ds.features = Eigen::MatrixXd(4, 2);
  ds.features << 1, 0, 0, 1, 1, 0.1, 0.1, 1;
  ds.labels = {0, 1, 0, 1};
  ClientShard a = make_shard(ds, {0, 1, 2, 3}, 0.5, 1);
  ClientShard b = make_shard(ds, {0}, 0.5, 1);
  BackboneParams id;
  id.sizes = {2, 2};
  id.weights = {Eigen::MatrixXd::Identity(2, 2)};
  id.biases = {Eigen::VectorXd::Zero(2)};
  const Eigen::MatrixXd clf = Eigen::MatrixXd::Identity(2, 2);
  std::vector<Predictor> models(2, Predictor{&id, &clf, nullptr, ClassMask::full(2), 1.0});
  std::vector<ClientShard> shards{a, b};
  const auto r = personal_accuracy(models, shards, ds);
  EXPECT_EQ(r.evaluated, 1);
  EXPECT_DOUBLE_EQ(r.mean, 1.0);
  EXPECT_TRUE(std::isnan(r.per_client[1]));
}
