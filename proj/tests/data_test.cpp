#include <gtest/gtest.h>

#include <numeric>
#include <set>
#include <sstream>

#include "fedgela/data.hpp"

using namespace fedgela;

namespace {

Dataset small_mixture(int classes = 5, int per = 40, std::uint64_t seed = 1) {
  GaussianMixtureSpec s;
  s.classes = classes;
  s.input_dim = 8;
  s.n_per_class = per;
  s.seed = seed;
  return synth_gaussian_mixture(s);
}

PartitionSpec pcdd(int clients, int per, std::uint64_t seed = 3) {
  PartitionSpec p;
  p.scheme = PcddScheme{per};
  p.clients = clients;
  p.seed = seed;
  return p;
}

PartitionSpec dirichlet(int clients, double beta, std::uint64_t seed = 3, int min_size = 1) {
  PartitionSpec p;
  p.scheme = DirichletScheme{beta};
  p.clients = clients;
  p.seed = seed;
  p.min_size = min_size;
  return p;
}

void expect_disjoint_cover(const Dataset& ds, const std::vector<ClientShard>& shards) {
  std::vector<int> seen(static_cast<std::size_t>(ds.size()), 0);
  for (const auto& s : shards) {
    for (int i : s.indices) ++seen[static_cast<std::size_t>(i)];
    EXPECT_EQ(class_histogram(s, ds), s.counts);
    EXPECT_EQ(std::accumulate(s.counts.begin(), s.counts.end(), 0), s.n_k);
    EXPECT_EQ(s.train.size() + s.test.size(), s.indices.size());
  }
  for (int v : seen) EXPECT_EQ(v, 1);
}

}  // namespace

TEST(Synth, BalancedAndDeterministic) {
  const auto a = small_mixture();
  const auto b = small_mixture();
  EXPECT_EQ(a.size(), 200);
  EXPECT_EQ(label_counts(a.labels, 5), std::vector<int>(5, 40));
  EXPECT_EQ(a.features, b.features);
  EXPECT_NE(a.features, small_mixture(5, 40, 2).features);
}

TEST(Synth, ClassMeansAreSeparated) {
  GaussianMixtureSpec s;
  s.classes = 4;
  s.input_dim = 16;
  s.n_per_class = 2000;
  s.class_sep = 5.0;
  s.noise_sigma = 0.5;
  const auto ds = synth_gaussian_mixture(s);
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(16, 4);
  for (int i = 0; i < ds.size(); ++i) means.col(ds.labels[i]) += ds.features.row(i).transpose() / 2000.0;
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(means.col(c).norm(), 5.0, 0.1);
  EXPECT_NEAR(means.col(0).dot(means.col(1)), 0.0, 0.5);
}

TEST(Synth, RejectsBadSpec) {
  GaussianMixtureSpec s;
  s.noise_sigma = 0.0;
  EXPECT_THROW(synth_gaussian_mixture(s), Error);
  s = {};
  s.classes = 1;
  EXPECT_THROW(synth_gaussian_mixture(s), Error);
}

TEST(Csv, RoundTripIsBitExact) {
  const auto ds = small_mixture(3, 7);
  std::stringstream io;
  write_csv(ds, io);
  const auto back = read_csv(io);
  EXPECT_EQ(back.features, ds.features);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.classes, 3);
}

TEST(Csv, ParseErrorsNameTheLine) {
  std::istringstream bad("f0,f1,label\n1,2,0\n1,oops,1\n");
  try {
    read_csv(bad, "x.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "parse");
    EXPECT_NE(std::string(e.what()).find("x.csv:3"), std::string::npos);
  }
  std::istringstream short_row("f0,f1,label\n1,0\n");
  EXPECT_THROW(read_csv(short_row), Error);
  std::istringstream no_rows("f0,label\n");
  try {
    read_csv(no_rows);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "empty-dataset");
  }
}

TEST(Apportion, LargestRemainder) {
  const std::vector<double> p{0.5, 0.25, 0.25};
  EXPECT_EQ(detail::apportion(10, p), (std::vector<int>{5, 3, 2}));
  const std::vector<double> q{1.0 / 3, 1.0 / 3, 1.0 / 3};
  EXPECT_EQ(detail::apportion(10, q), (std::vector<int>{4, 3, 3}));
}

TEST(Shard, StratifiedSplit) {
  const auto ds = small_mixture(2, 10);
  std::vector<int> idx(20);
  std::iota(idx.begin(), idx.end(), 0);
  const auto s = make_shard(ds, idx, 0.2, 9);
  EXPECT_EQ(s.test.size(), 4u);
  EXPECT_EQ(label_counts(ds.labels_at(s.test), 2), (std::vector<int>{2, 2}));
  EXPECT_EQ(s.existing_classes, (std::vector<int>{0, 1}));
  // A single sample of a class stays in train.
  const auto one = make_shard(ds, {0}, 0.5, 9);
  EXPECT_EQ(one.train.size(), 1u);
  EXPECT_TRUE(one.test.empty());
}

TEST(Pcdd, EveryClientHasExactlyItsClasses) {
  const auto ds = small_mixture(10, 40);
  const auto shards = partition(ds, pcdd(10, 2));
  ASSERT_EQ(shards.size(), 10u);
  expect_disjoint_cover(ds, shards);
  std::set<int> covered;
  for (const auto& s : shards) {
    EXPECT_EQ(s.existing_classes.size(), 2u);
    covered.insert(s.existing_classes.begin(), s.existing_classes.end());
  }
  EXPECT_EQ(covered.size(), 10u);
}

TEST(Pcdd, PairsVaryAcrossClients) {
  const auto ds = small_mixture(10, 40);
  const auto shards = partition(ds, pcdd(10, 2, 1));
  std::set<std::vector<int>> pairs;
  for (const auto& s : shards) pairs.insert(s.existing_classes);
  EXPECT_GT(pairs.size(), 5u);
}

TEST(Pcdd, CoverageInfeasible) {
  const auto ds = small_mixture(10, 10);
  try {
    partition(ds, pcdd(3, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "coverage-infeasible");
  }
}

TEST(Dirichlet, CoversAndIsDeterministic) {
  const auto ds = small_mixture(5, 60);
  const auto a = partition(ds, dirichlet(6, 0.3));
  const auto b = partition(ds, dirichlet(6, 0.3));
  expect_disjoint_cover(ds, a);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].indices, b[k].indices);
}

TEST(Dirichlet, SmallBetaIsSkewed) {
  const auto ds = small_mixture(5, 200);
  const auto skew = partition(ds, dirichlet(5, 0.05));
  const auto flat = partition(ds, dirichlet(5, 1000.0));
  auto max_share = [](const std::vector<ClientShard>& s) {
    double worst = 0.0;
    for (const auto& c : s) {
      worst = std::max(worst, static_cast<double>(*std::max_element(c.counts.begin(), c.counts.end())) / c.n_k);
    }
    return worst;
  };
  EXPECT_GT(max_share(skew), 0.6);
  EXPECT_LT(max_share(flat), 0.3);
}

TEST(Dirichlet, InfeasibleMinSize) {
  const auto ds = small_mixture(2, 5);
  try {
    partition(ds, dirichlet(4, 0.5, 1, 10));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), "partition-infeasible");
  }
}

TEST(Heatmap, Layout) {
  const auto ds = small_mixture(3, 6);
  const auto shards = partition(ds, pcdd(3, 1));
  std::ostringstream o;
  write_partition_heatmap(shards, 3, o);
  std::istringstream in(o.str());
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "client,c0,c1,c2,n_k,existing_classes");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 3);
}
