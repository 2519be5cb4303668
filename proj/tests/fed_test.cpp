#include <gtest/gtest.h>

#include <numeric>

#include "fedgela/fedgela.hpp"

using namespace fedgela;

namespace {

Dataset mixture(int classes, int per, std::uint64_t seed = 1, int dim = 8) {
  GaussianMixtureSpec s;
  s.classes = classes;
  s.input_dim = dim;
  s.n_per_class = per;
  s.class_sep = 3.0;
  s.seed = seed;
  return synth_gaussian_mixture(s);
}

FederationConfig small_config(AlgoKind algo, std::uint64_t seed = 5) {
  FederationConfig c;
  c.algo = algo;
  c.rounds = 3;
  c.hp.local_epochs = 2;
  c.hp.batch_size = 16;
  c.hidden = {12};
  c.finetune_epochs = 1;
  c.seed = seed;
  return c;
}

std::vector<ClientShard> pcdd_shards(const Dataset& ds, int clients, int per, std::uint64_t seed) {
  PartitionSpec p;
  p.scheme = PcddScheme{per};
  p.clients = clients;
  p.seed = seed;
  return partition(ds, p);
}

std::string log_text(const FederationResult& r) {
  std::ostringstream o;
  write_round_log(r.logs, o);
  return o.str();
}

}  // namespace

TEST(Phi, Examples) {
  const std::vector<int> uniform(10, 7);
  const auto ones = compute_phi(uniform, 70);
  for (int c = 0; c < 10; ++c) EXPECT_EQ(ones.phi(c), 1.0);

  std::vector<int> two(10, 0);
  two[2] = 30;
  two[7] = 10;
  const auto phi = compute_phi(two, 40);
  EXPECT_DOUBLE_EQ(phi.phi(2), 7.5);
  EXPECT_DOUBLE_EQ(phi.phi(7), 2.5);
  EXPECT_DOUBLE_EQ(phi.phi(0), 0.0);
  EXPECT_DOUBLE_EQ(phi.phi.sum(), 10.0);

  const auto g = compute_phi(two, 40, 0.5);
  EXPECT_DOUBLE_EQ(g.phi(2), 1.5);
  EXPECT_THROW(compute_phi(two, 41), Error);
}

TEST(Phi, AlternativeQ) {
  std::vector<int> counts{4, 0, 12};
  const auto s = alt_phi(counts, 16, QKind::Sqrt, 1.0);
  EXPECT_DOUBLE_EQ(s.phi(0), 0.5);
  EXPECT_DOUBLE_EQ(s.phi(1), 0.0);
  EXPECT_NEAR(s.phi(2), std::sqrt(0.75), 1e-15);
  const auto e = alt_phi(counts, 16, QKind::Exp, 1.0);
  EXPECT_NEAR(e.phi(0), std::exp(0.25), 1e-15);
  EXPECT_DOUBLE_EQ(e.phi(1), 0.0);
}

TEST(Phi, WeightedAverageIsOneOnBalancedData) {
  const auto ds = mixture(6, 30);
  for (std::uint64_t seed : {1, 2, 3}) {
    PartitionSpec p;
    p.scheme = DirichletScheme{0.3};
    p.clients = 5;
    p.seed = seed;
    const auto shards = partition(ds, p);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(6);
    for (const auto& s : shards) acc += (static_cast<double>(s.n_k) / ds.size()) * compute_phi(s.counts, s.n_k).phi;
    EXPECT_LT((acc.array() - 1.0).abs().maxCoeff(), 1e-9);
  }
}

TEST(Sampling, DistinctSortedDeterministic) {
  const auto a = sample_clients(20, 5, 3, 7);
  EXPECT_EQ(a.size(), 5u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::set<int>(a.begin(), a.end()).size(), 5u);
  EXPECT_EQ(a, sample_clients(20, 5, 3, 7));
  EXPECT_NE(a, sample_clients(20, 5, 3, 8));
  std::vector<int> all(4);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(sample_clients(4, 4, 1, 0), all);
  EXPECT_THROW(sample_clients(4, 5, 1, 0), Error);
  EXPECT_THROW(sample_clients(4, 0, 1, 0), Error);
}

TEST(Aggregate, WeightedMean) {
  ModelParams a;
  a.backbone = init_backbone({2, 2}, 1);
  ModelParams b = a;
  for (auto s : param_spans(a)) std::fill(s.begin(), s.end(), 1.0);
  for (auto s : param_spans(b)) std::fill(s.begin(), s.end(), 3.0);
  const std::vector<ModelParams> ups{a, b};
  const std::vector<double> w{0.25, 0.75};
  const auto m = aggregate(ups, w);
  for (auto s : param_spans(m)) {
    for (double v : s) EXPECT_DOUBLE_EQ(v, 2.5);
  }
  const std::vector<double> bad{0.5, 0.6};
  EXPECT_THROW(aggregate(ups, bad), Error);
  const std::vector<double> neg{1.5, -0.5};
  EXPECT_THROW(aggregate(ups, neg), Error);
  const std::vector<ModelParams> same{a, a};
  const std::vector<double> half{0.5, 0.5};
  EXPECT_TRUE(bit_equal(aggregate(same, half), a));
}

TEST(Reduction, FedGelaEqualsFedGeOnUniformClients) {
  const auto ds = mixture(4, 40);
  // Each client receives an equal share of every class.
  std::vector<std::vector<int>> parts(4);
  for (int i = 0; i < ds.size(); ++i) parts[static_cast<std::size_t>((i % 40) % 4)].push_back(i);
  std::vector<ClientShard> shards;
  for (auto& p : parts) shards.push_back(make_shard(ds, p, 0.2, 3));
  for (const auto& s : shards) ASSERT_EQ(s.counts, std::vector<int>(4, 10));
  const auto ge = run_federation(small_config(AlgoKind::FedGE), ds, shards);
  const auto gela = run_federation(small_config(AlgoKind::FedGELA), ds, shards);
  EXPECT_TRUE(bit_equal(ge.server.global, gela.server.global));
  std::string a = log_text(ge), b = log_text(gela);
  for (auto* s : {&a, &b}) {
    for (std::size_t p; (p = s->find("fedgela")) != std::string::npos;) s->replace(p, 7, "fedge");
  }
  EXPECT_EQ(a, b);
}

TEST(Reduction, FedProxWithZeroMuEqualsFedAvg) {
  const auto ds = mixture(4, 30);
  const auto shards = pcdd_shards(ds, 4, 2, 1);
  auto prox_cfg = small_config(AlgoKind::FedProx);
  prox_cfg.hp.prox_mu = 0.0;
  const auto avg = run_federation(small_config(AlgoKind::FedAvg), ds, shards);
  const auto prox = run_federation(prox_cfg, ds, shards);
  EXPECT_TRUE(bit_equal(avg.server.global, prox.server.global));
  ASSERT_EQ(avg.logs.size(), prox.logs.size());
  for (std::size_t i = 0; i < avg.logs.size(); ++i) {
    EXPECT_EQ(avg.logs[i].ga, prox.logs[i].ga);
    EXPECT_EQ(avg.logs[i].pa, prox.logs[i].pa);
  }
}

TEST(Reduction, SingleClientEqualsCentralizedTraining) {
  const auto ds = mixture(3, 20);
  std::vector<int> all(static_cast<std::size_t>(ds.size()));
  std::iota(all.begin(), all.end(), 0);
  const std::vector<ClientShard> shards{make_shard(ds, all, 0.2, 1)};
  auto cfg = small_config(AlgoKind::FedAvg);
  cfg.hp.momentum = 0.0;
  const auto fed = run_federation(cfg, ds, shards);

  ServerState s = init_server(cfg, ds.input_dim(), ds.classes);
  ModelParams p = s.global;
  Objective obj;
  obj.phi = PhiVector::ones(3);
  obj.mask = ClassMask::full(3);
  train_epochs(p, ds, shards[0].train, obj, cfg.hp, cfg.rounds * cfg.hp.local_epochs, cfg.seed, stream::kShuffle, 0, 0);
  EXPECT_TRUE(bit_equal(fed.server.global, p));
}

TEST(Reduction, OneRoundByHand) {
  // Two clients with four samples each, one local step per round.
  const auto ds = mixture(2, 4, 3, 4);
  const std::vector<ClientShard> shards{make_shard(ds, {0, 1, 4, 5}, 0.25, 1), make_shard(ds, {2, 3, 6, 7}, 0.25, 1)};
  FederationConfig cfg = small_config(AlgoKind::FedGE);
  cfg.rounds = 1;
  cfg.hp.local_epochs = 1;
  cfg.hp.batch_size = 4;
  cfg.hidden = {16};
  const auto fed = run_federation(cfg, ds, shards);

  const ServerState s = init_server(cfg, ds.input_dim(), ds.classes);
  Objective obj;
  obj.fixed_classifier = &s.etf_weights;
  obj.phi = PhiVector::ones(2);
  obj.mask = ClassMask::full(2);
  std::vector<ModelParams> locals;
  for (const auto& sh : shards) {
    ModelParams p = s.global;
    ModelParams g;
    objective_grad(p, ds.rows(sh.train), ds.labels_at(sh.train), obj, g);  // batch order does not change a full batch
    OptimizerState opt{cfg.hp.lr, cfg.hp.momentum, cfg.hp.weight_decay, std::nullopt};
    sgd_step(p, g, opt);
    locals.push_back(p);
  }
  const auto a = param_spans(fed.server.global);
  const auto b0 = param_spans(locals[0]);
  const auto b1 = param_spans(locals[1]);
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (std::size_t i = 0; i < a[t].size(); ++i) EXPECT_NEAR(a[t][i], 0.5 * b0[t][i] + 0.5 * b1[t][i], 1e-14);
  }
}

TEST(Federation, DeterministicAndParallelSafe) {
  const auto ds = mixture(4, 30);
  const auto shards = pcdd_shards(ds, 4, 2, 2);
  auto cfg = small_config(AlgoKind::FedGELA);
  const auto a = run_federation(cfg, ds, shards);
  const auto b = run_federation(cfg, ds, shards);
  cfg.parallel = true;
  const auto c = run_federation(cfg, ds, shards);
  EXPECT_EQ(log_text(a), log_text(b));
  EXPECT_EQ(log_text(a), log_text(c));
}

TEST(Federation, PartialParticipationAndEvalCadence) {
  const auto ds = mixture(4, 30);
  const auto shards = pcdd_shards(ds, 6, 2, 2);
  auto cfg = small_config(AlgoKind::FedAvg);
  cfg.rounds = 5;
  cfg.clients_per_round = 2;
  cfg.eval_every = 2;
  const auto r = run_federation(cfg, ds, shards);
  ASSERT_EQ(r.logs.size(), 3u);
  EXPECT_EQ(r.logs[0].round, 2);
  EXPECT_EQ(r.logs[2].round, 5);
  for (const auto& l : r.logs) EXPECT_EQ(l.participants.size(), 2u);
}

TEST(Federation, FixedClassifierNeverChanges) {
  const auto ds = mixture(4, 30);
  const auto shards = pcdd_shards(ds, 4, 2, 2);
  const auto cfg = small_config(AlgoKind::FedGELA);
  const auto r = run_federation(cfg, ds, shards);
  EXPECT_FALSE(r.server.global.head.has_value());
  EXPECT_EQ(r.server.etf_weights, make_etf(4, 4, derive_seed(cfg.seed, {stream::kEtf}), 1.0).weights());
}

TEST(Federation, AdaptedClientFitsItsShard) {
  const auto ds = mixture(10, 60, 4, 32);
  const auto shards = pcdd_shards(ds, 5, 2, 3);
  auto cfg = small_config(AlgoKind::FedGELA);
  cfg.hp.local_epochs = 10;
  cfg.rounds = 1;
  cfg.hidden = {64};
  const auto clients = init_clients(cfg, shards, 10);
  const auto s = init_server(cfg, 32, 10);
  const auto r = local_train(clients[0], s.global, cfg.algo, cfg.hp, &s.etf_weights, ds, cfg.seed, 0);
  Predictor pred{&r.params.backbone, &s.etf_weights, &clients[0].phi, clients[0].mask, 1.0};
  const auto& train = shards[0].train;
  EXPECT_GT(accuracy(predict(pred, ds.rows(train)), ds.labels_at(train)), 0.95);
}
