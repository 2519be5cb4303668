#pragma once

// Federated rounds: client sampling, local training per algorithm variant,
// weighted aggregation, distribution-matrix (phi) computation, evaluation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedgela/data.hpp"
#include "fedgela/etf.hpp"
#include "fedgela/metrics.hpp"
#include "fedgela/nn.hpp"
#include "fedgela/rng.hpp"

namespace fedgela {

enum class AlgoKind {
  FedAvg,   // learnable classifier
  FedProx,  // learnable classifier + proximal term
  FedGE,    // fixed ETF, phi = 1
  FedGELA,  // fixed ETF, per-client phi and existing-class softmax
  FedLA,    // learnable classifier with per-client phi and existing-class softmax (ablation arm)
};

inline bool has_learnable_head(AlgoKind a) {
  return a == AlgoKind::FedAvg || a == AlgoKind::FedProx || a == AlgoKind::FedLA;
}
inline bool adapts_locally(AlgoKind a) { return a == AlgoKind::FedGELA || a == AlgoKind::FedLA; }

inline std::string to_string(AlgoKind a) {
  switch (a) {
    case AlgoKind::FedAvg: return "fedavg";
    case AlgoKind::FedProx: return "fedprox";
    case AlgoKind::FedGE: return "fedge";
    case AlgoKind::FedGELA: return "fedgela";
    case AlgoKind::FedLA: return "fedla";
  }
  return "?";
}

inline std::optional<AlgoKind> parse_algo(std::string_view s) {
  for (AlgoKind a : {AlgoKind::FedAvg, AlgoKind::FedProx, AlgoKind::FedGE, AlgoKind::FedGELA, AlgoKind::FedLA}) {
    if (to_string(a) == s) return a;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Distribution matrix

enum class QKind { Identity, Exp, Sqrt };

inline std::string to_string(QKind q) {
  switch (q) {
    case QKind::Identity: return "identity";
    case QKind::Exp: return "exp";
    case QKind::Sqrt: return "sqrt";
  }
  return "?";
}

inline std::optional<QKind> parse_q_kind(std::string_view s) {
  for (QKind q : {QKind::Identity, QKind::Exp, QKind::Sqrt}) {
    if (to_string(q) == s) return q;
  }
  return std::nullopt;
}

inline double apply_q(QKind q, double x) {
  switch (q) {
    case QKind::Identity: return x;
    case QKind::Exp: return std::exp(x);
    case QKind::Sqrt: return std::sqrt(x);
  }
  return x;
}

namespace detail {
inline int checked_total(std::span<const int> counts, int n_k) {
  long sum = 0;
  for (int c : counts) {
    if (c < 0) throw parameter_error("phi: negative class count");
    sum += c;
  }
  if (n_k <= 0 || sum == 0) throw Error("empty-client", "phi: client has no samples");
  if (sum != n_k) throw parameter_error("phi: n_k != sum of class counts");
  return n_k;
}
}  // namespace detail

/// phi_c = n_{k,c} / (n_k * gamma). Without gamma the default 1/C is used
/// and evaluated as C * n_{k,c} / n_k, so a uniform client gets exactly 1.
inline PhiVector compute_phi(std::span<const int> counts, int n_k, std::optional<double> gamma = std::nullopt) {
  detail::checked_total(counts, n_k);
  if (gamma && !(*gamma > 0.0)) throw parameter_error("phi: gamma must be positive");
  const int c = static_cast<int>(counts.size());
  PhiVector out{Eigen::VectorXd(c)};
  for (int i = 0; i < c; ++i) {
    const double n = counts[static_cast<std::size_t>(i)];
    out.phi(i) = gamma ? n / (n_k * *gamma) : (static_cast<double>(c) * n) / n_k;
  }
  return out;
}

/// phi_c = Q(n_{k,c}/n_k) / gamma for present classes, 0 for absent ones.
inline PhiVector alt_phi(std::span<const int> counts, int n_k, QKind q, std::optional<double> gamma = std::nullopt) {
  if (q == QKind::Identity) return compute_phi(counts, n_k, gamma);
  detail::checked_total(counts, n_k);
  const int c = static_cast<int>(counts.size());
  const double g = gamma.value_or(1.0 / c);
  if (!(g > 0.0)) throw parameter_error("phi: gamma must be positive");
  PhiVector out{Eigen::VectorXd(c)};
  for (int i = 0; i < c; ++i) {
    const int n = counts[static_cast<std::size_t>(i)];
    out.phi(i) = n > 0 ? apply_q(q, static_cast<double>(n) / n_k) / g : 0.0;
  }
  return out;
}

/// Scalar gamma making the p_k-weighted phi average 1 over classes:
/// gamma = (1/C) sum_c sum_k p_k Q(n_{k,c}/n_k), with absent classes
/// contributing 0. For Q(x) = x this is 1/C.
inline double alt_phi_gamma(std::span<const ClientShard> shards, QKind q) {
  if (shards.empty()) throw parameter_error("alt_phi_gamma: no clients");
  const int c = static_cast<int>(shards.front().counts.size());
  double total_n = 0.0;
  for (const auto& s : shards) total_n += s.n_k;
  double acc = 0.0;
  for (const auto& s : shards) {
    const double p = s.n_k / total_n;
    for (int v : s.counts) {
      if (v > 0) acc += p * apply_q(q, static_cast<double>(v) / s.n_k);
    }
  }
  return acc / c;
}

// ---------------------------------------------------------------------------
// Sampling and aggregation

/// K distinct client ids, uniform without replacement, ascending.
inline std::vector<int> sample_clients(int n, int k, std::uint64_t seed, int round) {
  if (k < 1 || k > n) {
    throw parameter_error("sample_clients: need 1 <= K <= N, got K=" + std::to_string(k) + ", N=" + std::to_string(n));
  }
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  if (k < n) {
    Rng rng(derive_seed(seed, {stream::kSampling, static_cast<std::uint64_t>(round)}));
    for (int i = 0; i < k; ++i) {
      std::uniform_int_distribution<int> pick(i, n - 1);
      std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(pick(rng))]);
    }
    ids.resize(static_cast<std::size_t>(k));
    std::sort(ids.begin(), ids.end());
  }
  return ids;
}

/// Entrywise convex combination sum_k p_k * updates[k], accumulated in the
/// given order.
inline ModelParams aggregate(std::span<const ModelParams> updates, std::span<const double> weights) {
  if (updates.empty() || updates.size() != weights.size()) {
    throw parameter_error("aggregate: need one weight per update");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw parameter_error("aggregate: weights must be positive");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw parameter_error("aggregate: weights must sum to 1");
  ModelParams out = zeros_like(updates.front());
  auto dst = param_spans(out);
  for (std::size_t k = 0; k < updates.size(); ++k) {
    if (!same_shape(updates[k], updates.front())) throw shape_error("aggregate: update shapes differ");
    const auto src = param_spans(updates[k]);
    for (std::size_t t = 0; t < dst.size(); ++t) {
      for (std::size_t i = 0; i < dst[t].size(); ++i) dst[t][i] += weights[k] * src[t][i];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Local training

struct HyperParams {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int local_epochs = 10;
  int batch_size = 100;
  double prox_mu = 0.01;
  double feature_norm_sq = 1.0;  // E_H
};

/// Shuffle stream for one epoch: seeded by (master seed, client, epoch
/// counter). The counter is round * E + epoch during federation, so a
/// single client trained for T*E epochs sees the same batch order.
inline std::uint64_t epoch_shuffle_seed(std::uint64_t seed, std::uint64_t tag, int client, long epoch) {
  return derive_seed(seed, {tag, static_cast<std::uint64_t>(client), static_cast<std::uint64_t>(epoch)});
}

struct TrainStats {
  std::vector<double> epoch_losses;  // mean batch loss per epoch
  double mean_loss = 0.0;            // mean batch loss over all epochs
};

/// `epochs` passes of mini-batch SGD over `train_idx` (seeded shuffle per
/// epoch, last partial batch kept). A fresh optimizer is used.
inline TrainStats train_epochs(ModelParams& params, const Dataset& ds, std::span<const int> train_idx,
                               const Objective& obj, const HyperParams& hp, int epochs, std::uint64_t seed,
                               std::uint64_t stream_tag, int client, long first_epoch) {
  if (epochs < 0) throw parameter_error("train: epochs must be >= 0");
  if (hp.batch_size < 1) throw parameter_error("train: batch size must be >= 1");
  TrainStats stats;
  if (epochs == 0) return stats;
  if (train_idx.empty()) throw Error("empty-train", "train: client " + std::to_string(client) + " has an empty train split");
  OptimizerState opt{hp.lr, hp.momentum, hp.weight_decay, std::nullopt};
  std::vector<int> order(train_idx.begin(), train_idx.end());
  ModelParams grad;
  double all = 0.0;
  long batches_total = 0;
  for (int e = 0; e < epochs; ++e) {
    std::sort(order.begin(), order.end());
    Rng rng(epoch_shuffle_seed(seed, stream_tag, client, first_epoch + e));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hp.batch_size));
      const std::span<const int> batch(order.data() + start, end - start);
      const Eigen::MatrixXd x = ds.rows(batch);
      const std::vector<int> y = ds.labels_at(batch);
      const double loss = objective_grad(params, x, y, obj, grad);
      if (!std::isfinite(loss)) {
        throw numeric_error("train: non-finite loss at client " + std::to_string(client) + ", epoch " +
                            std::to_string(first_epoch + e));
      }
      sgd_step(params, grad, opt);
      epoch_sum += loss;
      ++batches;
    }
    stats.epoch_losses.push_back(epoch_sum / batches);
    all += epoch_sum;
    batches_total += batches;
  }
  stats.mean_loss = all / static_cast<double>(batches_total);
  return stats;
}

/// Per-client training state.
struct ClientState {
  int id = 0;
  const ClientShard* shard = nullptr;
  PhiVector phi;   // ones unless the algorithm adapts locally
  ClassMask mask;  // softmax classes during local training
  std::optional<ModelParams> local;  // model after the client's latest local training
};

/// The local objective of `algo` for `client`. `fixed_classifier` must stay
/// alive while the objective is used; `global` is the proximal anchor.
inline Objective local_objective(const ClientState& client, AlgoKind algo, const HyperParams& hp,
                                 const Eigen::MatrixXd* fixed_classifier, const ModelParams* global) {
  Objective obj;
  obj.feature_norm_sq = hp.feature_norm_sq;
  obj.fixed_classifier = has_learnable_head(algo) ? nullptr : fixed_classifier;
  obj.phi = client.phi;
  obj.mask = client.mask;
  if (algo == AlgoKind::FedProx) {
    obj.prox_mu = hp.prox_mu;
    obj.prox_anchor = global;
  }
  return obj;
}

struct LocalResult {
  ModelParams params;
  TrainStats stats;
};

inline LocalResult local_train(const ClientState& client, const ModelParams& global, AlgoKind algo,
                               const HyperParams& hp, const Eigen::MatrixXd* fixed_classifier, const Dataset& ds,
                               std::uint64_t seed, int round) {
  if (client.shard == nullptr || client.shard->n_k == 0) throw Error("empty-client", "local_train: client has no shard");
  LocalResult r{global, {}};
  const Objective obj = local_objective(client, algo, hp, fixed_classifier, &global);
  r.stats = train_epochs(r.params, ds, client.shard->train, obj, hp, hp.local_epochs, seed, stream::kShuffle, client.id,
                         static_cast<long>(round) * hp.local_epochs);
  return r;
}

/// Continue training from `global` on the client's train split with the
/// algorithm's unadapted objective (no proximal term).
inline ModelParams finetune_personalize(const ModelParams& global, const ClientState& client, AlgoKind algo,
                                        const HyperParams& hp, const Eigen::MatrixXd* fixed_classifier,
                                        const Dataset& ds, int epochs, std::uint64_t seed) {
  ModelParams p = global;
  if (epochs == 0) return p;
  Objective obj;
  obj.feature_norm_sq = hp.feature_norm_sq;
  obj.fixed_classifier = has_learnable_head(algo) ? nullptr : fixed_classifier;
  obj.phi = PhiVector::ones(client.shard->counts.empty() ? 0 : static_cast<int>(client.shard->counts.size()));
  obj.mask = ClassMask::full(obj.phi.classes());
  train_epochs(p, ds, client.shard->train, obj, hp, epochs, seed, stream::kFinetune, client.id, 0);
  return p;
}

// ---------------------------------------------------------------------------
// Federation

struct FederationConfig {
  AlgoKind algo = AlgoKind::FedGELA;
  int rounds = 30;
  int clients_per_round = 0;  // 0: all clients
  HyperParams hp;
  std::vector<int> hidden = {64};
  int feature_dim = 0;       // 0: C
  double classifier_norm_sq = 1.0;  // E_W
  std::optional<double> gamma;
  QKind q_kind = QKind::Identity;
  int eval_every = 1;
  int finetune_epochs = 10;
  std::uint64_t seed = 0;
  bool parallel = false;
};

struct ServerState {
  ModelParams global;
  std::optional<EtfClassifier> etf;  // fixed-classifier algorithms
  Eigen::MatrixXd etf_weights;       // sqrt(E_W) * M when etf is set
  int round = 0;
};

struct RoundLog {
  int round = 0;  // 1-based
  AlgoKind algo = AlgoKind::FedAvg;
  std::vector<int> participants;
  std::vector<double> client_losses;
  double ga = 0.0;
  double pa = 0.0;
  std::vector<double> per_client_pa;
  AngleReport angles;
  double mean_train_loss = 0.0;
};

struct FederationResult {
  std::vector<RoundLog> logs;
  ServerState server;
  std::vector<ClientState> clients;
};

/// Classifier the global model is evaluated with (ETF or learned head).
inline const Eigen::MatrixXd& global_classifier(const ServerState& s) {
  return s.global.head ? *s.global.head : s.etf_weights;
}

inline ServerState init_server(const FederationConfig& cfg, int input_dim, int classes) {
  ServerState s;
  const int d = cfg.feature_dim > 0 ? cfg.feature_dim : classes;
  std::vector<int> sizes{input_dim};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(d);
  s.global.backbone = init_backbone(sizes, derive_seed(cfg.seed, {stream::kInit}));
  if (has_learnable_head(cfg.algo)) {
    s.global.head = init_head(d, classes, derive_seed(cfg.seed, {stream::kInit, 1}));
  } else {
    s.etf = make_etf(d, classes, derive_seed(cfg.seed, {stream::kEtf}), cfg.classifier_norm_sq);
    s.etf_weights = s.etf->weights();
  }
  return s;
}

inline std::vector<ClientState> init_clients(const FederationConfig& cfg, std::span<const ClientShard> shards,
                                             int classes) {
  std::optional<double> gamma = cfg.gamma;
  if (!gamma && cfg.q_kind != QKind::Identity) gamma = alt_phi_gamma(shards, cfg.q_kind);
  std::vector<ClientState> clients;
  for (std::size_t k = 0; k < shards.size(); ++k) {
    ClientState c;
    c.id = static_cast<int>(k);
    c.shard = &shards[k];
    if (adapts_locally(cfg.algo)) {
      c.phi = alt_phi(shards[k].counts, shards[k].n_k, cfg.q_kind, gamma);
      c.mask = ClassMask::of(classes, shards[k].existing_classes);
    } else {
      c.phi = PhiVector::ones(classes);
      c.mask = ClassMask::full(classes);
    }
    clients.push_back(std::move(c));
  }
  return clients;
}

/// Evaluates GA, PA and the angle diagnostics for the current state.
inline void evaluate_round(const FederationConfig& cfg, const ServerState& server,
                           std::span<const ClientState> clients, const Dataset& ds, RoundLog& log) {
  const int classes = ds.classes;
  const double eh = cfg.hp.feature_norm_sq;
  std::vector<const ClientShard*> shard_ptrs;
  for (const auto& c : clients) shard_ptrs.push_back(c.shard);

  const Eigen::MatrixXd& gclf = global_classifier(server);
  Predictor global{&server.global.backbone, &gclf, nullptr, ClassMask::full(classes), eh};

  std::vector<int> test_idx;
  for (const auto* s : shard_ptrs) test_idx.insert(test_idx.end(), s->test.begin(), s->test.end());
  std::sort(test_idx.begin(), test_idx.end());
  const Eigen::MatrixXd xtest = ds.rows(test_idx);
  const std::vector<int> ytest = ds.labels_at(test_idx);
  const Eigen::MatrixXd htest = features(server.global.backbone, xtest, eh);
  log.ga = accuracy(argmax_masked(logits(htest, gclf, nullptr), global.mask), ytest);
  log.angles.global_all_class_mean_angle = global_class_mean_angle(htest, ytest, classes);

  // Personal models.
  const bool finetune = cfg.algo == AlgoKind::FedAvg || cfg.algo == AlgoKind::FedProx;
  std::vector<ModelParams> tuned(clients.size());
  if (finetune) {
    auto tune = [&](std::size_t k) {
      tuned[k] = finetune_personalize(server.global, clients[k], cfg.algo, cfg.hp, nullptr, ds, cfg.finetune_epochs,
                                      derive_seed(cfg.seed, {stream::kFinetune, static_cast<std::uint64_t>(server.round)}));
    };
    if (cfg.parallel) {
      std::vector<std::future<void>> jobs;
      for (std::size_t k = 0; k < clients.size(); ++k) jobs.push_back(std::async(std::launch::async, tune, k));
      for (auto& j : jobs) j.get();
    } else {
      for (std::size_t k = 0; k < clients.size(); ++k) tune(k);
    }
  }
  double pa_sum = 0.0;
  int pa_n = 0;
  log.per_client_pa.clear();
  OptionalMean local_angle, clf_exist, clf_miss;
  log.angles.skipped_clients = 0;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    const ClientState& c = clients[k];
    const ModelParams& trained = c.local ? *c.local : server.global;
    const ModelParams& personal = finetune ? tuned[k] : trained;
    const Eigen::MatrixXd& clf = personal.head ? *personal.head : server.etf_weights;
    const bool adapted = adapts_locally(cfg.algo);
    if (!c.shard->test.empty()) {
      const Eigen::MatrixXd x = ds.rows(c.shard->test);
      const std::vector<int> y = ds.labels_at(c.shard->test);
      const Eigen::MatrixXd hp = features(personal.backbone, x, eh);
      const ClassMask mask = adapted ? c.mask : ClassMask::full(classes);
      const double acc = accuracy(argmax_masked(logits(hp, clf, adapted ? &c.phi : nullptr), mask), y);
      log.per_client_pa.push_back(acc);
      pa_sum += acc;
      ++pa_n;

      const Eigen::MatrixXd hl = &personal == &trained ? hp : features(trained.backbone, x, eh);
      const auto a = existing_class_mean_angle(hl, y, classes, c.shard->existing_classes);
      if (!a) ++log.angles.skipped_clients;
      local_angle.add(a);
    } else {
      log.per_client_pa.push_back(std::numeric_limits<double>::quiet_NaN());
      ++log.angles.skipped_clients;
    }
    const Eigen::MatrixXd& local_clf = trained.head ? *trained.head : server.etf->m;
    const ClassifierAngles ca = classifier_angles(local_clf, c.shard->existing_classes);
    clf_exist.add(ca.existing);
    clf_miss.add(ca.missing);
  }
  if (pa_n == 0) throw Error("empty-eval", "evaluate: no client has test samples");
  log.pa = pa_sum / pa_n;
  log.angles.per_client_existing_class_mean_angle = local_angle.value();
  log.angles.classifier_existing_angle = clf_exist.value();
  log.angles.classifier_missing_angle = clf_miss.value();
}

/// Runs `cfg.rounds` rounds of {sample, broadcast, local training,
/// aggregation}. Fixed-classifier algorithms never aggregate the classifier.
/// Results are identical in sequential and parallel mode.
inline FederationResult run_federation(const FederationConfig& cfg, const Dataset& ds,
                                       std::span<const ClientShard> shards) {
  if (shards.empty()) throw parameter_error("run_federation: no clients");
  if (cfg.rounds < 0) throw parameter_error("run_federation: rounds must be >= 0");
  if (cfg.eval_every < 1) throw parameter_error("run_federation: eval_every must be >= 1");
  const int n = static_cast<int>(shards.size());
  const int k = cfg.clients_per_round > 0 ? cfg.clients_per_round : n;

  FederationResult res;
  res.server = init_server(cfg, ds.input_dim(), ds.classes);
  res.clients = init_clients(cfg, shards, ds.classes);
  const Eigen::MatrixXd* fixed = res.server.etf ? &res.server.etf_weights : nullptr;

  for (int t = 0; t < cfg.rounds; ++t) {
    res.server.round = t;
    const std::vector<int> picked = sample_clients(n, k, cfg.seed, t);
    std::vector<LocalResult> results(picked.size());
    auto work = [&](std::size_t i) {
      results[i] = local_train(res.clients[static_cast<std::size_t>(picked[i])], res.server.global, cfg.algo, cfg.hp,
                               fixed, ds, cfg.seed, t);
    };
    if (cfg.parallel && picked.size() > 1) {
      std::vector<std::future<void>> jobs;
      for (std::size_t i = 0; i < picked.size(); ++i) jobs.push_back(std::async(std::launch::async, work, i));
      for (auto& j : jobs) j.get();
    } else {
      for (std::size_t i = 0; i < picked.size(); ++i) work(i);
    }

    // p_k renormalized over the sampled clients; reduction in ascending id order.
    double total = 0.0;
    for (int id : picked) total += shards[static_cast<std::size_t>(id)].n_k;
    std::vector<ModelParams> updates;
    std::vector<double> weights;
    RoundLog log;
    log.round = t + 1;
    log.algo = cfg.algo;
    log.participants = picked;
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < picked.size(); ++i) {
      const int id = picked[i];
      if (!std::isfinite(results[i].stats.mean_loss)) {
        throw numeric_error("run_federation: NaN loss in round " + std::to_string(t + 1) + " at client " +
                            std::to_string(id));
      }
      updates.push_back(results[i].params);
      weights.push_back(shards[static_cast<std::size_t>(id)].n_k / total);
      log.client_losses.push_back(results[i].stats.mean_loss);
      loss_sum += results[i].stats.mean_loss;
      res.clients[static_cast<std::size_t>(id)].local = std::move(results[i].params);
    }
    res.server.global = aggregate(updates, weights);
    res.server.round = t + 1;
    log.mean_train_loss = loss_sum / static_cast<double>(picked.size());

    if ((t + 1) % cfg.eval_every == 0 || t + 1 == cfg.rounds) {
      evaluate_round(cfg, res.server, res.clients, ds, log);
      res.logs.push_back(std::move(log));
    }
  }
  return res;
}

}  // namespace fedgela
