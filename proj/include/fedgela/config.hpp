#pragma once

// Flat key = value run configuration.
//
//   # comment
//   dataset = synthetic
//   algo = fedgela
//   classes_per_client = 2
//
// Unknown keys, malformed values and out-of-range values raise ConfigError
// naming the key.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedgela/data.hpp"
#include "fedgela/error.hpp"
#include "fedgela/fed.hpp"

namespace fedgela {

struct RunConfig {
  // data
  std::string dataset;  // "synthetic" or "csv"
  std::string csv_path;
  int classes = 10;
  int input_dim = 32;
  int n_per_class = 200;
  double class_sep = 3.0;
  double noise_sigma = 1.0;
  std::optional<std::uint64_t> data_seed;

  // partition
  std::optional<double> beta;
  std::optional<int> classes_per_client;
  int clients = 10;
  std::optional<int> min_size;  // default: batch_size
  double test_fraction = kDefaultTestFraction;
  std::optional<std::uint64_t> partition_seed;

  // algorithm
  AlgoKind algo = AlgoKind::FedGELA;
  int rounds = 30;
  int clients_per_round = 0;  // 0: all
  int local_epochs = 10;
  int batch_size = 100;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double ew = 1.0;
  double eh = 1.0;
  std::optional<double> gamma;  // default 1/C
  double prox_mu = 0.01;
  QKind q_kind = QKind::Identity;
  std::vector<int> hidden = {64};
  int feature_dim = 0;  // 0: C
  int finetune_epochs = 10;
  int eval_every = 1;

  // run
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  bool parallel = false;

  bool operator==(const RunConfig&) const = default;

  bool is_pcdd() const { return classes_per_client.has_value(); }
  double effective_beta() const { return beta.value_or(0.5); }
  std::uint64_t effective_data_seed() const { return data_seed.value_or(derive_seed(seed, {stream::kData})); }
  std::uint64_t effective_partition_seed() const {
    return partition_seed.value_or(derive_seed(seed, {stream::kPartition}));
  }
};

namespace detail {

inline std::string trim_copy(std::string_view s) { return std::string(trim(s)); }

template <typename T>
T parse_value(const std::string& key, const std::string& value) {
  T out{};
  if (!parse_number(value, out)) throw ConfigError(key, "config: bad value '" + value + "' for key '" + key + "'");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(out)) throw ConfigError(key, "config: non-finite value for key '" + key + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(key, "config: bad boolean '" + value + "' for key '" + key + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  if (trim(value).empty()) return out;
  for (auto part : split_commas(value)) out.push_back(parse_value<int>(key, std::string(trim(part))));
  return out;
}

}  // namespace detail

/// Accumulates key/value assignments (file lines, then command-line
/// overrides) and produces a validated RunConfig.
class ConfigBuilder {
 public:
  void set(const std::string& key, const std::string& value) {
    if (!known_keys().contains(key)) throw ConfigError(key, "config: unknown key '" + key + "'");
    values_[key] = value;
  }

  void parse_text(std::string_view text, const std::string& source = "<config>") {
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string body = detail::trim_copy(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("", source + ":" + std::to_string(line_no) + ": expected key = value");
      }
      set(detail::trim_copy(body.substr(0, eq)), detail::trim_copy(body.substr(eq + 1)));
    }
  }

  void parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    parse_text(ss.str(), path);
  }

  /// "key=value" as given on the command line.
  void set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError(assignment, "config: override must be key=value: " + assignment);
    set(detail::trim_copy(assignment.substr(0, eq)), detail::trim_copy(assignment.substr(eq + 1)));
  }

  RunConfig build() const;

  static const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "dataset", "csv_path", "classes", "input_dim", "n_per_class", "class_sep", "noise_sigma", "data_seed",
        "beta", "classes_per_client", "clients", "min_size", "test_fraction", "partition_seed",
        "algo", "rounds", "clients_per_round", "local_epochs", "batch_size", "lr", "momentum", "weight_decay",
        "ew", "log_ew", "eh", "gamma", "prox_mu", "q_kind", "hidden", "feature_dim", "finetune_epochs",
        "eval_every", "seed", "out_dir", "parallel"};
    return keys;
  }

 private:
  std::map<std::string, std::string> values_;
};

inline RunConfig ConfigBuilder::build() const {
  using detail::parse_value;
  RunConfig c;
  auto get = [&](const char* key) -> const std::string* {
    auto it = values_.find(key);
    return it == values_.end() ? nullptr : &it->second;
  };
  auto range = [](const char* key, bool ok, const std::string& what) {
    if (!ok) throw ConfigError(key, std::string("config: '") + key + "' " + what);
  };

  const std::string* ds = get("dataset");
  if (ds == nullptr) throw ConfigError("dataset", "config: missing required key 'dataset'");
  c.dataset = *ds;
  range("dataset", c.dataset == "synthetic" || c.dataset == "csv", "must be 'synthetic' or 'csv'");
  if (const auto* v = get("csv_path")) c.csv_path = *v;
  if (c.dataset == "csv" && c.csv_path.empty()) throw ConfigError("csv_path", "config: missing required key 'csv_path'");

  const std::string* algo = get("algo");
  if (algo == nullptr) throw ConfigError("algo", "config: missing required key 'algo'");
  const auto parsed_algo = parse_algo(*algo);
  range("algo", parsed_algo.has_value(), "must be one of fedavg, fedprox, fedge, fedgela, fedla");
  c.algo = *parsed_algo;

  if (const auto* v = get("classes")) c.classes = parse_value<int>("classes", *v);
  if (const auto* v = get("input_dim")) c.input_dim = parse_value<int>("input_dim", *v);
  if (const auto* v = get("n_per_class")) c.n_per_class = parse_value<int>("n_per_class", *v);
  if (const auto* v = get("class_sep")) c.class_sep = parse_value<double>("class_sep", *v);
  if (const auto* v = get("noise_sigma")) c.noise_sigma = parse_value<double>("noise_sigma", *v);
  if (const auto* v = get("data_seed")) c.data_seed = parse_value<std::uint64_t>("data_seed", *v);
  range("classes", c.classes >= 2, "must be >= 2");
  range("input_dim", c.input_dim >= 2, "must be >= 2");
  range("n_per_class", c.n_per_class >= 1, "must be >= 1");
  range("class_sep", c.class_sep > 0.0, "must be > 0");
  range("noise_sigma", c.noise_sigma > 0.0, "must be > 0");

  if (get("beta") && get("classes_per_client")) {
    throw ConfigError("beta", "config: 'beta' (dirichlet) and 'classes_per_client' (pcdd) conflict; set only one");
  }
  if (const auto* v = get("beta")) {
    c.beta = parse_value<double>("beta", *v);
    range("beta", *c.beta > 0.0, "must be > 0");
  }
  if (const auto* v = get("classes_per_client")) {
    c.classes_per_client = parse_value<int>("classes_per_client", *v);
    range("classes_per_client", *c.classes_per_client >= 1, "must be >= 1");
  }
  if (const auto* v = get("clients")) c.clients = parse_value<int>("clients", *v);
  range("clients", c.clients >= 1, "must be >= 1");
  if (const auto* v = get("min_size")) {
    c.min_size = parse_value<int>("min_size", *v);
    range("min_size", *c.min_size >= 1, "must be >= 1");
  }
  if (const auto* v = get("test_fraction")) c.test_fraction = parse_value<double>("test_fraction", *v);
  range("test_fraction", c.test_fraction >= 0.0 && c.test_fraction < 1.0, "must be in [0, 1)");
  if (const auto* v = get("partition_seed")) c.partition_seed = parse_value<std::uint64_t>("partition_seed", *v);

  if (const auto* v = get("rounds")) c.rounds = parse_value<int>("rounds", *v);
  range("rounds", c.rounds >= 0, "must be >= 0");
  if (const auto* v = get("clients_per_round")) c.clients_per_round = parse_value<int>("clients_per_round", *v);
  range("clients_per_round", c.clients_per_round >= 0 && c.clients_per_round <= c.clients, "must be in [0, clients]");
  if (const auto* v = get("local_epochs")) c.local_epochs = parse_value<int>("local_epochs", *v);
  range("local_epochs", c.local_epochs >= 0, "must be >= 0");
  if (const auto* v = get("batch_size")) c.batch_size = parse_value<int>("batch_size", *v);
  range("batch_size", c.batch_size >= 1, "must be >= 1");
  if (const auto* v = get("lr")) c.lr = parse_value<double>("lr", *v);
  range("lr", c.lr > 0.0, "must be > 0");
  if (const auto* v = get("momentum")) c.momentum = parse_value<double>("momentum", *v);
  range("momentum", c.momentum >= 0.0 && c.momentum < 1.0, "must be in [0, 1)");
  if (const auto* v = get("weight_decay")) c.weight_decay = parse_value<double>("weight_decay", *v);
  range("weight_decay", c.weight_decay >= 0.0, "must be >= 0");

  if (get("ew") && get("log_ew")) throw ConfigError("ew", "config: 'ew' and 'log_ew' conflict; set only one");
  if (const auto* v = get("ew")) c.ew = parse_value<double>("ew", *v);
  if (const auto* v = get("log_ew")) c.ew = std::pow(10.0, parse_value<double>("log_ew", *v));
  range("ew", c.ew > 0.0 && std::isfinite(c.ew), "must be > 0");
  if (const auto* v = get("eh")) c.eh = parse_value<double>("eh", *v);
  range("eh", c.eh > 0.0, "must be > 0");
  if (const auto* v = get("gamma")) {
    c.gamma = parse_value<double>("gamma", *v);
    range("gamma", *c.gamma > 0.0, "must be > 0");
  }
  if (const auto* v = get("prox_mu")) c.prox_mu = parse_value<double>("prox_mu", *v);
  range("prox_mu", c.prox_mu >= 0.0, "must be >= 0");
  if (const auto* v = get("q_kind")) {
    const auto q = parse_q_kind(*v);
    range("q_kind", q.has_value(), "must be one of identity, exp, sqrt");
    c.q_kind = *q;
  }
  if (const auto* v = get("hidden")) c.hidden = detail::parse_int_list("hidden", *v);
  for (int h : c.hidden) range("hidden", h >= 1, "layer widths must be >= 1");
  if (const auto* v = get("feature_dim")) c.feature_dim = parse_value<int>("feature_dim", *v);
  range("feature_dim", c.feature_dim == 0 || c.feature_dim >= c.classes, "must be 0 (use C) or >= classes");
  if (const auto* v = get("finetune_epochs")) c.finetune_epochs = parse_value<int>("finetune_epochs", *v);
  range("finetune_epochs", c.finetune_epochs >= 0, "must be >= 0");
  if (const auto* v = get("eval_every")) c.eval_every = parse_value<int>("eval_every", *v);
  range("eval_every", c.eval_every >= 1, "must be >= 1");

  if (const auto* v = get("seed")) c.seed = parse_value<std::uint64_t>("seed", *v);
  if (const auto* v = get("out_dir")) c.out_dir = *v;
  if (const auto* v = get("parallel")) c.parallel = detail::parse_bool("parallel", *v);
  return c;
}

inline RunConfig parse_config_text(std::string_view text) {
  ConfigBuilder b;
  b.parse_text(text);
  return b.build();
}

inline RunConfig parse_config_file(const std::string& path) {
  ConfigBuilder b;
  b.parse_file(path);
  return b.build();
}

/// Canonical key = value echo; parse_config_text(to_text(c)) == c.
inline std::string to_text(const RunConfig& c) {
  std::ostringstream o;
  auto kv = [&o](const char* k, const std::string& v) { o << k << " = " << v << '\n'; };
  auto num = [](auto v) {
    if constexpr (std::is_floating_point_v<decltype(v)>) {
      return format_real(v);
    } else {
      return std::to_string(v);
    }
  };
  kv("dataset", c.dataset);
  if (!c.csv_path.empty()) kv("csv_path", c.csv_path);
  kv("classes", num(c.classes));
  kv("input_dim", num(c.input_dim));
  kv("n_per_class", num(c.n_per_class));
  kv("class_sep", num(c.class_sep));
  kv("noise_sigma", num(c.noise_sigma));
  if (c.data_seed) kv("data_seed", num(*c.data_seed));
  if (c.beta) kv("beta", num(*c.beta));
  if (c.classes_per_client) kv("classes_per_client", num(*c.classes_per_client));
  kv("clients", num(c.clients));
  if (c.min_size) kv("min_size", num(*c.min_size));
  kv("test_fraction", num(c.test_fraction));
  if (c.partition_seed) kv("partition_seed", num(*c.partition_seed));
  kv("algo", to_string(c.algo));
  kv("rounds", num(c.rounds));
  kv("clients_per_round", num(c.clients_per_round));
  kv("local_epochs", num(c.local_epochs));
  kv("batch_size", num(c.batch_size));
  kv("lr", num(c.lr));
  kv("momentum", num(c.momentum));
  kv("weight_decay", num(c.weight_decay));
  kv("ew", num(c.ew));
  kv("eh", num(c.eh));
  if (c.gamma) kv("gamma", num(*c.gamma));
  kv("prox_mu", num(c.prox_mu));
  kv("q_kind", to_string(c.q_kind));
  std::string hidden;
  for (std::size_t i = 0; i < c.hidden.size(); ++i) hidden += (i ? "," : "") + std::to_string(c.hidden[i]);
  kv("hidden", hidden);
  kv("feature_dim", num(c.feature_dim));
  kv("finetune_epochs", num(c.finetune_epochs));
  kv("eval_every", num(c.eval_every));
  kv("seed", num(c.seed));
  kv("out_dir", c.out_dir);
  kv("parallel", c.parallel ? "true" : "false");
  return o.str();
}

inline PartitionSpec partition_spec(const RunConfig& c) {
  PartitionSpec p;
  if (c.classes_per_client) {
    p.scheme = PcddScheme{*c.classes_per_client};
  } else {
    p.scheme = DirichletScheme{c.effective_beta()};
  }
  p.clients = c.clients;
  p.min_size = c.min_size.value_or(c.batch_size);
  p.seed = c.effective_partition_seed();
  p.test_fraction = c.test_fraction;
  return p;
}

inline FederationConfig federation_config(const RunConfig& c) {
  FederationConfig f;
  f.algo = c.algo;
  f.rounds = c.rounds;
  f.clients_per_round = c.clients_per_round;
  f.hp = HyperParams{c.lr, c.momentum, c.weight_decay, c.local_epochs, c.batch_size, c.prox_mu, c.eh};
  f.hidden = c.hidden;
  f.feature_dim = c.feature_dim;
  f.classifier_norm_sq = c.ew;
  f.gamma = c.gamma;
  f.q_kind = c.q_kind;
  f.eval_every = c.eval_every;
  f.finetune_epochs = c.finetune_epochs;
  f.seed = c.seed;
  f.parallel = c.parallel;
  return f;
}

inline Dataset load_dataset(const RunConfig& c) {
  if (c.dataset == "csv") return load_csv(c.csv_path);
  GaussianMixtureSpec s;
  s.classes = c.classes;
  s.input_dim = c.input_dim;
  s.n_per_class = c.n_per_class;
  s.class_sep = c.class_sep;
  s.noise_sigma = c.noise_sigma;
  s.seed = c.effective_data_seed();
  return synth_gaussian_mixture(s);
}

}  // namespace fedgela
