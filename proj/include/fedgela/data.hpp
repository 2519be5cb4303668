#pragma once

// Datasets, synthetic generation, CSV ingest and client partitioning.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fedgela/error.hpp"
#include "fedgela/etf.hpp"
#include "fedgela/rng.hpp"

namespace fedgela {

struct Dataset {
  Eigen::MatrixXd features;  // n x d_in, one sample per row
  std::vector<int> labels;
  int classes = 0;

  int size() const { return static_cast<int>(labels.size()); }
  int input_dim() const { return static_cast<int>(features.cols()); }

  void validate() const {
    if (labels.empty()) throw Error("empty-dataset", "dataset has no samples");
    if (static_cast<Eigen::Index>(labels.size()) != features.rows()) {
      throw shape_error("dataset: feature rows and labels differ in length");
    }
    for (int y : labels) {
      if (y < 0 || y >= classes) throw parameter_error("dataset: label " + std::to_string(y) + " outside [0, C)");
    }
  }

  Eigen::MatrixXd rows(std::span<const int> idx) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), features.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = features.row(idx[i]);
    return out;
  }
  std::vector<int> labels_at(std::span<const int> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(labels[static_cast<std::size_t>(i)]);
    return out;
  }
};

inline std::vector<int> label_counts(std::span<const int> labels, int classes) {
  std::vector<int> counts(static_cast<std::size_t>(classes), 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

/// One client's slice of a dataset with a stratified train/test split.
struct ClientShard {
  std::vector<int> indices;  // sorted dataset row indices
  std::vector<int> counts;   // n_{k,c}
  int n_k = 0;
  std::vector<int> existing_classes;  // C_k, ascending
  std::vector<int> train;
  std::vector<int> test;

  bool has_class(int c) const {
    return std::binary_search(existing_classes.begin(), existing_classes.end(), c);
  }
};

inline constexpr double kDefaultTestFraction = 0.2;

/// Builds a shard over `indices`. Per class, round(test_fraction * m) samples
/// (capped so at least one stays in train) go to the test split.
inline ClientShard make_shard(const Dataset& ds, std::vector<int> indices, double test_fraction,
                              std::uint64_t split_seed) {
  if (indices.empty()) throw Error("empty-client", "client shard must hold at least one sample");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw parameter_error("test_fraction must be in [0, 1)");
  std::sort(indices.begin(), indices.end());
  ClientShard s;
  s.counts.assign(static_cast<std::size_t>(ds.classes), 0);
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.classes));
  for (int i : indices) {
    if (i < 0 || i >= ds.size()) throw Error("shard-corruption", "shard index " + std::to_string(i) + " out of range");
    const int y = ds.labels[static_cast<std::size_t>(i)];
    ++s.counts[static_cast<std::size_t>(y)];
    by_class[static_cast<std::size_t>(y)].push_back(i);
  }
  s.n_k = static_cast<int>(indices.size());
  s.indices = std::move(indices);
  Rng rng(split_seed);
  for (int c = 0; c < ds.classes; ++c) {
    auto& members = by_class[static_cast<std::size_t>(c)];
    if (members.empty()) continue;
    s.existing_classes.push_back(c);
    std::shuffle(members.begin(), members.end(), rng);
    const int m = static_cast<int>(members.size());
    const int n_test = std::min(m - 1, static_cast<int>(std::floor(test_fraction * m + 0.5)));
    s.test.insert(s.test.end(), members.begin(), members.begin() + n_test);
    s.train.insert(s.train.end(), members.begin() + n_test, members.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

inline std::vector<int> class_histogram(const ClientShard& shard, const Dataset& ds) {
  std::vector<int> counts(static_cast<std::size_t>(ds.classes), 0);
  for (int i : shard.indices) {
    if (i < 0 || i >= ds.size()) throw Error("shard-corruption", "shard index " + std::to_string(i) + " out of range");
    ++counts[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])];
  }
  if (counts != shard.counts) throw Error("shard-corruption", "shard counts disagree with its indices");
  return counts;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct GaussianMixtureSpec {
  int classes = 10;
  int input_dim = 32;
  int n_per_class = 200;
  double class_sep = 3.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;
};

/// Balanced isotropic Gaussian mixture. Class means are distinct unit
/// directions (orthonormal when d_in >= C) scaled to norm class_sep.
inline Dataset synth_gaussian_mixture(const GaussianMixtureSpec& spec) {
  if (spec.classes < 2) throw parameter_error("synth: need C >= 2");
  if (spec.input_dim < 2) throw parameter_error("synth: need d_in >= 2");
  if (spec.n_per_class < 1) throw parameter_error("synth: need n_per_class >= 1");
  if (!(spec.class_sep > 0.0) || !(spec.noise_sigma > 0.0)) {
    throw parameter_error("synth: class_sep and noise_sigma must be positive");
  }
  Rng rng(derive_seed(spec.seed, {stream::kData}));
  std::normal_distribution<double> normal(0.0, 1.0);

  Eigen::MatrixXd means(spec.input_dim, spec.classes);
  if (spec.input_dim >= spec.classes) {
    means = random_rotation(spec.input_dim, spec.classes, derive_seed(spec.seed, {stream::kData, 1})).entries;
  } else {
    for (int c = 0; c < spec.classes; ++c) {
      for (int i = 0; i < spec.input_dim; ++i) means(i, c) = normal(rng);
      means.col(c).normalize();
    }
  }
  means *= spec.class_sep;

  Dataset ds;
  ds.classes = spec.classes;
  const int n = spec.classes * spec.n_per_class;
  ds.features.resize(n, spec.input_dim);
  ds.labels.resize(static_cast<std::size_t>(n));
  int row = 0;
  for (int c = 0; c < spec.classes; ++c) {
    for (int s = 0; s < spec.n_per_class; ++s, ++row) {
      for (int i = 0; i < spec.input_dim; ++i) ds.features(row, i) = means(i, c) + spec.noise_sigma * normal(rng);
      ds.labels[static_cast<std::size_t>(row)] = c;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv(const Dataset& ds, std::ostream& out) {
  for (int j = 0; j < ds.input_dim(); ++j) out << 'f' << j << ',';
  out << "label\n";
  for (int i = 0; i < ds.size(); ++i) {
    for (int j = 0; j < ds.input_dim(); ++j) out << format_real(ds.features(i, j)) << ',';
    out << ds.labels[static_cast<std::size_t>(i)] << '\n';
  }
}

inline void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path);
  write_csv(ds, out);
}

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size() && !s.empty();
}

}  // namespace detail

inline Dataset read_csv(std::istream& in, const std::string& source = "<stream>") {
  std::string line;
  int line_no = 0;
  std::size_t columns = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) break;
  }
  if (detail::trim(line).empty()) throw Error("empty-dataset", source + ": empty file");
  {
    const auto header = detail::split_commas(detail::trim(line));
    if (header.size() < 2 || detail::trim(header.back()) != "label") {
      throw Error("parse", source + ":" + std::to_string(line_no) + ": header must be f0,...,f{d-1},label");
    }
    columns = header.size();
  }
  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto fields = detail::split_commas(body);
    const std::string where = source + ":" + std::to_string(line_no);
    if (fields.size() != columns) {
      throw Error("parse", where + ": expected " + std::to_string(columns) + " fields, got " +
                               std::to_string(fields.size()));
    }
    for (std::size_t j = 0; j + 1 < columns; ++j) {
      double v = 0.0;
      if (!detail::parse_number(fields[j], v) || !std::isfinite(v)) {
        throw Error("parse", where + ": bad feature value '" + std::string(fields[j]) + "'");
      }
      values.push_back(v);
    }
    int y = 0;
    if (!detail::parse_number(fields.back(), y) || y < 0) {
      throw Error("parse", where + ": bad label '" + std::string(fields.back()) + "'");
    }
    labels.push_back(y);
  }
  if (labels.empty()) throw Error("empty-dataset", source + ": no data rows");
  Dataset ds;
  const auto d = static_cast<Eigen::Index>(columns - 1);
  ds.features = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), static_cast<Eigen::Index>(labels.size()), d);
  ds.classes = *std::max_element(labels.begin(), labels.end()) + 1;
  ds.labels = std::move(labels);
  return ds;
}

inline Dataset load_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open " + path);
  return read_csv(in, path);
}

// ---------------------------------------------------------------------------
// Partitioning

struct DirichletScheme {
  double beta = 0.5;
};
struct PcddScheme {
  int classes_per_client = 2;
};

struct PartitionSpec {
  std::variant<DirichletScheme, PcddScheme> scheme = DirichletScheme{};
  int clients = 10;
  int min_size = 1;
  std::uint64_t seed = 0;
  double test_fraction = kDefaultTestFraction;
};

namespace detail {

// Splits `total` items by proportions; floors first, then remainders to the
// largest fractional parts with ties going to the lower index.
inline std::vector<int> apportion(int total, std::span<const double> proportions) {
  const std::size_t k = proportions.size();
  std::vector<int> out(k, 0);
  std::vector<double> frac(k, 0.0);
  int assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double exact = total * proportions[i];
    out[i] = static_cast<int>(std::floor(exact));
    frac[i] = exact - out[i];
    assigned += out[i];
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t r = 0; assigned < total; ++r, ++assigned) ++out[order[r % k]];
  return out;
}

inline std::vector<std::vector<int>> indices_by_class(const Dataset& ds) {
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.classes));
  for (int i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);
  return by_class;
}

inline std::vector<ClientShard> build_shards(const Dataset& ds, std::vector<std::vector<int>> assigned,
                                             const PartitionSpec& spec) {
  std::vector<ClientShard> shards;
  shards.reserve(assigned.size());
  for (std::size_t k = 0; k < assigned.size(); ++k) {
    shards.push_back(make_shard(ds, std::move(assigned[k]), spec.test_fraction,
                                derive_seed(spec.seed, {stream::kSplit, k})));
  }
  return shards;
}

}  // namespace detail

/// Per-class Dirichlet allocation over clients. Resamples with an
/// incremented seed while any client falls below min_size.
inline std::vector<ClientShard> dirichlet_partition(const Dataset& ds, const PartitionSpec& spec) {
  const auto* scheme = std::get_if<DirichletScheme>(&spec.scheme);
  if (scheme == nullptr) throw parameter_error("dirichlet_partition: spec scheme is not dirichlet");
  if (!(scheme->beta > 0.0)) throw parameter_error("dirichlet_partition: beta must be positive");
  if (spec.clients < 1) throw parameter_error("dirichlet_partition: need at least one client");
  ds.validate();
  const auto by_class = detail::indices_by_class(ds);
  const auto n_clients = static_cast<std::size_t>(spec.clients);
  constexpr int kMaxAttempts = 1000;
  int best_min = -1;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Rng rng(derive_seed(spec.seed + static_cast<std::uint64_t>(attempt), {stream::kPartition}));
    std::gamma_distribution<double> gamma(scheme->beta, 1.0);
    std::vector<std::vector<int>> assigned(n_clients);
    for (const auto& members_ref : by_class) {
      std::vector<int> members = members_ref;
      std::shuffle(members.begin(), members.end(), rng);
      std::vector<double> p(n_clients);
      double sum = 0.0;
      for (auto& v : p) sum += (v = gamma(rng));
      if (!(sum > 0.0)) {
        // Every draw underflowed; put the class on one client.
        std::fill(p.begin(), p.end(), 0.0);
        p[std::uniform_int_distribution<std::size_t>(0, n_clients - 1)(rng)] = 1.0;
      } else {
        for (auto& v : p) v /= sum;
      }
      const auto alloc = detail::apportion(static_cast<int>(members.size()), p);
      std::size_t pos = 0;
      for (std::size_t k = 0; k < n_clients; ++k) {
        for (int j = 0; j < alloc[k]; ++j) assigned[k].push_back(members[pos++]);
      }
    }
    int smallest = ds.size();
    for (const auto& a : assigned) smallest = std::min(smallest, static_cast<int>(a.size()));
    best_min = std::max(best_min, smallest);
    if (smallest >= spec.min_size && smallest >= 1) return detail::build_shards(ds, std::move(assigned), spec);
  }
  throw Error("partition-infeasible", "dirichlet_partition: no partition with min_size " + std::to_string(spec.min_size) +
                                          " after 1000 attempts (best minimum " + std::to_string(best_min) + ")");
}

/// Each client gets exactly `classes_per_client` distinct classes, dealt
/// from seeded class permutations; a class is split evenly among its holders.
inline std::vector<ClientShard> pcdd_partition(const Dataset& ds, const PartitionSpec& spec) {
  const auto* scheme = std::get_if<PcddScheme>(&spec.scheme);
  if (scheme == nullptr) throw parameter_error("pcdd_partition: spec scheme is not pcdd");
  ds.validate();
  const int c = ds.classes;
  const int per = scheme->classes_per_client;
  if (spec.clients < 1) throw parameter_error("pcdd_partition: need at least one client");
  if (per < 1 || per > c) throw parameter_error("pcdd_partition: classes_per_client must be in [1, C]");
  if (static_cast<long>(spec.clients) * per < c) {
    throw Error("coverage-infeasible", "pcdd_partition: N*classes_per_client = " +
                                           std::to_string(spec.clients * per) + " < C = " + std::to_string(c));
  }
  Rng rng(derive_seed(spec.seed, {stream::kPartition}));
  std::vector<std::vector<int>> holders(static_cast<std::size_t>(c));
  {
    // Class slots are dealt in passes; each pass is a fresh permutation of
    // all classes, so every class is covered once per pass.
    std::vector<int> perm(static_cast<std::size_t>(c));
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<int> pending;  // classes of the current pass not yet dealt
    for (int k = 0; k < spec.clients; ++k) {
      std::vector<int> mine;
      while (static_cast<int>(mine.size()) < per) {
        if (pending.empty()) {
          std::shuffle(perm.begin(), perm.end(), rng);
          pending.assign(perm.rbegin(), perm.rend());
        }
        // Take the next class this client does not hold yet.
        auto it = std::find_if(pending.rbegin(), pending.rend(), [&](int cls) {
          return std::find(mine.begin(), mine.end(), cls) == mine.end();
        });
        if (it == pending.rend()) {
          pending.clear();
          continue;
        }
        mine.push_back(*it);
        pending.erase(std::next(it).base());
      }
      for (int cls : mine) holders[static_cast<std::size_t>(cls)].push_back(k);
    }
  }
  auto by_class = detail::indices_by_class(ds);
  std::vector<std::vector<int>> assigned(static_cast<std::size_t>(spec.clients));
  for (int cls = 0; cls < c; ++cls) {
    auto& members = by_class[static_cast<std::size_t>(cls)];
    const auto& who = holders[static_cast<std::size_t>(cls)];
    const int m = static_cast<int>(members.size());
    const int h = static_cast<int>(who.size());
    if (m < h) {
      throw Error("partition-infeasible", "pcdd_partition: class " + std::to_string(cls) + " has " + std::to_string(m) +
                                              " samples for " + std::to_string(h) + " clients");
    }
    std::shuffle(members.begin(), members.end(), rng);
    std::size_t pos = 0;
    for (int j = 0; j < h; ++j) {
      const int take = m / h + (j < m % h ? 1 : 0);
      auto& dst = assigned[static_cast<std::size_t>(who[static_cast<std::size_t>(j)])];
      for (int t = 0; t < take; ++t) dst.push_back(members[pos++]);
    }
  }
  for (std::size_t k = 0; k < assigned.size(); ++k) {
    if (static_cast<int>(assigned[k].size()) < spec.min_size) {
      throw Error("partition-infeasible", "pcdd_partition: client " + std::to_string(k) + " has " +
                                              std::to_string(assigned[k].size()) + " samples, below min_size " +
                                              std::to_string(spec.min_size));
    }
  }
  return detail::build_shards(ds, std::move(assigned), spec);
}

inline std::vector<ClientShard> partition(const Dataset& ds, const PartitionSpec& spec) {
  if (std::holds_alternative<DirichletScheme>(spec.scheme)) return dirichlet_partition(ds, spec);
  return pcdd_partition(ds, spec);
}

/// Heatmap table: one row per client, one column per class, cells n_{k,c},
/// followed by n_k and |C_k|.
inline void write_partition_heatmap(const std::vector<ClientShard>& shards, int classes, std::ostream& out) {
  out << "client";
  for (int c = 0; c < classes; ++c) out << ",c" << c;
  out << ",n_k,existing_classes\n";
  for (std::size_t k = 0; k < shards.size(); ++k) {
    out << k;
    for (int v : shards[k].counts) out << ',' << v;
    out << ',' << shards[k].n_k << ',' << shards[k].existing_classes.size() << '\n';
  }
}

}  // namespace fedgela
