#pragma once

// Experiment drivers shared by the CLI and the test suites: single runs,
// multi-arm sweeps, gradient checks, partition reports and the
// layer-peeled oracle.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "fedgela/config.hpp"
#include "fedgela/data.hpp"
#include "fedgela/etf.hpp"
#include "fedgela/fed.hpp"
#include "fedgela/io.hpp"
#include "fedgela/metrics.hpp"
#include "fedgela/nn.hpp"

namespace fedgela {

namespace fs = std::filesystem;

struct RunOutcome {
  Dataset dataset;
  std::vector<ClientShard> shards;
  FederationResult result;
};

inline RunOutcome run_experiment(const RunConfig& cfg) {
  RunOutcome out;
  out.dataset = load_dataset(cfg);
  out.shards = partition(out.dataset, partition_spec(cfg));
  out.result = run_federation(federation_config(cfg), out.dataset, out.shards);
  return out;
}

/// Writes round_log.csv, manifest.json and checkpoints/ under `dir`.
inline void write_run_outputs(const RunConfig& cfg, const RunOutcome& run, const fs::path& dir) {
  fs::create_directories(dir / "checkpoints");
  {
    std::ofstream o(dir / "round_log.csv", std::ios::binary);
    if (!o) throw Error("io", "cannot write " + (dir / "round_log.csv").string());
    write_round_log(run.result.logs, o);
  }
  {
    std::ofstream o(dir / "manifest.json", std::ios::binary);
    o << run_manifest(cfg, run.dataset, run.result.logs).dump(2) << '\n';
  }
  save_checkpoint(run.result.server.global, (dir / "checkpoints" / "global.ckpt").string());
  for (const auto& c : run.result.clients) {
    if (c.local) save_checkpoint(*c.local, (dir / "checkpoints" / ("client_" + std::to_string(c.id) + ".ckpt")).string());
  }
}

// ---------------------------------------------------------------------------
// Sweeps

struct Arm {
  std::string label;
  std::vector<std::string> overrides;  // key=value
};

/// "fedavg" -> algo=fedavg; "ge-only"/"la-only" name the ablation arms;
/// "label:key=value;key=value" gives explicit overrides.
inline Arm parse_arm(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    std::string algo = text;
    if (text == "ge-only") algo = "fedge";
    if (text == "la-only") algo = "fedla";
    if (!parse_algo(algo)) throw ConfigError("arm", "sweep: unknown arm '" + text + "'");
    return Arm{text, {"algo=" + algo}};
  }
  Arm a{text.substr(0, colon), {}};
  std::string rest = text.substr(colon + 1);
  std::size_t start = 0;
  while (start <= rest.size()) {
    const auto semi = rest.find(';', start);
    std::string part = rest.substr(start, semi == std::string::npos ? std::string::npos : semi - start);
    if (!detail::trim(part).empty()) a.overrides.push_back(std::string(detail::trim(part)));
    if (semi == std::string::npos) break;
    start = semi + 1;
  }
  if (a.label.empty()) throw ConfigError("arm", "sweep: empty arm label in '" + text + "'");
  return a;
}

struct SweepRow {
  std::string arm;
  std::string algo;
  double ew = 0.0;
  std::vector<double> ga;  // final GA per seed
  std::vector<double> pa;
  double ga_mean = 0.0, ga_std = 0.0, pa_mean = 0.0, pa_std = 0.0;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

/// Runs every arm for every seed (config overrides applied on top of the
/// base builder; data and partition seeds follow the master seed, so all
/// arms of one seed share the same split). Per-run outputs go under
/// out_root/<arm>/seed_<s> when out_root is non-empty.
inline std::vector<SweepRow> run_sweep(const ConfigBuilder& base, const std::vector<Arm>& arms,
                                       const std::vector<std::uint64_t>& seeds, const fs::path& out_root,
                                       const std::function<void(const std::string&)>& progress = {}) {
  if (arms.size() < 2) throw ConfigError("arm", "sweep: need at least two arms");
  if (seeds.empty()) throw ConfigError("seeds", "sweep: need at least one seed");
  std::vector<SweepRow> rows;
  for (const auto& arm : arms) {
    SweepRow row;
    row.arm = arm.label;
    for (std::uint64_t s : seeds) {
      ConfigBuilder b = base;
      for (const auto& o : arm.overrides) b.set_assignment(o);
      b.set("seed", std::to_string(s));
      if (!out_root.empty()) b.set("out_dir", (out_root / arm.label / ("seed_" + std::to_string(s))).string());
      const RunConfig cfg = b.build();
      const RunOutcome run = run_experiment(cfg);
      if (!out_root.empty()) write_run_outputs(cfg, run, cfg.out_dir);
      row.algo = to_string(cfg.algo);
      row.ew = cfg.ew;
      const auto& logs = run.result.logs;
      row.ga.push_back(logs.empty() ? std::nan("") : logs.back().ga);
      row.pa.push_back(logs.empty() ? std::nan("") : logs.back().pa);
      if (progress) {
        progress(arm.label + " seed " + std::to_string(s) + ": ga=" + format_real(row.ga.back()) +
                 " pa=" + format_real(row.pa.back()));
      }
    }
    std::tie(row.ga_mean, row.ga_std) = mean_std(row.ga);
    std::tie(row.pa_mean, row.pa_std) = mean_std(row.pa);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_sweep_summary(const std::vector<SweepRow>& rows, std::ostream& o) {
  o << "arm,algo,ew,seeds,ga_mean,ga_std,pa_mean,pa_std\n";
  for (const auto& r : rows) {
    o << r.arm << ',' << r.algo << ',' << format_real(r.ew) << ',' << r.ga.size() << ',' << format_real(r.ga_mean)
      << ',' << format_real(r.ga_std) << ',' << format_real(r.pa_mean) << ',' << format_real(r.pa_std) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Gradient check matrix

struct GradCheckCase {
  AlgoKind algo;
  bool phi_with_zeros;
  bool restricted_mask;
  GradCheckResult result;
};

inline constexpr double kGradCheckTolerance = 1e-4;

/// finite_diff_check for every algorithm x {uniform phi, phi with zeros} x
/// {full mask, restricted mask} on a 2-layer net with C = d = 5.
inline std::vector<GradCheckCase> run_gradcheck_matrix(std::uint64_t seed, int probes = 64, double step = 1e-5,
                                                       const std::function<void(ModelParams&)>& tamper = {}) {
  constexpr int kClasses = 5;
  constexpr int kInput = 6;
  constexpr int kBatch = 12;
  const std::vector<int> allowed = {0, 1, 2};

  Rng rng(derive_seed(seed, {101}));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd x(kBatch, kInput);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  std::vector<int> y;
  for (int i = 0; i < kBatch; ++i) y.push_back(allowed[static_cast<std::size_t>(i) % allowed.size()]);

  const EtfClassifier etf = make_etf(kClasses, kClasses, derive_seed(seed, {102}), 4.0);
  const Eigen::MatrixXd etf_w = etf.weights();

  std::vector<GradCheckCase> out;
  std::uint64_t case_id = 0;
  for (AlgoKind algo : {AlgoKind::FedAvg, AlgoKind::FedProx, AlgoKind::FedGE, AlgoKind::FedGELA, AlgoKind::FedLA}) {
    for (bool zeros : {false, true}) {
      for (bool restricted : {false, true}) {
        ModelParams p;
        p.backbone = init_backbone({kInput, 8, kClasses}, derive_seed(seed, {103, case_id}));
        for (auto& b : p.backbone.biases) {
          for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = 0.1 * normal(rng);
        }
        if (has_learnable_head(algo)) p.head = init_head(kClasses, kClasses, derive_seed(seed, {104, case_id}));
        ModelParams anchor = p;
        for (auto s : param_spans(anchor)) {
          for (double& v : s) v += 0.05 * normal(rng);
        }
        Objective obj;
        obj.fixed_classifier = has_learnable_head(algo) ? nullptr : &etf_w;
        obj.phi = zeros ? PhiVector{Eigen::VectorXd{{1.5, 2.0, 1.5, 0.0, 0.0}}} : PhiVector::ones(kClasses);
        obj.mask = restricted ? ClassMask::of(kClasses, allowed) : ClassMask::full(kClasses);
        obj.feature_norm_sq = 1.0;
        if (algo == AlgoKind::FedProx) {
          obj.prox_mu = 0.1;
          obj.prox_anchor = &anchor;
        }
        GradCheckCase c{algo, zeros, restricted, {}};
        c.result = finite_diff_check(p, x, y, obj, step, probes, derive_seed(seed, {105, case_id}), tamper);
        out.push_back(c);
        ++case_id;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer-peeled oracle

struct LpmOracleReport {
  double min_cosine = 0.0;  // min over samples of cos(h_i, m_{y_i})
  double nc1 = 0.0;
  Eigen::MatrixXd features;
};

inline LpmOracleReport run_lpm_oracle(int classes, int d, std::span<const int> per_class_counts, int iterations,
                                      double lr, double ew, double eh, std::uint64_t seed) {
  const EtfClassifier etf = make_etf(d, classes, derive_seed(seed, {stream::kEtf}), ew);
  std::vector<int> labels;
  for (int c = 0; c < classes; ++c) labels.insert(labels.end(), static_cast<std::size_t>(per_class_counts[static_cast<std::size_t>(c)]), c);
  LpmOracleReport r;
  r.features = lpm_feature_fit(etf, labels, eh, iterations, lr, derive_seed(seed, {stream::kInit}));
  r.min_cosine = 1.0;
  for (Eigen::Index i = 0; i < r.features.rows(); ++i) {
    const Eigen::VectorXd m = etf.m.col(labels[static_cast<std::size_t>(i)]);
    r.min_cosine = std::min(r.min_cosine, r.features.row(i).dot(m) / (r.features.row(i).norm() * m.norm()));
  }
  r.nc1 = nc1_variability(r.features, labels);
  return r;
}

}  // namespace fedgela
