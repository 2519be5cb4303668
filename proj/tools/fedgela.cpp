// fedgela: command-line driver for federated experiments and diagnostics.
//
//   fedgela run --config exp.cfg --set rounds=5
//   fedgela sweep --config exp.cfg --arm fedavg --arm fedgela --seeds 1,2,3 --out sweep/
//   fedgela gradcheck
//   fedgela partition-report --config exp.cfg --out heatmap.csv
//   fedgela gen-data --set classes=10 --out data.csv
//   fedgela lpm-oracle --classes 4 --dim 8 --per-class 10,10,10,10
//
// Exit codes: 0 success, 1 check failure, 2 config error, 3 runtime error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedgela/fedgela.hpp"

namespace {

using namespace fedgela;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "key = value config file");
    app->add_option("-s,--set", overrides, "override a config key (key=value), repeatable");
  }

  ConfigBuilder builder() const {
    ConfigBuilder b;
    if (!config_path.empty()) b.parse_file(config_path);
    for (const auto& o : overrides) b.set_assignment(o);
    return b;
  }
};

// Relative output paths are placed under $FEDGELA_OUT_ROOT when it is set.
fs::path resolve_out(const std::string& path) {
  fs::path p(path);
  if (const char* root = std::getenv("FEDGELA_OUT_ROOT"); root != nullptr && *root != '\0' && p.is_relative()) {
    return fs::path(root) / p;
  }
  return p;
}

int cmd_run(const ConfigArgs& args, const std::string& out_override) {
  ConfigBuilder b = args.builder();
  if (!out_override.empty()) b.set("out_dir", out_override);
  RunConfig cfg = b.build();
  const fs::path dir = resolve_out(cfg.out_dir);
  const RunOutcome run = run_experiment(cfg);
  write_run_outputs(cfg, run, dir);
  for (const auto& l : run.result.logs) {
    std::cout << "round " << l.round << "  ga=" << format_real(l.ga) << "  pa=" << format_real(l.pa)
              << "  loss=" << format_real(l.mean_train_loss) << '\n';
  }
  std::cout << "wrote " << (dir / "round_log.csv").string() << '\n';
  return kExitOk;
}

int cmd_sweep(const ConfigArgs& args, const std::vector<std::string>& arm_texts, const std::vector<std::uint64_t>& seeds,
              const std::string& out) {
  std::vector<Arm> arms;
  for (const auto& t : arm_texts) arms.push_back(parse_arm(t));
  const fs::path root = resolve_out(out);
  const auto rows = run_sweep(args.builder(), arms, seeds, root, [](const std::string& msg) { std::cout << msg << '\n'; });
  fs::create_directories(root);
  std::ofstream o(root / "summary.csv", std::ios::binary);
  write_sweep_summary(rows, o);
  write_sweep_summary(rows, std::cout);
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, int probes, double step, bool inject_fault) {
  std::function<void(ModelParams&)> tamper;
  if (inject_fault) {
    tamper = [](ModelParams& g) {
      for (auto s : param_spans(g)) std::fill(s.begin(), s.end(), 0.0);
    };
  }
  const auto cases = run_gradcheck_matrix(seed, probes, step, tamper);
  const GradCheckCase* worst = nullptr;
  for (const auto& c : cases) {
    std::cout << to_string(c.algo) << " phi=" << (c.phi_with_zeros ? "zeros" : "uniform")
              << " mask=" << (c.restricted_mask ? "restricted" : "full")
              << " max_rel_err=" << format_real(c.result.max_rel_error) << '\n';
    if (worst == nullptr || c.result.max_rel_error > worst->result.max_rel_error) worst = &c;
  }
  if (worst->result.max_rel_error >= kGradCheckTolerance) {
    std::cerr << "gradcheck FAILED: worst " << to_string(worst->algo) << " tensor " << worst->result.worst_tensor
              << " index " << worst->result.worst_index << " analytic=" << format_real(worst->result.analytic)
              << " numeric=" << format_real(worst->result.numeric) << '\n';
    return kExitCheckFailed;
  }
  std::cout << "gradcheck ok\n";
  return kExitOk;
}

int cmd_partition_report(const ConfigArgs& args, const std::string& out) {
  ConfigBuilder b = args.builder();
  // Only the data and partition keys matter here.
  b.set("algo", "fedavg");
  const RunConfig cfg = b.build();
  const Dataset ds = load_dataset(cfg);
  const auto shards = partition(ds, partition_spec(cfg));
  if (out.empty()) {
    write_partition_heatmap(shards, ds.classes, std::cout);
  } else {
    const fs::path p = resolve_out(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream o(p, std::ios::binary);
    write_partition_heatmap(shards, ds.classes, o);
  }
  return kExitOk;
}

int cmd_gen_data(const ConfigArgs& args, const std::string& out) {
  ConfigBuilder b = args.builder();
  b.set("dataset", "synthetic");
  b.set("algo", "fedavg");
  const RunConfig cfg = b.build();
  const fs::path p = resolve_out(out);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  save_csv(load_dataset(cfg), p.string());
  std::cout << "wrote " << p.string() << '\n';
  return kExitOk;
}

int cmd_lpm(int classes, int dim, std::vector<int> per_class, int iters, double lr, double ew, double eh,
            std::uint64_t seed) {
  if (per_class.empty()) per_class.assign(static_cast<std::size_t>(classes), 10);
  if (static_cast<int>(per_class.size()) != classes) {
    throw ConfigError("per-class", "lpm-oracle: --per-class needs one count per class");
  }
  const auto r = run_lpm_oracle(classes, dim, per_class, iters, lr, ew, eh, seed);
  std::cout << "min_cosine=" << format_real(r.min_cosine) << "\nnc1=" << format_real(r.nc1) << '\n';
  return r.min_cosine > 0.99 && r.nc1 < 1e-3 ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning with a fixed simplex ETF classifier and local adaptation"};
  app.require_subcommand(1);

  ConfigArgs run_args;
  std::string run_out;
  auto* run = app.add_subcommand("run", "run one federated experiment");
  run_args.attach(run);
  run->add_option("-o,--out", run_out, "output directory (overrides out_dir)");

  ConfigArgs sweep_args;
  std::vector<std::string> arms;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string sweep_out = "runs/sweep";
  auto* sweep = app.add_subcommand("sweep", "run several arms over several seeds and summarize");
  sweep_args.attach(sweep);
  sweep->add_option("-a,--arm", arms, "arm: algo name, ge-only, la-only, or label:key=value;key=value")->required();
  sweep->add_option("--seeds", seeds, "master seeds")->delimiter(',');
  sweep->add_option("-o,--out", sweep_out, "output root");

  std::uint64_t gc_seed = 7;
  int gc_probes = 64;
  double gc_step = 1e-5;
  bool gc_fault = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of all loss variants");
  gradcheck->add_option("--seed", gc_seed);
  gradcheck->add_option("--probes", gc_probes);
  gradcheck->add_option("--step", gc_step);
  gradcheck->add_flag("--inject-fault", gc_fault, "zero the analytic gradient (oracle sensitivity check)");

  ConfigArgs pr_args;
  std::string pr_out;
  auto* pr = app.add_subcommand("partition-report", "per-client class-count heatmap CSV");
  pr_args.attach(pr);
  pr->add_option("-o,--out", pr_out, "output CSV (default stdout)");

  ConfigArgs gd_args;
  std::string gd_out = "data.csv";
  auto* gd = app.add_subcommand("gen-data", "write a synthetic dataset as CSV");
  gd_args.attach(gd);
  gd->add_option("-o,--out", gd_out);

  int lpm_classes = 4, lpm_dim = 8, lpm_iters = 2000;
  std::vector<int> lpm_counts;
  double lpm_lr = 0.5, lpm_ew = 1.0, lpm_eh = 1.0;
  std::uint64_t lpm_seed = 0;
  auto* lpm = app.add_subcommand("lpm-oracle", "fit free features under a fixed ETF; report cosines and NC1");
  lpm->add_option("--classes", lpm_classes);
  lpm->add_option("--dim", lpm_dim);
  lpm->add_option("--per-class", lpm_counts)->delimiter(',');
  lpm->add_option("--iters", lpm_iters);
  lpm->add_option("--lr", lpm_lr);
  lpm->add_option("--ew", lpm_ew);
  lpm->add_option("--eh", lpm_eh);
  lpm->add_option("--seed", lpm_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_args, run_out);
    if (*sweep) return cmd_sweep(sweep_args, arms, seeds, sweep_out);
    if (*gradcheck) return cmd_gradcheck(gc_seed, gc_probes, gc_step, gc_fault);
    if (*pr) return cmd_partition_report(pr_args, pr_out);
    if (*gd) return cmd_gen_data(gd_args, gd_out);
    if (*lpm) return cmd_lpm(lpm_classes, lpm_dim, lpm_counts, lpm_iters, lpm_lr, lpm_ew, lpm_eh, lpm_seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}
