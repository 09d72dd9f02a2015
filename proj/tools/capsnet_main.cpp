#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "capsnet/bench.hpp"
#include "capsnet/gradcheck.hpp"
#include "capsnet/synthetic.hpp"
#include "capsnet/train.hpp"

namespace fs = std::filesystem;
using namespace capsnet;

namespace {

// exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence or
// total bench failure, 5 failed gradient check
constexpr int kOk = 0;
constexpr int kConfigExit = 2;
constexpr int kDataExit = 3;
constexpr int kNumericExit = 4;
constexpr int kGradcheckExit = 5;

struct ConfigFlags {
  std::string config_path;
  std::string head;
  int n_features = -1;
  int classes = -1;
  int epochs = -1;
  int batch = -1;
  int routing_iters = -1;
  int image_h = -1;
  int image_w = -1;
  std::optional<uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file; flags override its values");
    cmd->add_option("--head", head, "head mode: class | feature")
        ->check(CLI::IsMember({"class", "feature"}));
    cmd->add_option("--n-features", n_features, "feature capsule count (feature mode)");
    cmd->add_option("--classes", classes, "number of classes");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--batch", batch, "batch size");
    cmd->add_option("--routing-iters", routing_iters, "dynamic routing iterations");
    cmd->add_option("--image-h", image_h, "input image height");
    cmd->add_option("--image-w", image_w, "input image width");
    cmd->add_option("--seed", seed, "RNG seed");
  }

  NetworkConfig resolve() const {
    NetworkConfig cfg;
    if (!config_path.empty()) cfg = NetworkConfig::from_json_file(config_path);
    if (!head.empty()) cfg.head = head_mode_from_name(head);
    if (n_features >= 0) cfg.n_features = n_features;
    if (classes >= 0) cfg.n_class = classes;
    if (epochs >= 0) cfg.epochs = epochs;
    if (batch >= 0) cfg.batch_size = batch;
    if (routing_iters >= 0) cfg.routing_iters = routing_iters;
    if (image_h >= 0) cfg.image_h = image_h;
    if (image_w >= 0) cfg.image_w = image_w;
    if (seed) cfg.seed = *seed;
    return cfg;
  }
};

bool has_idx_train(const fs::path& dir) {
  return fs::exists(dir / "train-images-idx3-ubyte") &&
         fs::exists(dir / "train-labels-idx1-ubyte");
}

bool has_idx_test(const fs::path& dir) {
  return fs::exists(dir / "t10k-images-idx3-ubyte") && fs::exists(dir / "t10k-labels-idx1-ubyte");
}

// A data directory is either MNIST-style IDX files or a manifest.csv corpus
// that gets split locally.
Dataset load_split(const std::string& data_dir, const NetworkConfig& cfg, bool want_test) {
  const fs::path dir(data_dir);
  if (has_idx_train(dir)) {
    if (want_test) {
      if (!has_idx_test(dir))
        throw DataError(data_dir + " has no t10k-images-idx3-ubyte/t10k-labels-idx1-ubyte pair");
      Dataset d = load_idx((dir / "t10k-images-idx3-ubyte").string(),
                           (dir / "t10k-labels-idx1-ubyte").string());
      d.split_tag = "test";
      return d;
    }
    Dataset d = load_idx((dir / "train-images-idx3-ubyte").string(),
                         (dir / "train-labels-idx1-ubyte").string());
    d.split_tag = "train";
    return d;
  }
  if (fs::exists(dir / "manifest.csv")) {
    Dataset all = load_image_dir(data_dir, "manifest.csv", cfg.image_h, cfg.image_w,
                                 cfg.resize_policy);
    auto [train, test] = split_dataset(all, cfg.split_ratio, cfg.seed);
    return want_test ? std::move(test) : std::move(train);
  }
  throw DataError(data_dir +
                  ": no recognizable dataset (expected train-images-idx3-ubyte/"
                  "train-labels-idx1-ubyte or manifest.csv)");
}

void write_run_manifest(const fs::path& out_dir, const NetworkConfig& cfg,
                        const std::string& data_dir, const Dataset& train) {
  nlohmann::ordered_json j;
  j["config"] = nlohmann::ordered_json::parse(cfg.to_json());
  char fp[32];
  std::snprintf(fp, sizeof(fp), "%016llx",
                static_cast<unsigned long long>(train.fingerprint()));
  j["dataset"] = {{"path", data_dir},
                  {"fingerprint", fp},
                  {"samples", train.size()},
                  {"classes", train.class_count}};
  j["seed"] = cfg.seed;
  j["artifacts"] = {{"checkpoint", (out_dir / "checkpoint.bin").string()},
                    {"metrics", (out_dir / "metrics.csv").string()}};
  std::ofstream out(out_dir / "manifest.json");
  if (!out) throw DataError("cannot write " + (out_dir / "manifest.json").string());
  out << j.dump(2) << '\n';
}

int cmd_train(const ConfigFlags& flags, const std::string& data_dir,
              const std::string& out_dir) {
  if (data_dir.empty()) {
    std::cerr << "error: missing --data (path to the training data)\n";
    return kDataExit;
  }
  NetworkConfig cfg = flags.resolve();
  cfg.validate();
  Dataset train_set = load_split(data_dir, cfg, /*want_test=*/false);
  fs::create_directories(out_dir);
  write_run_manifest(out_dir, cfg, data_dir, train_set);

  TrainResult result = train(cfg, train_set);
  result.best.save((fs::path(out_dir) / "checkpoint.bin").string());
  result.log.write_csv((fs::path(out_dir) / "metrics.csv").string());
  if (!result.log.rows.empty()) {
    const EpochRow& last = result.log.rows.back();
    std::printf("trained %d epochs; best train accuracy %.4f at epoch %d; final loss %.6f\n",
                last.epoch, result.best.train_accuracy, result.best.epoch, last.mean_loss);
  } else {
    std::printf("epochs=0: saved the initialized model\n");
  }
  std::printf("artifacts in %s: checkpoint.bin manifest.json metrics.csv\n", out_dir.c_str());
  return kOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& out_dir) {
  if (checkpoint_path.empty()) {
    std::cerr << "error: missing --checkpoint\n";
    return kConfigExit;
  }
  if (data_dir.empty()) {
    std::cerr << "error: missing --data (path to the evaluation data)\n";
    return kDataExit;
  }
  Checkpoint ckpt = Checkpoint::load(checkpoint_path);
  Dataset test_set = load_split(data_dir, ckpt.config, /*want_test=*/true);
  EvalResult res = evaluate(ckpt, test_set);

  std::printf("accuracy %.4f (%lld/%lld)\n", res.accuracy,
              static_cast<long long>(res.correct), static_cast<long long>(res.total));
  std::printf("class  accuracy\n");
  for (size_t c = 0; c < res.per_class_accuracy.size(); ++c)
    std::printf("%5zu  %.4f\n", c, res.per_class_accuracy[c]);
  fs::create_directories(out_dir);
  const std::string confusion_path = (fs::path(out_dir) / "confusion.csv").string();
  res.write_confusion_csv(confusion_path);
  std::printf("confusion matrix written to %s\n", confusion_path.c_str());
  return kOk;
}

int cmd_bench(const std::string& sweep_path, std::optional<int64_t> budget,
              const std::string& out_dir) {
  if (sweep_path.empty()) {
    std::cerr << "error: missing --sweep (sweep spec JSON)\n";
    return kConfigExit;
  }
  SweepSpec spec = SweepSpec::from_json_file(sweep_path);
  if (budget) spec.budget_bytes = *budget;
  SweepResult result = measure(spec);
  bool any_ok = false, any_missing = false;
  for (const SweepCell& c : result.cells) {
    any_ok = any_ok || c.ok;
    any_missing = any_missing || !c.ok;
  }
  if (!any_ok) {
    std::cerr << "error: every sweep cell failed\n";
    for (const SweepCell& c : result.cells)
      std::cerr << "  " << c.head << " n_features=" << c.n_features << ": " << c.error << '\n';
    return kNumericExit;
  }
  emit_report(result, out_dir);
  std::printf("%-16s %12s %18s %10s\n", "column", "sec/sample", "act MiB/sample", "max batch");
  for (const SweepCell& c : result.cells) {
    const std::string col = c.head == "class" ? "capsule_network"
                                              : "nf_" + std::to_string(c.n_features);
    if (c.ok)
      std::printf("%-16s %12.6f %18.4f %10lld\n", col.c_str(), c.seconds_per_sample,
                  c.activation_mib_per_sample, static_cast<long long>(c.max_batch_size));
    else
      std::printf("%-16s %12s %18s %10s  (%s)\n", col.c_str(), "missing", "missing", "missing",
                  c.error.c_str());
  }
  if (any_missing) std::printf("note: some cells failed and are marked missing\n");
  std::printf("reports written to %s\n", out_dir.c_str());
  return kOk;
}

int cmd_gradcheck(uint64_t seed, const std::string& layer, int probes, bool inject_fault) {
  GradCheckOptions opts;
  opts.seed = seed;
  opts.filter = layer;
  opts.probes = probes;
  opts.inject_fault = inject_fault;
  const std::vector<GradCheckResult> results = run_gradcheck(opts);
  if (results.empty()) {
    std::cerr << "error: no gradient checks match --layer '" << layer << "'\n";
    return kConfigExit;
  }
  bool all_pass = true;
  std::printf("%-18s %14s %7s  %s\n", "layer", "worst_rel_err", "probes", "status");
  for (const GradCheckResult& r : results) {
    std::printf("%-18s %14.3e %7d  %s\n", r.layer.c_str(), r.max_rel_err, r.probes,
                r.pass ? "PASS" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  std::printf("tolerance %.1e (%zu-bit floats)\n", default_gradcheck_tolerance(),
              sizeof(real) * 8);
  return all_pass ? kOk : kGradcheckExit;
}

int cmd_account(const ConfigFlags& flags, std::optional<int64_t> budget,
                const std::string& csv_path, const std::string& json_path) {
  NetworkConfig cfg = flags.resolve();
  cfg.validate();
  const CostReport report = account(cfg);
  std::fputs(report.to_csv().c_str(), stdout);
  std::printf("head parameter memory: %.4f MiB\n", report.head_param_mib());
  if (budget) {
    const int64_t n = max_batch(report, *budget);
    std::printf("max batch for %lld-byte budget: %lld\n", static_cast<long long>(*budget),
                static_cast<long long>(n));
  }
  if (!csv_path.empty()) {
    std::ofstream out(csv_path);
    if (!out) throw DataError("cannot write " + csv_path);
    out << report.to_csv();
  }
  if (!json_path.empty()) {
    nlohmann::ordered_json j;
    j["config"] = nlohmann::ordered_json::parse(cfg.to_json());
    j["config_fingerprint"] = fnv1a64(cfg.to_json());
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    auto row_json = [](const LayerCost& r) {
      return nlohmann::ordered_json{{"layer", r.name},
                                    {"params", r.params},
                                    {"param_bytes", r.param_bytes},
                                    {"grad_bytes", r.grad_bytes},
                                    {"optimizer_bytes", r.optimizer_bytes},
                                    {"activation_bytes_per_sample", r.activation_bytes_per_sample},
                                    {"forward_flops_per_sample", r.forward_flops_per_sample}};
    };
    for (const LayerCost& r : report.rows) rows.push_back(row_json(r));
    j["rows"] = rows;
    j["total"] = row_json(report.totals());
    j["head_param_mib"] = report.head_param_mib();
    if (budget) j["max_batch"] = max_batch(report, *budget);
    std::ofstream out(json_path);
    if (!out) throw DataError("cannot write " + json_path);
    out << j.dump(2) << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capsule networks with dynamic routing: class-capsule and "
               "feature-capsule heads, training, cost accounting and benchmarks"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint artifacts");
  ConfigFlags train_flags;
  train_flags.attach(train_cmd);
  std::string train_data, train_out = "capsnet_run";
  train_cmd->add_option("--data", train_data, "dataset directory (IDX pair or manifest.csv)");
  train_cmd->add_option("--out", train_out, "output directory for run artifacts");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::string eval_ckpt, eval_data, eval_out = ".";
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint.bin written by train");
  eval_cmd->add_option("--data", eval_data, "dataset directory (IDX pair or manifest.csv)");
  eval_cmd->add_option("--out", eval_out, "directory for confusion.csv");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "run a cost/timing sweep and emit reports");
  std::string bench_sweep, bench_out = "bench_report";
  std::optional<int64_t> bench_budget;
  bench_cmd->add_option("--sweep", bench_sweep, "sweep spec JSON file");
  bench_cmd->add_option("--budget", bench_budget, "memory budget in bytes (overrides the spec)");
  bench_cmd->add_option("--out", bench_out, "report output directory");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  uint64_t grad_seed = 1;
  std::string grad_layer;
  int grad_probes = 24;
  bool grad_fault = false;
  grad_cmd->add_option("--seed", grad_seed, "RNG seed for probe selection");
  grad_cmd->add_option("--layer", grad_layer, "run only checks whose name contains this");
  grad_cmd->add_option("--probes", grad_probes, "probes per layer (>= 20 recommended)");
  grad_cmd->add_flag("--inject-fault", grad_fault,
                     "self-test: add a knowingly wrong backward rule that must fail");

  // account
  auto* acct_cmd = app.add_subcommand("account", "closed-form cost report for a config");
  ConfigFlags acct_flags;
  acct_flags.attach(acct_cmd);
  std::optional<int64_t> acct_budget;
  std::string acct_csv, acct_json;
  acct_cmd->add_option("--budget", acct_budget, "memory budget in bytes for max-batch");
  acct_cmd->add_option("--csv", acct_csv, "write the report as CSV");
  acct_cmd->add_option("--json", acct_json, "write the report as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigExit;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_flags, train_data, train_out);
    if (eval_cmd->parsed()) return cmd_eval(eval_ckpt, eval_data, eval_out);
    if (bench_cmd->parsed()) return cmd_bench(bench_sweep, bench_budget, bench_out);
    if (grad_cmd->parsed()) return cmd_gradcheck(grad_seed, grad_layer, grad_probes, grad_fault);
    if (acct_cmd->parsed()) return cmd_account(acct_flags, acct_budget, acct_csv, acct_json);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataExit;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumericExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kOk;
}
