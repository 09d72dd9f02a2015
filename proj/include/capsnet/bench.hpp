#pragma once

#include <string>
#include <vector>

#include "capsnet/config.hpp"

namespace capsnet {

// One accounted layer: parameter counts, the byte footprint of parameters /
// gradients / Adam state, activation bytes retained per sample for backward,
// and forward FLOPs per sample. 4 bytes per float.
struct LayerCost {
  std::string name;
  int64_t params = 0;
  int64_t param_bytes = 0;
  int64_t grad_bytes = 0;
  int64_t optimizer_bytes = 0;
  int64_t activation_bytes_per_sample = 0;
  int64_t forward_flops_per_sample = 0;

  std::string csv_row() const;
};

struct CostReport {
  std::vector<LayerCost> rows;

  LayerCost totals() const;
  // parameter + gradient + optimizer bytes: resident regardless of batch
  int64_t fixed_bytes() const;
  int64_t activation_bytes_per_sample() const;
  int64_t total_params() const;
  // parameter bytes of the classification head in MiB (the head is the only
  // part of the feature-mode network whose size depends on the class count)
  double head_param_mib() const;
  const LayerCost& row(const std::string& name) const;
  std::string to_csv() const;
};

// Closed-form cost model for a network config. Activation accounting counts
// every tensor retained for backward, including the routing intermediates
// (u_hat once; b, c, s, v per iteration).
CostReport account(const NetworkConfig& config);

// floor((budget - fixed) / activation_bytes_per_sample); errors when the
// budget cannot even hold the fixed footprint or a single sample.
int64_t max_batch(const CostReport& report, int64_t budget_bytes);

// One sweep: a class-mode baseline column plus one feature-mode column per
// requested feature count, each timed over repeated forward+backward passes.
struct SweepSpec {
  std::string dataset = "synthetic";  // "synthetic" or a data directory
  std::string label = "synthetic";    // row label in reports
  int image_h = 28;
  int image_w = 28;
  int n_class = 10;
  std::vector<int> n_features{2, 4, 6, 8, 10};
  bool include_class_baseline = true;
  int routing_iters = 3;
  int batch_size = 16;
  int repetitions = 5;       // timing reps; median is reported
  int samples_per_rep = 64;  // samples processed per rep
  int64_t budget_bytes = 2ll * 1024 * 1024 * 1024;
  uint64_t seed = 1;

  void validate() const;
  std::string to_json() const;
  static SweepSpec from_json_file(const std::string& path);
};

struct SweepCell {
  std::string head;  // "class" | "feature"
  int n_features = 0;
  bool ok = false;
  std::string error;
  double seconds_per_sample = 0;  // median over repetitions
  int64_t max_batch_size = 0;
  double activation_mib_per_sample = 0;
  int64_t params = 0;
  uint64_t config_fingerprint = 0;
};

struct SweepResult {
  SweepSpec spec;
  std::vector<SweepCell> cells;
};

// Runs every cell; a failed cell is marked missing instead of aborting the
// sweep. Repetitions are interleaved across cells so clock drift hits every
// column equally.
SweepResult measure(const SweepSpec& spec);

// Writes report_time.csv / report_memory.csv / report_max_batch.csv /
// report.json into out_dir. Stable column order; errors (without writing)
// when no cell completed.
void emit_report(const SweepResult& result, const std::string& out_dir);

uint64_t fnv1a64(const std::string& text);

}  // namespace capsnet
