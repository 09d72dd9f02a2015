#pragma once

#include <string>
#include <utility>
#include <vector>

#include "capsnet/data.hpp"
#include "capsnet/network.hpp"

namespace capsnet {

struct EpochRow {
  int epoch = 0;
  double mean_loss = 0;
  double train_accuracy = 0;
  double seconds = 0;
  double seconds_per_sample = 0;
};

struct MetricLog {
  std::vector<EpochRow> rows;
  void write_csv(const std::string& path) const;
};

// All parameter tensors as flat little-endian 32-bit float arrays behind a
// text manifest (key-value header recording config, epoch, train accuracy
// and the tensor table). Reloading on the same machine reproduces forward
// outputs bit for bit.
struct Checkpoint {
  NetworkConfig config;
  int epoch = 0;
  double train_accuracy = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
  static Checkpoint snapshot(CapsuleNetwork& net, int epoch, double train_accuracy);
  // builds a network and overwrites its parameters with the stored arrays
  CapsuleNetwork restore() const;
};

// Standard Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<real>> m, v;
};

void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<real>>& grads,
               AdamState& state, double lr);

struct TrainResult {
  Checkpoint best;
  MetricLog log;
};

// Epoch loop over the train set; keeps the checkpoint with the highest
// training accuracy. Deterministic under config.seed (single-threaded
// numerics). Non-finite loss aborts with the last finite epoch in the error.
TrainResult train(const NetworkConfig& config, const Dataset& train_set);

struct EvalResult {
  double accuracy = 0;
  int64_t correct = 0;
  int64_t total = 0;
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<int64_t>> confusion;  // [true][predicted]

  void write_confusion_csv(const std::string& path) const;
};

EvalResult evaluate(CapsuleNetwork& net, const Dataset& test_set);
EvalResult evaluate(const Checkpoint& ckpt, const Dataset& test_set);

}  // namespace capsnet
