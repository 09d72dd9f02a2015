#pragma once

#include <cstdint>
#include <string>

#include "capsnet/common.hpp"

namespace capsnet {

enum class HeadMode { kClass, kFeature };

std::string head_mode_name(HeadMode mode);
HeadMode head_mode_from_name(const std::string& name);

struct LossConfig {
  real m_plus = real(0.9);
  real m_minus = real(0.1);
  real lambda = real(0.5);
  real beta = real(0.0005);
  void validate() const;
};

// Full architecture + training hyperparameters. One record describes one
// experiment; the CLI serializes it into every run manifest.
struct NetworkConfig {
  HeadMode head = HeadMode::kClass;
  int n_class = 10;
  int n_features = 0;  // must be set explicitly in feature mode
  int routing_iters = 3;
  int image_h = 28;
  int image_w = 28;
  LossConfig loss;
  std::string optimizer = "adam";
  double learning_rate = 1e-3;
  int batch_size = 64;
  int epochs = 10;
  uint64_t seed = 1;
  std::string resize_policy = "pad";  // "pad" | "resize" for directory corpora
  double split_ratio = 2.0 / 3.0;     // train fraction when splitting locally

  // number of output capsules the routing layer produces
  int n_out() const { return head == HeadMode::kClass ? n_class : n_features; }
  void validate() const;  // throws ConfigError

  std::string to_json() const;
  static NetworkConfig from_json(const std::string& text);
  static NetworkConfig from_json_file(const std::string& path);
};

}  // namespace capsnet
