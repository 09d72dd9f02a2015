#pragma once

#include <string>
#include <utility>
#include <vector>

#include "capsnet/layers.hpp"
#include "capsnet/losses.hpp"

namespace capsnet {

struct ForwardResult {
  Tensor scores;  // [B, n_class]: capsule lengths (class) or probabilities (feature)
  RoutingState routing;
  Tensor reconstruction;  // [B, H*W] when the decoder ran, empty otherwise
  Tensor margin;          // scalars, present when labels were given
  Tensor recon_loss;
  Tensor loss;
  std::vector<int> predictions;
};

// The full network in either head mode. Parameters live in the layer structs;
// forward() watches them on the given tape so one backward() yields all
// gradients.
class CapsuleNetwork {
 public:
  CapsuleNetwork(const NetworkConfig& cfg, Rng& rng);

  // labels: training targets, used for the class-mode decoder mask and the
  // losses; pass nullptr for inference (mask falls back to the prediction).
  // with_decoder: run reconstruction (training); skipped for plain scoring.
  ForwardResult forward(Tape& tape, const Tensor& images, const std::vector<int>* labels,
                        bool with_decoder, BoundParams* bound = nullptr);

  std::vector<std::pair<std::string, Tensor*>> parameters();
  int64_t parameter_count() const;
  const NetworkConfig& config() const { return cfg_; }
  int n_primary_caps() const { return primary.n_caps(cfg_.image_h, cfg_.image_w); }

  PrimaryCapsLayer primary;
  RoutingLayer routing;
  FcHead head;  // feature mode only
  Decoder decoder;

 private:
  NetworkConfig cfg_;
};

}  // namespace capsnet
