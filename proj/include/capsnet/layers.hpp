#pragma once

#include <string>
#include <utility>
#include <vector>

#include "capsnet/config.hpp"
#include "capsnet/rng.hpp"
#include "capsnet/tensor.hpp"

namespace capsnet {

// Watched (on-tape) views of the parameters used in one forward pass. The
// trainer reads gradients through these handles; the buffers are shared with
// the layer's master tensors, so optimizer updates write straight through.
struct BoundParams {
  std::vector<std::pair<std::string, Tensor>> items;
  void add(std::string name, Tensor t) { items.emplace_back(std::move(name), std::move(t)); }
};

inline int conv_out_dim(int in, int kernel, int stride) { return (in - kernel) / stride + 1; }

// Initial convolution + primary capsule convolution. 256 9x9 kernels at
// stride 1, relu, then 256 more at stride 2 grouped as 32 blocks of
// 8-dimensional capsules, squashed.
struct PrimaryCapsLayer {
  Tensor conv1_kernels;  // [conv_maps, 1, kernel, kernel]
  Tensor caps_kernels;   // [groups*caps_dim, conv_maps, kernel, kernel]
  int conv_maps = 256;
  int groups = 32;
  int caps_dim = 8;
  int kernel = 9;

  void init(Rng& rng);
  // images [B,1,H,W] -> squashed capsules [B, n_caps(H,W), caps_dim]
  Tensor forward(Tape& tape, const Tensor& images, BoundParams* bound) const;
  int min_image_dim() const { return 2 * kernel - 1; }
  int n_caps(int h, int w) const;
};

// Per-pass routing state (final iteration), plus the coupling coefficients
// of every iteration for inspection.
struct RoutingState {
  Tensor u_hat;  // [B, n_in, n_out, d_out]
  Tensor b;      // [B, n_in, n_out] logits after the last update
  Tensor c;      // [B, n_in, n_out]
  Tensor s;      // [B, n_out, d_out]
  Tensor v;      // [B, n_out, d_out]
  std::vector<Tensor> coupling_history;
};

// Routing-by-agreement core. b starts at zero every call, u_hat is fixed
// across iterations, gradients flow through all iterations.
RoutingState route_by_agreement(Tape& tape, const Tensor& u_hat, int iterations);

// Dynamic-routing layer. In class mode n_out is the class count; in feature
// mode it is the feature-capsule count and is independent of the class count.
struct RoutingLayer {
  Tensor w;  // [n_in, n_out, d_in, d_out]
  int iterations = 3;

  void init(Rng& rng, int n_in, int n_out, int d_in, int d_out);
  RoutingState forward(Tape& tape, const Tensor& u, BoundParams* bound) const;
};

// Flattened feature capsules -> class probabilities (affine map + softmax).
struct FcHead {
  Tensor weights;  // [d_out*n_features, n_class]
  Tensor bias;     // [n_class]

  void init(Rng& rng, int in, int out);
  Tensor forward(Tape& tape, const Tensor& feature_caps, BoundParams* bound) const;
};

// Three fully connected stages reconstructing the input image.
struct Decoder {
  Tensor w1, b1, w2, b2, w3, b3;
  int hidden1 = 512;
  int hidden2 = 1024;

  void init(Rng& rng, int d_in, int out);
  // flat capsules [B, d_in] -> pixels [B, out] in (0,1)
  Tensor forward(Tape& tape, const Tensor& flat, BoundParams* bound) const;
};

// Per-class capsule norms [B, n_class, d] -> [B, n_class].
Tensor class_lengths(Tape& tape, const Tensor& v);

// argmax per row, ties broken toward the lowest index
std::vector<int> argmax_rows(const Tensor& scores);

// Decoder input from routing output. Class mode requires a mask (one class
// index per sample) and zeroes every other capsule; feature mode forbids a
// mask and flattens everything.
Tensor decoder_input(Tape& tape, const Tensor& caps, const std::vector<int>* mask,
                     HeadMode mode);

}  // namespace capsnet
