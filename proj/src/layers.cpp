#include "capsnet/layers.hpp"

#include <cmath>

namespace capsnet {

namespace {

Tensor glorot(Rng& rng, Shape shape, double fan_in, double fan_out) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i)
    t.ptr()[i] = static_cast<real>(rng.uniform(-limit, limit));
  return t;
}

Tensor watch_param(Tape& tape, const Tensor& master, const char* name, BoundParams* bound) {
  Tensor watched = tape.watch(master);
  if (bound) bound->add(name, watched);
  return watched;
}

}  // namespace

void PrimaryCapsLayer::init(Rng& rng) {
  const double kk = kernel * kernel;
  conv1_kernels = glorot(rng, {conv_maps, 1, kernel, kernel}, kk, conv_maps * kk);
  caps_kernels = glorot(rng, {groups * caps_dim, conv_maps, kernel, kernel}, conv_maps * kk,
                        groups * caps_dim * kk);
}

int PrimaryCapsLayer::n_caps(int h, int w) const {
  const int h1 = conv_out_dim(h, kernel, 1);
  const int w1 = conv_out_dim(w, kernel, 1);
  const int h2 = conv_out_dim(h1, kernel, 2);
  const int w2 = conv_out_dim(w1, kernel, 2);
  return groups * h2 * w2;
}

Tensor PrimaryCapsLayer::forward(Tape& tape, const Tensor& images, BoundParams* bound) const {
  if (images.rank() != 4 || images.dim(1) != 1)
    throw ConfigError("primary capsules expect [B,1,H,W] images, got " +
                      shape_str(images.shape));
  if (images.dim(2) < min_image_dim() || images.dim(3) < min_image_dim())
    throw ConfigError("image " + std::to_string(images.dim(2)) + "x" +
                      std::to_string(images.dim(3)) + " too small; two " +
                      std::to_string(kernel) + "x" + std::to_string(kernel) +
                      " convolutions need at least " + std::to_string(min_image_dim()) + "x" +
                      std::to_string(min_image_dim()));
  Tensor k1 = watch_param(tape, conv1_kernels, "primary.conv1_kernels", bound);
  Tensor k2 = watch_param(tape, caps_kernels, "primary.caps_kernels", bound);
  Tensor a = tape.relu(tape.conv2d(images, k1, 1));
  Tensor maps = tape.conv2d(a, k2, 2);
  return tape.squash(tape.group_capsules(maps, caps_dim));
}

RoutingState route_by_agreement(Tape& tape, const Tensor& u_hat, int iterations) {
  if (iterations < 1)
    throw ConfigError("routing iterations must be >= 1, got " + std::to_string(iterations));
  const int b = u_hat.dim(0), n = u_hat.dim(1), m = u_hat.dim(2);

  RoutingState state;
  state.u_hat = u_hat;
  Tensor logits({b, n, m});  // zeros, re-created every forward pass
  for (int it = 0; it < iterations; ++it) {
    state.c = tape.softmax(logits, 2);
    state.coupling_history.push_back(state.c.detached());
    state.s = tape.coupling_sum(state.c, u_hat);
    state.v = tape.squash(state.s);
    if (it + 1 < iterations) logits = tape.add(logits, tape.agreement(u_hat, state.v));
  }
  state.b = logits;
  return state;
}

void RoutingLayer::init(Rng& rng, int n_in, int n_out, int d_in, int d_out) {
  w = glorot(rng, {n_in, n_out, d_in, d_out}, d_in, d_out);
}

RoutingState RoutingLayer::forward(Tape& tape, const Tensor& u, BoundParams* bound) const {
  Tensor wt = watch_param(tape, w, "routing.w", bound);
  Tensor u_hat = tape.caps_transform(u, wt);
  return route_by_agreement(tape, u_hat, iterations);
}

void FcHead::init(Rng& rng, int in, int out) {
  weights = glorot(rng, {in, out}, in, out);
  bias = Tensor({out});
}

Tensor FcHead::forward(Tape& tape, const Tensor& feature_caps, BoundParams* bound) const {
  const int b = feature_caps.dim(0);
  Tensor flat = tape.reshape(feature_caps, {b, static_cast<int>(feature_caps.size() / b)});
  Tensor wt = watch_param(tape, weights, "head.weights", bound);
  Tensor bt = watch_param(tape, bias, "head.bias", bound);
  return tape.softmax(tape.linear(flat, wt, bt), 1);
}

void Decoder::init(Rng& rng, int d_in, int out) {
  w1 = glorot(rng, {d_in, hidden1}, d_in, hidden1);
  b1 = Tensor({hidden1});
  w2 = glorot(rng, {hidden1, hidden2}, hidden1, hidden2);
  b2 = Tensor({hidden2});
  w3 = glorot(rng, {hidden2, out}, hidden2, out);
  b3 = Tensor({out});
}

Tensor Decoder::forward(Tape& tape, const Tensor& flat, BoundParams* bound) const {
  Tensor a = tape.relu(tape.linear(flat, watch_param(tape, w1, "decoder.w1", bound),
                                   watch_param(tape, b1, "decoder.b1", bound)));
  Tensor b = tape.relu(tape.linear(a, watch_param(tape, w2, "decoder.w2", bound),
                                   watch_param(tape, b2, "decoder.b2", bound)));
  return tape.sigmoid(tape.linear(b, watch_param(tape, w3, "decoder.w3", bound),
                                  watch_param(tape, b3, "decoder.b3", bound)));
}

Tensor class_lengths(Tape& tape, const Tensor& v) { return tape.l2norm(v); }

std::vector<int> argmax_rows(const Tensor& scores) {
  const int b = scores.dim(0);
  const int c = static_cast<int>(scores.size() / b);
  std::vector<int> out(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    const real* row = scores.ptr() + static_cast<int64_t>(i) * c;
    int best = 0;
    for (int j = 1; j < c; ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

Tensor decoder_input(Tape& tape, const Tensor& caps, const std::vector<int>* mask,
                     HeadMode mode) {
  const int b = caps.dim(0);
  const int flat = static_cast<int>(caps.size() / b);
  if (mode == HeadMode::kClass) {
    if (!mask) throw UsageError("class-mode decoding requires a mask index per sample");
    return tape.reshape(tape.mask_capsules(caps, *mask), {b, flat});
  }
  if (mask) throw UsageError("feature-mode decoding takes no mask");
  return tape.reshape(caps, {b, flat});
}

}  // namespace capsnet
