#include "capsnet/network.hpp"

namespace capsnet {

CapsuleNetwork::CapsuleNetwork(const NetworkConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  primary.init(rng);
  const int n_in = primary.n_caps(cfg_.image_h, cfg_.image_w);
  routing.iterations = cfg_.routing_iters;
  routing.init(rng, n_in, cfg_.n_out(), primary.caps_dim, 16);
  if (cfg_.head == HeadMode::kFeature) head.init(rng, 16 * cfg_.n_features, cfg_.n_class);
  decoder.init(rng, 16 * cfg_.n_out(), cfg_.image_h * cfg_.image_w);
}

ForwardResult CapsuleNetwork::forward(Tape& tape, const Tensor& images,
                                      const std::vector<int>* labels, bool with_decoder,
                                      BoundParams* bound) {
  ForwardResult out;
  Tensor u = primary.forward(tape, images, bound);
  out.routing = routing.forward(tape, u, bound);

  if (cfg_.head == HeadMode::kClass) {
    out.scores = class_lengths(tape, out.routing.v);
  } else {
    out.scores = head.forward(tape, out.routing.v, bound);
  }
  out.predictions = argmax_rows(out.scores);

  if (with_decoder) {
    Tensor flat;
    if (cfg_.head == HeadMode::kClass) {
      // true label during training, the longest capsule at evaluation time
      const std::vector<int>& mask = labels ? *labels : out.predictions;
      flat = decoder_input(tape, out.routing.v, &mask, HeadMode::kClass);
    } else {
      flat = decoder_input(tape, out.routing.v, nullptr, HeadMode::kFeature);
    }
    out.reconstruction = decoder.forward(tape, flat, bound);
  }

  if (labels) {
    out.margin = cfg_.head == HeadMode::kClass
                     ? margin_loss_class(tape, out.scores, *labels, cfg_.loss)
                     : margin_loss_feature(tape, out.scores, *labels, cfg_.loss);
    if (with_decoder) {
      out.recon_loss = reconstruction_loss(tape, images, out.reconstruction);
      out.loss = total_loss(tape, out.margin, out.recon_loss, cfg_.loss);
    } else {
      out.loss = out.margin;
    }
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> CapsuleNetwork::parameters() {
  std::vector<std::pair<std::string, Tensor*>> p{
      {"primary.conv1_kernels", &primary.conv1_kernels},
      {"primary.caps_kernels", &primary.caps_kernels},
      {"routing.w", &routing.w},
  };
  if (cfg_.head == HeadMode::kFeature) {
    p.emplace_back("head.weights", &head.weights);
    p.emplace_back("head.bias", &head.bias);
  }
  p.emplace_back("decoder.w1", &decoder.w1);
  p.emplace_back("decoder.b1", &decoder.b1);
  p.emplace_back("decoder.w2", &decoder.w2);
  p.emplace_back("decoder.b2", &decoder.b2);
  p.emplace_back("decoder.w3", &decoder.w3);
  p.emplace_back("decoder.b3", &decoder.b3);
  return p;
}

int64_t CapsuleNetwork::parameter_count() const {
  int64_t n = primary.conv1_kernels.size() + primary.caps_kernels.size() + routing.w.size() +
              decoder.w1.size() + decoder.b1.size() + decoder.w2.size() + decoder.b2.size() +
              decoder.w3.size() + decoder.b3.size();
  if (cfg_.head == HeadMode::kFeature) n += head.weights.size() + head.bias.size();
  return n;
}

}  // namespace capsnet
