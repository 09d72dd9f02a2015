#include "capsnet/losses.hpp"

namespace capsnet {

namespace {

// shared form of Eq-style margin penalty:
//   T_k max(0, m+ - s_k)^2 + lambda (1 - T_k) max(0, s_k - m-)^2
Tensor margin_loss(Tape& tape, const Tensor& scores, const std::vector<int>& labels,
                   const LossConfig& cfg) {
  if (scores.rank() != 2)
    throw UsageError("margin loss expects [B,C] scores, got " + shape_str(scores.shape));
  const int b = scores.dim(0), c = scores.dim(1);
  if (static_cast<int>(labels.size()) != b)
    throw UsageError("margin loss: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(b));
  Tensor t_pos({b, c});
  Tensor t_neg = tensor_full({b, c}, real(1));
  for (int i = 0; i < b; ++i) {
    const int label = labels[static_cast<size_t>(i)];
    if (label < 0 || label >= c)
      throw UsageError("label " + std::to_string(label) + " out of range [0," +
                       std::to_string(c) + ")");
    t_pos[static_cast<int64_t>(i) * c + label] = real(1);
    t_neg[static_cast<int64_t>(i) * c + label] = real(0);
  }
  Tensor pos = tape.square(tape.relu(tape.affine(scores, real(-1), cfg.m_plus)));
  Tensor neg = tape.square(tape.relu(tape.affine(scores, real(1), -cfg.m_minus)));
  Tensor terms = tape.add(tape.mul(pos, t_pos), tape.scale(tape.mul(neg, t_neg), cfg.lambda));
  return tape.scale(tape.sum(terms), real(1) / static_cast<real>(b));
}

}  // namespace

Tensor margin_loss_class(Tape& tape, const Tensor& lengths, const std::vector<int>& labels,
                         const LossConfig& cfg) {
  return margin_loss(tape, lengths, labels, cfg);
}

Tensor margin_loss_feature(Tape& tape, const Tensor& probs, const std::vector<int>& labels,
                           const LossConfig& cfg) {
  return margin_loss(tape, probs, labels, cfg);
}

Tensor reconstruction_loss(Tape& tape, const Tensor& x, const Tensor& x_prime) {
  if (x.size() != x_prime.size())
    throw UsageError("reconstruction loss: pixel count mismatch " + shape_str(x.shape) + " vs " +
                     shape_str(x_prime.shape));
  Tensor flat_x = tape.reshape(x, x_prime.shape);
  return mse(tape, flat_x, x_prime);
}

Tensor total_loss(Tape& tape, const Tensor& margin, const Tensor& recon, const LossConfig& cfg) {
  return tape.add(margin, tape.scale(recon, cfg.beta));
}

}  // namespace capsnet
