#pragma once

#include <vector>

#include "capsnet/config.hpp"
#include "capsnet/tensor.hpp"

namespace capsnet {

// Margin loss over per-class scores (capsule lengths in class mode, softmax
// probabilities in feature mode). Per-class terms are summed within a sample
// and averaged over the batch.
Tensor margin_loss_class(Tape& tape, const Tensor& lengths, const std::vector<int>& labels,
                         const LossConfig& cfg);
Tensor margin_loss_feature(Tape& tape, const Tensor& probs, const std::vector<int>& labels,
                           const LossConfig& cfg);

// Mean squared error between input pixels and the reconstruction.
Tensor reconstruction_loss(Tape& tape, const Tensor& x, const Tensor& x_prime);

// margin + beta * reconstruction
Tensor total_loss(Tape& tape, const Tensor& margin, const Tensor& recon, const LossConfig& cfg);

}  // namespace capsnet
