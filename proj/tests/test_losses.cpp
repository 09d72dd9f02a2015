#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "capsnet/losses.hpp"
#include "oracles.hpp"

using namespace capsnet;

namespace {

const LossConfig kLoss{};

double margin_class_value(const std::vector<real>& lengths, int n_class,
                          const std::vector<int>& labels) {
  Tape tape;
  Tensor t({static_cast<int>(labels.size()), n_class}, std::vector<real>(lengths));
  return static_cast<double>(margin_loss_class(tape, t, labels, kLoss)[0]);
}

}  // namespace

TEST_CASE("class margin loss: the three pointwise anchors") {
  // positive class exactly at m+ contributes nothing
  CHECK(margin_class_value({real(0.9), real(0.05)}, 2, {0}) == doctest::Approx(0.0));
  // positive class at zero costs (m+)^2 = 0.81
  CHECK(margin_class_value({real(0.0), real(0.05)}, 2, {0}) == doctest::Approx(0.81));
  // negative class at 0.6 costs lambda*(0.6-m-)^2 = 0.5*0.25 = 0.125
  CHECK(margin_class_value({real(0.9), real(0.6)}, 2, {0}) == doctest::Approx(0.125));
}

TEST_CASE("feature margin loss: anchors and the uniform-probability value") {
  Tape tape;
  // above m+ and at m-: both sides quiet
  Tensor probs({1, 2}, {real(0.95), real(0.05)});
  CHECK(static_cast<double>(margin_loss_feature(tape, probs, {0}, kLoss)[0]) ==
        doctest::Approx(0.0));
  Tensor at_lower({1, 2}, {real(0.9), real(0.1)});
  CHECK(static_cast<double>(margin_loss_feature(tape, at_lower, {0}, kLoss)[0]) ==
        doctest::Approx(0.0));

  // uniform over 10 classes: (0.9-0.1)^2 for the positive, negatives at m-
  Tensor uniform = tensor_full({1, 10}, real(0.1));
  const double expected = [] {
    // direct transcription of the margin formula
    double m = 0;
    for (int k = 0; k < 10; ++k) {
      const double t = k == 3 ? 1.0 : 0.0;
      const double s = 0.1;
      m += t * std::pow(std::max(0.0, 0.9 - s), 2) +
           0.5 * (1 - t) * std::pow(std::max(0.0, s - 0.1), 2);
    }
    return m;
  }();
  CHECK(expected == doctest::Approx(0.64));
  CHECK(static_cast<double>(margin_loss_feature(tape, uniform, {3}, kLoss)[0]) ==
        doctest::Approx(expected));
}

TEST_CASE("margin loss: zero exactly when every score clears its margin") {
  Tape tape;
  Tensor good({2, 3}, {real(0.93), real(0.02), real(0.08),
                       real(0.01), real(0.95), real(0.1)});
  CHECK(static_cast<double>(margin_loss_class(tape, good, {0, 1}, kLoss)[0]) == 0.0);

  // one-hot probabilities on the true class
  Tensor onehot({2, 3}, {1, 0, 0, 0, 0, 1});
  CHECK(static_cast<double>(margin_loss_feature(tape, onehot, {0, 2}, kLoss)[0]) == 0.0);

  // any violation makes it strictly positive
  Tensor bad({1, 3}, {real(0.89), real(0.0), real(0.0)});
  CHECK(static_cast<double>(margin_loss_class(tape, bad, {0}, kLoss)[0]) > 0.0);
  Tensor bad2({1, 3}, {real(0.95), real(0.11), real(0.0)});
  CHECK(static_cast<double>(margin_loss_class(tape, bad2, {0}, kLoss)[0]) > 0.0);
}

TEST_CASE("margin loss: label range errors") {
  Tape tape;
  Tensor scores({1, 3});
  CHECK_THROWS_AS(margin_loss_class(tape, scores, {3}, kLoss), UsageError);
  CHECK_THROWS_AS(margin_loss_class(tape, scores, {-1}, kLoss), UsageError);
  CHECK_THROWS_AS(margin_loss_class(tape, scores, {0, 1}, kLoss), UsageError);
}

TEST_CASE("reconstruction loss: identity, max gap, loop oracle") {
  Tape tape;
  Rng rng(13);
  Tensor x = oracle::random_tensor(rng, {2, 25}, 0, 1);
  CHECK(static_cast<double>(reconstruction_loss(tape, x, x)[0]) == 0.0);

  Tensor zeros({2, 25});
  Tensor ones = tensor_full({2, 25}, 1);
  CHECK(static_cast<double>(reconstruction_loss(tape, zeros, ones)[0]) == doctest::Approx(1.0));

  Tensor y = oracle::random_tensor(rng, {2, 25}, 0, 1);
  double direct = 0;
  for (int64_t i = 0; i < x.size(); ++i)
    direct += static_cast<double>(x[i] - y[i]) * (x[i] - y[i]);
  direct /= static_cast<double>(x.size());
  CHECK(static_cast<double>(reconstruction_loss(tape, x, y)[0]) ==
        doctest::Approx(direct).epsilon(1e-6));

  Tensor shorter({2, 24});
  CHECK_THROWS_AS(reconstruction_loss(tape, x, shorter), UsageError);
}

TEST_CASE("total loss: beta scaling and degenerate cases") {
  Tape tape;
  Tensor margin({1}, {real(0.64)});
  Tensor recon({1}, {real(1.0)});
  LossConfig cfg;
  CHECK(static_cast<double>(total_loss(tape, margin, recon, cfg)[0]) ==
        doctest::Approx(0.6405));

  Tensor zero({1});
  CHECK(static_cast<double>(total_loss(tape, margin, zero, cfg)[0]) == doctest::Approx(0.64));

  LossConfig no_recon = cfg;
  no_recon.beta = real(1e-30);  // beta must stay positive; the term vanishes
  CHECK(static_cast<double>(total_loss(tape, margin, recon, no_recon)[0]) ==
        doctest::Approx(0.64));
}

TEST_CASE("total loss: monotone in both arguments") {
  Tape tape;
  LossConfig cfg;
  const double base =
      static_cast<double>(total_loss(tape, Tensor({1}, {real(0.5)}), Tensor({1}, {real(2.0)}),
                                     cfg)[0]);
  CHECK(static_cast<double>(total_loss(tape, Tensor({1}, {real(0.6)}), Tensor({1}, {real(2.0)}),
                                       cfg)[0]) > base);
  CHECK(static_cast<double>(total_loss(tape, Tensor({1}, {real(0.5)}), Tensor({1}, {real(3.0)}),
                                       cfg)[0]) > base);
}

TEST_CASE("loss gradients match central differences") {
  Rng rng(2025);
  const double tol = sizeof(real) == 4 ? 1e-2 : 1e-5;
  {
    auto scores = std::make_shared<Tensor>(oracle::random_tensor(rng, {3, 5}, 0.15, 0.85));
    auto labels = std::make_shared<std::vector<int>>(std::vector<int>{0, 2, 4});
    const double err = oracle::max_grad_rel_err(
        [=](Tape& t, BoundParams& b) {
          Tensor sw = t.watch(*scores);
          b.add("scores", sw);
          return margin_loss_class(t, sw, *labels, kLoss);
        },
        20, rng);
    INFO("margin_class: ", err);
    CHECK(err < tol);
  }
  {
    auto x = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 9}, 0, 1));
    auto z = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 9}, -1, 1));
    const double err = oracle::max_grad_rel_err(
        [=](Tape& t, BoundParams& b) {
          Tensor zw = t.watch(*z);
          b.add("z", zw);
          return reconstruction_loss(t, *x, t.sigmoid(zw));
        },
        20, rng);
    INFO("reconstruction: ", err);
    CHECK(err < tol);
  }
}
