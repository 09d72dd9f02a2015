#include <doctest.h>

#include <cmath>
#include <cstring>

#include "oracles.hpp"

using namespace capsnet;

namespace {

Tensor weights_like(Rng& rng, const Tensor& t) {
  return oracle::random_tensor(rng, t.shape, 0.5, 1.5);
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 kernel over all-ones 3x3 input sums to 9") {
  Tape tape;
  Tensor x = tensor_full({1, 1, 3, 3}, 1);
  Tensor k = tensor_full({1, 1, 3, 3}, 1);
  Tensor y = tape.conv2d(x, k, 1);
  CHECK(y.shape == Shape{1, 1, 1, 1});
  CHECK(y[0] == doctest::Approx(9.0));
}

TEST_CASE("conv2d: geometry of the two-stage 9x9 stack") {
  Rng rng(7);
  Tape tape;
  // 28 -> 20 at stride 1
  Tensor x = oracle::random_tensor(rng, {1, 1, 28, 28}, 0, 1);
  Tensor k = oracle::random_tensor(rng, {4, 1, 9, 9}, -1, 1);
  Tensor y = tape.conv2d(x, k, 1);
  CHECK(y.shape == Shape{1, 4, 20, 20});
  Tensor ref = oracle::conv_naive(x, k, 1);
  for (int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-5));

  // 20 -> 6 at stride 2
  Tensor k2 = oracle::random_tensor(rng, {3, 4, 9, 9}, -1, 1);
  Tensor y2 = tape.conv2d(y, k2, 2);
  CHECK(y2.shape == Shape{1, 3, 6, 6});
  Tensor ref2 = oracle::conv_naive(ref, k2, 2);
  for (int64_t i = 0; i < y2.size(); ++i)
    CHECK(y2[i] == doctest::Approx(ref2[i]).epsilon(1e-4));
}

TEST_CASE("conv2d: bit-identical to the naive quintuple loop on small inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = 1 + static_cast<int>(rng.next_below(3));
    const int k = 1 + static_cast<int>(rng.next_below(4));
    const int kh = 2 + static_cast<int>(rng.next_below(2));
    const int stride = 1 + static_cast<int>(rng.next_below(2));
    const int h = kh + static_cast<int>(rng.next_below(static_cast<uint64_t>(9 - kh)));
    const int w = kh + static_cast<int>(rng.next_below(static_cast<uint64_t>(9 - kh)));
    Tensor x = oracle::random_tensor(rng, {2, c, h, w}, -1, 1);
    Tensor kr = oracle::random_tensor(rng, {k, c, kh, kh}, -1, 1);
    Tape tape;
    Tensor y = tape.conv2d(x, kr, stride);
    Tensor ref = oracle::conv_naive(x, kr, stride);
    REQUIRE(y.shape == ref.shape);
    CHECK(std::memcmp(y.ptr(), ref.ptr(), sizeof(real) * static_cast<size_t>(y.size())) == 0);
  }
}

TEST_CASE("conv2d: shape errors name both operands") {
  Tape tape;
  Tensor x({1, 2, 5, 5});
  Tensor k({3, 4, 3, 3});  // channel mismatch
  CHECK_THROWS_WITH_AS(tape.conv2d(x, k, 1),
                       doctest::Contains("[1x2x5x5]"), ConfigError);
  Tensor k2({3, 2, 7, 7});  // kernel larger than image
  CHECK_THROWS_AS(tape.conv2d(x, k2, 1), ConfigError);
}

TEST_CASE("matmul matches the naive loop bit for bit") {
  Rng rng(3);
  Tensor a = oracle::random_tensor(rng, {5, 7}, -1, 1);
  Tensor b = oracle::random_tensor(rng, {7, 4}, -1, 1);
  Tape tape;
  Tensor y = tape.matmul(a, b);
  Tensor ref = oracle::matmul_naive(a, b);
  CHECK(std::memcmp(y.ptr(), ref.ptr(), sizeof(real) * static_cast<size_t>(y.size())) == 0);
  CHECK_THROWS_AS(tape.matmul(a, a), ConfigError);
}

TEST_CASE("elementwise basics") {
  Tape tape;
  Tensor x({3}, {real(-1.5), real(0), real(2)});
  Tensor r = tape.relu(x);
  CHECK(r[0] == 0);
  CHECK(r[2] == real(2));
  Tensor s = tape.sigmoid(Tensor({1}, {real(0)}));
  CHECK(s[0] == doctest::Approx(0.5));
  Tensor same = mse(tape, x, x);
  CHECK(same[0] == 0);
  Tensor zeros({4});
  Tensor ones = tensor_full({4}, 1);
  CHECK(mse(tape, zeros, ones)[0] == doctest::Approx(1.0));
}

TEST_CASE("softmax: uniform, shift invariance, closed form") {
  Tape tape;
  Tensor z({4});
  Tensor u = tape.softmax(z, 0);
  for (int i = 0; i < 4; ++i) CHECK(u[i] == doctest::Approx(0.25));

  Rng rng(5);
  Tensor logits = oracle::random_tensor(rng, {6}, -2, 2);
  Tensor shifted = logits.clone();
  for (int i = 0; i < 6; ++i) shifted.ptr()[i] += real(3.25);
  Tensor a = tape.softmax(logits, 0);
  Tensor b = tape.softmax(shifted, 0);
  for (int i = 0; i < 6; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-6));

  Tensor li({3}, {real(std::log(1.0)), real(std::log(2.0)), real(std::log(3.0))});
  Tensor p = tape.softmax(li, 0);
  const auto direct = oracle::softmax_direct({std::log(1.0), std::log(2.0), std::log(3.0)});
  for (int i = 0; i < 3; ++i) {
    CHECK(p[i] == doctest::Approx((i + 1) / 6.0).epsilon(1e-6));
    CHECK(p[i] == doctest::Approx(direct[static_cast<size_t>(i)]).epsilon(1e-6));
  }
}

TEST_CASE("softmax: rows sum to one on every axis, entries positive") {
  Rng rng(9);
  Tensor t = oracle::random_tensor(rng, {3, 4, 5}, -3, 3);
  for (int axis = 0; axis < 3; ++axis) {
    Tape tape;
    Tensor y = tape.softmax(t, axis);
    const int kdim = t.dim(axis);
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < 3; ++i) inner *= t.dim(i);
    for (int i = 0; i < axis; ++i) outer *= t.dim(i);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        double sum = 0;
        for (int c = 0; c < kdim; ++c) {
          const real v = y[o * kdim * inner + c * inner + in];
          CHECK(v > 0);
          sum += v;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
  }
  Tensor bad({2}, {real(1), std::numeric_limits<real>::infinity()});
  Tape tape;
  CHECK_THROWS_AS(tape.softmax(bad, 0), NumericError);
}

TEST_CASE("l2norm: examples and zero-vector subgradient") {
  Tape tape;
  Tensor v({2}, {real(3), real(4)});
  CHECK(tape.l2norm(v)[0] == doctest::Approx(5.0));

  Tensor z = tape.watch(Tensor({3}));
  Tensor n = tape.l2norm(z);
  CHECK(n[0] == 0);
  Tensor loss = tape.sum(n);
  tape.backward(loss);
  for (real g : tape.grad(z)) CHECK(g == 0);

  Rng rng(12);
  Tensor x = oracle::random_tensor(rng, {16}, -2, 2);
  Tape t2;
  const double direct = oracle::l2norm_sumsq(x.ptr(), 16);
  CHECK(t2.l2norm(x)[0] == doctest::Approx(direct).epsilon(1e-6));
}

TEST_CASE("squash: fixed points of the norm map") {
  Tape tape;
  CHECK(tape.squash(Tensor({4})).max_abs() == 0);

  Tensor unit({2}, {real(1), real(0)});
  Tensor v1 = tape.squash(unit);
  CHECK(oracle::l2norm_sumsq(v1.ptr(), 2) == doctest::Approx(0.5).epsilon(1e-6));

  Tensor three({2}, {real(0), real(3)});
  Tensor v3 = tape.squash(three);
  CHECK(oracle::l2norm_sumsq(v3.ptr(), 2) == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("squash: norm stays below one and grows with the input norm") {
  Tensor dir({3}, {real(2) / 3, real(2) / 3, real(1) / 3});  // unit direction
  double prev = -1;
  for (double n = 0.01; n <= 100.0; n *= 1.35) {
    Tape tape;
    Tensor s = dir.clone();
    for (int i = 0; i < 3; ++i) s.ptr()[i] = static_cast<real>(s[i] * n);
    const double out = oracle::l2norm_sumsq(tape.squash(s).ptr(), 3);
    CHECK(out < 1.0);
    CHECK(out > prev);
    prev = out;
  }
}

TEST_CASE("backward: quadratic example and unused parameters") {
  Tape tape;
  Tensor w = tape.watch(Tensor({2}, {real(1), real(2)}));
  Tensor unused = tape.watch(Tensor({3}, {real(5), real(6), real(7)}));
  Tensor loss = tape.sum(tape.square(w));
  tape.backward(loss);
  const auto g = tape.grad(w);
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));
  for (real v : tape.grad(unused)) CHECK(v == 0);

  CHECK_THROWS_AS(tape.backward(w), UsageError);  // non-scalar loss
}

TEST_CASE("tape handles are invalidated by reset") {
  Tape tape;
  Tensor w = tape.watch(Tensor({2}, {real(1), real(2)}));
  tape.reset();
  CHECK_THROWS_AS((void)tape.sum(w), UsageError);
  CHECK_THROWS_AS((void)tape.grad(w), UsageError);
}

TEST_CASE("forward replay is bit-deterministic") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = oracle::random_tensor(rng, {2, 1, 10, 10}, 0, 1);
    Tensor k = oracle::random_tensor(rng, {4, 1, 3, 3}, -1, 1);
    Tape tape;
    Tensor kw = tape.watch(k);
    Tensor y = tape.squash(tape.group_capsules(tape.conv2d(x, kw, 1), 4));
    Tensor loss = tape.sum(tape.square(y));
    tape.backward(loss);
    return std::pair{loss[0], tape.grad(kw)};
  };
  const auto [l1, g1] = run(42);
  const auto [l2, g2] = run(42);
  CHECK(std::memcmp(&l1, &l2, sizeof(real)) == 0);
  CHECK(g1 == g2);
  const auto [l3, g3] = run(43);
  CHECK(l3 != l1);
}

TEST_CASE("gradients of every primitive match central differences") {
  Rng rng(2024);
  const int probes = 20;
  const double tol = sizeof(real) == 4 ? 1e-2 : 1e-5;

  auto check = [&](const std::string& name,
                   const std::function<Tensor(Tape&, BoundParams&)>& build) {
    const double err = oracle::max_grad_rel_err(build, probes, rng);
    INFO(name, ": worst relative error ", err);
    CHECK(err < tol);
  };

  // positive fixtures keep the probed gradients away from zero, where
  // 32-bit central differences are pure noise
  {
    auto x = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 2, 5, 5}, 0.2, 1.2));
    auto k = std::make_shared<Tensor>(oracle::random_tensor(rng, {3, 2, 3, 3}, 0.2, 1.0));
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 3, 2, 2}, 0.5, 1.5));
    check("conv2d.stride2", [=](Tape& t, BoundParams& b) {
      Tensor xw = t.watch(*x), kw = t.watch(*k);
      b.add("x", xw);
      b.add("k", kw);
      return t.sum(t.mul(t.conv2d(xw, kw, 2), *wts));
    });
  }
  {
    auto a = std::make_shared<Tensor>(oracle::random_tensor(rng, {4, 6}, 0.2, 1.2));
    auto bb = std::make_shared<Tensor>(oracle::random_tensor(rng, {6, 3}, 0.2, 1.2));
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {4, 3}, 0.5, 1.5));
    check("matmul", [=](Tape& t, BoundParams& b) {
      Tensor aw = t.watch(*a), bw = t.watch(*bb);
      b.add("a", aw);
      b.add("b", bw);
      return t.sum(t.mul(t.matmul(aw, bw), *wts));
    });
  }
  {
    auto x = std::make_shared<Tensor>(oracle::random_tensor(rng, {3, 5}, 0.2, 1.2));
    auto w = std::make_shared<Tensor>(oracle::random_tensor(rng, {5, 4}, 0.2, 1.2));
    auto bias = std::make_shared<Tensor>(oracle::random_tensor(rng, {4}, 0.2, 1.2));
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {3, 4}, 0.5, 1.5));
    check("linear", [=](Tape& t, BoundParams& b) {
      Tensor xw = t.watch(*x), ww = t.watch(*w), bw = t.watch(*bias);
      b.add("x", xw);
      b.add("w", ww);
      b.add("bias", bw);
      return t.sum(t.mul(t.linear(xw, ww, bw), *wts));
    });
  }
  {
    auto x = std::make_shared<Tensor>(oracle::random_tensor(rng, {12}, 0.2, 1.0));
    auto y = std::make_shared<Tensor>(oracle::random_tensor(rng, {12}, -1, -0.2));
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {12}, 0.5, 1.5));
    check("add.mul.affine.relu.sigmoid.square", [=](Tape& t, BoundParams& b) {
      Tensor xw = t.watch(*x), yw = t.watch(*y);
      b.add("x", xw);
      b.add("y", yw);
      Tensor mix = t.add(t.mul(xw, yw), t.affine(xw, real(0.5), real(1.5)));
      Tensor act = t.add(t.relu(mix), t.sigmoid(t.square(yw)));
      return t.sum(t.mul(act, *wts));
    });
  }
  {
    auto z = std::make_shared<Tensor>(oracle::random_tensor(rng, {4, 5}, -2, 2));
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {4, 5}, 0.5, 1.5));
    check("softmax", [=](Tape& t, BoundParams& b) {
      Tensor zw = t.watch(*z);
      b.add("z", zw);
      return t.sum(t.mul(t.softmax(zw, 1), *wts));
    });
  }
  {
    auto v = std::make_shared<Tensor>(oracle::random_tensor(rng, {6, 8}, 0.3, 1.5));
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {6}, 0.5, 1.5));
    check("l2norm", [=](Tape& t, BoundParams& b) {
      Tensor vw = t.watch(*v);
      b.add("v", vw);
      return t.sum(t.mul(t.l2norm(vw), *wts));
    });
  }
  {
    auto s = std::make_shared<Tensor>(oracle::random_tensor(rng, {6, 8}, -1, 1));
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {6, 8}, 0.5, 1.5));
    check("squash", [=](Tape& t, BoundParams& b) {
      Tensor sw = t.watch(*s);
      b.add("s", sw);
      return t.sum(t.mul(t.squash(sw), *wts));
    });
  }
  {
    auto u = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 4, 3}, 0.2, 1.0));
    auto w = std::make_shared<Tensor>(oracle::random_tensor(rng, {4, 2, 3, 5}, 0.2, 1.0));
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 4, 2, 5}, 0.5, 1.5));
    check("caps_transform", [=](Tape& t, BoundParams& b) {
      Tensor uw = t.watch(*u), ww = t.watch(*w);
      b.add("u", uw);
      b.add("w", ww);
      return t.sum(t.mul(t.caps_transform(uw, ww), *wts));
    });
  }
  {
    auto c = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 4, 3}, 0.1, 1));
    auto u = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 4, 3, 5}, 0.2, 1.2));
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 3, 5}, 0.5, 1.5));
    check("coupling_sum", [=](Tape& t, BoundParams& b) {
      Tensor cw = t.watch(*c), uw = t.watch(*u);
      b.add("c", cw);
      b.add("u", uw);
      return t.sum(t.mul(t.coupling_sum(cw, uw), *wts));
    });
  }
  {
    auto u = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 4, 3, 5}, 0.2, 1.2));
    auto v = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 3, 5}, 0.2, 1.2));
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 4, 3}, 0.5, 1.5));
    check("agreement", [=](Tape& t, BoundParams& b) {
      Tensor uw = t.watch(*u), vw = t.watch(*v);
      b.add("u", uw);
      b.add("v", vw);
      return t.sum(t.mul(t.agreement(uw, vw), *wts));
    });
  }
  {
    auto caps = std::make_shared<Tensor>(oracle::random_tensor(rng, {3, 4, 5}, 0.2, 1.2));
    auto keep = std::make_shared<std::vector<int>>(std::vector<int>{1, 0, 3});
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {3, 4, 5}, 0.5, 1.5));
    check("mask_capsules", [=](Tape& t, BoundParams& b) {
      Tensor cw = t.watch(*caps);
      b.add("caps", cw);
      return t.sum(t.mul(t.mask_capsules(cw, *keep), *wts));
    });
  }
  {
    auto x = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 8, 3, 3}, 0.2, 1.2));
    auto wts = std::make_shared<Tensor>(oracle::random_tensor(rng, {2, 18, 4}, 0.5, 1.5));
    check("group_capsules", [=](Tape& t, BoundParams& b) {
      Tensor xw = t.watch(*x);
      b.add("x", xw);
      return t.sum(t.mul(t.group_capsules(xw, 4), *wts));
    });
  }
}

TEST_CASE("group_capsules collects the block channels of one position") {
  // 2 groups of 2-dim capsules on a 2x2 grid
  Tensor x({1, 4, 2, 2});
  for (int i = 0; i < 16; ++i) x.ptr()[i] = static_cast<real>(i);
  Tape tape;
  Tensor caps = tape.group_capsules(x, 2);
  CHECK(caps.shape == Shape{1, 8, 2});
  // capsule (group 0, position 0) = channels {0,1} at (0,0) -> values {0, 4}
  CHECK(caps[0] == 0);
  CHECK(caps[1] == 4);
  // capsule (group 1, position 3) = channels {2,3} at (1,1) -> values {11, 15}
  CHECK(caps[14] == 11);
  CHECK(caps[15] == 15);
}

TEST_CASE("reshape aliases the buffer and keeps gradients flowing") {
  Tape tape;
  Tensor w = tape.watch(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  Tensor flat = tape.reshape(w, {6});
  Tensor loss = tape.sum(tape.square(flat));
  tape.backward(loss);
  const auto g = tape.grad(w);
  CHECK(g[5] == doctest::Approx(12.0));
  CHECK_THROWS_AS(tape.reshape(w, {4}), ConfigError);
}
