#include "capsnet/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "capsnet/network.hpp"

namespace capsnet {

double default_gradcheck_tolerance() { return sizeof(real) == 4 ? 1e-2 : 1e-5; }

namespace {

// builds the loss on a fresh tape from the current master parameter values;
// watched handles land in BoundParams
using LossBuilder = std::function<Tensor(Tape&, BoundParams&)>;

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t.ptr()[i] = static_cast<real>(rng.uniform(lo, hi));
  return t;
}

// scalar probe target: sum of the output weighted by fixed random positives
Tensor weighted_sum(Tape& tape, const Tensor& out, const Tensor& weights) {
  return tape.sum(tape.mul(out, weights));
}

double finite_diff_step() { return sizeof(real) == 4 ? 1e-3 : 1e-4; }

GradCheckResult check_one(const std::string& name, const LossBuilder& build, int probes,
                          Rng& rng, double tolerance) {
  GradCheckResult res;
  res.layer = name;

  Tape tape;
  BoundParams bound;
  Tensor loss = build(tape, bound);
  tape.backward(loss);
  std::vector<std::vector<real>> analytic;
  analytic.reserve(bound.items.size());
  for (auto& [pname, watched] : bound.items) {
    (void)pname;
    analytic.push_back(tape.grad(watched));
  }

  auto eval_loss = [&build]() {
    Tape t;
    BoundParams b;
    return static_cast<double>(build(t, b)[0]);
  };

  const double h = finite_diff_step();
  // resolution limit of the central difference: rounding of the loss value,
  // amplified by 1/(2h); gradients below it are indistinguishable from noise,
  // so such probes count as consistent-with-zero instead of dividing noise
  const double eps = sizeof(real) == 4 ? 6e-8 : 2.3e-16;
  const double floor = 20.0 * eps * std::max(1.0, std::abs(static_cast<double>(loss[0]))) /
                       (2.0 * h);

  auto quotient = [&](Tensor& master, int64_t e, double step) {
    const real saved = master.ptr()[e];
    const real hp = static_cast<real>(saved + step);
    const real hm = static_cast<real>(saved - step);
    master.ptr()[e] = hp;
    const double lp = eval_loss();
    master.ptr()[e] = hm;
    const double lm = eval_loss();
    master.ptr()[e] = saved;
    return (lp - lm) / (static_cast<double>(hp) - static_cast<double>(hm));
  };

  int redraws_left = 8 * probes;
  for (int probe = 0; probe < probes; ++probe) {
    const size_t p = static_cast<size_t>(rng.next_below(bound.items.size()));
    Tensor& master = bound.items[p].second;  // shares the parameter buffer
    const int64_t e = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(master.size())));
    const double numeric = quotient(master, e, h);
    const double numeric_half = quotient(master, e, h / 2);
    // the quotient must be converged in h; a relu kink inside the stencil
    // makes the comparison meaningless, so such draws are replaced
    const double guard = std::max(
        0.25 * tolerance * std::max(std::abs(numeric), std::abs(numeric_half)), 3 * floor);
    if (std::abs(numeric - numeric_half) > guard && redraws_left-- > 0) {
      --probe;
      continue;
    }
    const double a = static_cast<double>(analytic[p][static_cast<size_t>(e)]);
    ++res.probes;
    // empirical uncertainty of this probe: the quotient's own convergence
    // gap (deep 32-bit graphs carry more rounding than the analytic floor)
    const double uncertainty = std::max(floor, 3 * std::abs(numeric - numeric_half));
    if (std::abs(a - numeric_half) < uncertainty) continue;
    const double rel =
        std::abs(a - numeric_half) / std::max({std::abs(a), std::abs(numeric_half), 1e-8});
    res.max_rel_err = std::max(res.max_rel_err, rel);
  }
  res.pass = res.max_rel_err < tolerance;
  return res;
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& options) {
  const double tol = options.tolerance > 0 ? options.tolerance : default_gradcheck_tolerance();
  Rng rng(options.seed);
  std::vector<std::pair<std::string, LossBuilder>> checks;

  // conv2d: gradients w.r.t. input and kernels
  {
    auto x = std::make_shared<Tensor>(random_tensor(rng, {2, 2, 6, 6}, -1, 1));
    auto k = std::make_shared<Tensor>(random_tensor(rng, {3, 2, 3, 3}, -1, 1));
    auto w = std::make_shared<Tensor>(random_tensor(rng, {2, 3, 4, 4}, 0.5, 1.5));
    checks.emplace_back("conv", [x, k, w](Tape& t, BoundParams& b) {
      Tensor xw = t.watch(*x);
      Tensor kw = t.watch(*k);
      b.add("conv.input", xw);
      b.add("conv.kernels", kw);
      return weighted_sum(t, t.conv2d(xw, kw, 1), *w);
    });
  }

  // primary capsule stack at the smallest legal image size
  {
    auto layer = std::make_shared<PrimaryCapsLayer>();
    layer->init(rng);
    auto img = std::make_shared<Tensor>(random_tensor(rng, {2, 1, 17, 17}, 0, 1));
    auto w = std::make_shared<Tensor>(
        random_tensor(rng, {2, layer->n_caps(17, 17), layer->caps_dim}, 0.5, 1.5));
    checks.emplace_back("primary_caps", [layer, img, w](Tape& t, BoundParams& b) {
      return weighted_sum(t, layer->forward(t, *img, &b), *w);
    });
  }

  // routing with r=3, gradients through every iteration
  {
    auto layer = std::make_shared<RoutingLayer>();
    layer->iterations = 3;
    layer->init(rng, 12, 3, 8, 16);
    auto u = std::make_shared<Tensor>(random_tensor(rng, {2, 12, 8}, -0.5, 0.5));
    auto w = std::make_shared<Tensor>(random_tensor(rng, {2, 3, 16}, 0.5, 1.5));
    checks.emplace_back("routing", [layer, u, w](Tape& t, BoundParams& b) {
      Tensor uw = t.watch(*u);
      b.add("routing.input", uw);
      RoutingState state = layer->forward(t, uw, &b);
      return weighted_sum(t, state.v, *w);
    });
  }

  // fully connected softmax head
  {
    auto head = std::make_shared<FcHead>();
    head->init(rng, 16 * 4, 5);
    auto caps = std::make_shared<Tensor>(random_tensor(rng, {2, 4, 16}, -0.5, 0.5));
    auto w = std::make_shared<Tensor>(random_tensor(rng, {2, 5}, 0.5, 1.5));
    checks.emplace_back("fc_head", [head, caps, w](Tape& t, BoundParams& b) {
      Tensor cw = t.watch(*caps);
      b.add("head.input", cw);
      return weighted_sum(t, head->forward(t, cw, &b), *w);
    });
  }

  // decoder stack
  {
    auto dec = std::make_shared<Decoder>();
    dec->init(rng, 32, 49);
    auto flat = std::make_shared<Tensor>(random_tensor(rng, {2, 32}, -0.5, 0.5));
    auto w = std::make_shared<Tensor>(random_tensor(rng, {2, 49}, 0.5, 1.5));
    checks.emplace_back("decoder", [dec, flat, w](Tape& t, BoundParams& b) {
      Tensor fw = t.watch(*flat);
      b.add("decoder.input", fw);
      return weighted_sum(t, dec->forward(t, fw, &b), *w);
    });
  }

  // the three losses
  {
    auto scores = std::make_shared<Tensor>(random_tensor(rng, {4, 6}, 0.15, 0.85));
    auto labels = std::make_shared<std::vector<int>>();
    for (int i = 0; i < 4; ++i)
      labels->push_back(static_cast<int>(rng.next_below(6)));
    checks.emplace_back("margin_class", [scores, labels](Tape& t, BoundParams& b) {
      Tensor sw = t.watch(*scores);
      b.add("margin.scores", sw);
      return margin_loss_class(t, sw, *labels, LossConfig{});
    });
  }
  {
    auto logits = std::make_shared<Tensor>(random_tensor(rng, {4, 6}, -1, 1));
    auto labels = std::make_shared<std::vector<int>>();
    for (int i = 0; i < 4; ++i)
      labels->push_back(static_cast<int>(rng.next_below(6)));
    checks.emplace_back("margin_feature", [logits, labels](Tape& t, BoundParams& b) {
      Tensor lw = t.watch(*logits);
      b.add("margin.logits", lw);
      return margin_loss_feature(t, t.softmax(lw, 1), *labels, LossConfig{});
    });
  }
  {
    auto x = std::make_shared<Tensor>(random_tensor(rng, {2, 16}, 0, 1));
    auto z = std::make_shared<Tensor>(random_tensor(rng, {2, 16}, -1, 1));
    checks.emplace_back("reconstruction", [x, z](Tape& t, BoundParams& b) {
      Tensor zw = t.watch(*z);
      b.add("recon.preimage", zw);
      return reconstruction_loss(t, *x, t.sigmoid(zw));
    });
  }

  // standalone nonlinearities
  {
    auto logits = std::make_shared<Tensor>(random_tensor(rng, {3, 7}, -2, 2));
    auto w = std::make_shared<Tensor>(random_tensor(rng, {3, 7}, 0.5, 1.5));
    checks.emplace_back("softmax", [logits, w](Tape& t, BoundParams& b) {
      Tensor lw = t.watch(*logits);
      b.add("softmax.logits", lw);
      return weighted_sum(t, t.softmax(lw, 1), *w);
    });
  }
  {
    auto s = std::make_shared<Tensor>(random_tensor(rng, {5, 16}, -1, 1));
    auto w = std::make_shared<Tensor>(random_tensor(rng, {5, 16}, 0.5, 1.5));
    checks.emplace_back("squash", [s, w](Tape& t, BoundParams& b) {
      Tensor sw = t.watch(*s);
      b.add("squash.input", sw);
      return weighted_sum(t, t.squash(sw), *w);
    });
  }

  // full network, both head modes, total loss with decoder
  for (const char* mode : {"class", "feature"}) {
    NetworkConfig cfg;
    cfg.head = head_mode_from_name(mode);
    cfg.n_class = 3;
    cfg.n_features = 2;
    cfg.routing_iters = 3;
    cfg.image_h = cfg.image_w = 17;
    cfg.seed = options.seed;
    Rng net_rng(options.seed + 7);
    auto net = std::make_shared<CapsuleNetwork>(cfg, net_rng);
    auto img = std::make_shared<Tensor>(random_tensor(rng, {2, 1, 17, 17}, 0, 1));
    auto labels = std::make_shared<std::vector<int>>(std::vector<int>{0, 2});
    checks.emplace_back(std::string("network_") + mode,
                        [net, img, labels](Tape& t, BoundParams& b) {
                          return net->forward(t, *img, labels.get(), true, &b).loss;
                        });
  }

  // negative control: derivative of x^2 deliberately reported as 3x
  if (options.inject_fault) {
    auto wv = std::make_shared<Tensor>(random_tensor(rng, {8}, 0.5, 1.5));
    checks.emplace_back("fault_control", [wv](Tape& t, BoundParams& b) {
      Tensor ww = t.watch(*wv);
      b.add("fault.w", ww);
      return t.sum(t.custom_unary(
          ww, [](real x) { return x * x; }, [](real x) { return 3 * x; }));
    });
  }

  std::vector<GradCheckResult> results;
  for (auto& [name, builder] : checks) {
    if (!options.filter.empty() && name.find(options.filter) == std::string::npos) continue;
    results.push_back(check_one(name, builder, options.probes, rng, tol));
  }
  return results;
}

}  // namespace capsnet
