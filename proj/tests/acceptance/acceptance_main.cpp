// Acceptance suite. Each criterion prints exactly one [PASS]/[FAIL] line;
// the process exits nonzero if any selected criterion failed.
//
//   acceptance        runs all seven criteria
//   acceptance <n>    runs criterion n only

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "capsnet/bench.hpp"
#include "capsnet/gradcheck.hpp"
#include "capsnet/network.hpp"
#include "capsnet/synthetic.hpp"
#include "capsnet/train.hpp"

#include "../oracles.hpp"

using namespace capsnet;
namespace fs = std::filesystem;

namespace {

struct Criterion {
  int id;
  std::string name;
  std::function<bool(std::string&)> run;  // fills a detail string
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double round4(double v) { return std::round(v * 1e4) / 1e4; }

NetworkConfig base_config(HeadMode head, int n_class, int n_features, int image) {
  NetworkConfig cfg;
  cfg.head = head;
  cfg.n_class = n_class;
  cfg.n_features = n_features;
  cfg.image_h = cfg.image_w = image;
  return cfg;
}

// ---------------------------------------------------------------------------
// 1: the head's extra parameter memory reproduces the reported MiB deltas
// ---------------------------------------------------------------------------
bool criterion_head_memory(std::string& detail) {
  const struct {
    int n_class;
    int64_t bytes;
    double mib;
  } expected[] = {{10, 6440, 0.0061}, {50, 32200, 0.0307}, {199, 128156, 0.1222}};
  bool ok = true;
  char buf[160];
  for (const auto& e : expected) {
    const CostReport report = account(base_config(HeadMode::kFeature, e.n_class, 10, 28));
    const int64_t bytes = report.row("head").param_bytes;
    const double mib = report.head_param_mib();
    ok = ok && bytes == e.bytes && round4(mib) == e.mib;
    std::snprintf(buf, sizeof(buf), " C=%d:%lldB=%.4fMiB", e.n_class,
                  static_cast<long long>(bytes), mib);
    detail += buf;
  }
  return ok;
}

// ---------------------------------------------------------------------------
// 2: feature-mode cost rows and wall-clock are class-count independent
// ---------------------------------------------------------------------------
bool criterion_class_independence(std::string& detail) {
  const int class_counts[] = {10, 50, 199};

  // cost rows excluding the head must serialize identically
  std::vector<std::string> non_head_rows;
  for (const int c : class_counts) {
    const CostReport report = account(base_config(HeadMode::kFeature, c, 8, 28));
    std::string rows;
    for (const LayerCost& r : report.rows)
      if (r.name != "head") rows += r.csv_row() + "\n";
    non_head_rows.push_back(rows);
  }
  const bool rows_identical = non_head_rows[0] == non_head_rows[1] &&
                              non_head_rows[0] == non_head_rows[2];

  // wall-clock of one forward+backward pass, median of 5 interleaved reps
  const int kBatch = 16, kReps = 5;
  struct Ctx {
    std::unique_ptr<CapsuleNetwork> net;
    std::vector<int> labels;
    std::vector<double> secs;
  };
  std::vector<Ctx> ctxs;
  Dataset data = make_glyph_dataset(kBatch, 10, 28, 28, 404);
  Tensor images = data.images;
  for (const int c : class_counts) {
    Ctx ctx;
    NetworkConfig cfg = base_config(HeadMode::kFeature, c, 8, 28);
    Rng rng(7);
    ctx.net = std::make_unique<CapsuleNetwork>(cfg, rng);
    for (int l : data.labels) ctx.labels.push_back(l % c);
    ctxs.push_back(std::move(ctx));
  }
  Tape tape;
  auto pass = [&](Ctx& ctx) {
    tape.reset();
    ForwardResult fwd = ctx.net->forward(tape, images, &ctx.labels, true);
    tape.backward(fwd.loss);
  };
  for (auto& ctx : ctxs) pass(ctx);  // warmup
  for (int rep = 0; rep < kReps; ++rep)
    for (auto& ctx : ctxs) {
      const auto t0 = std::chrono::steady_clock::now();
      pass(ctx);
      ctx.secs.push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() /
          kBatch);
    }
  std::vector<double> medians;
  for (auto& ctx : ctxs) medians.push_back(median(ctx.secs));
  const double spread = *std::max_element(medians.begin(), medians.end()) /
                            *std::min_element(medians.begin(), medians.end()) -
                        1.0;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                " rows_identical=%d sec/sample C10=%.5f C50=%.5f C199=%.5f spread=%.2f%%",
                rows_identical, medians[0], medians[1], medians[2], 100 * spread);
  detail += buf;
  return rows_identical && spread < 0.10;
}

// ---------------------------------------------------------------------------
// 3: per-sample time non-decreasing, max batch strictly decreasing over
//    the feature sweep (trend-level reproduction of the published tables)
// ---------------------------------------------------------------------------
bool criterion_trends(std::string& detail) {
  SweepSpec spec;
  spec.dataset = "synthetic";
  spec.label = "trend";
  spec.image_h = spec.image_w = 28;
  spec.n_class = 10;
  spec.n_features = {2, 4, 6, 8, 10};
  spec.include_class_baseline = false;
  // more routing iterations weight the feature-dependent stage high enough
  // that the time trend rises out of scheduler noise
  spec.routing_iters = 40;
  spec.batch_size = 16;
  spec.repetitions = 13;
  spec.samples_per_rep = 64;
  spec.budget_bytes = 2ll * 1024 * 1024 * 1024;
  spec.seed = 31;

  const SweepResult result = measure(spec);
  bool ok = true;
  char buf[120];
  double prev_time = -1;
  int64_t prev_batch = std::numeric_limits<int64_t>::max();
  for (const SweepCell& cell : result.cells) {
    if (!cell.ok) {
      detail += " cell nf_" + std::to_string(cell.n_features) + " failed: " + cell.error;
      return false;
    }
    ok = ok && cell.seconds_per_sample >= prev_time && cell.max_batch_size < prev_batch;
    std::snprintf(buf, sizeof(buf), " nf_%d:%.5fs,b%lld", cell.n_features,
                  cell.seconds_per_sample, static_cast<long long>(cell.max_batch_size));
    detail += buf;
    prev_time = cell.seconds_per_sample;
    prev_batch = cell.max_batch_size;
  }
  return ok;
}

// ---------------------------------------------------------------------------
// 4: finite-difference gradient suite
// ---------------------------------------------------------------------------
bool criterion_gradients(std::string& detail) {
  GradCheckOptions opts;
  opts.seed = 1;
  opts.probes = 24;
  const auto results = run_gradcheck(opts);
  const char* required[] = {"conv",          "primary_caps",  "routing",
                            "fc_head",       "decoder",       "margin_class",
                            "margin_feature", "reconstruction"};
  bool ok = true;
  double worst = 0;
  for (const char* name : required) {
    bool found = false;
    for (const auto& r : results)
      if (r.layer == name) {
        found = true;
        ok = ok && r.pass && r.probes >= 20;
        worst = std::max(worst, r.max_rel_err);
      }
    ok = ok && found;
  }
  for (const auto& r : results) {  // the full-network checks ride along
    ok = ok && r.pass;
    worst = std::max(worst, r.max_rel_err);
  }
  char buf[80];
  std::snprintf(buf, sizeof(buf), " %zu checks, worst rel err %.2e (tol 1e-2)",
                results.size(), worst);
  detail += buf;
  return ok;
}

// ---------------------------------------------------------------------------
// 5: dynamic routing equals the scalar transcription on 100 random instances
// ---------------------------------------------------------------------------
bool criterion_routing_oracle(std::string& detail) {
  Rng rng(777);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.next_below(3));
    const int m = 2 + static_cast<int>(rng.next_below(2));
    const int r = 1 + static_cast<int>(rng.next_below(3));
    const int d_in = 8, d_out = 16;

    std::vector<double> u(static_cast<size_t>(n) * d_in);
    std::vector<double> w(static_cast<size_t>(n) * m * d_in * d_out);
    for (auto& x : u) x = rng.uniform(-1, 1);
    for (auto& x : w) x = rng.uniform(-1, 1);

    RoutingLayer layer;
    layer.iterations = r;
    layer.w = Tensor({n, m, d_in, d_out});
    for (size_t i = 0; i < w.size(); ++i) layer.w.ptr()[i] = static_cast<real>(w[i]);
    Tensor ut({1, n, d_in});
    for (size_t i = 0; i < u.size(); ++i) ut.ptr()[i] = static_cast<real>(u[i]);

    Tape tape;
    RoutingState state = layer.forward(tape, ut, nullptr);
    const oracle::RoutingOracle ref(u, w, n, m, d_in, d_out, r);
    for (int64_t i = 0; i < state.v.size(); ++i)
      worst = std::max(worst,
                       std::abs(static_cast<double>(state.v[i]) - ref.v[static_cast<size_t>(i)]));
    for (int64_t i = 0; i < state.c.size(); ++i)
      worst = std::max(worst,
                       std::abs(static_cast<double>(state.c[i]) - ref.c[static_cast<size_t>(i)]));
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), " worst |engine-oracle| = %.2e", worst);
  detail += buf;
  return worst < 1e-6;
}

// ---------------------------------------------------------------------------
// 6: both heads learn a 10-class desk-scale corpus; feature mode stays
//    within 3 accuracy points of class mode
// ---------------------------------------------------------------------------
bool criterion_desk_scale(std::string& detail) {
  const int kTrain = 2000, kTest = 1000, kEpochs = 3, kImage = 28;

  Dataset train_set, test_set;
  const char* data_env = std::getenv("CAPSNET_DATA_DIR");
  std::string source = "synthetic glyphs";
  if (data_env && fs::exists(fs::path(data_env) / "train-images-idx3-ubyte")) {
    // a real IDX corpus (e.g. MNIST or converted CMATERdb numerals)
    source = data_env;
    Dataset full_train = load_idx((fs::path(data_env) / "train-images-idx3-ubyte").string(),
                                  (fs::path(data_env) / "train-labels-idx1-ubyte").string());
    Dataset full_test = load_idx((fs::path(data_env) / "t10k-images-idx3-ubyte").string(),
                                 (fs::path(data_env) / "t10k-labels-idx1-ubyte").string());
    std::vector<int> idx;
    for (int i = 0; i < std::min(kTrain, full_train.size()); ++i) idx.push_back(i);
    train_set.images = full_train.gather_images(idx);
    train_set.labels = full_train.gather_labels(idx);
    train_set.class_count = full_train.class_count;
    idx.clear();
    for (int i = 0; i < std::min(kTest, full_test.size()); ++i) idx.push_back(i);
    test_set.images = full_test.gather_images(idx);
    test_set.labels = full_test.gather_labels(idx);
    test_set.class_count = full_test.class_count;
  } else {
    // MNIST-format path: generate, write IDX, read back through the loader
    const fs::path dir = fs::temp_directory_path() / "capsnet_acceptance_data";
    fs::create_directories(dir);
    Dataset train_raw = make_glyph_dataset(kTrain, 10, kImage, kImage, 2001);
    Dataset test_raw = make_glyph_dataset(kTest, 10, kImage, kImage, 2002);
    save_idx(train_raw, (dir / "train-images-idx3-ubyte").string(),
             (dir / "train-labels-idx1-ubyte").string());
    save_idx(test_raw, (dir / "t10k-images-idx3-ubyte").string(),
             (dir / "t10k-labels-idx1-ubyte").string());
    train_set = load_idx((dir / "train-images-idx3-ubyte").string(),
                         (dir / "train-labels-idx1-ubyte").string());
    test_set = load_idx((dir / "t10k-images-idx3-ubyte").string(),
                        (dir / "t10k-labels-idx1-ubyte").string());
  }

  auto run_mode = [&](HeadMode head) {
    NetworkConfig cfg = base_config(head, 10, 4, train_set.height());
    cfg.batch_size = 64;
    cfg.epochs = kEpochs;
    cfg.seed = 77;
    const TrainResult result = train(cfg, train_set);
    return evaluate(result.best, test_set).accuracy;
  };
  const double acc_class = run_mode(HeadMode::kClass);
  const double acc_feature = run_mode(HeadMode::kFeature);

  char buf[200];
  std::snprintf(buf, sizeof(buf),
                " data=%s epochs=%d class=%.4f feature(nf=4)=%.4f delta=%.4f", source.c_str(),
                kEpochs, acc_class, acc_feature, std::abs(acc_class - acc_feature));
  detail += buf;
  return acc_class >= 0.90 && acc_feature >= 0.90 &&
         std::abs(acc_class - acc_feature) <= 0.03;
}

// ---------------------------------------------------------------------------
// 7: property bundle
// ---------------------------------------------------------------------------
bool criterion_invariants(std::string& detail) {
  Rng rng(99);
  bool ok = true;
  auto expect = [&](bool cond, const char* what) {
    if (!cond) {
      ok = false;
      detail += std::string(" FAILED:") + what;
    }
  };

  // coupling normalization across iterations
  {
    Tape tape;
    Tensor u_hat = oracle::random_tensor(rng, {2, 6, 4, 16}, -2, 2);
    RoutingState state = route_by_agreement(tape, u_hat, 3);
    for (const Tensor& c : state.coupling_history)
      for (int b = 0; b < 2; ++b)
        for (int i = 0; i < 6; ++i) {
          double sum = 0;
          for (int j = 0; j < 4; ++j) sum += c[(static_cast<int64_t>(b) * 6 + i) * 4 + j];
          expect(std::abs(sum - 1.0) < 1e-6, "coupling_normalization");
        }
  }
  // squash bound and fixed points
  {
    Tape tape;
    for (int trial = 0; trial < 50; ++trial) {
      Tensor s = oracle::random_tensor(rng, {1, 16}, -10, 10);
      const double out = oracle::l2norm_sumsq(tape.squash(s).ptr(), 16);
      expect(out < 1.0, "squash_bound");
    }
    Tensor unit({2}, {real(1), real(0)});
    expect(std::abs(oracle::l2norm_sumsq(tape.squash(unit).ptr(), 2) - 0.5) < 1e-6,
           "squash_at_norm_1");
    Tensor three({2}, {real(3), real(0)});
    expect(std::abs(oracle::l2norm_sumsq(tape.squash(three).ptr(), 2) - 0.9) < 1e-6,
           "squash_at_norm_3");
  }
  // zero margin loss exactly at the margins
  {
    Tape tape;
    Tensor good({1, 3}, {real(0.95), real(0.1), real(0.02)});
    expect(static_cast<double>(margin_loss_class(tape, good, {0}, LossConfig{})[0]) == 0.0,
           "margin_zero_when_cleared");
    Tensor bad({1, 3}, {real(0.85), real(0.1), real(0.02)});
    expect(static_cast<double>(margin_loss_class(tape, bad, {0}, LossConfig{})[0]) > 0.0,
           "margin_positive_when_violated");
  }
  // masking property: exactly one capsule block survives
  {
    Tape tape;
    Tensor caps = oracle::random_tensor(rng, {3, 5, 16}, 0.1, 1.0);
    std::vector<int> mask{4, 2, 0};
    Tensor flat = decoder_input(tape, caps, &mask, HeadMode::kClass);
    for (int b = 0; b < 3; ++b) {
      int nonzero_blocks = 0;
      for (int j = 0; j < 5; ++j) {
        bool any = false;
        for (int k = 0; k < 16; ++k)
          any = any || flat[(static_cast<int64_t>(b) * 5 + j) * 16 + k] != 0;
        nonzero_blocks += any;
        if (any) expect(j == mask[static_cast<size_t>(b)], "mask_position");
      }
      expect(nonzero_blocks == 1, "mask_single_block");
    }
    Tensor unmasked = decoder_input(tape, caps, nullptr, HeadMode::kFeature);
    expect(unmasked.size() == caps.size(), "feature_flatten_length");
  }
  // IDX round trip, bit identical
  {
    const fs::path dir = fs::temp_directory_path() / "capsnet_acceptance_idx";
    fs::create_directories(dir);
    Dataset ds = make_glyph_dataset(16, 4, 12, 12, 5);
    save_idx(ds, (dir / "i").string(), (dir / "l").string());
    Dataset back = load_idx((dir / "i").string(), (dir / "l").string());
    save_idx(back, (dir / "i2").string(), (dir / "l2").string());
    Dataset twice = load_idx((dir / "i2").string(), (dir / "l2").string());
    expect(back.labels == twice.labels, "idx_labels_roundtrip");
    expect(std::memcmp(back.images.ptr(), twice.images.ptr(),
                       sizeof(real) * static_cast<size_t>(back.images.size())) == 0,
           "idx_pixels_roundtrip");
    fs::remove_all(dir);
  }
  // checkpoint round trip and seed determinism on a tiny run
  {
    NetworkConfig cfg = base_config(HeadMode::kClass, 2, 0, 17);
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.seed = 3;
    Dataset blobs = make_blob_dataset(8, 17, 17, 31);
    const TrainResult a = train(cfg, blobs);
    const TrainResult b = train(cfg, blobs);
    expect(a.log.rows.size() == b.log.rows.size(), "determinism_rows");
    for (size_t i = 0; i < a.log.rows.size(); ++i)
      expect(std::memcmp(&a.log.rows[i].mean_loss, &b.log.rows[i].mean_loss, sizeof(double)) ==
                 0,
             "determinism_loss_bits");

    const fs::path path = fs::temp_directory_path() / "capsnet_acceptance_ckpt.bin";
    a.best.save(path.string());
    const Checkpoint loaded = Checkpoint::load(path.string());
    fs::remove(path);
    const EvalResult ea = evaluate(a.best, blobs);
    const EvalResult eb = evaluate(loaded, blobs);
    expect(ea.accuracy == eb.accuracy && ea.confusion == eb.confusion,
           "checkpoint_roundtrip_eval");
  }
  if (ok) detail += " all properties hold";
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<Criterion> criteria = {
      {1, "head memory delta (0.0061/0.0307/0.1222 MiB)", criterion_head_memory},
      {2, "routing class-independence (rows byte-identical, wall-clock < 10%)",
       criterion_class_independence},
      {3, "trend reproduction (time non-decreasing, max batch strictly decreasing)",
       criterion_trends},
      {4, "gradient suite (rel err < 1e-2, >= 20 probes per layer)", criterion_gradients},
      {5, "routing oracle equivalence (100 instances, 1e-6)", criterion_routing_oracle},
      {6, "desk-scale learning (both heads >= 90%, parity within 3 points)",
       criterion_desk_scale},
      {7, "invariant suite", criterion_invariants},
  };

  int only = 0;
  if (argc > 1) only = std::atoi(argv[1]);

  bool all_ok = true;
  for (const Criterion& c : criteria) {
    if (only && c.id != only) continue;
    std::string detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail += std::string(" exception: ") + e.what();
    }
    std::printf("[%s] criterion %d: %s --%s\n", ok ? "PASS" : "FAIL", c.id, c.name.c_str(),
                detail.c_str());
    std::fflush(stdout);
    all_ok = all_ok && ok;
  }
  return all_ok ? 0 : 1;
}
