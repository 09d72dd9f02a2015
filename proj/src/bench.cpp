#include "capsnet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>

#include <json.hpp>

#include "capsnet/synthetic.hpp"
#include "capsnet/train.hpp"

namespace capsnet {

uint64_t fnv1a64(const std::string& text) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string LayerCost::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%lld,%lld,%lld,%lld,%lld,%lld", name.c_str(),
                static_cast<long long>(params), static_cast<long long>(param_bytes),
                static_cast<long long>(grad_bytes), static_cast<long long>(optimizer_bytes),
                static_cast<long long>(activation_bytes_per_sample),
                static_cast<long long>(forward_flops_per_sample));
  return buf;
}

LayerCost CostReport::totals() const {
  LayerCost t;
  t.name = "total";
  for (const LayerCost& r : rows) {
    t.params += r.params;
    t.param_bytes += r.param_bytes;
    t.grad_bytes += r.grad_bytes;
    t.optimizer_bytes += r.optimizer_bytes;
    t.activation_bytes_per_sample += r.activation_bytes_per_sample;
    t.forward_flops_per_sample += r.forward_flops_per_sample;
  }
  return t;
}

int64_t CostReport::fixed_bytes() const {
  const LayerCost t = totals();
  return t.param_bytes + t.grad_bytes + t.optimizer_bytes;
}

int64_t CostReport::activation_bytes_per_sample() const {
  return totals().activation_bytes_per_sample;
}

int64_t CostReport::total_params() const { return totals().params; }

double CostReport::head_param_mib() const {
  return static_cast<double>(row("head").param_bytes) / (1024.0 * 1024.0);
}

const LayerCost& CostReport::row(const std::string& name) const {
  for (const LayerCost& r : rows)
    if (r.name == name) return r;
  throw UsageError("cost report has no row named '" + name + "'");
}

std::string CostReport::to_csv() const {
  std::string out =
      "layer,params,param_bytes,grad_bytes,optimizer_bytes,"
      "activation_bytes_per_sample,forward_flops_per_sample\n";
  for (const LayerCost& r : rows) out += r.csv_row() + "\n";
  out += totals().csv_row() + "\n";
  return out;
}

namespace {

constexpr int64_t kFloatBytes = 4;

// activations and flops of the composed margin loss on [C] scores
int64_t margin_act(int64_t c) { return 9 * c + 2; }
int64_t margin_flops(int64_t c) { return 12 * c + 2; }

int64_t squash_flops(int64_t vectors, int64_t dim) { return vectors * (3 * dim + 4); }

LayerCost make_row(const std::string& name, int64_t params, int64_t act_floats,
                   int64_t flops) {
  LayerCost r;
  r.name = name;
  r.params = params;
  r.param_bytes = params * kFloatBytes;
  r.grad_bytes = params * kFloatBytes;
  r.optimizer_bytes = 2 * params * kFloatBytes;  // Adam m and v
  r.activation_bytes_per_sample = act_floats * kFloatBytes;
  r.forward_flops_per_sample = flops;
  return r;
}

}  // namespace

CostReport account(const NetworkConfig& config) {
  config.validate();
  const int64_t h = config.image_h, w = config.image_w;
  const int64_t hw = h * w;
  const int64_t kk = 9 * 9;
  const int64_t conv_maps = 256;
  const int64_t caps_dim = 8, d_out = 16;
  const int64_t h1 = h - 8, w1 = w - 8;
  const int64_t h2 = (h1 - 9) / 2 + 1, w2 = (w1 - 9) / 2 + 1;
  const int64_t n_pc = 32 * h2 * w2;
  const int64_t m = config.n_out();
  const int64_t c = config.n_class;
  const int64_t r = config.routing_iters;
  const int64_t d_in_dec = d_out * m;

  CostReport report;
  report.rows.push_back(make_row("input", 0, hw, 0));

  report.rows.push_back(make_row("conv1", conv_maps * kk,
                                 2 * conv_maps * h1 * w1,
                                 2 * kk * conv_maps * h1 * w1 + conv_maps * h1 * w1));

  report.rows.push_back(make_row(
      "primary_caps", conv_maps * conv_maps * kk, 3 * conv_maps * h2 * w2,
      2 * kk * conv_maps * conv_maps * h2 * w2 + squash_flops(n_pc, caps_dim)));

  {
    const int64_t u_hat = n_pc * m * d_out;
    const int64_t act = u_hat + r * (2 * n_pc * m + 2 * m * d_out);  // b,c,s,v per iteration
    const int64_t flops = 2 * n_pc * m * caps_dim * d_out +
                          r * (4 * n_pc * m + 2 * n_pc * m * d_out + squash_flops(m, d_out)) +
                          (r - 1) * (2 * n_pc * m * d_out + n_pc * m);
    report.rows.push_back(make_row("routing", n_pc * m * caps_dim * d_out, act, flops));
  }

  if (config.head == HeadMode::kClass) {
    report.rows.push_back(
        make_row("head", 0, c + margin_act(c), c * (2 * d_out + 1) + margin_flops(c)));
  } else {
    const int64_t fc_in = d_out * config.n_features;
    report.rows.push_back(make_row("head", fc_in * c + c, 2 * c + margin_act(c),
                                   2 * fc_in * c + c + 4 * c + margin_flops(c)));
  }

  {
    const int64_t params = d_in_dec * 512 + 512 + 512 * 1024 + 1024 + 1024 * hw + hw;
    const int64_t mask_copy = config.head == HeadMode::kClass ? d_in_dec : 0;
    const int64_t act = mask_copy + 2 * 512 + 2 * 1024 + 2 * hw + (3 * hw + 2);
    const int64_t flops = 2 * (d_in_dec * 512 + 512 * 1024 + 1024 * hw) +
                          (512 + 1024 + hw) + 512 + 1024 + 4 * hw + 3 * hw;
    report.rows.push_back(make_row("decoder", params, act, flops));
  }
  return report;
}

int64_t max_batch(const CostReport& report, int64_t budget_bytes) {
  const int64_t fixed = report.fixed_bytes();
  const int64_t per_sample = report.activation_bytes_per_sample();
  if (budget_bytes <= fixed)
    throw ConfigError("memory budget " + std::to_string(budget_bytes) +
                      " B does not cover the fixed footprint of " + std::to_string(fixed) +
                      " B (parameters + gradients + optimizer state)");
  const int64_t n = (budget_bytes - fixed) / per_sample;
  if (n < 1)
    throw ConfigError("memory budget " + std::to_string(budget_bytes) +
                      " B fits no sample: fixed footprint " + std::to_string(fixed) +
                      " B plus " + std::to_string(per_sample) + " B per sample");
  return n;
}

// ---------------------------------------------------------------------------
// sweep measurement
// ---------------------------------------------------------------------------

void SweepSpec::validate() const {
  if (repetitions < 3)
    throw ConfigError("sweep repetitions must be >= 3 for timing rows, got " +
                      std::to_string(repetitions));
  if (!include_class_baseline && n_features.empty())
    throw ConfigError("sweep has no cells: no baseline and no n_features values");
  if (batch_size < 1 || samples_per_rep < batch_size)
    throw ConfigError("sweep needs samples_per_rep >= batch_size >= 1");
}

std::string SweepSpec::to_json() const {
  nlohmann::ordered_json j;
  j["dataset"] = dataset;
  j["label"] = label;
  j["image"] = {{"height", image_h}, {"width", image_w}};
  j["classes"] = n_class;
  j["n_features"] = n_features;
  j["include_class_baseline"] = include_class_baseline;
  j["routing_iters"] = routing_iters;
  j["batch_size"] = batch_size;
  j["repetitions"] = repetitions;
  j["samples_per_rep"] = samples_per_rep;
  j["budget_bytes"] = budget_bytes;
  j["seed"] = seed;
  return j.dump(2);
}

SweepSpec SweepSpec::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open sweep spec " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sweep spec is not valid JSON: ") + e.what());
  }
  SweepSpec s;
  try {
    s.dataset = j.value("dataset", s.dataset);
    s.label = j.value("label", s.dataset);
    if (j.contains("image")) {
      s.image_h = j["image"].value("height", s.image_h);
      s.image_w = j["image"].value("width", s.image_w);
    }
    s.n_class = j.value("classes", s.n_class);
    if (j.contains("n_features")) s.n_features = j["n_features"].get<std::vector<int>>();
    s.include_class_baseline = j.value("include_class_baseline", s.include_class_baseline);
    s.routing_iters = j.value("routing_iters", s.routing_iters);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.repetitions = j.value("repetitions", s.repetitions);
    s.samples_per_rep = j.value("samples_per_rep", s.samples_per_rep);
    s.budget_bytes = j.value("budget_bytes", s.budget_bytes);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad sweep spec field: ") + e.what());
  }
  return s;
}

namespace {

struct CellContext {
  SweepCell cell;
  NetworkConfig config;
  std::unique_ptr<CapsuleNetwork> net;
  AdamState adam;
  std::vector<double> rep_seconds_per_sample;
};

NetworkConfig cell_config(const SweepSpec& spec, const std::string& head, int n_features) {
  NetworkConfig cfg;
  cfg.head = head_mode_from_name(head);
  cfg.n_class = spec.n_class;
  cfg.n_features = n_features;
  cfg.routing_iters = spec.routing_iters;
  cfg.image_h = spec.image_h;
  cfg.image_w = spec.image_w;
  cfg.batch_size = spec.batch_size;
  cfg.seed = spec.seed;
  return cfg;
}

// one training step: forward, backward, optimizer update
void train_step(CellContext& ctx, const Tensor& images, std::vector<int>& labels, Tape& tape) {
  // feature cells only know their own class range
  for (int& l : labels) l %= ctx.config.n_class;
  tape.reset();
  BoundParams bound;
  ForwardResult fwd = ctx.net->forward(tape, images, &labels, true, &bound);
  tape.backward(fwd.loss);
  std::vector<Tensor> params;
  std::vector<std::vector<real>> grads;
  for (auto& [name, watched] : bound.items) {
    (void)name;
    params.push_back(watched);
    grads.push_back(tape.grad(watched));
  }
  adam_step(params, grads, ctx.adam, ctx.config.learning_rate);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

SweepResult measure(const SweepSpec& spec) {
  spec.validate();
  SweepResult result;
  result.spec = spec;

  Dataset data;
  if (spec.dataset == "synthetic") {
    data = make_glyph_dataset(spec.samples_per_rep, spec.n_class, spec.image_h, spec.image_w,
                              spec.seed);
  } else {
    data = load_idx(spec.dataset + "/train-images-idx3-ubyte",
                    spec.dataset + "/train-labels-idx1-ubyte");
    if (data.size() > spec.samples_per_rep) {
      std::vector<int> idx(static_cast<size_t>(spec.samples_per_rep));
      for (int i = 0; i < spec.samples_per_rep; ++i) idx[static_cast<size_t>(i)] = i;
      Dataset subset;
      subset.images = data.gather_images(idx);
      subset.labels = data.gather_labels(idx);
      subset.class_count = data.class_count;
      data = std::move(subset);
    }
  }

  std::vector<CellContext> cells;
  auto add_cell = [&](const std::string& head, int n_features) {
    CellContext ctx;
    ctx.cell.head = head;
    ctx.cell.n_features = n_features;
    ctx.config = cell_config(spec, head, n_features);
    try {
      const CostReport report = account(ctx.config);
      ctx.cell.max_batch_size = max_batch(report, spec.budget_bytes);
      ctx.cell.activation_mib_per_sample =
          static_cast<double>(report.activation_bytes_per_sample()) / (1024.0 * 1024.0);
      ctx.cell.params = report.total_params();
      ctx.cell.config_fingerprint = fnv1a64(ctx.config.to_json());
      Rng rng(ctx.config.seed);
      ctx.net = std::make_unique<CapsuleNetwork>(ctx.config, rng);
      ctx.cell.ok = true;
    } catch (const std::exception& e) {
      ctx.cell.ok = false;
      ctx.cell.error = e.what();
    }
    cells.push_back(std::move(ctx));
  };

  if (spec.include_class_baseline) add_cell("class", 0);
  for (int f : spec.n_features) add_cell("feature", f);

  // Every repetition walks the dataset once per cell. Cells are interleaved
  // at batch granularity so clock drift and interference land on every
  // column equally; rep 0 is the warmup and is dropped.
  Tape tape;
  for (int rep = 0; rep <= spec.repetitions; ++rep) {
    std::vector<double> cell_secs(cells.size(), 0.0);
    BatchIterator batches(data, spec.batch_size, spec.seed, rep);
    Tensor images;
    std::vector<int> labels;
    size_t batch_index = 0;
    while (batches.next(images, labels)) {
      // rotate the cell order so every cell sees every predecessor's cache
      // footprint equally often
      const size_t offset = batch_index++ % cells.size();
      for (size_t k = 0; k < cells.size(); ++k) {
        const size_t i = (offset + k) % cells.size();
        CellContext& ctx = cells[i];
        if (!ctx.cell.ok) continue;
        try {
          std::vector<int> cell_labels = labels;
          const auto t0 = std::chrono::steady_clock::now();
          train_step(ctx, images, cell_labels, tape);
          cell_secs[i] +=
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        } catch (const std::exception& e) {
          ctx.cell.ok = false;
          ctx.cell.error = e.what();
        }
      }
    }
    if (rep == 0) continue;  // warmup
    for (size_t i = 0; i < cells.size(); ++i)
      if (cells[i].cell.ok)
        cells[i].rep_seconds_per_sample.push_back(cell_secs[i] /
                                                  static_cast<double>(data.size()));
  }

  for (CellContext& ctx : cells) {
    if (ctx.cell.ok) ctx.cell.seconds_per_sample = median(ctx.rep_seconds_per_sample);
    result.cells.push_back(ctx.cell);
  }
  return result;
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

namespace {

std::string cell_column_name(const SweepCell& cell) {
  return cell.head == "class" ? "capsule_network" : "nf_" + std::to_string(cell.n_features);
}

void write_wide_csv(const std::string& path, const std::string& row_label,
                    const std::vector<SweepCell>& cells,
                    const std::function<std::string(const SweepCell&)>& value) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "dataset";
  for (const SweepCell& c : cells) out << ',' << cell_column_name(c);
  out << '\n' << row_label;
  for (const SweepCell& c : cells) out << ',' << (c.ok ? value(c) : std::string("missing"));
  out << '\n';
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

void emit_report(const SweepResult& result, const std::string& out_dir) {
  bool any_ok = false;
  for (const SweepCell& c : result.cells) any_ok = any_ok || c.ok;
  if (result.cells.empty() || !any_ok)
    throw UsageError("sweep produced no completed cells; nothing to report");

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);

  write_wide_csv((dir / "report_time.csv").string(), result.spec.label, result.cells,
                 [](const SweepCell& c) { return fmt(c.seconds_per_sample); });
  write_wide_csv((dir / "report_memory.csv").string(), result.spec.label, result.cells,
                 [](const SweepCell& c) { return fmt(c.activation_mib_per_sample); });
  write_wide_csv((dir / "report_max_batch.csv").string(), result.spec.label, result.cells,
                 [](const SweepCell& c) { return std::to_string(c.max_batch_size); });

  nlohmann::ordered_json j;
  j["note"] =
      "wall-clock columns are medians over interleaved repetitions on this machine; "
      "only ordinal trends are meaningful, absolute seconds and bytes are hardware-bound";
  {
    char stamp[64];
    const std::time_t now = std::time(nullptr);
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    j["generated_at"] = stamp;
  }
  j["spec"] = nlohmann::ordered_json::parse(result.spec.to_json());
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const SweepCell& c : result.cells) {
    nlohmann::ordered_json jc;
    jc["column"] = cell_column_name(c);
    jc["head"] = c.head;
    jc["n_features"] = c.n_features;
    jc["ok"] = c.ok;
    if (!c.ok) jc["error"] = c.error;
    jc["seconds_per_sample"] = c.seconds_per_sample;
    jc["max_batch"] = c.max_batch_size;
    jc["activation_mib_per_sample"] = c.activation_mib_per_sample;
    jc["params"] = c.params;
    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx", static_cast<unsigned long long>(c.config_fingerprint));
    jc["config_fingerprint"] = fp;
    cells.push_back(jc);
  }
  j["cells"] = cells;
  std::ofstream out(dir / "report.json");
  if (!out) throw DataError("cannot write " + (dir / "report.json").string());
  out << j.dump(2) << '\n';
}

}  // namespace capsnet
