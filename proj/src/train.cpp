#include "capsnet/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace capsnet {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void MetricLog::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "epoch,mean_loss,train_accuracy,seconds,seconds_per_sample\n";
  for (const EpochRow& r : rows)
    out << r.epoch << ',' << fmt_double(r.mean_loss) << ',' << fmt_double(r.train_accuracy)
        << ',' << fmt_double(r.seconds) << ',' << fmt_double(r.seconds_per_sample) << '\n';
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

Checkpoint Checkpoint::snapshot(CapsuleNetwork& net, int epoch, double train_accuracy) {
  Checkpoint ckpt;
  ckpt.config = net.config();
  ckpt.epoch = epoch;
  ckpt.train_accuracy = train_accuracy;
  for (auto& [name, tensor] : net.parameters()) ckpt.tensors.emplace_back(name, tensor->clone());
  return ckpt;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  std::string config_line = config.to_json();
  // keep the manifest line-oriented
  for (char& c : config_line)
    if (c == '\n') c = ' ';
  out << "capsnet-checkpoint v1\n";
  out << "epoch " << epoch << '\n';
  out << "train_accuracy " << fmt_double(train_accuracy) << '\n';
  out << "config " << config_line << '\n';
  for (const auto& [name, tensor] : tensors) {
    out << "tensor " << name << ' ';
    for (size_t i = 0; i < tensor.shape.size(); ++i)
      out << (i ? "," : "") << tensor.shape[i];
    out << '\n';
  }
  out << "payload\n";
  for (const auto& [name, tensor] : tensors) {
    (void)name;
    std::vector<float> flat(static_cast<size_t>(tensor.size()));
    for (int64_t i = 0; i < tensor.size(); ++i)
      flat[static_cast<size_t>(i)] = static_cast<float>(tensor.ptr()[i]);
    out.write(reinterpret_cast<const char*>(flat.data()),
              static_cast<std::streamsize>(flat.size() * sizeof(float)));
  }
  if (!out) throw DataError("failed while writing " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::string line;
  if (!std::getline(in, line) || line != "capsnet-checkpoint v1")
    throw DataError(path + ": not a capsnet checkpoint");
  Checkpoint ckpt;
  bool saw_config = false;
  while (std::getline(in, line)) {
    if (line == "payload") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "epoch") {
      ls >> ckpt.epoch;
    } else if (key == "train_accuracy") {
      ls >> ckpt.train_accuracy;
    } else if (key == "config") {
      std::string rest;
      std::getline(ls, rest);
      ckpt.config = NetworkConfig::from_json(rest);
      saw_config = true;
    } else if (key == "tensor") {
      std::string name, dims;
      ls >> name >> dims;
      Shape shape;
      std::istringstream ds(dims);
      std::string tok;
      while (std::getline(ds, tok, ',')) shape.push_back(std::stoi(tok));
      ckpt.tensors.emplace_back(name, Tensor(shape));
    } else {
      throw DataError(path + ": unknown manifest key '" + key + "'");
    }
  }
  if (!saw_config) throw DataError(path + ": manifest has no config record");
  for (auto& [name, tensor] : ckpt.tensors) {
    std::vector<float> flat(static_cast<size_t>(tensor.size()));
    in.read(reinterpret_cast<char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(flat.size() * sizeof(float)))
      throw DataError(path + ": payload truncated in tensor " + name);
    for (int64_t i = 0; i < tensor.size(); ++i)
      tensor.ptr()[i] = static_cast<real>(flat[static_cast<size_t>(i)]);
  }
  return ckpt;
}

CapsuleNetwork Checkpoint::restore() const {
  Rng rng(config.seed);
  CapsuleNetwork net(config, rng);
  auto params = net.parameters();
  if (params.size() != tensors.size())
    throw DataError("checkpoint has " + std::to_string(tensors.size()) + " tensors, network has " +
                    std::to_string(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, stored] = tensors[i];
    auto& [pname, ptensor] = params[i];
    if (name != pname || stored.shape != ptensor->shape)
      throw DataError("checkpoint tensor " + name + " " + shape_str(stored.shape) +
                      " does not match network parameter " + pname + " " +
                      shape_str(ptensor->shape));
    std::memcpy(ptensor->ptr(), stored.ptr(), sizeof(real) * static_cast<size_t>(stored.size()));
  }
  return net;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void adam_step(std::vector<Tensor>& params, const std::vector<std::vector<real>>& grads,
               AdamState& state, double lr) {
  if (params.size() != grads.size())
    throw UsageError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t p = 0; p < params.size(); ++p) {
      state.m[p].assign(static_cast<size_t>(params[p].size()), real(0));
      state.v[p].assign(static_cast<size_t>(params[p].size()), real(0));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t p = 0; p < params.size(); ++p) {
    real* w = params[p].ptr();
    const std::vector<real>& g = grads[p];
    std::vector<real>& m = state.m[p];
    std::vector<real>& v = state.v[p];
    for (size_t i = 0; i < g.size(); ++i) {
      m[i] = static_cast<real>(state.beta1 * m[i] + (1.0 - state.beta1) * g[i]);
      v[i] = static_cast<real>(state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i]);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= static_cast<real>(lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

TrainResult train(const NetworkConfig& config, const Dataset& train_set) {
  config.validate();
  train_set.validate();
  if (train_set.class_count != config.n_class)
    throw UsageError("dataset has " + std::to_string(train_set.class_count) +
                     " classes but the config expects " + std::to_string(config.n_class));
  if (train_set.height() != config.image_h || train_set.width() != config.image_w)
    throw UsageError("dataset images are " + std::to_string(train_set.height()) + "x" +
                     std::to_string(train_set.width()) + " but the config expects " +
                     std::to_string(config.image_h) + "x" + std::to_string(config.image_w));

  Rng rng(config.seed);
  CapsuleNetwork net(config, rng);

  TrainResult result;
  result.best = Checkpoint::snapshot(net, 0, 0.0);
  if (config.epochs == 0) return result;

  AdamState adam;
  Tape tape;
  double best_acc = -1.0;
  double last_finite_loss = 0.0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    BatchIterator batches(train_set, config.batch_size, config.seed, epoch);
    Tensor images;
    std::vector<int> labels;
    double loss_sum = 0;
    int64_t correct = 0, seen = 0;
    while (batches.next(images, labels)) {
      tape.reset();
      BoundParams bound;
      ForwardResult fwd = net.forward(tape, images, &labels, /*with_decoder=*/true, &bound);
      const double loss_value = static_cast<double>(fwd.loss[0]);
      if (!std::isfinite(loss_value))
        throw NumericError("training diverged in epoch " + std::to_string(epoch) +
                           "; last finite epoch " + std::to_string(epoch - 1) +
                           " had mean loss " + std::to_string(last_finite_loss));
      tape.backward(fwd.loss);

      std::vector<Tensor> params;
      std::vector<std::vector<real>> grads;
      params.reserve(bound.items.size());
      grads.reserve(bound.items.size());
      for (auto& [name, watched] : bound.items) {
        (void)name;
        params.push_back(watched);  // shares the master buffers
        grads.push_back(tape.grad(watched));
      }
      adam_step(params, grads, adam, config.learning_rate);

      loss_sum += loss_value * static_cast<double>(labels.size());
      for (size_t i = 0; i < labels.size(); ++i)
        if (fwd.predictions[i] == labels[i]) ++correct;
      seen += static_cast<int64_t>(labels.size());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                            .count();
    EpochRow row;
    row.epoch = epoch;
    row.mean_loss = loss_sum / static_cast<double>(seen);
    row.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    row.seconds = secs;
    row.seconds_per_sample = secs / static_cast<double>(seen);
    result.log.rows.push_back(row);
    last_finite_loss = row.mean_loss;

    if (row.train_accuracy > best_acc) {
      best_acc = row.train_accuracy;
      result.best = Checkpoint::snapshot(net, epoch, row.train_accuracy);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

void EvalResult::write_confusion_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "true_class";
  for (size_t j = 0; j < confusion.size(); ++j) out << ",pred_" << j;
  out << '\n';
  for (size_t i = 0; i < confusion.size(); ++i) {
    out << i;
    for (int64_t v : confusion[i]) out << ',' << v;
    out << '\n';
  }
}

EvalResult evaluate(CapsuleNetwork& net, const Dataset& test_set) {
  test_set.validate();
  const NetworkConfig& cfg = net.config();
  if (test_set.class_count != cfg.n_class)
    throw UsageError("dataset has " + std::to_string(test_set.class_count) +
                     " classes but the checkpoint expects " + std::to_string(cfg.n_class));
  if (test_set.height() != cfg.image_h || test_set.width() != cfg.image_w)
    throw UsageError("dataset images are " + std::to_string(test_set.height()) + "x" +
                     std::to_string(test_set.width()) + " but the checkpoint expects " +
                     std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w));

  EvalResult res;
  res.confusion.assign(static_cast<size_t>(cfg.n_class),
                       std::vector<int64_t>(static_cast<size_t>(cfg.n_class), 0));
  Tape tape;
  std::vector<int> order(static_cast<size_t>(test_set.size()));
  for (int i = 0; i < test_set.size(); ++i) order[static_cast<size_t>(i)] = i;
  for (size_t start = 0; start < order.size();
       start += static_cast<size_t>(cfg.batch_size)) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
    std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
    Tensor images = test_set.gather_images(idx);
    std::vector<int> labels = test_set.gather_labels(idx);
    tape.reset();
    ForwardResult fwd = net.forward(tape, images, nullptr, /*with_decoder=*/false);
    for (size_t i = 0; i < labels.size(); ++i) {
      ++res.confusion[static_cast<size_t>(labels[i])]
                     [static_cast<size_t>(fwd.predictions[i])];
      if (fwd.predictions[i] == labels[i]) ++res.correct;
    }
    res.total += static_cast<int64_t>(labels.size());
  }
  res.accuracy = res.total ? static_cast<double>(res.correct) / static_cast<double>(res.total)
                           : 0.0;
  res.per_class_accuracy.assign(static_cast<size_t>(cfg.n_class), 0.0);
  for (int c = 0; c < cfg.n_class; ++c) {
    int64_t row_total = 0;
    for (int64_t v : res.confusion[static_cast<size_t>(c)]) row_total += v;
    if (row_total)
      res.per_class_accuracy[static_cast<size_t>(c)] =
          static_cast<double>(res.confusion[static_cast<size_t>(c)][static_cast<size_t>(c)]) /
          static_cast<double>(row_total);
  }
  return res;
}

EvalResult evaluate(const Checkpoint& ckpt, const Dataset& test_set) {
  CapsuleNetwork net = ckpt.restore();
  return evaluate(net, test_set);
}

}  // namespace capsnet
