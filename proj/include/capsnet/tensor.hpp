#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "capsnet/common.hpp"

namespace capsnet {

class Tape;

// Dense row-major tensor. Copies are cheap and share the underlying buffer;
// ops never mutate their inputs, so sharing is safe. A tensor attached to a
// tape carries the node handle of the op that produced it; node < 0 means
// detached (plain data, no gradient flow).
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<real>> data;
  int node = -1;
  uint64_t tape_gen = 0;

  Tensor() : data(std::make_shared<std::vector<real>>()) {}

  explicit Tensor(Shape s)
      : shape(std::move(s)),
        data(std::make_shared<std::vector<real>>(numel(shape), real(0))) {}

  Tensor(Shape s, std::vector<real> values)
      : shape(std::move(s)), data(std::make_shared<std::vector<real>>(std::move(values))) {
    if (numel(shape) != static_cast<int64_t>(data->size()))
      throw ConfigError("tensor shape " + shape_str(shape) + " does not match value count " +
                        std::to_string(data->size()));
  }

  int64_t size() const { return static_cast<int64_t>(data->size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  real* ptr() { return data->data(); }
  const real* ptr() const { return data->data(); }
  real& operator[](int64_t i) { return (*data)[static_cast<size_t>(i)]; }
  real operator[](int64_t i) const { return (*data)[static_cast<size_t>(i)]; }

  // deep copy, detached from any tape
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<real>>(*data);
    return t;
  }

  // same buffer, no tape attachment
  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
  }

  bool all_finite() const;
  real max_abs() const;
};

Tensor tensor_full(Shape shape, real value);

// Reverse-mode tape. Ops append a node with a backward closure; backward()
// replays the closures in reverse order, accumulating into per-node gradient
// buffers. One tape is a single-threaded unit of work; independent tapes may
// live on independent threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Drops all nodes and gradient buffers. Handles created before reset are
  // rejected by later ops.
  void reset();

  uint64_t generation() const { return gen_; }
  size_t node_count() const { return nodes_.size(); }

  // Registers a leaf. Shares the tensor's buffer; the caller keeps ownership
  // of the values and reads the gradient back through grad().
  Tensor watch(const Tensor& t);

  // ---- primitives --------------------------------------------------------
  Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride);
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, real s);
  Tensor affine(const Tensor& a, real mul, real add);
  Tensor relu(const Tensor& a);
  Tensor sigmoid(const Tensor& a);
  Tensor square(const Tensor& a);
  Tensor sum(const Tensor& a);
  Tensor softmax(const Tensor& a, int axis);
  Tensor l2norm(const Tensor& a);
  Tensor squash(const Tensor& a);
  Tensor reshape(const Tensor& a, Shape shape);  // zero-copy alias

  // capsule-specific contractions
  // u:[B,N,d] x w:[N,M,d,e] -> [B,N,M,e]
  Tensor caps_transform(const Tensor& u, const Tensor& w);
  // c:[B,N,M] x u_hat:[B,N,M,e] -> [B,M,e]
  Tensor coupling_sum(const Tensor& c, const Tensor& u_hat);
  // u_hat:[B,N,M,e] x v:[B,M,e] -> [B,N,M]
  Tensor agreement(const Tensor& u_hat, const Tensor& v);
  // zero every capsule except keep[b] in caps:[B,M,e]
  Tensor mask_capsules(const Tensor& caps, const std::vector<int>& keep);
  // regroup conv maps [B,G*d,H,W] into capsules [B,G*H*W,d]; capsule (g,y,x)
  // collects the d channels g*d..g*d+d-1 at position (y,x)
  Tensor group_capsules(const Tensor& x, int caps_dim);

  // elementwise op with a caller-supplied derivative; extension point for
  // custom primitives (and for fault-injection in the gradient checker)
  Tensor custom_unary(const Tensor& a, std::function<real(real)> f,
                      std::function<real(real)> df);

  // ---- gradients ---------------------------------------------------------
  void backward(const Tensor& loss);
  // Gradient of a watched/op tensor; zeros if the loss never touched it.
  std::vector<real> grad(const Tensor& t) const;

  // When on, every op output is checked for NaN/Inf and a NumericError is
  // raised at the op that produced it. Off by default (training checks the
  // loss instead).
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    int64_t out_size = 0;
    std::function<void(Tape&)> back;  // empty for leaves
  };

  friend struct TapeOps;

  int push_node(int64_t out_size, std::function<void(Tape&)> back);
  std::vector<real>& grad_buf(int node, int64_t size);
  const std::vector<real>* grad_ptr(int node) const;
  void check_attached(const Tensor& t, const char* op) const;
  Tensor make_output(Shape shape, std::vector<real> values, std::function<void(Tape&)> back,
                     const char* op);

  std::vector<Node> nodes_;
  std::vector<std::vector<real>> grads_;
  uint64_t gen_ = 1;
  bool check_finite_ = false;
};

// composed ops (chains of primitives, differentiable end to end)
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mse(Tape& tape, const Tensor& a, const Tensor& b);

// deterministic blocked GEMM kernels; ascending-k accumulation order so
// results are reproducible and match naive loop oracles bit for bit
namespace detail {
void gemm_nn(int64_t m, int64_t n, int64_t k, const real* a, const real* b, real* c);
void transpose(int64_t rows, int64_t cols, const real* src, real* dst);
}  // namespace detail

}  // namespace capsnet
