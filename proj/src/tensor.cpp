#include "capsnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace capsnet {

bool Tensor::all_finite() const {
  for (real v : *data)
    if (!std::isfinite(v)) return false;
  return true;
}

real Tensor::max_abs() const {
  real m = 0;
  for (real v : *data) m = std::max(m, std::abs(v));
  return m;
}

Tensor tensor_full(Shape shape, real value) {
  Tensor t(std::move(shape));
  std::fill(t.data->begin(), t.data->end(), value);
  return t;
}

namespace detail {

// Accumulates C += A*B with A:[m,k], B:[k,n], all row-major. The k loop runs
// in ascending order per output element (blocks ascend, k inside each block
// ascends), so the floating-point summation order is identical to the naive
// triple loop. Callers rely on that for bit-exact oracle comparisons.
void gemm_nn(int64_t m, int64_t n, int64_t k, const real* a, const real* b, real* c) {
  constexpr int64_t kBlock = 256;
  for (int64_t k0 = 0; k0 < k; k0 += kBlock) {
    const int64_t k1 = std::min(k0 + kBlock, k);
    for (int64_t i = 0; i < m; ++i) {
      real* crow = c + i * n;
      const real* arow = a + i * k;
      for (int64_t kk = k0; kk < k1; ++kk) {
        const real av = arow[kk];
        const real* brow = b + kk * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

void transpose(int64_t rows, int64_t cols, const real* src, real* dst) {
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

}  // namespace detail

void Tape::reset() {
  nodes_.clear();
  grads_.clear();
  ++gen_;
}

int Tape::push_node(int64_t out_size, std::function<void(Tape&)> back) {
  nodes_.push_back(Node{out_size, std::move(back)});
  return static_cast<int>(nodes_.size()) - 1;
}

std::vector<real>& Tape::grad_buf(int node, int64_t size) {
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  auto& buf = grads_[static_cast<size_t>(node)];
  if (buf.empty()) buf.assign(static_cast<size_t>(size), real(0));
  return buf;
}

const std::vector<real>* Tape::grad_ptr(int node) const {
  if (node < 0 || static_cast<size_t>(node) >= grads_.size()) return nullptr;
  const auto& buf = grads_[static_cast<size_t>(node)];
  return buf.empty() ? nullptr : &buf;
}

void Tape::check_attached(const Tensor& t, const char* op) const {
  if (t.node >= 0 && t.tape_gen != gen_)
    throw UsageError(std::string(op) + ": tensor handle belongs to a cleared tape");
}

Tensor Tape::watch(const Tensor& t) {
  Tensor out = t.detached();
  out.node = push_node(t.size(), nullptr);
  out.tape_gen = gen_;
  return out;
}

Tensor Tape::make_output(Shape shape, std::vector<real> values, std::function<void(Tape&)> back,
                         const char* op) {
  Tensor out(std::move(shape), std::move(values));
  if (check_finite_ && !out.all_finite())
    throw NumericError(std::string(op) + ": non-finite value in output");
  out.node = push_node(out.size(), std::move(back));
  out.tape_gen = gen_;
  return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

// col:[oh*ow, c*kh*kw], column index ordered (channel, dy, dx) to match the
// kernel layout and the naive-loop summation order
void im2col(const real* img, int c, int h, int w, int kh, int kw, int stride, int oh, int ow,
            real* col) {
  const int ckk = c * kh * kw;
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      real* row = col + (static_cast<int64_t>(y) * ow + x) * ckk;
      for (int cc = 0; cc < c; ++cc) {
        const real* plane = img + static_cast<int64_t>(cc) * h * w;
        for (int dy = 0; dy < kh; ++dy) {
          const real* src = plane + static_cast<int64_t>(y * stride + dy) * w + x * stride;
          std::memcpy(row, src, sizeof(real) * static_cast<size_t>(kw));
          row += kw;
        }
      }
    }
  }
}

void col2im_add(const real* col, int c, int h, int w, int kh, int kw, int stride, int oh, int ow,
                real* img) {
  const int ckk = c * kh * kw;
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const real* row = col + (static_cast<int64_t>(y) * ow + x) * ckk;
      for (int cc = 0; cc < c; ++cc) {
        real* plane = img + static_cast<int64_t>(cc) * h * w;
        for (int dy = 0; dy < kh; ++dy) {
          real* dst = plane + static_cast<int64_t>(y * stride + dy) * w + x * stride;
          for (int dx = 0; dx < kw; ++dx) dst[dx] += row[dx];
          row += kw;
        }
      }
    }
  }
}

}  // namespace

Tensor Tape::conv2d(const Tensor& input, const Tensor& kernels, int stride) {
  check_attached(input, "conv2d");
  check_attached(kernels, "conv2d");
  if (input.rank() != 4 || kernels.rank() != 4 || input.dim(1) != kernels.dim(1))
    throw ConfigError("conv2d: input " + shape_str(input.shape) + " incompatible with kernels " +
                      shape_str(kernels.shape));
  if (stride < 1) throw ConfigError("conv2d: stride must be positive");
  const int b = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int k = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  const int oh = (h - kh) / stride + 1;
  const int ow = (w - kw) / stride + 1;
  if (h < kh || w < kw || oh < 1 || ow < 1)
    throw ConfigError("conv2d: input " + shape_str(input.shape) + " too small for kernels " +
                      shape_str(kernels.shape) + " at stride " + std::to_string(stride));

  const int64_t ckk = static_cast<int64_t>(c) * kh * kw;
  const int64_t op = static_cast<int64_t>(oh) * ow;

  // kernels packed as [ckk, k] so the gemm runs ascending over (c,dy,dx)
  std::vector<real> kt(static_cast<size_t>(ckk) * k);
  detail::transpose(k, ckk, kernels.ptr(), kt.data());

  std::vector<real> out(static_cast<size_t>(b) * k * op, real(0));
  std::vector<real> col(static_cast<size_t>(op) * ckk);
  std::vector<real> out_mat(static_cast<size_t>(op) * k);
  for (int bb = 0; bb < b; ++bb) {
    im2col(input.ptr() + static_cast<int64_t>(bb) * c * h * w, c, h, w, kh, kw, stride, oh, ow,
           col.data());
    std::fill(out_mat.begin(), out_mat.end(), real(0));
    detail::gemm_nn(op, k, ckk, col.data(), kt.data(), out_mat.data());
    detail::transpose(op, k, out_mat.data(), out.data() + static_cast<int64_t>(bb) * k * op);
  }

  auto back = [input, kernels, stride, b, c, h, w, k, kh, kw, oh, ow, ckk, op,
               out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g) return;
    const bool need_dx = input.node >= 0;
    const bool need_dk = kernels.node >= 0;
    real* dx = need_dx ? t.grad_buf(input.node, input.size()).data() : nullptr;
    real* dk = need_dk ? t.grad_buf(kernels.node, kernels.size()).data() : nullptr;
    std::vector<real> g_mat(static_cast<size_t>(op) * k);
    std::vector<real> col(static_cast<size_t>(op) * ckk);
    std::vector<real> dcol(static_cast<size_t>(op) * ckk);
    for (int bb = 0; bb < b; ++bb) {
      detail::transpose(k, op, g->data() + static_cast<int64_t>(bb) * k * op, g_mat.data());
      if (need_dk) {
        im2col(input.ptr() + static_cast<int64_t>(bb) * c * h * w, c, h, w, kh, kw, stride, oh,
               ow, col.data());
        for (int64_t p = 0; p < op; ++p) {
          const real* crow = col.data() + p * ckk;
          const real* grow = g_mat.data() + p * k;
          for (int kk = 0; kk < k; ++kk) {
            const real gv = grow[kk];
            real* drow = dk + static_cast<int64_t>(kk) * ckk;
            for (int64_t q = 0; q < ckk; ++q) drow[q] += gv * crow[q];
          }
        }
      }
      if (need_dx) {
        std::fill(dcol.begin(), dcol.end(), real(0));
        detail::gemm_nn(op, ckk, k, g_mat.data(), kernels.ptr(), dcol.data());
        col2im_add(dcol.data(), c, h, w, kh, kw, stride, oh, ow,
                   dx + static_cast<int64_t>(bb) * c * h * w);
      }
    }
  };
  return make_output({b, k, oh, ow}, std::move(out), std::move(back), "conv2d");
}

// ---------------------------------------------------------------------------
// dense products
// ---------------------------------------------------------------------------

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  check_attached(a, "matmul");
  check_attached(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ConfigError("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<real> out(static_cast<size_t>(m) * n, real(0));
  detail::gemm_nn(m, n, k, a.ptr(), b.ptr(), out.data());

  auto back = [a, b, m, k, n, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g) return;
    if (a.node >= 0) {
      real* da = t.grad_buf(a.node, a.size()).data();
      std::vector<real> bt(static_cast<size_t>(k) * n);
      detail::transpose(k, n, b.ptr(), bt.data());
      detail::gemm_nn(m, k, n, g->data(), bt.data(), da);
    }
    if (b.node >= 0) {
      real* db = t.grad_buf(b.node, b.size()).data();
      const real* ap = a.ptr();
      for (int64_t i = 0; i < m; ++i) {
        const real* grow = g->data() + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
          const real av = ap[i * k + kk];
          real* drow = db + kk * n;
          for (int64_t j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
      }
    }
  };
  return make_output({static_cast<int>(m), static_cast<int>(n)}, std::move(out), std::move(back),
                     "matmul");
}

Tensor Tape::linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check_attached(x, "linear");
  check_attached(w, "linear");
  check_attached(bias, "linear");
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || bias.size() != w.dim(1))
    throw ConfigError("linear: x " + shape_str(x.shape) + ", w " + shape_str(w.shape) +
                      ", bias " + shape_str(bias.shape));
  const int64_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  std::vector<real> out(static_cast<size_t>(m) * n);
  for (int64_t i = 0; i < m; ++i)
    std::memcpy(out.data() + i * n, bias.ptr(), sizeof(real) * static_cast<size_t>(n));
  detail::gemm_nn(m, n, k, x.ptr(), w.ptr(), out.data());

  auto back = [x, w, bias, m, k, n, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g) return;
    if (x.node >= 0) {
      real* dx = t.grad_buf(x.node, x.size()).data();
      std::vector<real> wt(static_cast<size_t>(k) * n);
      detail::transpose(k, n, w.ptr(), wt.data());
      detail::gemm_nn(m, k, n, g->data(), wt.data(), dx);
    }
    if (w.node >= 0) {
      real* dw = t.grad_buf(w.node, w.size()).data();
      const real* xp = x.ptr();
      for (int64_t i = 0; i < m; ++i) {
        const real* grow = g->data() + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
          const real xv = xp[i * k + kk];
          real* drow = dw + kk * n;
          for (int64_t j = 0; j < n; ++j) drow[j] += xv * grow[j];
        }
      }
    }
    if (bias.node >= 0) {
      real* db = t.grad_buf(bias.node, bias.size()).data();
      for (int64_t i = 0; i < m; ++i) {
        const real* grow = g->data() + i * n;
        for (int64_t j = 0; j < n; ++j) db[j] += grow[j];
      }
    }
  };
  return make_output({static_cast<int>(m), static_cast<int>(n)}, std::move(out), std::move(back),
                     "linear");
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  check_attached(a, "add");
  check_attached(b, "add");
  if (a.shape != b.shape)
    throw ConfigError("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  std::vector<real> out(*a.data);
  const real* bp = b.ptr();
  for (int64_t i = 0; i < b.size(); ++i) out[static_cast<size_t>(i)] += bp[i];

  auto back = [a, b, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g) return;
    for (const Tensor* in : {&a, &b}) {
      if (in->node < 0) continue;
      real* d = t.grad_buf(in->node, in->size()).data();
      for (size_t i = 0; i < g->size(); ++i) d[i] += (*g)[i];
    }
  };
  return make_output(a.shape, std::move(out), std::move(back), "add");
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  check_attached(a, "mul");
  check_attached(b, "mul");
  if (a.shape != b.shape)
    throw ConfigError("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  std::vector<real> out(static_cast<size_t>(a.size()));
  for (int64_t i = 0; i < a.size(); ++i)
    out[static_cast<size_t>(i)] = a.ptr()[i] * b.ptr()[i];

  auto back = [a, b, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g) return;
    if (a.node >= 0) {
      real* d = t.grad_buf(a.node, a.size()).data();
      for (size_t i = 0; i < g->size(); ++i) d[i] += (*g)[i] * b.ptr()[i];
    }
    if (b.node >= 0) {
      real* d = t.grad_buf(b.node, b.size()).data();
      for (size_t i = 0; i < g->size(); ++i) d[i] += (*g)[i] * a.ptr()[i];
    }
  };
  return make_output(a.shape, std::move(out), std::move(back), "mul");
}

Tensor Tape::scale(const Tensor& a, real s) { return affine(a, s, real(0)); }

Tensor Tape::affine(const Tensor& a, real m, real c) {
  check_attached(a, "affine");
  std::vector<real> out(static_cast<size_t>(a.size()));
  for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = m * a.ptr()[i] + c;

  auto back = [a, m, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g || a.node < 0) return;
    real* d = t.grad_buf(a.node, a.size()).data();
    for (size_t i = 0; i < g->size(); ++i) d[i] += m * (*g)[i];
  };
  return make_output(a.shape, std::move(out), std::move(back), "affine");
}

Tensor Tape::relu(const Tensor& a) {
  check_attached(a, "relu");
  std::vector<real> out(static_cast<size_t>(a.size()));
  for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = std::max(real(0), a.ptr()[i]);

  auto back = [a, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g || a.node < 0) return;
    real* d = t.grad_buf(a.node, a.size()).data();
    for (size_t i = 0; i < g->size(); ++i)
      if (a.ptr()[i] > real(0)) d[i] += (*g)[i];
  };
  return make_output(a.shape, std::move(out), std::move(back), "relu");
}

Tensor Tape::sigmoid(const Tensor& a) {
  check_attached(a, "sigmoid");
  std::vector<real> out(static_cast<size_t>(a.size()));
  for (int64_t i = 0; i < a.size(); ++i) {
    const real x = a.ptr()[i];
    if (x >= real(0)) {
      out[static_cast<size_t>(i)] = real(1) / (real(1) + std::exp(-x));
    } else {
      const real e = std::exp(x);
      out[static_cast<size_t>(i)] = e / (real(1) + e);
    }
  }

  Tensor result = make_output(a.shape, std::move(out), nullptr, "sigmoid");
  auto back = [a, result, out_node = result.node](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g || a.node < 0) return;
    real* d = t.grad_buf(a.node, a.size()).data();
    const real* y = result.ptr();
    for (size_t i = 0; i < g->size(); ++i) d[i] += (*g)[i] * y[i] * (real(1) - y[i]);
  };
  nodes_[static_cast<size_t>(result.node)].back = std::move(back);
  return result;
}

Tensor Tape::square(const Tensor& a) {
  check_attached(a, "square");
  std::vector<real> out(static_cast<size_t>(a.size()));
  for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = a.ptr()[i] * a.ptr()[i];

  auto back = [a, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g || a.node < 0) return;
    real* d = t.grad_buf(a.node, a.size()).data();
    for (size_t i = 0; i < g->size(); ++i) d[i] += real(2) * a.ptr()[i] * (*g)[i];
  };
  return make_output(a.shape, std::move(out), std::move(back), "square");
}

Tensor Tape::sum(const Tensor& a) {
  check_attached(a, "sum");
  real total = 0;
  for (int64_t i = 0; i < a.size(); ++i) total += a.ptr()[i];

  auto back = [a, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g || a.node < 0) return;
    real* d = t.grad_buf(a.node, a.size()).data();
    const real gv = (*g)[0];
    for (int64_t i = 0; i < a.size(); ++i) d[static_cast<size_t>(i)] += gv;
  };
  return make_output({1}, {total}, std::move(back), "sum");
}

// ---------------------------------------------------------------------------
// reductions over an axis
// ---------------------------------------------------------------------------

Tensor Tape::softmax(const Tensor& a, int axis) {
  check_attached(a, "softmax");
  if (axis < 0) axis += a.rank();
  if (axis < 0 || axis >= a.rank())
    throw ConfigError("softmax: axis " + std::to_string(axis) + " out of range for " +
                      shape_str(a.shape));
  if (!a.all_finite()) throw NumericError("softmax: non-finite logits");
  const int kdim = a.dim(axis);
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);

  std::vector<real> out(static_cast<size_t>(a.size()));
  const real* src = a.ptr();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * kdim * inner + in;
      real mx = src[base];
      for (int c = 1; c < kdim; ++c) mx = std::max(mx, src[base + c * inner]);
      real denom = 0;
      for (int c = 0; c < kdim; ++c) {
        const real e = std::exp(src[base + c * inner] - mx);
        out[static_cast<size_t>(base + c * inner)] = e;
        denom += e;
      }
      for (int c = 0; c < kdim; ++c) out[static_cast<size_t>(base + c * inner)] /= denom;
    }
  }

  Tensor result = make_output(a.shape, std::move(out), nullptr, "softmax");
  auto back = [a, result, kdim, inner, outer, out_node = result.node](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g || a.node < 0) return;
    real* d = t.grad_buf(a.node, a.size()).data();
    const real* y = result.ptr();
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * kdim * inner + in;
        real dot = 0;
        for (int c = 0; c < kdim; ++c) dot += (*g)[static_cast<size_t>(base + c * inner)] *
                                              y[base + c * inner];
        for (int c = 0; c < kdim; ++c) {
          const int64_t idx = base + c * inner;
          d[idx] += y[idx] * ((*g)[static_cast<size_t>(idx)] - dot);
        }
      }
    }
  };
  nodes_[static_cast<size_t>(result.node)].back = std::move(back);
  return result;
}

Tensor Tape::l2norm(const Tensor& a) {
  check_attached(a, "l2norm");
  if (a.rank() < 1) throw ConfigError("l2norm: rank-0 input");
  const int d = a.dim(a.rank() - 1);
  const int64_t rows = a.size() / d;
  Shape out_shape(a.shape.begin(), a.shape.end() - 1);
  if (out_shape.empty()) out_shape = {1};

  std::vector<real> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const real* v = a.ptr() + r * d;
    real ss = 0;
    for (int i = 0; i < d; ++i) ss += v[i] * v[i];
    out[static_cast<size_t>(r)] = std::sqrt(ss);
  }

  Tensor result = make_output(std::move(out_shape), std::move(out), nullptr, "l2norm");
  auto back = [a, result, d, rows, out_node = result.node](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g || a.node < 0) return;
    real* grad = t.grad_buf(a.node, a.size()).data();
    for (int64_t r = 0; r < rows; ++r) {
      const real n = result.ptr()[r];
      if (n == real(0)) continue;  // subgradient 0 at the zero vector
      const real gv = (*g)[static_cast<size_t>(r)] / n;
      const real* v = a.ptr() + r * d;
      real* dst = grad + r * d;
      for (int i = 0; i < d; ++i) dst[i] += gv * v[i];
    }
  };
  nodes_[static_cast<size_t>(result.node)].back = std::move(back);
  return result;
}

Tensor Tape::squash(const Tensor& a) {
  check_attached(a, "squash");
  if (a.rank() < 1) throw ConfigError("squash: rank-0 input");
  const int d = a.dim(a.rank() - 1);
  const int64_t rows = a.size() / d;

  std::vector<real> out(static_cast<size_t>(a.size()));
  for (int64_t r = 0; r < rows; ++r) {
    const real* v = a.ptr() + r * d;
    real ss = 0;
    for (int i = 0; i < d; ++i) ss += v[i] * v[i];
    const real n = std::sqrt(ss);
    const real f = n / (real(1) + ss);  // ||s||^2/(1+||s||^2) * 1/||s||
    real* dst = out.data() + r * d;
    for (int i = 0; i < d; ++i) dst[i] = v[i] * f;
  }

  auto back = [a, d, rows, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g || a.node < 0) return;
    real* grad = t.grad_buf(a.node, a.size()).data();
    for (int64_t r = 0; r < rows; ++r) {
      const real* v = a.ptr() + r * d;
      const real* gr = g->data() + r * d;
      real ss = 0, gdot = 0;
      for (int i = 0; i < d; ++i) {
        ss += v[i] * v[i];
        gdot += gr[i] * v[i];
      }
      const real n = std::sqrt(ss);
      real* dst = grad + r * d;
      if (n == real(0)) continue;  // jacobian vanishes in the limit
      const real f = n / (real(1) + ss);
      const real fp = (real(1) - ss) / ((real(1) + ss) * (real(1) + ss));
      const real coef = gdot * fp / n;
      for (int i = 0; i < d; ++i) dst[i] += f * gr[i] + coef * v[i];
    }
  };
  return make_output(a.shape, std::move(out), std::move(back), "squash");
}

Tensor Tape::reshape(const Tensor& a, Shape shape) {
  check_attached(a, "reshape");
  if (numel(shape) != a.size())
    throw ConfigError("reshape: " + shape_str(a.shape) + " to " + shape_str(shape));
  Tensor out = a;  // same buffer, same node: gradient buffers are flat
  out.shape = std::move(shape);
  return out;
}

// ---------------------------------------------------------------------------
// capsule contractions
// ---------------------------------------------------------------------------

Tensor Tape::caps_transform(const Tensor& u, const Tensor& w) {
  check_attached(u, "caps_transform");
  check_attached(w, "caps_transform");
  if (u.rank() != 3 || w.rank() != 4 || u.dim(1) != w.dim(0) || u.dim(2) != w.dim(2))
    throw ConfigError("caps_transform: u " + shape_str(u.shape) + ", w " + shape_str(w.shape));
  const int b = u.dim(0), n = u.dim(1), d = u.dim(2);
  const int m = w.dim(1), e = w.dim(3);
  const int64_t de = static_cast<int64_t>(d) * e;

  std::vector<real> out(static_cast<size_t>(b) * n * m * e, real(0));
  for (int bb = 0; bb < b; ++bb) {
    for (int i = 0; i < n; ++i) {
      const real* uv = u.ptr() + (static_cast<int64_t>(bb) * n + i) * d;
      const real* wrow = w.ptr() + static_cast<int64_t>(i) * m * de;
      real* orow = out.data() + ((static_cast<int64_t>(bb) * n + i) * m) * e;
      for (int j = 0; j < m; ++j) {
        const real* wj = wrow + static_cast<int64_t>(j) * de;
        real* oj = orow + static_cast<int64_t>(j) * e;
        for (int dd = 0; dd < d; ++dd) {
          const real a = uv[dd];
          const real* wd = wj + static_cast<int64_t>(dd) * e;
          for (int k = 0; k < e; ++k) oj[k] += a * wd[k];
        }
      }
    }
  }

  auto back = [u, w, b, n, d, m, e, de, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g) return;
    if (u.node >= 0) {
      real* du = t.grad_buf(u.node, u.size()).data();
      // w transposed per (i,j) block to [e,d] so the inner loop is contiguous
      std::vector<real> wt(static_cast<size_t>(n) * m * de);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
          detail::transpose(d, e, w.ptr() + (static_cast<int64_t>(i) * m + j) * de,
                            wt.data() + (static_cast<int64_t>(i) * m + j) * de);
      for (int bb = 0; bb < b; ++bb) {
        for (int i = 0; i < n; ++i) {
          real* dur = du + (static_cast<int64_t>(bb) * n + i) * d;
          for (int j = 0; j < m; ++j) {
            const real* gj = g->data() + (((static_cast<int64_t>(bb) * n + i) * m) + j) * e;
            const real* wj = wt.data() + (static_cast<int64_t>(i) * m + j) * de;
            for (int k = 0; k < e; ++k) {
              const real gv = gj[k];
              const real* wk = wj + static_cast<int64_t>(k) * d;
              for (int dd = 0; dd < d; ++dd) dur[dd] += gv * wk[dd];
            }
          }
        }
      }
    }
    if (w.node >= 0) {
      real* dw = t.grad_buf(w.node, w.size()).data();
      for (int bb = 0; bb < b; ++bb) {
        for (int i = 0; i < n; ++i) {
          const real* uv = u.ptr() + (static_cast<int64_t>(bb) * n + i) * d;
          for (int j = 0; j < m; ++j) {
            const real* gj = g->data() + (((static_cast<int64_t>(bb) * n + i) * m) + j) * e;
            real* dwj = dw + (static_cast<int64_t>(i) * m + j) * de;
            for (int dd = 0; dd < d; ++dd) {
              const real a = uv[dd];
              real* dwd = dwj + static_cast<int64_t>(dd) * e;
              for (int k = 0; k < e; ++k) dwd[k] += a * gj[k];
            }
          }
        }
      }
    }
  };
  return make_output({b, n, m, e}, std::move(out), std::move(back), "caps_transform");
}

Tensor Tape::coupling_sum(const Tensor& c, const Tensor& u_hat) {
  check_attached(c, "coupling_sum");
  check_attached(u_hat, "coupling_sum");
  if (c.rank() != 3 || u_hat.rank() != 4 || c.dim(0) != u_hat.dim(0) ||
      c.dim(1) != u_hat.dim(1) || c.dim(2) != u_hat.dim(2))
    throw ConfigError("coupling_sum: c " + shape_str(c.shape) + ", u_hat " +
                      shape_str(u_hat.shape));
  const int b = c.dim(0), n = c.dim(1), m = c.dim(2), e = u_hat.dim(3);

  std::vector<real> out(static_cast<size_t>(b) * m * e, real(0));
  for (int bb = 0; bb < b; ++bb) {
    real* ob = out.data() + static_cast<int64_t>(bb) * m * e;
    for (int i = 0; i < n; ++i) {
      const real* crow = c.ptr() + (static_cast<int64_t>(bb) * n + i) * m;
      const real* urow = u_hat.ptr() + ((static_cast<int64_t>(bb) * n + i) * m) * e;
      for (int j = 0; j < m; ++j) {
        const real cv = crow[j];
        const real* uj = urow + static_cast<int64_t>(j) * e;
        real* oj = ob + static_cast<int64_t>(j) * e;
        for (int k = 0; k < e; ++k) oj[k] += cv * uj[k];
      }
    }
  }

  auto back = [c, u_hat, b, n, m, e, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g) return;
    real* dc = c.node >= 0 ? t.grad_buf(c.node, c.size()).data() : nullptr;
    real* du = u_hat.node >= 0 ? t.grad_buf(u_hat.node, u_hat.size()).data() : nullptr;
    for (int bb = 0; bb < b; ++bb) {
      const real* gb = g->data() + static_cast<int64_t>(bb) * m * e;
      for (int i = 0; i < n; ++i) {
        const int64_t rowc = (static_cast<int64_t>(bb) * n + i) * m;
        const real* urow = u_hat.ptr() + rowc * e;
        for (int j = 0; j < m; ++j) {
          const real* uj = urow + static_cast<int64_t>(j) * e;
          const real* gj = gb + static_cast<int64_t>(j) * e;
          if (dc) {
            real dot = 0;
            for (int k = 0; k < e; ++k) dot += uj[k] * gj[k];
            dc[rowc + j] += dot;
          }
          if (du) {
            const real cv = c.ptr()[rowc + j];
            real* duj = du + (rowc + j) * e;
            for (int k = 0; k < e; ++k) duj[k] += cv * gj[k];
          }
        }
      }
    }
  };
  return make_output({b, m, e}, std::move(out), std::move(back), "coupling_sum");
}

Tensor Tape::agreement(const Tensor& u_hat, const Tensor& v) {
  check_attached(u_hat, "agreement");
  check_attached(v, "agreement");
  if (u_hat.rank() != 4 || v.rank() != 3 || u_hat.dim(0) != v.dim(0) ||
      u_hat.dim(2) != v.dim(1) || u_hat.dim(3) != v.dim(2))
    throw ConfigError("agreement: u_hat " + shape_str(u_hat.shape) + ", v " + shape_str(v.shape));
  const int b = u_hat.dim(0), n = u_hat.dim(1), m = u_hat.dim(2), e = u_hat.dim(3);

  std::vector<real> out(static_cast<size_t>(b) * n * m);
  for (int bb = 0; bb < b; ++bb) {
    const real* vb = v.ptr() + static_cast<int64_t>(bb) * m * e;
    for (int i = 0; i < n; ++i) {
      const real* urow = u_hat.ptr() + ((static_cast<int64_t>(bb) * n + i) * m) * e;
      real* orow = out.data() + (static_cast<int64_t>(bb) * n + i) * m;
      for (int j = 0; j < m; ++j) {
        const real* uj = urow + static_cast<int64_t>(j) * e;
        const real* vj = vb + static_cast<int64_t>(j) * e;
        real dot = 0;
        for (int k = 0; k < e; ++k) dot += uj[k] * vj[k];
        orow[j] = dot;
      }
    }
  }

  auto back = [u_hat, v, b, n, m, e, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g) return;
    real* du = u_hat.node >= 0 ? t.grad_buf(u_hat.node, u_hat.size()).data() : nullptr;
    real* dv = v.node >= 0 ? t.grad_buf(v.node, v.size()).data() : nullptr;
    for (int bb = 0; bb < b; ++bb) {
      const real* vb = v.ptr() + static_cast<int64_t>(bb) * m * e;
      real* dvb = dv ? dv + static_cast<int64_t>(bb) * m * e : nullptr;
      for (int i = 0; i < n; ++i) {
        const int64_t row = (static_cast<int64_t>(bb) * n + i) * m;
        const real* urow = u_hat.ptr() + row * e;
        for (int j = 0; j < m; ++j) {
          const real gv = (*g)[static_cast<size_t>(row + j)];
          const real* uj = urow + static_cast<int64_t>(j) * e;
          if (du) {
            const real* vj = vb + static_cast<int64_t>(j) * e;
            real* duj = du + (row + j) * e;
            for (int k = 0; k < e; ++k) duj[k] += gv * vj[k];
          }
          if (dvb) {
            real* dvj = dvb + static_cast<int64_t>(j) * e;
            for (int k = 0; k < e; ++k) dvj[k] += gv * uj[k];
          }
        }
      }
    }
  };
  return make_output({b, n, m}, std::move(out), std::move(back), "agreement");
}

Tensor Tape::mask_capsules(const Tensor& caps, const std::vector<int>& keep) {
  check_attached(caps, "mask_capsules");
  if (caps.rank() != 3) throw ConfigError("mask_capsules: caps " + shape_str(caps.shape));
  const int b = caps.dim(0), m = caps.dim(1), e = caps.dim(2);
  if (static_cast<int>(keep.size()) != b)
    throw UsageError("mask_capsules: " + std::to_string(keep.size()) + " indices for batch of " +
                     std::to_string(b));
  for (int idx : keep)
    if (idx < 0 || idx >= m)
      throw UsageError("mask_capsules: index " + std::to_string(idx) + " out of range [0," +
                       std::to_string(m) + ")");

  std::vector<real> out(static_cast<size_t>(caps.size()), real(0));
  for (int bb = 0; bb < b; ++bb) {
    const int64_t off = (static_cast<int64_t>(bb) * m + keep[static_cast<size_t>(bb)]) * e;
    std::memcpy(out.data() + off, caps.ptr() + off, sizeof(real) * static_cast<size_t>(e));
  }

  auto back = [caps, keep, m, e, b, out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g || caps.node < 0) return;
    real* d = t.grad_buf(caps.node, caps.size()).data();
    for (int bb = 0; bb < b; ++bb) {
      const int64_t off = (static_cast<int64_t>(bb) * m + keep[static_cast<size_t>(bb)]) * e;
      for (int k = 0; k < e; ++k) d[off + k] += (*g)[static_cast<size_t>(off + k)];
    }
  };
  return make_output(caps.shape, std::move(out), std::move(back), "mask_capsules");
}

Tensor Tape::group_capsules(const Tensor& x, int caps_dim) {
  check_attached(x, "group_capsules");
  if (x.rank() != 4 || caps_dim < 1 || x.dim(1) % caps_dim != 0)
    throw ConfigError("group_capsules: maps " + shape_str(x.shape) + " not divisible into " +
                      std::to_string(caps_dim) + "-dim capsules");
  const int b = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int groups = ch / caps_dim;
  const int64_t hw = static_cast<int64_t>(h) * w;
  const int64_t n_caps = groups * hw;

  std::vector<real> out(static_cast<size_t>(x.size()));
  for (int bb = 0; bb < b; ++bb) {
    const real* xb = x.ptr() + static_cast<int64_t>(bb) * ch * hw;
    real* ob = out.data() + static_cast<int64_t>(bb) * n_caps * caps_dim;
    for (int g = 0; g < groups; ++g)
      for (int dd = 0; dd < caps_dim; ++dd) {
        const real* plane = xb + (static_cast<int64_t>(g) * caps_dim + dd) * hw;
        for (int64_t p = 0; p < hw; ++p) ob[(g * hw + p) * caps_dim + dd] = plane[p];
      }
  }

  auto back = [x, b, ch, hw, groups, caps_dim, n_caps,
               out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g || x.node < 0) return;
    real* dx = t.grad_buf(x.node, x.size()).data();
    for (int bb = 0; bb < b; ++bb) {
      const real* gb = g->data() + static_cast<int64_t>(bb) * n_caps * caps_dim;
      real* db = dx + static_cast<int64_t>(bb) * ch * hw;
      for (int gg = 0; gg < groups; ++gg)
        for (int dd = 0; dd < caps_dim; ++dd) {
          real* plane = db + (static_cast<int64_t>(gg) * caps_dim + dd) * hw;
          for (int64_t p = 0; p < hw; ++p) plane[p] += gb[(gg * hw + p) * caps_dim + dd];
        }
    }
  };
  return make_output({b, static_cast<int>(n_caps), caps_dim}, std::move(out), std::move(back),
                     "group_capsules");
}

Tensor Tape::custom_unary(const Tensor& a, std::function<real(real)> f,
                          std::function<real(real)> df) {
  check_attached(a, "custom_unary");
  std::vector<real> out(static_cast<size_t>(a.size()));
  for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = f(a.ptr()[i]);

  auto back = [a, df = std::move(df), out_node = static_cast<int>(nodes_.size())](Tape& t) {
    const std::vector<real>* g = t.grad_ptr(out_node);
    if (!g || a.node < 0) return;
    real* d = t.grad_buf(a.node, a.size()).data();
    for (size_t i = 0; i < g->size(); ++i) d[i] += (*g)[i] * df(a.ptr()[static_cast<int64_t>(i)]);
  };
  return make_output(a.shape, std::move(out), std::move(back), "custom_unary");
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void Tape::backward(const Tensor& loss) {
  if (loss.node < 0) throw UsageError("backward: loss is not attached to a tape");
  check_attached(loss, "backward");
  if (loss.size() != 1) throw UsageError("backward: loss must be scalar, got " +
                                         shape_str(loss.shape));
  grads_.clear();
  grads_.resize(nodes_.size());
  grad_buf(loss.node, 1)[0] = real(1);
  for (int n = static_cast<int>(nodes_.size()) - 1; n >= 0; --n) {
    if (grads_[static_cast<size_t>(n)].empty()) continue;
    if (nodes_[static_cast<size_t>(n)].back) nodes_[static_cast<size_t>(n)].back(*this);
  }
}

std::vector<real> Tape::grad(const Tensor& t) const {
  if (t.node < 0) throw UsageError("grad: tensor is not attached to a tape");
  check_attached(t, "grad");
  const std::vector<real>* g = grad_ptr(t.node);
  if (!g) return std::vector<real>(static_cast<size_t>(t.size()), real(0));
  return *g;
}

// ---------------------------------------------------------------------------
// composed ops
// ---------------------------------------------------------------------------

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return tape.add(a, tape.scale(b, real(-1)));
}

Tensor mse(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw UsageError("mse: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor d = sub(tape, a, b);
  return tape.scale(tape.sum(tape.square(d)), real(1) / static_cast<real>(a.size()));
}

}  // namespace capsnet
