#include "gconv/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

#include "mm.hpp"

namespace gconv {

namespace {

Tape* tape_of(std::initializer_list<const Tensor*> ts) {
  Tape* t = nullptr;
  for (const Tensor* x : ts) {
    if (x->tape == nullptr) continue;
    if (t == nullptr)
      t = x->tape;
    else if (t != x->tape)
      throw ValueError("operands recorded on different tapes");
  }
  return t;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape) + " and " +
                     shape_str(b.shape) + " differ");
}

void require_rank(const char* op, const Tensor& t, size_t rank) {
  if (t.shape.size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape));
}

Tensor finish(Tape* t, const char* op, Tensor&& out, BackwardFn fn) {
  if (t) t->record(op, out, std::move(fn));
  return std::move(out);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

size_t numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= size_t(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> s, double fill) : shape(std::move(s)) {
  data = std::make_shared<std::vector<double>>(numel(shape), fill);
}

Tensor::Tensor(std::vector<int> s, std::vector<double> values) : shape(std::move(s)) {
  if (numel(shape) != values.size())
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  data = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor detach(const Tensor& t) {
  Tensor out = t;
  out.tape = nullptr;
  out.node = -1;
  return out;
}

// --- tape --------------------------------------------------------------------

namespace {
std::atomic<uint64_t> g_tape_ids{1};

void scan_finite(const std::string& op, const Tensor& t, size_t node) {
  const double* p = t.ptr();
  for (size_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(p[i]))
      throw ValueError("non-finite value produced by '" + op + "' (node " + std::to_string(node) +
                       ")");
}
}  // namespace

Tape::Tape() : id_(g_tape_ids.fetch_add(1)) {}

Tensor Tape::watch(const Tensor& value, const std::string& name) {
  Tensor out = value;
  out.tape = this;
  out.node = int(ops_.size());
  if (check_finite) scan_finite(name, out, ops_.size());
  ops_.push_back(name);
  values_.push_back(out);
  backs_.push_back(nullptr);
  return out;
}

int Tape::record(const std::string& op, Tensor& out, BackwardFn fn) {
  out.tape = this;
  out.node = int(ops_.size());
  if (check_finite) scan_finite(op, out, ops_.size());
  ops_.push_back(op);
  values_.push_back(out);
  backs_.push_back(std::move(fn));
  return out.node;
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape != this || loss.node < 0)
    throw ValueError("backward: loss is not recorded on this tape");
  if (loss.size() != 1)
    throw ValueError("backward: loss must be a scalar, got shape " + shape_str(loss.shape));
  grads_.assign(ops_.size(), {});
  grads_[loss.node].assign(1, 1.0);
  for (int i = loss.node; i >= 0; --i) {
    if (grads_[size_t(i)].empty()) continue;  // not reachable from the loss
    if (backs_[size_t(i)]) backs_[size_t(i)](*this, grads_[size_t(i)].data());
  }
}

const std::vector<double>* Tape::gradient(const Tensor& t) const {
  if (t.tape != this || t.node < 0 || size_t(t.node) >= grads_.size()) return nullptr;
  const auto& g = grads_[size_t(t.node)];
  return g.empty() ? nullptr : &g;
}

double* Tape::grad_buffer(int node) {
  auto& g = grads_[size_t(node)];
  if (g.empty()) g.assign(values_[size_t(node)].size(), 0.0);
  return g.data();
}

// --- params -------------------------------------------------------------------

Tensor Param::on(Tape* tape) const {
  if (tape == nullptr) return detach(value);
  if (seen_tape_ != tape->id()) {
    handle_ = tape->watch(value, name.empty() ? "param" : name);
    seen_tape_ = tape->id();
  }
  return handle_;
}

void Param::collect(const Tape& tape) {
  grad.assign(value.size(), 0.0);
  if (seen_tape_ == tape.id())
    if (const auto* g = tape.gradient(handle_)) grad = *g;
}

void Param::zero_grad() { grad.assign(value.size(), 0.0); }

// --- matmul -------------------------------------------------------------------

Tensor matmul(const Tensor& A, const Tensor& B) {
  if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(A.shape) + " and " +
                     shape_str(B.shape));
  const int r = A.shape[0], c = A.shape[1], k = B.shape[1];
  Tensor out({r, k});
  detail::mm_nn(A.ptr(), B.ptr(), out.ptr(), r, c, k);
  Tape* t = tape_of({&A, &B});
  return finish(t, "matmul", std::move(out), [A, B, r, c, k](Tape& tp, const double* go) {
    if (A.node >= 0) {
      std::vector<double> BT(size_t(c) * k);
      detail::transpose(B.ptr(), BT.data(), c, k);
      detail::mm_nn(go, BT.data(), tp.grad_buffer(A.node), r, k, c, true);
    }
    if (B.node >= 0) {
      std::vector<double> AT(size_t(r) * c);
      detail::transpose(A.ptr(), AT.data(), r, c);
      detail::mm_nn(AT.data(), go, tp.grad_buffer(B.node), c, r, k, true);
    }
  });
}

// --- conv2d -------------------------------------------------------------------

namespace {

struct ConvDims {
  int b, h, w, m, kh, kw, n, stride;
  int ph0, pw0;  // top/left zero padding
  int ho, wo;
  int o;  // kh*kw*m
};

ConvDims conv_dims(const Tensor& X, const Tensor& K, int stride, Padding padding) {
  require_rank("conv2d input", X, 4);
  require_rank("conv2d kernel", K, 4);
  if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
  ConvDims d{};
  d.b = X.shape[0];
  d.h = X.shape[1];
  d.w = X.shape[2];
  d.m = X.shape[3];
  d.kh = K.shape[0];
  d.kw = K.shape[1];
  d.n = K.shape[3];
  d.stride = stride;
  if (K.shape[2] != d.m)
    throw ShapeError("conv2d: input has " + std::to_string(d.m) + " channels but kernel expects " +
                     std::to_string(K.shape[2]) + " (shapes " + shape_str(X.shape) + ", " +
                     shape_str(K.shape) + ")");
  if (padding == Padding::same) {
    d.ho = (d.h + stride - 1) / stride;
    d.wo = (d.w + stride - 1) / stride;
    const int pht = std::max(0, (d.ho - 1) * stride + d.kh - d.h);
    const int pwt = std::max(0, (d.wo - 1) * stride + d.kw - d.w);
    d.ph0 = pht / 2;  // deficit splits floor on top/left, ceil on bottom/right
    d.pw0 = pwt / 2;
  } else {
    if (d.kh > d.h || d.kw > d.w)
      throw ShapeError("conv2d: kernel " + shape_str(K.shape) + " larger than input " +
                       shape_str(X.shape) + " under valid padding");
    d.ho = (d.h - d.kh) / stride + 1;
    d.wo = (d.w - d.kw) / stride + 1;
    d.ph0 = d.pw0 = 0;
  }
  d.o = d.kh * d.kw * d.m;
  return d;
}

// Gathers input patches for output rows [row0, row1) of one batch element.
// cols is (row1-row0)*wo by o, with the o index ordered (ky, kx, channel) to
// match the kernel tensor flattened row-major.
void im2col_rows(const double* x, const ConvDims& d, int row0, int row1, double* cols) {
  const size_t xrow = size_t(d.w) * d.m;
  for (int y = row0; y < row1; ++y) {
    for (int xo = 0; xo < d.wo; ++xo) {
      double* dst = cols + (size_t(y - row0) * d.wo + xo) * d.o;
      for (int ky = 0; ky < d.kh; ++ky) {
        const int iy = y * d.stride - d.ph0 + ky;
        for (int kx = 0; kx < d.kw; ++kx) {
          const int ix = xo * d.stride - d.pw0 + kx;
          double* cell = dst + (size_t(ky) * d.kw + kx) * d.m;
          if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) {
            std::memset(cell, 0, sizeof(double) * size_t(d.m));
          } else {
            std::memcpy(cell, x + size_t(iy) * xrow + size_t(ix) * d.m,
                        sizeof(double) * size_t(d.m));
          }
        }
      }
    }
  }
}

// Scatter-add of patch gradients back onto the input gradient (inverse of im2col_rows).
void col2im_rows_add(const double* cols, const ConvDims& d, int row0, int row1, double* gx) {
  const size_t xrow = size_t(d.w) * d.m;
  for (int y = row0; y < row1; ++y) {
    for (int xo = 0; xo < d.wo; ++xo) {
      const double* src = cols + (size_t(y - row0) * d.wo + xo) * d.o;
      for (int ky = 0; ky < d.kh; ++ky) {
        const int iy = y * d.stride - d.ph0 + ky;
        if (iy < 0 || iy >= d.h) continue;
        for (int kx = 0; kx < d.kw; ++kx) {
          const int ix = xo * d.stride - d.pw0 + kx;
          if (ix < 0 || ix >= d.w) continue;
          const double* cell = src + (size_t(ky) * d.kw + kx) * d.m;
          double* dst = gx + size_t(iy) * xrow + size_t(ix) * d.m;
          for (int c = 0; c < d.m; ++c) dst[c] += cell[c];
        }
      }
    }
  }
}

int conv_chunk_rows(const ConvDims& d) {
  const size_t cap = size_t(1) << 22;  // ~32MB of col buffer
  const size_t per_row = size_t(d.wo) * d.o;
  size_t rows = per_row ? cap / per_row : size_t(d.ho);
  if (rows < 1) rows = 1;
  if (rows > size_t(d.ho)) rows = size_t(d.ho);
  return int(rows);
}

}  // namespace

Tensor conv2d(const Tensor& X, const Tensor& K, int stride, Padding padding) {
  const ConvDims d = conv_dims(X, K, stride, padding);
  Tensor out({d.b, d.ho, d.wo, d.n});
  const bool pointwise = d.kh == 1 && d.kw == 1 && d.stride == 1;
  if (pointwise) {
    detail::mm_nn(X.ptr(), K.ptr(), out.ptr(), d.b * d.h * d.w, d.m, d.n);
  } else {
    const int chunk = conv_chunk_rows(d);
    std::vector<double> cols(size_t(chunk) * d.wo * d.o);
    for (int bi = 0; bi < d.b; ++bi) {
      const double* x = X.ptr() + size_t(bi) * d.h * d.w * d.m;
      for (int row0 = 0; row0 < d.ho; row0 += chunk) {
        const int row1 = std::min(d.ho, row0 + chunk);
        im2col_rows(x, d, row0, row1, cols.data());
        double* y = out.ptr() + (size_t(bi) * d.ho + row0) * d.wo * d.n;
        detail::mm_nn(cols.data(), K.ptr(), y, (row1 - row0) * d.wo, d.o, d.n);
      }
    }
  }
  Tape* t = tape_of({&X, &K});
  return finish(t, "conv2d", std::move(out), [X, K, d, pointwise](Tape& tp, const double* go) {
    if (pointwise) {
      const int rows = d.b * d.h * d.w;
      if (X.node >= 0) {
        std::vector<double> KT(size_t(d.m) * d.n);
        detail::transpose(K.ptr(), KT.data(), d.m, d.n);
        detail::mm_nn(go, KT.data(), tp.grad_buffer(X.node), rows, d.n, d.m, true);
      }
      if (K.node >= 0) {
        std::vector<double> XT(size_t(rows) * d.m);
        detail::transpose(X.ptr(), XT.data(), rows, d.m);
        detail::mm_nn(XT.data(), go, tp.grad_buffer(K.node), d.m, rows, d.n, true);
      }
      return;
    }
    const int chunk = conv_chunk_rows(d);
    std::vector<double> cols(size_t(chunk) * d.wo * d.o);
    std::vector<double> scratch(size_t(chunk) * d.wo * d.o);
    std::vector<double> KT;
    if (X.node >= 0) {
      KT.resize(size_t(d.n) * d.o);
      detail::transpose(K.ptr(), KT.data(), d.o, d.n);
    }
    double* gx = X.node >= 0 ? tp.grad_buffer(X.node) : nullptr;
    double* gk = K.node >= 0 ? tp.grad_buffer(K.node) : nullptr;
    for (int bi = 0; bi < d.b; ++bi) {
      const double* x = X.ptr() + size_t(bi) * d.h * d.w * d.m;
      for (int row0 = 0; row0 < d.ho; row0 += chunk) {
        const int row1 = std::min(d.ho, row0 + chunk);
        const int rows = (row1 - row0) * d.wo;
        const double* g = go + (size_t(bi) * d.ho + row0) * d.wo * d.n;
        if (gk) {
          im2col_rows(x, d, row0, row1, cols.data());
          detail::transpose(cols.data(), scratch.data(), rows, d.o);
          detail::mm_nn(scratch.data(), g, gk, d.o, rows, d.n, true);
        }
        if (gx) {
          detail::mm_nn(g, KT.data(), cols.data(), rows, d.n, d.o);
          col2im_rows_add(cols.data(), d, row0, row1, gx + size_t(bi) * d.h * d.w * d.m);
        }
      }
    }
  });
}

// --- pooling family -------------------------------------------------------------

Tensor gap(const Tensor& X) {
  require_rank("gap", X, 4);
  const int b = X.shape[0], h = X.shape[1], w = X.shape[2], m = X.shape[3];
  if (h < 1 || w < 1) throw ShapeError("gap: spatial dims must be >= 1, got " + shape_str(X.shape));
  Tensor out({b, m});
  const double inv = 1.0 / (double(h) * w);
  for (int bi = 0; bi < b; ++bi) {
    double* dst = out.ptr() + size_t(bi) * m;
    const double* src = X.ptr() + size_t(bi) * h * w * m;
    for (int s = 0; s < h * w; ++s)
      for (int c = 0; c < m; ++c) dst[c] += src[size_t(s) * m + c];
    for (int c = 0; c < m; ++c) dst[c] *= inv;
  }
  Tape* t = tape_of({&X});
  return finish(t, "gap", std::move(out), [X, b, h, w, m, inv](Tape& tp, const double* go) {
    if (X.node < 0) return;
    double* gx = tp.grad_buffer(X.node);
    for (int bi = 0; bi < b; ++bi) {
      const double* g = go + size_t(bi) * m;
      double* dst = gx + size_t(bi) * h * w * m;
      for (int s = 0; s < h * w; ++s)
        for (int c = 0; c < m; ++c) dst[size_t(s) * m + c] += g[c] * inv;
    }
  });
}

Tensor sum_spatial(const Tensor& X) {
  require_rank("sum_spatial", X, 4);
  const int b = X.shape[0], h = X.shape[1], w = X.shape[2], m = X.shape[3];
  Tensor out({b, m});
  for (int bi = 0; bi < b; ++bi) {
    double* dst = out.ptr() + size_t(bi) * m;
    const double* src = X.ptr() + size_t(bi) * h * w * m;
    for (int s = 0; s < h * w; ++s)
      for (int c = 0; c < m; ++c) dst[c] += src[size_t(s) * m + c];
  }
  Tape* t = tape_of({&X});
  return finish(t, "sum_spatial", std::move(out), [X, b, h, w, m](Tape& tp, const double* go) {
    if (X.node < 0) return;
    double* gx = tp.grad_buffer(X.node);
    for (int bi = 0; bi < b; ++bi) {
      const double* g = go + size_t(bi) * m;
      double* dst = gx + size_t(bi) * h * w * m;
      for (int s = 0; s < h * w; ++s)
        for (int c = 0; c < m; ++c) dst[size_t(s) * m + c] += g[c];
    }
  });
}

Tensor upsample_nearest(const Tensor& X, int factor) {
  require_rank("upsample_nearest", X, 4);
  if (factor < 1) throw ValueError("upsample_nearest: factor must be >= 1");
  const int b = X.shape[0], h = X.shape[1], w = X.shape[2], m = X.shape[3], f = factor;
  Tensor out({b, h * f, w * f, m});
  for (int bi = 0; bi < b; ++bi)
    for (int y = 0; y < h * f; ++y)
      for (int x = 0; x < w * f; ++x)
        std::memcpy(out.ptr() + ((size_t(bi) * h * f + y) * (size_t(w) * f) + x) * m,
                    X.ptr() + ((size_t(bi) * h + y / f) * w + x / f) * m,
                    sizeof(double) * size_t(m));
  Tape* t = tape_of({&X});
  return finish(t, "upsample_nearest", std::move(out), [X, b, h, w, m, f](Tape& tp, const double* go) {
    if (X.node < 0) return;
    double* gx = tp.grad_buffer(X.node);
    for (int bi = 0; bi < b; ++bi)
      for (int y = 0; y < h * f; ++y)
        for (int x = 0; x < w * f; ++x) {
          const double* g = go + ((size_t(bi) * h * f + y) * (size_t(w) * f) + x) * m;
          double* dst = gx + ((size_t(bi) * h + y / f) * w + x / f) * m;
          for (int c = 0; c < m; ++c) dst[c] += g[c];
        }
  });
}

Tensor avgpool2(const Tensor& X) {
  require_rank("avgpool2", X, 4);
  const int b = X.shape[0], h = X.shape[1], w = X.shape[2], m = X.shape[3];
  if (h % 2 || w % 2)
    throw ShapeError("avgpool2: spatial dims must be even, got " + shape_str(X.shape));
  Tensor out({b, h / 2, w / 2, m});
  for (int bi = 0; bi < b; ++bi)
    for (int y = 0; y < h / 2; ++y)
      for (int x = 0; x < w / 2; ++x) {
        double* dst = out.ptr() + ((size_t(bi) * (h / 2) + y) * (w / 2) + x) * m;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const double* src = X.ptr() + ((size_t(bi) * h + 2 * y + dy) * w + 2 * x + dx) * m;
            for (int c = 0; c < m; ++c) dst[c] += src[c];
          }
        for (int c = 0; c < m; ++c) dst[c] *= 0.25;
      }
  Tape* t = tape_of({&X});
  return finish(t, "avgpool2", std::move(out), [X, b, h, w, m](Tape& tp, const double* go) {
    if (X.node < 0) return;
    double* gx = tp.grad_buffer(X.node);
    for (int bi = 0; bi < b; ++bi)
      for (int y = 0; y < h / 2; ++y)
        for (int x = 0; x < w / 2; ++x) {
          const double* g = go + ((size_t(bi) * (h / 2) + y) * (w / 2) + x) * m;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              double* dst = gx + ((size_t(bi) * h + 2 * y + dy) * w + 2 * x + dx) * m;
              for (int c = 0; c < m; ++c) dst[c] += 0.25 * g[c];
            }
        }
  });
}

// --- activations -----------------------------------------------------------------

namespace {

Tensor glu(const Tensor& X) {
  if (X.shape.empty()) throw ShapeError("glu: scalar input");
  const int last = X.shape.back();
  if (last % 2)
    throw ShapeError("glu: channel dimension must be even, got " + shape_str(X.shape));
  const int half = last / 2;
  std::vector<int> oshape = X.shape;
  oshape.back() = half;
  const size_t rows = X.size() / size_t(last);
  Tensor out(oshape);
  auto sig = std::make_shared<std::vector<double>>(rows * size_t(half));
  for (size_t r = 0; r < rows; ++r) {
    const double* a = X.ptr() + r * last;
    const double* bpart = a + half;
    double* dst = out.ptr() + r * half;
    double* sg = sig->data() + r * half;
    for (int c = 0; c < half; ++c) {
      sg[c] = stable_sigmoid(bpart[c]);
      dst[c] = a[c] * sg[c];
    }
  }
  Tape* t = tape_of({&X});
  return finish(t, "glu", std::move(out), [X, sig, rows, half, last](Tape& tp, const double* go) {
    if (X.node < 0) return;
    double* gx = tp.grad_buffer(X.node);
    for (size_t r = 0; r < rows; ++r) {
      const double* a = X.ptr() + r * last;
      const double* g = go + r * half;
      const double* sg = sig->data() + r * half;
      double* ga = gx + r * last;
      for (int c = 0; c < half; ++c) {
        ga[c] += g[c] * sg[c];
        ga[half + c] += g[c] * a[c] * sg[c] * (1.0 - sg[c]);
      }
    }
  });
}

}  // namespace

Tensor activation(const Tensor& X, Act kind) {
  if (kind == Act::glu) return glu(X);
  Tensor out(X.shape);
  const size_t n = X.size();
  const double* x = X.ptr();
  double* y = out.ptr();
  const char* name = "";
  switch (kind) {
    case Act::relu:
      name = "relu";
      for (size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    case Act::sigmoid:
      name = "sigmoid";
      for (size_t i = 0; i < n; ++i) y[i] = stable_sigmoid(x[i]);
      break;
    case Act::tanh:
      name = "tanh";
      for (size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
      break;
    case Act::elu:
      name = "elu";
      for (size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : std::expm1(x[i]);
      break;
    case Act::glu:
      break;
  }
  Tape* t = tape_of({&X});
  return finish(t, name, std::move(out), [X, kind, out, n](Tape& tp, const double* go) {
    if (X.node < 0) return;
    double* gx = tp.grad_buffer(X.node);
    const double* x = X.ptr();
    const double* y = out.ptr();
    switch (kind) {
      case Act::relu:
        for (size_t i = 0; i < n; ++i)
          if (x[i] > 0.0) gx[i] += go[i];
        break;
      case Act::sigmoid:
        for (size_t i = 0; i < n; ++i) gx[i] += go[i] * y[i] * (1.0 - y[i]);
        break;
      case Act::tanh:
        for (size_t i = 0; i < n; ++i) gx[i] += go[i] * (1.0 - y[i] * y[i]);
        break;
      case Act::elu:
        for (size_t i = 0; i < n; ++i) gx[i] += x[i] > 0.0 ? go[i] : go[i] * (y[i] + 1.0);
        break;
      case Act::glu:
        break;
    }
  });
}

Tensor relu(const Tensor& X) { return activation(X, Act::relu); }
Tensor sigmoid(const Tensor& X) { return activation(X, Act::sigmoid); }
Tensor tanh_of(const Tensor& X) { return activation(X, Act::tanh); }

Tensor softplus(const Tensor& X) {
  Tensor out(X.shape);
  const size_t n = X.size();
  for (size_t i = 0; i < n; ++i) {
    const double x = X[i];
    out[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
  Tape* t = tape_of({&X});
  return finish(t, "softplus", std::move(out), [X, n](Tape& tp, const double* go) {
    if (X.node < 0) return;
    double* gx = tp.grad_buffer(X.node);
    for (size_t i = 0; i < n; ++i) gx[i] += go[i] * stable_sigmoid(X[i]);
  });
}

// --- concatenation and slicing ----------------------------------------------------

Tensor concat(const Tensor& A, const Tensor& B) {
  require_rank("concat", A, 2);
  require_rank("concat", B, 2);
  if (A.shape[0] != B.shape[0])
    throw ShapeError("concat: batch sizes differ, " + shape_str(A.shape) + " vs " +
                     shape_str(B.shape));
  const int b = A.shape[0], p = A.shape[1], q = B.shape[1];
  Tensor out({b, p + q});
  for (int i = 0; i < b; ++i) {
    std::memcpy(out.ptr() + size_t(i) * (p + q), A.ptr() + size_t(i) * p, sizeof(double) * p);
    std::memcpy(out.ptr() + size_t(i) * (p + q) + p, B.ptr() + size_t(i) * q, sizeof(double) * q);
  }
  Tape* t = tape_of({&A, &B});
  return finish(t, "concat", std::move(out), [A, B, b, p, q](Tape& tp, const double* go) {
    if (A.node >= 0) {
      double* ga = tp.grad_buffer(A.node);
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < p; ++j) ga[size_t(i) * p + j] += go[size_t(i) * (p + q) + j];
    }
    if (B.node >= 0) {
      double* gb = tp.grad_buffer(B.node);
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < q; ++j) gb[size_t(i) * q + j] += go[size_t(i) * (p + q) + p + j];
    }
  });
}

Tensor slice_batch(const Tensor& X, int i) {
  if (X.shape.empty()) throw ShapeError("slice_batch: scalar input");
  const int b = X.shape[0];
  if (i < 0 || i >= b)
    throw ValueError("slice_batch: index " + std::to_string(i) + " out of range for " +
                     shape_str(X.shape));
  std::vector<int> oshape = X.shape;
  oshape[0] = 1;
  const size_t inner = X.size() / size_t(b);
  Tensor out(oshape);
  std::memcpy(out.ptr(), X.ptr() + size_t(i) * inner, sizeof(double) * inner);
  Tape* t = tape_of({&X});
  return finish(t, "slice_batch", std::move(out), [X, i, inner](Tape& tp, const double* go) {
    if (X.node < 0) return;
    double* gx = tp.grad_buffer(X.node);
    for (size_t j = 0; j < inner; ++j) gx[size_t(i) * inner + j] += go[j];
  });
}

Tensor slice_row(const Tensor& A, int i) {
  require_rank("slice_row", A, 2);
  return slice_batch(A, i);
}

Tensor concat_batch(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ValueError("concat_batch: no parts");
  std::vector<int> rest(parts[0].shape.begin() + 1, parts[0].shape.end());
  int b = 0;
  Tape* t = nullptr;
  for (const Tensor& p : parts) {
    if (p.shape.empty() ||
        std::vector<int>(p.shape.begin() + 1, p.shape.end()) != rest)
      throw ShapeError("concat_batch: mismatched part shape " + shape_str(p.shape));
    b += p.shape[0];
    if (p.tape) {
      if (t && t != p.tape) throw ValueError("operands recorded on different tapes");
      t = p.tape;
    }
  }
  std::vector<int> oshape = {b};
  oshape.insert(oshape.end(), rest.begin(), rest.end());
  Tensor out(oshape);
  size_t off = 0;
  for (const Tensor& p : parts) {
    std::memcpy(out.ptr() + off, p.ptr(), sizeof(double) * p.size());
    off += p.size();
  }
  return finish(t, "concat_batch", std::move(out), [parts](Tape& tp, const double* go) {
    size_t off = 0;
    for (const Tensor& p : parts) {
      if (p.node >= 0) {
        double* gp = tp.grad_buffer(p.node);
        for (size_t j = 0; j < p.size(); ++j) gp[j] += go[off + j];
      }
      off += p.size();
    }
  });
}

// --- elementwise -------------------------------------------------------------------

Tensor add(const Tensor& A, const Tensor& B) {
  require_same_shape("add", A, B);
  Tensor out(A.shape);
  const size_t n = A.size();
  for (size_t i = 0; i < n; ++i) out[i] = A[i] + B[i];
  Tape* t = tape_of({&A, &B});
  return finish(t, "add", std::move(out), [A, B, n](Tape& tp, const double* go) {
    if (A.node >= 0) detail::axpy(tp.grad_buffer(A.node), go, 1.0, n);
    if (B.node >= 0) detail::axpy(tp.grad_buffer(B.node), go, 1.0, n);
  });
}

Tensor sub(const Tensor& A, const Tensor& B) {
  require_same_shape("sub", A, B);
  Tensor out(A.shape);
  const size_t n = A.size();
  for (size_t i = 0; i < n; ++i) out[i] = A[i] - B[i];
  Tape* t = tape_of({&A, &B});
  return finish(t, "sub", std::move(out), [A, B, n](Tape& tp, const double* go) {
    if (A.node >= 0) detail::axpy(tp.grad_buffer(A.node), go, 1.0, n);
    if (B.node >= 0) detail::axpy(tp.grad_buffer(B.node), go, -1.0, n);
  });
}

Tensor mul(const Tensor& A, const Tensor& B) {
  require_same_shape("mul", A, B);
  Tensor out(A.shape);
  const size_t n = A.size();
  for (size_t i = 0; i < n; ++i) out[i] = A[i] * B[i];
  Tape* t = tape_of({&A, &B});
  return finish(t, "mul", std::move(out), [A, B, n](Tape& tp, const double* go) {
    if (A.node >= 0) {
      double* ga = tp.grad_buffer(A.node);
      for (size_t i = 0; i < n; ++i) ga[i] += go[i] * B[i];
    }
    if (B.node >= 0) {
      double* gb = tp.grad_buffer(B.node);
      for (size_t i = 0; i < n; ++i) gb[i] += go[i] * A[i];
    }
  });
}

Tensor scale(const Tensor& A, double s) {
  Tensor out(A.shape);
  const size_t n = A.size();
  for (size_t i = 0; i < n; ++i) out[i] = A[i] * s;
  Tape* t = tape_of({&A});
  return finish(t, "scale", std::move(out), [A, s, n](Tape& tp, const double* go) {
    if (A.node >= 0) detail::axpy(tp.grad_buffer(A.node), go, s, n);
  });
}

Tensor add_scalar(const Tensor& A, double s) {
  Tensor out(A.shape);
  const size_t n = A.size();
  for (size_t i = 0; i < n; ++i) out[i] = A[i] + s;
  Tape* t = tape_of({&A});
  return finish(t, "add_scalar", std::move(out), [A, n](Tape& tp, const double* go) {
    if (A.node >= 0) detail::axpy(tp.grad_buffer(A.node), go, 1.0, n);
  });
}

Tensor neg(const Tensor& A) { return scale(A, -1.0); }

Tensor mean_all(const Tensor& A) {
  const size_t n = A.size();
  if (n == 0) throw ValueError("mean_all: empty tensor");
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += A[i];
  Tensor out({1}, std::vector<double>{s / double(n)});
  Tape* t = tape_of({&A});
  return finish(t, "mean_all", std::move(out), [A, n](Tape& tp, const double* go) {
    if (A.node >= 0) {
      double* ga = tp.grad_buffer(A.node);
      const double g = go[0] / double(n);
      for (size_t i = 0; i < n; ++i) ga[i] += g;
    }
  });
}

Tensor sum_all(const Tensor& A) {
  const size_t n = A.size();
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += A[i];
  Tensor out({1}, std::vector<double>{s});
  Tape* t = tape_of({&A});
  return finish(t, "sum_all", std::move(out), [A, n](Tape& tp, const double* go) {
    if (A.node >= 0) {
      double* ga = tp.grad_buffer(A.node);
      for (size_t i = 0; i < n; ++i) ga[i] += go[0];
    }
  });
}

Tensor reshape(const Tensor& A, std::vector<int> s) {
  if (numel(s) != A.size())
    throw ShapeError("reshape: cannot view " + shape_str(A.shape) + " as " + shape_str(s));
  Tensor out;
  out.shape = std::move(s);
  out.data = A.data;  // alias
  const size_t n = A.size();
  Tape* t = tape_of({&A});
  return finish(t, "reshape", std::move(out), [A, n](Tape& tp, const double* go) {
    if (A.node >= 0) detail::axpy(tp.grad_buffer(A.node), go, 1.0, n);
  });
}

// --- channel broadcasts ---------------------------------------------------------

namespace {
// For [..., m] tensors: number of leading rows.
size_t row_count(const char* op, const Tensor& X, const Tensor& v) {
  if (v.shape.size() != 1)
    throw ShapeError(std::string(op) + ": vector operand must be rank 1, got " +
                     shape_str(v.shape));
  if (X.shape.empty() || X.shape.back() != v.shape[0])
    throw ShapeError(std::string(op) + ": trailing dim of " + shape_str(X.shape) +
                     " does not match " + shape_str(v.shape));
  return X.size() / size_t(v.shape[0]);
}
}  // namespace

Tensor add_channel(const Tensor& X, const Tensor& v) {
  const size_t rows = row_count("add_channel", X, v);
  const int m = v.shape[0];
  Tensor out(X.shape);
  for (size_t r = 0; r < rows; ++r)
    for (int c = 0; c < m; ++c) out[r * m + c] = X[r * m + c] + v[c];
  Tape* t = tape_of({&X, &v});
  return finish(t, "add_channel", std::move(out), [X, v, rows, m](Tape& tp, const double* go) {
    if (X.node >= 0) detail::axpy(tp.grad_buffer(X.node), go, 1.0, rows * size_t(m));
    if (v.node >= 0) {
      double* gv = tp.grad_buffer(v.node);
      for (size_t r = 0; r < rows; ++r)
        for (int c = 0; c < m; ++c) gv[c] += go[r * m + c];
    }
  });
}

Tensor mul_channel(const Tensor& X, const Tensor& v) {
  const size_t rows = row_count("mul_channel", X, v);
  const int m = v.shape[0];
  Tensor out(X.shape);
  for (size_t r = 0; r < rows; ++r)
    for (int c = 0; c < m; ++c) out[r * m + c] = X[r * m + c] * v[c];
  Tape* t = tape_of({&X, &v});
  return finish(t, "mul_channel", std::move(out), [X, v, rows, m](Tape& tp, const double* go) {
    if (X.node >= 0) {
      double* gx = tp.grad_buffer(X.node);
      for (size_t r = 0; r < rows; ++r)
        for (int c = 0; c < m; ++c) gx[r * m + c] += go[r * m + c] * v[c];
    }
    if (v.node >= 0) {
      double* gv = tp.grad_buffer(v.node);
      for (size_t r = 0; r < rows; ++r)
        for (int c = 0; c < m; ++c) gv[c] += go[r * m + c] * X[r * m + c];
    }
  });
}

Tensor channel_mean(const Tensor& X) {
  if (X.shape.empty()) throw ShapeError("channel_mean: scalar input");
  const int m = X.shape.back();
  const size_t rows = X.size() / size_t(m);
  if (rows == 0) throw ValueError("channel_mean: empty tensor");
  Tensor out({m});
  for (size_t r = 0; r < rows; ++r)
    for (int c = 0; c < m; ++c) out[c] += X[r * m + c];
  for (int c = 0; c < m; ++c) out[c] /= double(rows);
  Tape* t = tape_of({&X});
  return finish(t, "channel_mean", std::move(out), [X, rows, m](Tape& tp, const double* go) {
    if (X.node < 0) return;
    double* gx = tp.grad_buffer(X.node);
    for (size_t r = 0; r < rows; ++r)
      for (int c = 0; c < m; ++c) gx[r * m + c] += go[c] / double(rows);
  });
}

namespace {
void check_batch_channel(const char* op, const Tensor& X, const Tensor& S) {
  if (S.shape.size() != 2)
    throw ShapeError(std::string(op) + ": per-sample operand must be rank 2, got " +
                     shape_str(S.shape));
  if (X.shape.size() < 2 || X.shape.front() != S.shape[0] || X.shape.back() != S.shape[1])
    throw ShapeError(std::string(op) + ": shapes " + shape_str(X.shape) + " and " +
                     shape_str(S.shape) + " do not align on batch and channel dims");
}
}  // namespace

Tensor mul_batch_channel(const Tensor& X, const Tensor& S) {
  check_batch_channel("mul_batch_channel", X, S);
  const int b = X.shape.front(), m = X.shape.back();
  const size_t sp = X.size() / (size_t(b) * m);
  Tensor out(X.shape);
  for (int bi = 0; bi < b; ++bi)
    for (size_t s = 0; s < sp; ++s)
      for (int c = 0; c < m; ++c) {
        const size_t ix = (size_t(bi) * sp + s) * m + c;
        out[ix] = X[ix] * S[size_t(bi) * m + c];
      }
  Tape* t = tape_of({&X, &S});
  return finish(t, "mul_batch_channel", std::move(out),
                [X, S, b, m, sp](Tape& tp, const double* go) {
    if (X.node >= 0) {
      double* gx = tp.grad_buffer(X.node);
      for (int bi = 0; bi < b; ++bi)
        for (size_t s = 0; s < sp; ++s)
          for (int c = 0; c < m; ++c) {
            const size_t ix = (size_t(bi) * sp + s) * m + c;
            gx[ix] += go[ix] * S[size_t(bi) * m + c];
          }
    }
    if (S.node >= 0) {
      double* gs = tp.grad_buffer(S.node);
      for (int bi = 0; bi < b; ++bi)
        for (size_t s = 0; s < sp; ++s)
          for (int c = 0; c < m; ++c) {
            const size_t ix = (size_t(bi) * sp + s) * m + c;
            gs[size_t(bi) * m + c] += go[ix] * X[ix];
          }
    }
  });
}

Tensor add_batch_channel(const Tensor& X, const Tensor& S) {
  check_batch_channel("add_batch_channel", X, S);
  const int b = X.shape.front(), m = X.shape.back();
  const size_t sp = X.size() / (size_t(b) * m);
  Tensor out(X.shape);
  for (int bi = 0; bi < b; ++bi)
    for (size_t s = 0; s < sp; ++s)
      for (int c = 0; c < m; ++c) {
        const size_t ix = (size_t(bi) * sp + s) * m + c;
        out[ix] = X[ix] + S[size_t(bi) * m + c];
      }
  Tape* t = tape_of({&X, &S});
  return finish(t, "add_batch_channel", std::move(out),
                [X, S, b, m, sp](Tape& tp, const double* go) {
    if (X.node >= 0) detail::axpy(tp.grad_buffer(X.node), go, 1.0, size_t(b) * sp * m);
    if (S.node >= 0) {
      double* gs = tp.grad_buffer(S.node);
      for (int bi = 0; bi < b; ++bi)
        for (size_t s = 0; s < sp; ++s)
          for (int c = 0; c < m; ++c)
            gs[size_t(bi) * m + c] += go[(size_t(bi) * sp + s) * m + c];
    }
  });
}

Tensor rsqrt_eps(const Tensor& v, double eps) {
  Tensor out(v.shape);
  const size_t n = v.size();
  for (size_t i = 0; i < n; ++i) out[i] = 1.0 / std::sqrt(v[i] + eps);
  Tape* t = tape_of({&v});
  return finish(t, "rsqrt_eps", std::move(out), [v, out, n](Tape& tp, const double* go) {
    if (v.node < 0) return;
    double* gv = tp.grad_buffer(v.node);
    for (size_t i = 0; i < n; ++i) gv[i] += go[i] * (-0.5 * out[i] * out[i] * out[i]);
  });
}

Tensor div_scalar(const Tensor& A, const Tensor& s) {
  if (s.size() != 1)
    throw ShapeError("div_scalar: divisor must have a single element, got " + shape_str(s.shape));
  const double d = s[0];
  Tensor out(A.shape);
  const size_t n = A.size();
  for (size_t i = 0; i < n; ++i) out[i] = A[i] / d;
  Tape* t = tape_of({&A, &s});
  return finish(t, "div_scalar", std::move(out), [A, s, d, n](Tape& tp, const double* go) {
    if (A.node >= 0) detail::axpy(tp.grad_buffer(A.node), go, 1.0 / d, n);
    if (s.node >= 0) {
      double acc = 0.0;
      for (size_t i = 0; i < n; ++i) acc += go[i] * A[i];
      tp.grad_buffer(s.node)[0] += -acc / (d * d);
    }
  });
}

// --- gradient checking ------------------------------------------------------------

double grad_check(const std::function<Tensor(Tape&)>& f, const std::vector<Param*>& inputs,
                  double step) {
  Tape tape;
  tape.check_finite = true;
  Tensor loss = f(tape);
  if (loss.size() != 1)
    throw ValueError("grad_check: function must produce a scalar, got " + shape_str(loss.shape));
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (Param* p : inputs) {
    p->collect(tape);
    analytic.push_back(p->grad);
  }
  const auto eval = [&f]() {
    Tape t;
    t.check_finite = true;
    Tensor l = f(t);
    return l[0];
  };
  double worst = 0.0;
  for (size_t pi = 0; pi < inputs.size(); ++pi) {
    Param* p = inputs[pi];
    for (size_t i = 0; i < p->value.size(); ++i) {
      const double old = p->value[i];
      p->value[i] = old + step;
      const double fp = eval();
      p->value[i] = old - step;
      const double fm = eval();
      p->value[i] = old;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      if (err > worst) worst = err;
    }
  }
  return worst;
}

}  // namespace gconv
