#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "mad/common.hpp"
#include "mad/rng.hpp"

// Dense double-precision tensors on a reverse-mode tape. The operator set is
// exactly what the training graph needs; reductions use a fixed row-major
// accumulation order so results are reproducible bit for bit.

namespace mad {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int e : s) {
    check(e > 0, errkind::kShape, "non-positive extent in shape " + shape_str(s));
    check(n <= std::numeric_limits<size_t>::max() / static_cast<size_t>(e),
          errkind::kShape, "shape extent product overflows");
    n *= static_cast<size_t>(e);
  }
  return n;
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool active = false;  // lies on a differentiable path
  std::string name;
  uint64_t tape_serial = 0;
  size_t tape_id = static_cast<size_t>(-1);
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape) {
    Tensor t;
    t.p_ = std::make_shared<detail::TensorImpl>();
    t.p_->shape = shape;
    t.p_->data.assign(shape_numel(shape), 0.0);
    return t;
  }

  static Tensor full(const Shape& shape, double v) {
    Tensor t = zeros(shape);
    std::fill(t.p_->data.begin(), t.p_->data.end(), v);
    return t;
  }

  static Tensor from_values(const Shape& shape, std::vector<double> values) {
    Tensor t;
    t.p_ = std::make_shared<detail::TensorImpl>();
    t.p_->shape = shape;
    check(shape_numel(shape) == values.size(), errkind::kShape,
          "value count does not match shape " + shape_str(shape));
    t.p_->data = std::move(values);
    return t;
  }

  static Tensor uniform(const Shape& shape, double a, double b, Rng& rng) {
    check(a < b, errkind::kContract, "uniform init requires a < b");
    Tensor t = zeros(shape);
    for (double& v : t.p_->data) v = rng.uniform(a, b);
    return t;
  }

  // He-style uniform init: bound = sqrt(6 / fan_in).
  static Tensor kaiming(const Shape& shape, int fan_in, Rng& rng) {
    check(fan_in > 0, errkind::kContract, "kaiming init requires fan_in > 0");
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return uniform(shape, -bound, bound, rng);
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  size_t numel() const { return p_->data.size(); }
  int extent(size_t dim) const { return p_->shape[dim]; }

  double* data() { return p_->data.data(); }
  const double* data() const { return p_->data.data(); }
  std::vector<double>& values() { return p_->data; }
  const std::vector<double>& values() const { return p_->data; }

  double scalar() const {
    check(numel() == 1, errkind::kShape, "scalar() on tensor of size " + std::to_string(numel()));
    return p_->data[0];
  }

  Tensor& set_requires_grad(bool on = true) {
    p_->requires_grad = on;
    if (on) p_->active = true;
    return *this;
  }
  bool requires_grad() const { return p_->requires_grad; }
  bool active() const { return p_->active; }

  Tensor& set_name(const std::string& n) {
    p_->name = n;
    return *this;
  }
  const std::string& name() const { return p_->name; }

  bool has_grad() const { return !p_->grad.empty(); }
  std::vector<double>& grad() {
    if (p_->grad.empty()) p_->grad.assign(p_->data.size(), 0.0);
    return p_->grad;
  }
  const std::vector<double>& grad_view() const { return p_->grad; }
  void clear_grad() { p_->grad.clear(); }

  bool all_finite() const {
    for (double v : p_->data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  detail::TensorImpl* impl() const { return p_.get(); }
  std::shared_ptr<detail::TensorImpl> impl_ptr() const { return p_; }

 private:
  std::shared_ptr<detail::TensorImpl> p_;
};

// Records one operation per forward call; backward replays the list in
// reverse. A tape is single-use: one backward pass, then it is consumed.
class Tape {
 public:
  Tape() : serial_(next_serial()++) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool check_finite = true;

  size_t num_ops() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  size_t id_of(const Tensor& t) {
    auto* im = t.impl();
    if (im->tape_serial != serial_ || im->tape_id == static_cast<size_t>(-1)) {
      im->tape_serial = serial_;
      im->tape_id = next_id_++;
    }
    return im->tape_id;
  }

  void record(const char* label, std::initializer_list<const Tensor*> inputs,
              const Tensor& output, std::function<void()> backward) {
    check(!consumed_, errkind::kContract,
          std::string("op '") + label + "' recorded on a consumed tape");
    size_t out_id = 0;
    for (const Tensor* in : inputs) {
      size_t in_id = id_of(*in);
      (void)in_id;
    }
    out_id = id_of(output);
    for (const Tensor* in : inputs)
      check(in->impl()->tape_id < out_id, errkind::kContract,
            std::string("tape order violated by op '") + label + "'");
    records_.push_back(Record{label, output.impl_ptr(), std::move(backward)});
  }

  void guard_finite(const char* label, const Tensor& out) {
    if (!check_finite) return;
    if (!out.all_finite())
      fail(errkind::kNumeric, std::string("non-finite values produced by op '") + label +
                                  "' (tensor " + (out.name().empty() ? "op#" + std::to_string(records_.size()) : out.name()) +
                                  ")");
  }

  // Reverse sweep from a scalar loss. Gradients accumulate into every tensor
  // on an active path; tensors never touched keep an empty grad buffer.
  void backward(Tensor& loss) {
    check(!consumed_, errkind::kContract, "backward called twice on one tape");
    check(loss.numel() == 1, errkind::kShape, "backward requires a scalar loss");
    consumed_ = true;
    loss.grad()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // nothing flowed back to this op
      it->fn();
    }
  }

 private:
  struct Record {
    const char* label;
    std::shared_ptr<detail::TensorImpl> out;
    std::function<void()> fn;
  };

  static uint64_t& next_serial() {
    static uint64_t s = 1;
    return s;
  }

  uint64_t serial_;
  size_t next_id_ = 0;
  std::vector<Record> records_;
  bool consumed_ = false;
};

namespace detail {

inline Tensor make_like(const Shape& shape, bool active) {
  Tensor t = Tensor::zeros(shape);
  t.impl()->active = active;
  return t;
}

inline std::vector<double>& grad_of(const Tensor& t) {
  auto* im = t.impl();
  if (im->grad.empty()) im->grad.assign(im->data.size(), 0.0);
  return im->grad;
}

inline bool any_active(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->active()) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fwd, typename Bwd>
Tensor binary_same_shape(Tape& tape, const char* label, const Tensor& a, const Tensor& b,
                         Fwd fwd, Bwd bwd) {
  check(a.shape() == b.shape(), errkind::kShape,
        std::string(label) + ": shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = make_like(a.shape(), any_active({&a, &b}));
  const size_t n = a.numel();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  tape.guard_finite(label, out);
  if (out.active()) {
    tape.record(label, {&a, &b}, out, [a, b, out, bwd]() {
      const auto& go = out.impl()->grad;
      const size_t n2 = go.size();
      if (a.active()) {
        auto& ga = grad_of(a);
        for (size_t i = 0; i < n2; ++i) ga[i] += bwd(go[i], a.data()[i], b.data()[i], out.data()[i], 0);
      }
      if (b.active()) {
        auto& gb = grad_of(b);
        for (size_t i = 0; i < n2; ++i) gb[i] += bwd(go[i], a.data()[i], b.data()[i], out.data()[i], 1);
      }
    });
  }
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary(Tape& tape, const char* label, const Tensor& x, Fwd fwd, Bwd bwd) {
  Tensor out = make_like(x.shape(), x.active());
  const size_t n = x.numel();
  const double* px = x.data();
  double* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  tape.guard_finite(label, out);
  if (out.active()) {
    tape.record(label, {&x}, out, [x, out, bwd]() {
      const auto& go = out.impl()->grad;
      auto& gx = grad_of(x);
      const size_t n2 = go.size();
      for (size_t i = 0; i < n2; ++i) gx[i] += bwd(go[i], x.data()[i], out.data()[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      t, "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double, int) { return g; });
}

inline Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      t, "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double, int side) { return side == 0 ? g : -g; });
}

inline Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      t, "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double, int side) { return side == 0 ? g * y : g * x; });
}

inline Tensor add_scalar(Tape& t, const Tensor& x, double c) {
  return detail::unary(
      t, "add_scalar", x, [c](double v) { return v + c; },
      [](double g, double, double) { return g; });
}

// The 'scale' elementwise op.
inline Tensor mul_scalar(Tape& t, const Tensor& x, double c) {
  return detail::unary(
      t, "mul_scalar", x, [c](double v) { return v * c; },
      [c](double g, double, double) { return g * c; });
}

// relu gradient at exactly 0 is defined as 0.
inline Tensor relu(Tape& t, const Tensor& x) {
  return detail::unary(
      t, "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double g, double xv, double) { return xv > 0.0 ? g : 0.0; });
}

inline Tensor sigmoid(Tape& t, const Tensor& x) {
  return detail::unary(
      t, "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

inline Tensor tanh(Tape& t, const Tensor& x) {
  return detail::unary(
      t, "tanh", x, [](double v) { return std::tanh(v); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}

// sqrt with subgradient 0 at 0, so norms of identical vectors backprop cleanly.
inline Tensor sqrt_zgrad(Tape& t, const Tensor& x) {
  return detail::unary(
      t, "sqrt_zgrad", x, [](double v) { return std::sqrt(v); },
      [](double g, double xv, double y) { return xv > 1e-24 ? g * 0.5 / y : 0.0; });
}

// Identity forward (bitwise), no backward edge.
inline Tensor detach(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  std::copy(x.data(), x.data() + x.numel(), out.data());
  return out;
}

// Identity forward (bitwise); backward scales the upstream gradient by -mu.
inline Tensor grad_reverse(Tape& t, const Tensor& x, double mu) {
  check(mu >= 0.0, errkind::kContract, "grad_reverse requires mu >= 0");
  Tensor out = detail::make_like(x.shape(), x.active());
  std::copy(x.data(), x.data() + x.numel(), out.data());
  if (out.active()) {
    t.record("grad_reverse", {&x}, out, [x, out, mu]() {
      const auto& go = out.impl()->grad;
      auto& gx = detail::grad_of(x);
      for (size_t i = 0; i < go.size(); ++i) gx[i] += -mu * go[i];
    });
  }
  return out;
}

// Copies into a new shape with the same element count.
inline Tensor reshape(Tape& t, const Tensor& x, const Shape& shape) {
  check(shape_numel(shape) == x.numel(), errkind::kShape,
        "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor out = detail::make_like(shape, x.active());
  std::copy(x.data(), x.data() + x.numel(), out.data());
  if (out.active()) {
    t.record("reshape", {&x}, out, [x, out]() {
      const auto& go = out.impl()->grad;
      auto& gx = detail::grad_of(x);
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {

// C[M,N] += A[M,K] * B[K,N]; per output element the k-sum runs in ascending
// order, matching a plain nested-loop reference bit for bit.
inline void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A^T where A is [K,M]: used for transposed operands without
// materializing the transpose.
inline void gemm_at_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  // a is [k, m] accessed as a[kk*m + i]
  for (int kk = 0; kk < k; ++kk) {
    const double* arow = a + static_cast<size_t>(kk) * m;
    const double* brow = b + static_cast<size_t>(kk) * n;
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B^T where B is [N,K].
inline void gemm_bt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<size_t>(i) * k;
    double* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

}  // namespace detail

// y = x w + b with x:[B,I], w:[I,O], b:[O].
inline Tensor linear(Tape& t, const Tensor& x, const Tensor& w, const Tensor& b) {
  check(x.shape().size() == 2 && w.shape().size() == 2 && b.shape().size() == 1,
        errkind::kShape, "linear expects x:[B,I] w:[I,O] b:[O]");
  const int B = x.extent(0), I = x.extent(1), O = w.extent(1);
  check(w.extent(0) == I, errkind::kShape,
        "linear inner extents disagree: x " + shape_str(x.shape()) + " w " + shape_str(w.shape()));
  check(b.extent(0) == O, errkind::kShape, "linear bias extent mismatch");
  Tensor out = detail::make_like({B, O}, detail::any_active({&x, &w, &b}));
  double* po = out.data();
  for (int i = 0; i < B; ++i) {
    double* row = po + static_cast<size_t>(i) * O;
    for (int j = 0; j < O; ++j) row[j] = b.data()[j];
  }
  detail::gemm_acc(x.data(), w.data(), po, B, I, O);
  t.guard_finite("linear", out);
  if (out.active()) {
    t.record("linear", {&x, &w, &b}, out, [x, w, b, out, B, I, O]() {
      const auto& go = out.impl()->grad;
      if (x.active()) {
        auto& gx = detail::grad_of(x);
        detail::gemm_bt_acc(go.data(), w.data(), gx.data(), B, O, I);
      }
      if (w.active()) {
        auto& gw = detail::grad_of(w);
        detail::gemm_at_acc(x.data(), go.data(), gw.data(), I, B, O);
      }
      if (b.active()) {
        auto& gb = detail::grad_of(b);
        for (int i = 0; i < B; ++i)
          for (int j = 0; j < O; ++j) gb[j] += go[static_cast<size_t>(i) * O + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeom {
  int batch, cin, h, w;
  int cout, kh, kw;
  int stride, dilation, padding;
  int oh, ow;
};

inline ConvGeom conv_geometry(const Tensor& x, const Tensor& k, int stride, int dilation,
                              int padding) {
  check(x.shape().size() == 4 && k.shape().size() == 4, errkind::kShape,
        "conv2d expects x:[B,C,H,W] k:[O,C,kh,kw]");
  check(stride >= 1 && dilation >= 1 && padding >= 0, errkind::kContract,
        "conv2d requires stride>=1, dilation>=1, padding>=0");
  ConvGeom g;
  g.batch = x.extent(0);
  g.cin = x.extent(1);
  g.h = x.extent(2);
  g.w = x.extent(3);
  g.cout = k.extent(0);
  g.kh = k.extent(2);
  g.kw = k.extent(3);
  check(k.extent(1) == g.cin, errkind::kShape, "conv2d channel mismatch");
  g.stride = stride;
  g.dilation = dilation;
  g.padding = padding;
  g.oh = (g.h + 2 * padding - dilation * (g.kh - 1) - 1) / stride + 1;
  g.ow = (g.w + 2 * padding - dilation * (g.kw - 1) - 1) / stride + 1;
  check(g.h + 2 * padding - dilation * (g.kh - 1) - 1 >= 0 && g.oh > 0 && g.ow > 0,
        errkind::kShape, "conv2d output extent non-positive");
  return g;
}

namespace detail {

// Patch matrix rows ordered (b, oy, ox), columns ordered (c, ki, kj); the
// column order matches the naive accumulation order over the kernel taps.
inline void im2col(const Tensor& x, const ConvGeom& g, std::vector<double>& cols) {
  const int K = g.cin * g.kh * g.kw;
  const size_t rows = static_cast<size_t>(g.batch) * g.oh * g.ow;
  cols.assign(rows * K, 0.0);
  const double* px = x.data();
  size_t r = 0;
  for (int b = 0; b < g.batch; ++b) {
    const double* xb = px + static_cast<size_t>(b) * g.cin * g.h * g.w;
    for (int oy = 0; oy < g.oh; ++oy) {
      const int iy0 = oy * g.stride - g.padding;
      for (int ox = 0; ox < g.ow; ++ox, ++r) {
        const int ix0 = ox * g.stride - g.padding;
        double* col = cols.data() + r * K;
        int c0 = 0;
        for (int c = 0; c < g.cin; ++c) {
          const double* xc = xb + static_cast<size_t>(c) * g.h * g.w;
          for (int ki = 0; ki < g.kh; ++ki) {
            const int iy = iy0 + ki * g.dilation;
            for (int kj = 0; kj < g.kw; ++kj, ++c0) {
              const int ix = ix0 + kj * g.dilation;
              if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                col[c0] = xc[static_cast<size_t>(iy) * g.w + ix];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation with dilated taps. Output element (b,o,oy,ox) accumulates
// over (c,ki,kj) in that nesting order; padding contributes explicit zeros.
inline Tensor conv2d(Tape& t, const Tensor& x, const Tensor& k, int stride = 1, int dilation = 1,
                     int padding = 0) {
  const ConvGeom g = conv_geometry(x, k, stride, dilation, padding);
  const int K = g.cin * g.kh * g.kw;
  const size_t rows = static_cast<size_t>(g.batch) * g.oh * g.ow;

  auto cols = std::make_shared<std::vector<double>>();
  detail::im2col(x, g, *cols);

  // GEMM into (rows, cout), then scatter to [B,O,oh,ow].
  std::vector<double> prod(rows * g.cout, 0.0);
  {
    // kernel reshaped to [K, cout] on the fly: k is [cout, K] row-major.
    // Use A[rows,K] * B[K,cout] with B(kk, o) = k(o, kk).
    const double* pk = k.data();
    for (size_t r = 0; r < rows; ++r) {
      const double* col = cols->data() + r * K;
      double* orow = prod.data() + r * g.cout;
      for (int kk = 0; kk < K; ++kk) {
        const double cv = col[kk];
        for (int o = 0; o < g.cout; ++o) orow[o] += cv * pk[static_cast<size_t>(o) * K + kk];
      }
    }
  }
  Tensor out = detail::make_like({g.batch, g.cout, g.oh, g.ow}, detail::any_active({&x, &k}));
  {
    double* po = out.data();
    const int plane = g.oh * g.ow;
    size_t r = 0;
    for (int b = 0; b < g.batch; ++b) {
      double* ob = po + static_cast<size_t>(b) * g.cout * plane;
      for (int p = 0; p < plane; ++p, ++r) {
        const double* orow = prod.data() + r * g.cout;
        for (int o = 0; o < g.cout; ++o) ob[static_cast<size_t>(o) * plane + p] = orow[o];
      }
    }
  }
  t.guard_finite("conv2d", out);
  if (out.active()) {
    t.record("conv2d", {&x, &k}, out, [x, k, out, g, cols, K, rows]() {
      const auto& go = out.impl()->grad;
      const int plane = g.oh * g.ow;
      // Gather upstream gradient as (rows, cout).
      std::vector<double> gy(rows * g.cout);
      {
        size_t r = 0;
        for (int b = 0; b < g.batch; ++b) {
          const double* gb = go.data() + static_cast<size_t>(b) * g.cout * plane;
          for (int p = 0; p < plane; ++p, ++r)
            for (int o = 0; o < g.cout; ++o)
              gy[r * g.cout + o] = gb[static_cast<size_t>(o) * plane + p];
        }
      }
      if (k.active()) {
        // dK[o, kk] += sum_r gy[r,o] * cols[r,kk]
        auto& gk = detail::grad_of(k);
        for (size_t r = 0; r < rows; ++r) {
          const double* gyr = gy.data() + r * g.cout;
          const double* col = cols->data() + r * K;
          for (int o = 0; o < g.cout; ++o) {
            const double gv = gyr[o];
            if (gv == 0.0) continue;
            double* gko = gk.data() + static_cast<size_t>(o) * K;
            for (int kk = 0; kk < K; ++kk) gko[kk] += gv * col[kk];
          }
        }
      }
      if (x.active()) {
        // dcols[r,kk] = sum_o gy[r,o] * k[o,kk], then col2im scatter-add.
        auto& gx = detail::grad_of(x);
        const double* pk = k.data();
        std::vector<double> dcol(K);
        size_t r = 0;
        for (int b = 0; b < g.batch; ++b) {
          double* gxb = gx.data() + static_cast<size_t>(b) * g.cin * g.h * g.w;
          for (int oy = 0; oy < g.oh; ++oy) {
            const int iy0 = oy * g.stride - g.padding;
            for (int ox = 0; ox < g.ow; ++ox, ++r) {
              const int ix0 = ox * g.stride - g.padding;
              std::fill(dcol.begin(), dcol.end(), 0.0);
              const double* gyr = gy.data() + r * g.cout;
              for (int o = 0; o < g.cout; ++o) {
                const double gv = gyr[o];
                if (gv == 0.0) continue;
                const double* ko = pk + static_cast<size_t>(o) * K;
                for (int kk = 0; kk < K; ++kk) dcol[kk] += gv * ko[kk];
              }
              int c0 = 0;
              for (int c = 0; c < g.cin; ++c) {
                double* gxc = gxb + static_cast<size_t>(c) * g.h * g.w;
                for (int ki = 0; ki < g.kh; ++ki) {
                  const int iy = iy0 + ki * g.dilation;
                  for (int kj = 0; kj < g.kw; ++kj, ++c0) {
                    const int ix = ix0 + kj * g.dilation;
                    if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                      gxc[static_cast<size_t>(iy) * g.w + ix] += dcol[c0];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// Adds one bias per channel across a [B,C,H,W] map.
inline Tensor channel_bias(Tape& t, const Tensor& x, const Tensor& b) {
  check(x.shape().size() == 4 && b.shape().size() == 1 && b.extent(0) == x.extent(1),
        errkind::kShape, "channel_bias expects x:[B,C,H,W] b:[C]");
  const int B = x.extent(0), C = x.extent(1), plane = x.extent(2) * x.extent(3);
  Tensor out = detail::make_like(x.shape(), detail::any_active({&x, &b}));
  const double* px = x.data();
  double* po = out.data();
  for (int i = 0; i < B; ++i)
    for (int c = 0; c < C; ++c) {
      const double bv = b.data()[c];
      const size_t off = (static_cast<size_t>(i) * C + c) * plane;
      for (int p = 0; p < plane; ++p) po[off + p] = px[off + p] + bv;
    }
  t.guard_finite("channel_bias", out);
  if (out.active()) {
    t.record("channel_bias", {&x, &b}, out, [x, b, out, B, C, plane]() {
      const auto& go = out.impl()->grad;
      if (x.active()) {
        auto& gx = detail::grad_of(x);
        for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (b.active()) {
        auto& gb = detail::grad_of(b);
        for (int i = 0; i < B; ++i)
          for (int c = 0; c < C; ++c) {
            const size_t off = (static_cast<size_t>(i) * C + c) * plane;
            double acc = 0.0;
            for (int p = 0; p < plane; ++p) acc += go[off + p];
            gb[c] += acc;
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling / gather
// ---------------------------------------------------------------------------

// Channelwise arithmetic mean over the spatial plane: [B,C,H,W] -> [B,C].
inline Tensor global_avg_pool(Tape& t, const Tensor& x) {
  check(x.shape().size() == 4, errkind::kShape, "global_avg_pool expects [B,C,H,W]");
  const int B = x.extent(0), C = x.extent(1), plane = x.extent(2) * x.extent(3);
  Tensor out = detail::make_like({B, C}, x.active());
  const double inv = 1.0 / plane;
  for (int i = 0; i < B; ++i)
    for (int c = 0; c < C; ++c) {
      const size_t off = (static_cast<size_t>(i) * C + c) * plane;
      double acc = 0.0;
      for (int p = 0; p < plane; ++p) acc += x.data()[off + p];
      out.data()[static_cast<size_t>(i) * C + c] = acc * inv;
    }
  t.guard_finite("global_avg_pool", out);
  if (out.active()) {
    t.record("global_avg_pool", {&x}, out, [x, out, B, C, plane, inv]() {
      const auto& go = out.impl()->grad;
      auto& gx = detail::grad_of(x);
      for (int i = 0; i < B; ++i)
        for (int c = 0; c < C; ++c) {
          const double gv = go[static_cast<size_t>(i) * C + c] * inv;
          const size_t off = (static_cast<size_t>(i) * C + c) * plane;
          for (int p = 0; p < plane; ++p) gx[off + p] += gv;
        }
    });
  }
  return out;
}

// One pooling region on the feature map, in cell coordinates.
struct PoolRegion {
  int sample;          // batch index
  int y0, y1, x0, x1;  // half-open cell rect
};

// Channelwise mean over each region's cells: [B,C,h,w] + regions -> [N,C].
inline Tensor region_avg_pool(Tape& t, const Tensor& x, const std::vector<PoolRegion>& regions) {
  check(x.shape().size() == 4, errkind::kShape, "region_avg_pool expects [B,C,h,w]");
  check(!regions.empty(), errkind::kContract, "region_avg_pool requires >= 1 region");
  const int B = x.extent(0), C = x.extent(1), h = x.extent(2), w = x.extent(3);
  for (const auto& r : regions) {
    check(r.sample >= 0 && r.sample < B, errkind::kContract, "region sample index out of range");
    check(0 <= r.y0 && r.y0 < r.y1 && r.y1 <= h && 0 <= r.x0 && r.x0 < r.x1 && r.x1 <= w,
          errkind::kContract, "region covers zero cells or exceeds the map");
  }
  const int N = static_cast<int>(regions.size());
  Tensor out = detail::make_like({N, C}, x.active());
  for (int n = 0; n < N; ++n) {
    const auto& r = regions[n];
    const double inv = 1.0 / ((r.y1 - r.y0) * (r.x1 - r.x0));
    for (int c = 0; c < C; ++c) {
      const double* plane = x.data() + (static_cast<size_t>(r.sample) * C + c) * h * w;
      double acc = 0.0;
      for (int y = r.y0; y < r.y1; ++y)
        for (int xx = r.x0; xx < r.x1; ++xx) acc += plane[static_cast<size_t>(y) * w + xx];
      out.data()[static_cast<size_t>(n) * C + c] = acc * inv;
    }
  }
  t.guard_finite("region_avg_pool", out);
  if (out.active()) {
    t.record("region_avg_pool", {&x}, out, [x, out, regions, C, h, w]() {
      const auto& go = out.impl()->grad;
      auto& gx = detail::grad_of(x);
      for (size_t n = 0; n < regions.size(); ++n) {
        const auto& r = regions[n];
        const double inv = 1.0 / ((r.y1 - r.y0) * (r.x1 - r.x0));
        for (int c = 0; c < C; ++c) {
          const double gv = go[n * C + c] * inv;
          double* plane = gx.data() + (static_cast<size_t>(r.sample) * C + c) * h * w;
          for (int y = r.y0; y < r.y1; ++y)
            for (int xx = r.x0; xx < r.x1; ++xx) plane[static_cast<size_t>(y) * w + xx] += gv;
        }
      }
    });
  }
  return out;
}

// Row gather: x:[B,K], idx of length N -> [N,K]; backward scatter-adds.
inline Tensor gather_rows(Tape& t, const Tensor& x, const std::vector<int>& idx) {
  check(x.shape().size() == 2, errkind::kShape, "gather_rows expects [B,K]");
  const int B = x.extent(0), K = x.extent(1);
  for (int i : idx) check(i >= 0 && i < B, errkind::kContract, "gather_rows index out of range");
  const int N = static_cast<int>(idx.size());
  Tensor out = detail::make_like({N, K}, x.active());
  for (int n = 0; n < N; ++n)
    std::copy(x.data() + static_cast<size_t>(idx[n]) * K, x.data() + static_cast<size_t>(idx[n] + 1) * K,
              out.data() + static_cast<size_t>(n) * K);
  if (out.active()) {
    t.record("gather_rows", {&x}, out, [x, out, idx, K]() {
      const auto& go = out.impl()->grad;
      auto& gx = detail::grad_of(x);
      for (size_t n = 0; n < idx.size(); ++n)
        for (int k = 0; k < K; ++k) gx[static_cast<size_t>(idx[n]) * K + k] += go[n * K + k];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions, softmax, losses
// ---------------------------------------------------------------------------

inline Tensor sum_all(Tape& t, const Tensor& x) {
  Tensor out = detail::make_like({1}, x.active());
  double acc = 0.0;
  for (size_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  out.data()[0] = acc;
  t.guard_finite("sum_all", out);
  if (out.active()) {
    t.record("sum_all", {&x}, out, [x, out]() {
      const double g = out.impl()->grad[0];
      auto& gx = detail::grad_of(x);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

inline Tensor mean_all(Tape& t, const Tensor& x) {
  check(x.numel() > 0, errkind::kContract, "mean of empty tensor");
  Tensor s = sum_all(t, x);
  return mul_scalar(t, s, 1.0 / static_cast<double>(x.numel()));
}

// Per-row sum: [N,D] -> [N].
inline Tensor row_sums(Tape& t, const Tensor& x) {
  check(x.shape().size() == 2, errkind::kShape, "row_sums expects [N,D]");
  const int N = x.extent(0), D = x.extent(1);
  Tensor out = detail::make_like({N}, x.active());
  for (int n = 0; n < N; ++n) {
    double acc = 0.0;
    const double* row = x.data() + static_cast<size_t>(n) * D;
    for (int d = 0; d < D; ++d) acc += row[d];
    out.data()[n] = acc;
  }
  t.guard_finite("row_sums", out);
  if (out.active()) {
    t.record("row_sums", {&x}, out, [x, out, N, D]() {
      const auto& go = out.impl()->grad;
      auto& gx = detail::grad_of(x);
      for (int n = 0; n < N; ++n) {
        const double g = go[n];
        double* row = gx.data() + static_cast<size_t>(n) * D;
        for (int d = 0; d < D; ++d) row[d] += g;
      }
    });
  }
  return out;
}

namespace detail {

inline void softmax_row(const double* z, double* p, int k) {
  double mx = z[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, z[i]);
  double denom = 0.0;
  for (int i = 0; i < k; ++i) {
    p[i] = std::exp(z[i] - mx);
    denom += p[i];
  }
  const double inv = 1.0 / denom;
  for (int i = 0; i < k; ++i) p[i] *= inv;
}

}  // namespace detail

// Row softmax: [N,K] -> [N,K].
inline Tensor softmax_rows(Tape& t, const Tensor& x) {
  check(x.shape().size() == 2, errkind::kShape, "softmax_rows expects [N,K]");
  const int N = x.extent(0), K = x.extent(1);
  Tensor out = detail::make_like(x.shape(), x.active());
  for (int n = 0; n < N; ++n)
    detail::softmax_row(x.data() + static_cast<size_t>(n) * K, out.data() + static_cast<size_t>(n) * K, K);
  t.guard_finite("softmax_rows", out);
  if (out.active()) {
    t.record("softmax_rows", {&x}, out, [x, out, N, K]() {
      const auto& go = out.impl()->grad;
      auto& gx = detail::grad_of(x);
      for (int n = 0; n < N; ++n) {
        const double* p = out.data() + static_cast<size_t>(n) * K;
        const double* g = go.data() + static_cast<size_t>(n) * K;
        double dot = 0.0;
        for (int i = 0; i < K; ++i) dot += g[i] * p[i];
        double* gxr = gx.data() + static_cast<size_t>(n) * K;
        for (int i = 0; i < K; ++i) gxr[i] += p[i] * (g[i] - dot);
      }
    });
  }
  return out;
}

// Per-pixel softmax over the channel axis: [B,K,h,w] -> [B,K,h,w].
inline Tensor softmax_map(Tape& t, const Tensor& x) {
  check(x.shape().size() == 4, errkind::kShape, "softmax_map expects [B,K,h,w]");
  const int B = x.extent(0), K = x.extent(1), plane = x.extent(2) * x.extent(3);
  Tensor out = detail::make_like(x.shape(), x.active());
  std::vector<double> z(K), p(K);
  for (int b = 0; b < B; ++b) {
    const double* xb = x.data() + static_cast<size_t>(b) * K * plane;
    double* ob = out.data() + static_cast<size_t>(b) * K * plane;
    for (int px = 0; px < plane; ++px) {
      for (int c = 0; c < K; ++c) z[c] = xb[static_cast<size_t>(c) * plane + px];
      detail::softmax_row(z.data(), p.data(), K);
      for (int c = 0; c < K; ++c) ob[static_cast<size_t>(c) * plane + px] = p[c];
    }
  }
  t.guard_finite("softmax_map", out);
  if (out.active()) {
    t.record("softmax_map", {&x}, out, [x, out, B, K, plane]() {
      const auto& go = out.impl()->grad;
      auto& gx = detail::grad_of(x);
      for (int b = 0; b < B; ++b) {
        const size_t boff = static_cast<size_t>(b) * K * plane;
        for (int px = 0; px < plane; ++px) {
          double dot = 0.0;
          for (int c = 0; c < K; ++c)
            dot += go[boff + static_cast<size_t>(c) * plane + px] *
                   out.data()[boff + static_cast<size_t>(c) * plane + px];
          for (int c = 0; c < K; ++c) {
            const size_t i = boff + static_cast<size_t>(c) * plane + px;
            gx[i] += out.data()[i] * (go[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Mean softmax cross-entropy over rows: logits [N,K], one label per row.
inline Tensor cross_entropy_rows(Tape& t, const Tensor& logits, const std::vector<int>& labels) {
  check(logits.shape().size() == 2, errkind::kShape, "cross_entropy_rows expects [N,K]");
  const int N = logits.extent(0), K = logits.extent(1);
  check(static_cast<int>(labels.size()) == N, errkind::kShape, "label count != row count");
  check(N > 0, errkind::kContract, "cross-entropy of empty batch");
  for (int y : labels)
    check(y >= 0 && y < K, errkind::kContract, "class index out of range in cross-entropy");
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * K);
  Tensor out = detail::make_like({1}, logits.active());
  double acc = 0.0;
  for (int n = 0; n < N; ++n) {
    const double* z = logits.data() + static_cast<size_t>(n) * K;
    double* p = probs->data() + static_cast<size_t>(n) * K;
    detail::softmax_row(z, p, K);
    acc += -std::log(std::max(p[labels[n]], 1e-300));
  }
  out.data()[0] = acc / N;
  t.guard_finite("cross_entropy_rows", out);
  if (out.active()) {
    t.record("cross_entropy_rows", {&logits}, out, [logits, out, labels, probs, N, K]() {
      const double g = out.impl()->grad[0] / N;
      auto& gx = detail::grad_of(logits);
      for (int n = 0; n < N; ++n) {
        const double* p = probs->data() + static_cast<size_t>(n) * K;
        double* gr = gx.data() + static_cast<size_t>(n) * K;
        for (int c = 0; c < K; ++c) gr[c] += g * (p[c] - (c == labels[n] ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

// Pixelwise cross-entropy on a logit map [B,K,h,w] against one label per
// image, averaged over every pixel of every image.
inline Tensor cross_entropy_map(Tape& t, const Tensor& logits, const std::vector<int>& labels) {
  check(logits.shape().size() == 4, errkind::kShape, "cross_entropy_map expects [B,K,h,w]");
  const int B = logits.extent(0), K = logits.extent(1), plane = logits.extent(2) * logits.extent(3);
  check(static_cast<int>(labels.size()) == B, errkind::kShape, "label count != batch");
  check(B > 0 && plane > 0, errkind::kContract, "cross-entropy of empty batch");
  for (int y : labels)
    check(y >= 0 && y < K, errkind::kContract, "class index out of range in cross-entropy");
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  Tensor out = detail::make_like({1}, logits.active());
  double acc = 0.0;
  std::vector<double> z(K), p(K);
  for (int b = 0; b < B; ++b) {
    const size_t boff = static_cast<size_t>(b) * K * plane;
    for (int px = 0; px < plane; ++px) {
      for (int c = 0; c < K; ++c) z[c] = logits.data()[boff + static_cast<size_t>(c) * plane + px];
      detail::softmax_row(z.data(), p.data(), K);
      for (int c = 0; c < K; ++c) (*probs)[boff + static_cast<size_t>(c) * plane + px] = p[c];
      acc += -std::log(std::max(p[labels[b]], 1e-300));
    }
  }
  const double denom = static_cast<double>(B) * plane;
  out.data()[0] = acc / denom;
  t.guard_finite("cross_entropy_map", out);
  if (out.active()) {
    t.record("cross_entropy_map", {&logits}, out, [logits, out, labels, probs, B, K, plane, denom]() {
      const double g = out.impl()->grad[0] / denom;
      auto& gx = detail::grad_of(logits);
      for (int b = 0; b < B; ++b) {
        const size_t boff = static_cast<size_t>(b) * K * plane;
        for (int px = 0; px < plane; ++px)
          for (int c = 0; c < K; ++c) {
            const size_t i = boff + static_cast<size_t>(c) * plane + px;
            gx[i] += g * ((*probs)[i] - (c == labels[b] ? 1.0 : 0.0));
          }
      }
    });
  }
  return out;
}

// Mean of squared differences over all elements.
inline Tensor mse(Tape& t, const Tensor& pred, const Tensor& target) {
  check(pred.shape() == target.shape(), errkind::kShape,
        "mse shapes " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  check(pred.numel() > 0, errkind::kContract, "mse of empty batch");
  Tensor out = detail::make_like({1}, detail::any_active({&pred, &target}));
  const size_t n = pred.numel();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = pred.data()[i] - target.data()[i];
    acc += d * d;
  }
  out.data()[0] = acc / static_cast<double>(n);
  t.guard_finite("mse", out);
  if (out.active()) {
    t.record("mse", {&pred, &target}, out, [pred, target, out, n]() {
      const double g = out.impl()->grad[0] * 2.0 / static_cast<double>(n);
      if (pred.active()) {
        auto& gp = detail::grad_of(pred);
        for (size_t i = 0; i < n; ++i) gp[i] += g * (pred.data()[i] - target.data()[i]);
      }
      if (target.active()) {
        auto& gt = detail::grad_of(target);
        for (size_t i = 0; i < n; ++i) gt[i] -= g * (pred.data()[i] - target.data()[i]);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters and SGD
// ---------------------------------------------------------------------------

enum class Role { kExtractor, kEncoder, kDecoder, kDomainClassifier, kTaskHead };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::kExtractor: return "extractor";
    case Role::kEncoder: return "encoder";
    case Role::kDecoder: return "decoder";
    case Role::kDomainClassifier: return "domain_classifier";
    case Role::kTaskHead: return "task_head";
  }
  return "?";
}

inline Role role_from_name(const std::string& s) {
  if (s == "extractor") return Role::kExtractor;
  if (s == "encoder") return Role::kEncoder;
  if (s == "decoder") return Role::kDecoder;
  if (s == "domain_classifier") return Role::kDomainClassifier;
  if (s == "task_head") return Role::kTaskHead;
  fail(errkind::kContract, "unknown role tag '" + s + "'");
}

struct Param {
  std::string name;
  Tensor value;
  std::vector<double> velocity;
};

struct ParamGroup {
  Role role = Role::kExtractor;
  std::vector<Param> params;

  // Returns a handle sharing storage with the stored parameter; safe to keep
  // across later add() calls.
  Tensor add(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    t.set_name(name);
    params.push_back(Param{name, std::move(t), {}});
    return params.back().value;
  }
};

// v <- momentum * v + g;  w <- w - lr * v;  gradients cleared.
inline void sgd_update(ParamGroup& group, double lr, double momentum) {
  for (auto& p : group.params) {
    check(p.value.has_grad(), errkind::kContract,
          "sgd_update: missing gradient for parameter '" + p.name + "'");
    auto& g = p.value.grad();
    auto& w = p.value.values();
    if (p.velocity.empty()) p.velocity.assign(w.size(), 0.0);
    for (size_t i = 0; i < w.size(); ++i) {
      p.velocity[i] = momentum * p.velocity[i] + g[i];
      w[i] -= lr * p.velocity[i];
    }
    p.value.clear_grad();
  }
}

inline void zero_grads(ParamGroup& group) {
  for (auto& p : group.params) p.value.clear_grad();
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

// Central differences against the already-populated analytic gradient of x.
// f re-evaluates the scalar objective from current tensor values and must be
// deterministic. Returns max over coordinates of |a-b| / max(1e-8, |a|+|b|).
inline double finite_difference_check(const std::function<double()>& f, Tensor& x, double eps) {
  check(eps > 0.0, errkind::kContract, "finite_difference_check requires eps > 0");
  check(x.has_grad(), errkind::kContract,
        "finite_difference_check: analytic gradient not populated");
  double worst = 0.0;
  auto& vals = x.values();
  const auto& g = x.grad_view();
  for (size_t i = 0; i < vals.size(); ++i) {
    const double keep = vals[i];
    vals[i] = keep + eps;
    const double fp = f();
    vals[i] = keep - eps;
    const double fm = f();
    vals[i] = keep;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double analytic = g[i];
    const double err = std::abs(numeric - analytic) /
                       std::max(1e-8, std::abs(numeric) + std::abs(analytic));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace mad
