#include "digr/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace digr {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                   to_string(b));
}

[[noreturn]] void bad_shape(const char* op, const Shape& a, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what + ", got shape " + to_string(a));
}

Tensor constant(const Shape& shape, Array data) { return Tensor(shape, std::move(data)); }

// Sums a broadcast gradient back down to a one-element operand.
Tensor reduce_to(const Tensor& g, const Shape& shape) {
  if (numel(shape) == 1 && g.numel() != 1) return reshape(sum(g), shape);
  if (g.shape() != shape) return reshape(g, shape);
  return g;
}

// Broadcasts a one-element tensor to `shape` (differentiably).
Tensor fill_like(const Tensor& one, const Shape& shape) {
  return add(Tensor::zeros(shape), reshape(one, {}));
}

enum class Broadcast { kSame, kLeftScalar, kRightScalar };

Broadcast check_binary(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.numel() == 1) return Broadcast::kRightScalar;
  if (a.numel() == 1) return Broadcast::kLeftScalar;
  shape_mismatch(op, a.shape(), b.shape());
}

template <typename F>
Array binary_values(Broadcast mode, const Tensor& a, const Tensor& b, F f) {
  switch (mode) {
    case Broadcast::kSame:
      return a.array().binaryExpr(b.array(), f);
    case Broadcast::kRightScalar: {
      double s = b.array()[0];
      return a.array().unaryExpr([&](double v) { return f(v, s); });
    }
    case Broadcast::kLeftScalar: {
      double s = a.array()[0];
      return b.array().unaryExpr([&](double v) { return f(s, v); });
    }
  }
  return {};
}

Shape binary_shape(Broadcast mode, const Tensor& a, const Tensor& b) {
  return mode == Broadcast::kLeftScalar ? b.shape() : a.shape();
}

// Views x as [outer, extent, inner] around `axis`.
struct AxisView {
  Index outer = 1;
  Index extent = 1;
  Index inner = 1;
};

AxisView axis_view(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) bad_shape(op, shape, "axis " + std::to_string(axis) + " out of range");
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out = shape;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

struct ConvGeometry {
  Index n, c, h, w;
  Index o, kh, kw;
  Index ho, wo;
  Conv2dParams params;
  Index patch() const { return c * kh * kw; }
  Index positions() const { return ho * wo; }
};

ConvGeometry conv_geometry(const char* op, const Shape& x, const Shape& w, Conv2dParams p) {
  if (x.size() != 4) bad_shape(op, x, "input must be NCHW");
  if (w.size() != 4) bad_shape(op, w, "kernel must be OIHW");
  if (x[1] != w[1]) shape_mismatch(op, x, w);
  if (p.stride < 1 || p.padding < 0) {
    throw ShapeError(std::string(op) + ": stride must be >= 1 and padding >= 0");
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0, p};
  g.ho = conv_output_size(g.h, g.kh, p.stride, p.padding);
  g.wo = conv_output_size(g.w, g.kw, p.stride, p.padding);
  if (g.ho < 1 || g.wo < 1) shape_mismatch(op, x, w);
  return g;
}

// Output columns [lo, hi) whose input column ox*stride - pad + k lies inside [0, extent).
void valid_range(Index out, Index extent, Index stride, Index offset, Index* lo, Index* hi) {
  // offset = k - pad; need 0 <= o*stride + offset < extent.
  *lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  Index last = extent - 1 - offset;
  *hi = last < 0 ? 0 : std::min(out, last / stride + 1);
  if (*hi < *lo) *hi = *lo;
}

// cols: [C*KH*KW, N*HO*WO], row-major.
RowMat im2col(const ConvGeometry& g, const double* x) {
  RowMat cols(g.patch(), g.n * g.positions());
  const Index s = g.params.stride;
  const Index pad = g.params.padding;
  if (pad == 0 && s == g.kh && s == g.kw && g.ho * s == g.h && g.wo * s == g.w) {
    // Non-overlapping tiles: a pure permutation, read one image row at a time.
    for (Index n = 0; n < g.n; ++n) {
      for (Index c = 0; c < g.c; ++c) {
        const double* plane = x + (n * g.c + c) * g.h * g.w;
        for (Index y = 0; y < g.h; ++y) {
          const Index oy = y / s, ky = y % s;
          const double* src = plane + y * g.w;
          for (Index kx = 0; kx < g.kw; ++kx) {
            double* dst = cols.row((c * g.kh + ky) * g.kw + kx).data() + n * g.positions() + oy * g.wo;
            for (Index ox = 0; ox < g.wo; ++ox) dst[ox] = src[ox * s + kx];
          }
        }
      }
    }
    return cols;
  }
  for (Index c = 0; c < g.c; ++c) {
    for (Index ky = 0; ky < g.kh; ++ky) {
      Index oy_lo, oy_hi;
      valid_range(g.ho, g.h, s, ky - pad, &oy_lo, &oy_hi);
      for (Index kx = 0; kx < g.kw; ++kx) {
        Index ox_lo, ox_hi;
        valid_range(g.wo, g.w, s, kx - pad, &ox_lo, &ox_hi);
        double* row = cols.row((c * g.kh + ky) * g.kw + kx).data();
        for (Index n = 0; n < g.n; ++n) {
          const double* plane = x + (n * g.c + c) * g.h * g.w;
          double* dst = row + n * g.positions();
          std::fill(dst, dst + oy_lo * g.wo, 0.0);
          for (Index oy = oy_lo; oy < oy_hi; ++oy) {
            const double* src = plane + (oy * s - pad + ky) * g.w + (kx - pad);
            double* out = dst + oy * g.wo;
            std::fill(out, out + ox_lo, 0.0);
            if (s == 1) {
              std::copy(src + ox_lo, src + ox_hi, out + ox_lo);
            } else {
              for (Index ox = ox_lo; ox < ox_hi; ++ox) out[ox] = src[ox * s];
            }
            std::fill(out + ox_hi, out + g.wo, 0.0);
          }
          std::fill(dst + oy_hi * g.wo, dst + g.positions(), 0.0);
        }
      }
    }
  }
  return cols;
}

Array col2im(const ConvGeometry& g, const RowMat& cols) {
  Array x = Array::Zero(g.n * g.c * g.h * g.w);
  const Index s = g.params.stride;
  const Index pad = g.params.padding;
  if (pad == 0 && s == g.kh && s == g.kw && g.ho * s == g.h && g.wo * s == g.w) {
    for (Index n = 0; n < g.n; ++n) {
      for (Index c = 0; c < g.c; ++c) {
        double* plane = x.data() + (n * g.c + c) * g.h * g.w;
        for (Index y = 0; y < g.h; ++y) {
          const Index oy = y / s, ky = y % s;
          double* dst = plane + y * g.w;
          for (Index kx = 0; kx < g.kw; ++kx) {
            const double* src = cols.row((c * g.kh + ky) * g.kw + kx).data() + n * g.positions() + oy * g.wo;
            for (Index ox = 0; ox < g.wo; ++ox) dst[ox * s + kx] = src[ox];
          }
        }
      }
    }
    return x;
  }
  for (Index c = 0; c < g.c; ++c) {
    for (Index ky = 0; ky < g.kh; ++ky) {
      Index oy_lo, oy_hi;
      valid_range(g.ho, g.h, s, ky - pad, &oy_lo, &oy_hi);
      for (Index kx = 0; kx < g.kw; ++kx) {
        Index ox_lo, ox_hi;
        valid_range(g.wo, g.w, s, kx - pad, &ox_lo, &ox_hi);
        const double* row = cols.row((c * g.kh + ky) * g.kw + kx).data();
        for (Index n = 0; n < g.n; ++n) {
          double* plane = x.data() + (n * g.c + c) * g.h * g.w;
          const double* src = row + n * g.positions();
          for (Index oy = oy_lo; oy < oy_hi; ++oy) {
            double* dst = plane + (oy * s - pad + ky) * g.w + (kx - pad);
            const double* in = src + oy * g.wo;
            for (Index ox = ox_lo; ox < ox_hi; ++ox) dst[ox * s] += in[ox];
          }
        }
      }
    }
  }
  return x;
}

// [N, O, P] <-> [O, N*P]
RowMat nchw_to_channel_major(const ConvGeometry& g, const double* y) {
  RowMat out(g.o, g.n * g.positions());
  const Index p = g.positions();
  for (Index n = 0; n < g.n; ++n) {
    for (Index o = 0; o < g.o; ++o) {
      std::copy(y + (n * g.o + o) * p, y + (n * g.o + o + 1) * p, out.row(o).data() + n * p);
    }
  }
  return out;
}

Array channel_major_to_nchw(const ConvGeometry& g, const RowMat& m) {
  Array y(g.n * g.o * g.positions());
  const Index p = g.positions();
  for (Index n = 0; n < g.n; ++n) {
    for (Index o = 0; o < g.o; ++o) {
      std::copy(m.row(o).data() + n * p, m.row(o).data() + (n + 1) * p,
                y.data() + (n * g.o + o) * p);
    }
  }
  return y;
}

Array pad_values(const Shape& shape, const Array& x, Index p, Shape* out_shape) {
  const Index h = shape[shape.size() - 2];
  const Index w = shape[shape.size() - 1];
  const Index planes = x.size() / (h * w);
  const Index hp = h + 2 * p;
  const Index wp = w + 2 * p;
  Array out = Array::Zero(planes * hp * wp);
  for (Index k = 0; k < planes; ++k) {
    for (Index y = 0; y < h; ++y) {
      std::copy(x.data() + (k * h + y) * w, x.data() + (k * h + y + 1) * w,
                out.data() + (k * hp + y + p) * wp + p);
    }
  }
  *out_shape = shape;
  (*out_shape)[shape.size() - 2] = hp;
  (*out_shape)[shape.size() - 1] = wp;
  return out;
}

}  // namespace

Index conv_output_size(Index input, Index kernel, Index stride, Index padding) {
  return (input + 2 * padding - kernel) / stride + 1;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  Broadcast mode = check_binary("add", a, b);
  Shape as = a.shape(), bs = b.shape();
  return make_result("add", binary_shape(mode, a, b),
                     binary_values(mode, a, b, [](double x, double y) { return x + y; }), {a, b},
                     [as, bs](const Tensor& g, const Tensor&, std::size_t i) {
                       return reduce_to(g, i == 0 ? as : bs);
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Broadcast mode = check_binary("sub", a, b);
  Shape as = a.shape(), bs = b.shape();
  return make_result("sub", binary_shape(mode, a, b),
                     binary_values(mode, a, b, [](double x, double y) { return x - y; }), {a, b},
                     [as, bs](const Tensor& g, const Tensor&, std::size_t i) {
                       return i == 0 ? reduce_to(g, as) : reduce_to(neg(g), bs);
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Broadcast mode = check_binary("mul", a, b);
  return make_result("mul", binary_shape(mode, a, b),
                     binary_values(mode, a, b, [](double x, double y) { return x * y; }), {a, b},
                     [a, b](const Tensor& g, const Tensor&, std::size_t i) {
                       return i == 0 ? reduce_to(mul(g, b), a.shape())
                                     : reduce_to(mul(g, a), b.shape());
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Broadcast mode = check_binary("div", a, b);
  return make_result("div", binary_shape(mode, a, b),
                     binary_values(mode, a, b, [](double x, double y) { return x / y; }), {a, b},
                     [a, b](const Tensor& g, const Tensor& out, std::size_t i) {
                       if (i == 0) return reduce_to(div(g, b), a.shape());
                       return reduce_to(neg(div(mul(g, out), b)), b.shape());
                     });
}

Tensor neg(const Tensor& a) {
  return make_result("neg", a.shape(), -a.array(), {a},
                     [](const Tensor& g, const Tensor&, std::size_t) { return neg(g); });
}

Tensor scale(const Tensor& a, double factor) {
  return make_result("scale", a.shape(), a.array() * factor, {a},
                     [factor](const Tensor& g, const Tensor&, std::size_t) {
                       return scale(g, factor);
                     });
}

Tensor add_scalar(const Tensor& a, double value) {
  return make_result("add_scalar", a.shape(), a.array() + value, {a},
                     [](const Tensor& g, const Tensor&, std::size_t) { return g; });
}

Tensor square(const Tensor& a) { return mul(a, a); }

// ---------------------------------------------------------------------------
// Nonlinearities

Tensor relu(const Tensor& x) {
  return make_result("relu", x.shape(), x.array().max(0.0), {x},
                     [x](const Tensor& g, const Tensor&, std::size_t) {
                       return mask_positive(g, x);
                     });
}

Tensor guided_relu(const Tensor& x) {
  return make_result("guided_relu", x.shape(), x.array().max(0.0), {x},
                     [x](const Tensor& g, const Tensor&, std::size_t) {
                       return mask_positive(mask_positive(g, x), g);
                     });
}

Tensor mask_positive(const Tensor& grad, const Tensor& x) {
  if (grad.shape() != x.shape()) shape_mismatch("mask_positive", grad.shape(), x.shape());
  Array values = (x.array() > 0.0).select(grad.array(), 0.0);
  return make_result("mask_positive", grad.shape(), std::move(values), {grad, x},
                     [x](const Tensor& g, const Tensor&, std::size_t i) {
                       return i == 0 ? mask_positive(g, x) : Tensor();
                     });
}

Tensor tanh(const Tensor& x) {
  return make_result("tanh", x.shape(), x.array().tanh(), {x},
                     [](const Tensor& g, const Tensor& y, std::size_t) {
                       return mul(g, add_scalar(neg(square(y)), 1.0));
                     });
}

Tensor exp(const Tensor& x) {
  return make_result("exp", x.shape(), x.array().exp(), {x},
                     [](const Tensor& g, const Tensor& y, std::size_t) { return mul(g, y); });
}

Tensor log(const Tensor& x) {
  return make_result("log", x.shape(), x.array().log(), {x},
                     [x](const Tensor& g, const Tensor&, std::size_t) { return div(g, x); });
}

Tensor abs(const Tensor& x) {
  return make_result("abs", x.shape(), x.array().abs(), {x},
                     [x](const Tensor& g, const Tensor&, std::size_t) {
                       Array sign = (x.array() > 0.0).cast<double>() -
                                    (x.array() < 0.0).cast<double>();
                       return mul(g, constant(x.shape(), std::move(sign)));
                     });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return make_result("clamp", x.shape(), x.array().max(lo).min(hi), {x},
                     [x, lo, hi](const Tensor& g, const Tensor&, std::size_t) {
                       Array inside =
                           ((x.array() >= lo) && (x.array() <= hi)).cast<double>();
                       return mul(g, constant(x.shape(), std::move(inside)));
                     });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_mismatch("minimum", a.shape(), b.shape());
  Array left = (a.array() <= b.array()).cast<double>();
  Array values = a.array().min(b.array());
  Shape shape = a.shape();
  return make_result("minimum", shape, std::move(values), {a, b},
                     [shape, left](const Tensor& g, const Tensor&, std::size_t i) {
                       Array m = i == 0 ? left : Array(1.0 - left);
                       return mul(g, constant(shape, std::move(m)));
                     });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_mismatch("matmul", a.shape(), b.shape());
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Array out(m * n);
  RowMap(out.data(), m, n).noalias() =
      ConstRowMap(a.array().data(), m, k) * ConstRowMap(b.array().data(), k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b},
                     [a, b](const Tensor& g, const Tensor&, std::size_t i) {
                       return i == 0 ? matmul_nt(g, b) : matmul_tn(a, g);
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) shape_mismatch("matmul_nt", a.shape(), b.shape());
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Array out(m * n);
  RowMap(out.data(), m, n).noalias() =
      ConstRowMap(a.array().data(), m, k) * ConstRowMap(b.array().data(), n, k).transpose();
  return make_result("matmul_nt", {m, n}, std::move(out), {a, b},
                     [a, b](const Tensor& g, const Tensor&, std::size_t i) {
                       return i == 0 ? matmul(g, b) : matmul_tn(g, a);
                     });
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) shape_mismatch("matmul_tn", a.shape(), b.shape());
  const Index k = a.dim(0), m = a.dim(1), n = b.dim(1);
  Array out(m * n);
  RowMap(out.data(), m, n).noalias() =
      ConstRowMap(a.array().data(), k, m).transpose() * ConstRowMap(b.array().data(), k, n);
  return make_result("matmul_tn", {m, n}, std::move(out), {a, b},
                     [a, b](const Tensor& g, const Tensor&, std::size_t i) {
                       return i == 0 ? matmul_nt(b, g) : matmul(a, g);
                     });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) bad_shape("transpose", a.shape(), "expected a matrix");
  const Index m = a.dim(0), n = a.dim(1);
  Array out(m * n);
  RowMap(out.data(), n, m) = ConstRowMap(a.array().data(), m, n).transpose();
  return make_result("transpose", {n, m}, std::move(out), {a},
                     [](const Tensor& g, const Tensor&, std::size_t) { return transpose(g); });
}

namespace {

using ColsPtr = std::shared_ptr<const RowMat>;

Tensor conv2d_weight_grad_impl(const Tensor& x, const Tensor& grad_out, const Shape& weight_shape,
                               Conv2dParams params, ColsPtr cols) {
  ConvGeometry g = conv_geometry("conv2d_weight_grad", x.shape(), weight_shape, params);
  Shape expected{g.n, g.o, g.ho, g.wo};
  if (grad_out.shape() != expected) shape_mismatch("conv2d_weight_grad", grad_out.shape(), expected);
  if (!cols) cols = std::make_shared<const RowMat>(im2col(g, x.array().data()));
  RowMat gy = nchw_to_channel_major(g, grad_out.array().data());
  Array gw(g.o * g.patch());
  RowMap(gw.data(), g.o, g.patch()).noalias() = gy * cols->transpose();
  Shape xs = x.shape();
  return make_result("conv2d_weight_grad", weight_shape, std::move(gw), {x, grad_out},
                     [x, grad_out, xs, params, cols](const Tensor& gw_in, const Tensor&,
                                                     std::size_t i) {
                       return i == 0 ? conv2d_input_grad(grad_out, gw_in, xs, params)
                                     : conv2d(x, gw_in, params);
                     });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dParams params) {
  ConvGeometry g = conv_geometry("conv2d", x.shape(), w.shape(), params);
  auto cols = std::make_shared<const RowMat>(im2col(g, x.array().data()));
  RowMat out(g.o, g.n * g.positions());
  out.noalias() = ConstRowMap(w.array().data(), g.o, g.patch()) * *cols;
  // The patch matrix is reused by the kernel gradient.
  if (!(grad_mode_enabled() && w.requires_grad())) cols.reset();
  Shape xs = x.shape(), ws = w.shape();
  return make_result("conv2d", {g.n, g.o, g.ho, g.wo}, channel_major_to_nchw(g, out), {x, w},
                     [x, w, xs, ws, params, cols](const Tensor& gy, const Tensor&, std::size_t i) {
                       return i == 0 ? conv2d_input_grad(gy, w, xs, params)
                                     : conv2d_weight_grad_impl(x, gy, ws, params, cols);
                     });
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& input_shape,
                         Conv2dParams params) {
  ConvGeometry g = conv_geometry("conv2d_input_grad", input_shape, w.shape(), params);
  Shape expected{g.n, g.o, g.ho, g.wo};
  if (grad_out.shape() != expected) shape_mismatch("conv2d_input_grad", grad_out.shape(), expected);
  RowMat gy = nchw_to_channel_major(g, grad_out.array().data());
  RowMat gcols(g.patch(), g.n * g.positions());
  gcols.noalias() = ConstRowMap(w.array().data(), g.o, g.patch()).transpose() * gy;
  Shape ws = w.shape();
  return make_result("conv2d_input_grad", input_shape, col2im(g, gcols), {grad_out, w},
                     [grad_out, w, ws, params](const Tensor& gx, const Tensor&, std::size_t i) {
                       return i == 0 ? conv2d(gx, w, params)
                                     : conv2d_weight_grad(gx, grad_out, ws, params);
                     });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& weight_shape,
                          Conv2dParams params) {
  return conv2d_weight_grad_impl(x, grad_out, weight_shape, params, nullptr);
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    shape_mismatch("add_channel_bias", x.shape(), bias.shape());
  }
  AxisView v = axis_view("add_channel_bias", x.shape(), 1);
  Array out = x.array();
  for (Index n = 0; n < v.outer; ++n) {
    for (Index c = 0; c < v.extent; ++c) {
      out.segment((n * v.extent + c) * v.inner, v.inner) += bias.array()[c];
    }
  }
  return make_result("add_channel_bias", x.shape(), std::move(out), {x, bias},
                     [](const Tensor& g, const Tensor&, std::size_t i) {
                       return i == 0 ? g : sum_to_channels(g);
                     });
}

Tensor sum_to_channels(const Tensor& x) {
  if (x.rank() < 2) bad_shape("sum_to_channels", x.shape(), "expected rank >= 2");
  AxisView v = axis_view("sum_to_channels", x.shape(), 1);
  Array out = Array::Zero(v.extent);
  for (Index n = 0; n < v.outer; ++n) {
    for (Index c = 0; c < v.extent; ++c) {
      out[c] += x.array().segment((n * v.extent + c) * v.inner, v.inner).sum();
    }
  }
  Shape xs = x.shape();
  return make_result("sum_to_channels", {v.extent}, std::move(out), {x},
                     [xs](const Tensor& g, const Tensor&, std::size_t) {
                       return add_channel_bias(Tensor::zeros(xs), g);
                     });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

Tensor sum(const Tensor& x) {
  Shape xs = x.shape();
  return make_result("sum", {}, Array::Constant(1, x.array().sum()), {x},
                     [xs](const Tensor& g, const Tensor&, std::size_t) { return fill_like(g, xs); });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) bad_shape("mean", x.shape(), "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_dim(const Tensor& x, std::size_t axis) {
  AxisView v = axis_view("sum_dim", x.shape(), axis);
  Array out = Array::Zero(v.outer * v.inner);
  for (Index o = 0; o < v.outer; ++o) {
    for (Index k = 0; k < v.extent; ++k) {
      out.segment(o * v.inner, v.inner) += x.array().segment((o * v.extent + k) * v.inner, v.inner);
    }
  }
  Index extent = v.extent;
  return make_result("sum_dim", drop_axis(x.shape(), axis), std::move(out), {x},
                     [axis, extent](const Tensor& g, const Tensor&, std::size_t) {
                       return expand_dim(g, axis, extent);
                     });
}

Tensor expand_dim(const Tensor& x, std::size_t axis, Index size) {
  if (axis > x.rank()) bad_shape("expand_dim", x.shape(), "axis out of range");
  Shape out_shape = x.shape();
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), size);
  AxisView v = axis_view("expand_dim", out_shape, axis);
  Array out(numel(out_shape));
  for (Index o = 0; o < v.outer; ++o) {
    for (Index k = 0; k < v.extent; ++k) {
      out.segment((o * v.extent + k) * v.inner, v.inner) = x.array().segment(o * v.inner, v.inner);
    }
  }
  return make_result("expand_dim", out_shape, std::move(out), {x},
                     [axis](const Tensor& g, const Tensor&, std::size_t) {
                       return sum_dim(g, axis);
                     });
}

std::vector<Index> argmax_dim(const Tensor& x, std::size_t axis) {
  AxisView v = axis_view("argmax_dim", x.shape(), axis);
  if (v.extent == 0) bad_shape("argmax_dim", x.shape(), "empty axis");
  std::vector<Index> index(static_cast<std::size_t>(v.outer * v.inner), 0);
  const double* d = x.array().data();
  for (Index o = 0; o < v.outer; ++o) {
    for (Index i = 0; i < v.inner; ++i) {
      Index best = 0;
      double best_value = d[o * v.extent * v.inner + i];
      for (Index k = 1; k < v.extent; ++k) {
        double value = d[(o * v.extent + k) * v.inner + i];
        if (value > best_value) {
          best_value = value;
          best = k;
        }
      }
      index[static_cast<std::size_t>(o * v.inner + i)] = best;
    }
  }
  return index;
}

Tensor max_dim(const Tensor& x, std::size_t axis) { return gather(x, axis, argmax_dim(x, axis)); }

Tensor max(const Tensor& x) {
  if (x.numel() == 0) bad_shape("max", x.shape(), "empty tensor");
  return reshape(max_dim(reshape(x, {1, x.numel()}), 1), {});
}

Tensor gather(const Tensor& x, std::size_t axis, const std::vector<Index>& index) {
  AxisView v = axis_view("gather", x.shape(), axis);
  if (static_cast<Index>(index.size()) != v.outer * v.inner) {
    bad_shape("gather", x.shape(), "index count " + std::to_string(index.size()) + " mismatch");
  }
  Array out(v.outer * v.inner);
  for (Index o = 0; o < v.outer; ++o) {
    for (Index i = 0; i < v.inner; ++i) {
      Index k = index[static_cast<std::size_t>(o * v.inner + i)];
      if (k < 0 || k >= v.extent) bad_shape("gather", x.shape(), "index out of range");
      out[o * v.inner + i] = x.array()[(o * v.extent + k) * v.inner + i];
    }
  }
  Shape xs = x.shape();
  return make_result("gather", drop_axis(x.shape(), axis), std::move(out), {x},
                     [xs, axis, index](const Tensor& g, const Tensor&, std::size_t) {
                       return scatter(g, axis, index, xs);
                     });
}

Tensor scatter(const Tensor& values, std::size_t axis, const std::vector<Index>& index,
               const Shape& shape) {
  AxisView v = axis_view("scatter", shape, axis);
  if (values.numel() != v.outer * v.inner || static_cast<Index>(index.size()) != values.numel()) {
    shape_mismatch("scatter", values.shape(), shape);
  }
  Array out = Array::Zero(numel(shape));
  for (Index o = 0; o < v.outer; ++o) {
    for (Index i = 0; i < v.inner; ++i) {
      Index k = index[static_cast<std::size_t>(o * v.inner + i)];
      if (k < 0 || k >= v.extent) bad_shape("scatter", shape, "index out of range");
      out[(o * v.extent + k) * v.inner + i] += values.array()[o * v.inner + i];
    }
  }
  Shape vs = values.shape();
  return make_result("scatter", shape, std::move(out), {values},
                     [axis, index, vs](const Tensor& g, const Tensor&, std::size_t) {
                       return reshape(gather(g, axis, index), vs);
                     });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel(shape) != x.numel()) shape_mismatch("reshape", x.shape(), shape);
  Shape xs = x.shape();
  return make_result("reshape", shape, x.array(), {x},
                     [xs](const Tensor& g, const Tensor&, std::size_t) { return reshape(g, xs); });
}

Tensor pad2d(const Tensor& x, Index padding) {
  if (x.rank() < 2 || padding < 0) bad_shape("pad2d", x.shape(), "expected rank >= 2");
  Shape out_shape;
  Array out = pad_values(x.shape(), x.array(), padding, &out_shape);
  return make_result("pad2d", out_shape, std::move(out), {x},
                     [padding](const Tensor& g, const Tensor&, std::size_t) {
                       return crop2d(g, padding);
                     });
}

Tensor crop2d(const Tensor& x, Index padding) {
  if (x.rank() < 2 || padding < 0) bad_shape("crop2d", x.shape(), "expected rank >= 2");
  const Shape& s = x.shape();
  const Index hp = s[s.size() - 2], wp = s[s.size() - 1];
  const Index h = hp - 2 * padding, w = wp - 2 * padding;
  if (h < 1 || w < 1) bad_shape("crop2d", s, "padding exceeds extent");
  const Index planes = x.numel() / (hp * wp);
  Array out(planes * h * w);
  for (Index k = 0; k < planes; ++k) {
    for (Index y = 0; y < h; ++y) {
      const double* src = x.array().data() + (k * hp + y + padding) * wp + padding;
      std::copy(src, src + w, out.data() + (k * h + y) * w);
    }
  }
  Shape out_shape = s;
  out_shape[s.size() - 2] = h;
  out_shape[s.size() - 1] = w;
  return make_result("crop2d", out_shape, std::move(out), {x},
                     [padding](const Tensor& g, const Tensor&, std::size_t) {
                       return pad2d(g, padding);
                     });
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  const Shape& part_shape = parts.front().shape();
  const Index part_size = parts.front().numel();
  Array out(part_size * static_cast<Index>(parts.size()));
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].shape() != part_shape) shape_mismatch("stack", part_shape, parts[i].shape());
    out.segment(static_cast<Index>(i) * part_size, part_size) = parts[i].array();
  }
  Shape out_shape = part_shape;
  out_shape.insert(out_shape.begin(), static_cast<Index>(parts.size()));
  return make_result("stack", out_shape, std::move(out), parts,
                     [part_shape](const Tensor& g, const Tensor&, std::size_t i) {
                       return reshape(narrow(g, static_cast<Index>(i), 1), part_shape);
                     });
}

Tensor narrow(const Tensor& x, Index start, Index length) {
  if (x.rank() < 1 || start < 0 || length < 0 || start + length > x.dim(0)) {
    bad_shape("narrow", x.shape(), "range [" + std::to_string(start) + ", " +
                                       std::to_string(start + length) + ") out of bounds");
  }
  const Index row = x.numel() / std::max<Index>(x.dim(0), 1);
  Shape out_shape = x.shape();
  out_shape[0] = length;
  Index total = x.dim(0);
  return make_result("narrow", out_shape, x.array().segment(start * row, length * row), {x},
                     [start, total](const Tensor& g, const Tensor&, std::size_t) {
                       return embed(g, start, total);
                     });
}

Tensor embed(const Tensor& x, Index start, Index total) {
  if (x.rank() < 1 || start < 0 || start + x.dim(0) > total) {
    bad_shape("embed", x.shape(), "does not fit in leading extent " + std::to_string(total));
  }
  const Index row = x.dim(0) > 0 ? x.numel() / x.dim(0) : 0;
  Shape out_shape = x.shape();
  out_shape[0] = total;
  Array out = Array::Zero(total * row);
  out.segment(start * row, x.numel()) = x.array();
  Index length = x.dim(0);
  return make_result("embed", out_shape, std::move(out), {x},
                     [start, length](const Tensor& g, const Tensor&, std::size_t) {
                       return narrow(g, start, length);
                     });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace {

Array log_softmax_values(const Tensor& x) {
  if (x.rank() < 1) bad_shape("softmax", x.shape(), "expected rank >= 1");
  const Index k = x.shape().back();
  const Index rows = x.numel() / k;
  Array out(x.numel());
  for (Index r = 0; r < rows; ++r) {
    auto in = x.array().segment(r * k, k);
    double m = in.maxCoeff();
    double lse = m + std::log((in - m).exp().sum());
    out.segment(r * k, k) = in - lse;
  }
  return out;
}

Tensor sum_last_expanded(const Tensor& t) {
  std::size_t last = t.rank() - 1;
  return expand_dim(sum_dim(t, last), last, t.shape().back());
}

}  // namespace

Tensor softmax(const Tensor& x) {
  return make_result("softmax", x.shape(), log_softmax_values(x).exp(), {x},
                     [](const Tensor& g, const Tensor& y, std::size_t) {
                       return mul(y, sub(g, sum_last_expanded(mul(g, y))));
                     });
}

Tensor log_softmax(const Tensor& x) {
  return make_result("log_softmax", x.shape(), log_softmax_values(x), {x},
                     [](const Tensor& g, const Tensor& y, std::size_t) {
                       return sub(g, mul(exp(y), sum_last_expanded(g)));
                     });
}

Tensor resize_bilinear(const Tensor& x, Index height, Index width) {
  if (x.rank() < 2) bad_shape("resize_bilinear", x.shape(), "expected rank >= 2");
  const Shape& s = x.shape();
  const Index h = s[s.size() - 2], w = s[s.size() - 1];
  const Index planes = x.numel() / (h * w);
  Array out(planes * height * width);
  auto source = [](Index dst, Index in, Index out_size, Index* lo, Index* hi, double* frac) {
    double pos = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) /
                     static_cast<double>(out_size) -
                 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(in - 1));
    *lo = static_cast<Index>(std::floor(pos));
    *hi = std::min(*lo + 1, in - 1);
    *frac = pos - static_cast<double>(*lo);
  };
  for (Index k = 0; k < planes; ++k) {
    const double* src = x.array().data() + k * h * w;
    for (Index y = 0; y < height; ++y) {
      Index y0, y1;
      double fy;
      source(y, h, height, &y0, &y1, &fy);
      for (Index xx = 0; xx < width; ++xx) {
        Index x0, x1;
        double fx;
        source(xx, w, width, &x0, &x1, &fx);
        double top = src[y0 * w + x0] * (1 - fx) + src[y0 * w + x1] * fx;
        double bottom = src[y1 * w + x0] * (1 - fx) + src[y1 * w + x1] * fx;
        out[(k * height + y) * width + xx] = top * (1 - fy) + bottom * fy;
      }
    }
  }
  Shape out_shape = s;
  out_shape[s.size() - 2] = height;
  out_shape[s.size() - 1] = width;
  return Tensor(out_shape, std::move(out));
}

}  // namespace digr
