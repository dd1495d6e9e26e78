#include "kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "maxl/errors.hpp"

namespace maxl::ag::detail {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

[[noreturn]] void shape_fail(OpKind kind, const std::string& detail) {
  throw ShapeError(std::string(op_name(kind)) + ": " + detail);
}

void require_arity(OpKind kind, const std::vector<Tensor>& in, std::size_t n) {
  if (in.size() != n) {
    shape_fail(kind, "expected " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
  }
  for (const Tensor& t : in) {
    if (!t.defined()) shape_fail(kind, "undefined input tensor");
  }
}

// Strides of `in` when broadcast against `out` (0 along broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    const std::size_t od = out.size() - in.size() + k;
    strides[od] = in[k] == 1 ? 0 : stride;
    stride *= in[k];
  }
  return strides;
}

// Calls f(flat_out, offset_a, offset_b) for every element of `out`, in
// row-major order. Adjacent axes that are contiguous in both inputs are
// merged first; the order of calls is unchanged by this.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = shape_numel(out);
  if (total == 0) return;
  if (out.empty()) {
    f(0, 0, 0);
    return;
  }
  // Merged axes, innermost last; size-1 axes are dropped.
  std::vector<std::size_t> ext, ma, mb;
  for (std::size_t d = 0; d < out.size(); ++d) {
    if (out[d] == 1) continue;
    if (!ext.empty() && ma.back() == sa[d] * out[d] && mb.back() == sb[d] * out[d]) {
      ext.back() *= out[d];
      ma.back() = sa[d];
      mb.back() = sb[d];
    } else {
      ext.push_back(out[d]);
      ma.push_back(sa[d]);
      mb.push_back(sb[d]);
    }
  }
  if (ext.empty()) {
    f(0, 0, 0);
    return;
  }
  const std::size_t rank = ext.size();
  const std::size_t inner = ext[rank - 1];
  const std::size_t ia = ma[rank - 1];
  const std::size_t ib = mb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0, i = 0;
  while (true) {
    if (ia == 1 && ib == 1) {
      for (std::size_t j = 0; j < inner; ++j) f(i + j, oa + j, ob + j);
    } else if (ia == 1 && ib == 0) {
      for (std::size_t j = 0; j < inner; ++j) f(i + j, oa + j, ob);
    } else if (ia == 0 && ib == 1) {
      for (std::size_t j = 0; j < inner; ++j) f(i + j, oa, ob + j);
    } else {
      for (std::size_t j = 0; j < inner; ++j) f(i + j, oa + j * ia, ob + j * ib);
    }
    i += inner;
    std::size_t d = rank - 1;
    bool done = true;
    while (d-- > 0) {
      ++idx[d];
      oa += ma[d];
      ob += mb[d];
      if (idx[d] < ext[d]) {
        done = false;
        break;
      }
      oa -= ma[d] * ext[d];
      ob -= mb[d] * ext[d];
      idx[d] = 0;
    }
    if (done) break;
  }
}

template <class Op>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, Op op) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), op_name(kind));
  std::vector<double> out(shape_numel(out_shape));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = op(pa[i], pb[i]);
  } else if (b.numel() == 1 && a.numel() == out.size()) {
    const double vb = pb[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = op(pa[i], vb);
  } else if (a.numel() == 1 && b.numel() == out.size()) {
    const double va = pa[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = op(va, pb[i]);
  } else {
    for_each_broadcast(out_shape, broadcast_strides(a.shape(), out_shape),
                       broadcast_strides(b.shape(), out_shape),
                       [&](std::size_t i, std::size_t oa, std::size_t ob) {
                         out[i] = op(pa[oa], pb[ob]);
                       });
  }
  return Tensor(out_shape, std::move(out));
}

template <class Op>
Tensor unary(const Tensor& x, Op op) {
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = op(px[i]);
  return Tensor(x.shape(), std::move(out));
}

// Eigen switches from coefficient-wise to blocked products around 20.
constexpr std::size_t kBlockedProductMin = 64;

template <typename L, typename R, typename D>
void product(const L& a, const R& b, D& c, bool trans_a, bool trans_b) {
  if (!trans_a && !trans_b) c.noalias() = a * b;
  else if (trans_a && !trans_b) c.noalias() = a.transpose() * b;
  else if (!trans_a && trans_b) c.noalias() = a * b.transpose();
  else c.noalias() = a.transpose() * b.transpose();
}

// c = op(a) * op(b) with a stored row-major as [ar, ac] and b as [br, bc].
// Shapes must already agree; c must hold m * n values.
void gemm(const double* a, std::size_t ar, std::size_t ac, bool ta, const double* b,
          std::size_t br, std::size_t bc, bool tb, double* c) {
  const std::size_t m = ta ? ac : ar;
  const std::size_t k = ta ? ar : ac;
  const std::size_t n = tb ? br : bc;
  if (m == 0 || n == 0) return;
  Eigen::Map<const RowMat> A(a, static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
  Eigen::Map<const RowMat> B(b, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
  Eigen::Map<RowMat> C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (matmul_precision() == Precision::F32) {
    const RowMatF Af = A.cast<float>();
    const RowMatF Bf = B.cast<float>();
    RowMatF Cf(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    product(Af, Bf, Cf, ta, tb);
    C = Cf.cast<double>();
  } else if (m == 1 || n == 1 || m + n + k < kBlockedProductMin) {
    // Eigen's small-product and matrix-vector kernels peel loops by address
    // alignment, so equal inputs at different addresses could round
    // differently. Aligned copies pin the summation order.
    const RowMat Ad = A;
    const RowMat Bd = B;
    RowMat Cd(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    product(Ad, Bd, Cd, ta, tb);
    C = Cd;
  } else {
    // The blocked kernel packs its operands, so alignment does not matter.
    product(A, B, C, ta, tb);
  }
}

Tensor eval_matmul(const Tensor& a, const Tensor& b, const OpAttrs& attrs) {
  if (a.dim() != 2 || b.dim() != 2) {
    shape_fail(OpKind::MatMul, "operands must be 2-D, got " + shape_str(a.shape()) + " and " +
                                   shape_str(b.shape()));
  }
  const std::size_t m = attrs.trans_a ? a.shape()[1] : a.shape()[0];
  const std::size_t k = attrs.trans_a ? a.shape()[0] : a.shape()[1];
  const std::size_t k2 = attrs.trans_b ? b.shape()[1] : b.shape()[0];
  const std::size_t n = attrs.trans_b ? b.shape()[0] : b.shape()[1];
  if (k != k2) {
    shape_fail(OpKind::MatMul, "inner dimensions differ: " + shape_str(a.shape()) +
                                   (attrs.trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                                   (attrs.trans_b ? "^T" : ""));
  }
  std::vector<double> out(m * n, 0.0);
  gemm(a.data().data(), a.shape()[0], a.shape()[1], attrs.trans_a, b.data().data(), b.shape()[0],
       b.shape()[1], attrs.trans_b, out.data());
  return Tensor({m, n}, std::move(out));
}

Tensor eval_sum_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  if (axis >= x.dim()) {
    shape_fail(OpKind::SumAxis, "axis " + std::to_string(axis) + " out of range for " +
                                    shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.shape()[d];
  for (std::size_t d = axis + 1; d < x.dim(); ++d) inner *= x.shape()[d];
  const std::size_t len = x.shape()[axis];
  std::vector<double> out(outer * inner, 0.0);
  const double* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const double* row = px + (o * len + l) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i];
    }
  }
  Shape shape = x.shape();
  if (keepdim) shape[axis] = 1;
  else shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  return Tensor(std::move(shape), std::move(out));
}

Tensor eval_softmax(const Tensor& x) {
  if (x.dim() == 0) shape_fail(OpKind::Softmax, "needs at least one axis");
  const std::size_t len = x.shape().back();
  if (len == 0) shape_fail(OpKind::Softmax, "empty last axis");
  const std::size_t rows = x.numel() / len;
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = px + r * len;
    double* dst = out.data() + r * len;
    const double mx = *std::max_element(src, src + len);
    double total = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      dst[i] = std::exp(src[i] - mx);
      total += dst[i];
    }
    for (std::size_t i = 0; i < len; ++i) dst[i] /= total;
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor eval_sum_to(const Tensor& x, const Shape& target) {
  Shape joined;
  try {
    joined = broadcast_shape(target, x.shape(), op_name(OpKind::SumTo));
  } catch (const ShapeError&) {
    joined.clear();
  }
  if (joined != x.shape()) {
    shape_fail(OpKind::SumTo, "cannot reduce " + shape_str(x.shape()) + " to " + shape_str(target));
  }
  if (target == x.shape()) return x.detach();
  std::vector<double> out(shape_numel(target), 0.0);
  const double* px = x.data().data();
  for_each_broadcast(x.shape(), broadcast_strides(x.shape(), x.shape()),
                     broadcast_strides(target, x.shape()),
                     [&](std::size_t, std::size_t ox, std::size_t ot) { out[ot] += px[ox]; });
  return Tensor(target, std::move(out));
}

Tensor eval_broadcast_to(const Tensor& x, const Shape& target) {
  Shape joined;
  try {
    joined = broadcast_shape(x.shape(), target, op_name(OpKind::BroadcastTo));
  } catch (const ShapeError&) {
    joined.clear();
  }
  if (joined != target) {
    shape_fail(OpKind::BroadcastTo,
               "cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(target));
  }
  if (target == x.shape()) return x.detach();
  std::vector<double> out(shape_numel(target));
  const double* px = x.data().data();
  for_each_broadcast(target, broadcast_strides(x.shape(), target), broadcast_strides(target, target),
                     [&](std::size_t i, std::size_t ox, std::size_t) { out[i] = px[ox]; });
  return Tensor(target, std::move(out));
}

void check_geometry(OpKind kind, const ConvGeometry& g) {
  if (g.kernel_h == 0 || g.kernel_w == 0 || g.stride == 0) shape_fail(kind, "zero kernel or stride");
  if (g.height + 2 * g.pad < g.kernel_h || g.width + 2 * g.pad < g.kernel_w) {
    shape_fail(kind, "kernel larger than padded input");
  }
}

Tensor eval_im2col(const Tensor& x, const OpAttrs& attrs) {
  if (x.dim() != 4) shape_fail(OpKind::Im2Col, "input must be [N,C,H,W], got " + shape_str(x.shape()));
  ConvGeometry g = attrs.conv;
  g.channels = x.shape()[1];
  g.height = x.shape()[2];
  g.width = x.shape()[3];
  check_geometry(OpKind::Im2Col, g);
  const std::size_t n_batch = x.shape()[0];
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t cols = g.channels * g.kernel_h * g.kernel_w;
  std::vector<double> out(n_batch * oh * ow * cols, 0.0);
  const double* px = x.data().data();
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double* row = out.data() + ((n * oh + y) * ow + xx) * cols;
        for (std::size_t c = 0; c < g.channels; ++c) {
          const double* plane = px + (n * g.channels + c) * g.height * g.width;
          for (std::size_t i = 0; i < g.kernel_h; ++i) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + i) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t j = 0; j < g.kernel_w; ++j) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx * g.stride + j) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              row[(c * g.kernel_h + i) * g.kernel_w + j] =
                  plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
  return Tensor({n_batch * oh * ow, cols}, std::move(out));
}

Tensor eval_col2im(const Tensor& c, const OpAttrs& attrs) {
  const Shape& target = attrs.shape;
  if (target.size() != 4) shape_fail(OpKind::Col2Im, "target must be [N,C,H,W]");
  ConvGeometry g = attrs.conv;
  g.channels = target[1];
  g.height = target[2];
  g.width = target[3];
  check_geometry(OpKind::Col2Im, g);
  const std::size_t n_batch = target[0];
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t cols = g.channels * g.kernel_h * g.kernel_w;
  if (c.dim() != 2 || c.shape()[0] != n_batch * oh * ow || c.shape()[1] != cols) {
    shape_fail(OpKind::Col2Im, "columns " + shape_str(c.shape()) + " do not match target " +
                                   shape_str(target));
  }
  std::vector<double> out(shape_numel(target), 0.0);
  const double* pc = c.data().data();
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const double* row = pc + ((n * oh + y) * ow + xx) * cols;
        for (std::size_t ch = 0; ch < g.channels; ++ch) {
          double* plane = out.data() + (n * g.channels + ch) * g.height * g.width;
          for (std::size_t i = 0; i < g.kernel_h; ++i) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + i) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t j = 0; j < g.kernel_w; ++j) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx * g.stride + j) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)] +=
                  row[(ch * g.kernel_h + i) * g.kernel_w + j];
            }
          }
        }
      }
    }
  }
  return Tensor(target, std::move(out));
}

Tensor eval_permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.dim();
  if (perm.size() != rank) shape_fail(OpKind::Permute, "permutation rank mismatch");
  std::vector<bool> seen(rank, false);
  for (std::size_t p : perm) {
    if (p >= rank || seen[p]) shape_fail(OpKind::Permute, "invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * x.shape()[d];
  Shape out_shape(rank);
  std::vector<std::size_t> gather_strides(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = x.shape()[perm[d]];
    gather_strides[d] = in_strides[perm[d]];
  }
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  const std::vector<std::size_t> zero(rank, 0);
  for_each_broadcast(out_shape, gather_strides, zero,
                     [&](std::size_t i, std::size_t ox, std::size_t) { out[i] = px[ox]; });
  return Tensor(std::move(out_shape), std::move(out));
}

struct ConvDims {
  std::size_t batch = 0, in_ch = 0, height = 0, width = 0;
  std::size_t out_ch = 0, kh = 0, kw = 0, pad = 0, oh = 0, ow = 0;

  std::size_t rows() const { return in_ch * kh * kw; }  // of one sample's columns
  std::size_t pixels() const { return oh * ow; }
  Shape x_shape() const { return {batch, in_ch, height, width}; }
  Shape w_shape() const { return {out_ch, in_ch, kh, kw}; }
  Shape y_shape() const { return {batch, out_ch, oh, ow}; }
};

ConvDims conv_dims(OpKind kind, const Shape& x, const Shape& w, std::size_t pad) {
  if (x.size() != 4 || w.size() != 4 || x[1] != w[1]) {
    shape_fail(kind, "input " + shape_str(x) + " and weight " + shape_str(w) + " are incompatible");
  }
  ConvDims d;
  d.batch = x[0];
  d.in_ch = x[1];
  d.height = x[2];
  d.width = x[3];
  d.out_ch = w[0];
  d.kh = w[2];
  d.kw = w[3];
  d.pad = pad;
  if (d.kh == 0 || d.kw == 0 || d.height + 2 * pad < d.kh || d.width + 2 * pad < d.kw) {
    shape_fail(kind, "kernel " + shape_str(w) + " does not fit padded input " + shape_str(x));
  }
  d.oh = d.height + 2 * pad - d.kh + 1;
  d.ow = d.width + 2 * pad - d.kw + 1;
  return d;
}

void require_shape(OpKind kind, const Tensor& t, const Shape& want, const char* what) {
  if (t.shape() != want) {
    shape_fail(kind, std::string(what) + " " + shape_str(t.shape()) + ", expected " + shape_str(want));
  }
}

// Valid output columns [lo, hi) for kernel column j: 0 <= xx + j - pad < width.
std::pair<std::size_t, std::size_t> valid_span(std::size_t j, std::size_t pad, std::size_t width,
                                               std::size_t out) {
  const std::size_t lo = std::min(out, pad > j ? pad - j : 0);
  const std::size_t hi = std::min(out, width + pad > j ? width + pad - j : 0);
  return {lo, std::max(lo, hi)};
}

// One sample's columns as [C*kh*kw, oh*ow]; padding reads as zero.
void im2col_sample(const ConvDims& d, const double* x, double* cols) {
  for (std::size_t c = 0; c < d.in_ch; ++c) {
    const double* plane = x + c * d.height * d.width;
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        double* row = cols + ((c * d.kh + i) * d.kw + j) * d.pixels();
        const auto [lo, hi] = valid_span(j, d.pad, d.width, d.ow);
        for (std::size_t y = 0; y < d.oh; ++y) {
          double* dst = row + y * d.ow;
          const std::size_t iy = y + i;
          if (iy < d.pad || iy - d.pad >= d.height) {
            std::fill(dst, dst + d.ow, 0.0);
            continue;
          }
          const double* src = plane + (iy - d.pad) * d.width + j;
          std::fill(dst, dst + lo, 0.0);
          for (std::size_t xx = lo; xx < hi; ++xx) dst[xx] = src[xx - d.pad];
          std::fill(dst + hi, dst + d.ow, 0.0);
        }
      }
    }
  }
}

// Adjoint of im2col_sample: accumulates columns back into one sample.
void col2im_sample(const ConvDims& d, const double* cols, double* x) {
  for (std::size_t c = 0; c < d.in_ch; ++c) {
    double* plane = x + c * d.height * d.width;
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        const double* row = cols + ((c * d.kh + i) * d.kw + j) * d.pixels();
        const auto [lo, hi] = valid_span(j, d.pad, d.width, d.ow);
        for (std::size_t y = 0; y < d.oh; ++y) {
          const std::size_t iy = y + i;
          if (iy < d.pad || iy - d.pad >= d.height) continue;
          const double* src = row + y * d.ow;
          double* dst = plane + (iy - d.pad) * d.width + j;
          for (std::size_t xx = lo; xx < hi; ++xx) dst[xx - d.pad] += src[xx];
        }
      }
    }
  }
}

std::vector<double>& conv_scratch(std::size_t n) {
  thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

// y[n] = W[O, CKK] * cols(x[n]), sample by sample.
Tensor eval_conv2d(const Tensor& x, const Tensor& w, std::size_t pad) {
  const ConvDims d = conv_dims(OpKind::Conv2d, x.shape(), w.shape(), pad);
  std::vector<double> out(shape_numel(d.y_shape()), 0.0);
  std::vector<double>& cols = conv_scratch(d.rows() * d.pixels());
  const std::size_t x_step = d.in_ch * d.height * d.width, y_step = d.out_ch * d.pixels();
  for (std::size_t n = 0; n < d.batch; ++n) {
    im2col_sample(d, x.data().data() + n * x_step, cols.data());
    gemm(w.data().data(), d.out_ch, d.rows(), false, cols.data(), d.rows(), d.pixels(), false,
         out.data() + n * y_step);
  }
  return Tensor(d.y_shape(), std::move(out));
}

// Gradient of conv2d w.r.t. its input: dx[n] = col2im(W^T * g[n]).
Tensor eval_conv2d_input_grad(const Tensor& g, const Tensor& w, const OpAttrs& attrs) {
  const ConvDims d = conv_dims(OpKind::Conv2dInputGrad, attrs.shape, w.shape(), attrs.pad);
  require_shape(OpKind::Conv2dInputGrad, g, d.y_shape(), "output gradient");
  std::vector<double> out(shape_numel(d.x_shape()), 0.0);
  std::vector<double>& cols = conv_scratch(d.rows() * d.pixels());
  const std::size_t x_step = d.in_ch * d.height * d.width, y_step = d.out_ch * d.pixels();
  for (std::size_t n = 0; n < d.batch; ++n) {
    gemm(w.data().data(), d.out_ch, d.rows(), true, g.data().data() + n * y_step, d.out_ch,
         d.pixels(), false, cols.data());
    col2im_sample(d, cols.data(), out.data() + n * x_step);
  }
  return Tensor(d.x_shape(), std::move(out));
}

// Gradient of conv2d w.r.t. its weight: dW = sum_n g[n] * cols(x[n])^T.
Tensor eval_conv2d_weight_grad(const Tensor& x, const Tensor& g, const OpAttrs& attrs) {
  const ConvDims d = conv_dims(OpKind::Conv2dWeightGrad, x.shape(), attrs.shape, attrs.pad);
  require_shape(OpKind::Conv2dWeightGrad, g, d.y_shape(), "output gradient");
  const std::size_t wn = d.out_ch * d.rows();
  std::vector<double> out(wn, 0.0);
  std::vector<double>& cols = conv_scratch(d.rows() * d.pixels() + wn);
  double* part = cols.data() + d.rows() * d.pixels();
  const std::size_t x_step = d.in_ch * d.height * d.width, y_step = d.out_ch * d.pixels();
  for (std::size_t n = 0; n < d.batch; ++n) {
    im2col_sample(d, x.data().data() + n * x_step, cols.data());
    gemm(g.data().data() + n * y_step, d.out_ch, d.pixels(), false, cols.data(), d.rows(),
         d.pixels(), true, part);
    for (std::size_t i = 0; i < wn; ++i) out[i] += part[i];
  }
  return Tensor(d.w_shape(), std::move(out));
}

Tensor elementwise_mask(const Tensor& a, const Tensor& b, const Shape& out_shape) {
  std::vector<double> mask(shape_numel(out_shape));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each_broadcast(out_shape, broadcast_strides(a.shape(), out_shape),
                     broadcast_strides(b.shape(), out_shape),
                     [&](std::size_t i, std::size_t oa, std::size_t ob) {
                       mask[i] = pa[oa] >= pb[ob] ? 1.0 : 0.0;
                     });
  return Tensor(out_shape, std::move(mask));
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t da = k < rank - a.size() ? 1 : a[k - (rank - a.size())];
    const std::size_t db = k < rank - b.size() ? 1 : b[k - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    }
    out[k] = da == 1 ? db : da;
  }
  return out;
}

Tensor evaluate(OpKind kind, const std::vector<Tensor>& in, const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::Add:
      require_arity(kind, in, 2);
      return binary(kind, in[0], in[1], [](double x, double y) { return x + y; });
    case OpKind::Sub:
      require_arity(kind, in, 2);
      return binary(kind, in[0], in[1], [](double x, double y) { return x - y; });
    case OpKind::Mul:
      require_arity(kind, in, 2);
      return binary(kind, in[0], in[1], [](double x, double y) { return x * y; });
    case OpKind::Div:
      require_arity(kind, in, 2);
      return binary(kind, in[0], in[1], [](double x, double y) { return x / y; });
    case OpKind::ElementwiseMax:
      require_arity(kind, in, 2);
      return binary(kind, in[0], in[1], [](double x, double y) { return x >= y ? x : y; });
    case OpKind::MatMul:
      require_arity(kind, in, 2);
      return eval_matmul(in[0], in[1], attrs);
    case OpKind::Relu:
      require_arity(kind, in, 1);
      return unary(in[0], [](double x) { return x > 0.0 ? x : 0.0; });
    case OpKind::Log:
      require_arity(kind, in, 1);
      return unary(in[0], [](double x) { return std::log(x); });
    case OpKind::Exp:
      require_arity(kind, in, 1);
      return unary(in[0], [](double x) { return std::exp(x); });
    case OpKind::Power: {
      require_arity(kind, in, 1);
      const double p = attrs.scalar;
      if (p == 0.0) return Tensor::ones(in[0].shape());
      if (p == 1.0) return in[0].detach();
      if (p == 2.0) return unary(in[0], [](double x) { return x * x; });
      return unary(in[0], [p](double x) { return std::pow(x, p); });
    }
    case OpKind::ScalarMul: {
      require_arity(kind, in, 1);
      const double c = attrs.scalar;
      return unary(in[0], [c](double x) { return x * c; });
    }
    case OpKind::Sum: {
      require_arity(kind, in, 1);
      double total = 0.0;
      for (double v : in[0].data()) total += v;
      return Tensor::scalar(total);
    }
    case OpKind::SumAxis:
      require_arity(kind, in, 1);
      return eval_sum_axis(in[0], attrs.axis, attrs.keepdim);
    case OpKind::Softmax:
      require_arity(kind, in, 1);
      return eval_softmax(in[0]);
    case OpKind::Reshape:
      require_arity(kind, in, 1);
      if (shape_numel(attrs.shape) != in[0].numel()) {
        shape_fail(kind, "cannot reshape " + shape_str(in[0].shape()) + " to " +
                             shape_str(attrs.shape));
      }
      return in[0].reshaped_view(attrs.shape);
    case OpKind::SumTo:
      require_arity(kind, in, 1);
      return eval_sum_to(in[0], attrs.shape);
    case OpKind::BroadcastTo:
      require_arity(kind, in, 1);
      return eval_broadcast_to(in[0], attrs.shape);
    case OpKind::Gather: {
      require_arity(kind, in, 1);
      if (!attrs.index || attrs.index->size() != shape_numel(attrs.shape)) {
        shape_fail(kind, "index size does not match output shape " + shape_str(attrs.shape));
      }
      const auto& idx = *attrs.index;
      std::vector<double> out(idx.size());
      const double* px = in[0].data().data();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= in[0].numel()) shape_fail(kind, "index out of range");
        out[i] = px[idx[i]];
      }
      return Tensor(attrs.shape, std::move(out));
    }
    case OpKind::ScatterAdd: {
      require_arity(kind, in, 1);
      if (!attrs.index || attrs.index->size() != in[0].numel()) {
        shape_fail(kind, "index size does not match input " + shape_str(in[0].shape()));
      }
      const auto& idx = *attrs.index;
      std::vector<double> out(shape_numel(attrs.shape), 0.0);
      const double* px = in[0].data().data();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= out.size()) shape_fail(kind, "index out of range");
        out[idx[i]] += px[i];
      }
      return Tensor(attrs.shape, std::move(out));
    }
    case OpKind::Im2Col:
      require_arity(kind, in, 1);
      return eval_im2col(in[0], attrs);
    case OpKind::Col2Im:
      require_arity(kind, in, 1);
      return eval_col2im(in[0], attrs);
    case OpKind::Permute:
      require_arity(kind, in, 1);
      return eval_permute(in[0], attrs.perm);
    case OpKind::Conv2d:
      require_arity(kind, in, 2);
      return eval_conv2d(in[0], in[1], attrs.pad);
    case OpKind::Conv2dInputGrad:
      require_arity(kind, in, 2);
      return eval_conv2d_input_grad(in[0], in[1], attrs);
    case OpKind::Conv2dWeightGrad:
      require_arity(kind, in, 2);
      return eval_conv2d_weight_grad(in[0], in[1], attrs);
    default:
      throw UnknownOpError("evaluate: no kernel for " + std::string(op_name(kind)));
  }
}

std::vector<Tensor> vjp(OpKind kind, const std::vector<Tensor>& in, const OpAttrs& attrs,
                        const Tensor& y, const Tensor& g, const std::vector<bool>& needs) {
  std::vector<Tensor> out(in.size());
  switch (kind) {
    case OpKind::Add:
      if (needs[0]) out[0] = sum_to(g, in[0].shape());
      if (needs[1]) out[1] = sum_to(g, in[1].shape());
      break;
    case OpKind::Sub:
      if (needs[0]) out[0] = sum_to(g, in[0].shape());
      if (needs[1]) out[1] = sum_to(neg(g), in[1].shape());
      break;
    case OpKind::Mul:
      if (needs[0]) out[0] = sum_to(mul(g, in[1]), in[0].shape());
      if (needs[1]) out[1] = sum_to(mul(g, in[0]), in[1].shape());
      break;
    case OpKind::Div:
      if (needs[0]) out[0] = sum_to(div(g, in[1]), in[0].shape());
      if (needs[1]) out[1] = sum_to(neg(div(mul(g, y), in[1])), in[1].shape());
      break;
    case OpKind::MatMul: {
      const Tensor& a = in[0];
      const Tensor& b = in[1];
      const bool ta = attrs.trans_a, tb = attrs.trans_b;
      if (needs[0]) {
        if (!ta && !tb) out[0] = matmul(g, b, false, true);
        else if (!ta && tb) out[0] = matmul(g, b, false, false);
        else if (ta && !tb) out[0] = matmul(b, g, false, true);
        else out[0] = matmul(b, g, true, true);
      }
      if (needs[1]) {
        if (!ta && !tb) out[1] = matmul(a, g, true, false);
        else if (!ta && tb) out[1] = matmul(g, a, true, false);
        else if (ta && !tb) out[1] = matmul(a, g, false, false);
        else out[1] = matmul(g, a, true, true);
      }
      break;
    }
    case OpKind::Relu: {
      // Second derivative of relu is zero everywhere, so the mask is a constant.
      std::vector<double> mask(in[0].numel());
      const auto xs = in[0].data();
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = xs[i] > 0.0 ? 1.0 : 0.0;
      out[0] = mul(g, Tensor(in[0].shape(), std::move(mask)));
      break;
    }
    case OpKind::Log:
      out[0] = div(g, in[0]);
      break;
    case OpKind::Exp:
      out[0] = mul(g, y);
      break;
    case OpKind::Power: {
      const double p = attrs.scalar;
      if (p == 0.0) out[0] = Tensor::zeros(in[0].shape());
      else if (p == 1.0) out[0] = g;
      else out[0] = scalar_mul(mul(g, power(in[0], p - 1.0)), p);
      break;
    }
    case OpKind::ScalarMul:
      out[0] = scalar_mul(g, attrs.scalar);
      break;
    case OpKind::Sum:
      out[0] = broadcast_to(g, in[0].shape());
      break;
    case OpKind::SumAxis: {
      Shape kept = in[0].shape();
      kept[attrs.axis] = 1;
      out[0] = broadcast_to(attrs.keepdim ? g : reshape(g, kept), in[0].shape());
      break;
    }
    case OpKind::Softmax: {
      const Tensor gy = mul(g, y);
      const Tensor s = sum(gy, y.dim() - 1, true);
      out[0] = sub(gy, mul(y, s));
      break;
    }
    case OpKind::Reshape:
      out[0] = reshape(g, in[0].shape());
      break;
    case OpKind::ElementwiseMax: {
      const Tensor mask = elementwise_mask(in[0], in[1], y.shape());
      if (needs[0]) out[0] = sum_to(mul(g, mask), in[0].shape());
      if (needs[1]) {
        std::vector<double> inv(mask.numel());
        const auto m = mask.data();
        for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 - m[i];
        out[1] = sum_to(mul(g, Tensor(mask.shape(), std::move(inv))), in[1].shape());
      }
      break;
    }
    case OpKind::SumTo:
      out[0] = broadcast_to(g, in[0].shape());
      break;
    case OpKind::BroadcastTo:
      out[0] = sum_to(g, in[0].shape());
      break;
    case OpKind::Gather:
      out[0] = scatter_add(g, attrs.index, in[0].shape());
      break;
    case OpKind::ScatterAdd:
      out[0] = gather(g, attrs.index, in[0].shape());
      break;
    case OpKind::Im2Col: {
      ConvGeometry geo = attrs.conv;
      geo.channels = in[0].shape()[1];
      geo.height = in[0].shape()[2];
      geo.width = in[0].shape()[3];
      out[0] = col2im(g, geo, in[0].shape()[0]);
      break;
    }
    case OpKind::Col2Im:
      out[0] = im2col(g, attrs.conv.kernel_h, attrs.conv.kernel_w, attrs.conv.pad);
      break;
    case OpKind::Permute: {
      std::vector<std::size_t> inverse(attrs.perm.size());
      for (std::size_t d = 0; d < attrs.perm.size(); ++d) inverse[attrs.perm[d]] = d;
      out[0] = permute(g, std::move(inverse));
      break;
    }
    // The three conv ops are bilinear and mutually adjoint, so their rules
    // close over the same set and stay differentiable.
    case OpKind::Conv2d:
      if (needs[0]) out[0] = conv2d_input_grad(g, in[1], in[0].shape(), attrs.pad);
      if (needs[1]) out[1] = conv2d_weight_grad(in[0], g, in[1].shape(), attrs.pad);
      break;
    case OpKind::Conv2dInputGrad:
      // in = (output gradient, weight); g has the input's shape.
      if (needs[0]) out[0] = conv2d(g, in[1], attrs.pad);
      if (needs[1]) out[1] = conv2d_weight_grad(g, in[0], in[1].shape(), attrs.pad);
      break;
    case OpKind::Conv2dWeightGrad:
      // in = (input, output gradient); g has the weight's shape.
      if (needs[0]) out[0] = conv2d_input_grad(in[1], g, in[0].shape(), attrs.pad);
      if (needs[1]) out[1] = conv2d(in[0], g, attrs.pad);
      break;
    default:
      throw UnknownOpError("backward: no rule for " + std::string(op_name(kind)));
  }
  return out;
}

}  // namespace maxl::ag::detail
