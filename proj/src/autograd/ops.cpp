#include <string>

#include "maxl/autograd.hpp"
#include "maxl/errors.hpp"

namespace maxl::ag {
namespace {

thread_local Precision g_precision = Precision::F64;

Tensor unary_op(OpKind kind, const Tensor& x, OpAttrs attrs = {}) {
  return record(kind, {x}, std::move(attrs));
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::MatMul: return "matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::Power: return "power";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Softmax: return "softmax";
    case OpKind::Reshape: return "reshape";
    case OpKind::MaxPool: return "max-pool";
    case OpKind::ElementwiseMax: return "elementwise-max";
    case OpKind::ScalarMul: return "scalar-mul";
    case OpKind::SumAxis: return "sum-axis";
    case OpKind::SumTo: return "sum-to";
    case OpKind::BroadcastTo: return "broadcast-to";
    case OpKind::Gather: return "gather";
    case OpKind::ScatterAdd: return "scatter-add";
    case OpKind::Im2Col: return "im2col";
    case OpKind::Col2Im: return "col2im";
    case OpKind::Permute: return "permute";
    case OpKind::Conv2dInputGrad: return "conv2d-input-grad";
    case OpKind::Conv2dWeightGrad: return "conv2d-weight-grad";
  }
  return "unknown";
}

Precision matmul_precision() noexcept { return g_precision; }
void set_matmul_precision(Precision p) noexcept { g_precision = p; }

Tensor add(const Tensor& a, const Tensor& b) { return record(OpKind::Add, {a, b}); }
Tensor sub(const Tensor& a, const Tensor& b) { return record(OpKind::Sub, {a, b}); }
Tensor mul(const Tensor& a, const Tensor& b) { return record(OpKind::Mul, {a, b}); }
Tensor div(const Tensor& a, const Tensor& b) { return record(OpKind::Div, {a, b}); }
Tensor maximum(const Tensor& a, const Tensor& b) { return record(OpKind::ElementwiseMax, {a, b}); }

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  OpAttrs attrs;
  attrs.trans_a = trans_a;
  attrs.trans_b = trans_b;
  return record(OpKind::MatMul, {a, b}, std::move(attrs));
}

Tensor relu(const Tensor& x) { return unary_op(OpKind::Relu, x); }
Tensor log(const Tensor& x) { return unary_op(OpKind::Log, x); }
Tensor exp(const Tensor& x) { return unary_op(OpKind::Exp, x); }

Tensor power(const Tensor& x, double exponent) {
  OpAttrs attrs;
  attrs.scalar = exponent;
  return unary_op(OpKind::Power, x, std::move(attrs));
}

Tensor scalar_mul(const Tensor& x, double factor) {
  OpAttrs attrs;
  attrs.scalar = factor;
  return unary_op(OpKind::ScalarMul, x, std::move(attrs));
}

Tensor neg(const Tensor& x) { return scalar_mul(x, -1.0); }

Tensor sum(const Tensor& x) { return unary_op(OpKind::Sum, x); }

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.keepdim = keepdim;
  return unary_op(OpKind::SumAxis, x, std::move(attrs));
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scalar_mul(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  if (axis >= x.dim()) {
    throw ShapeError("mean: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
  if (x.shape()[axis] == 0) throw ShapeError("mean: empty axis");
  return scalar_mul(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.shape()[axis]));
}

Tensor softmax(const Tensor& x) { return unary_op(OpKind::Softmax, x); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape == x.shape()) return x;
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return unary_op(OpKind::Reshape, x, std::move(attrs));
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (shape == x.shape()) return x;
  OpAttrs attrs;
  attrs.shape = shape;
  return unary_op(OpKind::SumTo, x, std::move(attrs));
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (shape == x.shape()) return x;
  OpAttrs attrs;
  attrs.shape = shape;
  return unary_op(OpKind::BroadcastTo, x, std::move(attrs));
}

Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> index,
              Shape out_shape) {
  OpAttrs attrs;
  attrs.index = std::move(index);
  attrs.shape = std::move(out_shape);
  return unary_op(OpKind::Gather, x, std::move(attrs));
}

Tensor scatter_add(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> index,
                   Shape out_shape) {
  OpAttrs attrs;
  attrs.index = std::move(index);
  attrs.shape = std::move(out_shape);
  return unary_op(OpKind::ScatterAdd, x, std::move(attrs));
}

Tensor im2col(const Tensor& x, std::size_t kernel_h, std::size_t kernel_w, std::size_t pad) {
  OpAttrs attrs;
  attrs.conv.kernel_h = kernel_h;
  attrs.conv.kernel_w = kernel_w;
  attrs.conv.pad = pad;
  return unary_op(OpKind::Im2Col, x, std::move(attrs));
}

Tensor col2im(const Tensor& cols, const ConvGeometry& geometry, std::size_t batch) {
  OpAttrs attrs;
  attrs.conv = geometry;
  attrs.shape = {batch, geometry.channels, geometry.height, geometry.width};
  return unary_op(OpKind::Col2Im, cols, std::move(attrs));
}

Tensor permute(const Tensor& x, std::vector<std::size_t> perm) {
  OpAttrs attrs;
  attrs.perm = std::move(perm);
  return unary_op(OpKind::Permute, x, std::move(attrs));
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad) {
  if (x.dim() != 4 || w.dim() != 4 || x.shape()[1] != w.shape()[1]) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " and weight " +
                     shape_str(w.shape()) + " are incompatible");
  }
  const std::size_t kh = w.shape()[2], kw = w.shape()[3];
  if (x.shape()[2] + 2 * pad < kh || x.shape()[3] + 2 * pad < kw) {
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  OpAttrs attrs;
  attrs.pad = pad;
  return record(OpKind::Conv2d, {x, w}, std::move(attrs));
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& x_shape,
                         std::size_t pad) {
  OpAttrs attrs;
  attrs.pad = pad;
  attrs.shape = x_shape;
  return record(OpKind::Conv2dInputGrad, {grad_out, w}, std::move(attrs));
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& w_shape,
                          std::size_t pad) {
  OpAttrs attrs;
  attrs.pad = pad;
  attrs.shape = w_shape;
  return record(OpKind::Conv2dWeightGrad, {x, grad_out}, std::move(attrs));
}

Tensor max_pool2d(const Tensor& x, std::size_t window) {
  if (x.dim() != 4) throw ShapeError("max-pool: input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (window == 0 || x.shape()[2] < window || x.shape()[3] < window) {
    throw ShapeError("max-pool: window " + std::to_string(window) + " does not fit " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const std::size_t oh = h / window, ow = w / window;
  auto index = std::make_shared<std::vector<std::size_t>>(n * c * oh * ow);
  const auto xs = x.data();
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = base + (y * window) * w + xx * window;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t at = base + (y * window + i) * w + xx * window + j;
            if (xs[at] > xs[best]) best = at;
          }
        }
        (*index)[o++] = best;
      }
    }
  }
  return gather(x, std::move(index), {n, c, oh, ow});
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps) {
  if (!(eps > 0.0)) throw InvalidArgumentError("finite_diff_grad: eps must be positive");
  std::vector<double> base = x.to_vector();
  std::vector<double> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const double orig = base[i];
    base[i] = orig + eps;
    const double up = f(Tensor(x.shape(), base));
    base[i] = orig - eps;
    const double down = f(Tensor(x.shape(), base));
    base[i] = orig;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return Tensor(x.shape(), std::move(grad));
}

}  // namespace maxl::ag
