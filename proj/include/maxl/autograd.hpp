#pragma once

// Reverse-mode automatic differentiation over an eagerly evaluated tape.
//
// Every backward rule is written in terms of the same recordable ops, so a
// backward pass run with `retain = true` leaves its gradients on the tape as
// ordinary nodes. A second backward through those nodes yields
// Hessian-vector products, which is what the meta step of the label
// generator needs.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace maxl::ag {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;
inline constexpr NodeId kNoNode = static_cast<NodeId>(-1);

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  MatMul,
  Conv2d,
  Relu,
  Log,
  Exp,
  Power,
  Sum,
  Mean,
  Softmax,
  Reshape,
  MaxPool,
  ElementwiseMax,
  ScalarMul,
  // Primitives used by composite ops and by backward rules.
  SumAxis,
  SumTo,
  BroadcastTo,
  Gather,
  ScatterAdd,
  Im2Col,
  Col2Im,
  Permute,
  Conv2dInputGrad,
  Conv2dWeightGrad,
};

std::string_view op_name(OpKind kind);

struct ConvGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t pad = 0;
  std::size_t stride = 1;

  std::size_t out_h() const { return (height + 2 * pad - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * pad - kernel_w) / stride + 1; }
};

struct OpAttrs {
  double scalar = 0.0;  // power exponent or scalar-mul factor
  bool trans_a = false;
  bool trans_b = false;
  bool reduce_all = true;  // mean: whole tensor, else along `axis`
  std::size_t axis = 0;
  bool keepdim = false;
  std::size_t pad = 0;     // conv2d
  std::size_t window = 2;  // max-pool
  Shape shape;             // reshape / sum-to / broadcast-to / gather target
  std::vector<std::size_t> perm;
  ConvGeometry conv;
  std::shared_ptr<const std::vector<std::size_t>> index;  // gather / scatter
};

class Tape;

class Tensor {
 public:
  Tensor() = default;
  // Constant tensor; throws ShapeError when product(shape) != data.size().
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor full(Shape shape, double value);
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_ ? data_->size() : 0; }
  bool defined() const noexcept { return static_cast<bool>(data_); }
  std::span<const double> data() const noexcept;
  double at(std::size_t flat_index) const;
  double item() const;
  std::vector<double> to_vector() const { return {data().begin(), data().end()}; }

  bool requires_grad() const noexcept { return requires_grad_; }
  NodeId node() const noexcept { return node_; }
  const Tape* tape() const noexcept { return tape_; }

  // Same values, no tape association.
  Tensor detach() const;
  // Constant view of the same buffer under another shape of equal size.
  Tensor reshaped_view(Shape shape) const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::uint64_t generation_ = 0;
  NodeId node_ = kNoNode;
  bool requires_grad_ = false;
};

// Gradients keyed by the node id of the requires-grad tensor they belong to.
class GradMap {
 public:
  void set(NodeId id, Tensor grad) { entries_[id] = std::move(grad); }
  bool contains(const Tensor& param) const { return entries_.count(param.node()) != 0; }
  const Tensor& at(const Tensor& param) const;
  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::map<NodeId, Tensor> entries_;
};

class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `value` as a leaf of this tape.
  Tensor leaf(const Tensor& value, bool requires_grad = true);

  // Appends an already-evaluated node. Used by ag::record.
  Tensor append(OpKind kind, std::vector<Tensor> inputs, OpAttrs attrs, Tensor value);

  // Gradients of scalar `loss` with respect to `wrt` (or, when `wrt` is empty,
  // every requires-grad leaf the loss depends on). With `retain` the backward
  // computation is itself recorded and the tape stays usable; without it the
  // tape is released afterwards.
  GradMap backward(const Tensor& loss, bool retain, std::span<const Tensor> wrt = {});

  bool owns(const Tensor& t) const noexcept;
  std::size_t size() const noexcept { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    OpKind kind;
    std::vector<Tensor> inputs;
    OpAttrs attrs;
    Tensor output;
  };

  std::deque<Node> nodes_;
  std::uint64_t generation_;
};

// The tape new ops are recorded on; one per thread.
Tape* active_tape() noexcept;
bool grad_enabled() noexcept;

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool previous_;
};

enum class Precision { F64, F32 };

// Precision of the matmul kernel on this thread. Storage is always 64-bit.
Precision matmul_precision() noexcept;
void set_matmul_precision(Precision p) noexcept;

// Evaluates `kind` eagerly and records it on the active tape when any input
// requires grad and recording is enabled.
Tensor record(OpKind kind, std::vector<Tensor> inputs, OpAttrs attrs = {});

// backward on the tape that owns `loss`.
GradMap backward(const Tensor& loss, bool retain, std::span<const Tensor> wrt = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
// x: [N, C, H, W], w: [O, C, kh, kw], unit stride.
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad);
// Adjoints of conv2d in its input and in its weight; used by its backward rule.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, const Shape& x_shape,
                         std::size_t pad);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, const Shape& w_shape,
                          std::size_t pad);
Tensor relu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor power(const Tensor& x, double exponent);
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim);
// Along the last axis.
Tensor softmax(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
// Non-overlapping window over the last two axes of [N, C, H, W].
Tensor max_pool2d(const Tensor& x, std::size_t window);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& x, double factor);
Tensor neg(const Tensor& x);

Tensor sum_to(const Tensor& x, const Shape& shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape);
Tensor scatter_add(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> index,
                   Shape out_shape);
Tensor im2col(const Tensor& x, std::size_t kernel_h, std::size_t kernel_w, std::size_t pad);
Tensor col2im(const Tensor& cols, const ConvGeometry& geometry, std::size_t batch);
Tensor permute(const Tensor& x, std::vector<std::size_t> perm);

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps). Test oracle.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps);

}  // namespace maxl::ag
