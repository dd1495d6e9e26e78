#include <atomic>
#include <string>

#include "kernels.hpp"
#include "maxl/autograd.hpp"
#include "maxl/errors.hpp"

namespace maxl::ag {
namespace {

std::uint64_t next_generation() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;

}  // namespace

Tape* active_tape() noexcept { return g_active_tape; }
bool grad_enabled() noexcept { return g_grad_enabled; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = previous_; }

namespace {
class GradModeScope {
 public:
  explicit GradModeScope(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
  ~GradModeScope() { g_grad_enabled = previous_; }

 private:
  bool previous_;
};
}  // namespace

Tape::Tape() : generation_(next_generation()) {}

bool Tape::owns(const Tensor& t) const noexcept {
  return t.tape_ == this && t.generation_ == generation_ && t.node_ < nodes_.size();
}

void Tape::clear() {
  nodes_.clear();
  generation_ = next_generation();
}

Tensor Tape::leaf(const Tensor& value, bool requires_grad) {
  if (!value.defined()) throw ShapeError("leaf: undefined tensor");
  Tensor out = value.detach();
  out.tape_ = this;
  out.generation_ = generation_;
  out.node_ = nodes_.size();
  out.requires_grad_ = requires_grad;
  nodes_.push_back(Node{OpKind::Leaf, {}, {}, out});
  return out;
}

Tensor Tape::append(OpKind kind, std::vector<Tensor> inputs, OpAttrs attrs, Tensor value) {
  Tensor out = std::move(value);
  out.tape_ = this;
  out.generation_ = generation_;
  out.node_ = nodes_.size();
  out.requires_grad_ = true;
  nodes_.push_back(Node{kind, std::move(inputs), std::move(attrs), out});
  return out;
}

GradMap Tape::backward(const Tensor& loss, bool retain, std::span<const Tensor> wrt) {
  if (loss.numel() != 1) {
    throw NonScalarLossError("backward: loss must be scalar, got shape " +
                             shape_str(loss.shape()));
  }
  if (!owns(loss)) {
    throw DetachedLossError("backward: loss is not on the active tape (released or never recorded)");
  }

  const std::size_t count = loss.node() + 1;
  std::vector<char> relevant(count, 0);
  relevant[loss.node()] = 1;
  for (std::size_t i = count; i-- > 0;) {
    if (!relevant[i]) continue;
    for (const Tensor& in : nodes_[i].inputs) {
      if (owns(in) && in.requires_grad()) relevant[in.node()] = 1;
    }
  }
  if (!wrt.empty()) {
    std::vector<char> depends(count, 0);
    for (const Tensor& w : wrt) {
      if (owns(w) && w.node() < count) depends[w.node()] = 1;
    }
    for (std::size_t i = 0; i < count; ++i) {
      if (depends[i]) continue;
      for (const Tensor& in : nodes_[i].inputs) {
        if (owns(in) && depends[in.node()]) {
          depends[i] = 1;
          break;
        }
      }
    }
    for (std::size_t i = 0; i < count; ++i) relevant[i] = relevant[i] && depends[i];
  }

  std::vector<Tensor> grads(count);
  {
    TapeScope scope(*this);
    GradModeScope mode(retain);
    grads[loss.node()] = Tensor::ones(loss.shape());
    for (std::size_t i = count; i-- > 0;) {
      if (!relevant[i] || !grads[i].defined()) continue;
      if (nodes_[i].kind == OpKind::Leaf) continue;
      // Copies: recording below may grow the deque.
      const OpKind kind = nodes_[i].kind;
      const std::vector<Tensor> inputs = nodes_[i].inputs;
      const OpAttrs attrs = nodes_[i].attrs;
      const Tensor output = nodes_[i].output;
      std::vector<bool> needs(inputs.size());
      bool any = false;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        needs[k] = owns(inputs[k]) && inputs[k].requires_grad() && relevant[inputs[k].node()];
        any = any || needs[k];
      }
      if (!any) continue;
      std::vector<Tensor> in_grads = detail::vjp(kind, inputs, attrs, output, grads[i], needs);
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!needs[k] || !in_grads[k].defined()) continue;
        Tensor& slot = grads[inputs[k].node()];
        slot = slot.defined() ? add(slot, in_grads[k]) : in_grads[k];
      }
      // Upstream gradient no longer needed.
      grads[i] = Tensor();
    }
  }

  GradMap result;
  auto emit = [&](const Tensor& target) {
    Tensor g = (target.node() < count && grads[target.node()].defined())
                   ? grads[target.node()]
                   : Tensor::zeros(target.shape());
    if (retain && !owns(g)) g = leaf(g, false);
    result.set(target.node(), std::move(g));
  };
  if (wrt.empty()) {
    for (std::size_t i = 0; i < count; ++i) {
      if (relevant[i] && nodes_[i].kind == OpKind::Leaf && nodes_[i].output.requires_grad()) {
        emit(nodes_[i].output);
      }
    }
  } else {
    for (const Tensor& w : wrt) {
      if (!owns(w)) {
        throw DetachedLossError("backward: requested gradient for a tensor not on this tape");
      }
      emit(w);
    }
  }
  if (!retain) clear();
  return result;
}

GradMap backward(const Tensor& loss, bool retain, std::span<const Tensor> wrt) {
  auto* tape = const_cast<Tape*>(loss.tape());
  if (tape == nullptr || !tape->owns(loss)) {
    throw DetachedLossError("backward: loss is not on the active tape (released or never recorded)");
  }
  return tape->backward(loss, retain, wrt);
}

Tensor record(OpKind kind, std::vector<Tensor> inputs, OpAttrs attrs) {
  auto arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::Leaf:
      throw UnknownOpError("record: leaf is not an op; use Tape::leaf");
    case OpKind::Mean:
      arity(1);
      return attrs.reduce_all ? mean(inputs[0]) : mean(inputs[0], attrs.axis, attrs.keepdim);
    case OpKind::MaxPool:
      arity(1);
      return max_pool2d(inputs[0], attrs.window);
    case OpKind::Add:
    case OpKind::Sub:
    case OpKind::Mul:
    case OpKind::Div:
    case OpKind::MatMul:
    case OpKind::Relu:
    case OpKind::Log:
    case OpKind::Exp:
    case OpKind::Power:
    case OpKind::Sum:
    case OpKind::Softmax:
    case OpKind::Reshape:
    case OpKind::ElementwiseMax:
    case OpKind::ScalarMul:
    case OpKind::SumAxis:
    case OpKind::SumTo:
    case OpKind::BroadcastTo:
    case OpKind::Gather:
    case OpKind::ScatterAdd:
    case OpKind::Im2Col:
    case OpKind::Col2Im:
    case OpKind::Permute:
    case OpKind::Conv2d:
    case OpKind::Conv2dInputGrad:
    case OpKind::Conv2dWeightGrad:
      break;
    default:
      throw UnknownOpError("record: unknown op kind " + std::to_string(static_cast<int>(kind)));
  }

  Tensor value = detail::evaluate(kind, inputs, attrs);
  if (!grad_enabled()) return value;
  bool any = false;
  for (const Tensor& in : inputs) any = any || in.requires_grad();
  if (!any) return value;
  Tape* tape = active_tape();
  for (const Tensor& in : inputs) {
    if (in.requires_grad() && (tape == nullptr || !tape->owns(in))) {
      throw DetachedLossError(std::string(op_name(kind)) +
                              ": input requires grad but is not on the active tape");
    }
  }
  return tape->append(kind, std::move(inputs), std::move(attrs), std::move(value));
}

}  // namespace maxl::ag
