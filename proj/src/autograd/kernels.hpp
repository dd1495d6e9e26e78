#pragma once

#include <string_view>
#include <vector>

#include "maxl/autograd.hpp"

namespace maxl::ag::detail {

// Numpy-style right-aligned broadcast; throws ShapeError naming `op`.
Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op);

// Validates the inputs of a primitive op and computes its value.
Tensor evaluate(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs);

// Vector-Jacobian products for a primitive op, built from recordable ops.
// Entries whose `needs` flag is false are left undefined.
std::vector<Tensor> vjp(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs,
                        const Tensor& output, const Tensor& grad,
                        const std::vector<bool>& needs);

}  // namespace maxl::ag::detail
