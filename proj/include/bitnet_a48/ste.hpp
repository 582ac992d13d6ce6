#pragma once

// Straight-through backward rules for the non-differentiable forward ops.

#include "bitnet_a48/sparsify.hpp"
#include "bitnet_a48/tensor.hpp"

namespace ba48 {

enum class SteOp { Quantizer, TopK };

/// Quantizers pass the upstream gradient through unchanged. Top-K passes it
/// only through kept entries unless dense_topk is set.
template <typename T>
Tensor<T> ste_backward(SteOp op, const Tensor<T>& upstream, const TopKMask* mask = nullptr,
                       bool dense_topk = false) {
  Tensor<T> g = upstream;
  if (op == SteOp::TopK && !dense_topk) {
    require(mask != nullptr, "ste_backward: top-k adjoint needs the forward mask");
    apply_mask(g, *mask);
  }
  return g;
}

}  // namespace ba48
