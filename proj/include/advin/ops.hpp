#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "advin/autograd.hpp"
#include "advin/tensor.hpp"

namespace advin {

// Differentiable primitives. Every op reads its tape from its first operand,
// checks shapes (throwing ShapeError that names the op and the shapes), and
// records itself for the backward pass.

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// x (N,C,H,W), weight (O,C,KH,KW), optional bias (O) -> (N,O,OH,OW) with
/// OH = (H + 2*padding - KH) / stride + 1.
Var conv2d(Var x, Var weight, Var bias, Conv2dOptions opts = {});
/// x (N,D), weight (O,D), optional bias (O) -> (N,O).
Var linear(Var x, Var weight, Var bias);
Var relu(Var x);
/// Window k, stride s, no padding; ties resolve to the first maximum.
Var max_pool2d(Var x, std::size_t kernel, std::size_t stride);
Var avg_pool2d(Var x, std::size_t kernel, std::size_t stride);
/// (N,C,H,W) -> (N,C).
Var global_avg_pool(Var x);
/// (N,...) -> (N, prod(...)).
Var flatten(Var x);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, float factor);
/// Sum of all elements -> shape (1).
Var sum(Var x);

enum class Reduction { kMean, kSum };

/// Softmax cross-entropy of logits (N,K) against integer labels, reduced to
/// shape (1).
Var softmax_cross_entropy(Var logits, std::span<const int> labels,
                          Reduction reduction = Reduction::kMean);

// Non-differentiable helpers over plain tensors.

/// Per-row cross-entropy of logits (N,K).
std::vector<float> cross_entropy_rows(const Tensor& logits,
                                      std::span<const int> labels);
/// Per-row argmax of (N,K); ties go to the smallest class index.
std::vector<int> argmax_rows(const Tensor& logits);
Tensor softmax_rows(const Tensor& logits);

}  // namespace advin
