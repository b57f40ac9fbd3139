#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "inn/tape.hpp"
#include "inn/tensor.hpp"

// Differentiable operations. Every op checks its output for NaN/Inf and
// records a backward node on `tape` when any input requires a gradient.
namespace inn::ops {

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, float factor);
// Sum of all elements, shape [1].
Tensor sum(Tape& tape, const Tensor& a);

// Gradient at exactly zero is zero.
Tensor relu(Tape& tape, const Tensor& x);

// Cross-correlation of [N,C,H,W] with [F,C,kh,kw] plus per-filter bias.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding);

// Non-overlapping window max. Ties route the gradient to the first element in
// row-major window order.
Tensor maxpool2d(Tape& tape, const Tensor& input, int window);

// [N, ...] -> [N, prod(...)].
Tensor flatten(Tape& tape, const Tensor& input);

// input[N,D] * weight[D,M] + bias[M].
Tensor dense(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias);

enum class Reduction { mean, sum };

// Batch mean (or sum) of -log softmax(logits)[label], computed with the row
// maximum subtracted.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels,
                             Reduction reduction = Reduction::mean);

// Batch mean (or sum) of -log sum_k softmax(logits)[c*group + k], the
// negative log of the probability mass of base class c summed over its
// `group` composite slots.
Tensor marginal_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> base_labels, int group,
                              Reduction reduction = Reduction::mean);

// Per-row values of the two losses above, no tape involvement.
std::vector<float> cross_entropy_rows(const Tensor& logits, std::span<const int> labels);
std::vector<float> marginal_cross_entropy_rows(const Tensor& logits, std::span<const int> base_labels, int group);

// Row-wise softmax of a [N,L] tensor, no tape involvement.
std::vector<float> softmax_rows(const Tensor& logits);

}  // namespace inn::ops

namespace inn::kernels {

// Fixed-order blocked dot product; result depends only on the inputs.
float dot(const float* a, const float* b, std::size_t n);
// y += alpha * x
void axpy(float alpha, const float* x, float* y, std::size_t n);

}  // namespace inn::kernels
